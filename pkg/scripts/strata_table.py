"""FAR/FRR/ACC/d' per stratum on a seeded synthetic dataset.

    python3 scripts/strata_table.py --subjects 10 --instances 3 --ratio 0.9 --out runs/table

Scores are computed once; every stratum is evaluated at the equal-error
threshold of Strata I so the rows are comparable.
"""

import argparse
import json
import tempfile
from pathlib import Path

from stratsift import evaluation as ev
from stratsift.core import PipelineConfig
from stratsift.harness import generate_synthetic, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--subjects", type=int, default=10)
    ap.add_argument("--instances", type=int, default=3)
    ap.add_argument("--radius", type=int, default=64)
    ap.add_argument("--ratio", type=float, nargs="+", default=[0.8, 0.9])
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default=None, help="keep dataset, scores and plots here")
    args = ap.parse_args()

    out = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="strata_"))
    manifest = generate_synthetic(out / "data", args.seed, args.subjects, args.instances, radius=args.radius)
    rows = []
    for ratio in args.ratio:
        cfg = PipelineConfig(nn_ratio_threshold=ratio)
        res = run_experiment(manifest, cfg, out_dir=out / f"ratio_{ratio}", workers=args.workers,
                             cache_dir=out / "cache")
        thr = ev.equal_error_threshold([r.at("I") for r in res.records])
        print(f"\nnn ratio {ratio}  threshold {thr}  ({len(res.records)} comparisons)")
        print(f"{'stratum':8s} {'FAR':>7s} {'FRR':>7s} {'ACC':>7s} {'d_prime':>8s}")
        for s in ev.STRATA:
            rep = ev.compute_error_measures([r.at(s) for r in res.records], thr)
            print(f"{s:8s} {rep.far:7.2f} {rep.frr:7.2f} {rep.acc:7.2f} {rep.d_prime:8.3f}")
            rows.append({"ratio": ratio, "stratum": s, **rep.to_json()})
    (out / "table.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(f"\nwrote {out / 'table.json'}")


if __name__ == "__main__":
    main()
