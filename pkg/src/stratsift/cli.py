"""Command line entry point.

Failures exit nonzero and print one JSON line ``{"error": ..., "message": ...}``
on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from .core import KeypointSet, PipelineConfig, load_config, load_image, read_raster
from .harness import (
    DatasetManifest,
    Protocol,
    TransformSpec,
    generate_synthetic,
    ingest,
    run_experiment,
    write_reports,
)
from .matching import match_pipeline
from .sift import detect


def _infer_radius(path: str, radius: int | None) -> int:
    if radius is not None:
        return radius
    h, w = read_raster(path).shape
    return min(h, w) // 2


def _load_side(path: str, radius: int | None, config: PipelineConfig, strict: bool) -> KeypointSet:
    if path.endswith(".json"):
        kps = KeypointSet.load(path, radius_r=radius)
        if kps.radius_r is None:
            raise ValueError(f"{path} carries no radius; pass it explicitly")
        return kps
    image = load_image(path, _infer_radius(path, radius), strict=strict)
    return detect(image, config.detector)


def cmd_detect(args) -> int:
    config = load_config(args.config)
    image = load_image(args.image, _infer_radius(args.image, args.radius), strict=not args.crop)
    kps = detect(image, config.detector)
    if args.out:
        kps.save(args.out)
    print(json.dumps({"image": args.image, "radius_r": image.radius_r, "keypoints": kps.cardinality}))
    return 0


def cmd_match(args) -> int:
    config = load_config(args.config)
    gallery = _load_side(args.gallery, args.gallery_radius, config, not args.crop)
    probe = _load_side(args.probe, args.probe_radius, config, not args.crop)
    result = match_pipeline(gallery, probe, config)
    if args.dump:
        Path(args.dump).write_text(json.dumps(result.to_json(), indent=2) + "\n")
    eta = result.etas
    print(json.dumps({
        "eta_R": eta[0], "eta_Rinter": eta[1], "eta_Rnew": eta[2],
        "decision": ev.decide(eta[2], config.decision_threshold),
    }))
    return 0


def cmd_synth(args) -> int:
    spec = TransformSpec(
        rotation_range=(args.rot_min, args.rot_max),
        scale_range=(args.scale_min, args.scale_max),
        noise_sigma=args.noise,
    )
    manifest = generate_synthetic(args.out, args.seed, args.subjects, args.instances, spec, args.radius)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"), "samples": len(manifest.samples)}))
    return 0


def cmd_ingest(args) -> int:
    manifest = ingest(args.root, args.layout, args.radius,
                      Protocol(impostor=args.impostor, seed=args.seed))
    out = Path(args.out)
    manifest = DatasetManifest(str(Path(args.root).resolve()), manifest.samples, manifest.protocol)
    manifest.save(out)
    print(json.dumps({"manifest": str(out), "samples": len(manifest.samples)}))
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config)
    manifest = DatasetManifest.load(args.manifest)
    result = run_experiment(manifest, config, args.stratum, args.out,
                            workers=args.workers, cache_dir=args.cache_dir)
    print(json.dumps({"stratum": ev.normalize_stratum(args.stratum), **result.report.to_json(),
                      "comparisons": len(result.records), "failures": len(result.failures)}))
    return 0


def cmd_sweep(args) -> int:
    records = ev.read_scores_csv(args.scores)
    sweeps = write_reports(records, args.out)
    summary = {s: sw.best().to_json() for s, sw in sweeps.items()}
    print(json.dumps({"best": summary}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stratsift", description="Stratified SIFT iris matching")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("detect", help="detect keypoints in one image")
    d.add_argument("image")
    d.add_argument("--radius", type=int, help="iris radius (default: half the raster side)")
    d.add_argument("--out", help="write keypoints JSON here")
    d.add_argument("--config")
    d.add_argument("--crop", action="store_true", help="center-crop instead of rejecting size mismatch")
    d.set_defaults(func=cmd_detect)

    m = sub.add_parser("match", help="run the three strata on two images or keypoint files")
    m.add_argument("gallery")
    m.add_argument("probe")
    m.add_argument("--config")
    m.add_argument("--dump", help="write the diagnostic JSON here")
    m.add_argument("--gallery-radius", type=int)
    m.add_argument("--probe-radius", type=int)
    m.add_argument("--crop", action="store_true")
    m.set_defaults(func=cmd_match)

    s = sub.add_parser("synth", help="generate a synthetic dataset with known transforms")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--subjects", type=int, default=5)
    s.add_argument("--instances", type=int, default=3)
    s.add_argument("--radius", type=int, default=64)
    s.add_argument("--rot-min", type=float, default=0.0)
    s.add_argument("--rot-max", type=float, default=360.0)
    s.add_argument("--scale-min", type=float, default=0.8)
    s.add_argument("--scale-max", type=float, default=1.2)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    i = sub.add_parser("ingest", help="build a manifest from a dataset directory")
    i.add_argument("root")
    i.add_argument("--layout", choices=["folders", "csv"], default="folders")
    i.add_argument("--radius", type=int)
    i.add_argument("--impostor", choices=["one_per_other_subject", "all_pairs"],
                   default="one_per_other_subject")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_ingest)

    e = sub.add_parser("eval", help="score every protocol pair and report error measures")
    e.add_argument("--manifest", required=True)
    e.add_argument("--stratum", choices=["1", "2", "3"], default="3")
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--cache-dir", help="keypoint cache (overrides $STRATA_CACHE_DIR)")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", help="threshold curves and plots from a score CSV")
    w.add_argument("--scores", required=True)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
