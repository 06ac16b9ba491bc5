"""Verification decisions and error measures over match-count scores.

Scores are match counts: a comparison is accepted when its count reaches the
decision threshold. Rates are percentages.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

Label = Literal["genuine", "impostor"]
STRATA = ("I", "II", "III")
SCORE_COLUMNS = ("gallery_id", "probe_id", "label", "eta_R", "eta_Rinter", "eta_Rnew")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ComparisonScore:
    gallery_id: str
    probe_id: str
    eta_final: int
    label: Label
    stratum_used: str = "III"

    @property
    def genuine(self) -> bool:
        return self.label == "genuine"


@dataclass(frozen=True)
class ScoreRecord:
    """One comparison with its match count at every stratum."""

    gallery_id: str
    probe_id: str
    label: Label
    eta_R: int
    eta_Rinter: int
    eta_Rnew: int

    def at(self, stratum: str | int) -> ComparisonScore:
        stratum = normalize_stratum(stratum)
        eta = {"I": self.eta_R, "II": self.eta_Rinter, "III": self.eta_Rnew}[stratum]
        return ComparisonScore(self.gallery_id, self.probe_id, eta, self.label, stratum)


def normalize_stratum(stratum: str | int) -> str:
    s = str(stratum).upper()
    s = {"1": "I", "2": "II", "3": "III"}.get(s, s)
    if s not in STRATA:
        raise EvaluationError(f"unknown stratum {stratum!r}")
    return s


@dataclass(frozen=True)
class ErrorReport:
    far: float
    frr: float
    acc: float
    d_prime: float
    threshold: int

    def to_json(self) -> dict:
        return {
            "far": self.far,
            "frr": self.frr,
            "acc": self.acc,
            "d_prime": self.d_prime,
            "threshold": self.threshold,
            "acc_convention": "ACC = 100 - (FAR + FRR) / 2",
        }


def decide(score: ComparisonScore | int, threshold: int) -> Literal["accept", "reject"]:
    if threshold < 1:
        raise EvaluationError("threshold must be at least 1")
    eta = score.eta_final if isinstance(score, ComparisonScore) else int(score)
    return "accept" if eta >= threshold else "reject"


def _split(scores: Iterable[ComparisonScore]) -> tuple[np.ndarray, np.ndarray]:
    gen, imp = [], []
    for s in scores:
        (gen if s.genuine else imp).append(s.eta_final)
    if not gen or not imp:
        raise EvaluationError("both classes required")
    return np.asarray(gen, dtype=float), np.asarray(imp, dtype=float)


def d_prime(genuine: Sequence[float], impostor: Sequence[float]) -> float:
    """|mu_gen - mu_imp| / sqrt((var_gen + var_imp) / 2)."""
    g, i = np.asarray(genuine, dtype=float), np.asarray(impostor, dtype=float)
    gap = abs(g.mean() - i.mean())
    spread = math.sqrt((g.var() + i.var()) / 2.0)
    if spread == 0.0:
        return 0.0 if gap == 0.0 else math.inf
    return float(gap / spread)


def compute_error_measures(scores: Sequence[ComparisonScore], threshold: int) -> ErrorReport:
    gen, imp = _split(scores)
    far = 100.0 * float(np.mean(imp >= threshold))
    frr = 100.0 * float(np.mean(gen < threshold))
    return ErrorReport(far, frr, 100.0 - (far + frr) / 2.0, d_prime(gen, imp), int(threshold))


@dataclass(frozen=True)
class Sweep:
    reports: tuple[ErrorReport, ...]

    @property
    def accuracy_curve(self) -> list[tuple[int, float]]:
        return [(r.threshold, r.acc) for r in self.reports]

    @property
    def roc_curve(self) -> list[tuple[float, float]]:
        return [(r.far, 100.0 - r.frr) for r in self.reports]

    def best(self) -> ErrorReport:
        return max(self.reports, key=lambda r: (r.acc, -r.threshold))


def sweep_thresholds(scores: Sequence[ComparisonScore]) -> Sweep:
    gen, imp = _split(scores)
    top = int(max(gen.max(), imp.max()))
    return Sweep(tuple(compute_error_measures(scores, t) for t in range(1, top + 2)))


def equal_error_threshold(scores: Sequence[ComparisonScore]) -> int:
    """Threshold where FAR and FRR are closest; ties go to the lowest threshold."""
    reports = sweep_thresholds(scores).reports
    return min(reports, key=lambda r: (abs(r.far - r.frr), r.threshold)).threshold


@dataclass(frozen=True)
class ScoreHistogram:
    edges: np.ndarray
    genuine: np.ndarray
    impostor: np.ndarray


def score_histogram(scores: Sequence[ComparisonScore], bins: int | None = None) -> ScoreHistogram:
    """Aligned genuine/impostor histograms over a shared range of counts.

    With ``bins=None`` every integer count gets its own unit-wide bin.
    """
    gen, imp = _split(scores)
    top = int(max(gen.max(), imp.max()))
    if bins is None:
        edges = np.arange(0, top + 2, dtype=float)
    else:
        edges = np.linspace(0.0, top + 1.0, bins + 1)
    g, _ = np.histogram(gen, bins=edges)
    i, _ = np.histogram(imp, bins=edges)
    return ScoreHistogram(edges, g, i)


def write_scores_csv(path: str | Path, records: Iterable[ScoreRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for r in records:
            w.writerow([r.gallery_id, r.probe_id, r.label, r.eta_R, r.eta_Rinter, r.eta_Rnew])


def read_scores_csv(path: str | Path) -> list[ScoreRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SCORE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise EvaluationError(f"score CSV {path} lacks columns {sorted(missing)}")
        out = []
        for n, row in enumerate(reader, start=2):
            if row["label"] not in ("genuine", "impostor"):
                raise EvaluationError(f"{path}:{n}: bad label {row['label']!r}")
            out.append(ScoreRecord(
                row["gallery_id"], row["probe_id"], row["label"],
                int(row["eta_R"]), int(row["eta_Rinter"]), int(row["eta_Rnew"]),
            ))
    return out


def write_curve_csv(path: str | Path, sweep: Sweep) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "far", "frr", "acc", "gar"])
        for r in sweep.reports:
            w.writerow([r.threshold, f"{r.far:.6f}", f"{r.frr:.6f}", f"{r.acc:.6f}", f"{100 - r.frr:.6f}"])


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "stratsift"
    return plt


def _save_svg(fig, path: str | Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_curves(sweeps: dict[str, Sweep], out_dir: str | Path) -> None:
    """Accuracy-vs-threshold and ROC plots, one line per stratum."""
    plt = _figure()
    out_dir = Path(out_dir)

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, sw in sweeps.items():
        t, a = zip(*sw.accuracy_curve)
        ax.plot(t, a, label=f"Strata {name}")
    ax.set_xlabel("decision threshold (matches)")
    ax.set_ylabel("accuracy (%)")
    ax.legend()
    _save_svg(fig, out_dir / "accuracy.svg")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, sw in sweeps.items():
        far, gar = zip(*sw.roc_curve)
        ax.plot(far, gar, marker=".", label=f"Strata {name}")
    ax.set_xlabel("FAR (%)")
    ax.set_ylabel("100 - FRR (%)")
    ax.legend()
    _save_svg(fig, out_dir / "roc.svg")
    plt.close(fig)


def plot_histogram(hist: ScoreHistogram, path: str | Path, title: str = "") -> None:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(5, 4))
    width = np.diff(hist.edges)
    ax.bar(hist.edges[:-1], hist.genuine, width=width, align="edge", alpha=0.6, label="genuine")
    ax.bar(hist.edges[:-1], hist.impostor, width=width, align="edge", alpha=0.6, label="impostor")
    ax.set_xlabel("matches")
    ax.set_ylabel("comparisons")
    if title:
        ax.set_title(title)
    ax.legend()
    _save_svg(fig, path)
    plt.close(fig)
