"""Three-stage keypoint matching for concentric iris images.

Strata I pairs keypoints by descriptor distance alone. Strata II keeps only
pairs whose rotation about the image centers agrees with the dominant
rotation. Strata III keeps only pairs whose radial scaling agrees with the
ratio of iris radii. Each stage returns a subset of the previous one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np
from scipy.spatial.distance import cdist

from .core import (
    DetectorParams,
    IrisImage,
    KeypointSet,
    MatchPair,
    MatchSet,
    PipelineConfig,
    angle_about,
    wrap_degrees,
)

PeakClass = Literal["strong", "weak", "intermediate"]


class HistogramError(ValueError):
    pass


def distance_matrix(gallery: KeypointSet, probe: KeypointSet) -> np.ndarray:
    return cdist(gallery.descriptors(), probe.descriptors())


def strata1_match(gallery: KeypointSet, probe: KeypointSet, ratio: float = 0.8) -> MatchSet:
    """Greedy one-to-one nearest-neighbour pairing with a ratio test.

    At every step each unpaired gallery keypoint proposes its nearest unpaired
    probe keypoint; the proposal is acceptable when its distance is at most
    ``ratio`` times the distance to that keypoint's second-nearest unpaired
    probe (infinite when only one probe remains). The acceptable proposal with
    the smallest distance is taken, ties going to the lowest gallery then probe
    index, and both keypoints leave the pool.
    """
    m, n = len(gallery), len(probe)
    if m == 0 or n == 0:
        return MatchSet((), "R")
    dist = distance_matrix(gallery, probe)
    work = dist.copy()
    rows = np.ones(m, dtype=bool)
    pairs: list[MatchPair] = []
    while rows.any():
        nearest = np.argmin(work, axis=1)
        first = work[np.arange(m), nearest]
        masked = work.copy()
        masked[np.arange(m), nearest] = np.inf
        second = masked.min(axis=1)
        ok = rows & np.isfinite(first) & (first <= ratio * second)
        if not ok.any():
            break
        cand = np.where(ok, first, np.inf)
        i = int(np.argmin(cand))
        j = int(nearest[i])
        pairs.append(MatchPair(i, j, float(dist[i, j])))
        rows[i] = False
        work[i, :] = np.inf
        work[:, j] = np.inf
    return MatchSet(tuple(pairs), "R")


def rotation_gradient(theta: float, phi: float) -> float:
    """(phi - theta) mod 360, in [0, 360)."""
    return wrap_degrees(phi - theta)


def compute_gamma(
    pair: MatchPair,
    gallery_r: float,
    probe_r: float,
    gallery: KeypointSet,
    probe: KeypointSet,
) -> float | None:
    """Rotation of a pair about the image centers; ``None`` if degenerate."""
    g, p = gallery[pair.i], probe[pair.j]
    theta = angle_about(g.x, g.y, gallery_r, gallery_r)
    phi = angle_about(p.x, p.y, probe_r, probe_r)
    if theta is None or phi is None:
        return None
    return rotation_gradient(theta, phi)


@dataclass(frozen=True)
class GradientHistogram:
    bins: tuple[int, ...]
    bin_width: float
    peak_index: int
    peak_density: int
    peak_center: float
    # gamma per input pair, None for degenerate pairs
    gammas: tuple[float | None, ...] = ()

    @property
    def nobins(self) -> int:
        return len(self.bins)

    @property
    def total(self) -> int:
        return sum(self.bins)

    def window(self, index: int) -> list[int]:
        """Bin indices merged around ``index`` (itself plus circular neighbours)."""
        k = self.nobins
        return sorted({(index - 1) % k, index, (index + 1) % k})

    def to_json(self) -> dict:
        return {
            "bins": list(self.bins),
            "bin_width": self.bin_width,
            "total": self.total,
            "peak_index": self.peak_index,
            "peak_window": self.window(self.peak_index),
            "peak_density": self.peak_density,
            "peak_center": self.peak_center,
        }


def gamma_bin(gamma: float, nobins: int) -> int:
    b = int(gamma // (360.0 / nobins))
    return min(b, nobins - 1)


def histogram_from_gammas(gammas, nobins: int = 10) -> GradientHistogram:
    """Bin gamma values and locate the merged peak.

    The merged peak is the bin whose three-bin circular window (itself and
    both neighbours) holds the most pairs. Ties go to the window whose centre
    bin is fullest, then to the lowest centre index.
    """
    values = [g for g in gammas if g is not None]
    if not values:
        raise HistogramError("no measurable gradients")
    counts = [0] * nobins
    for g in values:
        counts[gamma_bin(g, nobins)] += 1
    width = 360.0 / nobins

    best, best_key = 0, None
    for b in range(nobins):
        window = {(b - 1) % nobins, b, (b + 1) % nobins}
        key = (sum(counts[w] for w in window), counts[b], -b)
        if best_key is None or key > best_key:
            best, best_key = b, key
    return GradientHistogram(
        bins=tuple(counts),
        bin_width=width,
        peak_index=best,
        peak_density=best_key[0],
        peak_center=(best + 0.5) * width,
        gammas=tuple(gammas),
    )


def build_gradient_histogram(
    matches: MatchSet,
    gallery: KeypointSet,
    probe: KeypointSet,
    nobins: int = 10,
    gallery_r: float | None = None,
    probe_r: float | None = None,
) -> GradientHistogram:
    gr = gallery.radius_r if gallery_r is None else gallery_r
    pr = probe.radius_r if probe_r is None else probe_r
    if gr is None or pr is None:
        raise ValueError("iris radii are required to measure gradients")
    gammas = [compute_gamma(p, gr, pr, gallery, probe) for p in matches.pairs]
    return histogram_from_gammas(gammas, nobins)


@dataclass(frozen=True)
class PeakVerdict:
    classification: PeakClass
    # (start, end) going counter-clockwise from start, degrees; None unless strong
    retained_range: tuple[float, float] | None = None

    def contains(self, gamma: float) -> bool:
        if self.retained_range is None:
            return False
        start, end = self.retained_range
        span = wrap_degrees(end - start)
        if span == 0.0:
            return True  # full circle
        return wrap_degrees(gamma - start) <= span

    def intervals(self) -> list[tuple[float, float]]:
        if self.retained_range is None:
            return []
        start, end = self.retained_range
        if start == end:
            return [(0.0, 360.0)]
        if start < end:
            return [(start, end)]
        return [(start, 360.0), (0.0, end)]

    def to_json(self) -> dict:
        return {
            "classification": self.classification,
            "retained_range": list(self.retained_range) if self.retained_range else None,
            "retained_intervals": [list(iv) for iv in self.intervals()],
        }


def classify_peak(
    h: GradientHistogram,
    hp_percent: float = 30.0,
    lp_percent: float = 10.0,
    angular_half_width: float = 90.0,
) -> PeakVerdict:
    total = h.total
    if h.peak_density >= hp_percent * total / 100.0:
        if angular_half_width >= 180.0:
            rng = (wrap_degrees(h.peak_center - 180.0),) * 2
        else:
            rng = (wrap_degrees(h.peak_center - angular_half_width),
                   wrap_degrees(h.peak_center + angular_half_width))
        return PeakVerdict("strong", rng)
    if h.peak_density <= lp_percent * total / 100.0:
        return PeakVerdict("weak")
    return PeakVerdict("intermediate")


@dataclass(frozen=True)
class GradientStage:
    rinter: MatchSet
    histogram: GradientHistogram | None
    verdict: PeakVerdict | None


def gradient_stage(
    matches: MatchSet, gallery: KeypointSet, probe: KeypointSet, config: PipelineConfig
) -> GradientStage:
    if matches.eta == 0:
        return GradientStage(MatchSet((), "Rinter"), None, None)
    try:
        hist = build_gradient_histogram(matches, gallery, probe, config.nobins)
    except HistogramError:
        return GradientStage(MatchSet((), "Rinter"), None, None)
    verdict = classify_peak(hist, config.hp_percent, config.lp_percent, config.angular_half_width)
    kept = []
    if verdict.classification == "strong":
        for pair, g in zip(matches.pairs, hist.gammas):
            if g is not None and verdict.contains(g):
                kept.append(replace(pair, gamma=g))
    return GradientStage(MatchSet(tuple(kept), "Rinter"), hist, verdict)


def strata2_filter(
    matches: MatchSet, gallery: KeypointSet, probe: KeypointSet, config: PipelineConfig | None = None
) -> MatchSet:
    """Drop pairs whose rotation falls outside the strong peak's range.

    Without a strong peak every pair is considered impaired and the result is
    empty.
    """
    return gradient_stage(matches, gallery, probe, config or PipelineConfig()).rinter


def strata3_filter(
    matches: MatchSet,
    gallery: KeypointSet,
    probe: KeypointSet,
    r_m: float | None = None,
    r_n: float | None = None,
    scale_tolerance: float = 0.2,
) -> MatchSet:
    r_m = gallery.radius_r if r_m is None else r_m
    r_n = probe.radius_r if r_n is None else r_n
    if not r_m or not r_n or r_m <= 0 or r_n <= 0:
        raise ValueError("iris radii must be positive")
    sf = r_n / r_m
    lo, hi = sf - scale_tolerance, sf + scale_tolerance
    kept = []
    for pair in matches.pairs:
        g, p = gallery[pair.i], probe[pair.j]
        d1 = math.hypot(g.x - r_m, g.y - r_m)
        if d1 == 0.0:
            continue
        psi = math.hypot(p.x - r_n, p.y - r_n) / d1
        if lo <= psi <= hi:
            kept.append(replace(pair, psi=psi))
    return MatchSet(tuple(kept), "Rnew")


@dataclass(frozen=True)
class PipelineResult:
    r: MatchSet
    rinter: MatchSet
    rnew: MatchSet
    histogram: GradientHistogram | None
    verdict: PeakVerdict | None
    sf: float
    gallery: KeypointSet
    probe: KeypointSet

    @property
    def etas(self) -> tuple[int, int, int]:
        return self.r.eta, self.rinter.eta, self.rnew.eta

    def to_json(self) -> dict:
        """Diagnostic dump with every set, the histogram and per-pair geometry."""
        gammas = self.histogram.gammas if self.histogram else (None,) * self.r.eta
        psis = {(p.i, p.j): p.psi for p in self.rnew.pairs}
        r_m, r_n = self.gallery.radius_r, self.probe.radius_r
        per_pair = []
        for pair, g in zip(self.r.pairs, gammas):
            gk, pk = self.gallery[pair.i], self.probe[pair.j]
            d1 = math.hypot(gk.x - r_m, gk.y - r_m)
            psi = psis.get((pair.i, pair.j))
            if psi is None and d1 > 0:
                psi = math.hypot(pk.x - r_n, pk.y - r_n) / d1
            per_pair.append({
                "i": pair.i,
                "j": pair.j,
                "descriptor_distance": pair.descriptor_distance,
                "gamma": g,
                "psi": psi,
            })
        return {
            "gallery_id": self.gallery.source_image_id,
            "probe_id": self.probe.source_image_id,
            "eta": {"R": self.r.eta, "Rinter": self.rinter.eta, "Rnew": self.rnew.eta},
            "R": self.r.to_json(),
            "Rinter": self.rinter.to_json(),
            "Rnew": self.rnew.to_json(),
            "histogram": self.histogram.to_json() if self.histogram else None,
            "verdict": self.verdict.to_json() if self.verdict else None,
            "sf": self.sf,
            "pairs": per_pair,
        }


def match_pipeline(
    gallery: IrisImage | KeypointSet,
    probe: IrisImage | KeypointSet,
    config: PipelineConfig | None = None,
) -> PipelineResult:
    config = config or PipelineConfig()
    gallery = _as_keypoints(gallery, config.detector)
    probe = _as_keypoints(probe, config.detector)
    if not gallery.radius_r or not probe.radius_r:
        raise ValueError("both keypoint sets need an iris radius")
    sf = probe.radius_r / gallery.radius_r
    r = strata1_match(gallery, probe, config.nn_ratio_threshold)
    stage = gradient_stage(r, gallery, probe, config)
    rnew = strata3_filter(stage.rinter, gallery, probe, scale_tolerance=config.scale_tolerance)
    return PipelineResult(r, stage.rinter, rnew, stage.histogram, stage.verdict, sf, gallery, probe)


def _as_keypoints(item: IrisImage | KeypointSet, params: DetectorParams) -> KeypointSet:
    if isinstance(item, KeypointSet):
        return item
    from .sift import detect

    return detect(item, params)
