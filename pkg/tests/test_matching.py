import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stratsift.core import Keypoint, KeypointSet, MatchPair, MatchSet, PipelineConfig
from stratsift.matching import (
    GradientHistogram,
    HistogramError,
    build_gradient_histogram,
    classify_peak,
    compute_gamma,
    histogram_from_gammas,
    match_pipeline,
    rotation_gradient,
    strata1_match,
    strata2_filter,
    strata3_filter,
)

from conftest import cloud, random_descriptors, transform_cloud


def greedy_oracle(gallery, probe, ratio):
    """Re-derive the greedy pairing from the full distance table, pure Python."""
    dist = [[math.dist(a.descriptor, b.descriptor) for b in probe.keypoints] for a in gallery.keypoints]
    free_g, free_p = set(range(len(gallery))), set(range(len(probe)))
    out = []
    while free_g and free_p:
        best = None
        for i in sorted(free_g):
            ranked = sorted((dist[i][j], j) for j in free_p)
            d1, j = ranked[0]
            d2 = ranked[1][0] if len(ranked) > 1 else math.inf
            if d1 <= ratio * d2 and (best is None or (d1, i, j) < best):
                best = (d1, i, j)
        if best is None:
            break
        _, i, j = best
        out.append((i, j))
        free_g.discard(i)
        free_p.discard(j)
    return out


def kp_set(points, descriptors, radius=64.0):
    return KeypointSet(tuple(Keypoint(x, y, 2.0, 0.0, d) for (x, y), d in zip(points, descriptors)), "k", radius)


def test_self_match_pairs_identity():
    kps = cloud(np.random.default_rng(0), 25)
    r = strata1_match(kps, kps, 0.8)
    assert r.eta == 25 and r.stratum == "R"
    assert all(p.i == p.j and p.descriptor_distance == 0.0 for p in r.pairs)
    assert all(p.gamma is None and p.psi is None for p in r.pairs)


def test_far_clusters_rejected_by_ratio():
    rng = np.random.default_rng(1)
    a = np.zeros((10, 128))
    a[:, :64] = 1 + 0.01 * rng.random((10, 64))
    b = np.zeros((10, 128))
    b[:, 64:] = 1 + 0.01 * rng.random((10, 64))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    pts = [(64.0 + i, 40.0) for i in range(10)]
    assert strata1_match(kp_set(pts, a), kp_set(pts, b), 0.8).eta == 0


def test_empty_inputs():
    kps = cloud(np.random.default_rng(0), 5)
    empty = KeypointSet((), "e", 64.0)
    assert strata1_match(kps, empty).eta == 0
    assert strata1_match(empty, kps).eta == 0
    res = match_pipeline(empty, kps)
    assert res.etas == (0, 0, 0)


@pytest.mark.parametrize("ratio", [0.6, 0.8, 0.95])
def test_strata1_matches_oracle_15x15(ratio):
    rng = np.random.default_rng(7)
    g, p = cloud(rng, 15), cloud(rng, 15)
    got = [(m.i, m.j) for m in strata1_match(g, p, ratio).pairs]
    assert got == greedy_oracle(g, p, ratio)


@given(st.integers(0, 20), st.integers(0, 20), st.floats(0.3, 0.99), st.integers(0, 2**32 - 1),
       st.booleans())
def test_strata1_oracle_property(m, n, ratio, seed, correlated):
    rng = np.random.default_rng(seed)
    g = cloud(rng, m)
    if correlated and m:
        # probe descriptors near the gallery's, so many pairs pass the ratio test
        d = g.descriptors()[rng.permutation(m)][:n] + 0.05 * rng.random((min(m, n), 128))
        d = np.vstack([d, random_descriptors(rng, n - len(d))]) if n > len(d) else d
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        p = cloud(rng, n, descriptors=d)
    else:
        p = cloud(rng, n)
    r = strata1_match(g, p, ratio)
    assert [(x.i, x.j) for x in r.pairs] == greedy_oracle(g, p, ratio)
    assert r.eta <= min(m, n)


def test_rotation_gradient_examples():
    assert rotation_gradient(350.0, 10.0) == 20.0
    assert rotation_gradient(10.0, 10.0) == 0.0


@given(st.floats(0, 360, exclude_max=True), st.floats(0, 360, exclude_max=True))
def test_gamma_antisymmetry(theta, phi):
    total = rotation_gradient(theta, phi) + rotation_gradient(phi, theta)
    assert min(total % 360.0, 360.0 - total % 360.0) < 1e-9
    assert 0.0 <= rotation_gradient(theta, phi) < 360.0


def test_compute_gamma_identity_and_degenerate():
    kps = kp_set([(64.0, 64.0), (80.0, 50.0)], random_descriptors(np.random.default_rng(0), 2))
    assert compute_gamma(MatchPair(1, 1, 0.0), 64, 64, kps, kps) == 0.0
    assert compute_gamma(MatchPair(0, 0, 0.0), 64, 64, kps, kps) is None


def test_compute_gamma_rotated_cloud():
    g = cloud(np.random.default_rng(3), 30)
    p = transform_cloud(g, 30.0)
    for k in range(30):
        assert compute_gamma(MatchPair(k, k, 0.0), 64, 64, g, p) == pytest.approx(30.0, abs=1e-9)


def test_worked_example_histogram():
    h = histogram_from_gammas([18.0] * 10, 10)
    assert h.bins[0] == 10 and h.total == 10
    assert h.peak_index == 0 and h.peak_density == 10
    assert h.peak_center == 18.0
    assert h.bin_width == 36.0


def test_uniform_histogram_tie_breaks_low():
    h = histogram_from_gammas([36.0 * b + 5 for b in range(10)], 10)
    assert h.bins == (1,) * 10
    assert h.peak_density == 3 and h.peak_index == 0


def test_histogram_circular_window():
    h = histogram_from_gammas([350.0, 351.0, 2.0, 3.0, 180.0], 10)
    assert h.peak_density == 4
    assert h.window(h.peak_index) in ([0, 1, 9], [0, 8, 9])


def test_histogram_counts_match_direct_count():
    gammas = list(np.random.default_rng(11).uniform(0, 360, 20))
    h = histogram_from_gammas(gammas, 10)
    expected = [sum(1 for g in gammas if 36 * b <= g < 36 * (b + 1)) for b in range(10)]
    assert list(h.bins) == expected
    assert h.peak_density >= max(h.bins)


@given(st.lists(st.floats(0, 360, exclude_max=True), min_size=1, max_size=60), st.integers(1, 24))
def test_histogram_invariants(gammas, nobins):
    h = histogram_from_gammas(gammas, nobins)
    assert h.total == len(gammas) == sum(h.bins)
    assert h.peak_density >= max(h.bins)
    best = max(sum(h.bins[w] for w in h.window(b)) for b in range(nobins))
    assert h.peak_density == best


def test_all_degenerate_histogram():
    with pytest.raises(HistogramError, match="no measurable gradients"):
        histogram_from_gammas([None, None], 10)


def _hist(peak, total):
    bins = [0] * 10
    bins[3] = peak
    bins[7] = total - peak
    return GradientHistogram(tuple(bins), 36.0, 3, peak, 126.0)


def test_classify_peak():
    assert classify_peak(_hist(65, 100), 30, 10).classification == "strong"
    assert classify_peak(_hist(8, 100), 30, 10).classification == "weak"
    assert classify_peak(_hist(20, 100), 30, 10).classification == "intermediate"
    assert classify_peak(_hist(30, 100), 30, 10).classification == "strong"
    assert classify_peak(_hist(10, 100), 30, 10).classification == "weak"


def test_worked_example_retained_range():
    v = classify_peak(histogram_from_gammas([18.0] * 10), 30, 10, 90)
    assert v.retained_range == (288.0, 108.0)
    assert v.intervals() == [(288.0, 360.0), (0.0, 108.0)]
    assert v.contains(300.0) and v.contains(0.0) and v.contains(108.0) and v.contains(288.0)
    assert not v.contains(200.0) and not v.contains(108.5)


def test_half_width_180_keeps_everything():
    v = classify_peak(histogram_from_gammas([18.0] * 10), 30, 10, 180)
    assert all(v.contains(g) for g in np.linspace(0, 359.9, 50))


def test_strata2_self_match_keeps_all():
    kps = cloud(np.random.default_rng(2), 20)
    r = strata1_match(kps, kps)
    rinter = strata2_filter(r, kps, kps)
    assert rinter.stratum == "Rinter"
    assert rinter.index_pairs() == r.index_pairs()
    assert all(p.gamma == 0.0 for p in rinter.pairs)


def test_strata2_no_strong_peak_empties():
    rng = np.random.default_rng(4)
    g = cloud(rng, 20)
    # each probe keypoint rotated by a different angle: one gamma per bin, twice
    angles = [36.0 * (k % 10) + 5.0 for k in range(20)]
    pts = []
    for k, a in zip(g.keypoints, angles):
        u, v = k.x - 64, k.y - 64
        t = math.radians(a)
        pts.append(Keypoint(64 + math.cos(t) * u - math.sin(t) * v, 64 + math.sin(t) * u + math.cos(t) * v,
                            2.0, 0.0, k.descriptor))
    p = KeypointSet(tuple(pts), "p", 64.0)
    r = MatchSet(tuple(MatchPair(k, k, 0.0) for k in range(20)), "R")
    cfg = PipelineConfig(hp_percent=40.0)
    assert strata2_filter(r, g, p, cfg).eta == 0
    # with the default hp the same spread (30% in any 3-bin window) is strong
    assert strata2_filter(r, g, p, PipelineConfig()).eta > 0


def test_strata2_removes_out_of_range_pairs():
    rng = np.random.default_rng(5)
    g = cloud(rng, 12)
    p = transform_cloud(g, 40.0)
    pts = list(p.keypoints)
    # two impairments rotated by 220 degrees instead of 40
    for k in (0, 1):
        u, v = g[k].x - 64, g[k].y - 64
        t = math.radians(220.0)
        pts[k] = Keypoint(64 + math.cos(t) * u - math.sin(t) * v, 64 + math.sin(t) * u + math.cos(t) * v,
                          2.0, 0.0, g[k].descriptor)
    p = KeypointSet(tuple(pts), "p", 64.0)
    r = MatchSet(tuple(MatchPair(k, k, 0.0) for k in range(12)), "R")
    rinter = strata2_filter(r, g, p)
    assert rinter.index_pairs() == {(k, k) for k in range(2, 12)}


def test_strata3_self_match():
    kps = cloud(np.random.default_rng(6), 15)
    r = strata1_match(kps, kps)
    rnew = strata3_filter(strata2_filter(r, kps, kps), kps, kps)
    assert rnew.eta == 15 and rnew.stratum == "Rnew"
    assert all(p.psi == 1.0 for p in rnew.pairs)


def test_strata3_scale_and_impairment():
    g = cloud(np.random.default_rng(8), 10)
    p = transform_cloud(g, 0.0, 1.5)
    pts = list(p.keypoints)
    # impairment: probe point pulled in to 0.6 of the gallery distance
    pts[0] = Keypoint(96 + 0.6 * (g[0].x - 64), 96 + 0.6 * (g[0].y - 64), 2.0, 0.0, g[0].descriptor)
    p = KeypointSet(tuple(pts), "p", 96.0)
    rinter = MatchSet(tuple(MatchPair(k, k, 0.0, gamma=0.0) for k in range(10)), "Rinter")
    rnew = strata3_filter(rinter, g, p, 64, 96, 0.2)
    assert rnew.index_pairs() == {(k, k) for k in range(1, 10)}
    assert all(abs(q.psi - 1.5) < 1e-9 for q in rnew.pairs)


def test_strata3_closed_interval_and_degenerate():
    g = kp_set([(74.0, 64.0), (64.0, 64.0), (84.0, 64.0)], random_descriptors(np.random.default_rng(0), 3))
    # psi exactly 1.25 and 0.75 (binary-exact) sit on the interval ends for sf=1, tol=0.25
    p = kp_set([(76.5, 64.0), (70.0, 64.0), (79.0, 64.0)], random_descriptors(np.random.default_rng(1), 3))
    ms = MatchSet((MatchPair(0, 0, 0.0), MatchPair(1, 1, 0.0), MatchPair(2, 2, 0.0)), "Rinter")
    rnew = strata3_filter(ms, g, p, 64, 64, 0.25)
    assert rnew.index_pairs() == {(0, 0), (2, 2)}


@pytest.mark.parametrize("alpha", [10.0, 45.0, 90.0, 180.0, 300.0])
def test_rotation_recovery_on_cloud(alpha):
    g = cloud(np.random.default_rng(int(alpha)), 40)
    p = transform_cloud(g, alpha)
    res = match_pipeline(g, p)
    diff = abs((res.histogram.peak_center - alpha + 180) % 360 - 180)
    assert diff <= 36.0
    assert res.rinter.eta == 40


@given(st.floats(0.5, 2.0), st.floats(0, 360, exclude_max=True), st.integers(0, 1000))
def test_scale_recovery_on_cloud(s, alpha, seed):
    g = cloud(np.random.default_rng(seed), 20)
    p = transform_cloud(g, alpha, s)
    res = match_pipeline(g, p)
    assert res.sf == pytest.approx(s)
    assert res.rnew.eta == 20
    assert all(abs(q.psi - res.sf) < 1e-9 for q in res.rnew.pairs)


@given(st.integers(0, 25), st.integers(0, 25), st.integers(0, 2**32 - 1),
       st.floats(0.5, 0.99), st.floats(5.0, 100.0))
def test_subset_chain_and_one_to_one(m, n, seed, ratio, hp):
    rng = np.random.default_rng(seed)
    g, p = cloud(rng, m), cloud(rng, n)
    cfg = PipelineConfig(nn_ratio_threshold=ratio, hp_percent=hp, lp_percent=min(hp / 2, 10.0))
    res = match_pipeline(g, p, cfg)
    r, ri, rn = res.r.index_pairs(), res.rinter.index_pairs(), res.rnew.index_pairs()
    assert rn <= ri <= r
    for ms in (res.r, res.rinter, res.rnew):
        assert len({q.i for q in ms.pairs}) == ms.eta == len({q.j for q in ms.pairs})
    assert res.rnew.eta <= res.rinter.eta <= res.r.eta <= min(m, n)


def test_match_set_rejects_duplicates():
    with pytest.raises(ValueError):
        MatchSet((MatchPair(0, 1, 0.0), MatchPair(0, 2, 0.0)))


def test_image_self_match(tex_image):
    res = match_pipeline(tex_image, tex_image)
    assert res.r.eta > 0
    assert res.r.eta == res.rinter.eta == res.rnew.eta


def test_diagnostic_dump_fields():
    g = cloud(np.random.default_rng(9), 10)
    p = transform_cloud(g, 18.0)
    doc = json.loads(json.dumps(match_pipeline(g, p).to_json()))
    assert set(doc) >= {"R", "Rinter", "Rnew", "histogram", "verdict", "sf", "pairs", "eta"}
    assert doc["histogram"]["bins"][0] == 10
    assert doc["histogram"]["peak_center"] == 18.0
    assert doc["verdict"]["retained_range"] == [288.0, 108.0]
    assert len(doc["pairs"]) == 10
    assert all({"gamma", "psi", "descriptor_distance"} <= set(q) for q in doc["pairs"])
