"""Difference-of-Gaussians keypoint detection and 128-d gradient descriptors.

Pipeline: :func:`build_scale_space` -> :func:`detect_keypoints` ->
:func:`assign_orientation` -> :func:`compute_descriptor`, composed by
:func:`detect`. Everything is a pure function of the raster and parameters.

Coordinates are base-image pixels with x to the right and y down. Octave ``o``
pixel ``u`` sits at base coordinate ``(u + 0.5) * 2**o - 0.5`` because each
octave is built by 2x2 block averaging, which keeps the pyramid exactly
covariant under 90 degree raster rotations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .core import DetectorParams, IrisImage, Keypoint, KeypointSet, wrap_degrees

logger = logging.getLogger(__name__)

ORI_BINS = 36
ORI_PEAK_RATIO = 0.8
ORI_SIGMA_FACTOR = 1.5
DESC_WIDTH = 4
DESC_ORI_BINS = 8
DESC_SCALE_FACTOR = 3.0
DESC_CLAMP = 0.2
MAX_REFINE_STEPS = 5


class ScaleSpaceError(ValueError):
    pass


class Candidate(NamedTuple):
    x: float
    y: float
    sigma: float


@dataclass(frozen=True, eq=False)
class ScaleSpace:
    octaves: list[list[np.ndarray]]
    dog_layers: list[list[np.ndarray]]
    scales_per_octave: int
    base_sigma: float

    @property
    def octave_count(self) -> int:
        return len(self.octaves)

    def layer_sigma(self, layer: float) -> float:
        """Blur of a (fractional) layer, in that octave's pixels."""
        return self.base_sigma * 2.0 ** (layer / self.scales_per_octave)

    def locate(self, x: float, y: float, sigma: float) -> tuple[int, float, float, float]:
        """Map a base-image (x, y, sigma) to (octave, layer, octave x, octave y)."""
        level = math.log2(sigma / self.base_sigma)
        octave = min(max(int(math.floor(level)), 0), self.octave_count - 1)
        layer = (level - octave) * self.scales_per_octave
        scale = 2.0 ** octave
        return octave, layer, (x + 0.5) / scale - 0.5, (y + 0.5) / scale - 0.5


def max_octaves(side: int) -> int:
    return max(int(math.floor(math.log2(side / 4))), 0)


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def build_scale_space(
    image: IrisImage | np.ndarray,
    octave_count: int | None = None,
    scales_per_octave: int = 3,
    base_sigma: float = 1.6,
    assumed_blur: float = 0.5,
) -> ScaleSpace:
    pixels = image.pixels if isinstance(image, IrisImage) else np.asarray(image, dtype=np.float64)
    side = min(pixels.shape)
    if scales_per_octave < 2:
        raise ScaleSpaceError("scales_per_octave must be at least 2")
    if octave_count is None:
        octave_count = max_octaves(side)
    if octave_count < 1 or side < 2 ** octave_count * 4:
        raise ScaleSpaceError(
            f"image too small: side {side} cannot hold {octave_count} octaves "
            f"(needs {2 ** max(octave_count, 0) * 4})"
        )

    # S + 3 layers give S + 2 DoG layers, so S interior DoG layers tile the
    # scale axis without gaps between octaves
    n_layers = scales_per_octave + 3
    sigmas = [base_sigma * 2.0 ** (s / scales_per_octave) for s in range(n_layers)]
    increments = [math.sqrt(b * b - a * a) for a, b in zip(sigmas, sigmas[1:])]

    first_blur = math.sqrt(max(base_sigma ** 2 - assumed_blur ** 2, 0.0))
    base = ndimage.gaussian_filter(pixels, first_blur) if first_blur > 0 else pixels.copy()

    octaves: list[list[np.ndarray]] = []
    dogs: list[list[np.ndarray]] = []
    for _ in range(octave_count):
        layers = [base]
        for inc in increments:
            layers.append(ndimage.gaussian_filter(layers[-1], inc))
        octaves.append(layers)
        dogs.append([b - a for a, b in zip(layers, layers[1:])])
        # layer S carries twice the base blur; halving restores base_sigma
        base = _downsample(layers[scales_per_octave])
    return ScaleSpace(octaves, dogs, scales_per_octave, base_sigma)


def _derivatives(dog: np.ndarray, s: int, y: int, x: int) -> tuple[np.ndarray, np.ndarray]:
    c = dog[s, y, x]
    g = 0.5 * np.array([
        dog[s, y, x + 1] - dog[s, y, x - 1],
        dog[s, y + 1, x] - dog[s, y - 1, x],
        dog[s + 1, y, x] - dog[s - 1, y, x],
    ])
    dxx = dog[s, y, x + 1] + dog[s, y, x - 1] - 2 * c
    dyy = dog[s, y + 1, x] + dog[s, y - 1, x] - 2 * c
    dss = dog[s + 1, y, x] + dog[s - 1, y, x] - 2 * c
    dxy = 0.25 * (dog[s, y + 1, x + 1] - dog[s, y + 1, x - 1] - dog[s, y - 1, x + 1] + dog[s, y - 1, x - 1])
    dxs = 0.25 * (dog[s + 1, y, x + 1] - dog[s + 1, y, x - 1] - dog[s - 1, y, x + 1] + dog[s - 1, y, x - 1])
    dys = 0.25 * (dog[s + 1, y + 1, x] - dog[s + 1, y - 1, x] - dog[s - 1, y + 1, x] + dog[s - 1, y - 1, x])
    hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
    return g, hess


def _refine(dog: np.ndarray, s: int, y: int, x: int, contrast: float, edge_ratio: float):
    n_s, h, w = dog.shape
    for _ in range(MAX_REFINE_STEPS):
        g, hess = _derivatives(dog, s, y, x)
        try:
            offset = -np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(offset) < 0.5):
            break
        x += int(round(offset[0]))
        y += int(round(offset[1]))
        s += int(round(offset[2]))
        if not (1 <= s <= n_s - 2 and 1 <= y <= h - 2 and 1 <= x <= w - 2):
            return None
    else:
        return None

    value = dog[s, y, x] + 0.5 * float(g @ offset)
    if abs(value) < contrast:
        return None
    tr = hess[0, 0] + hess[1, 1]
    det = hess[0, 0] * hess[1, 1] - hess[0, 1] ** 2
    if det <= 0 or tr * tr * edge_ratio >= (edge_ratio + 1) ** 2 * det:
        return None
    return x + offset[0], y + offset[1], s + offset[2]


def detect_keypoints(
    space: ScaleSpace,
    contrast_threshold: float = 0.03,
    edge_ratio_threshold: float = 10.0,
) -> list[Candidate]:
    """Scale-space extrema of the DoG stack, refined to sub-pixel accuracy."""
    found: list[Candidate] = []
    prefilter = 0.5 * contrast_threshold
    for octave, dog_list in enumerate(space.dog_layers):
        dog = np.stack(dog_list)
        if min(dog.shape[1:]) < 3:
            continue
        hi = ndimage.maximum_filter(dog, size=3, mode="nearest")
        lo = ndimage.minimum_filter(dog, size=3, mode="nearest")
        mask = ((dog == hi) | (dog == lo)) & (np.abs(dog) > prefilter)
        mask[0] = mask[-1] = False
        mask[:, [0, -1], :] = False
        mask[:, :, [0, -1]] = False
        scale = 2.0 ** octave
        for s, y, x in zip(*np.nonzero(mask)):
            refined = _refine(dog, int(s), int(y), int(x), contrast_threshold, edge_ratio_threshold)
            if refined is None:
                continue
            ox, oy, layer = refined
            found.append(Candidate(
                (ox + 0.5) * scale - 0.5,
                (oy + 0.5) * scale - 0.5,
                space.base_sigma * 2.0 ** (octave + layer / space.scales_per_octave),
            ))
    return found


def _gradient_patch(img: np.ndarray, cx: int, cy: int, radius: int):
    patch = img[cy - radius - 1:cy + radius + 2, cx - radius - 1:cx + radius + 2]
    dx = patch[1:-1, 2:] - patch[1:-1, :-2]
    dy = patch[2:, 1:-1] - patch[:-2, 1:-1]
    return np.hypot(dx, dy), np.degrees(np.arctan2(dy, dx)) % 360.0


def _fits(img: np.ndarray, cx: int, cy: int, radius: int) -> bool:
    h, w = img.shape
    return cx - radius - 1 >= 0 and cy - radius - 1 >= 0 and cx + radius + 1 < w and cy + radius + 1 < h


def orientation_histogram(mag: np.ndarray, ang: np.ndarray, weight: np.ndarray) -> np.ndarray:
    bins = np.rint(ang * ORI_BINS / 360.0).astype(int) % ORI_BINS
    hist = np.bincount(bins.ravel(), weights=(mag * weight).ravel(), minlength=ORI_BINS)
    # circular [1 4 6 4 1] / 16 smoothing
    return (6 * hist + 4 * (np.roll(hist, 1) + np.roll(hist, -1))
            + np.roll(hist, 2) + np.roll(hist, -2)) / 16.0


def histogram_peaks(hist: np.ndarray) -> list[float]:
    """Interpolated peak angles (degrees) within ORI_PEAK_RATIO of the maximum."""
    top = hist.max()
    if top <= 0:
        return []
    left, right = np.roll(hist, 1), np.roll(hist, -1)
    idx = np.nonzero((hist > left) & (hist > right) & (hist >= ORI_PEAK_RATIO * top))[0]
    if idx.size == 0:
        # plateau, e.g. a perfectly isotropic blob
        idx = np.array([int(np.argmax(hist))])
    angles = []
    for b in idx:
        l, c, r = left[b], hist[b], right[b]
        denom = l - 2 * c + r
        off = 0.5 * (l - r) / denom if denom != 0 else 0.0
        angles.append(wrap_degrees((b + off) * 360.0 / ORI_BINS))
    return angles


def assign_orientation(space: ScaleSpace, candidate: tuple[float, float, float]) -> list[Keypoint]:
    x, y, sigma = candidate
    octave, layer, ox, oy = space.locate(x, y, sigma)
    layers = space.octaves[octave]
    img = layers[min(max(int(round(layer)), 0), len(layers) - 1)]
    sigma_w = ORI_SIGMA_FACTOR * space.layer_sigma(layer)
    radius = int(round(3 * sigma_w))
    cx, cy = int(round(ox)), int(round(oy))
    if not _fits(img, cx, cy, radius):
        return []
    mag, ang = _gradient_patch(img, cx, cy, radius)
    v, u = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    r2 = u * u + v * v
    weight = np.exp(-r2 / (2 * sigma_w ** 2)) * (r2 <= radius * radius)
    hist = orientation_histogram(mag, ang, weight)
    return [Keypoint(x, y, sigma, a) for a in histogram_peaks(hist)]


def descriptor_radius(space: ScaleSpace, layer: float) -> int:
    hist_width = DESC_SCALE_FACTOR * space.layer_sigma(layer)
    return int(round(hist_width * math.sqrt(2) * (DESC_WIDTH + 1) * 0.5))


def compute_descriptor(space: ScaleSpace, stub: Keypoint) -> Keypoint | None:
    """Describe an oriented stub; ``None`` when the window leaves the raster
    or the patch carries no gradient."""
    d, n = DESC_WIDTH, DESC_ORI_BINS
    octave, layer, ox, oy = space.locate(stub.x, stub.y, stub.sigma)
    layers = space.octaves[octave]
    img = layers[min(max(int(round(layer)), 0), len(layers) - 1)]
    hist_width = DESC_SCALE_FACTOR * space.layer_sigma(layer)
    radius = descriptor_radius(space, layer)
    cx, cy = int(round(ox)), int(round(oy))
    if not _fits(img, cx, cy, radius):
        return None

    mag, ang = _gradient_patch(img, cx, cy, radius)
    py, px = np.mgrid[cy - radius:cy + radius + 1, cx - radius:cx + radius + 1]
    du, dv = px - ox, py - oy
    theta = math.radians(stub.orientation)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    ru = (cos_t * du + sin_t * dv) / hist_width
    rv = (-sin_t * du + cos_t * dv) / hist_width
    cbin = ru + d / 2 - 0.5
    rbin = rv + d / 2 - 0.5
    keep = (cbin > -1) & (cbin < d) & (rbin > -1) & (rbin < d)
    weight = np.exp(-(ru ** 2 + rv ** 2) / (2 * (0.5 * d) ** 2)) * mag
    obin = ((ang - stub.orientation) % 360.0) * n / 360.0

    cbin, rbin, obin, weight = cbin[keep], rbin[keep], obin[keep], weight[keep]
    r0, c0, o0 = np.floor(rbin).astype(int), np.floor(cbin).astype(int), np.floor(obin).astype(int)
    fr, fc, fo = rbin - r0, cbin - c0, obin - o0

    hist = np.zeros((d + 2, d + 2, n))
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            for do, wo in ((0, 1 - fo), (1, fo)):
                np.add.at(hist, (r0 + 1 + dr, c0 + 1 + dc, (o0 + do) % n), weight * wr * wc * wo)

    desc = hist[1:-1, 1:-1, :].ravel()
    norm = np.linalg.norm(desc)
    if norm <= 0:
        return None
    desc = np.minimum(desc / norm, DESC_CLAMP)
    norm = np.linalg.norm(desc)
    if norm <= 0:
        return None
    return Keypoint(stub.x, stub.y, stub.sigma, stub.orientation, desc / norm)


def detect(image: IrisImage, params: DetectorParams | None = None) -> KeypointSet:
    params = params or DetectorParams()
    space = build_scale_space(
        image, params.octave_count, params.scales_per_octave, params.base_sigma, params.assumed_blur
    )
    candidates = detect_keypoints(space, params.contrast_threshold, params.edge_ratio_threshold)
    seen: dict[tuple, Keypoint] = {}
    for cand in candidates:
        for stub in assign_orientation(space, cand):
            kp = compute_descriptor(space, stub)
            if kp is not None:
                seen.setdefault(kp.key(), kp)
    keypoints = [seen[k] for k in sorted(seen)]
    logger.debug("detected %d keypoints in %s", len(keypoints), image.id)
    return KeypointSet(tuple(keypoints), image.id, image.radius_r)
