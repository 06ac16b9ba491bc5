"""Domain types, configuration and the localized iris image model.

A localized iris image is a square raster of side ``2r`` whose pupil and iris
are concentric about ``(r, r)``. The center is always derived from the radius,
never stored.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image

MIN_RADIUS = 8
DESCRIPTOR_SIZE = 128

Stratum = Literal["R", "Rinter", "Rnew"]


class ImageError(ValueError):
    """Raised when an image cannot be turned into a valid IrisImage."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class IrisImage:
    pixels: np.ndarray
    radius_r: int
    id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ImageError(f"expected a 2D raster, got shape {px.shape}")
        if self.radius_r < MIN_RADIUS:
            raise ImageError(f"radius {self.radius_r} below minimum {MIN_RADIUS}")
        side = 2 * self.radius_r
        if px.shape != (side, side):
            raise ImageError(
                f"dimension mismatch: raster {px.shape[1]}x{px.shape[0]} "
                f"but radius {self.radius_r} requires {side}x{side}"
            )
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ImageError("intensities must be finite and within [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def side(self) -> int:
        return 2 * self.radius_r

    @property
    def center(self) -> tuple[float, float]:
        return float(self.radius_r), float(self.radius_r)


@dataclass(frozen=True, eq=False)
class Keypoint:
    """A detected keypoint in base-image pixel coordinates.

    ``descriptor`` is ``None`` for orientation stubs that have not yet been
    described.
    """

    x: float
    y: float
    sigma: float
    orientation: float
    descriptor: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.orientation < 360.0:
            raise ValueError(f"orientation {self.orientation} outside [0, 360)")
        if self.descriptor is not None:
            d = np.asarray(self.descriptor, dtype=np.float64)
            if d.shape != (DESCRIPTOR_SIZE,):
                raise ValueError(f"descriptor must have {DESCRIPTOR_SIZE} entries")
            if np.any(d < 0):
                raise ValueError("descriptor entries must be non-negative")
            d.setflags(write=False)
            object.__setattr__(self, "descriptor", d)

    def key(self) -> tuple[float, float, float, float]:
        return (self.y, self.x, self.sigma, self.orientation)

    def to_dict(self) -> dict:
        return {
            "x": self.x,
            "y": self.y,
            "sigma": self.sigma,
            "orientation": self.orientation,
            "descriptor": [float(v) for v in self.descriptor] if self.descriptor is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Keypoint:
        desc = d.get("descriptor")
        return cls(
            x=float(d["x"]),
            y=float(d["y"]),
            sigma=float(d["sigma"]),
            orientation=float(d["orientation"]),
            descriptor=None if desc is None else np.asarray(desc, dtype=np.float64),
        )


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Ordered keypoints of one image (``K_m`` or ``K_n``).

    ``radius_r`` travels with the set so matching can run without the raster.
    """

    keypoints: tuple[Keypoint, ...]
    source_image_id: str = ""
    radius_r: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "keypoints", tuple(self.keypoints))

    @property
    def cardinality(self) -> int:
        return len(self.keypoints)

    def __len__(self) -> int:
        return len(self.keypoints)

    def __getitem__(self, idx: int) -> Keypoint:
        return self.keypoints[idx]

    def positions(self) -> np.ndarray:
        if not self.keypoints:
            return np.zeros((0, 2))
        return np.array([[k.x, k.y] for k in self.keypoints], dtype=np.float64)

    def descriptors(self) -> np.ndarray:
        if not self.keypoints:
            return np.zeros((0, DESCRIPTOR_SIZE))
        return np.stack([k.descriptor for k in self.keypoints])

    def to_json(self) -> dict:
        return {
            "source_image_id": self.source_image_id,
            "radius_r": self.radius_r,
            "keypoints": [k.to_dict() for k in self.keypoints],
        }

    @classmethod
    def from_json(cls, doc, radius_r: float | None = None, source_image_id: str = "") -> KeypointSet:
        """Accept either the wrapped object form or a bare keypoint array."""
        if isinstance(doc, list):
            return cls(tuple(Keypoint.from_dict(d) for d in doc), source_image_id, radius_r)
        r = doc.get("radius_r") if radius_r is None else radius_r
        return cls(
            tuple(Keypoint.from_dict(d) for d in doc["keypoints"]),
            doc.get("source_image_id", source_image_id),
            r,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path, radius_r: float | None = None) -> KeypointSet:
        return cls.from_json(json.loads(Path(path).read_text()), radius_r=radius_r,
                             source_image_id=Path(path).stem)


@dataclass(frozen=True)
class MatchPair:
    i: int
    j: int
    descriptor_distance: float
    gamma: float | None = None  # None until Strata II runs
    psi: float | None = None  # None until Strata III runs

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MatchSet:
    pairs: tuple[MatchPair, ...]
    stratum: Stratum = "R"

    def __post_init__(self):
        pairs = tuple(self.pairs)
        object.__setattr__(self, "pairs", pairs)
        gi = [p.i for p in pairs]
        pj = [p.j for p in pairs]
        if len(set(gi)) != len(gi) or len(set(pj)) != len(pj):
            raise ValueError("match set is not one-to-one")

    @property
    def eta(self) -> int:
        return len(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def index_pairs(self) -> set[tuple[int, int]]:
        return {(p.i, p.j) for p in self.pairs}

    def to_json(self) -> dict:
        return {"stratum": self.stratum, "eta": self.eta, "pairs": [p.to_dict() for p in self.pairs]}


@dataclass(frozen=True)
class DetectorParams:
    """Scale-space detector settings; ``octave_count=None`` uses as many as fit."""

    octave_count: int | None = None
    scales_per_octave: int = 3
    base_sigma: float = 1.6
    contrast_threshold: float = 0.03
    edge_ratio_threshold: float = 10.0
    assumed_blur: float = 0.5

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PipelineConfig:
    nobins: int = 10
    hp_percent: float = 30.0
    lp_percent: float = 10.0
    angular_half_width: float = 90.0
    scale_tolerance: float = 0.2
    nn_ratio_threshold: float = 0.8
    decision_threshold: int = 10
    detector: DetectorParams = field(default_factory=DetectorParams)

    def __post_init__(self):
        if not isinstance(self.nobins, int) or self.nobins < 1:
            raise ConfigError("nobins must be a positive integer")
        if not 0.0 < self.hp_percent <= 100.0:
            raise ConfigError("hp_percent must lie in (0, 100]")
        if not 0.0 <= self.lp_percent < self.hp_percent:
            raise ConfigError("lp_percent must lie in [0, hp_percent)")
        if not 0.0 < self.angular_half_width <= 180.0:
            raise ConfigError("angular_half_width must lie in (0, 180]")
        if not self.scale_tolerance > 0.0:
            raise ConfigError("scale_tolerance must be positive")
        if not 0.0 < self.nn_ratio_threshold < 1.0:
            raise ConfigError("nn_ratio_threshold must lie in (0, 1)")
        if not isinstance(self.decision_threshold, int) or self.decision_threshold < 1:
            raise ConfigError("decision_threshold must be a positive integer")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> PipelineConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "detector" in doc:
            det = doc["detector"]
            det_known = {f.name for f in fields(DetectorParams)}
            if set(det) - det_known:
                raise ConfigError(f"unknown detector keys: {sorted(set(det) - det_known)}")
            doc["detector"] = DetectorParams(**det)
        return cls(**doc)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return PipelineConfig.from_json(doc)


def center_crop(raster: np.ndarray, side: int) -> np.ndarray:
    """Crop (or zero-pad) ``raster`` symmetrically to ``side`` x ``side``."""
    out = np.zeros((side, side), dtype=raster.dtype)
    h, w = raster.shape
    sy, sx = max((h - side) // 2, 0), max((w - side) // 2, 0)
    dy, dx = max((side - h) // 2, 0), max((side - w) // 2, 0)
    ch, cw = min(h, side), min(w, side)
    out[dy:dy + ch, dx:dx + cw] = raster[sy:sy + ch, sx:sx + cw]
    return out


def read_raster(path: str | Path) -> np.ndarray:
    """Decode an 8-bit grayscale PGM/PNG into floats in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "1"):
                im = im.convert("L")
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ImageError(f"unreadable image {path}: {exc}") from exc
    return arr / 255.0


def load_image(path: str | Path, radius_r: int, strict: bool = True, image_id: str | None = None) -> IrisImage:
    raster = read_raster(path)
    if radius_r < MIN_RADIUS:
        raise ImageError(f"radius {radius_r} below minimum {MIN_RADIUS}")
    side = 2 * radius_r
    if raster.shape != (side, side):
        if strict:
            raise ImageError(
                f"dimension mismatch: {path} is {raster.shape[1]}x{raster.shape[0]}, "
                f"radius {radius_r} requires {side}x{side}"
            )
        raster = center_crop(raster, side)
    return IrisImage(raster, radius_r, image_id if image_id is not None else Path(path).stem)


def save_image(image: IrisImage | np.ndarray, path: str | Path) -> None:
    px = image.pixels if isinstance(image, IrisImage) else image
    data = np.clip(np.rint(np.asarray(px) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def angle_about(x: float, y: float, cx: float, cy: float) -> float | None:
    """Angle in degrees [0, 360) of (x, y) about (cx, cy), ``None`` at the center.

    Measured with x to the right and y down the raster.
    """
    dx, dy = x - cx, y - cy
    if dx == 0.0 and dy == 0.0:
        return None
    return wrap_degrees(np.degrees(np.arctan2(dy, dx)))


def wrap_degrees(a: float) -> float:
    a = float(a) % 360.0
    # -tiny % 360 rounds to 360.0
    return 0.0 if a >= 360.0 else a
