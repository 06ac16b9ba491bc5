"""Dataset manifests, synthetic ground truth and experiment orchestration."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import evaluation as ev
from .core import DetectorParams, IrisImage, KeypointSet, PipelineConfig, load_image, save_image
from .matching import match_pipeline
from .sift import detect

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm")
CACHE_ENV = "STRATA_CACHE_DIR"
CACHE_VERSION = "1"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    subject_id: str
    instance_id: str
    path: str
    radius_r: int
    rotation_deg: float | None = None
    scale: float | None = None

    @property
    def id(self) -> str:
        return f"{self.subject_id}/{self.instance_id}"


@dataclass(frozen=True)
class Protocol:
    genuine: str = "all_pairs_within_subject"
    impostor: str = "one_per_other_subject"  # or "all_pairs"
    seed: int = 0


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    samples: tuple[Sample, ...]
    protocol: Protocol = field(default_factory=Protocol)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))

    def resolve(self, sample: Sample) -> Path:
        return Path(self.root) / sample.path

    def subjects(self) -> dict[str, list[Sample]]:
        out: dict[str, list[Sample]] = {}
        for s in self.samples:
            out.setdefault(s.subject_id, []).append(s)
        return out

    def genuine_pairs(self) -> list[tuple[Sample, Sample]]:
        pairs = []
        for group in self.subjects().values():
            for a in range(len(group)):
                for b in range(a + 1, len(group)):
                    pairs.append((group[a], group[b]))
        return pairs

    def impostor_pairs(self) -> list[tuple[Sample, Sample]]:
        if self.protocol.impostor == "all_pairs":
            s = self.samples
            return [(s[a], s[b]) for a in range(len(s)) for b in range(a + 1, len(s))
                    if s[a].subject_id != s[b].subject_id]
        if self.protocol.impostor != "one_per_other_subject":
            raise DatasetError(f"unknown impostor protocol {self.protocol.impostor!r}")
        rng = np.random.default_rng(self.protocol.seed)
        groups = self.subjects()
        pairs = []
        for probe in self.samples:
            for subject, group in groups.items():
                if subject == probe.subject_id:
                    continue
                pairs.append((group[int(rng.integers(len(group)))], probe))
        return pairs

    def protocol_pairs(self) -> list[tuple[Sample, Sample, str]]:
        return ([(g, p, "genuine") for g, p in self.genuine_pairs()]
                + [(g, p, "impostor") for g, p in self.impostor_pairs()])

    def to_json(self) -> dict:
        return {
            "root": self.root,
            "samples": [{k: v for k, v in asdict(s).items() if v is not None} for s in self.samples],
            "protocol": asdict(self.protocol),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> DatasetManifest:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
        root = Path(doc.get("root", "."))
        if not root.is_absolute():
            root = path.parent / root
        manifest = cls(str(root), tuple(Sample(**s) for s in doc["samples"]),
                       Protocol(**doc.get("protocol", {})))
        manifest.validate()
        return manifest

    def validate(self) -> None:
        if not self.samples:
            raise DatasetError("no samples")
        for n, s in enumerate(self.samples):
            if not self.resolve(s).is_file():
                raise DatasetError(f"sample {n} ({s.id}): missing file {self.resolve(s)}")


def _sidecar_radius(image_path: Path, default: int | None) -> int:
    sidecar = image_path.with_suffix(image_path.suffix + ".json")
    if sidecar.exists():
        try:
            return int(json.loads(sidecar.read_text())["radius_r"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise DatasetError(f"unreadable metadata {sidecar}: {exc}") from exc
    if default is None:
        raise DatasetError(f"no radius for {image_path}: add a sidecar or pass a global radius")
    return default


def ingest(root: str | Path, layout: str = "folders", radius: int | None = None,
           protocol: Protocol | None = None) -> DatasetManifest:
    """Build a manifest from a subject-per-folder tree or an ``index.csv``.

    Folder layout: ``root/<subject>/<instance>.png``; the radius comes from a
    ``<instance>.png.json`` sidecar with ``radius_r`` or from ``radius``.
    CSV layout: ``root/index.csv`` with columns subject_id, instance_id, path,
    radius_r (path relative to root).
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    samples: list[Sample] = []
    if layout == "folders":
        for sub in sorted(p for p in root.iterdir() if p.is_dir()):
            files = sorted(p for p in sub.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
            if not files:
                raise DatasetError(f"subject {sub.name} has no instances")
            for f in files:
                samples.append(Sample(sub.name, f.stem, str(f.relative_to(root)), _sidecar_radius(f, radius)))
    elif layout == "csv":
        index = root / "index.csv"
        if not index.exists():
            raise DatasetError(f"missing {index}")
        with open(index, newline="") as fh:
            for n, row in enumerate(csv.DictReader(fh), start=2):
                try:
                    r = int(row.get("radius_r") or radius)
                    sample = Sample(row["subject_id"], row["instance_id"], row["path"], r)
                except (KeyError, TypeError, ValueError) as exc:
                    raise DatasetError(f"{index}:{n}: malformed row ({exc})") from exc
                if not (root / sample.path).is_file():
                    raise DatasetError(f"{index}:{n}: missing file {sample.path}")
                samples.append(sample)
    else:
        raise DatasetError(f"unknown layout {layout!r}")
    if not samples:
        raise DatasetError("no samples")
    return DatasetManifest(str(root), tuple(samples), protocol or Protocol())


# synthetic ground truth

@dataclass(frozen=True)
class TransformSpec:
    rotation_range: tuple[float, float] = (0.0, 360.0)
    scale_range: tuple[float, float] = (0.8, 1.2)
    identity_first: bool = True  # instance 0 is the untransformed base
    noise_sigma: float = 0.0


def synthetic_texture(radius: int, rng: np.random.Generator, pupil_fraction: float = 0.3) -> np.ndarray:
    """Iris-like texture: radial and angular sinusoids plus band-limited noise
    inside the pupil/iris annulus, zero elsewhere."""
    n = 2 * radius
    y, x = np.mgrid[0:n, 0:n].astype(float)
    dx, dy = x - radius, y - radius
    rho, theta = np.hypot(dx, dy), np.arctan2(dy, dx)

    noise = ndimage.gaussian_filter(rng.standard_normal((n, n)), 2.0)
    noise /= noise.std()
    radial_freq = rng.uniform(0.3, 0.6)
    spokes = int(rng.integers(8, 20))
    phase = rng.uniform(0, 2 * np.pi, size=2)
    texture = (0.12 * np.sin(radial_freq * rho + phase[0])
               + 0.08 * np.sin(spokes * theta + phase[1])
               + 0.22 * noise)
    inner = pupil_fraction * radius
    mask = np.clip((radius - 2 - rho) / 2, 0, 1) * np.clip((rho - inner) / 2, 0, 1)
    return np.clip(0.5 + texture, 0.0, 1.0) * mask


def transform_image(pixels: np.ndarray, radius: int, rotation_deg: float, scale: float) -> tuple[np.ndarray, int]:
    """Rotate by ``rotation_deg`` and scale by ``scale`` about ``(r, r)``.

    The output has side ``2 * round(scale * r)``; the effective scale is the
    ratio of radii. Angles grow with x right and y down. Transforms that land
    on integer source pixels (multiples of 90 degrees at unit scale) are done
    by exact gathering.
    """
    r_out = int(round(scale * radius))
    s = r_out / radius
    n = 2 * r_out
    y, x = np.mgrid[0:n, 0:n].astype(float)
    a = math.radians(rotation_deg)
    c, si = math.cos(a), math.sin(a)
    u, v = (x - r_out) / s, (y - r_out) / s
    src_x = radius + c * u + si * v
    src_y = radius - si * u + c * v
    rx, ry = np.rint(src_x), np.rint(src_y)
    if np.all(np.abs(src_x - rx) < 1e-9) and np.all(np.abs(src_y - ry) < 1e-9):
        rx, ry = rx.astype(int), ry.astype(int)
        inside = (rx >= 0) & (rx < pixels.shape[1]) & (ry >= 0) & (ry < pixels.shape[0])
        out = np.zeros((n, n))
        out[inside] = pixels[ry[inside], rx[inside]]
        return out, r_out
    out = ndimage.map_coordinates(pixels, [src_y, src_x], order=3, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0), r_out


def forward_point(x: float, y: float, radius: int, rotation_deg: float, r_out: int) -> tuple[float, float]:
    """Where a base-image point lands after :func:`transform_image`."""
    s = r_out / radius
    a = math.radians(rotation_deg)
    u, v = x - radius, y - radius
    return (r_out + s * (math.cos(a) * u - math.sin(a) * v),
            r_out + s * (math.sin(a) * u + math.cos(a) * v))


def synthetic_subjects(seed: int, subject_count: int, instances_per_subject: int,
                       radius: int = 64, spec: TransformSpec | None = None):
    """Yield (subject, instance, pixels, radius, rotation, scale) in memory."""
    spec = spec or TransformSpec()
    rng = np.random.default_rng(seed)
    for subj in range(subject_count):
        base = synthetic_texture(radius, rng)
        for inst in range(instances_per_subject):
            if inst == 0 and spec.identity_first:
                alpha, scale = 0.0, 1.0
            else:
                alpha = float(rng.uniform(*spec.rotation_range))
                scale = float(rng.uniform(*spec.scale_range))
            pixels, r_out = transform_image(base, radius, alpha, scale)
            if spec.noise_sigma > 0:
                pixels = np.clip(pixels + spec.noise_sigma * rng.standard_normal(pixels.shape), 0, 1)
            yield f"s{subj:03d}", f"i{inst:02d}", pixels, r_out, alpha, r_out / radius


def generate_synthetic(out_dir: str | Path, seed: int = 42, subject_count: int = 5,
                       instances_per_subject: int = 3, spec: TransformSpec | None = None,
                       radius: int = 64) -> DatasetManifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = []
    for subj, inst, pixels, r_out, alpha, scale in synthetic_subjects(
            seed, subject_count, instances_per_subject, radius, spec):
        rel = Path(subj) / f"{inst}.png"
        (out_dir / subj).mkdir(exist_ok=True)
        save_image(pixels, out_dir / rel)
        samples.append(Sample(subj, inst, rel.as_posix(), r_out, alpha, scale))
    manifest = DatasetManifest(".", tuple(samples), Protocol(seed=seed))
    manifest.save(out_dir / "manifest.json")
    return DatasetManifest(str(out_dir), manifest.samples, manifest.protocol)


# experiment orchestration

def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def cache_key(image_bytes: bytes, radius: int, params: DetectorParams) -> str:
    h = hashlib.sha256()
    h.update(image_bytes)
    h.update(json.dumps({"radius": radius, "params": params.to_json(), "v": CACHE_VERSION},
                        sort_keys=True).encode())
    return h.hexdigest()


def cached_detect(path: Path, radius: int, params: DetectorParams, image_id: str,
                  cache_dir: str | Path | None = None) -> KeypointSet:
    """Detect keypoints, reusing a JSON cache keyed by content and parameters."""
    data = path.read_bytes()
    key = cache_key(data, radius, params)
    cache_dir = cache_dir or os.environ.get(CACHE_ENV)
    folder = Path(cache_dir) if cache_dir else path.parent
    cache_file = folder / f"{path.stem}.{key[:16]}.kp.json"
    if cache_file.exists():
        return replace(KeypointSet.load(cache_file, radius_r=radius), source_image_id=image_id)
    kps = detect(load_image(path, radius, image_id=image_id), params)
    folder.mkdir(parents=True, exist_ok=True)
    kps.save(cache_file)
    return kps


def _compare(args):
    gallery, probe, config = args
    try:
        return match_pipeline(gallery, probe, config).etas, None
    except Exception as exc:  # per-pair failure must not stop the run
        return None, f"{type(exc).__name__}: {exc}"


@dataclass
class ExperimentResult:
    records: list[ev.ScoreRecord]
    report: ev.ErrorReport
    failures: list[tuple[str, str, str]]
    out_dir: Path


def run_experiment(manifest: DatasetManifest, config: PipelineConfig | None = None,
                   stratum: str | int = 3, out_dir: str | Path | None = None,
                   workers: int = 1, cache_dir: str | Path | None = None) -> ExperimentResult:
    config = config or PipelineConfig()
    stratum = ev.normalize_stratum(stratum)
    keypoints: dict[str, KeypointSet] = {}
    hashes: dict[str, str] = {}
    for s in manifest.samples:
        path = manifest.resolve(s)
        hashes[s.id] = git_blob_hash(path.read_bytes())
        keypoints[s.id] = cached_detect(path, s.radius_r, config.detector, s.id, cache_dir)

    pairs = manifest.protocol_pairs()
    jobs = [(keypoints[g.id], keypoints[p.id], config) for g, p, _ in pairs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_compare, jobs, chunksize=8))
    else:
        outcomes = [_compare(j) for j in jobs]

    records, failures = [], []
    for (g, p, label), (etas, err) in zip(pairs, outcomes):
        if err is not None:
            failures.append((g.id, p.id, err))
            continue
        records.append(ev.ScoreRecord(g.id, p.id, label, *etas))

    scores = [r.at(stratum) for r in records]
    report = ev.compute_error_measures(scores, config.decision_threshold)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ev.write_scores_csv(out / "scores.csv", records)
        (out / "report.json").write_text(json.dumps({"stratum": stratum, **report.to_json()}, indent=2) + "\n")
        write_reports(records, out)
        if failures:
            with open(out / "failures.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["gallery_id", "probe_id", "error"])
                w.writerows(failures)
        inputs_hash = git_blob_hash(json.dumps(hashes, sort_keys=True).encode())
        meta = {
            "config": config.to_json(),
            "stratum": stratum,
            "manifest": manifest.to_json(),
            "input_hashes": hashes,
            "inputs_hash": inputs_hash,
            "pairs": len(pairs),
            "failures": len(failures),
        }
        (out / "run_metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return ExperimentResult(records, report, failures, out)


def write_reports(records: list[ev.ScoreRecord], out_dir: str | Path) -> dict[str, ev.Sweep]:
    """Per-stratum curve CSVs plus accuracy, ROC and score-histogram SVGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sweeps = {}
    for stratum in ev.STRATA:
        scores = [r.at(stratum) for r in records]
        sweeps[stratum] = ev.sweep_thresholds(scores)
        ev.write_curve_csv(out_dir / f"curve_stratum_{stratum}.csv", sweeps[stratum])
    ev.plot_curves(sweeps, out_dir)
    final = [r.at("III") for r in records]
    ev.plot_histogram(ev.score_histogram(final), out_dir / "score_histogram.svg", "Strata III")
    return sweeps
