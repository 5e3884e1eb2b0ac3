"""
Raw AS-OCT ingestion, left/right half splitting, train/test folds and the
seeded synthetic dataset.
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from anglekit.errors import GeometryError, ManifestError
from anglekit.geometry import Point2D, SimilarityTransform2D, resize_image

logger = logging.getLogger('anglekit_data')

MANIFEST_COLUMNS = ["image_id", "label", "left_x", "left_y", "right_x", "right_y"]
SIDES: Tuple[str, str] = ("left", "right")
Side = Literal["left", "right"]

# (height, width) of the challenge scans
DEFAULT_RAW_SIZE = (998, 2130)


class Task(str, Enum):
    classification = "classification"
    localization_stage1 = "localization_stage1"
    localization_stage2 = "localization_stage2"


TASK_INPUT_SIZES: Dict[Task, int] = {
    Task.classification: 256,
    Task.localization_stage1: 499,
}


@dataclass(frozen=True, eq=False)
class RawImage:
    id: str
    pixels: np.ndarray

    def __post_init__(self) -> None:
        if self.pixels.ndim != 2:
            raise ManifestError(f"Image {self.id} must be single-channel, got shape {self.pixels.shape}")
        h, w = self.pixels.shape
        if h < 2 or w < 2:
            raise ManifestError(f"Image {self.id} too small: {w}x{h}")
        if np.any(self.pixels < 0) or np.any(self.pixels > 1):
            raise ManifestError(f"Image {self.id} intensities must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    label: int
    ss_left: Point2D
    ss_right: Point2D

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ManifestError(f"Label for {self.image_id} must be 0 (open) or 1 (closure), got {self.label}")

    def ss(self, side: str) -> Point2D:
        return self.ss_left if side == "left" else self.ss_right

    def check_bounds(self, height: int, width: int) -> None:
        for side in SIDES:
            p = self.ss(side)
            if not (0 <= p.x < width and 0 <= p.y < height):
                raise ManifestError(
                    f"{self.image_id}: {side} point ({p.x}, {p.y}) outside {width}x{height} image")
        half = width // 2
        if not (self.ss_left.x < half <= self.ss_right.x):
            raise ManifestError(
                f"{self.image_id}: expected left x < {half} <= right x, "
                f"got left x={self.ss_left.x}, right x={self.ss_right.x}")


@dataclass(frozen=True, eq=False)
class HalfSample:
    image_id: str
    side: str
    pixels: np.ndarray
    label: int
    ss: Point2D
    to_raw: SimilarityTransform2D

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class DatasetManifest:
    records: Tuple[AnnotationRecord, ...]
    image_root: Path

    def __post_init__(self) -> None:
        seen = set()
        for rec in self.records:
            if rec.image_id in seen:
                raise ManifestError(f"Duplicate image_id: {rec.image_id}")
            seen.add(rec.image_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[AnnotationRecord]:
        return iter(self.records)

    @property
    def ids(self) -> List[str]:
        return [rec.image_id for rec in self.records]

    def by_id(self, image_id: str) -> AnnotationRecord:
        for rec in self.records:
            if rec.image_id == image_id:
                return rec
        raise KeyError(image_id)

    def subset(self, ids: Iterable[str]) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest(tuple(r for r in self.records if r.image_id in keep), self.image_root)

    def image_path(self, image_id: str) -> Path:
        return Path(self.image_root) / f"{image_id}.png"

    def class_counts(self) -> Dict[int, int]:
        counts = {0: 0, 1: 0}
        for rec in self.records:
            counts[rec.label] += 1
        return counts


def read_png(path: Path) -> np.ndarray:
    """Load an 8- or 16-bit grayscale PNG normalized to [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            return np.asarray(im, dtype=np.float64) / 65535.0
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_png(pixels: np.ndarray, path: Path) -> Path:
    """Store a [0, 1] grid as a 16-bit grayscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(pixels, 0.0, 1.0) * 65535.0).astype(np.uint16)).save(path)
    return path


def load_raw_image(manifest: DatasetManifest, image_id: str) -> RawImage:
    path = manifest.image_path(image_id)
    if not path.exists():
        raise ManifestError(f"Image file not found: {path}")
    return RawImage(image_id, read_png(path).clip(0.0, 1.0))


def load_manifest(
    path: Path,
    image_root: Optional[Path] = None,
    image_size: Optional[Tuple[int, int]] = None,
) -> DatasetManifest:
    """
    Parse an annotation CSV (`image_id,label,left_x,left_y,right_x,right_y`).

    Args:
        path: CSV file
        image_root: directory holding `<image_id>.png` (defaults to the CSV's directory)
        image_size: (height, width) to check coordinates against; when omitted each
            image's size is read from its PNG header, which also checks it exists

    Raises:
        ManifestError: missing file, malformed row, out-of-bounds point, duplicate id
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"Manifest not found: {path}")
    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ManifestError(f"Malformed manifest {path}: {e}") from e

    header = [str(v).strip() for v in frame.iloc[0].tolist()] if len(frame) else []
    if header != MANIFEST_COLUMNS:
        raise ManifestError(f"Manifest {path} must have header {','.join(MANIFEST_COLUMNS)}, got {header}")

    root = Path(image_root) if image_root is not None else path.parent
    records = []
    for line_no, row in enumerate(frame.iloc[1:].itertuples(index=False), start=2):
        fields = list(row)
        if any(not isinstance(v, str) or v.strip() == "" for v in fields):
            raise ManifestError(f"{path}:{line_no}: expected {len(MANIFEST_COLUMNS)} fields")
        image_id = fields[0].strip()
        try:
            label = int(fields[1])
            lx, ly, rx, ry = (float(v) for v in fields[2:])
            rec = AnnotationRecord(image_id, label, Point2D(lx, ly), Point2D(rx, ry))
        except (ValueError, GeometryError) as e:
            raise ManifestError(f"{path}:{line_no}: {e}") from e

        if image_size is not None:
            height, width = image_size
        else:
            img_path = root / f"{image_id}.png"
            if not img_path.exists():
                raise ManifestError(f"{path}:{line_no}: image file not found: {img_path}")
            with Image.open(img_path) as im:
                width, height = im.size
        rec.check_bounds(height, width)
        records.append(rec)

    manifest = DatasetManifest(tuple(records), root)
    logger.info(f"Loaded manifest {path} with {len(manifest)} records")
    return manifest


def save_manifest(manifest: DatasetManifest, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [
        [r.image_id, r.label, r.ss_left.x, r.ss_left.y, r.ss_right.x, r.ss_right.y]
        for r in manifest.records
    ]
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(path, index=False)
    return path


def split_half(img: RawImage, rec: AnnotationRecord, mirror_right: bool = True) -> Tuple[HalfSample, HalfSample]:
    """
    Split a raw image into its left and right halves.

    An odd width drops the rightmost column first. The right half is mirrored
    (column j of the half is raw column W-1-j) so both sides share one orientation.
    Each half carries its landmark in half-frame pixels and the half -> raw transform.
    """
    if rec.image_id != img.id:
        raise ManifestError(f"Annotation {rec.image_id} does not belong to image {img.id}")
    width = img.width - (img.width % 2)
    half = width // 2
    if not (rec.ss_left.x < half <= rec.ss_right.x):
        raise ManifestError(
            f"{rec.image_id}: annotation sides inconsistent with split at x={half} "
            f"(left x={rec.ss_left.x}, right x={rec.ss_right.x})")

    left = HalfSample(
        image_id=img.id,
        side="left",
        pixels=img.pixels[:, :half].copy(),
        label=rec.label,
        ss=rec.ss_left,
        to_raw=SimilarityTransform2D.identity(),
    )
    if mirror_right:
        to_raw = SimilarityTransform2D.mirror(width)
        pixels = img.pixels[:, half:width][:, ::-1].copy()
    else:
        to_raw = SimilarityTransform2D.translation(float(half), 0.0)
        pixels = img.pixels[:, half:width].copy()
    right = HalfSample(
        image_id=img.id,
        side="right",
        pixels=pixels,
        label=rec.label,
        ss=to_raw.inverse().apply(rec.ss_right),
        to_raw=to_raw,
    )
    return left, right


def reconstruct(left: HalfSample, right: HalfSample) -> np.ndarray:
    """Reassemble the (even-width) raw grid from its two halves."""
    right_pixels = right.pixels[:, ::-1] if right.to_raw.mirror_x else right.pixels
    return np.concatenate([left.pixels, right_pixels], axis=1)


def resize_for_task(
    h: HalfSample,
    task: Task,
    size: Optional[int] = None,
) -> Tuple[np.ndarray, SimilarityTransform2D]:
    """
    Bilinear resize of a half to the square network size of `task`.

    Returns:
        The resized image and the resized-frame -> half-frame transform.
    """
    task = Task(task)
    if size is None:
        if task not in TASK_INPUT_SIZES:
            raise ValueError(f"Task {task.value} has no resize step")
        size = TASK_INPUT_SIZES[task]
    if h.width < 1 or h.height < 1:
        raise GeometryError(f"Degenerate half {h.image_id}/{h.side}: {h.width}x{h.height}")
    return resize_image(h.pixels, (size, size))


def make_split(m: DatasetManifest, ratio: float = 0.8, seed: int = 0) -> Tuple[DatasetManifest, DatasetManifest]:
    """
    Seeded train/test split by image id (both halves of an image share a fold).
    Folds keep manifest order.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"Split ratio must lie in (0, 1), got {ratio}")
    if len(m) < 2:
        raise ManifestError(f"Need at least 2 records to split, got {len(m)}")
    n_train = min(max(int(round(ratio * len(m))), 1), len(m) - 1)
    order = np.random.default_rng(seed).permutation(len(m))
    train_ids = {m.records[i].image_id for i in order[:n_train]}
    train = m.subset(train_ids)
    test = m.subset(set(m.ids) - train_ids)
    logger.info(f"Split {len(m)} images into {len(train)} train / {len(test)} test (seed={seed})")
    return train, test


@dataclass(frozen=True, eq=False)
class PreparedHalf:
    """A half resized for one network, with its landmark and the chain back to raw pixels."""
    image_id: str
    side: str
    label: int
    image: np.ndarray
    ss: Point2D
    to_raw: SimilarityTransform2D
    gt_raw: Point2D


class HalfStore:
    """
    Resolves (image_id, side, size) to prepared halves, reading and writing an
    optional `.npz` cache under `cache_dir/<size>_<mirroring>/`.
    """

    def __init__(self, manifest: DatasetManifest, cache_dir: Optional[Path] = None,
                 mirror_right: bool = True, keep_in_memory: bool = True) -> None:
        self.manifest = manifest
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.mirror_right = mirror_right
        self.keep_in_memory = keep_in_memory
        self._memory: Dict[Tuple[str, str, int], PreparedHalf] = {}

    def halves(self, image_id: str) -> Tuple[HalfSample, HalfSample]:
        return split_half(load_raw_image(self.manifest, image_id), self.manifest.by_id(image_id), self.mirror_right)

    def _cache_path(self, image_id: str, side: str, size: Optional[int]) -> Optional[Path]:
        if self.cache_dir is None:
            return None
        tag = "mirrored" if self.mirror_right else "plain"
        return self.cache_dir / f"{size or 'native'}_{tag}" / f"{image_id}_{side}.npz"

    def prepared(self, image_id: str, side: str, size: Optional[int]) -> PreparedHalf:
        """Half resized to `size` x `size`; None keeps the native half resolution."""
        key = (image_id, side, size)
        if key in self._memory:
            return self._memory[key]
        rec = self.manifest.by_id(image_id)
        path = self._cache_path(image_id, side, size)
        if path is not None and path.exists():
            with np.load(path) as blob:
                image = blob["image"]
                to_raw = SimilarityTransform2D(*blob["transform"][:4].tolist(),
                                               mirror_x=bool(blob["transform"][4]))
        else:
            half = dict(zip(SIDES, self.halves(image_id)))[side]
            if size is None:
                image, to_half = half.pixels, SimilarityTransform2D.identity()
            else:
                image, to_half = resize_image(half.pixels, (size, size))
            image = image.astype(np.float32)
            to_raw = to_half.then(half.to_raw)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                coeffs = np.array([to_raw.sx, to_raw.sy, to_raw.tx, to_raw.ty, float(to_raw.mirror_x)])
                np.savez(path, image=image, transform=coeffs)
        gt_raw = rec.ss(side)
        out = PreparedHalf(image_id, side, rec.label, image, to_raw.inverse().apply(gt_raw), to_raw, gt_raw)
        if self.keep_in_memory:
            self._memory[key] = out
        return out

    def prepare_all(self, sizes: Sequence[Optional[int]], workers: int = 1) -> int:
        jobs = [(rec.image_id, side, size) for rec in self.manifest for side in SIDES for size in sizes]
        with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
            list(pool.map(lambda job: self.prepared(*job), jobs))
        return len(jobs)


class SynthConfig(BaseModel):
    """Seeded synthetic AS-OCT stand-in: wedge-shaped angles whose apex is the landmark."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    count: int = Field(default=500, ge=1)
    # (height, width)
    size: Tuple[int, int] = (128, 128)
    # full aperture in degrees
    aperture_range_open: Tuple[float, float] = (30.0, 60.0)
    aperture_range_closed: Tuple[float, float] = (2.0, 12.0)
    closed_prior: float = Field(default=0.2, gt=0, lt=1)
    noise_sigma: float = Field(default=0.05, ge=0)
    seed: int = 0
    margin: int = Field(default=16, ge=0)
    band_width: float = Field(default=1.2, gt=0)
    bend: float = Field(default=0.004, ge=0)
    background: float = Field(default=0.08, ge=0, le=1)

    @field_validator("size", "aperture_range_open", "aperture_range_closed", mode="before")
    @classmethod
    def _split_pairs(cls, value):
        if isinstance(value, str):
            return tuple(v.strip() for v in value.split(","))
        return value

    @model_validator(mode="after")
    def _check_ranges(self) -> "SynthConfig":
        for name in ("aperture_range_open", "aperture_range_closed"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi < 180:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi < 180, got {(lo, hi)}")
        (olo, ohi), (clo, chi) = self.aperture_range_open, self.aperture_range_closed
        if not (chi < olo or ohi < clo):
            raise ValueError("Open and closed aperture ranges must be disjoint")
        if min(self.size) < 2:
            raise ValueError(f"Synthetic images must be at least 2x2, got {self.size}")
        return self


@dataclass(frozen=True)
class SynthScene:
    image_id: str
    label: int
    apertures: Tuple[float, float]
    apex_left: Point2D
    apex_right: Point2D
    noise_seed: int


def plan_synth(cfg: SynthConfig) -> List[SynthScene]:
    """Draw labels, apertures and apex positions for every synthetic image."""
    height, width = cfg.size
    half = width // 2
    if 2 * cfg.margin >= half or 2 * cfg.margin >= height:
        raise GeometryError(f"Margin {cfg.margin} leaves no room in a {width}x{height} image")
    rng = np.random.default_rng(cfg.seed)
    scenes = []
    for i in range(cfg.count):
        label = int(rng.random() < cfg.closed_prior)
        lo, hi = cfg.aperture_range_closed if label else cfg.aperture_range_open
        apertures = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
        left = Point2D(float(rng.uniform(cfg.margin, half - cfg.margin)),
                       float(rng.uniform(cfg.margin, height - 1 - cfg.margin)))
        right = Point2D(float(rng.uniform(half + cfg.margin, width - 1 - cfg.margin)),
                        float(rng.uniform(cfg.margin, height - 1 - cfg.margin)))
        scenes.append(SynthScene(f"synth_{i:05d}", label, apertures, left, right,
                                 int(rng.integers(0, 2 ** 32))))
    return scenes


def _angle_bands(u: np.ndarray, v: np.ndarray, aperture: float, cfg: SynthConfig, reach: float) -> np.ndarray:
    # u runs along the angle bisector (toward the chamber), v across it
    slope = math.tan(math.radians(aperture) / 2.0)
    inside = (u >= 0) & (u <= reach)
    two_w_sq = 2.0 * cfg.band_width ** 2
    cornea = 0.85 * np.exp(-((v + slope * u + cfg.bend * u ** 2) ** 2) / two_w_sq) * inside
    iris = 0.7 * np.exp(-((v - slope * u) ** 2) / two_w_sq) * inside
    sclera = 0.9 * np.exp(-(v ** 2) / (4.0 * two_w_sq)) * (u < 0)
    return np.maximum(np.maximum(cornea, iris), sclera)


def render_scene(scene: SynthScene, cfg: SynthConfig) -> np.ndarray:
    height, width = cfg.size
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    image = np.full((height, width), cfg.background)
    reach = 0.4 * width
    half = width // 2
    # left angle opens rightward, right angle opens leftward; each stays inside its own half
    for apex, aperture, direction, own in ((scene.apex_left, scene.apertures[0], 1.0, xs < half),
                                           (scene.apex_right, scene.apertures[1], -1.0, xs >= half)):
        u = (xs - apex.x) * direction
        v = ys - apex.y
        image = np.maximum(image, _angle_bands(u, v, aperture, cfg, reach) * own)
    noise = np.random.default_rng(scene.noise_seed).normal(0.0, cfg.noise_sigma, size=image.shape)
    return np.clip(image + noise, 0.0, 1.0)


def wedge_intensity(pixels: np.ndarray, apex: Point2D, direction: float = 1.0,
                    near: float = 6.0, far: float = 14.0, half_width: float = 1.0) -> float:
    """Mean intensity along the bisector just inside the angle aperture."""
    height, width = pixels.shape
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    u = (xs - apex.x) * direction
    v = ys - apex.y
    region = (u >= near) & (u <= far) & (np.abs(v) <= half_width)
    if not region.any():
        raise GeometryError(f"Aperture sample region around ({apex.x}, {apex.y}) is empty")
    return float(pixels[region].mean())


def synth_generate(cfg: SynthConfig, out_dir: Path, workers: int = 1) -> DatasetManifest:
    """
    Render the synthetic set: `<id>.png` per image, `manifest.csv` and a
    `provenance.json` echo of the config. Identical configs give identical bytes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenes = plan_synth(cfg)

    def _write(scene: SynthScene) -> None:
        write_png(render_scene(scene, cfg), out_dir / f"{scene.image_id}.png")

    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        list(pool.map(_write, scenes))

    manifest = DatasetManifest(
        tuple(AnnotationRecord(s.image_id, s.label, s.apex_left, s.apex_right) for s in scenes),
        out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.csv")
    (out_dir / "provenance.json").write_text(
        json.dumps({"generator": "anglekit.synth", "config": cfg.model_dump(mode="json")}, indent=2, sort_keys=True),
        encoding="utf-8",
    )
    counts = manifest.class_counts()
    logger.info(f"Generated {len(manifest)} synthetic images in {out_dir} "
                f"(open={counts[0]}, closure={counts[1]})")
    return manifest
