"""torch Datasets over prepared halves for each training task."""
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from torch.utils.data import Dataset

from anglekit.data_pipeline import SIDES, DatasetManifest, HalfStore, PreparedHalf
from anglekit.errors import GeometryError, ManifestError
from anglekit.geometry import Point2D, crop_window, encode_heatmap, pad_to
from anglekit.localizer import LocalizerConfig

logger = logging.getLogger('anglekit_datasets')

HalfKey = Tuple[str, str]


def item_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-item generator so augmentation does not depend on worker scheduling."""
    return np.random.default_rng([seed, epoch, index])


def _shift(image: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(image)
    h, w = image.shape
    src = image[max(-dy, 0):h - max(dy, 0), max(-dx, 0):w - max(dx, 0)]
    out[max(dy, 0):max(dy, 0) + src.shape[0], max(dx, 0):max(dx, 0) + src.shape[1]] = src
    return out


class HalfDataset(Dataset):
    """Indexes every (image_id, side) of a manifest in manifest order."""

    def __init__(self, store: HalfStore, manifest: DatasetManifest, seed: int = 0) -> None:
        if len(manifest) == 0:
            raise ManifestError("Cannot build a dataset from an empty fold")
        self.store = store
        self.manifest = manifest
        self.seed = seed
        self.epoch = 0
        self.keys: List[HalfKey] = [(rec.image_id, side) for rec in manifest for side in SIDES]

    def __len__(self) -> int:
        return len(self.keys)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def label_ratio(self) -> float:
        counts = self.manifest.class_counts()
        return counts[1] / max(len(self.manifest), 1)


class ClassificationHalves(HalfDataset):
    def __init__(self, store: HalfStore, manifest: DatasetManifest, size: int = 256, shift_augment: int = 0,
                 seed: int = 0) -> None:
        super().__init__(store, manifest, seed)
        self.size = size
        self.shift_augment = shift_augment

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        image_id, side = self.keys[index]
        half = self.store.prepared(image_id, side, self.size)
        image = half.image
        if self.shift_augment > 0:
            dx, dy = item_rng(self.seed, self.epoch, index).integers(-self.shift_augment, self.shift_augment + 1, 2)
            image = _shift(image, int(dx), int(dy))
        return {
            "image": torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None],
            "target": torch.tensor([float(half.label)], dtype=torch.float32),
            "index": torch.tensor(index),
        }


class LocalizationHalves(HalfDataset):
    """
    Stage 1 yields the padded resized half with its Gaussian target. Stage 2
    yields a crop around either a supplied coarse point or the ground truth
    displaced by uniform jitter in [-crop_jitter, crop_jitter]^2, redrawn per epoch.

    Every item also carries the crop offset and valid extent so predictions can
    be mapped back to raw pixels through `record(index)`.
    """

    def __init__(self, store: HalfStore, manifest: DatasetManifest, cfg: LocalizerConfig, stage: int,
                 crop_jitter: float = 32.0, coarse_points: Optional[Dict[HalfKey, Point2D]] = None,
                 seed: int = 0) -> None:
        super().__init__(store, manifest, seed)
        if stage not in (1, 2):
            raise ValueError(f"Localization stage must be 1 or 2, got {stage}")
        self.cfg = cfg
        self.stage = stage
        self.crop_jitter = crop_jitter
        self.coarse_points = coarse_points

    def source_size(self) -> Optional[int]:
        if self.stage == 2 and self.cfg.crop_frame == "half":
            return None
        return self.cfg.stage1_size

    def record(self, index: int) -> PreparedHalf:
        image_id, side = self.keys[index]
        return self.store.prepared(image_id, side, self.source_size())

    def _target(self, center: Point2D, shape: Tuple[int, int]) -> np.ndarray:
        stride = self.cfg.heatmap_stride
        grid = (shape[0] // stride, shape[1] // stride)
        try:
            return encode_heatmap(Point2D(center.x / stride, center.y / stride), grid, self.cfg.gaussian).values
        except GeometryError:
            # landmark fell outside this crop
            return np.zeros(grid)

    def crop_center(self, index: int, src: PreparedHalf) -> Point2D:
        if self.coarse_points is not None:
            return self.coarse_points[self.keys[index]]
        dx, dy = item_rng(self.seed, self.epoch, index).uniform(-self.crop_jitter, self.crop_jitter, 2)
        return Point2D(src.ss.x + float(dx), src.ss.y + float(dy))

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        src = self.record(index)
        if self.stage == 1:
            image, _ = pad_to(src.image, self.cfg.stage1_shape())
            offset = (0.0, 0.0)
            valid = src.image.shape[:2]
            target = self._target(src.ss, image.shape)
        else:
            crop, crop_to_src = crop_window(src.image, self.crop_center(index, src), self.cfg.crop_size)
            image, _ = pad_to(crop, self.cfg.stage2_shape())
            offset = (crop_to_src.tx, crop_to_src.ty)
            valid = crop.shape[:2]
            target = self._target(crop_to_src.inverse().apply(src.ss), image.shape)
        return {
            "image": torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None],
            "target": torch.from_numpy(target.astype(np.float32))[None],
            "offset": torch.tensor(offset, dtype=torch.float64),
            "valid": torch.tensor(valid, dtype=torch.int64),
            "index": torch.tensor(index),
        }
