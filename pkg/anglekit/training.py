"""
Seeded training loops: Adam with a per-step cosine learning rate, per-epoch
validation, best/last checkpoints and resumable state.
"""
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field
from torch.utils.data import DataLoader

from anglekit.data_pipeline import DatasetManifest, HalfStore, Task
from anglekit.datasets import ClassificationHalves, HalfKey, LocalizationHalves
from anglekit.errors import CheckpointError, ConfigError, ManifestError, NoResponseError
from anglekit.evaluation import ScoredSample, roc_auc
from anglekit.geometry import Point2D, SimilarityTransform2D, pad_to
from anglekit.localizer import LocalizerConfig, heatmap_to_point, predict_point
from anglekit.losses import LossConfig, build_classification_criterion, build_localization_criterion

logger = logging.getLogger('anglekit_training')

CHECKPOINT_MAGIC = "ANGLEKIT-CKPT"
CHECKPOINT_VERSION = 1
DEFAULT_BATCH_SIZES: Dict[Task, int] = {
    Task.classification: 72,
    Task.localization_stage1: 27,
    Task.localization_stage2: 27,
}


class OptimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr0: float = Field(default=1e-3, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    weight_decay: float = Field(default=0.0, ge=0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    task: Task = Task.classification
    # None picks the per-task default
    batch_size: Optional[int] = Field(default=None, ge=1)
    epochs: int = Field(default=100, ge=1)
    seed: int = 0
    crop_jitter: float = Field(default=32.0, ge=0)
    crops_from_coarse: bool = False
    shift_augment: int = Field(default=0, ge=0)
    grad_clip: Optional[float] = Field(default=None, gt=0)
    workers: int = Field(default=0, ge=0)

    def resolved_batch_size(self) -> int:
        return self.batch_size or DEFAULT_BATCH_SIZES[self.task]


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """lr0 * 0.5 * (1 + cos(pi * t / total)) for step t in [0, total]."""
    if total < 1:
        raise ValueError(f"Total step count must be positive, got {total}")
    if not 0 <= t <= total:
        raise ValueError(f"Step {t} outside schedule [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)


def epoch_generator(seed: int, epoch: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, epoch]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(state))


def build_optimizer(model: nn.Module, cfg: OptimConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=(cfg.beta1, cfg.beta2),
                            eps=cfg.eps, weight_decay=cfg.weight_decay)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_metric: float


@dataclass
class TrainResult:
    model: nn.Module
    history: List[EpochRecord]
    best_epoch: Optional[int]
    best_metric: Optional[float]
    lr_trace: List[float] = field(default_factory=list)
    run_dir: Optional[Path] = None
    # stage 2 only: "coarse" or "ground_truth" crop centers on the validation fold
    validation_crops: Optional[str] = None


def save_checkpoint(path: Path, state: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"magic": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION, **state}, path)
    return path


def load_checkpoint(path: Path, map_location: str = "cpu") -> Dict[str, Any]:
    """
    Raises:
        CheckpointError: unreadable file, foreign format or version mismatch
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location=map_location, weights_only=False)
    except Exception as e:
        raise CheckpointError(f"Unreadable checkpoint {path}: {e}") from e
    if not isinstance(blob, dict) or blob.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not an anglekit checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has format version {blob.get('version')}, expected {CHECKPOINT_VERSION}")
    return blob


def write_history(history: List[EpochRecord], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([asdict(rec) for rec in history], columns=["epoch", "lr", "train_loss", "val_metric"])
    frame.to_csv(path, index=False)
    return path


StepFn = Callable[[nn.Module, Dict[str, torch.Tensor]], Tuple[torch.Tensor, torch.Tensor]]


class Trainer:
    """
    Runs `epochs` passes over `train_set`. The learning rate is set before every
    step from the cosine schedule over the total step count. After each epoch
    `validate(model)` is called; `higher_is_better` decides which epoch is best.
    """

    def __init__(self, model: nn.Module, criterion: nn.Module, train_set, forward: StepFn,
                 validate: Callable[[nn.Module], float], optim: OptimConfig, train: TrainConfig,
                 higher_is_better: bool, run_dir: Optional[Path] = None, config_echo: Optional[dict] = None,
                 device: str = "cpu") -> None:
        self.model = model.to(device)
        self.criterion = criterion
        self.train_set = train_set
        self.forward = forward
        self.validate = validate
        self.optim_cfg = optim
        self.train_cfg = train
        self.higher_is_better = higher_is_better
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.config_echo = config_echo or {}
        self.device = device

        self.batch_size = train.resolved_batch_size()
        self.drop_last = len(train_set) > self.batch_size
        self.steps_per_epoch = len(train_set) // self.batch_size if self.drop_last else 1
        self.total_steps = self.steps_per_epoch * train.epochs
        self.optimizer = build_optimizer(self.model, optim)
        self.step = 0
        self.epoch = 0
        self.history: List[EpochRecord] = []
        self.lr_trace: List[float] = []
        self.best_metric: Optional[float] = None
        self.best_epoch: Optional[int] = None
        self.best_state: Optional[Dict[str, torch.Tensor]] = None

    def _loader(self) -> DataLoader:
        if hasattr(self.train_set, "set_epoch"):
            self.train_set.set_epoch(self.epoch)
        return DataLoader(self.train_set, batch_size=self.batch_size, shuffle=True, drop_last=self.drop_last,
                          num_workers=self.train_cfg.workers,
                          generator=epoch_generator(self.train_cfg.seed, self.epoch))

    def train_epoch(self) -> float:
        self.model.train()
        total, seen = 0.0, 0
        for batch in self._loader():
            lr = cosine_lr(self.step, self.total_steps, self.optim_cfg.lr0)
            for group in self.optimizer.param_groups:
                group["lr"] = lr
            self.lr_trace.append(lr)
            batch = {k: v.to(self.device) for k, v in batch.items()}
            self.optimizer.zero_grad()
            pred, target = self.forward(self.model, batch)
            loss = self.criterion(pred, target)
            loss.backward()
            if self.train_cfg.grad_clip is not None:
                nn.utils.clip_grad_norm_(self.model.parameters(), self.train_cfg.grad_clip)
            self.optimizer.step()
            self.step += 1
            total += loss.item() * len(target)
            seen += len(target)
        return total / max(seen, 1)

    def _is_better(self, metric: float) -> bool:
        if not math.isfinite(metric):
            return False
        if self.best_metric is None:
            return True
        return metric > self.best_metric if self.higher_is_better else metric < self.best_metric

    def state(self) -> Dict[str, Any]:
        return {
            "config": self.config_echo,
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "total_steps": self.total_steps,
            "history": [asdict(r) for r in self.history],
            "lr_trace": list(self.lr_trace),
            "best_metric": self.best_metric,
            "best_epoch": self.best_epoch,
            "best_state": self.best_state,
            "torch_rng": torch.get_rng_state(),
        }

    def resume(self, path: Path) -> "Trainer":
        blob = load_checkpoint(path)
        if blob["total_steps"] != self.total_steps:
            raise CheckpointError(f"{path} was written for {blob['total_steps']} steps, "
                                  f"this run has {self.total_steps}")
        self.model.load_state_dict(blob["model"])
        self.optimizer.load_state_dict(blob["optimizer"])
        self.step = blob["step"]
        self.epoch = blob["epoch"]
        self.history = [EpochRecord(**r) for r in blob["history"]]
        self.lr_trace = list(blob["lr_trace"])
        self.best_metric = blob["best_metric"]
        self.best_epoch = blob["best_epoch"]
        self.best_state = blob["best_state"]
        torch.set_rng_state(blob["torch_rng"])
        logger.info(f"Resumed from {path} at epoch {self.epoch}, step {self.step}")
        return self

    def fit(self, max_epochs: Optional[int] = None) -> TrainResult:
        """
        Train until the configured epoch count, or for at most `max_epochs` more
        epochs. Once the schedule is complete the best weights are restored.
        """
        stop = self.train_cfg.epochs if max_epochs is None else min(self.train_cfg.epochs, self.epoch + max_epochs)
        while self.epoch < stop:
            start_time = time.time()
            lr = cosine_lr(self.step, self.total_steps, self.optim_cfg.lr0)
            train_loss = self.train_epoch()
            metric = float(self.validate(self.model))
            self.history.append(EpochRecord(self.epoch + 1, lr, train_loss, metric))
            if self._is_better(metric):
                self.best_metric, self.best_epoch = metric, self.epoch + 1
                self.best_state = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
            self.epoch += 1
            logger.info(f"epoch {self.epoch}/{self.train_cfg.epochs} lr={lr:.6g} train_loss={train_loss:.6f} "
                        f"val_metric={metric:.6f} ({time.time() - start_time:.2f}s)")
            if self.run_dir is not None:
                save_checkpoint(self.run_dir / "last.pt", self.state())
                if self.best_epoch == self.epoch:
                    save_checkpoint(self.run_dir / "best.pt", self.state())
                write_history(self.history, self.run_dir / "history.csv")

        if self.epoch >= self.train_cfg.epochs and self.best_state is not None:
            self.model.load_state_dict(self.best_state)
            logger.info(f"Restored best weights from epoch {self.best_epoch} (val_metric={self.best_metric:.6f})")
        return TrainResult(self.model, list(self.history), self.best_epoch, self.best_metric,
                           list(self.lr_trace), self.run_dir)


def _classification_step(model: nn.Module, batch: Dict[str, torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
    return model(batch["image"]), batch["target"]


def _localization_step(model: nn.Module, batch: Dict[str, torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
    return torch.sigmoid(model(batch["image"])), batch["target"]


def _eval_loader(dataset, batch_size: int) -> DataLoader:
    return DataLoader(dataset, batch_size=batch_size, shuffle=False)


def classification_scores(model: nn.Module, dataset: ClassificationHalves, batch_size: int = 32,
                          device: str = "cpu") -> List[ScoredSample]:
    model.eval()
    out = []
    with torch.no_grad():
        for batch in _eval_loader(dataset, batch_size):
            probs = model(batch["image"].to(device))[:, 0].cpu().tolist()
            for idx, p, y in zip(batch["index"].tolist(), probs, batch["target"][:, 0].tolist()):
                image_id, side = dataset.keys[idx]
                out.append(ScoredSample(image_id, side, float(p), int(y)))
    return out


def localization_points(model: nn.Module, dataset: LocalizationHalves, batch_size: int = 8,
                        device: str = "cpu") -> List[Tuple[HalfKey, Point2D, Point2D]]:
    """Raw-frame (prediction, ground truth) per half; a half with no response predicts its crop center."""
    model.eval()
    stride = dataset.cfg.heatmap_stride
    out = []
    with torch.no_grad():
        for batch in _eval_loader(dataset, batch_size):
            probs = torch.sigmoid(model(batch["image"].to(device)))[:, 0].double().cpu().numpy()
            for prob, idx, offset, valid in zip(probs, batch["index"].tolist(), batch["offset"].tolist(),
                                                batch["valid"].tolist()):
                rec = dataset.record(idx)
                try:
                    local = heatmap_to_point(prob, stride, tuple(valid))
                except NoResponseError:
                    local = Point2D((valid[1] - 1) / 2.0, (valid[0] - 1) / 2.0)
                to_raw = SimilarityTransform2D.translation(*offset).then(rec.to_raw)
                out.append((dataset.keys[idx], to_raw.apply(local), rec.gt_raw))
    return out


def mean_raw_error(points: List[Tuple[HalfKey, Point2D, Point2D]]) -> float:
    return float(np.mean([pred.distance(gt) for _, pred, gt in points]))


def coarse_points(model: nn.Module, store: HalfStore, manifest: DatasetManifest, cfg: LocalizerConfig,
                  device: str = "cpu") -> Dict[HalfKey, Point2D]:
    """Stage-1 predictions expressed in the frame stage-2 crops are cut from."""
    model.to(device)
    points = {}
    for rec in manifest:
        for side in ("left", "right"):
            src = store.prepared(rec.image_id, side, cfg.stage1_size)
            padded, _ = pad_to(src.image, cfg.stage1_shape())
            try:
                p, _ = predict_point(model, padded, src.image.shape[:2], cfg.heatmap_stride)
            except NoResponseError:
                p = Point2D((cfg.stage1_size - 1) / 2.0, (cfg.stage1_size - 1) / 2.0)
            if cfg.crop_frame == "half":
                native = store.prepared(rec.image_id, side, None)
                p = src.to_raw.then(native.to_raw.inverse()).apply(p)
            points[(rec.image_id, side)] = p
    return points


def _check_folds(train: DatasetManifest, val: DatasetManifest) -> None:
    if len(train) == 0 or len(val) == 0:
        raise ManifestError(f"Train and validation folds must be nonempty (got {len(train)}/{len(val)})")


def train_classifier(model: nn.Module, store: HalfStore, train_fold: DatasetManifest, val_fold: DatasetManifest,
                     optim: OptimConfig, train: TrainConfig, loss: LossConfig, input_size: int,
                     run_dir: Optional[Path] = None, config_echo: Optional[dict] = None,
                     device: str = "cpu", resume: Optional[Path] = None,
                     max_epochs: Optional[int] = None) -> TrainResult:
    """Fit the classifier on resized halves; the validation metric is half-level AUC."""
    if train.task != Task.classification:
        raise ConfigError(f"train_classifier needs task=classification, got {train.task.value}")
    _check_folds(train_fold, val_fold)
    train_set = ClassificationHalves(store, train_fold, input_size, train.shift_augment, train.seed)
    val_set = ClassificationHalves(store, val_fold, input_size)
    logger.info(f"Classification train fold: {len(train_set)} halves, closure ratio "
                f"{train_set.label_ratio():.3f}")

    def validate(m: nn.Module) -> float:
        samples = classification_scores(m, val_set, device=device)
        if len({s.label for s in samples}) < 2:
            return float("nan")
        return roc_auc(samples)

    trainer = Trainer(model, build_classification_criterion(loss), train_set, _classification_step, validate,
                      optim, train, higher_is_better=True, run_dir=run_dir, config_echo=config_echo,
                      device=device)
    if resume is not None:
        trainer.resume(resume)
    return trainer.fit(max_epochs)


def train_localizer(model: nn.Module, store: HalfStore, train_fold: DatasetManifest, val_fold: DatasetManifest,
                    stage: int, optim: OptimConfig, train: TrainConfig, loss: LossConfig, loc: LocalizerConfig,
                    coarse_model: Optional[nn.Module] = None, run_dir: Optional[Path] = None,
                    config_echo: Optional[dict] = None, device: str = "cpu", resume: Optional[Path] = None,
                    max_epochs: Optional[int] = None) -> TrainResult:
    """
    Fit one localization stage; the validation metric is the mean raw-pixel
    distance between decoded and annotated landmarks.

    Stage 2 trains on jittered crops around the ground truth, or on crops around
    stage-1 predictions when `crops_from_coarse` is set or `crop_jitter` is 0;
    those cases need `coarse_model`. Stage-2 validation crops are centred on
    stage-1 predictions whenever `coarse_model` is given; otherwise they are
    jittered ground truth and a warning is logged.
    """
    expected = Task.localization_stage1 if stage == 1 else Task.localization_stage2
    if train.task != expected:
        raise ConfigError(f"Stage {stage} training needs task={expected.value}, got {train.task.value}")
    _check_folds(train_fold, val_fold)
    use_coarse = stage == 2 and (train.crops_from_coarse or train.crop_jitter == 0)
    if use_coarse and coarse_model is None:
        raise ConfigError("Stage-2 training without crop jitter needs a stage-1 checkpoint")

    train_coarse = coarse_points(coarse_model, store, train_fold, loc, device) if use_coarse else None
    val_coarse = coarse_points(coarse_model, store, val_fold, loc, device) \
        if (stage == 2 and coarse_model is not None) else None
    if stage == 2 and val_coarse is None:
        logger.warning("Stage-2 validation ED uses crops centred on jittered ground truth, not on stage-1 "
                       "predictions; pass a stage-1 checkpoint for a live two-stage metric")
    train_set = LocalizationHalves(store, train_fold, loc, stage, train.crop_jitter, train_coarse, train.seed)
    val_set = LocalizationHalves(store, val_fold, loc, stage, train.crop_jitter, val_coarse, train.seed)

    def validate(m: nn.Module) -> float:
        return mean_raw_error(localization_points(m, val_set, device=device))

    trainer = Trainer(model, build_localization_criterion(loss), train_set, _localization_step, validate,
                      optim, train, higher_is_better=False, run_dir=run_dir, config_echo=config_echo,
                      device=device)
    if resume is not None:
        trainer.resume(resume)
    result = trainer.fit(max_epochs)
    if stage == 2:
        result.validation_crops = "coarse" if val_coarse is not None else "ground_truth"
    return result
