"""
Revised 152-layer bottleneck ResNet for per-half angle-closure classification.

Two downsampling changes relative to the plain residual network:
  - tweak B: the residual path puts its stride on the 3x3 conv, not the first 1x1
  - tweak D: the projection shortcut average-pools before a stride-1 1x1 conv
"""
import logging
from collections import OrderedDict
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from anglekit.errors import ShapeError

logger = logging.getLogger('anglekit_classifier')

EXPANSION = 4


class ClassifierConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    stage_depths: Tuple[int, int, int, int] = (3, 8, 36, 3)
    base_width: int = Field(default=64, ge=1)
    tweak_b: bool = True
    tweak_d: bool = True
    in_channels: int = Field(default=1, ge=1)
    input_size: int = 256
    # multiplies channel widths only; depths stay as given
    scale_factor: float = Field(default=1.0, gt=0)
    zero_init_residual: bool = True

    @field_validator("stage_depths", mode="before")
    @classmethod
    def _split_depths(cls, value):
        if isinstance(value, str):
            return tuple(int(v) for v in value.split(",") if v.strip())
        return value

    @model_validator(mode="after")
    def _check(self) -> "ClassifierConfig":
        if min(self.stage_depths) < 1:
            raise ValueError(f"Every stage needs at least one block, got {self.stage_depths}")
        if self.input_size < 32 or self.input_size % 32:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        return self

    @property
    def stem_width(self) -> int:
        return max(1, int(round(self.base_width * self.scale_factor)))

    def stage_widths(self) -> List[int]:
        """Bottleneck (mid) width per stage; block outputs are 4x these."""
        return [max(1, int(round(self.base_width * self.scale_factor * 2 ** i))) for i in range(4)]


class DownsampleShortcut(nn.Sequential):
    """Projection shortcut; with `avg_down` the stride moves into a 3x3 average pool."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, avg_down: bool) -> None:
        layers = OrderedDict()
        if avg_down and stride > 1:
            layers["pool"] = nn.AvgPool2d(3, stride=stride, padding=1, count_include_pad=False)
            stride = 1
        layers["conv"] = nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)
        layers["bn"] = nn.BatchNorm2d(out_ch)
        super().__init__(layers)


class Bottleneck(nn.Module):
    def __init__(self, in_ch: int, mid: int, stride: int = 1, tweak_b: bool = True, tweak_d: bool = True,
                 zero_init: bool = True) -> None:
        super().__init__()
        out_ch = mid * EXPANSION
        s1, s2 = (1, stride) if tweak_b else (stride, 1)
        self.residual = nn.Sequential(OrderedDict([
            ("conv1", nn.Conv2d(in_ch, mid, 1, stride=s1, bias=False)),
            ("bn1", nn.BatchNorm2d(mid)),
            ("relu1", nn.ReLU(inplace=True)),
            ("conv2", nn.Conv2d(mid, mid, 3, stride=s2, padding=1, bias=False)),
            ("bn2", nn.BatchNorm2d(mid)),
            ("relu2", nn.ReLU(inplace=True)),
            ("conv3", nn.Conv2d(mid, out_ch, 1, bias=False)),
            ("bn3", nn.BatchNorm2d(out_ch)),
        ]))
        if stride != 1 or in_ch != out_ch:
            self.shortcut = DownsampleShortcut(in_ch, out_ch, stride, tweak_d)
        else:
            self.shortcut = nn.Identity()
        self.relu = nn.ReLU(inplace=True)
        if zero_init:
            nn.init.zeros_(self.residual.bn3.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.relu(self.residual(x) + self.shortcut(x))


class RevisedResNet(nn.Module):
    def __init__(self, cfg: ClassifierConfig) -> None:
        super().__init__()
        self.cfg = cfg
        stem = cfg.stem_width
        self.stem = nn.Sequential(OrderedDict([
            ("conv", nn.Conv2d(cfg.in_channels, stem, 7, stride=2, padding=3, bias=False)),
            ("bn", nn.BatchNorm2d(stem)),
            ("relu", nn.ReLU(inplace=True)),
            ("pool", nn.MaxPool2d(3, stride=2, padding=1)),
        ]))
        stages = []
        in_ch = stem
        for i, (depth, mid) in enumerate(zip(cfg.stage_depths, cfg.stage_widths())):
            blocks = []
            for j in range(depth):
                stride = 2 if (j == 0 and i > 0) else 1
                blocks.append(Bottleneck(in_ch, mid, stride, cfg.tweak_b, cfg.tweak_d, False))
                in_ch = mid * EXPANSION
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(in_ch, 1)
        self._init_weights()

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        if self.cfg.zero_init_residual:
            for m in self.modules():
                if isinstance(m, Bottleneck):
                    nn.init.zeros_(m.residual.bn3.weight)

    def _check_input(self, x: torch.Tensor) -> None:
        size = self.cfg.input_size
        expected = (self.cfg.in_channels, size, size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"Classifier expects (N, {expected[0]}, {size}, {size}) input, got {tuple(x.shape)}")

    def stage_outputs(self, x: torch.Tensor) -> List[torch.Tensor]:
        self._check_input(x)
        feats = []
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.stage_outputs(x)
        return self.head(torch.flatten(self.pool(feats[-1]), 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Closure probability per sample, shape (N, 1)."""
        return torch.sigmoid(self.logits(x))


def build_classifier(cfg: Optional[ClassifierConfig] = None) -> RevisedResNet:
    cfg = cfg or ClassifierConfig()
    model = RevisedResNet(cfg)
    logger.debug(f"Built classifier with {count_weighted_layers(model)} weighted layers, "
                 f"{count_bottlenecks(model)} bottlenecks")
    return model


def classify(model: RevisedResNet, batch: torch.Tensor) -> torch.Tensor:
    """Inference-mode closure probabilities for a batch of resized halves."""
    model._check_input(batch)
    model.eval()
    with torch.no_grad():
        return model(batch)


def count_bottlenecks(model: nn.Module) -> int:
    return sum(1 for m in model.modules() if isinstance(m, Bottleneck))


def count_weighted_layers(model: nn.Module) -> int:
    """Convs on the main path plus the linear head; shortcut projections are not counted."""
    shortcut_convs = {id(m) for s in model.modules() if isinstance(s, DownsampleShortcut) for m in s.modules()}
    convs = sum(1 for m in model.modules() if isinstance(m, nn.Conv2d) and id(m) not in shortcut_convs)
    return convs + sum(1 for m in model.modules() if isinstance(m, nn.Linear))


def gradient_coverage(module: nn.Module, input_shape: Sequence[int], seed: int = 0) -> Tuple[int, int]:
    """
    Count input spatial positions that receive a nonzero gradient from the
    summed output. Runs in eval mode so batch statistics do not couple positions.

    Returns:
        (covered, total) positions
    """
    was_training = module.training
    module.eval()
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(tuple(input_shape), generator=gen).requires_grad_(True)
    try:
        module(x).sum().backward()
    finally:
        module.train(was_training)
    covered = (x.grad.abs().sum(dim=(0, 1)) > 0)
    return int(covered.sum()), covered.numel()
