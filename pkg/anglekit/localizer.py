"""
Scleral-spur localization network and two-stage coarse-to-fine inference.

The network is an encoder emitting five feature levels (strides 2..32), an
optional pyramid pooling module on the deepest level, and a decoder of four
stride-2 transposed convolutions fused with the matching encoder levels. Its
single-channel output is a heatmap at stride 2.
"""
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from anglekit.data_pipeline import HalfSample
from anglekit.errors import NoResponseError, ShapeError
from anglekit.geometry import (GaussianSpec, Heatmap, Point2D, SimilarityTransform2D, clamp_point,
                               crop_window, decode_heatmap, pad_to, padded_extent, resize_image)

logger = logging.getLogger('anglekit_localizer')

PYRAMID_STRIDES = (2, 4, 8, 16, 32)
# initial logit of the heatmap head, sigmoid(-2.19) ~= 0.1
HEAD_BIAS = -2.19


def _split_ints(value):
    if isinstance(value, str):
        return tuple(int(v) for v in value.split(",") if v.strip())
    return value


def make_divisible(value: float, divisor: int = 8) -> int:
    out = max(divisor, int(value + divisor / 2) // divisor * divisor)
    if out < 0.9 * value:
        out += divisor
    return out


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    variant: Literal["default4", "scaled_mbconv"] = "scaled_mbconv"
    # channels of f1..f5; None picks the variant's default
    stage_widths: Optional[Tuple[int, int, int, int, int]] = None
    base_depths: Tuple[int, int, int, int] = (1, 2, 2, 3)
    depth_mult: float = Field(default=1.0, gt=0)
    width_mult: float = Field(default=1.0, gt=0)
    expand_ratio: int = Field(default=6, ge=1)
    se_ratio: float = Field(default=0.25, gt=0, le=1)
    in_channels: int = Field(default=1, ge=1)

    _split = field_validator("stage_widths", "base_depths", mode="before")(_split_ints)

    @model_validator(mode="after")
    def _check_positive(self) -> "EncoderConfig":
        if self.stage_widths is not None and min(self.stage_widths) < 1:
            raise ValueError(f"Encoder widths must be positive, got {self.stage_widths}")
        if min(self.base_depths) < 1:
            raise ValueError(f"Encoder block counts must be positive, got {self.base_depths}")
        return self

    def widths(self) -> Tuple[int, ...]:
        if self.variant == "default4":
            return tuple(self.stage_widths or (32, 64, 128, 256, 512))
        base = self.stage_widths or (32, 24, 40, 112, 320)
        return tuple(make_divisible(w * self.width_mult) for w in base)

    def depths(self) -> Tuple[int, ...]:
        return tuple(int(math.ceil(b * self.depth_mult)) for b in self.base_depths)


class LocalizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    encoder: EncoderConfig = EncoderConfig()
    ppm_enabled: bool = True
    ppm_bins: Tuple[int, ...] = (1, 2, 3, 6)
    decoder_width: int = Field(default=128, ge=1)
    skip_mode: Literal["add", "concat"] = "add"
    # padded stage-1 network input
    input_size: int = 512
    stage1_size: int = Field(default=499, ge=2)
    heatmap_stride: int = 2
    heatmap_sigma: float = Field(default=4.0, gt=0)
    crop_width: int = Field(default=384, ge=1)
    crop_height: int = Field(default=288, ge=1)
    crop_frame: Literal["stage1", "half"] = "stage1"
    # stage-2 network input; 0 derives the smallest stride-32 shape covering the crop
    stage2_pad_width: int = Field(default=384, ge=0)
    stage2_pad_height: int = Field(default=320, ge=0)

    _split = field_validator("ppm_bins", mode="before")(_split_ints)

    @model_validator(mode="after")
    def _check(self) -> "LocalizerConfig":
        if self.input_size % 32:
            raise ValueError(f"input_size must be divisible by 32, got {self.input_size}")
        if self.stage1_size > self.input_size:
            raise ValueError(f"stage1_size {self.stage1_size} exceeds input_size {self.input_size}")
        if self.heatmap_stride != 2:
            raise ValueError("The decoder emits heatmaps at stride 2 only")
        if not self.ppm_bins or any(b < 1 for b in self.ppm_bins) or \
                any(b >= c for b, c in zip(self.ppm_bins, self.ppm_bins[1:])):
            raise ValueError(f"ppm_bins must be positive and strictly increasing, got {self.ppm_bins}")
        if self.ppm_enabled and self.input_size // 32 < self.ppm_bins[-1]:
            raise ValueError(f"input_size {self.input_size} too small for PPM bin {self.ppm_bins[-1]}")
        if self.crop_frame == "stage1" and (self.crop_width > self.stage1_size or self.crop_height > self.stage1_size):
            raise ValueError(f"Crop {self.crop_width}x{self.crop_height} larger than stage-1 image {self.stage1_size}")
        if self.stage2_pad_width or self.stage2_pad_height:
            pad_h, pad_w = self.stage2_shape()
            if pad_w % 32 or pad_h % 32:
                raise ValueError(f"Stage-2 pad {pad_w}x{pad_h} must be divisible by 32")
            if pad_w < self.crop_width or pad_h < self.crop_height:
                raise ValueError(f"Stage-2 pad {pad_w}x{pad_h} smaller than crop "
                                 f"{self.crop_width}x{self.crop_height}")
            if self.ppm_enabled and min(pad_w, pad_h) < 32 * self.ppm_bins[-1]:
                raise ValueError(f"Stage-2 pad {pad_w}x{pad_h} too small for PPM bin {self.ppm_bins[-1]}")
        return self

    @property
    def gaussian(self) -> GaussianSpec:
        return GaussianSpec(sigma=self.heatmap_sigma)

    @property
    def crop_size(self) -> Tuple[int, int]:
        return (self.crop_width, self.crop_height)

    def stage1_shape(self) -> Tuple[int, int]:
        return (self.input_size, self.input_size)

    def stage2_shape(self) -> Tuple[int, int]:
        min_side = 32 * self.ppm_bins[-1] if self.ppm_enabled else 0
        derived_h, derived_w = padded_extent(self.crop_height, self.crop_width, 32, min_side)
        return (self.stage2_pad_height or derived_h, self.stage2_pad_width or derived_w)


class FeaturePyramid(NamedTuple):
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor
    f5: torch.Tensor

    def check(self, height: int, width: int) -> None:
        for level, (feat, stride) in enumerate(zip(self, PYRAMID_STRIDES), start=1):
            expected = (height // stride, width // stride)
            if tuple(feat.shape[-2:]) != expected:
                raise ShapeError(f"f{level} has spatial size {tuple(feat.shape[-2:])}, expected {expected}")


def _conv_bn_act(in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, groups: int = 1,
                 act: Callable[[], nn.Module] = nn.ReLU) -> nn.Sequential:
    return nn.Sequential(OrderedDict([
        ("conv", nn.Conv2d(in_ch, out_ch, kernel, stride, kernel // 2, groups=groups, bias=False)),
        ("bn", nn.BatchNorm2d(out_ch)),
        ("act", act()),
    ]))


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduced: int) -> None:
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.reduce = nn.Conv2d(channels, reduced, 1)
        self.act = nn.SiLU()
        self.expand = nn.Conv2d(reduced, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gate = torch.sigmoid(self.expand(self.act(self.reduce(self.pool(x)))))
        return x * gate


class MBConv(nn.Module):
    """Inverted bottleneck: pointwise expansion, depthwise conv, SE gate, pointwise projection."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, expand_ratio: int, se_ratio: float) -> None:
        super().__init__()
        hidden = in_ch * expand_ratio
        self.use_residual = stride == 1 and in_ch == out_ch
        self.expand = _conv_bn_act(in_ch, hidden, 1, act=nn.SiLU) if expand_ratio != 1 else nn.Identity()
        self.depthwise = _conv_bn_act(hidden, hidden, kernel, stride, groups=hidden, act=nn.SiLU)
        self.se = SqueezeExcite(hidden, max(1, int(in_ch * se_ratio)))
        self.project = nn.Sequential(OrderedDict([
            ("conv", nn.Conv2d(hidden, out_ch, 1, bias=False)),
            ("bn", nn.BatchNorm2d(out_ch)),
        ]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.project(self.se(self.depthwise(self.expand(x))))
        return out + x if self.use_residual else out


class Encoder(nn.Module):
    """Stem plus four downsampling stages; forward returns a FeaturePyramid."""

    def __init__(self, stem: nn.Module, stages: Sequence[nn.Module], out_channels: Tuple[int, ...]) -> None:
        super().__init__()
        self.stem = stem
        self.stages = nn.ModuleList(stages)
        self.out_channels = out_channels

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return FeaturePyramid(*feats)


def _default4(cfg: EncoderConfig) -> Encoder:
    widths = cfg.widths()
    stem = _conv_bn_act(cfg.in_channels, widths[0], 3, 2)
    stages = []
    for in_ch, out_ch in zip(widths[:-1], widths[1:]):
        block = _conv_bn_act(in_ch, out_ch, 3, 1)
        block.add_module("pool", nn.MaxPool2d(2))
        stages.append(block)
    return Encoder(stem, stages, widths)


def _scaled_mbconv(cfg: EncoderConfig) -> Encoder:
    widths = cfg.widths()
    stem = _conv_bn_act(cfg.in_channels, widths[0], 3, 2, act=nn.SiLU)
    stages = []
    for in_ch, out_ch, depth, kernel in zip(widths[:-1], widths[1:], cfg.depths(), (3, 5, 3, 5)):
        blocks = [MBConv(in_ch if i == 0 else out_ch, out_ch, kernel, 2 if i == 0 else 1,
                         cfg.expand_ratio, cfg.se_ratio) for i in range(depth)]
        stages.append(nn.Sequential(*blocks))
    return Encoder(stem, stages, widths)


def _assert_strides(encoder: Encoder, in_channels: int, side: int = 64) -> None:
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        pyramid = encoder(torch.zeros(1, in_channels, side, side))
    encoder.train(was_training)
    pyramid.check(side, side)


def build_encoder(cfg: EncoderConfig) -> Encoder:
    encoder = _default4(cfg) if cfg.variant == "default4" else _scaled_mbconv(cfg)
    _assert_strides(encoder, cfg.in_channels)
    return encoder


class PyramidPooling(nn.Module):
    """Adaptive average pools at each bin size, projected, upsampled and fused with the input."""

    def __init__(self, in_ch: int, out_ch: int, bins: Sequence[int]) -> None:
        super().__init__()
        self.bins = tuple(bins)
        branch_ch = max(1, in_ch // len(self.bins))
        self.branches = nn.ModuleList([
            nn.Sequential(OrderedDict([
                ("pool", nn.AdaptiveAvgPool2d(b)),
                ("conv", nn.Conv2d(in_ch, branch_ch, 1, bias=False)),
                ("bn", nn.BatchNorm2d(branch_ch)),
                ("act", nn.ReLU(inplace=True)),
            ]))
            for b in self.bins
        ])
        self.fuse = _conv_bn_act(in_ch + branch_ch * len(self.bins), out_ch, 3)

    def pooled(self, f5: torch.Tensor) -> List[torch.Tensor]:
        height, width = f5.shape[-2:]
        if self.bins[-1] > min(height, width):
            raise ShapeError(f"PPM bin {self.bins[-1]} larger than feature map {height}x{width}")
        return [branch(f5) for branch in self.branches]

    def forward(self, f5: torch.Tensor) -> torch.Tensor:
        size = f5.shape[-2:]
        ups = [F.interpolate(p, size=size, mode="bilinear", align_corners=False) for p in self.pooled(f5)]
        return self.fuse(torch.cat([f5] + ups, dim=1))


class SkipDecoder(nn.Module):
    """Four stride-2 transposed convs from stride 32 to stride 2, each fused with an encoder level."""

    def __init__(self, enc_channels: Sequence[int], in_ch: int, skip_mode: str = "add") -> None:
        super().__init__()
        self.skip_mode = skip_mode
        widths = [max(16, in_ch >> (i + 1)) for i in range(4)]
        self.ups = nn.ModuleList()
        self.projs = nn.ModuleList()
        self.refines = nn.ModuleList()
        prev = in_ch
        # f4, f3, f2, f1
        for width, skip_ch in zip(widths, reversed(enc_channels[:4])):
            self.ups.append(nn.ConvTranspose2d(prev, width, kernel_size=4, stride=2, padding=1, bias=False))
            if skip_mode == "add":
                self.projs.append(nn.Conv2d(skip_ch, width, 1, bias=False))
                self.refines.append(_conv_bn_act(width, width, 3))
            else:
                self.projs.append(nn.Identity())
                self.refines.append(_conv_bn_act(width + skip_ch, width, 3))
            prev = width
        self.head = nn.Conv2d(prev, 1, 1)
        nn.init.constant_(self.head.bias, HEAD_BIAS)

    def forward(self, pyramid: FeaturePyramid, fused: torch.Tensor) -> torch.Tensor:
        x = fused
        for up, proj, refine, skip in zip(self.ups, self.projs, self.refines, reversed(pyramid[:4])):
            x = up(x)
            if x.shape[-2:] != skip.shape[-2:]:
                raise ShapeError(f"Decoder map {tuple(x.shape[-2:])} does not match skip level {tuple(skip.shape[-2:])}")
            x = refine(x + proj(skip) if self.skip_mode == "add" else torch.cat([x, skip], dim=1))
        return self.head(x)


class LocalizerNet(nn.Module):
    def __init__(self, cfg: LocalizerConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.encoder = build_encoder(cfg.encoder)
        deepest = self.encoder.out_channels[-1]
        if cfg.ppm_enabled:
            self.context = PyramidPooling(deepest, cfg.decoder_width, cfg.ppm_bins)
        else:
            self.context = _conv_bn_act(deepest, cfg.decoder_width, 3)
        self.decoder = SkipDecoder(self.encoder.out_channels, cfg.decoder_width, cfg.skip_mode)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)) and m is not self.decoder.head:
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Heatmap logits at stride 2; apply sigmoid for probabilities."""
        if x.dim() != 4 or x.shape[1] != self.cfg.encoder.in_channels:
            raise ShapeError(f"Expected (N, {self.cfg.encoder.in_channels}, H, W) input, got {tuple(x.shape)}")
        if x.shape[-2] % 32 or x.shape[-1] % 32:
            raise ShapeError(f"Input spatial size {tuple(x.shape[-2:])} must be divisible by 32")
        pyramid = self.encoder(x)
        return self.decoder(pyramid, self.context(pyramid.f5))


def build_localizer(cfg: LocalizerConfig) -> LocalizerNet:
    return LocalizerNet(cfg)


def _device_of(model: Callable) -> torch.device:
    params = list(model.parameters()) if isinstance(model, nn.Module) else []
    return params[0].device if params else torch.device("cpu")


def heatmap_to_point(prob: np.ndarray, stride: int, valid: Tuple[int, int]) -> Point2D:
    """
    Decode one probability map into the network-input frame, clamped to the
    unpadded (height, width) region.
    """
    hm_point, _ = decode_heatmap(Heatmap(np.clip(prob, 0.0, 1.0), stride))
    net = Heatmap(np.zeros((1, 1)), stride).to_network().apply(hm_point)
    return clamp_point(net, valid[1], valid[0])


def predict_point(model: Callable, image: np.ndarray, valid: Tuple[int, int], stride: int = 2) -> Tuple[Point2D, np.ndarray]:
    """Run one padded image through a localizer and decode its peak."""
    if isinstance(model, nn.Module):
        model.eval()
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None].to(_device_of(model))
    with torch.no_grad():
        prob = torch.sigmoid(model(x))[0, 0].double().cpu().numpy()
    return heatmap_to_point(prob, stride, valid), prob


@dataclass(frozen=True, eq=False)
class TwoStageResult:
    point: Point2D
    coarse: Point2D
    refined: bool
    stage1_image: Optional[np.ndarray] = None
    stage1_heatmap: Optional[np.ndarray] = None
    stage1_to_raw: Optional[SimilarityTransform2D] = None


def localize_two_stage(model_coarse: Callable, model_fine: Optional[Callable], half: HalfSample,
                       cfg: LocalizerConfig) -> TwoStageResult:
    """
    Coarse-to-fine landmark search on one half image.

    Stage 1 resizes the half to `stage1_size`, pads it to `input_size` and decodes
    a coarse point. Stage 2 crops `crop_width x crop_height` around it (from the
    stage-1 frame or the native half, per `crop_frame`), pads to `stage2_shape()`
    (384 wide x 320 high by default) and decodes the refined point. Both are mapped back to raw pixels. Without
    `model_fine` the coarse point is returned.

    Raises:
        NoResponseError: if stage 1 produces no response; a stage-2 failure falls
            back to the coarse point instead
    """
    size = cfg.stage1_size
    stage1, to_half = resize_image(half.pixels, (size, size))
    padded, _ = pad_to(stage1, cfg.stage1_shape())
    coarse_net, coarse_prob = predict_point(model_coarse, padded, (size, size), cfg.heatmap_stride)
    coarse_half = clamp_point(to_half.apply(coarse_net), half.width, half.height)
    coarse_raw = half.to_raw.apply(coarse_half)
    extras = dict(stage1_image=stage1, stage1_heatmap=coarse_prob, stage1_to_raw=to_half.then(half.to_raw))
    if model_fine is None:
        return TwoStageResult(coarse_raw, coarse_raw, False, **extras)

    if cfg.crop_frame == "stage1":
        source, source_to_half, center = stage1, to_half, coarse_net
    else:
        source, source_to_half, center = half.pixels, SimilarityTransform2D.identity(), coarse_half
    crop, crop_to_source = crop_window(source, center, cfg.crop_size)
    padded_crop, _ = pad_to(crop, cfg.stage2_shape())
    try:
        fine_net, _ = predict_point(model_fine, padded_crop, crop.shape[:2], cfg.heatmap_stride)
    except NoResponseError:
        logger.warning(f"Stage 2 gave no response for {half.image_id}/{half.side}; using the coarse point")
        return TwoStageResult(coarse_raw, coarse_raw, False, **extras)
    refined_half = clamp_point(crop_to_source.then(source_to_half).apply(fine_net), half.width, half.height)
    return TwoStageResult(half.to_raw.apply(refined_half), coarse_raw, True, **extras)
