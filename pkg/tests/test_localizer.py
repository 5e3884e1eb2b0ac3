import numpy as np
import pytest
import torch
import torch.nn as nn

from anglekit.data_pipeline import split_half
from anglekit.errors import NoResponseError, ShapeError
from anglekit.localizer import (EncoderConfig, FeaturePyramid, LocalizerConfig, MBConv, PyramidPooling,
                                build_encoder, build_localizer, heatmap_to_point, localize_two_stage,
                                make_divisible)

TINY_ENCODER = EncoderConfig(variant="default4", stage_widths=(4, 8, 8, 16, 16))
DESK = LocalizerConfig(encoder=TINY_ENCODER, decoder_width=16, input_size=192, stage1_size=192,
                       crop_width=160, crop_height=120)


class SubsampleOracle(nn.Module):
    """Emits the stride-2 subsampled input as heatmap probabilities."""

    def __init__(self, dead: bool = False) -> None:
        super().__init__()
        self.dead = dead

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = x[..., ::2, ::2]
        if self.dead:
            return torch.full_like(p, -1e4)
        p = p.clamp(1e-6, 1 - 1e-6)
        return torch.log(p / (1 - p))


def test_default4_pyramid_on_512_input():
    encoder = build_encoder(TINY_ENCODER).eval()
    with torch.no_grad():
        pyramid = encoder(torch.rand(1, 1, 512, 512))
    assert isinstance(pyramid, FeaturePyramid) and len(pyramid) == 5
    assert [f.shape[-1] for f in pyramid] == [256, 128, 64, 32, 16]
    assert [f.shape[1] for f in pyramid] == [4, 8, 8, 16, 16]


def test_scaled_mbconv_depth_and_width_multipliers():
    cfg = EncoderConfig(depth_mult=2.0, width_mult=0.25)
    assert cfg.depths() == (2, 4, 4, 6)
    encoder = build_encoder(cfg)
    blocks = [sum(isinstance(m, MBConv) for m in stage.modules()) for stage in encoder.stages]
    assert blocks == [2, 4, 4, 6]
    assert encoder.out_channels == tuple(make_divisible(w * 0.25) for w in (32, 24, 40, 112, 320))


def test_encoder_rejects_nonpositive_widths():
    with pytest.raises(ValueError):
        EncoderConfig(stage_widths=(0, 8, 8, 16, 16))
    with pytest.raises(ValueError):
        EncoderConfig(depth_mult=0.0)


def test_pyramid_pooling_bins():
    ppm = PyramidPooling(32, 16, (1, 2, 3, 6)).eval()
    f5 = torch.rand(1, 32, 16, 16)
    with torch.no_grad():
        pooled = ppm.pooled(f5)
        fused = ppm(f5)
    assert [tuple(p.shape[-2:]) for p in pooled] == [(1, 1), (2, 2), (3, 3), (6, 6)]
    assert tuple(fused.shape) == (1, 16, 16, 16)


def test_pyramid_pooling_unit_bin_is_constant():
    ppm = PyramidPooling(8, 8, (1, 2))
    const = torch.full((1, 8, 16, 16), 0.7)
    up = torch.nn.functional.interpolate(ppm.branches[0].pool(const), size=(16, 16), mode="bilinear",
                                         align_corners=False)
    assert torch.allclose(up, const)


def test_pyramid_pooling_rejects_small_maps():
    with pytest.raises(ShapeError):
        PyramidPooling(8, 8, (1, 2, 3, 6)).pooled(torch.rand(1, 8, 4, 4))


def test_decoder_output_is_stride_two_heatmap():
    model = build_localizer(LocalizerConfig(encoder=TINY_ENCODER, decoder_width=16)).eval()
    with torch.no_grad():
        logits = model(torch.rand(1, 1, 512, 512))
    assert tuple(logits.shape) == (1, 1, 256, 256)
    prob = torch.sigmoid(logits)
    assert ((prob > 0) & (prob < 1)).all()


def test_decoder_accepts_zeroed_skip_levels():
    model = build_localizer(DESK).eval()
    with torch.no_grad():
        pyramid = model.encoder(torch.rand(1, 1, 192, 192))
        zeroed = FeaturePyramid(*(torch.zeros_like(f) for f in pyramid[:4]), pyramid.f5)
        out = model.decoder(zeroed, model.context(pyramid.f5))
    assert tuple(out.shape) == (1, 1, 96, 96)


@pytest.mark.parametrize("skip_mode", ["add", "concat"])
def test_gradient_reaches_first_encoder_level(skip_mode):
    model = build_localizer(DESK.model_copy(update={"skip_mode": skip_mode}))
    model(torch.rand(2, 1, 192, 192)).sigmoid().mean().backward()
    assert model.encoder.stem.conv.weight.grad.abs().sum() > 0


def test_ppm_toggle_changes_parameters_not_shape():
    on = build_localizer(DESK).eval()
    off = build_localizer(DESK.model_copy(update={"ppm_enabled": False})).eval()
    assert sum(p.numel() for p in on.parameters()) != sum(p.numel() for p in off.parameters())
    x = torch.rand(1, 1, 192, 192)
    with torch.no_grad():
        assert on(x).shape == off(x).shape


def test_mbconv_localizer_forward():
    cfg = LocalizerConfig(encoder=EncoderConfig(width_mult=0.25), decoder_width=16, input_size=192,
                          stage1_size=192, crop_width=160, crop_height=120)
    model = build_localizer(cfg).eval()
    with torch.no_grad():
        assert tuple(model(torch.rand(1, 1, 192, 192)).shape) == (1, 1, 96, 96)


def test_localizer_rejects_bad_input():
    model = build_localizer(DESK)
    with pytest.raises(ShapeError):
        model(torch.rand(1, 1, 100, 192))
    with pytest.raises(ShapeError):
        model(torch.rand(1, 192, 192))


def test_localizer_config_defaults_and_validation():
    assert LocalizerConfig().stage2_shape() == (320, 384)
    assert LocalizerConfig().stage1_shape() == (512, 512)
    with pytest.raises(ValueError):
        LocalizerConfig(input_size=500)
    with pytest.raises(ValueError):
        LocalizerConfig(input_size=128, stage1_size=120)
    with pytest.raises(ValueError):
        LocalizerConfig(stage1_size=600)
    with pytest.raises(ValueError):
        LocalizerConfig(ppm_bins=(1, 3, 2))
    assert LocalizerConfig(ppm_bins="1,2,4").ppm_bins == (1, 2, 4)


def test_stage2_pad_shape():
    assert LocalizerConfig(stage2_pad_width=0, stage2_pad_height=0).stage2_shape() == (288, 384)
    assert DESK.stage2_shape() == (320, 384)
    small = LocalizerConfig(input_size=64, stage1_size=64, crop_width=32, crop_height=32, ppm_enabled=False,
                            stage2_pad_width=0, stage2_pad_height=0)
    assert small.stage2_shape() == (32, 32)
    with pytest.raises(ValueError):
        LocalizerConfig(stage2_pad_height=300)
    with pytest.raises(ValueError):
        LocalizerConfig(stage2_pad_height=256)
    with pytest.raises(ValueError):
        LocalizerConfig(input_size=256, stage1_size=256, crop_width=96, crop_height=96, stage2_pad_width=128,
                        stage2_pad_height=128)


class ShapeRecorder(SubsampleOracle):
    def __init__(self) -> None:
        super().__init__()
        self.shapes = []

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.shapes.append(tuple(x.shape))
        return super().forward(x)


def test_fine_stage_sees_padded_crop(blob_sample):
    image, rec = blob_sample
    coarse, fine = ShapeRecorder(), ShapeRecorder()
    left, _ = split_half(image, rec)
    localize_two_stage(coarse, fine, left, DESK)
    assert coarse.shapes == [(1, 1, 192, 192)]
    assert fine.shapes == [(1, 1, 320, 384)]


def test_heatmap_to_point_maps_and_clamps():
    prob = np.zeros((16, 16))
    prob[5, 6] = 0.8
    assert heatmap_to_point(prob, 2, (32, 32)).as_tuple() == (12.0, 10.0)
    assert heatmap_to_point(prob, 2, (8, 8)).as_tuple() == (7.0, 7.0)
    with pytest.raises(NoResponseError):
        heatmap_to_point(np.zeros((4, 4)), 2, (8, 8))


@pytest.mark.parametrize("crop", [
    {"crop_frame": "stage1"},
    {"crop_frame": "half", "crop_width": 48, "crop_height": 96},
])
def test_two_stage_with_oracle_recovers_landmarks(blob_sample, crop):
    image, rec = blob_sample
    cfg = DESK.model_copy(update=crop)
    oracle = SubsampleOracle()
    for half in split_half(image, rec):
        result = localize_two_stage(oracle, oracle, half, cfg)
        assert result.refined
        assert result.coarse.distance(rec.ss(half.side)) < 1.0
        assert result.point.distance(rec.ss(half.side)) < 1.0
        coarse_only = localize_two_stage(oracle, None, half, cfg)
        assert not coarse_only.refined and coarse_only.point == result.coarse


def test_two_stage_falls_back_when_fine_model_is_silent(blob_sample):
    image, rec = blob_sample
    left, _ = split_half(image, rec)
    result = localize_two_stage(SubsampleOracle(), SubsampleOracle(dead=True), left, DESK)
    assert not result.refined
    assert result.point == result.coarse
    with pytest.raises(NoResponseError):
        localize_two_stage(SubsampleOracle(dead=True), None, left, DESK)


def test_two_stage_points_stay_inside_raw_image(blob_sample):
    image, rec = blob_sample
    torch.manual_seed(0)
    coarse, fine = build_localizer(DESK), build_localizer(DESK)
    for half in split_half(image, rec):
        p = localize_two_stage(coarse, fine, half, DESK).point
        assert 0 <= p.x <= image.width - 1 and 0 <= p.y <= image.height - 1
