import numpy as np
import pytest
import torch

from anglekit.data_pipeline import (AnnotationRecord, DatasetManifest, HalfStore, RawImage, SynthConfig,
                                    synth_generate)
from anglekit.geometry import GaussianSpec, Point2D, encode_heatmap

TINY_SYNTH = SynthConfig(count=12, size=(64, 64), margin=8, closed_prior=0.5, seed=3)


@pytest.fixture(autouse=True)
def _isolated_env(tmp_path, monkeypatch):
    monkeypatch.setenv("ANGLEKIT_CACHE", str(tmp_path / "cache"))
    monkeypatch.setenv("ANGLEKIT_DEVICE", "cpu")
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_synth(tmp_path_factory) -> DatasetManifest:
    return synth_generate(TINY_SYNTH, tmp_path_factory.mktemp("tiny_synth"))


@pytest.fixture
def tiny_store(tiny_synth) -> HalfStore:
    return HalfStore(tiny_synth)


def blob_image(height: int, width: int, points, sigma: float = 2.0) -> np.ndarray:
    """Raw grid with one Gaussian blob per point."""
    image = np.zeros((height, width))
    for p in points:
        image = np.maximum(image, encode_heatmap(p, (height, width), GaussianSpec(sigma=sigma)).values)
    return image


@pytest.fixture
def blob_sample():
    """A 128x128 raw image whose pixels are Gaussian blobs at its two landmarks."""
    left, right = Point2D(23.4, 71.8), Point2D(101.7, 40.3)
    rec = AnnotationRecord("blob", 1, left, right)
    return RawImage("blob", blob_image(128, 128, (left, right))), rec
