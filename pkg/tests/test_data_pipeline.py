from dataclasses import replace

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from anglekit.data_pipeline import (MANIFEST_COLUMNS, AnnotationRecord, DatasetManifest, HalfStore, RawImage,
                                    SynthConfig, Task, load_manifest, make_split, plan_synth, reconstruct,
                                    render_scene, resize_for_task, split_half, synth_generate, wedge_intensity)
from anglekit.errors import GeometryError, ManifestError
from anglekit.geometry import Point2D

RAW_SIZE = (998, 2130)


def _write_csv(path, rows, header=MANIFEST_COLUMNS):
    lines = [",".join(header)] + [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def _record(image_id="T0001", left=(228.0, 515.0), right=(1912.0, 501.0), label=0):
    return AnnotationRecord(image_id, label, Point2D(*left), Point2D(*right))


def test_load_manifest_example_row(tmp_path):
    path = _write_csv(tmp_path / "m.csv", [["T0001", 0, 228, 515, 1912, 501]])
    manifest = load_manifest(path, image_size=RAW_SIZE)
    rec = manifest.by_id("T0001")
    assert rec.label == 0
    assert rec.ss_left == Point2D(228.0, 515.0)
    assert rec.ss_right == Point2D(1912.0, 501.0)


def test_load_manifest_many_rows(tmp_path):
    rows = [[f"T{i:04d}", i % 2, 228, 515, 1912, 501] for i in range(1600)]
    manifest = load_manifest(_write_csv(tmp_path / "m.csv", rows), image_size=RAW_SIZE)
    assert len(manifest) == 1600


@pytest.mark.parametrize("rows", [
    [["T0001", 0, 3000, 515, 1912, 501]],
    [["T0001", 0, 228, 515, 1912, 501], ["T0001", 1, 228, 515, 1912, 501]],
    [["T0001", 0, 228, 515, 1912]],
    [["T0001", 0, "abc", 515, 1912, 501]],
    [["T0001", 2, 228, 515, 1912, 501]],
    [["T0001", 0, 1912, 515, 228, 501]],
])
def test_load_manifest_rejects_bad_rows(tmp_path, rows):
    with pytest.raises(ManifestError):
        load_manifest(_write_csv(tmp_path / "m.csv", rows), image_size=RAW_SIZE)


def test_load_manifest_rejects_bad_header(tmp_path):
    path = _write_csv(tmp_path / "m.csv", [["T0001", 0, 228, 515, 1912, 501]],
                      header=["id", "label", "lx", "ly", "rx", "ry"])
    with pytest.raises(ManifestError):
        load_manifest(path, image_size=RAW_SIZE)


def test_load_manifest_requires_image_files_without_size(tmp_path):
    path = _write_csv(tmp_path / "m.csv", [["T0001", 0, 228, 515, 1912, 501]])
    with pytest.raises(ManifestError):
        load_manifest(path)
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "missing.csv")


def test_split_half_mirrors_right_side():
    rng = np.random.default_rng(0)
    img = RawImage("T0001", rng.random(RAW_SIZE))
    rec = _record(right=(2000.0, 515.0))
    left, right = split_half(img, rec)
    assert left.width == right.width == 1065
    assert left.ss == rec.ss_left
    assert right.ss == Point2D(129.0, 515.0)
    assert right.to_raw.apply(right.ss).distance(rec.ss_right) < 1e-9
    assert right.pixels[515, 129] == img.pixels[515, 2000]
    np.testing.assert_array_equal(reconstruct(left, right), img.pixels)


def test_split_half_without_mirroring():
    img = RawImage("T0001", np.zeros(RAW_SIZE))
    _, right = split_half(img, _record(right=(2000.0, 515.0)), mirror_right=False)
    assert right.ss == Point2D(935.0, 515.0)


def test_split_half_drops_last_column_of_odd_width():
    img = RawImage("T0001", np.zeros((998, 2131)))
    left, right = split_half(img, _record())
    assert left.width == right.width == 1065


def test_split_half_rejects_inconsistent_sides():
    img = RawImage("T0001", np.zeros(RAW_SIZE))
    with pytest.raises(ManifestError):
        split_half(img, _record(left=(1100.0, 500.0)))


def test_raw_image_validation():
    with pytest.raises(ManifestError):
        RawImage("x", np.zeros((4, 4, 3)))
    with pytest.raises(ManifestError):
        RawImage("x", np.full((4, 4), 2.0))


def test_resize_for_task_round_trip():
    img = RawImage("T0001", np.random.default_rng(1).random(RAW_SIZE))
    rec = _record(right=(2000.0, 515.0))
    for half in split_half(img, rec):
        resized, to_half = resize_for_task(half, Task.classification)
        assert resized.shape == (256, 256)
        forward = to_half.inverse()
        assert forward.sx == pytest.approx(256 / 1065)
        assert forward.sy == pytest.approx(256 / 998)
        stage1, to_half1 = resize_for_task(half, Task.localization_stage1)
        assert stage1.shape == (499, 499)
        p = to_half1.inverse().apply(half.ss)
        assert to_half1.then(half.to_raw).apply(p).distance(rec.ss(half.side)) < 1e-9
    with pytest.raises(ValueError):
        resize_for_task(half, Task.localization_stage2)


def test_make_split_is_seeded_partition():
    records = tuple(_record(f"T{i:04d}") for i in range(1600))
    manifest = DatasetManifest(records, image_root=".")
    train, test = make_split(manifest, 0.8, seed=5)
    assert (len(train), len(test)) == (1280, 320)
    assert set(train.ids).isdisjoint(test.ids)
    assert set(train.ids) | set(test.ids) == set(manifest.ids)
    again, _ = make_split(manifest, 0.8, seed=5)
    assert again.ids == train.ids
    other, _ = make_split(manifest, 0.8, seed=6)
    assert other.ids != train.ids


def test_make_split_rejects_degenerate_inputs():
    manifest = DatasetManifest((_record(),), image_root=".")
    with pytest.raises(ManifestError):
        make_split(manifest)
    with pytest.raises(ValueError):
        make_split(DatasetManifest((_record("a"), _record("b")), "."), ratio=1.0)


def test_half_store_round_trips_through_cache(tiny_synth, tmp_path):
    store = HalfStore(tiny_synth, cache_dir=tmp_path / "halves", keep_in_memory=False)
    image_id = tiny_synth.ids[0]
    first = store.prepared(image_id, "right", 32)
    assert (tmp_path / "halves" / "32_mirrored" / f"{image_id}_right.npz").exists()
    second = store.prepared(image_id, "right", 32)
    np.testing.assert_array_equal(first.image, second.image)
    assert first.image.shape == (32, 32)
    assert second.to_raw.apply(second.ss).distance(second.gt_raw) < 1e-9
    native = store.prepared(image_id, "left", None)
    assert native.image.shape == (64, 32)
    assert native.ss == native.gt_raw
    assert store.prepare_all([32, None]) == 4 * len(tiny_synth)


def test_synth_is_deterministic(tmp_path):
    cfg = SynthConfig(count=6, size=(64, 64), margin=8, seed=11)
    a = synth_generate(cfg, tmp_path / "a")
    synth_generate(cfg, tmp_path / "b")
    for image_id in a.ids:
        assert (tmp_path / "a" / f"{image_id}.png").read_bytes() == (tmp_path / "b" / f"{image_id}.png").read_bytes()
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()
    reloaded = load_manifest(tmp_path / "a" / "manifest.csv")
    assert reloaded.ids == a.ids


def test_synth_apexes_respect_margins():
    cfg = SynthConfig(count=200, size=(128, 128), margin=16)
    for scene in plan_synth(cfg):
        assert 16 <= scene.apex_left.x <= 48 and 80 <= scene.apex_right.x <= 111
        assert 16 <= scene.apex_left.y <= 111 and 16 <= scene.apex_right.y <= 111


def test_synth_closed_fraction():
    scenes = plan_synth(SynthConfig(count=5000, size=(64, 64), margin=8, seed=0))
    fraction = sum(s.label for s in scenes) / len(scenes)
    assert fraction == pytest.approx(0.2, abs=0.02)


def test_synth_rejects_oversized_margin():
    with pytest.raises(GeometryError):
        plan_synth(SynthConfig(count=1, size=(64, 64), margin=16))
    with pytest.raises(ValueError):
        SynthConfig(aperture_range_open=(5.0, 40.0))


def test_synth_classes_separable_by_wedge_intensity():
    cfg = SynthConfig(count=80, size=(128, 128), closed_prior=0.5, seed=2)
    labels, scores = [], []
    for scene in plan_synth(cfg):
        pixels = render_scene(scene, cfg)
        labels.append(scene.label)
        scores.append(wedge_intensity(pixels, scene.apex_left, 1.0))
    assert 0 < sum(labels) < len(labels)
    assert roc_auc_score(labels, scores) >= 0.9


def test_synth_angles_stay_in_their_own_half():
    cfg = SynthConfig(count=1, size=(128, 128), margin=8, noise_sigma=0.0)
    scene = plan_synth(cfg)[0]
    near_midline = replace(scene, apex_left=Point2D(60.0, 64.0), apertures=(50.0, scene.apertures[1]))
    moved = replace(near_midline, apex_left=Point2D(20.0, 30.0), apertures=(5.0, scene.apertures[1]))
    a, b = render_scene(near_midline, cfg), render_scene(moved, cfg)
    assert np.array_equal(a[:, 64:], b[:, 64:])
    assert not np.array_equal(a[:, :64], b[:, :64])

    right_near_midline = replace(scene, apex_right=Point2D(70.0, 64.0), apertures=(scene.apertures[0], 50.0))
    assert np.array_equal(render_scene(right_near_midline, cfg)[:, :64], render_scene(scene, cfg)[:, :64])
