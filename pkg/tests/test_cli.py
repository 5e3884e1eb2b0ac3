import json

import pandas as pd

from anglekit.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, OPERATIONS, build_workspace, run
from anglekit.evaluation import ClassificationSummary, summary_dict
from anglekit.main import start_service

TINY_MODELS = [
    "--set", "synth.margin=8",
    "--set", "cls.input_size=32", "--set", "cls.scale_factor=0.125", "--set", "cls.stage_depths=1,1,1,1",
    "--set", "loc.encoder.variant=default4", "--set", "loc.encoder.stage_widths=4,8,8,16,16",
    "--set", "loc.ppm_enabled=false", "--set", "loc.decoder_width=16", "--set", "loc.input_size=64",
    "--set", "loc.stage1_size=64", "--set", "loc.crop_width=32", "--set", "loc.crop_height=32",
    "--set", "loc.stage2_pad_width=0", "--set", "loc.stage2_pad_height=0",
    "--set", "train.epochs=1", "--set", "train.batch_size=4", "--set", "train.crop_jitter=8",
]


def _synth(out, seed=7):
    return run(["synth", "--count", "6", "--size", "64,64", "--seed", str(seed), "--set", "synth.margin=8",
                "--out", str(out)])


def test_help_and_unknown_command():
    assert run(["--help"]) == EXIT_OK
    assert run(["frobnicate"]) == EXIT_INVALID
    assert set(OPERATIONS) == {"synth", "prepare", "train-cls", "train-loc", "predict", "eval", "report"}


def test_synth_is_reproducible(tmp_path):
    assert _synth(tmp_path / "a") == EXIT_OK
    assert _synth(tmp_path / "b") == EXIT_OK
    names = sorted(p.name for p in (tmp_path / "a").glob("*.png"))
    assert len(names) == 6
    for name in names + ["manifest.csv"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert "synth.seed=7\n" in (tmp_path / "a" / "config.txt").read_text()


def test_invalid_config_key_exits_one(tmp_path):
    assert run(["synth", "--set", "synth.colour=red", "--out", str(tmp_path / "x")]) == EXIT_INVALID
    assert run(["train-loc", "--stage", "3", "--out", str(tmp_path / "x")]) == EXIT_INVALID


def test_predict_without_checkpoints_exits_one(tmp_path):
    assert run(["predict", "--out", str(tmp_path / "p")]) == EXIT_INVALID


def test_missing_eval_file_exits_one(tmp_path):
    assert run(["report", "--eval", str(tmp_path / "absent.json"), "--out", str(tmp_path / "r")]) == EXIT_INVALID


def test_unreadable_checkpoint_exits_two(tiny_synth, tmp_path):
    junk = tmp_path / "junk.pt"
    junk.write_bytes(b"not a checkpoint")
    manifest = str(tiny_synth.image_root / "manifest.csv")
    assert run(["predict", "--manifest", manifest, "--cls", str(junk), "--out", str(tmp_path / "p")]) == EXIT_RUNTIME


def test_eval_of_perfect_predictions(tiny_synth, tmp_path):
    rows = [{"image_id": r.image_id, "side": side, "score": float(r.label),
             "pred_x": r.ss(side).x, "pred_y": r.ss(side).y}
            for r in tiny_synth for side in ("left", "right")]
    pred = tmp_path / "predictions.csv"
    pd.DataFrame(rows).to_csv(pred, index=False)
    gt = tiny_synth.image_root / "manifest.csv"
    code = run(["eval", "--pred", str(pred), "--gt", str(gt), "--task", "both", "--out", str(tmp_path / "ev")])
    assert code == EXIT_OK
    result = json.loads((tmp_path / "ev" / "eval.json").read_text())
    assert result["localization"]["avg"] == 0.0
    assert result["classification"]["auc"] == 1.0
    assert (tmp_path / "ev" / "report.md").exists()

    assert run(["report", "--eval", str(tmp_path / "ev" / "eval.json"), "--out", str(tmp_path / "rep")]) == EXIT_OK
    assert "Localization" in (tmp_path / "rep" / "report.md").read_text(encoding="utf-8")


def test_train_cls_echoes_config(tmp_path):
    assert _synth(tmp_path / "data") == EXIT_OK
    cfg = tmp_path / "cls.cfg"
    cfg.write_text("train.batch_size=72\noptim.lr0=0.001\ntrain.epochs=1\n")
    manifest = str(tmp_path / "data" / "manifest.csv")
    args = ["train-cls", "--manifest", manifest, "--config", str(cfg), "--out", str(tmp_path / "cls"),
            "--set", "cls.input_size=32", "--set", "cls.scale_factor=0.125", "--set", "cls.stage_depths=1,1,1,1"]
    assert run(args) == EXIT_OK
    echo = (tmp_path / "cls" / "config.txt").read_text()
    assert "train.batch_size=72\n" in echo and "optim.lr0=0.001\n" in echo
    assert (tmp_path / "cls" / "last.pt").exists()


def test_full_pipeline_through_cli(tmp_path):
    common = TINY_MODELS + ["--seed", "3"]
    manifest = str(tmp_path / "data" / "manifest.csv")
    assert run(["synth", "--count", "12", "--size", "64,64", "--out", str(tmp_path / "data")] + common) == EXIT_OK
    assert run(["prepare", "--manifest", manifest, "--out", str(tmp_path / "prep")] + common) == EXIT_OK
    assert json.loads((tmp_path / "prep" / "split.json").read_text())["test"]
    assert run(["train-cls", "--manifest", manifest, "--out", str(tmp_path / "cls")] + common) == EXIT_OK
    assert run(["train-loc", "--stage", "1", "--manifest", manifest, "--out", str(tmp_path / "s1")] + common) == 0
    assert run(["train-loc", "--stage", "2", "--manifest", manifest, "--out", str(tmp_path / "s2"),
                "--coarse", str(tmp_path / "s1" / "last.pt")] + common) == EXIT_OK
    assert run(["predict", "--manifest", manifest, "--out", str(tmp_path / "pred"), "--overlays",
                "--cls", str(tmp_path / "cls" / "last.pt"), "--coarse", str(tmp_path / "s1" / "last.pt"),
                "--fine", str(tmp_path / "s2" / "last.pt")] + common) == EXIT_OK
    frame = pd.read_csv(tmp_path / "pred" / "predictions.csv")
    assert len(frame) == 2 * len(json.loads((tmp_path / "prep" / "split.json").read_text())["test"])
    assert frame[["score", "pred_x", "pred_y"]].notna().all().all()
    assert any((tmp_path / "pred" / "overlays").iterdir())
    assert run(["eval", "--pred", str(tmp_path / "pred" / "predictions.csv"), "--gt", manifest,
                "--out", str(tmp_path / "ev")] + common) == EXIT_OK
    flags = json.loads((tmp_path / "ev" / "eval.json").read_text())["flags"]
    assert flags["encoder_variant"] == "default4" and flags["ppm_enabled"] is False
    assert flags["tweak_b"] is True and flags["tweak_d"] is True


def test_start_service_returns_exit_code():
    assert start_service(["--help"]) == EXIT_OK


def test_workers_flag_only_overrides_when_given(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("train.workers=2\n")
    ws = build_workspace(cfg, None, None, None, tmp_path / "a")
    assert ws.config.train.workers == 2 and ws.workers == 2
    ws = build_workspace(cfg, None, None, 1, tmp_path / "b")
    assert ws.config.train.workers == 1 and ws.workers == 1
    ws = build_workspace(None, None, None, None, tmp_path / "c")
    assert ws.config.train.workers == 0


def test_report_compares_revised_and_plain_resnet(tmp_path):
    paths = []
    for name, auc, tweaks in (("anglekit", 0.96, True), ("ResNet-152", 0.91, False)):
        summary = summary_dict(ClassificationSummary(auc, 0.9, 0.85, 0.86, 400),
                               flags={"method_name": name, "tweak_b": tweaks, "tweak_d": tweaks})
        path = tmp_path / name / "eval.json"
        path.parent.mkdir()
        path.write_text(json.dumps(summary))
        paths += ["--eval", str(path)]
    assert run(["report"] + paths + ["--out", str(tmp_path / "rep")]) == EXIT_OK
    text = (tmp_path / "rep" / "report.md").read_text(encoding="utf-8")
    assert "| anglekit | 0.96 | 0.90 | 0.85 | 0.86 |" in text
    assert "| ResNet-152 | 0.91 | 0.90 | 0.85 | 0.86 |" in text
