import json

import pytest

from fusionbench import checkpoint as ckpt
from fusionbench.cli import main
from fusionbench.config import RunConfig
from fusionbench.plotting import read_log
from fusionbench.recipe import epoch_means, lr_at

SMALL_SYNTH = ["--n-videos", "4", "--splits", "2", "1", "1", "--duration", "20"]
SHORT = {"epochs": 2, "samples_per_epoch": 40, "lr_start": 1e-4, "lr_max": 1e-3, "lr_end": 0.0,
         "wd_start": 1e-2, "wd_end": 1e-2, "stretch": 1.25}


def _config(root, **overrides):
    doc = {
        "seed": 0,
        "output_dir": "run",
        "data": {"manifest": "data/manifest.json", "clip_frames": 4},
        "backbone": {"spatial_size": 8, "embed_dim": 16},
        "finetune": {"schedule": {"epochs": 3, "samples_per_epoch": 32, "lr_start": 1e-4, "lr_max": 1e-3,
                                  "lr_end": 1e-5, "wd_start": 0.04, "wd_end": 0.4}},
        "steps": {s: {"schedule": dict(SHORT)} for s in ("2", "3", "4")},
    }
    doc.update(overrides)
    path = root / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), *SMALL_SYNTH]) == 0
    cfg = _config(root)
    assert main(["train", "--config", str(cfg), "--steps", "2,3,4"]) == 0
    return root, cfg


def test_synth_prints_statistics(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), *SMALL_SYNTH]) == 0
    out = capsys.readouterr().out
    assert "manifest.json" in out and "class_freq" in out
    assert main(["synth", "--out", str(tmp_path), "--splits", "1", "1", "1"]) == 2


def test_train_outputs(pipeline):
    root, cfg = pipeline
    run = root / "run"
    chash = RunConfig.load(cfg).hash()
    for step in (2, 3, 4):
        payload = ckpt.load_checkpoint(run / f"step{step}.pt")
        assert payload["meta"]["config_hash"] == chash
        log = read_log(run / f"step{step}_log.jsonl")
        total = len(log)
        assert total == 20
        for rec in log[::7]:
            assert rec["config_hash"] == chash
            assert rec["lr"] == lr_at(rec["step"], total, RunConfig.load(cfg).step_plan(step, "synthetic").schedule)
    meta = ckpt.load_checkpoint(run / "step3.pt")["meta"]
    assert meta["hashes_before"]["decoder"] == meta["hashes_after"]["decoder"]
    assert meta["hashes_before"]["backbone"] == meta["hashes_after"]["backbone"]
    assert set(ckpt.load_checkpoint(run / "step4.pt")["components"]) == {"backbone", "decoder", "stream_encoder"}


def test_step_prerequisite_missing(tmp_path, pipeline, capsys):
    root, cfg = pipeline
    code = main(["train", "--config", str(cfg), "--steps", "3", "--out", str(tmp_path / "empty")])
    assert code == 3
    assert "step2.pt" in capsys.readouterr().err


def test_evaluate_reports(pipeline):
    root, cfg = pipeline
    run = root / "run"
    assert main(["evaluate", "--config", str(cfg), "--with-streams"]) == 0
    assert main(["evaluate", "--config", str(cfg), "--with-streams", "--include-class13"]) == 0
    excl = json.loads((run / "report_step4_streams_excl.json").read_text())
    incl = json.loads((run / "report_step4_streams_incl.json").read_text())
    assert "linear" in excl["metadata"]["quantile_convention"]
    assert excl["metadata"]["config_hash"] == RunConfig.load(cfg).hash()
    # synthetic data has no exception class, so both variants agree on every IoU value
    assert excl["per_video_iou"] == incl["per_video_iou"]
    assert (run / "report_step4_streams_excl.txt").read_text().startswith("Approach")


def test_evaluate_with_streams_on_video_only_checkpoint(pipeline, capsys):
    root, cfg = pipeline
    code = main(["evaluate", "--config", str(cfg), "--with-streams", "--checkpoint", str(root / "run" / "step2.pt")])
    assert code == 2
    assert "video-only" in capsys.readouterr().err


def test_evaluate_config_mismatch(pipeline, tmp_path):
    root, _ = pipeline
    other = json.loads((root / "cfg.json").read_text())
    other["penalty_weight"] = 0.5
    other["data"]["manifest"] = str(root / "data" / "manifest.json")
    other["output_dir"] = str(tmp_path)
    path = tmp_path / "other.json"
    path.write_text(json.dumps(other))
    step2 = str(root / "run" / "step2.pt")
    assert main(["evaluate", "--config", str(path), "--checkpoint", step2]) == 2
    assert main(["evaluate", "--config", str(path), "--checkpoint", step2, "--allow-config-mismatch"]) == 0
    assert main(["evaluate", "--config", str(path), "--checkpoint", str(tmp_path / "nope.pt")]) == 3


def test_missing_manifest_and_config(tmp_path):
    cfg = _config(tmp_path)
    assert main(["train", "--config", str(cfg)]) == 2
    assert main(["finetune", "--config", str(tmp_path / "absent.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"steps": {"5": {}}}))
    assert main(["train", "--config", str(bad)]) == 2


def test_divergence_exit_code(pipeline, tmp_path):
    root, _ = pipeline
    steps = {"2": {"schedule": {**SHORT, "lr_start": 1e300, "lr_max": 1e300}}}
    cfg = _config(tmp_path, steps=steps, data={"manifest": str(root / "data" / "manifest.json"), "clip_frames": 4})
    assert main(["train", "--config", str(cfg), "--steps", "2"]) == 4


def test_finetune_deterministic_and_trending_down(pipeline, tmp_path):
    root, cfg = pipeline
    hashes = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["finetune", "--config", str(cfg), "--out", str(out)]) == 0
        hashes.append(ckpt.load_checkpoint(out / "backbone.pt")["meta"]["content_hash"])
    assert hashes[0] == hashes[1]
    means = epoch_means(read_log(tmp_path / "a" / "finetune_log.jsonl"))
    assert len(means) == 3 and means[-1] < means[0]
    out = tmp_path / "c"
    assert main(["finetune", "--config", str(cfg), "--out", str(out), "--seed", "1"]) == 0
    assert ckpt.load_checkpoint(out / "backbone.pt")["meta"]["content_hash"] != hashes[0]


def test_finetuned_backbone_feeds_training(pipeline, tmp_path):
    root, _ = pipeline
    assert main(["finetune", "--config", str(root / "cfg.json"), "--out", str(tmp_path)]) == 0
    cfg = _config(tmp_path, data={"manifest": str(root / "data" / "manifest.json"), "clip_frames": 4},
                  backbone={"checkpoint": "backbone.pt", "spatial_size": 8, "embed_dim": 16})
    assert main(["train", "--config", str(cfg), "--steps", "2", "--out", str(tmp_path / "run")]) == 0


def test_plots(pipeline, tmp_path, capsys):
    root, _ = pipeline
    manifest = str(root / "data" / "manifest.json")
    assert main(["plot", "--manifest", manifest, "--out", str(tmp_path / "a")]) == 0
    assert main(["plot", "--manifest", manifest, "--out", str(tmp_path / "b")]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["composition_test.png", "composition_train.png", "composition_val.png"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    log = str(root / "run" / "step2_log.jsonl")
    assert main(["plot", "--log", log, "--out", str(tmp_path / "c")]) == 0
    assert main(["plot", "--log", log, "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "c" / "training_curves.png").read_bytes() == (tmp_path / "d" / "training_curves.png").read_bytes()
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert main(["plot", "--log", str(empty), "--out", str(tmp_path / "e")]) == 2


def test_config_hash_properties(tmp_path):
    (tmp_path / "m.json").write_text("{}")
    a = RunConfig.from_dict({"seed": 1, "data": {"manifest": "m.json", "clip_frames": 4}}, tmp_path)
    b = RunConfig.from_dict({"data": {"clip_frames": 4, "manifest": "m.json"}, "seed": 1}, tmp_path)
    assert a.hash() == b.hash()
    c = RunConfig.from_dict({"seed": 1, "data": {"manifest": "m.json", "clip_frames": 4}, "output_dir": "x"}, tmp_path)
    before = a.hash()
    assert c.hash() == before
    (tmp_path / "m.json").write_text('{"changed": 1}')
    assert a.hash() != before
    assert RunConfig.from_dict({"seed": 2, "data": {"manifest": "m.json", "clip_frames": 4}}, tmp_path).hash() != a.hash()
