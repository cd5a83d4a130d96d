import csv
import hashlib
import json
from pathlib import Path

import pytest

from audiogaze import cli, metrics
from audiogaze.training import Checkpoint, TrainConfig

SMALL = {
    "synthetic": {"words_per_scene": 6, "embed_dim": 8},
    "model": {"hidden": 6, "key_dim": 4, "mlp_hidden": 4},
    "train": {"lr": 3e-3, "epochs_stage1": 2, "epochs_stage2": 2, "grid_res": 64},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    assert cli.main(["gen", "--scenes", "12", "--seed", "7", "--subjects", "4",
                     "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert cli.main(["train", str(root / "data" / "manifest.json"), "--config", str(cfg),
                     "--out", str(root / "run")]) == 0
    return root


def _tree(path, skip=("run_manifest.json",)):
    return {str(p.relative_to(path)): p.read_bytes() for p in sorted(Path(path).rglob("*"))
            if p.is_file() and p.name not in skip}


def test_gen_is_byte_identical(workdir, tmp_path):
    cfg = str(workdir / "cfg.json")
    assert cli.main(["gen", "--scenes", "12", "--seed", "7", "--subjects", "4",
                     "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    assert _tree(workdir / "data") == _tree(tmp_path / "again")


def test_gen_manifest_hashes(workdir):
    manifest = json.loads((workdir / "data" / "run_manifest.json").read_text())
    assert manifest["command"] == "gen" and manifest["seed"] == 7
    assert len(manifest["hashes"]) == 13  # 12 scenes plus the dataset manifest
    for rel, digest in manifest["hashes"].items():
        data = (workdir / "data" / rel).read_bytes()
        assert hashlib.sha256(data).hexdigest() == digest
    assert {"config", "inputs", "outputs", "wall_clock_s"} <= set(manifest)


def test_gen_one_subject_is_a_config_error(tmp_path, capsys):
    assert cli.main(["gen", "--subjects", "1", "--out", str(tmp_path)]) == cli.EXIT_VALIDATION
    assert "subjects" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE
    assert cli.main(["gen"]) == cli.EXIT_USAGE  # --out is required
    assert cli.main(["train", "--out", str(tmp_path)]) == cli.EXIT_USAGE


def test_missing_inputs_are_validation_errors(tmp_path):
    assert cli.main(["train", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus": {}}))
    assert cli.main(["gen", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_default_learning_rate():
    assert TrainConfig().lr == 1e-4


def test_train_outputs(workdir):
    run = workdir / "run"
    for name in ("best.json", "stage1.json", "last.json", "train_log.csv", "run_manifest.json"):
        assert (run / name).exists()
    with open(run / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "stage", "train_loss", "val_loss", "alpha"]
    assert [r["stage"] for r in rows] == ["mse", "mse", "pd", "pd"]
    assert Checkpoint.load(run / "best.json").stage == "pd"


def test_mse_only_stage(workdir, tmp_path):
    assert cli.main(["train", str(workdir / "data" / "manifest.json"), "--stage", "mse-only",
                     "--config", str(workdir / "cfg.json"), "--out", str(tmp_path)]) == 0
    with open(tmp_path / "train_log.csv") as fh:
        assert {r["stage"] for r in csv.DictReader(fh)} == {"mse"}


def test_resume_matches_uninterrupted(workdir, tmp_path):
    manifest, cfg = str(workdir / "data" / "manifest.json"), str(workdir / "cfg.json")
    assert cli.main(["train", manifest, "--config", cfg, "--stop-after", "3",
                     "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["train", manifest, "--resume", str(tmp_path / "a" / "last.json"),
                     "--out", str(tmp_path / "b")]) == 0
    for name in ("best.json", "last.json", "train_log.csv"):
        assert (tmp_path / "b" / name).read_bytes() == (workdir / "run" / name).read_bytes()


def test_eval_and_ablate_full_agree(workdir, tmp_path):
    manifest, cfg = str(workdir / "data" / "manifest.json"), str(workdir / "cfg.json")
    assert cli.main(["eval", str(workdir / "run" / "best.json"), manifest,
                     "--out", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert set(report["aggregate"]) == {"ED", "DTW", "ScanMatch", "PDS"}
    assert cli.main(["ablate", manifest, "--variants", "full", "--config", cfg,
                     "--out", str(tmp_path / "ab")]) == 0
    ablation = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    assert ablation["full"]["aggregate"] == report["aggregate"]
    assert ablation["full"]["scenes"] == report["scenes"]


def test_ablate_no_pdloss_is_stage_one(workdir, tmp_path):
    manifest, cfg = str(workdir / "data" / "manifest.json"), str(workdir / "cfg.json")
    assert cli.main(["ablate", manifest, "--variants", "full", "no-pdloss", "--config", cfg,
                     "--out", str(tmp_path)]) == 0
    stage1 = json.loads((workdir / "run" / "stage1.json").read_text())
    variant = json.loads((tmp_path / "no-pdloss.json").read_text())
    assert variant["model"] == stage1["model"]


def test_rollout_modes_and_analyze(workdir, tmp_path):
    manifest = str(workdir / "data" / "manifest.json")
    ckpt = str(workdir / "run" / "best.json")
    scene = "syn7-00003"
    assert cli.main(["rollout", ckpt, manifest, "--scene", scene, "--out", str(tmp_path)]) == 0
    assert cli.main(["rollout", ckpt, manifest, "--scene", scene, "--mode", "teacher_forced",
                     "--out", str(tmp_path)]) == cli.EXIT_USAGE
    assert cli.main(["rollout", ckpt, manifest, "--scene", scene, "--mode", "teacher_forced",
                     "--subject", "2", "--out", str(tmp_path)]) == 0
    assert cli.main(["rollout", ckpt, manifest, "--scene", "nope", "--out", str(tmp_path)]) == 2
    files = sorted(str(p) for p in tmp_path.glob("rollout_*.json"))
    assert len(files) == 2
    doc = json.loads(Path(files[0]).read_text())
    assert len(doc["points"]) == 6 and doc["scene_id"] == scene
    assert cli.main(["analyze", *files, "--out", str(tmp_path / "an")]) == 0
    rows = metrics.read_saccade_csv(tmp_path / "an" / "saccades.csv")
    assert sum(r["count"] for r in rows) == 10
    assert cli.main(["analyze", "--dataset", manifest, "--out", str(tmp_path / "hu")]) == 0


def test_analyze_needs_input(tmp_path):
    assert cli.main(["analyze", "--out", str(tmp_path)]) == cli.EXIT_USAGE
