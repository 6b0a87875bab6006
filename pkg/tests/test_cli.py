import json

import pytest

from conftest import tiny_config
from hoiavatar.cli import main
from hoiavatar.runio import CurriculumSettings, RunConfig
from hoiavatar.synthworld import WorldConfig


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = RunConfig(model=tiny_config(), curriculum=CurriculumSettings(steps=(2, 2, 2), lr_scale=100.0, batch_size=2),
                    world=WorldConfig(n_train=4, n_val=1, n_test=3), seed=3)
    cfg.save(root / "config.json")
    assert main(["build-data", "--config", str(root / "config.json"), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(root / "config.json"), "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root


def test_build_data_hash_deterministic(run_dir, tmp_path, capsys):
    assert main(["build-data", "--config", str(run_dir / "config.json"), "--out", str(tmp_path / "d")]) == 0
    a = json.loads((run_dir / "data" / "manifest.json").read_text())["hash"]
    b = json.loads((tmp_path / "d" / "manifest.json").read_text())["hash"]
    assert a == b


def test_train_outputs(run_dir):
    run = run_dir / "run"
    for name in ("pim_pretrain.ckpt", "aim_audio_pretrain.ckpt", "joint_finetune.ckpt", "manifest.json",
                 "loss_curves.png", "losses_joint_finetune.tsv"):
        assert (run / name).exists(), name
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["ema"] is None and manifest["dataset_hash"]


def test_generate_eval_roundtrip(run_dir, capsys):
    ck = str(run_dir / "run" / "joint_finetune.ckpt")
    gen = run_dir / "gen"
    assert main(["generate", "--checkpoint", ck, "--mode", "tam2v", "--data", str(run_dir / "data"),
                 "--split", "test", "--out", str(gen), "--steps", "2"]) == 0
    assert (gen / "preview.png").exists()
    assert main(["eval", "--data", str(run_dir / "data"), "--generations", str(gen),
                 "--out", str(run_dir / "report")]) == 0
    out = capsys.readouterr().out
    assert "vlm_qa" in out and "unavailable" in out
    tsv = (run_dir / "report" / "report.tsv").read_text().splitlines()
    assert tsv[0].split("\t")[:3] == ["episode", "pi", "dd"] and tsv[-1].startswith("MEAN")
    assert (run_dir / "report" / "metrics.png").exists()


def test_stage_order_exit_code(run_dir, tmp_path, capsys):
    code = main(["train", "--config", str(run_dir / "config.json"), "--data", str(run_dir / "data"),
                 "--out", str(tmp_path / "r"), "--stage", "joint"])
    assert code == 2
    assert "PIM_PRETRAIN" in capsys.readouterr().err


def test_missing_mode_input_exit_code(run_dir, tmp_path):
    ck = str(run_dir / "run" / "joint_finetune.ckpt")
    ref = next((run_dir / "data" / "test-0000").glob("frame_000.png"))
    code = main(["generate", "--checkpoint", ck, "--mode", "tam2v", "--reference", str(ref),
                 "--command", "touch the cup", "--out", str(tmp_path / "g")])
    assert code == 2


def test_usage_errors(run_dir, tmp_path, monkeypatch):
    monkeypatch.delenv("HOIAVATAR_OUTPUT_DIR", raising=False)
    assert main([]) == 2
    assert main(["render-motion", "--motion", str(run_dir / "data" / "test-0000" / "motion.json")]) == 2
    assert main(["render-motion", "--motion", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 3
    assert main(["eval", "--data", str(tmp_path), "--generations", str(tmp_path), "--out", str(tmp_path)]) != 0


def test_output_env_override(run_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("HOIAVATAR_OUTPUT_DIR", str(tmp_path / "env"))
    motion = run_dir / "data" / "test-0000" / "motion.json"
    assert main(["render-motion", "--motion", str(motion), "--canvas", "64"]) == 0
    assert (tmp_path / "env" / "motion_000.png").exists()


def test_corrupt_checkpoint_runtime_error(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["generate", "--checkpoint", str(bad), "--mode", "t2mv", "--out", str(tmp_path / "g")]) == 3
