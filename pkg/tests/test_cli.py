import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from cife import checkpoint
from cife.cli import main
from cife.imageio import save_png
from cife.dataset import Identity, SpriteSpec, render_sprite


def run(*argv):
    return main([str(a) for a in argv])


def _bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A tiny end-to-end workflow, built once: data, vae, backbone, encoder."""
    w = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", w / "train", "--characters", 3, "--c-per", 1, "--f-per", 4) == 0
    assert run("gen-data", "--out", w / "held", "--characters", 2, "--c-per", 1, "--f-per", 2,
               "--seed", 99, "--exclude", w / "train") == 0
    assert run("train-vae", "--data", w / "train", "--out", w / "vae", "--steps", 3) == 0
    assert run("train-backbone", "--data", w / "train", "--vae", w / "vae/vae.cife", "--out", w / "bb",
               "--steps", 3) == 0
    assert run("train-backbone", "--data", w / "train", "--vae", w / "vae/vae.cife", "--out", w / "bb2",
               "--init", w / "bb", "--steps", 2, "--seed", 5) == 0
    assert run("train-encoder", "--data", w / "train", "--backbone", w / "bb", "--out", w / "enc",
               "--steps", 3) == 0
    save_png(render_sprite(SpriteSpec(Identity(2, "square", "none", 0))), w / "ref.png")
    return w


def test_gen_data_defaults_are_stable(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path / "a") == 0
    first = capsys.readouterr().out
    assert "pairs 256" in first
    assert run("gen-data", "--out", tmp_path / "b") == 0
    assert capsys.readouterr().out == first


def test_gen_data_limits(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path / "x", "--characters", 289) == 2
    assert run("gen-data", "--out", tmp_path / "p", "--characters", 18, "--c-per", 3, "--f-per", 60) == 0
    assert "pairs 3240" in capsys.readouterr().out
    assert run("gen-data", "--out", tmp_path / "p", "--characters", 1) == 2
    assert run("gen-data", "--out", tmp_path / "p", "--characters", 1, "--force") == 0


def test_usage_errors_exit_2(work, tmp_path):
    assert run("no-such-command") == 2
    assert run("train-vae", "--out", tmp_path / "v") == 2  # no --data
    assert run("train-vae", "--data", tmp_path / "missing", "--out", tmp_path / "v") == 2
    assert run("train-backbone", "--data", work / "train", "--out", tmp_path / "b",
               "--vae", tmp_path / "nope.cife") == 2
    assert run("train-encoder", "--data", work / "train", "--backbone", work / "bb", "--out", tmp_path / "e",
               "--variant", "autoencoder") == 2
    assert run("sample", "--backbone", work / "bb", "--encoder", work / "enc/encoder.cife",
               "--prompt", "x", "--out", tmp_path / "s") == 2
    # loading a vae bundle where a unet is expected is a checkpoint error, not a crash
    assert run("train-backbone", "--data", work / "train", "--out", tmp_path / "b",
               "--vae", work / "bb/unet.cife") == 2


def test_encoder_refuses_unfrozen_backbone(work, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("freeze_unet = false\n")
    assert run("train-encoder", "--data", work / "train", "--backbone", work / "bb", "--out", tmp_path / "e",
               "--config", cfg) == 2
    cfg.write_text("colour = blue\n")
    assert run("train-vae", "--data", work / "train", "--out", tmp_path / "v", "--config", cfg) == 2


def test_train_encoder_prints_identical_backbone_hashes(work, tmp_path, capsys):
    assert run("train-encoder", "--data", work / "train", "--backbone", work / "bb", "--out", tmp_path / "e",
               "--steps", 3) == 0
    lines = capsys.readouterr().out.splitlines()
    before = {l.split()[0]: l.split()[3] for l in lines if " hash before " in l}
    after = {l.split()[0]: l.split()[3] for l in lines if " hash after " in l}
    assert set(before) == {"vae", "text", "unet"} and before == after
    assert all(l.endswith("identical") for l in lines if " hash after " in l)
    # rerun with identical inputs reproduces the checkpoint byte for byte
    assert _bytes(tmp_path / "e") == _bytes(work / "enc")


def test_run_directories_are_self_describing(work):
    for d in ("vae", "bb", "enc"):
        files = set(_bytes(work / d))
        assert {"config.txt", "loss.tsv", "run.json"} <= files
        assert json.loads((work / d / "run.json").read_text())["inputs"]["dataset"]
    meta = checkpoint.load(work / "enc/encoder.cife")[2]
    assert meta["train_ids"] and meta["backbone"]


def test_sample_reproducible_and_accepts_long_seed(work, tmp_path):
    args = ["sample", "--backbone", work / "bb", "--encoder", work / "enc/encoder.cife", "--ref", work / "ref.png",
            "--prompt", "a sprite", "--seed", 7313187166, "--steps", 30, "--count", 2]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    assert _bytes(tmp_path / "a") == _bytes(tmp_path / "b")
    side = json.loads((tmp_path / "a/sample.json").read_text())
    assert side["seed"] == 7313187166 and side["steps"] == 30 and side["sampler"] == "ddim"
    assert run("sample", "--backbone", work / "bb", "--prompt", "a sprite", "--seed", 7313187166,
               "--steps", 2, "--out", tmp_path / "c") == 0
    assert json.loads((tmp_path / "c/sample.json").read_text())["encoder"] is None


def test_env_seed_default_and_flag_precedence(work, tmp_path, monkeypatch):
    base = ["sample", "--backbone", work / "bb", "--prompt", "a sprite", "--steps", 2]
    monkeypatch.setenv("CIFE_SEED", "42")
    assert run(*base, "--out", tmp_path / "env") == 0
    assert json.loads((tmp_path / "env/sample.json").read_text())["seed"] == 42
    assert run(*base, "--seed", 3, "--out", tmp_path / "flag") == 0
    assert json.loads((tmp_path / "flag/sample.json").read_text())["seed"] == 3


def test_eval_commands(work, tmp_path):
    enc = work / "enc/encoder.cife"
    code = run("eval", "identity", "--heldout", work / "held", "--encoder", enc, "--backbone", work / "bb",
               "--samples", 32, "--steps", 1, "--out", tmp_path / "id")
    assert code in (0, 1)
    report = json.loads((tmp_path / "id/eval.json").read_text())
    assert report["gate_passed"] == (code == 0) and report["total_samples"] == 64
    assert run("eval", "identity", "--heldout", work / "held", "--encoder", enc, "--backbone", work / "bb",
               "--samples", 32, "--steps", 1, "--out", tmp_path / "id2") == code
    assert _bytes(tmp_path / "id") == _bytes(tmp_path / "id2")
    # held-out set overlapping the training characters is refused
    assert run("eval", "identity", "--heldout", work / "train", "--encoder", enc, "--backbone", work / "bb",
               "--samples", 32, "--steps", 1, "--out", tmp_path / "bad") == 2
    assert run("eval", "identity", "--heldout", work / "held", "--encoder", enc, "--backbone", work / "bb",
               "--samples", 8, "--out", tmp_path / "few") == 2
    assert run("eval", "transfer", "--heldout", work / "held", "--encoder", enc, "--backbone-a", work / "bb",
               "--backbone-b", work / "bb", "--samples", 32, "--out", tmp_path / "same") == 2
    assert run("eval", "transfer", "--heldout", work / "held", "--encoder", enc, "--backbone-a", work / "bb",
               "--backbone-b", work / "bb2", "--samples", 32, "--steps", 1, "--out", tmp_path / "tr") in (0, 1)
    assert {"backbone_a", "backbone_b"} <= set(json.loads((tmp_path / "tr/eval.json").read_text()))


def test_autoencoder_commands(work, tmp_path, capsys):
    assert run("pretrain-ae", "--data", work / "train", "--backbone", work / "bb", "--out", tmp_path / "s1",
               "--steps", 2) == 0
    assert run("finetune-ae", "--data", work / "train", "--backbone", work / "bb", "--out", tmp_path / "s2",
               "--steps", 2) == 2
    capsys.readouterr()
    assert run("train-encoder", "--variant", "autoencoder", "--data", work / "train", "--backbone", work / "bb",
               "--init", tmp_path / "s1/encoder.cife", "--out", tmp_path / "s2", "--steps", 2) == 0
    out = capsys.readouterr().out
    assert "unet hash after" in out and "CHANGED" not in out
    assert run("finetune-ae", "--data", work / "train", "--backbone", work / "bb", "--out", tmp_path / "s3",
               "--init", tmp_path / "s1/encoder.cife", "--steps", 2, "--unfreeze-unet") == 0
    assert (tmp_path / "s3/backbone/unet.cife").exists()


def test_mix_variant_smoke(work, tmp_path):
    assert run("train-encoder", "--variant", "mix", "--data", work / "train", "--backbone", work / "bb",
               "--out", tmp_path / "m", "--steps", 2) == 0
    assert checkpoint.load(tmp_path / "m/encoder.cife")[1] == "encoder:mix"


def test_console_script_gradcheck_ops_only():
    env = dict(os.environ, PYTHONPATH=str(Path(__file__).resolve().parents[1] / "src"))
    proc = subprocess.run([sys.executable, "-m", "cife.cli", "gradcheck", "--ops-only"],
                          capture_output=True, text=True, env=env, timeout=300)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "max_rel_err" in proc.stdout and proc.stdout.strip().endswith("PASS")
