import subprocess
import sys

import numpy as np
import pytest

from semguide.cli import main, parse_manifest
from semguide.config import RunConfig
from semguide.io import read_ppm

TINY = {
    "corpus.size": "16", "corpus.count": "240", "corpus.holdout_fraction": "0.5",
    "schedule.T": "4", "denoiser.widths": "8,8,8", "denoiser.steps": "4", "denoiser.batch_size": "4",
    "denoiser.checkpoint_every": "2", "encoders.dim": "8", "encoders.pretrain_steps": "3",
    "encoders.pretrain_batch_size": "8", "encoders.finetune_steps": "3", "encoders.finetune_batch_size": "8",
    "encoders.checkpoint_every": "2", "sampler.n": "2", "eval.scales": "0,50", "eval.n_per_scale": "2",
    "eval.ref_count": "1",
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(RunConfig(TINY).resolved())
    assert run("--config", cfg, "--out", root / "corpus", "gen-corpus") == 0
    assert run("--config", cfg, "--out", root / "den", "train", "--corpus", root / "corpus") == 0
    assert run("--config", cfg, "--out", root / "pre", "pretrain-encoder", "--corpus", root / "corpus") == 0
    assert run("--config", cfg, "--out", root / "enc", "finetune-encoder", "--corpus", root / "corpus",
               "--encoder", root / "pre" / "encoder_pretrained.ckpt") == 0
    return root, cfg


def test_outputs_written(pipeline):
    root, _ = pipeline
    assert len(list((root / "corpus" / "images").glob("*.ppm"))) == 240
    losses = (root / "den" / "loss.log").read_text().split("\n")
    assert len([l for l in losses if l]) == 4
    for sub, name in (("den", "run-train.cfg"), ("pre", "run-pretrain-encoder.cfg"), ("enc", "run-finetune-encoder.cfg")):
        resolved = (root / sub / name).read_text()
        assert "schedule.T = 4" in resolved


def test_resume_matches_uninterrupted(pipeline):
    root, cfg = pipeline
    out = root / "den_resume"
    assert run("--config", cfg, "--out", out, "train", "--corpus", root / "corpus", "--stop-after", 2) == 0
    assert len((out / "loss.log").read_text().splitlines()) == 2
    assert run("--config", cfg, "--out", out, "train", "--corpus", root / "corpus") == 0
    assert (out / "denoiser.ckpt").read_bytes() == (root / "den" / "denoiser.ckpt").read_bytes()
    assert (out / "loss.log").read_bytes() == (root / "den" / "loss.log").read_bytes()


def test_finetune_resume_matches_uninterrupted(pipeline):
    root, cfg = pipeline
    out = root / "enc_resume"
    args = ("--config", cfg, "--out", out, "finetune-encoder", "--corpus", root / "corpus",
            "--encoder", root / "pre" / "encoder_pretrained.ckpt")
    assert run(*args, "--stop-after", 1) == 0
    assert run(*args) == 0
    assert (out / "encoder.ckpt").read_bytes() == (root / "enc" / "encoder.ckpt").read_bytes()
    assert run(*args) == 0


def test_zero_scale_matches_unconditional(pipeline):
    root, cfg = pipeline
    ref = next((root / "corpus" / "images").glob("*.ppm"))
    assert run("--config", cfg, "--out", root / "u", "sample", "--denoiser", root / "den" / "denoiser.ckpt") == 0
    assert run("--config", cfg, "--out", root / "z", "sample", "--denoiser", root / "den" / "denoiser.ckpt",
               "--encoder", root / "enc" / "encoder.ckpt", "--ref-image", ref, "--scale", 0) == 0
    for i in range(2):
        name = f"sample_{i:03d}.ppm"
        assert (root / "u" / name).read_bytes() == (root / "z" / name).read_bytes()
    entries = parse_manifest(root / "z" / "manifest.txt")
    assert len(entries) == 2 and entries[0]["kind"] == "content"


def test_guided_sample_and_eval(pipeline):
    root, cfg = pipeline
    refs = sorted((root / "corpus" / "images").glob("*.ppm"))
    out = root / "g"
    assert run("--config", cfg, "--out", out, "sample", "--denoiser", root / "den" / "denoiser.ckpt",
               "--encoder", root / "enc" / "encoder.ckpt", "--ref-image", refs[-1], "--mode", "style",
               "--scale", 10) == 0
    img = read_ppm(out / "sample_000.ppm")
    assert img.shape == (3, 16, 16) and img.min() >= -1 and img.max() <= 1
    assert (out / "trace_000.txt").read_text().startswith("#")
    assert run("--config", cfg, "--out", root / "ev", "eval", "--generated", out, "--encoder",
               root / "enc" / "encoder.ckpt", "--corpus", root / "corpus") == 0
    kv = dict(l.split("=", 1) for l in (root / "ev" / "report.kv").read_text().splitlines() if "=" in l)
    assert 0.0 <= float(kv["top20"]) <= 1.0 and float(kv["diversity"]) >= 0


def test_text_guidance(pipeline):
    root, cfg = pipeline
    assert run("--config", cfg, "--out", root / "t", "sample", "--denoiser", root / "den" / "denoiser.ckpt",
               "--encoder", root / "enc" / "encoder.ckpt", "--text", "a small red circle", "--n", 1) == 0
    assert parse_manifest(root / "t" / "manifest.txt")[0]["text"] == "a small red circle"


def test_ablate(pipeline):
    root, cfg = pipeline
    assert run("--config", cfg, "--out", root / "ab", "ablate", "--denoiser", root / "den" / "denoiser.ckpt",
               "--encoder", root / "enc" / "encoder.ckpt", "--corpus", root / "corpus") == 0
    rows = (root / "ab" / "ablation.txt").read_text().splitlines()
    assert rows[0].split()[0] == "scale" and [r.split()[0] for r in rows[1:]] == ["0", "50"]
    assert len(list((root / "ab" / "samples").glob("*.ppm"))) == 4


def test_composite_needs_both_scales(pipeline, capsys):
    root, cfg = pipeline
    ref = next((root / "corpus" / "images").glob("*.ppm"))
    code = run("--config", cfg, "--out", root / "c", "sample", "--denoiser", root / "den" / "denoiser.ckpt",
               "--encoder", root / "enc" / "encoder.ckpt", "--text", "a red square", "--ref-image", ref)
    assert code == 2
    assert "scale" in capsys.readouterr().err
    assert run("--config", cfg, "--out", root / "c", "sample", "--denoiser", root / "den" / "denoiser.ckpt",
               "--encoder", root / "enc" / "encoder.ckpt", "--text", "a red square", "--ref-image", ref,
               "--text-scale", 5, "--image-scale", 5, "--n", 1) == 0
    assert parse_manifest(root / "c" / "manifest.txt")[0]["kind"] == "composite"


def test_wrong_checkpoint_kind_rejected(pipeline, capsys):
    root, cfg = pipeline
    code = run("--config", cfg, "--out", root / "w", "sample", "--denoiser", root / "enc" / "encoder.ckpt")
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "not a checkpoint" in err[0]


def test_incomplete_config_rejected(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    lines = [l for l in cfg.read_text().splitlines() if not l.startswith("sampler.seed")]
    (tmp_path / "bad.cfg").write_text("\n".join(lines))
    assert run("--config", tmp_path / "bad.cfg", "--out", tmp_path / "x", "gen-corpus") == 1
    assert "missing config key sampler.seed" in capsys.readouterr().err


def test_missing_inputs_and_usage_errors(tmp_path, capsys):
    assert run("--out", tmp_path, "train", "--corpus", tmp_path / "nope") == 1
    assert "error:" in capsys.readouterr().err
    assert run("--out", tmp_path, "sample") == 2
    assert run("--seed", "-3", "--out", tmp_path, "gen-corpus") == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "semguide", "--out", str(tmp_path), "sample", "--denoiser",
                           str(tmp_path / "missing.ckpt")], capture_output=True, text=True)
    assert proc.returncode == 1
    assert proc.stderr.startswith("error: ")
