"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Criteria 5 to 7 use the trained models under ``artifacts/`` (built through
the CLI with ``configs/default.cfg`` when missing; training resumes from
any checkpoints already there).
"""

import contextlib
import filecmp
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE, DEFAULT_CFG, central_difference, cli, rel_error
from semguide import tensor as T
from semguide.cli import load_denoiser, load_encoders, main, pick_negatives
from semguide.config import RunConfig, load_config
from semguide.corpus import foreground_centroid, holdout_split, load_corpus
from semguide.encoders import TextEncoder, TimeConditionedEncoder, noised_retrieval_top1
from semguide.evaluation import (frechet_distance, gaussian_frechet, pairwise_diversity_embeddings,
                                 retrieval_accuracy)
from semguide.guidance import (Composite, Content, Language, RefNoise, Structure, Style, guidance_gradient,
                               guidance_value)
from semguide.io import write_ppm
from semguide.sampler import SamplerConfig, batch_sample, shifted_step
from semguide.schedule import build_schedule, q_sample

@contextlib.contextmanager
def criterion(n, title):
    detail = {}
    start = time.time()
    try:
        yield detail
    except BaseException as exc:
        msg = " ".join(str(exc).split())[:160]
        ACCEPTANCE[n] = f"[{n}] FAIL  {title}: {detail.get('info', '')} {msg}".rstrip()
        print(ACCEPTANCE[n])
        raise
    ACCEPTANCE[n] = f"[{n}] PASS  {title}: {detail.get('info', '')} ({time.time() - start:.0f}s)"
    print(ACCEPTANCE[n])


# -- 1 ----------------------------------------------------------------------------------

def test_1_gradient_fidelity():
    with criterion(1, "guidance gradients match central differences") as d:
        t0 = time.time()
        sched = build_schedule()
        rng = np.random.default_rng(5)
        enc = TimeConditionedEncoder(dim=32, seed=3)
        for name in enc.adaptive_parameter_names():
            enc.params[name].data = enc.params[name].data + 0.1 * rng.standard_normal(enc.params[name].shape)
        text = TextEncoder(seed=3)
        x = rng.standard_normal((3, 16, 16))
        ref = rng.uniform(-1, 1, (3, 16, 16))
        specs = {
            "language": Language("a red square", 1.0),
            "content": Content(ref, 1.0),
            "structure": Structure(ref, scale=1.0),
            "style": Style(ref, scale=1.0),
            "composite": Composite([Language("a blue circle", 0.7), Structure(ref, scale=0.4), Style(ref, scale=2.0)]),
        }
        worst = {}
        for name, spec in specs.items():
            noise = RefNoise(np.random.default_rng(1), "fixed")
            _, g = guidance_gradient(spec, x, 50, enc, text, noise, sched)

            def f(v):
                with T.no_grad():
                    return guidance_value(spec, v, 50, enc, text, noise, sched).data

            worst[name] = float(rel_error(g, central_difference(f, x, h=1e-5)).max())
        elapsed = time.time() - t0
        d["info"] = " ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" in {elapsed:.0f}s"
        assert all(v < 1e-6 for v in worst.values()), worst
        assert elapsed < 120, f"took {elapsed:.0f}s"


# -- 2 ----------------------------------------------------------------------------------

def test_2_shifted_mean_exactness():
    with criterion(2, "guided minus unguided mean equals s*var*g") as d:
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(100):
            shape = (3, int(rng.integers(1, 9)), int(rng.integers(1, 9)))
            mu, g = rng.standard_normal(shape), rng.standard_normal(shape)
            var, s = float(rng.uniform(1e-5, 0.05)), float(rng.uniform(0, 1000))
            z = np.zeros(shape)
            shift = shifted_step(mu, var, g, s, z) - shifted_step(mu, var, None, s, z)
            worst = max(worst, float(np.abs(shift - s * var * g).max()))
        d["info"] = f"max deviation {worst:.1e} over 100 instances"
        assert worst <= 1e-12


# -- 3 ----------------------------------------------------------------------------------

def test_3_zero_guidance_equivalence(trained, tmp_path):
    with criterion(3, "sample --scale 0 is byte-identical to unconditional sampling") as d:
        ref = sorted((trained / "corpus" / "images").glob("*.ppm"))[-1]
        common = ["--config", str(DEFAULT_CFG), "--seed", "11"]
        den = str(trained / "denoiser" / "denoiser.ckpt")
        assert main(common + ["--out", str(tmp_path / "u"), "sample", "--denoiser", den, "--n", "5"]) == 0
        assert main(common + ["--out", str(tmp_path / "z"), "sample", "--denoiser", den, "--n", "5",
                              "--encoder", str(trained / "encoders" / "encoder.ckpt"), "--ref-image", str(ref),
                              "--scale", "0"]) == 0
        same = [(tmp_path / "u" / f"sample_{i:03d}.ppm").read_bytes() == (tmp_path / "z" / f"sample_{i:03d}.ppm").read_bytes()
                for i in range(5)]
        d["info"] = f"{sum(same)}/5 seeds identical"
        assert all(same)


# -- 4 ----------------------------------------------------------------------------------

def test_4_forward_marginal():
    with criterion(4, "q_sample marginal and single-step telescoping") as d:
        sched = build_schedule()
        n = 100_000
        rng = np.random.default_rng(4)
        x0 = np.array([-0.8, 0.1, 0.9])
        worst = 0.0
        for t in (sched.T // 4, sched.T // 2, sched.T):
            ab = sched.alpha_bar[t]
            eps = rng.standard_normal((n, 3))
            xt = q_sample(np.broadcast_to(x0, (n, 3)), t, eps, sched).data
            var = 1 - ab
            z_mean = (xt.mean(0) - np.sqrt(ab) * x0) / np.sqrt(var / n)
            z_var = (xt.var(0, ddof=1) - var) / (var * np.sqrt(2.0 / (n - 1)))
            worst = max(worst, np.abs(z_mean).max(), np.abs(z_var).max())
            # telescoping single steps on a 1-pixel image
            x = np.full(n, 0.5)
            for s in range(1, t + 1):
                x = np.sqrt(sched.alpha[s]) * x + np.sqrt(sched.beta[s]) * rng.standard_normal(n)
            z_mean = (x.mean() - np.sqrt(ab) * 0.5) / np.sqrt(var / n)
            z_var = (x.var(ddof=1) - var) / (var * np.sqrt(2.0 / (n - 1)))
            worst = max(worst, abs(z_mean), abs(z_var))
        d["info"] = f"largest deviation {worst:.2f} standard errors"
        assert worst < 4.0


# -- 5 ----------------------------------------------------------------------------------

def _setup(trained):
    cfg = load_config(DEFAULT_CFG)
    sched = build_schedule(cfg["schedule.kind"], cfg["schedule.T"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])
    _, test = holdout_split(load_corpus(trained / "corpus"), cfg["corpus.holdout_fraction"], cfg["corpus.split_seed"])
    return cfg, sched, test


def test_5_finetuning_effect(trained):
    with criterion(5, "finetuning raises clean/noised retrieval at t=T/2 by >= 20 points") as d:
        cfg, sched, test = _setup(trained)
        t = sched.T // 2
        rows = []
        for seed in (0, 1, 2):
            path = trained / "encoders" / "encoder.ckpt"
            if seed:
                out = trained / f"encoders_seed{seed}"
                cli("--config", DEFAULT_CFG, "--seed", seed, "--out", out, "finetune-encoder",
                    "--corpus", trained / "corpus", "--encoder", trained / "encoders" / "encoder_pretrained.ckpt")
                path = out / "encoder.ckpt"
            clean, _, noised = load_encoders(path, cfg)
            before = noised_retrieval_top1(clean, TimeConditionedEncoder.from_clean(clean), test.images, sched, t,
                                           batch=64, seed=seed)
            after = noised_retrieval_top1(clean, noised, test.images, sched, t, batch=64, seed=seed)
            rows.append((before, after))
        gain = float(np.mean([a - b for b, a in rows]))
        d["info"] = ("before/after " + " ".join(f"{b:.3f}/{a:.3f}" for b, a in rows)
                     + f", mean gain {100 * gain:.1f} points")
        assert gain >= 0.20


# -- 6 ----------------------------------------------------------------------------------

def test_6_correctness_diversity_tradeoff(trained):
    with criterion(6, "retrieval rises and diversity falls with the guidance scale") as d:
        cfg = load_config(DEFAULT_CFG)
        start = time.time()
        cli("--config", DEFAULT_CFG, "--out", trained / "ablation", "ablate", "--denoiser",
            trained / "denoiser" / "denoiser.ckpt", "--encoder", trained / "encoders" / "encoder.ckpt",
            "--corpus", trained / "corpus")
        elapsed = time.time() - start
        rows = []
        for block in (trained / "ablation" / "ablation.kv").read_text().strip().split("\n\n"):
            kv = dict(line.split("=", 1) for line in block.splitlines())
            rows.append((float(kv["scale"]), float(kv["top1"]), float(kv["diversity"])))
        d["info"] = ", ".join(f"s={s:g}: top1 {a:.3f} div {v:.3f}" for s, a, v in rows) + f" in {elapsed / 60:.0f} min"
        assert [r[0] for r in rows] == sorted(cfg["eval.scales"]) and len(rows) == 3
        assert cfg["eval.ref_count"] == 3 and cfg["eval.n_per_scale"] == 16
        top1 = [r[1] for r in rows]
        div = [r[2] for r in rows]
        assert all(a < b for a, b in zip(top1, top1[1:])), "top-1 not strictly increasing"
        assert all(a > b for a, b in zip(div, div[1:])), "diversity not strictly decreasing"
        assert elapsed < 2 * 3600


# -- 7 ----------------------------------------------------------------------------------

def _feature_distance(clean, images, ref):
    """Mean over samples of the layer-averaged mean squared feature difference."""
    with T.no_grad():
        _, ref_feats = clean.encode(ref)
        _, feats = clean.encode(np.stack(images))
    per_layer = [((f.data - r.data[None]) ** 2).mean(axis=(1, 2, 3)) for f, r in zip(feats, ref_feats)]
    return float(np.mean(per_layer))


def _centroid_variance(images):
    c = np.array([foreground_centroid(img) for img in images])
    return float(c[:, 0].var() + c[:, 1].var())


def test_7_structure_versus_content(trained):
    with criterion(7, "structure guidance keeps layout, content guidance does not") as d:
        cfg, sched, test = _setup(trained)
        model = load_denoiser(trained / "denoiser" / "denoiser.ckpt", cfg)
        clean, text, noised = load_encoders(trained / "encoders" / "encoder.ckpt", cfg)
        ref_idx = np.random.default_rng(cfg["eval.ref_seed"]).choice(len(test), cfg["eval.ref_count"], replace=False)
        ref = test.images[ref_idx[0]]
        negatives = pick_negatives(test.images, [ref], cfg["eval.negatives_seed"])
        layers = cfg["guidance.layers"] or None
        specs = {"content": Content(ref, cfg["eval.content_scale"]),
                 "structure": Structure(ref, layers, cfg["eval.structure_scale"])}
        scfg = SamplerConfig(seed=cfg["eval.seed"], ref_noise=cfg["guidance.ref_noise"])
        stats = {}
        out = trained / "contrast"
        out.mkdir(exist_ok=True)
        for name, spec in specs.items():
            images, _ = batch_sample(16, model, sched, spec, scfg, noised, text)
            for i, img in enumerate(images):
                write_ppm(out / f"{name}_{i:03d}.ppm", img)
            top1 = retrieval_accuracy(np.stack(images), [ref] * 16, negatives, clean)[1]
            stats[name] = (top1, _feature_distance(clean, images, ref), _centroid_variance(images))
        (c_acc, c_dist, c_var), (s_acc, s_dist, s_var) = stats["content"], stats["structure"]
        d["info"] = (f"top1 content {c_acc:.3f} structure {s_acc:.3f}; feature distance content {c_dist:.4f} "
                     f"structure {s_dist:.4f} ({100 * (1 - s_dist / c_dist):.0f}% lower); "
                     f"centroid variance content {c_var:.2f} structure {s_var:.2f}")
        assert abs(c_acc - s_acc) <= 0.2, "retrieval accuracies not matched"
        assert s_dist <= 0.7 * c_dist
        assert c_var > s_var


# -- 8 ----------------------------------------------------------------------------------

def test_8_metric_oracles():
    with criterion(8, "metrics match brute-force oracles") as d:
        rng = np.random.default_rng(8)
        errs = {}
        f = rng.standard_normal((4, 3, 5))
        g = T.gram_matrix(T.Tensor(f)).data
        naive = np.array([[sum(f[a, i, j] * f[b, i, j] for i in range(3) for j in range(5)) / 60 for b in range(4)]
                          for a in range(4)])
        errs["gram"] = float(np.abs(g - naive).max())

        class Identity:
            layers = (0, 1)

            def encode(self, x, t=None):
                x = x if isinstance(x, T.Tensor) else T.Tensor(x)
                return T.l2_normalize(x.reshape((-1,))), [x, x * x]

        sched = build_schedule()
        x, ref = rng.standard_normal((2, 2, 3, 3))
        st = guidance_value(Structure(ref), x, 0, Identity(), None, None, sched).data
        sy = guidance_value(Style(ref), x, 0, Identity(), None, None, sched).data
        want_st = want_sy = 0.0
        for a, b in ((x, ref), (x * x, ref * ref)):
            want_st -= sum((a[c, i, j] - b[c, i, j]) ** 2 for c in range(2) for i in range(3) for j in range(3)) / 18
            ga = [[sum(a[p, i, j] * a[q, i, j] for i in range(3) for j in range(3)) / 18 for q in range(2)] for p in range(2)]
            gb = [[sum(b[p, i, j] * b[q, i, j] for i in range(3) for j in range(3)) / 18 for q in range(2)] for p in range(2)]
            want_sy -= sum((ga[p][q] - gb[p][q]) ** 2 for p in range(2) for q in range(2))
        errs["structure"] = abs(float(st) - want_st)
        errs["style"] = abs(float(sy) - want_sy)

        emb = rng.standard_normal((9, 5))
        pairs = [(i, j) for i in range(9) for j in range(i + 1, 9)]
        naive_div = sum(1 - emb[i] @ emb[j] / np.linalg.norm(emb[i]) / np.linalg.norm(emb[j]) for i, j in pairs) / len(pairs)
        errs["diversity"] = abs(pairwise_diversity_embeddings(emb) - naive_div)

        a = rng.standard_normal((30, 3))
        errs["frechet_self"] = abs(frechet_distance(a, a))
        da, db = np.array([0.5, 2.0, 3.0]), np.array([1.5, 0.2, 3.0])
        mu = np.array([0.3, -1.0, 0.0])
        want = mu @ mu + np.sum((np.sqrt(da) - np.sqrt(db)) ** 2)
        errs["frechet_gaussian"] = abs(gaussian_frechet(mu, np.diag(da), np.zeros(3), np.diag(db)) - want)
        d["info"] = " ".join(f"{k}={v:.0e}" for k, v in errs.items())
        assert max(v for k, v in errs.items() if k != "frechet_gaussian") < 1e-10
        assert errs["frechet_gaussian"] < 1e-6


# -- 9 ----------------------------------------------------------------------------------

TINY = {
    "corpus.size": "16", "corpus.count": "240", "corpus.holdout_fraction": "0.5",
    "schedule.T": "4", "denoiser.widths": "8,8,8", "denoiser.steps": "4", "denoiser.batch_size": "4",
    "denoiser.checkpoint_every": "2", "encoders.dim": "8", "encoders.pretrain_steps": "3",
    "encoders.pretrain_batch_size": "8", "encoders.finetune_steps": "3", "encoders.finetune_batch_size": "8",
    "encoders.checkpoint_every": "2", "sampler.n": "2", "eval.scales": "0,50", "eval.n_per_scale": "2",
    "eval.ref_count": "1",
}


def _run_all_commands(root: Path, cfg: Path):
    c = ["--config", str(cfg)]
    ref = str(root / "corpus" / "images" / "000239.ppm")
    steps = [
        c + ["--out", str(root / "corpus"), "gen-corpus"],
        c + ["--out", str(root / "den"), "train", "--corpus", str(root / "corpus")],
        c + ["--out", str(root / "pre"), "pretrain-encoder", "--corpus", str(root / "corpus")],
        c + ["--out", str(root / "enc"), "finetune-encoder", "--corpus", str(root / "corpus"),
             "--encoder", str(root / "pre" / "encoder_pretrained.ckpt")],
        c + ["--out", str(root / "smp"), "sample", "--denoiser", str(root / "den" / "denoiser.ckpt"),
             "--encoder", str(root / "enc" / "encoder.ckpt"), "--ref-image", ref, "--mode", "structure"],
        c + ["--out", str(root / "ev"), "eval", "--generated", str(root / "smp"),
             "--encoder", str(root / "enc" / "encoder.ckpt"), "--corpus", str(root / "corpus")],
        c + ["--out", str(root / "ab"), "ablate", "--denoiser", str(root / "den" / "denoiser.ckpt"),
             "--encoder", str(root / "enc" / "encoder.ckpt"), "--corpus", str(root / "corpus")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv


def test_9_determinism(tmp_path):
    with criterion(9, "reruns reproduce byte-identical artifacts") as d:
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text(RunConfig(TINY).resolved())
        run = tmp_path / "run"
        _run_all_commands(run, cfg)
        shutil.copytree(run, tmp_path / "first")
        shutil.rmtree(run)
        _run_all_commands(run, cfg)
        files = sorted(p.relative_to(run) for p in run.rglob("*") if p.is_file())
        before = sorted(p.relative_to(tmp_path / "first") for p in (tmp_path / "first").rglob("*") if p.is_file())
        differ = [str(p) for p in files if not filecmp.cmp(run / p, tmp_path / "first" / p, shallow=False)]
        d["info"] = f"{len(files) - len(differ)}/{len(files)} files identical across 7 commands"
        assert files == before and not differ, differ[:5]
