"""Checks that need the trained default models (see the ``trained`` fixture)."""

import numpy as np
import pytest

from conftest import DEFAULT_CFG
from semguide import tensor as T
from semguide.cli import load_denoiser, load_encoders
from semguide.config import load_config
from semguide.corpus import Attributes, dominant_color, holdout_split, load_corpus, render
from semguide.encoders import caption_retrieval_top1, encode_text
from semguide.guidance import Content, Language, content_guidance
from semguide.sampler import SamplerConfig, batch_sample
from semguide.schedule import build_schedule


@pytest.fixture(scope="module")
def setup(trained):
    cfg = load_config(DEFAULT_CFG)
    sched = build_schedule(cfg["schedule.kind"], cfg["schedule.T"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])
    _, test = holdout_split(load_corpus(trained / "corpus"), cfg["corpus.holdout_fraction"], cfg["corpus.split_seed"])
    clean, text, noised = load_encoders(trained / "encoders" / "encoder.ckpt", cfg)
    model = load_denoiser(trained / "denoiser" / "denoiser.ckpt", cfg)
    return cfg, sched, test, clean, text, noised, model


def test_caption_retrieval_on_held_out_batches(setup):
    _, _, test, clean, text, _, _ = setup
    assert caption_retrieval_top1(clean, text, test, batch=64) > 0.9


def test_text_prefers_matching_image(setup):
    _, _, _, clean, text, _, _ = setup
    query = encode_text(text, "red square").data
    red_square = clean.embed(render(Attributes("square", "red", "large", "dark"), 16.0, 16.0, 0.3))[0]
    blue_circle = clean.embed(render(Attributes("circle", "blue", "large", "dark"), 16.0, 16.0, 0.3))[0]
    assert query @ red_square > query @ blue_circle


@pytest.mark.xfail(strict=True, reason="measured about 0.7 after finetuning; see the decisions ledger")
def test_finetuned_encoder_agrees_with_clean_at_t0(setup):
    _, _, test, clean, _, noised, _ = setup
    cos = np.sum(noised.embed(test.images, 0) * clean.embed(test.images), axis=1)
    assert cos.mean() > 0.9


def test_unconditional_samples_in_range(setup):
    _, sched, _, _, _, _, model = setup
    images, _ = batch_sample(2, model, sched, None, SamplerConfig(seed=3))
    assert all(img.min() >= -1.0 and img.max() <= 1.0 for img in images)


def _mean_cosine(clean, images, ref):
    emb = clean.embed(np.stack(images))
    return float((emb @ clean.embed(ref)[0]).mean())


def test_content_guidance_moves_samples_toward_reference(setup):
    cfg, sched, test, clean, text, noised, model = setup
    ref = test.images[0]
    scfg = SamplerConfig(seed=100)
    plain, _ = batch_sample(16, model, sched, None, scfg)
    guided, _ = batch_sample(16, model, sched, Content(ref, cfg["eval.content_scale"]), scfg, noised, text)
    assert _mean_cosine(clean, guided, ref) >= _mean_cosine(clean, plain, ref) + 0.1


def test_guidance_value_monotone_in_scale(setup):
    cfg, sched, test, clean, text, noised, model = setup
    ref = test.images[1]
    s = cfg["eval.content_scale"]
    means = []
    for scale in (0.0, s / 2, s):
        finals, _ = batch_sample(8, model, sched, Content(ref, scale), SamplerConfig(seed=200), noised, text)
        with T.no_grad():
            means.append(np.mean([float(content_guidance(x, ref, 0, noised, None, sched).data) for x in finals]))
    assert means[0] <= means[1] <= means[2]


@pytest.mark.xfail(strict=True, reason="2 of 16 red at scale 120; see the decisions ledger")
def test_red_square_text_guidance_gives_red_samples(setup):
    cfg, sched, _, _, text, noised, model = setup
    images, _ = batch_sample(16, model, sched, Language("a red square", 120.0), SamplerConfig(seed=cfg["sampler.seed"]),
                             noised, text)
    assert sum(dominant_color(img) == "red" for img in images) >= 12
