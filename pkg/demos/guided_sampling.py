"""
Steering a trained diffusion model
==================================

Loads the models trained by the CLI pipeline (see the README) and draws
samples from the same seeds with no guidance, language guidance, and the
three image guidance modes. Each row of the output sheet is one kind of
guidance; each column one seed.

Useful scales differ by mode. Structure and style gradients are large, so
a scale near 100 already pins layout or texture; content and language
gradients are weak at this model size and need scales in the thousands.

    python demos/guided_sampling.py artifacts demo_out
"""

import sys
from pathlib import Path

import numpy as np

from semguide.cli import load_denoiser, load_encoders
from semguide.config import load_config
from semguide.corpus import load_corpus
from semguide.guidance import Content, Language, Structure, Style
from semguide.io import write_ppm
from semguide.sampler import SamplerConfig, batch_sample
from semguide.schedule import build_schedule

art = Path(sys.argv[1] if len(sys.argv) > 1 else "artifacts")
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out")
out.mkdir(exist_ok=True)

cfg = load_config(art / "denoiser" / "run-train.cfg")
sched = build_schedule(cfg["schedule.kind"], cfg["schedule.T"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])
model = load_denoiser(art / "denoiser" / "denoiser.ckpt", cfg)
clean, text, noised = load_encoders(art / "encoders" / "encoder.ckpt", cfg)

corpus = load_corpus(art / "corpus")
ref = corpus.images[-1]
print("reference:", corpus.captions[-1])

n = 4
rows = {
    "none": None,
    "text": Language("a large blue circle on a light background", 3000.0),
    "content": Content(ref, cfg["eval.content_scale"]),
    "structure": Structure(ref, scale=cfg["eval.structure_scale"]),
    "style": Style(ref, scale=cfg["guidance.image_scale"]),
}
sheet = []
for name, spec in rows.items():
    images, _ = batch_sample(n, model, sched, spec, SamplerConfig(seed=0), noised, text)
    print("%-9s done" % name)
    sheet.append(np.concatenate([ref if name != "none" else np.zeros_like(ref)] + images, axis=2))
write_ppm(out / "guided_sheet.ppm", np.concatenate(sheet, axis=1))
