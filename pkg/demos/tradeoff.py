"""
Correctness against diversity
=============================

Raising the guidance scale pulls samples toward the reference: retrieval of
the reference improves while the samples become more alike. This runs a
small sweep on the trained models; the acceptance suite runs the full one.
Top-1 stays low here because the held-out negatives include near copies of
the reference, so watch top-5 as well.

    python demos/tradeoff.py artifacts
"""

import sys
from pathlib import Path

import numpy as np

from semguide.cli import load_denoiser, load_encoders, pick_negatives
from semguide.config import load_config
from semguide.corpus import holdout_split, load_corpus
from semguide.evaluation import ablation_sweep, format_table
from semguide.guidance import Content
from semguide.schedule import build_schedule

art = Path(sys.argv[1] if len(sys.argv) > 1 else "artifacts")
cfg = load_config(art / "denoiser" / "run-train.cfg")
sched = build_schedule(cfg["schedule.kind"], cfg["schedule.T"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])
model = load_denoiser(art / "denoiser" / "denoiser.ckpt", cfg)
clean, text, noised = load_encoders(art / "encoders" / "encoder.ckpt", cfg)

_, test = holdout_split(load_corpus(art / "corpus"), cfg["corpus.holdout_fraction"], cfg["corpus.split_seed"])
ref = test.images[0]
negatives = pick_negatives(test.images, [ref], 1)

reports = ablation_sweep(cfg["eval.scales"], [Content(ref)], 8, model, sched, noised, clean, text, negatives)
print(format_table(reports))
