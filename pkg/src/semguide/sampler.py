"""Guided ancestral sampling.

Each reverse step computes the model's Gaussian ``N(mu, var I)`` and, when
guidance is present, shifts its mean by ``s * var * grad F(x_t)`` before
drawing ``x_{t-1}``. The last step returns the mean without added noise.

Every sample owns three random streams derived from its seed: the initial
noise, the per-step model noise and the guidance (reference perturbation)
stream. Guidance never touches the other two, so a zero-scale run
reproduces the unguided run bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .guidance import RefNoise, guidance_gradient, validate_spec
from .schedule import NoiseSchedule, reverse_moments
from .tensor import Tensor

STREAM_INIT, STREAM_NOISE, STREAM_GUIDANCE = 0, 1, 2


@dataclass
class SamplerConfig:
    seed: int = 0
    scale: Optional[float] = None  # None: use the guidance spec's own scale
    record_trace: bool = False
    trace_stride: int = 10
    clamp_final: bool = True
    ref_noise: str = "fresh"

    def __post_init__(self):
        if self.trace_stride < 1:
            raise ValueError(f"trace_stride must be >= 1, got {self.trace_stride}")
        if self.scale is not None and not (self.scale >= 0):
            raise ValueError(f"scale must be >= 0, got {self.scale}")


@dataclass
class TraceEntry:
    t: int
    x: np.ndarray
    value: float
    grad_norm: float


@dataclass
class SampleTrace:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def to_text(self) -> str:
        lines = ["# t F grad_norm"]
        for e in self.entries:
            lines.append(f"{e.t} {e.value:.10g} {e.grad_norm:.10g}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def streams(seed: int):
    """The (init, model-noise, guidance) generators of one sample."""
    return tuple(np.random.default_rng([int(seed), k]) for k in (STREAM_INIT, STREAM_NOISE, STREAM_GUIDANCE))


def shifted_step(mu, var: float, g, s: float, z) -> np.ndarray:
    """Draw from ``N(mu + s * var * g, var I)`` given a standard normal ``z``."""
    mu = np.asarray(mu.data if isinstance(mu, Tensor) else mu)
    z = np.asarray(z.data if isinstance(z, Tensor) else z)
    mean = mu if g is None else mu + s * var * np.asarray(g)
    return mean + math.sqrt(var) * z


def sdg_sample(model, sched: NoiseSchedule, spec=None, cfg: SamplerConfig = SamplerConfig(),
               enc=None, text_enc=None):
    """Run the reverse chain from ``x_T ~ N(0, I)``; returns ``(image, trace)``."""
    if spec is not None:
        validate_spec(spec)
        if enc is None:
            raise ValueError("guided sampling needs a time-conditioned encoder")
    s = None if spec is None else (spec.scale if cfg.scale is None else cfg.scale)
    rng_init, rng_noise, rng_guide = streams(cfg.seed)
    ref_noise = RefNoise(rng_guide, cfg.ref_noise)
    shape = tuple(model.image_shape)
    x = rng_init.standard_normal(shape)
    trace = SampleTrace()
    for t in range(sched.T, 0, -1):
        value, g = float("nan"), None
        try:
            with np.errstate(over="raise", invalid="raise"):
                mu, var = reverse_moments(model, x, t, sched)
                if spec is not None:
                    value, g = guidance_gradient(spec, x, t, enc, text_enc, ref_noise, sched)
        except FloatingPointError as exc:
            raise FloatingPointError(
                f"overflow at reverse step t={t}; guidance scale {s} is likely too large") from exc
        z = rng_noise.standard_normal(shape)
        if t > 1:
            x_next = shifted_step(mu, var, g, s, z)
        else:
            x_next = shifted_step(mu, var, g, s, np.zeros(shape))
        if not np.all(np.isfinite(x_next)):
            raise FloatingPointError(
                f"non-finite values at reverse step t={t}; guidance scale {s} is likely too large")
        if cfg.record_trace and (t % cfg.trace_stride == 0 or t == 1):
            gnorm = 0.0 if g is None else float(np.sqrt((g * g).sum()))
            trace.entries.append(TraceEntry(t, x.copy(), value, gnorm))
        x = x_next
    if cfg.clamp_final:
        x = np.clip(x, -1.0, 1.0)
    return x, trace


def batch_sample(n: int, model, sched: NoiseSchedule, spec=None, cfg: SamplerConfig = SamplerConfig(),
                 enc=None, text_enc=None, order=None):
    """``n`` independent samples with seeds ``cfg.seed + i``.

    ``order`` permutes execution order only; results are returned by index.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    order = range(n) if order is None else order
    images: list = [None] * n
    traces: list = [None] * n
    for i in order:
        sub = SamplerConfig(seed=cfg.seed + i, scale=cfg.scale, record_trace=cfg.record_trace,
                            trace_stride=cfg.trace_stride, clamp_final=cfg.clamp_final,
                            ref_noise=cfg.ref_noise)
        images[i], traces[i] = sdg_sample(model, sched, spec, sub, enc, text_enc)
    return images, traces
