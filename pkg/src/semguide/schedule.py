"""Linear noise schedule and the closed-form forward-process quantities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables indexed by ``t`` in ``1..T`` (index 0 is unused padding
    holding the ``t = 0`` convention ``alpha_bar = 1``)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    def check_t(self, t: int, allow_zero: bool = False):
        lo = 0 if allow_zero else 1
        if not (lo <= int(t) <= self.T):
            raise ValueError(f"timestep {t} out of range [{lo}, {self.T}]")

    def reverse_var(self, t: int) -> float:
        """Variance of the reverse step at ``t``.

        The true posterior variance vanishes at ``t = 1``; there the step
        falls back to ``beta_1`` so the variance stays strictly positive.
        """
        self.check_t(t)
        return float(self.posterior_var[t]) if t > 1 else float(self.beta[1])


def build_schedule(kind: str = "linear", T: int = 200, beta_start: float = 1e-4,
                   beta_end: float = 0.02) -> NoiseSchedule:
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r} (only 'linear')")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.empty(T + 1)
    beta[0] = 0.0
    beta[1:] = np.linspace(beta_start, beta_end, T) if T > 1 else beta_start
    alpha = 1.0 - beta
    alpha_bar = np.empty(T + 1)
    alpha_bar[0] = 1.0
    for t in range(1, T + 1):
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t]
    post = np.zeros(T + 1)
    post[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    for arr in (beta, alpha, alpha_bar, post):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar, post)


def q_sample(x0, t: int, eps, sched: NoiseSchedule) -> Tensor:
    """Noise ``x0`` to step ``t``: ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    sched.check_t(t)
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"q_sample: eps shape {eps.shape} != x0 shape {x0.shape}")
    ab = sched.alpha_bar[t]
    return x0 * np.sqrt(ab) + eps * np.sqrt(1.0 - ab)


def q_sample_batch(x0: np.ndarray, t: np.ndarray, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Vectorized :func:`q_sample` over a batch with one timestep per item."""
    t = np.asarray(t)
    ab = sched.alpha_bar[t].reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def reverse_moments(model, x_t, t: int, sched: NoiseSchedule):
    """Mean and variance of ``p(x_{t-1} | x_t)`` under an eps-predicting model.

    ``model`` is anything with ``predict_eps(x_t, t)``.
    """
    sched.check_t(t)
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    with T.no_grad():
        eps = model.predict_eps(x, t)
    if eps.shape != x.shape:
        raise ValueError(f"model output shape {eps.shape} != x_t shape {x.shape}")
    coef = sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t])
    mu = (x.data - coef * eps.data) / np.sqrt(sched.alpha[t])
    return Tensor(mu), sched.reverse_var(t)
