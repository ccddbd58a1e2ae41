"""Unconditional eps-prediction network and its training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .nn import Adam, Module, timestep_embedding
from .schedule import NoiseSchedule, q_sample_batch
from .tensor import Tensor

logger = logging.getLogger(__name__)

TEMB_DIM = 64


class EpsilonModel(Module):
    """Three-resolution encoder-decoder with skip connections.

    Timestep information enters through adaptive normalization layers whose
    scale and shift are predicted from a sinusoidal embedding.
    """

    def __init__(self, image_shape=(3, 32, 32), widths=(32, 64, 64), seed: int = 0):
        super().__init__()
        C, H, W = image_shape
        if H % 4 or W % 4:
            raise ValueError(f"image height/width must be divisible by 4, got {H}x{W}")
        self.image_shape = tuple(int(v) for v in image_shape)
        self.widths = tuple(int(v) for v in widths)
        w0, w1, w2 = self.widths
        rng = np.random.default_rng(seed)
        hid = 2 * TEMB_DIM
        self.add_linear("temb1", TEMB_DIM, hid, rng)
        self.add_linear("temb2", hid, hid, rng)
        self._norms = {}

        self.add_conv("conv_in", C, w0, 3, rng)
        self._single("b0", w0, rng)
        self.add_conv("down0", w0, w1, 3, rng)
        self._block("b1", w1, w1, rng)
        self.add_conv("down1", w1, w2, 3, rng)
        self._block("b2", w2, w2, rng)
        self.add_conv("merge1", w2 + w1, w1, 1, rng)
        self._block("b3", w1, w1, rng)
        self.add_conv("merge0", w1 + w0, w0, 1, rng)
        self._single("b4", w0, rng)
        self._norm("nout", w0, rng)
        self.add_conv("out", w0, C, 3, rng, zero=True)

    # -- construction helpers ---------------------------------------------------
    def _norm(self, name, ch, rng):
        self.add_linear(name, 2 * TEMB_DIM, 2 * ch, rng, zero=True,
                        bias=np.concatenate([np.ones(ch), np.zeros(ch)]))

    def _single(self, name, ch, rng):
        self._norm(f"{name}.n1", ch, rng)
        self.add_conv(f"{name}.c1", ch, ch, 3, rng)

    def _block(self, name, cin, cout, rng):
        self._norm(f"{name}.n1", cin, rng)
        self.add_conv(f"{name}.c1", cin, cout, 3, rng)
        self._norm(f"{name}.n2", cout, rng)
        self.add_conv(f"{name}.c2", cout, cout, 3, rng)
        if cin != cout:
            self.add_conv(f"{name}.skip", cin, cout, 1, rng)

    # -- forward ----------------------------------------------------------------
    def _adanorm(self, name, x, emb):
        return T.adaptive_norm(x, emb, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _single_fwd(self, name, x, emb):
        return x + self.conv(f"{name}.c1", T.silu(self._adanorm(f"{name}.n1", x, emb)))

    def _block_fwd(self, name, x, emb):
        h = self.conv(f"{name}.c1", T.silu(self._adanorm(f"{name}.n1", x, emb)))
        h = self.conv(f"{name}.c2", T.silu(self._adanorm(f"{name}.n2", h, emb)))
        skip = self.conv(f"{name}.skip", x) if f"{name}.skip.w" in self.params else x
        return h + skip

    def forward(self, x: Tensor, t) -> Tensor:
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        emb = Tensor(timestep_embedding(t, TEMB_DIM))
        emb = T.silu(self.linear("temb2", T.silu(self.linear("temb1", emb))))

        h0 = self._single_fwd("b0", self.conv("conv_in", x), emb)
        h1 = self._block_fwd("b1", self.conv("down0", h0, stride=2), emb)
        h2 = self._block_fwd("b2", self.conv("down1", h1, stride=2), emb)
        u1 = self.conv("merge1", T.concat([T.upsample2x(h2), h1], axis=1))
        u1 = self._block_fwd("b3", u1, emb)
        u0 = self.conv("merge0", T.concat([T.upsample2x(u1), h0], axis=1))
        u0 = self._single_fwd("b4", u0, emb)
        return self.conv("out", T.silu(self._adanorm("nout", u0, emb)))

    def predict_eps(self, x_t, t) -> Tensor:
        """Predict the noise in ``x_t`` (``[C,H,W]`` or ``[N,C,H,W]``)."""
        x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        if tuple(x.shape[1:]) != self.image_shape:
            raise ValueError(f"x_t shape {tuple(x.shape[1:])} does not match model shape {self.image_shape}")
        out = self.forward(x, t)
        return out.reshape(out.shape[1:]) if single else out


@dataclass
class TrainConfig:
    steps: int = 6000
    lr: float = 2e-4
    batch_size: int = 16
    seed: int = 0
    grad_clip: float = 1.0


def denoiser_loss(model: EpsilonModel, x0: np.ndarray, t: np.ndarray, eps: np.ndarray,
                  sched: NoiseSchedule) -> Tensor:
    x_t = q_sample_batch(x0, t, eps, sched)
    pred = model.forward(Tensor(x_t), t)
    diff = pred - Tensor(eps)
    return (diff * diff).mean()


def step_batch(images: np.ndarray, sched: NoiseSchedule, batch_size: int, seed: int, step: int):
    """Draw the (x0, t, eps) batch for one training step; depends only on (seed, step)."""
    rng = np.random.default_rng([seed, step])
    idx = rng.integers(0, len(images), size=batch_size)
    t = rng.integers(1, sched.T + 1, size=batch_size)
    eps = rng.standard_normal((batch_size,) + images.shape[1:])
    return images[idx], t, eps


def train_denoiser(images: np.ndarray, sched: NoiseSchedule, cfg: TrainConfig,
                   model: Optional[EpsilonModel] = None, opt: Optional[Adam] = None,
                   start_step: int = 0,
                   on_step: Optional[Callable[[int, float, EpsilonModel, Adam], None]] = None
                   ) -> EpsilonModel:
    """Minimize ``E||eps - eps_theta(q_sample(x0, t, eps), t)||^2`` with uniform ``t``.

    ``images`` is ``[M,C,H,W]`` in ``[-1, 1]``. Passing ``model``/``opt`` and
    ``start_step`` continues an interrupted run.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("train_denoiser needs a nonempty [M,C,H,W] image array")
    if model is None:
        model = EpsilonModel(images.shape[1:], seed=cfg.seed)
    if opt is None:
        opt = Adam(model.parameters(), lr=cfg.lr, clip_norm=cfg.grad_clip)
    for step in range(start_step, cfg.steps):
        x0, t, eps = step_batch(images, sched, cfg.batch_size, cfg.seed, step)
        loss = denoiser_loss(model, x0, t, eps, sched)
        T.backward(loss)
        opt.step()
        lv = float(loss.data)
        if not np.isfinite(lv):
            raise FloatingPointError(f"non-finite training loss at step {step}")
        if on_step is not None:
            on_step(step, lv, model, opt)
        if step % 100 == 0:
            logger.info("denoiser step %d loss %.5f", step, lv)
    return model
