"""Joint text/image embedding models.

``TextEncoder`` and ``CleanEncoder`` are trained together on captioned
images with a symmetric contrastive loss. ``TimeConditionedEncoder`` copies
the clean trunk, swaps each normalization for a timestep-conditioned one and
is finetuned so that embeddings of noised images line up with the frozen
clean embeddings of their sources. No captions are used for that step.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .corpus import BACKGROUNDS, COLORS, SHAPES, SIZES, CaptionedCorpus
from .nn import Adam, Module, timestep_embedding
from .schedule import NoiseSchedule, q_sample_batch
from .tensor import Tensor

logger = logging.getLogger(__name__)

TEMB_DIM = 64
TRUNK_WIDTHS = (16, 32, 64)
TRUNK_STRIDES = (1, 2, 2)
VOCAB = ("<unk>", "a", "on", "background", "with", "the", "an", "of", "shape",
         *SIZES, *COLORS, *SHAPES, *BACKGROUNDS)
UNK = 0


def tokenize(text: str) -> list[int]:
    lookup = {w: i for i, w in enumerate(VOCAB)}
    return [lookup.get(w, UNK) for w in re.findall(r"[a-z<>]+", text.lower())]


class TextEncoder(Module):
    """Bag-of-words text encoder: mean-pooled token embeddings through an MLP."""

    def __init__(self, dim: int = 32, token_dim: int = 32, hidden: int = 64, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng([seed, 1])
        self.dim = dim
        self.add("embed", rng.standard_normal((len(VOCAB), token_dim)) * 0.5)
        self.add_linear("t1", token_dim, hidden, rng)
        self.add_linear("t2", hidden, dim, rng)

    def encode_tokens(self, batch: Sequence[Sequence[int]]) -> Tensor:
        if any(len(toks) == 0 for toks in batch):
            raise ValueError("cannot encode an empty token sequence")
        V = len(VOCAB)
        pool = np.zeros((len(batch), V))
        for i, toks in enumerate(batch):
            for tok in toks:
                pool[i, tok] += 1.0 / len(toks)
        h = Tensor(pool) @ self.params["embed"]
        h = self.linear("t2", T.silu(self.linear("t1", h)))
        return T.l2_normalize(h, axis=-1)

    def encode(self, texts: Sequence[str]) -> Tensor:
        return self.encode_tokens([tokenize(s) for s in texts])


def encode_text(enc: TextEncoder, text) -> Tensor:
    """Unit embedding ``[D]`` of one text (string or token id sequence)."""
    toks = tokenize(text) if isinstance(text, str) else list(text)
    if not toks:
        raise ValueError("cannot encode an empty token sequence")
    with T.no_grad():
        emb = enc.encode_tokens([toks])
    return Tensor(emb.data[0])


class _Trunk(Module):
    """Three conv stages (each conv -> norm -> SiLU) then pool and MLP head."""

    time_conditioned = False

    def __init__(self, dim: int = 32, in_ch: int = 3, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng([seed, 2])
        self.dim = dim
        cin = in_ch
        for j, (c, s) in enumerate(zip(TRUNK_WIDTHS, TRUNK_STRIDES)):
            self.add_conv(f"conv{j}", cin, c, 3, rng)
            cin = c
        self.add_linear("h1", cin, cin, rng)
        self.add_linear("h2", cin, dim, rng)

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(range(len(TRUNK_WIDTHS)))

    def _norm(self, j: int, h: Tensor, emb: Optional[Tensor]) -> Tensor:
        return T.normalize_spatial(h)

    def forward(self, x: Tensor, t=None):
        emb = None
        if self.time_conditioned:
            tt = np.broadcast_to(np.asarray(0 if t is None else t), (x.shape[0],))
            emb = Tensor(timestep_embedding(tt, TEMB_DIM))
        feats = []
        h = x
        for j, s in enumerate(TRUNK_STRIDES):
            h = T.silu(self._norm(j, self.conv(f"conv{j}", h, stride=s), emb))
            feats.append(h)
        pooled = h.mean(axis=(2, 3))
        z = self.linear("h2", T.silu(self.linear("h1", pooled)))
        return T.l2_normalize(z, axis=-1), feats

    def encode(self, x, t=None):
        """Return ``(embedding, features)`` for ``[C,H,W]`` or ``[N,C,H,W]`` input."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim not in (3, 4) or x.shape[-3] != 3:
            raise ValueError(f"encoder expects [3,H,W] or [N,3,H,W] images, got {x.shape}")
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        z, feats = self.forward(x, t)
        if single:
            z = z.reshape(z.shape[1:])
            feats = [f.reshape(f.shape[1:]) for f in feats]
        return z, feats

    def embed(self, images: np.ndarray, t=None, batch: int = 256) -> np.ndarray:
        """Embeddings of an image array without recording gradients."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch):
                tt = t if np.ndim(t) == 0 else np.asarray(t)[i:i + batch]
                out.append(self.forward(Tensor(images[i:i + batch]), tt)[0].data)
        return np.concatenate(out, axis=0)


class CleanEncoder(_Trunk):
    """Image encoder for clean images; normalization has no learned affine."""


class TimeConditionedEncoder(_Trunk):
    """Image encoder for noised images with timestep-conditioned normalization."""

    time_conditioned = True

    def __init__(self, dim: int = 32, in_ch: int = 3, seed: int = 0):
        super().__init__(dim, in_ch, seed)
        for j, c in enumerate(TRUNK_WIDTHS):
            # identity affine at initialization: scale 1, shift 0 for every t
            self.add_linear(f"ada{j}", TEMB_DIM, 2 * c, None, zero=True,
                            bias=np.concatenate([np.ones(c), np.zeros(c)]))

    def _norm(self, j, h, emb):
        return T.adaptive_norm(h, emb, self.params[f"ada{j}.w"], self.params[f"ada{j}.b"])

    def adaptive_parameter_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("ada")]

    @classmethod
    def from_clean(cls, clean: CleanEncoder) -> "TimeConditionedEncoder":
        enc = cls(dim=clean.dim)
        enc.load_state_dict(clean.state_dict(), strict=False)
        return enc


def encode_image(enc: _Trunk, x_t, t: int = 0):
    """``(unit embedding, [feature map per layer])`` of one image at timestep ``t``."""
    return enc.encode(x_t, t)


# -- contrastive objective ----------------------------------------------------------

def contrastive_loss(a: Tensor, b: Tensor, temperature: float = 0.07) -> Tensor:
    """Symmetric in-batch InfoNCE between matched rows of ``a`` and ``b``."""
    n = a.shape[0]
    if n < 2:
        raise ValueError(f"contrastive loss needs batch size >= 2, got {n}")
    logits = (a @ b.T) * (1.0 / temperature)
    diag = (np.arange(n), np.arange(n))
    l_ab = -T.log_softmax(logits, axis=1)[diag].mean()
    l_ba = -T.log_softmax(logits.T, axis=1)[diag].mean()
    return (l_ab + l_ba) * 0.5


@dataclass
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-3
    temperature: float = 0.07
    caption_dropout: float = 0.3
    seed: int = 0
    dim: int = 32


@dataclass
class FinetuneConfig:
    steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-3
    temperature: float = 0.07
    seed: int = 0


def _augment_caption(caption: str, rng: np.random.Generator, p: float) -> str:
    words = caption.split()
    size, color, shape, bg = words[1], words[2], words[3], words[6]
    keep_size = rng.random() >= p
    keep_bg = rng.random() >= p
    parts = ["a"] + ([size] if keep_size else []) + [color, shape]
    if keep_bg:
        parts += ["on", "a", bg, "background"]
    return " ".join(parts)


def pretrain_dual_encoder(corpus: CaptionedCorpus, cfg: PretrainConfig = PretrainConfig(),
                          on_step: Optional[Callable] = None, resume: Optional[tuple] = None,
                          start_step: int = 0):
    """Train ``(CleanEncoder, TextEncoder)`` contrastively on (image, caption) pairs.

    ``resume = (clean, text, opt)`` with ``start_step`` continues a run;
    ``on_step(step, loss, clean, text, opt)`` is called after every update.
    """
    if cfg.batch_size < 2:
        raise ValueError(f"contrastive training needs batch size >= 2, got {cfg.batch_size}")
    if len(corpus) < 2:
        raise ValueError("contrastive training needs at least two image/caption pairs")
    if resume is None:
        clean, text, opt = new_pretrain_state(cfg)
    else:
        clean, text, opt = resume
    captions = corpus.captions
    for step in range(start_step, cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        idx = rng.choice(len(corpus), size=min(cfg.batch_size, len(corpus)), replace=False)
        caps = [_augment_caption(captions[i], rng, cfg.caption_dropout) for i in idx]
        zi, _ = clean.forward(Tensor(corpus.images[idx]))
        zt = text.encode(caps)
        loss = contrastive_loss(zi, zt, cfg.temperature)
        T.backward(loss)
        opt.step()
        if on_step is not None:
            on_step(step, float(loss.data), clean, text, opt)
        if step % 100 == 0:
            logger.info("pretrain step %d loss %.4f", step, float(loss.data))
    return clean, text


def new_pretrain_state(cfg: PretrainConfig):
    clean = CleanEncoder(dim=cfg.dim, seed=cfg.seed)
    text = TextEncoder(dim=cfg.dim, seed=cfg.seed)
    opt = Adam(clean.parameters() + text.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
               clip_norm=1.0, float32_state=True)
    return clean, text, opt


def new_finetune_state(clean: CleanEncoder, cfg: FinetuneConfig):
    noised = TimeConditionedEncoder.from_clean(clean)
    opt = Adam(noised.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=1.0)
    return noised, opt


def finetune_noised_encoder(clean: CleanEncoder, images: np.ndarray, sched: NoiseSchedule,
                            cfg: FinetuneConfig = FinetuneConfig(),
                            on_step: Optional[Callable] = None, resume: Optional[tuple] = None,
                            start_step: int = 0) -> TimeConditionedEncoder:
    """Align noised-image embeddings with the frozen clean embeddings.

    Per batch every image gets its own ``t_i ~ U{1..T}``; the noised encoder
    sees ``x_{t_i}`` and is contrasted against ``clean(x_0)`` with in-batch
    negatives. Only the noised encoder is updated.
    """
    if cfg.batch_size < 2:
        raise ValueError(f"contrastive finetuning needs batch size >= 2, got {cfg.batch_size}")
    images = np.asarray(images, dtype=np.float64)
    if len(images) < 2:
        raise ValueError("finetuning needs at least two images")
    noised, opt = new_finetune_state(clean, cfg) if resume is None else resume
    for step in range(start_step, cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        idx = rng.choice(len(images), size=min(cfg.batch_size, len(images)), replace=False)
        x0 = images[idx]
        t = rng.integers(1, sched.T + 1, size=len(idx))
        eps = rng.standard_normal(x0.shape)
        x_t = q_sample_batch(x0, t, eps, sched)
        with T.no_grad():
            target, _ = clean.forward(Tensor(x0))
        z, _ = noised.forward(Tensor(x_t), t)
        loss = contrastive_loss(z, Tensor(target.data), cfg.temperature)
        T.backward(loss)
        opt.step()
        if on_step is not None:
            on_step(step, float(loss.data), noised, opt)
        if step % 100 == 0:
            logger.info("finetune step %d loss %.4f", step, float(loss.data))
    return noised


# -- retrieval diagnostics ----------------------------------------------------------------

def caption_retrieval_top1(clean: CleanEncoder, text: TextEncoder, corpus: CaptionedCorpus,
                           batch: int = 64) -> float:
    """Caption -> image top-1 within consecutive batches.

    A hit is an image whose caption equals the query caption: identical
    captions are indistinguishable to the text side.
    """
    captions = corpus.captions
    hits, total = 0, 0
    for start in range(0, len(corpus) - batch + 1, batch):
        sl = slice(start, start + batch)
        zi = clean.embed(corpus.images[sl])
        with T.no_grad():
            zt = text.encode(captions[sl]).data
        best = np.argmax(zt @ zi.T, axis=1)
        caps = captions[sl]
        hits += sum(caps[j] == caps[i] for i, j in enumerate(best))
        total += batch
    return hits / max(total, 1)


def noised_retrieval_top1(clean: CleanEncoder, noised: TimeConditionedEncoder, images: np.ndarray,
                          sched: NoiseSchedule, t: int, batch: int = 64, seed: int = 0) -> float:
    """In-batch instance retrieval: does ``noised(x_t)`` pick ``clean(x_0)`` of its own source?"""
    rng = np.random.default_rng([seed, t])
    hits, total = 0, 0
    for start in range(0, len(images) - batch + 1, batch):
        x0 = images[start:start + batch]
        eps = rng.standard_normal(x0.shape)
        x_t = q_sample_batch(x0, np.full(len(x0), t), eps, sched)
        keys = clean.embed(x0)
        queries = noised.embed(x_t, t)
        best = np.argmax(queries @ keys.T, axis=1)
        hits += int((best == np.arange(len(x0))).sum())
        total += len(x0)
    return hits / max(total, 1)
