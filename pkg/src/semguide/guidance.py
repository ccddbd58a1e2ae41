"""Guidance functions F(x_t, y, t) and their gradients with respect to x_t.

Language and content guidance are dot products of unit embeddings (so they
lie in [-1, 1]); structure and style guidance are negative squared feature
or Gram distances (so they are <= 0, and 0 exactly at feature identity).
Reference images are stored clean and noised to the current step inside
every evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .encoders import TextEncoder, TimeConditionedEncoder, encode_text
from .schedule import NoiseSchedule, q_sample
from .tensor import Tensor

DEFAULT_TEXT_SCALE = 120.0
DEFAULT_IMAGE_SCALE = 100.0


@dataclass(eq=False)
class Language:
    text: str
    scale: float = DEFAULT_TEXT_SCALE


@dataclass(eq=False)
class Content:
    ref: np.ndarray
    scale: float = DEFAULT_IMAGE_SCALE


@dataclass(eq=False)
class Structure:
    ref: np.ndarray
    layers: Optional[tuple] = None
    scale: float = DEFAULT_IMAGE_SCALE


@dataclass(eq=False)
class Style:
    ref: np.ndarray
    layers: Optional[tuple] = None
    scale: float = DEFAULT_IMAGE_SCALE
    gram_norm: str = "chw"


@dataclass(eq=False)
class Composite:
    """Weighted sum of children; each child's ``scale`` is its weight."""

    children: Sequence = field(default_factory=tuple)
    scale: float = 1.0


GuidanceSpec = Union[Language, Content, Structure, Style, Composite]


def validate_spec(spec) -> None:
    if not isinstance(spec, (Language, Content, Structure, Style, Composite)):
        raise TypeError(f"not a guidance spec: {type(spec).__name__}")
    if not (spec.scale >= 0):
        raise ValueError(f"guidance scale must be >= 0, got {spec.scale}")
    if isinstance(spec, Composite):
        if len(spec.children) < 1:
            raise ValueError("composite guidance needs at least one child")
        for child in spec.children:
            validate_spec(child)
    if isinstance(spec, (Structure, Style)) and spec.layers is not None and len(spec.layers) == 0:
        raise ValueError("structure/style guidance needs a nonempty layer set")
    if isinstance(spec, Style) and spec.gram_norm not in ("chw", "none"):
        raise ValueError(f"gram_norm must be 'chw' or 'none', got {spec.gram_norm!r}")


class RefNoise:
    """Source of the noise used to perturb reference images.

    ``fresh`` draws new noise at every call; ``fixed`` draws once per
    reference key and reuses it for the rest of the run.
    """

    def __init__(self, rng: np.random.Generator, mode: str = "fresh"):
        if mode not in ("fresh", "fixed"):
            raise ValueError(f"reference noise mode must be 'fresh' or 'fixed', got {mode!r}")
        self.rng = rng
        self.mode = mode
        self._cache: dict = {}

    def draw(self, key, shape) -> np.ndarray:
        if self.mode == "fixed":
            if key not in self._cache:
                self._cache[key] = self.rng.standard_normal(shape)
            return self._cache[key]
        return self.rng.standard_normal(shape)


def _noise_source(rng) -> RefNoise:
    return rng if isinstance(rng, RefNoise) else RefNoise(rng)


def _as_input(x_t) -> Tensor:
    return x_t if isinstance(x_t, Tensor) else Tensor(x_t)


def perturb_reference(ref: np.ndarray, t: int, sched: NoiseSchedule, rng, key=0) -> np.ndarray:
    """``x'_t`` from the clean reference via the closed-form forward marginal.

    ``t = 0`` means clean input: the reference is returned as is.
    """
    ref = np.asarray(ref, dtype=np.float64)
    sched.check_t(t, allow_zero=True)
    if int(t) == 0:
        return ref.copy()
    eps = _noise_source(rng).draw(key, ref.shape)
    return q_sample(ref, t, eps, sched).data


def _check_layers(layers, enc) -> tuple:
    available = enc.layers
    if layers is None:
        return tuple(available)
    layers = tuple(layers)
    if not layers:
        raise ValueError("structure/style guidance needs a nonempty layer set")
    bad = [j for j in layers if j not in available]
    if bad:
        raise ValueError(f"layers {bad} not exposed by the encoder (available {available})")
    return layers


def _reference_features(ref, t, enc, rng, sched, key):
    ref_t = perturb_reference(ref, t, sched, rng, key)
    with T.no_grad():
        z, feats = enc.encode(ref_t, t)
    return Tensor(z.data), [Tensor(f.data) for f in feats]


def language_guidance(x_t, t: int, text_emb, enc: TimeConditionedEncoder) -> Tensor:
    """``E'(x_t, t) . E_L(text)``."""
    z, _ = enc.encode(_as_input(x_t), t)
    return T.tsum(z * text_emb)


def content_guidance(x_t, ref, t: int, enc: TimeConditionedEncoder, rng,
                     sched: NoiseSchedule, key=0) -> Tensor:
    """``E'(x_t, t) . E'(x'_t, t)`` with ``x'_t`` the noised reference."""
    z_ref, _ = _reference_features(ref, t, enc, rng, sched, key)
    z, _ = enc.encode(_as_input(x_t), t)
    return T.tsum(z * z_ref)


def structure_guidance(x_t, ref, t: int, layers, enc: TimeConditionedEncoder, rng,
                       sched: NoiseSchedule, key=0) -> Tensor:
    """``-sum_j mean((E'(x_t)_j - E'(x'_t)_j)^2)`` over the selected layers."""
    layers = _check_layers(layers, enc)
    _, ref_feats = _reference_features(ref, t, enc, rng, sched, key)
    _, feats = enc.encode(_as_input(x_t), t)
    total = None
    for j in layers:
        d = feats[j] - ref_feats[j]
        term = (d * d).mean()
        total = term if total is None else total + term
    return -total


def _gram(f: Tensor, gram_norm: str) -> Tensor:
    g = T.gram_matrix(f)
    if gram_norm == "none":
        return g * float(np.prod(f.shape[-3:]))
    return g


def style_guidance(x_t, ref, t: int, layers, enc: TimeConditionedEncoder, rng,
                   sched: NoiseSchedule, key=0, gram_norm: str = "chw") -> Tensor:
    """``-sum_j ||G(E'(x_t)_j) - G(E'(x'_t)_j)||_F^2`` over the selected layers."""
    layers = _check_layers(layers, enc)
    _, ref_feats = _reference_features(ref, t, enc, rng, sched, key)
    _, feats = enc.encode(_as_input(x_t), t)
    total = None
    for j in layers:
        d = _gram(feats[j], gram_norm) - Tensor(_gram(ref_feats[j], gram_norm).data)
        term = T.tsum(d * d)
        total = term if total is None else total + term
    return -total


def composite_guidance(children: Sequence[tuple[Callable, float]], x_t, t: int) -> Tensor:
    """``sum_k s_k F_k(x_t, t)`` for ``children = [(F_k, s_k), ...]``."""
    if len(children) < 1:
        raise ValueError("composite guidance needs at least one child")
    x = _as_input(x_t)
    total = None
    for fn, weight in children:
        term = fn(x, t) * float(weight)
        total = term if total is None else total + term
    return total


def guidance_value(spec, x_t, t: int, enc: TimeConditionedEncoder, text_enc: Optional[TextEncoder],
                   rng, sched: NoiseSchedule, _key=(0,)) -> Tensor:
    """Unscaled guidance value of ``spec`` at ``x_t`` (a differentiable scalar).

    For a composite the children are weighted by their own scales; the top
    level scale is left to the caller.
    """
    noise = _noise_source(rng)
    x = _as_input(x_t)
    if isinstance(spec, Language):
        if text_enc is None:
            raise ValueError("language guidance needs a text encoder")
        return language_guidance(x, t, encode_text(text_enc, spec.text), enc)
    if isinstance(spec, Content):
        return content_guidance(x, spec.ref, t, enc, noise, sched, key=_key)
    if isinstance(spec, Structure):
        return structure_guidance(x, spec.ref, t, spec.layers, enc, noise, sched, key=_key)
    if isinstance(spec, Style):
        return style_guidance(x, spec.ref, t, spec.layers, enc, noise, sched, key=_key,
                              gram_norm=spec.gram_norm)
    if isinstance(spec, Composite):
        children = [
            (lambda xx, tt, c=c, k=k: guidance_value(c, xx, tt, enc, text_enc, noise, sched, _key + (k,)),
             c.scale)
            for k, c in enumerate(spec.children)
        ]
        return composite_guidance(children, x, t)
    raise TypeError(f"not a guidance spec: {type(spec).__name__}")


def guidance_gradient(spec, x_t, t: int, enc: TimeConditionedEncoder, text_enc: Optional[TextEncoder],
                      rng, sched: NoiseSchedule) -> tuple[float, np.ndarray]:
    """Return ``(F, dF/dx_t)`` for the unscaled guidance of ``spec``."""
    validate_spec(spec)
    x = Tensor(np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t), requires_grad=True)
    value = guidance_value(spec, x, t, enc, text_enc, rng, sched)
    (g,) = T.grad(value, [x])
    return float(value.data), g
