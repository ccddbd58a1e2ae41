"""Parameter containers, layer helpers and the Adam optimizer."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


def timestep_embedding(t, dim: int = 64) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps; returns ``[N, dim]``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Module:
    """Flat, ordered name -> parameter mapping.

    Subclasses register parameters with :meth:`add`; dotted names double as
    checkpoint keys.
    """

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        p = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_state_dict(self, state: dict, strict: bool = True):
        for name, p in self.params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name!r}")
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name!r}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- layer helpers ------------------------------------------------------
    def add_conv(self, name, cin, cout, k, rng, zero=False):
        fan_in = cin * k * k
        w = np.zeros((cout, cin, k, k)) if zero else rng.standard_normal((cout, cin, k, k)) * math.sqrt(1.0 / fan_in)
        self.add(f"{name}.w", w)
        self.add(f"{name}.b", np.zeros(cout))

    def add_linear(self, name, din, dout, rng, zero=False, bias=None):
        w = np.zeros((din, dout)) if zero else rng.standard_normal((din, dout)) * math.sqrt(1.0 / din)
        self.add(f"{name}.w", w)
        self.add(f"{name}.b", np.zeros(dout) if bias is None else bias)

    def conv(self, name, x, stride=1, padding=None):
        w = self.params[f"{name}.w"]
        if padding is None:
            padding = w.shape[-1] // 2
        return T.conv2d(x, w, self.params[f"{name}.b"], stride=stride, padding=padding)

    def linear(self, name, x):
        return x @ self.params[f"{name}.w"] + self.params[f"{name}.b"]


def round_to_float32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


class Adam:
    """Adam with global gradient-norm clipping.

    With ``float32_state`` every parameter and moment is rounded onto the
    float32 grid after each update, which makes checkpoint round trips exact
    and therefore resumed training bit-identical to uninterrupted training.
    """

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 clip_norm: Optional[float] = 1.0, float32_state: bool = True):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.float32_state = float32_state
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        if float32_state:
            for p in self.params:
                p.data = round_to_float32(p.data)

    def step(self) -> float:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        factor = 1.0
        if self.clip_norm is not None and gnorm > self.clip_norm:
            factor = self.clip_norm / (gnorm + 1e-12)
        self.step_count += 1
        bc1 = 1.0 - self.b1 ** self.step_count
        bc2 = 1.0 - self.b2 ** self.step_count
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = g * factor
            if self.weight_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            m = self.b1 * self.m[i] + (1.0 - self.b1) * g
            v = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.float32_state:
                m, v, p.data = round_to_float32(m), round_to_float32(v), round_to_float32(p.data)
            self.m[i], self.v[i] = m, v
            p.grad = None
        return gnorm

    def _check_names(self, names):
        if len(names) != len(self.m):
            raise ValueError(f"optimizer holds {len(self.m)} parameters, got {len(names)} names")

    def state(self, names: list[str]) -> "OrderedDict[str, np.ndarray]":
        self._check_names(names)
        out = OrderedDict()
        for name, m, v in zip(names, self.m, self.v):
            out[f"opt.m.{name}"] = m
            out[f"opt.v.{name}"] = v
        out["opt.step"] = np.array(float(self.step_count))
        return out

    def load_state(self, names: list[str], state: dict):
        self._check_names(names)
        for i, name in enumerate(names):
            self.m[i] = np.asarray(state[f"opt.m.{name}"], dtype=np.float64).reshape(self.m[i].shape)
            self.v[i] = np.asarray(state[f"opt.v.{name}"], dtype=np.float64).reshape(self.v[i].shape)
        self.step_count = int(np.asarray(state["opt.step"]).reshape(-1)[0])
