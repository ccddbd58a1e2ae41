"""Run configuration: a flat ``section.key = value`` file.

A config file must name every key in ``DEFAULTS`` and nothing else, so the
file alone fully determines a run. ``resolved()`` renders the complete
config, which every command writes into its output directory.
"""

from __future__ import annotations

from collections import OrderedDict
from pathlib import Path
from typing import Optional

from .io import ConfigError, format_config, parse_config_text

# key -> (type, default); order is the order of the rendered file
DEFAULTS: "OrderedDict[str, tuple]" = OrderedDict([
    ("corpus.size", (int, 32)),
    ("corpus.count", (int, 4000)),
    ("corpus.seed", (int, 0)),
    ("corpus.position_jitter", (float, 1.0)),
    ("corpus.rotation_jitter", (float, 180.0)),
    ("corpus.supersample", (int, 4)),
    ("corpus.holdout_fraction", (float, 0.1)),
    ("corpus.split_seed", (int, 0)),
    ("schedule.kind", (str, "linear")),
    ("schedule.T", (int, 200)),
    ("schedule.beta_start", (float, 1e-4)),
    ("schedule.beta_end", (float, 0.02)),
    ("denoiser.widths", (tuple, (32, 64, 64))),
    ("denoiser.steps", (int, 6000)),
    ("denoiser.lr", (float, 2e-4)),
    ("denoiser.batch_size", (int, 16)),
    ("denoiser.grad_clip", (float, 1.0)),
    ("denoiser.seed", (int, 0)),
    ("denoiser.checkpoint_every", (int, 250)),
    ("encoders.dim", (int, 32)),
    ("encoders.seed", (int, 0)),
    ("encoders.temperature", (float, 0.07)),
    ("encoders.weight_decay", (float, 1e-3)),
    ("encoders.pretrain_steps", (int, 1500)),
    ("encoders.pretrain_batch_size", (int, 64)),
    ("encoders.pretrain_lr", (float, 1e-3)),
    ("encoders.caption_dropout", (float, 0.3)),
    ("encoders.finetune_steps", (int, 4000)),
    ("encoders.finetune_batch_size", (int, 64)),
    ("encoders.finetune_lr", (float, 1e-3)),
    ("encoders.checkpoint_every", (int, 250)),
    ("guidance.text_scale", (float, 120.0)),
    ("guidance.image_scale", (float, 100.0)),
    ("guidance.mode", (str, "content")),
    ("guidance.layers", (tuple, ())),
    ("guidance.gram_norm", (str, "chw")),
    ("guidance.ref_noise", (str, "fresh")),
    ("sampler.n", (int, 16)),
    ("sampler.seed", (int, 0)),
    ("sampler.clamp_final", (bool, True)),
    ("sampler.trace_stride", (int, 10)),
    ("eval.mode", (str, "content")),
    ("eval.scales", (tuple, (0.0, 1000.0, 3000.0))),
    ("eval.n_per_scale", (int, 16)),
    ("eval.ref_count", (int, 3)),
    ("eval.ref_seed", (int, 0)),
    ("eval.negatives_seed", (int, 1)),
    ("eval.seed", (int, 0)),
    ("eval.content_scale", (float, 3000.0)),
    ("eval.structure_scale", (float, 40.0)),
])

_CHOICES = {
    "schedule.kind": ("linear",),
    "guidance.mode": ("content", "structure", "style"),
    "guidance.gram_norm": ("chw", "none"),
    "guidance.ref_noise": ("fresh", "fixed"),
    "eval.mode": ("content", "structure", "style", "language"),
}

# the key that --seed overrides for each command
SEED_KEYS = {
    "gen-corpus": "corpus.seed",
    "train": "denoiser.seed",
    "pretrain-encoder": "encoders.seed",
    "finetune-encoder": "encoders.seed",
    "sample": "sampler.seed",
    "eval": "eval.seed",
    "ablate": "eval.seed",
}


def _parse_value(key: str, kind, raw: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is tuple:
            if raw.strip() in ("", "all"):
                return ()
            elem = int if key in ("denoiser.widths", "guidance.layers") else float
            return tuple(elem(v) for v in raw.split(","))
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {kind.__name__}") from None


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render_value(v) for v in value) if value else "all"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Fully resolved configuration; read values as ``cfg["section.key"]``."""

    def __init__(self, values: Optional[dict] = None):
        self.values = OrderedDict((k, d) for k, (_, d) in DEFAULTS.items())
        if values:
            for k, v in values.items():
                self[k] = v
        self.validate()

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key}")
        return self.values[key]

    def __setitem__(self, key: str, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key}")
        kind = DEFAULTS[key][0]
        self.values[key] = _parse_value(key, kind, value) if isinstance(value, str) else (
            tuple(value) if kind is tuple else kind(value))

    def validate(self) -> None:
        for key, allowed in _CHOICES.items():
            if self.values[key] not in allowed:
                raise ConfigError(f"config key {key}: {self.values[key]!r} not in {allowed}")
        for key in ("corpus.count", "corpus.size", "schedule.T", "denoiser.steps", "denoiser.batch_size",
                    "encoders.dim", "sampler.n", "eval.n_per_scale", "eval.ref_count"):
            if self.values[key] < 1:
                raise ConfigError(f"config key {key} must be >= 1, got {self.values[key]}")

    def section(self, name: str) -> dict:
        return {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(name + ".")}

    def resolved(self) -> str:
        return format_config(OrderedDict((k, _render_value(v)) for k, v in self.values.items()))

    def copy(self) -> "RunConfig":
        return RunConfig(dict(self.values))


def parse_config(text: str) -> RunConfig:
    """Parse a complete config; a missing or unknown key is an error naming it."""
    raw = parse_config_text(text)
    unknown = [k for k in raw if k not in DEFAULTS]
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]}")
    missing = [k for k in DEFAULTS if k not in raw]
    if missing:
        raise ConfigError(f"missing config key {missing[0]}")
    return RunConfig(raw)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text())


def default_config_text() -> str:
    return RunConfig().resolved()
