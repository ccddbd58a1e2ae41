"""File formats: binary PPM images, checkpoint containers, flat config files."""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

DENOISER_MAGIC = b"SDGCKPT1"
ENCODER_MAGIC = b"SDGENC1"


class CheckpointError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# -- images -------------------------------------------------------------------

def to_bytes(image: np.ndarray) -> np.ndarray:
    """``[3,H,W]`` in [-1, 1] -> ``[H,W,3]`` uint8 via ``round((x + 1) * 127.5)``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a [3,H,W] image, got shape {img.shape}")
    q = np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return q.transpose(1, 2, 0)


def write_ppm(path, image: np.ndarray) -> None:
    q = to_bytes(image)
    h, w = q.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 127.5 - 1.0


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, tensors: "dict[str, np.ndarray]", magic: bytes = DENOISER_MAGIC) -> None:
    """Write ``magic`` then, per entry: u32 name length, name bytes, u32 rank,
    u32 extents, float32 row-major payload. Little-endian throughout."""
    parts = [magic]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, magic: bytes = DENOISER_MAGIC) -> "OrderedDict[str, np.ndarray]":
    raw = Path(path).read_bytes()
    if not raw.startswith(magic):
        raise CheckpointError(f"{path}: not a checkpoint (expected magic {magic.decode()!r})")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    pos = len(magic)
    try:
        while pos < len(raw):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 4 * count > len(raw):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(np.float64)
            pos += 4 * count
            out[name] = arr.reshape(shape)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return out


# -- config ---------------------------------------------------------------------

def parse_config_text(text: str) -> "OrderedDict[str, str]":
    """Parse ``section.key = value`` lines; ``#`` starts a comment."""
    out: "OrderedDict[str, str]" = OrderedDict()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} lacks a section prefix")
        out[key] = value
    return out


def format_config(values: "dict[str, object]") -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())
