"""Embedding-space evaluation: retrieval correctness, diversity and a
Frechet distance between embedding sets.

All metrics use the frozen clean image encoder (and its paired text
encoder for text queries); the time-conditioned encoder is never used here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .encoders import CleanEncoder, TextEncoder, TimeConditionedEncoder, encode_text
from .guidance import Composite, Content, Language, Structure, Style
from .sampler import SamplerConfig, batch_sample

TOP_KS = (1, 5, 10, 20)
NUM_NEGATIVES = 99


@dataclass
class EvalReport:
    scale: float
    guidance: str
    seeds: list
    topk: dict
    diversity: float
    frechet: Optional[float] = None
    n: int = 0
    images: list = field(default=None, repr=False)

    def to_kv(self) -> str:
        lines = [f"scale={self.scale:g}", f"guidance={self.guidance}",
                 f"seeds={','.join(str(s) for s in self.seeds)}", f"n={self.n}"]
        lines += [f"top{k}={v:.6f}" for k, v in sorted(self.topk.items())]
        lines.append(f"diversity={self.diversity:.6f}")
        lines.append(f"frechet={'nan' if self.frechet is None else f'{self.frechet:.6f}'}")
        return "\n".join(lines) + "\n"


def format_table(reports: Sequence[EvalReport]) -> str:
    ks = sorted(reports[0].topk) if reports else list(TOP_KS)
    head = ["scale", "guidance", "n"] + [f"top{k}" for k in ks] + ["diversity", "frechet"]
    rows = [head]
    for r in reports:
        fd = "n/a" if r.frechet is None else f"{r.frechet:.4f}"
        rows.append([f"{r.scale:g}", r.guidance, str(r.n)] + [f"{r.topk[k]:.3f}" for k in ks]
                    + [f"{r.diversity:.4f}", fd])
    widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in rows) + "\n"


def _require_clean(enc) -> None:
    if isinstance(enc, TimeConditionedEncoder) or not isinstance(enc, CleanEncoder):
        raise TypeError(f"evaluation needs the frozen clean image encoder, got {type(enc).__name__}")


# -- retrieval ----------------------------------------------------------------

def retrieval_ranks(queries: np.ndarray, generated: np.ndarray, negatives: np.ndarray) -> np.ndarray:
    """Rank (0 = best) of each generated embedding among itself and the
    negatives when scored against its own query. Ties count against it."""
    own = (queries * generated).sum(axis=1)
    neg = queries @ negatives.T
    return (neg >= own[:, None]).sum(axis=1)


def _query_embeddings(guidance, n: int, enc_clean: CleanEncoder, text_enc: Optional[TextEncoder]) -> np.ndarray:
    items = [guidance] * n if isinstance(guidance, (str, np.ndarray)) and not (
        isinstance(guidance, np.ndarray) and guidance.ndim == 4) else list(guidance)
    if len(items) != n:
        raise ValueError(f"need one guidance item per generated image ({n}), got {len(items)}")
    out = []
    for g in items:
        if isinstance(g, str):
            if text_enc is None:
                raise ValueError("text guidance retrieval needs the paired text encoder")
            out.append(encode_text(text_enc, g).data)
        else:
            out.append(enc_clean.embed(np.asarray(g))[0])
    return np.stack(out)


def retrieval_accuracy(generated, guidance, negatives, enc_clean: CleanEncoder,
                       text_enc: Optional[TextEncoder] = None, ks=TOP_KS) -> dict:
    """Fraction of generated images ranked within top-k among themselves plus
    99 negatives, queried by their guidance (a text or a reference image)."""
    _require_clean(enc_clean)
    generated = np.asarray(generated)
    negatives = np.asarray(negatives)
    if len(negatives) != NUM_NEGATIVES:
        raise ValueError(f"retrieval protocol needs exactly {NUM_NEGATIVES} negatives, got {len(negatives)}")
    items = guidance if isinstance(guidance, (list, tuple)) else [guidance]
    for g in items:
        if not isinstance(g, str):
            ref = np.asarray(g)
            if any(np.array_equal(ref, neg) for neg in negatives):
                raise ValueError("negative images must be disjoint from the guidance images")
    q = _query_embeddings(guidance, len(generated), enc_clean, text_enc)
    ranks = retrieval_ranks(q, enc_clean.embed(generated), enc_clean.embed(negatives))
    return {k: float((ranks < k).mean()) for k in ks}


# -- diversity ------------------------------------------------------------------

def pairwise_diversity_embeddings(emb: np.ndarray) -> float:
    emb = np.asarray(emb)
    n = len(emb)
    if n < 2:
        raise ValueError(f"diversity needs at least 2 images, got {n}")
    unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    sims = unit @ unit.T
    iu = np.triu_indices(n, k=1)
    return float(np.mean(1.0 - sims[iu]))


def pairwise_diversity(images, enc_clean: CleanEncoder) -> float:
    """Mean ``1 - cos`` over unordered pairs of clean embeddings."""
    _require_clean(enc_clean)
    images = np.asarray(images)
    if len(images) < 2:
        raise ValueError(f"diversity needs at least 2 images, got {len(images)}")
    return pairwise_diversity_embeddings(enc_clean.embed(images))


# -- Frechet distance ---------------------------------------------------------------

def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def gaussian_frechet(mu1, cov1, mu2, cov2) -> float:
    """``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})``.

    The trace of the square root is taken on the symmetric product
    ``S1^{1/2} S2 S1^{1/2}`` with negative eigenvalues clipped to zero.
    """
    mu1, mu2 = np.asarray(mu1, float), np.asarray(mu2, float)
    cov1, cov2 = np.asarray(cov1, float), np.asarray(cov2, float)
    s1h = _psd_sqrt(cov1)
    prod = s1h @ cov2 @ s1h
    w = np.linalg.eigvalsh((prod + prod.T) / 2.0)
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_sqrt)


def frechet_distance(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    emb_a, emb_b = np.asarray(emb_a), np.asarray(emb_b)
    need = 2 * emb_a.shape[1]
    for name, e in (("A", emb_a), ("B", emb_b)):
        if len(e) < need:
            raise ValueError(f"set {name} has {len(e)} items; need at least {need} (2 x embedding dim)")
    return gaussian_frechet(emb_a.mean(0), np.cov(emb_a, rowvar=False),
                            emb_b.mean(0), np.cov(emb_b, rowvar=False))


def frechet_feature_distance(set_a, set_b, enc_clean: CleanEncoder) -> float:
    _require_clean(enc_clean)
    need = 2 * enc_clean.dim
    for name, s in (("A", set_a), ("B", set_b)):
        if len(s) < need:
            raise ValueError(f"set {name} has {len(s)} images; need at least {need} (2 x embedding dim)")
    return frechet_distance(enc_clean.embed(np.asarray(set_a)), enc_clean.embed(np.asarray(set_b)))


# -- scale ablation -------------------------------------------------------------------

def _query_of(spec):
    if isinstance(spec, Language):
        return spec.text
    if isinstance(spec, (Content, Structure, Style)):
        return spec.ref
    raise ValueError(f"retrieval needs a single-modality guidance spec, got {type(spec).__name__}")


def _with_scale(spec, s):
    import copy
    out = copy.copy(spec)
    out.scale = s
    return out


def ablation_sweep(scales: Sequence[float], specs: Sequence, n_per_scale: int, model, sched,
                   noised, clean: CleanEncoder, text_enc: Optional[TextEncoder], negatives,
                   base_seed: int = 0, sampler_cfg: Optional[SamplerConfig] = None,
                   real_images=None) -> list[EvalReport]:
    """One report per scale; every scale reuses the same per-spec seeds.

    ``specs`` holds one guidance spec per seed group (e.g. one reference
    image each); each group contributes ``n_per_scale`` samples and its own
    diversity value, which are averaged.
    """
    scales = [float(s) for s in scales]
    if len(scales) < 2 or 0.0 not in scales:
        raise ValueError("ablation needs at least two scales including 0")
    if isinstance(specs, (Content, Structure, Style, Language, Composite)):
        specs = [specs]
    cfg = sampler_cfg or SamplerConfig()
    reports = []
    for s in sorted(scales):
        images, queries, divs, seeds = [], [], [], []
        for k, spec in enumerate(specs):
            seed = base_seed + 1000 * k
            run_cfg = SamplerConfig(seed=seed, scale=s, clamp_final=cfg.clamp_final, ref_noise=cfg.ref_noise)
            imgs, _ = batch_sample(n_per_scale, model, sched, _with_scale(spec, s), run_cfg, noised, text_enc)
            images.extend(imgs)
            queries.extend([_query_of(spec)] * len(imgs))
            divs.append(pairwise_diversity(imgs, clean) if len(imgs) >= 2 else float("nan"))
            seeds.append(seed)
        topk = retrieval_accuracy(np.stack(images), queries, negatives, clean, text_enc)
        fd = None
        if real_images is not None and len(images) >= 2 * clean.dim and len(real_images) >= 2 * clean.dim:
            fd = frechet_feature_distance(np.stack(images), real_images, clean)
        kind = type(specs[0]).__name__.lower()
        reports.append(EvalReport(s, kind, seeds, topk, float(np.mean(divs)), fd, len(images), images))
    return reports
