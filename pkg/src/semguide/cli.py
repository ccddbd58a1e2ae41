"""Command line entry point.

    semguide [--config PATH] [--out DIR] [--seed N] COMMAND [options]

Commands: gen-corpus, train, pretrain-encoder, finetune-encoder, sample,
eval, ablate. Every command writes ``run-<command>.cfg`` (the fully
resolved config) into its output directory. Errors are reported as a
single ``error: <Type>: <message>`` line on stderr with a nonzero exit.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .config import SEED_KEYS, RunConfig, load_config
from .corpus import CorpusSpec, generate_corpus, holdout_split, load_corpus, save_corpus
from .denoiser import EpsilonModel, TrainConfig, train_denoiser
from .encoders import (CleanEncoder, FinetuneConfig, PretrainConfig, TextEncoder, TimeConditionedEncoder,
                       finetune_noised_encoder, new_finetune_state, new_pretrain_state, pretrain_dual_encoder)
from .evaluation import EvalReport, ablation_sweep, format_table, frechet_feature_distance, \
    pairwise_diversity, retrieval_accuracy, NUM_NEGATIVES
from .guidance import Composite, Content, Language, Structure, Style
from .io import DENOISER_MAGIC, ENCODER_MAGIC, load_checkpoint, read_ppm, save_checkpoint, write_ppm
from .nn import Adam
from .sampler import SamplerConfig, batch_sample
from .schedule import build_schedule

log = logging.getLogger("semguide")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class _Interrupt(Exception):
    """Raised by ``--stop-after`` once the requested number of steps ran."""


# -- shared plumbing -------------------------------------------------------------------

def _schedule(cfg: RunConfig):
    return build_schedule(cfg["schedule.kind"], cfg["schedule.T"], cfg["schedule.beta_start"],
                          cfg["schedule.beta_end"])


def _out_dir(args) -> Path:
    out = Path(getattr(args, "out", None) or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _write_resolved(out: Path, command: str, cfg: RunConfig) -> None:
    (out / f"run-{command}.cfg").write_text(cfg.resolved())


def _split(cfg: RunConfig, corpus_dir):
    corpus = load_corpus(corpus_dir)
    return holdout_split(corpus, cfg["corpus.holdout_fraction"], cfg["corpus.split_seed"])


class _LossLog:
    """One ``step loss`` line per step; a resumed run keeps the first ``start`` lines."""

    def __init__(self, path: Path, start: int):
        lines = path.read_text().splitlines(keepends=True)[:start] if (start and path.exists()) else []
        if len(lines) != start:
            raise ValueError(f"{path} has fewer lines than the checkpoint's {start} steps")
        self.fh = open(path, "w")
        self.fh.writelines(lines)

    def write(self, step: int, loss: float) -> None:
        self.fh.write(f"{step} {loss:.9e}\n")

    def close(self) -> None:
        self.fh.close()


def _opt_names(prefixes_and_modules) -> list:
    return [f"{p}{k}" for p, m in prefixes_and_modules for k in m.params]


def _split_state(state, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}


def _run_training(ckpt: Path, log_path: Path, magic: bytes, modules, opt: Adam, steps: int, every: int,
                  stop_after, train_fn, trained=None):
    """Resume from ``ckpt`` when it exists, then drive ``train_fn(start, on_step)``.

    ``trained`` lists the (prefix, module) pairs the optimizer updates; all of
    ``modules`` by default.
    """
    names = _opt_names(modules if trained is None else trained)
    start = 0
    if ckpt.exists():
        state = load_checkpoint(ckpt, magic)
        for prefix, module in modules:
            module.load_state_dict(_split_state(state, prefix))
        opt.load_state(names, state)
        start = opt.step_count
        log.info("resuming %s at step %d", ckpt, start)

    def save():
        entries = OrderedDict()
        for prefix, module in modules:
            entries.update((prefix + k, v) for k, v in module.state_dict().items())
        entries.update(opt.state(names))
        save_checkpoint(ckpt, entries, magic)

    loss_log = _LossLog(log_path, start)
    limit = None if stop_after is None else start + stop_after

    def on_step(step, loss):
        loss_log.write(step, loss)
        done = step + 1
        if done % every == 0 or done == steps or done == limit:
            loss_log.fh.flush()
            save()
        if done == limit and done < steps:
            raise _Interrupt()

    try:
        if start < steps:
            train_fn(start, on_step)
        if start >= steps or not ckpt.exists():
            save()
    except _Interrupt:
        log.info("stopped after %d steps", stop_after)
    finally:
        loss_log.close()


def load_denoiser(path, cfg: RunConfig) -> EpsilonModel:
    state = load_checkpoint(path, DENOISER_MAGIC)
    model = EpsilonModel((3, cfg["corpus.size"], cfg["corpus.size"]), widths=cfg["denoiser.widths"],
                         seed=cfg["denoiser.seed"])
    model.load_state_dict({k: v for k, v in state.items() if not k.startswith("opt.")})
    return model


def load_encoders(path, cfg: RunConfig):
    """``(clean, text, noised)`` from an encoder checkpoint; ``noised`` is None
    for a checkpoint written before finetuning."""
    state = load_checkpoint(path, ENCODER_MAGIC)
    dim = cfg["encoders.dim"]
    clean, text = CleanEncoder(dim=dim), TextEncoder(dim=dim)
    clean.load_state_dict(_split_state(state, "clean."))
    text.load_state_dict(_split_state(state, "text."))
    noised = None
    if any(k.startswith("noised.") for k in state):
        noised = TimeConditionedEncoder(dim=dim)
        noised.load_state_dict(_split_state(state, "noised."))
    return clean, text, noised


# -- commands -----------------------------------------------------------------------------

def cmd_gen_corpus(args, cfg: RunConfig) -> None:
    out = _out_dir(args)
    spec = CorpusSpec(cfg["corpus.size"], cfg["corpus.count"], cfg["corpus.seed"], cfg["corpus.position_jitter"],
                      cfg["corpus.rotation_jitter"], cfg["corpus.supersample"])
    save_corpus(generate_corpus(spec), out)
    _write_resolved(out, "gen-corpus", cfg)


def cmd_train(args, cfg: RunConfig) -> None:
    out = _out_dir(args)
    train, _ = _split(cfg, args.corpus)
    _write_resolved(out, "train", cfg)
    tc = TrainConfig(cfg["denoiser.steps"], cfg["denoiser.lr"], cfg["denoiser.batch_size"], cfg["denoiser.seed"],
                     cfg["denoiser.grad_clip"])
    sched = _schedule(cfg)
    model = EpsilonModel(train.images.shape[1:], widths=cfg["denoiser.widths"], seed=tc.seed)
    opt = Adam(model.parameters(), lr=tc.lr, clip_norm=tc.grad_clip)
    _run_training(out / "denoiser.ckpt", out / "loss.log", DENOISER_MAGIC, [("", model)], opt, tc.steps,
                  cfg["denoiser.checkpoint_every"], args.stop_after,
                  lambda start, cb: train_denoiser(train.images, sched, tc, model, opt, start,
                                                   lambda s, l, m, o: cb(s, l)))


def cmd_pretrain_encoder(args, cfg: RunConfig) -> None:
    out = _out_dir(args)
    train, _ = _split(cfg, args.corpus)
    _write_resolved(out, "pretrain-encoder", cfg)
    pc = PretrainConfig(cfg["encoders.pretrain_steps"], cfg["encoders.pretrain_batch_size"],
                        cfg["encoders.pretrain_lr"], cfg["encoders.weight_decay"], cfg["encoders.temperature"],
                        cfg["encoders.caption_dropout"], cfg["encoders.seed"], cfg["encoders.dim"])
    clean, text, opt = new_pretrain_state(pc)
    _run_training(out / "encoder_pretrained.ckpt", out / "pretrain_loss.log", ENCODER_MAGIC,
                  [("clean.", clean), ("text.", text)], opt, pc.steps, cfg["encoders.checkpoint_every"],
                  args.stop_after,
                  lambda start, cb: pretrain_dual_encoder(train, pc, lambda s, l, *_: cb(s, l),
                                                          (clean, text, opt), start))


def cmd_finetune_encoder(args, cfg: RunConfig) -> None:
    out = _out_dir(args)
    train, _ = _split(cfg, args.corpus)
    clean, text, _ = load_encoders(args.encoder, cfg)
    _write_resolved(out, "finetune-encoder", cfg)
    fc = FinetuneConfig(cfg["encoders.finetune_steps"], cfg["encoders.finetune_batch_size"],
                        cfg["encoders.finetune_lr"], cfg["encoders.weight_decay"], cfg["encoders.temperature"],
                        cfg["encoders.seed"])
    sched = _schedule(cfg)
    noised, opt = new_finetune_state(clean, fc)
    _run_training(out / "encoder.ckpt", out / "finetune_loss.log", ENCODER_MAGIC,
                  [("clean.", clean), ("text.", text), ("noised.", noised)], opt, fc.steps,
                  cfg["encoders.checkpoint_every"], args.stop_after,
                  lambda start, cb: finetune_noised_encoder(clean, train.images, sched, fc,
                                                            lambda s, l, *_: cb(s, l), (noised, opt), start),
                  trained=[("noised.", noised)])


def _image_spec(mode: str, ref: np.ndarray, scale: float, cfg: RunConfig):
    layers = cfg["guidance.layers"] or None
    if mode == "content":
        return Content(ref, scale)
    if mode == "structure":
        return Structure(ref, layers, scale)
    return Style(ref, layers, scale, cfg["guidance.gram_norm"])


def build_guidance(args, cfg: RunConfig):
    """Guidance spec and manifest fields from the sample command's arguments.

    Effective scales are written back into ``cfg`` so the persisted config
    records them.
    """
    text, ref_path = args.text, args.ref_image
    if text is not None and ref_path is not None:
        if args.text_scale is None or args.image_scale is None:
            raise UsageError("both --text and --ref-image given: composite guidance needs explicit "
                             "--text-scale and --image-scale")
        cfg["guidance.text_scale"], cfg["guidance.image_scale"] = args.text_scale, args.image_scale
        ref = read_ppm(ref_path)
        spec = Composite([Language(text, args.text_scale),
                          _image_spec(cfg["guidance.mode"], ref, args.image_scale, cfg)],
                         1.0 if args.scale is None else args.scale)
        fields = {"kind": "composite", "scale": spec.scale, "text": text, "ref": ref_path,
                  "text_scale": args.text_scale, "image_scale": args.image_scale, "mode": cfg["guidance.mode"]}
        return spec, fields
    if text is not None:
        s = next(v for v in (args.scale, args.text_scale, cfg["guidance.text_scale"]) if v is not None)
        cfg["guidance.text_scale"] = s
        return Language(text, s), {"kind": "language", "scale": s, "text": text}
    if ref_path is not None:
        s = next(v for v in (args.scale, args.image_scale, cfg["guidance.image_scale"]) if v is not None)
        cfg["guidance.image_scale"] = s
        spec = _image_spec(cfg["guidance.mode"], read_ppm(ref_path), s, cfg)
        return spec, {"kind": cfg["guidance.mode"], "scale": s, "ref": ref_path}
    if args.scale not in (None, 0.0):
        raise UsageError("--scale needs --text and/or --ref-image")
    return None, {"kind": "none", "scale": 0.0}


def _manifest_line(name: str, seed: int, fields: dict) -> str:
    parts = [name, f"seed={seed}"] + [f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}"
                                      for k, v in fields.items()]
    return "\t".join(parts)


def parse_manifest(path) -> list:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, *kv = line.split("\t")
        row = {"file": name}
        for item in kv:
            k, _, v = item.partition("=")
            row[k] = v
        rows.append(row)
    return rows


def cmd_sample(args, cfg: RunConfig) -> None:
    if args.mode is not None:
        cfg["guidance.mode"] = args.mode
    if args.n is not None:
        cfg["sampler.n"] = args.n
    spec, fields = build_guidance(args, cfg)
    cfg.validate()
    out = _out_dir(args)
    model = load_denoiser(args.denoiser, cfg)
    noised = text_enc = None
    if spec is not None:
        if args.encoder is None:
            raise UsageError("guided sampling needs --encoder")
        _, text_enc, noised = load_encoders(args.encoder, cfg)
        if noised is None:
            raise ValueError(f"{args.encoder} has no finetuned (noised) encoder; run finetune-encoder first")
    _write_resolved(out, "sample", cfg)
    scfg = SamplerConfig(seed=cfg["sampler.seed"], record_trace=True, trace_stride=cfg["sampler.trace_stride"],
                         clamp_final=cfg["sampler.clamp_final"], ref_noise=cfg["guidance.ref_noise"])
    images, traces = batch_sample(cfg["sampler.n"], model, _schedule(cfg), spec, scfg, noised, text_enc)
    lines = []
    for i, (img, tr) in enumerate(zip(images, traces)):
        name = f"sample_{i:03d}.ppm"
        write_ppm(out / name, img)
        tr.write(out / f"trace_{i:03d}.txt")
        lines.append(_manifest_line(name, scfg.seed + i, fields))
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def pick_negatives(pool: np.ndarray, exclude: list, seed: int) -> np.ndarray:
    """99 distinct held-out images, none equal to an image in ``exclude``."""
    keep = [i for i in range(len(pool)) if not any(np.array_equal(pool[i], r) for r in exclude)]
    if len(keep) < NUM_NEGATIVES:
        raise ValueError(f"only {len(keep)} holdout images available for {NUM_NEGATIVES} negatives")
    idx = np.random.default_rng(seed).choice(keep, NUM_NEGATIVES, replace=False)
    return pool[np.sort(idx)]


def cmd_eval(args, cfg: RunConfig) -> None:
    out = _out_dir(args)
    gen_dir = Path(args.generated)
    rows = parse_manifest(args.manifest or gen_dir / "manifest.txt")
    if not rows:
        raise ValueError("empty guidance manifest")
    clean, text_enc, _ = load_encoders(args.encoder, cfg)
    _, test = _split(cfg, args.corpus)
    images, queries, refs = [], [], []
    for row in rows:
        images.append(read_ppm(gen_dir / row["file"]))
        kind = row.get("kind")
        if kind == "language":
            queries.append(row["text"])
        elif kind in ("content", "structure", "style"):
            ref = read_ppm(row["ref"])
            queries.append(ref)
            refs.append(ref)
        else:
            raise ValueError(f"{row['file']}: cannot evaluate retrieval for guidance kind {kind!r}")
    images = np.stack(images)
    negatives = pick_negatives(test.images, refs, cfg["eval.negatives_seed"])
    _write_resolved(out, "eval", cfg)
    topk = retrieval_accuracy(images, queries, negatives, clean, text_enc)
    div = pairwise_diversity(images, clean) if len(images) >= 2 else float("nan")
    fd = None
    if len(images) >= 2 * clean.dim and len(test.images) >= 2 * clean.dim:
        fd = frechet_feature_distance(images, test.images, clean)
    scales = {row.get("scale") for row in rows}
    scale = float(scales.pop()) if len(scales) == 1 else float("nan")
    kinds = {row.get("kind") for row in rows}
    report = EvalReport(scale, kinds.pop() if len(kinds) == 1 else "mixed",
                        sorted({int(r["seed"]) for r in rows}), topk, div, fd, len(images))
    (out / "report.txt").write_text(format_table([report]))
    (out / "report.kv").write_text(report.to_kv())


def cmd_ablate(args, cfg: RunConfig) -> None:
    out = _out_dir(args)
    model = load_denoiser(args.denoiser, cfg)
    clean, text_enc, noised = load_encoders(args.encoder, cfg)
    if noised is None:
        raise ValueError(f"{args.encoder} has no finetuned (noised) encoder; run finetune-encoder first")
    _, test = _split(cfg, args.corpus)
    rng = np.random.default_rng(cfg["eval.ref_seed"])
    ref_idx = rng.choice(len(test), cfg["eval.ref_count"], replace=False)
    refs = [test.images[i] for i in ref_idx]
    negatives = pick_negatives(test.images, refs, cfg["eval.negatives_seed"])
    mode = cfg["eval.mode"]
    if mode == "language":
        specs = [Language(test.attributes[i].caption()) for i in ref_idx]
    else:
        specs = [_image_spec(mode, r, cfg["guidance.image_scale"], cfg) for r in refs]
    _write_resolved(out, "ablate", cfg)
    scfg = SamplerConfig(clamp_final=cfg["sampler.clamp_final"], ref_noise=cfg["guidance.ref_noise"])
    reports = ablation_sweep(cfg["eval.scales"], specs, cfg["eval.n_per_scale"], model, _schedule(cfg), noised,
                             clean, text_enc, negatives, base_seed=cfg["eval.seed"], sampler_cfg=scfg,
                             real_images=test.images)
    sample_dir = out / "samples"
    sample_dir.mkdir(exist_ok=True)
    n = cfg["eval.n_per_scale"]
    for rep in reports:
        for j, img in enumerate(rep.images):
            write_ppm(sample_dir / f"s{rep.scale:g}_r{j // n}_{j % n:03d}.ppm", img)
    (out / "ablation.txt").write_text(format_table(reports))
    (out / "ablation.kv").write_text("\n".join(r.to_kv() for r in reports))


# -- argument parsing ----------------------------------------------------------------

COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "pretrain-encoder": cmd_pretrain_encoder,
    "finetune-encoder": cmd_finetune_encoder,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="run config file (all keys required)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the command's seed")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="semguide", parents=[common], description="Guided diffusion toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    sub.add_parser("gen-corpus", parents=[common], help="render the captioned shapes corpus")
    for name in ("train", "pretrain-encoder", "finetune-encoder"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--corpus", required=True)
        sp.add_argument("--stop-after", type=int, default=None,
                        help="stop (with a checkpoint) after this many steps; rerun to resume")
        if name == "finetune-encoder":
            sp.add_argument("--encoder", required=True, help="pretrained encoder checkpoint")

    sp = sub.add_parser("sample", parents=[common])
    sp.add_argument("--denoiser", required=True)
    sp.add_argument("--encoder", default=None)
    sp.add_argument("--text", default=None)
    sp.add_argument("--ref-image", default=None)
    sp.add_argument("--mode", choices=("content", "structure", "style"), default=None)
    sp.add_argument("--scale", type=float, default=None)
    sp.add_argument("--text-scale", type=float, default=None)
    sp.add_argument("--image-scale", type=float, default=None)
    sp.add_argument("--n", type=int, default=None)

    sp = sub.add_parser("eval", parents=[common])
    sp.add_argument("--generated", required=True)
    sp.add_argument("--manifest", default=None)
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--corpus", required=True)

    sp = sub.add_parser("ablate", parents=[common])
    sp.add_argument("--denoiser", required=True)
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--corpus", required=True)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        path = getattr(args, "config", None)
        cfg = load_config(path) if path else RunConfig()
        seed = getattr(args, "seed", None)
        if seed is not None:
            if seed < 0 or seed >= 2 ** 64:
                raise UsageError(f"--seed must be an unsigned 64-bit integer, got {seed}")
            cfg[SEED_KEYS[args.command]] = seed
        COMMANDS[args.command](args, cfg)
    except (ValueError, TypeError, OSError, FloatingPointError, KeyError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
