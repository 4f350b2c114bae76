"""Command line entry point: ``nextvid <command> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ConfigError, RunConfig, get_preset
from .dataio import (
    clip_for, clips_array, corpus_records, file_sha256, frame_grid, read_clip, read_manifest, write_clip,
    write_manifest, write_ppm,
)
from .flowdecoder import TargetExtractor
from .masking import FRAME_WISE_CAUSAL, sample_spatial_mask
from .probe import ProbeResult, append_results, run_probe
from .trainer import Trainer, load_encoder, read_metrics
from .verify import format_report, run_checks

log = logging.getLogger("nextvid")

NUM_CLASSES = 8


# ------------------------------------------------------------------ config


def avgpool_latent(frame: np.ndarray, factor: int = 2) -> np.ndarray:
    """Stand-in latent for ``--target latent``: per-frame 2x2 average pooling."""
    h, w, c = frame.shape
    return frame.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def make_extractor(cfg: RunConfig) -> TargetExtractor:
    if cfg.train.target == "pixel":
        return TargetExtractor()
    s = cfg.shape
    lat_h, lat_w = s.H // 2, s.W // 2
    gh, gw = s.grid
    dim = (lat_h // gh) * (lat_w // gw) * s.tubelet_size * s.C
    return TargetExtractor("pluggable_latent", frame_fn=avgpool_latent, dim=dim)


def resolve_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
        if args.preset:
            raise ConfigError("--config and --preset are mutually exclusive; use 'preset:' inside the file")
    else:
        cfg = get_preset(args.preset or "desk-default")
    train = cfg.train
    if getattr(args, "no_mask", False):
        train = dataclasses.replace(train, use_mask=False)
    if getattr(args, "target", None):
        train = dataclasses.replace(train, target=args.target)
    if getattr(args, "ktau", None) is not None:
        if args.ktau < 1:
            raise ConfigError("--ktau must be >= 1")
        train = dataclasses.replace(train, ktau_override=args.ktau)
    cfg = dataclasses.replace(cfg, train=train)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def run_dir(args, command: str) -> Path:
    """Explicit --out, else a fresh timestamped directory under $NXTV_OUT (default ./runs)."""
    if getattr(args, "out", None):
        return Path(args.out)
    root = Path(os.environ.get("NXTV_OUT", "runs"))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = root / f"{command}-{stamp}"
    n = 1
    while path.exists():
        n += 1
        path = root / f"{command}-{stamp}-{n}"
    return path


def prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(f"{path} exists and is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------- commands


def cmd_gen_corpus(args, cfg: RunConfig) -> int:
    n_train = cfg.corpus.n_train if args.n_train is None else args.n_train
    n_val = cfg.corpus.n_val if args.n_val is None else args.n_val
    out = prepare_out(run_dir(args, "corpus"), args.force)
    cfg.dump(out / "config.yaml")
    recs = corpus_records(n_train, n_val, cfg.seed)
    (out / "clips").mkdir(exist_ok=True)
    for r in recs:
        write_clip(clip_for(r, cfg.shape), out / "clips" / f"{r.clip_id}.nxtv")
    write_manifest(recs, out / "manifest.tsv")
    print(f"wrote {n_train} train + {n_val} val clips to {out}")
    print(f"manifest sha256 {file_sha256(out / 'manifest.tsv')}")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    extractor = make_extractor(cfg)
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, extractor)
        out = Path(args.out) if args.out else Path(args.resume).parent
        out.mkdir(parents=True, exist_ok=True)
        print(f"resuming from step {trainer.step}")
    else:
        out = prepare_out(run_dir(args, "pretrain"), args.force)
        trainer = Trainer(cfg, extractor)
    trainer.cfg.dump(out / "config.yaml")

    def report(rep):
        if rep.step % args.log_every == 0:
            print(f"step {rep.step:6d} {rep.stage:<9} L_total {rep.L_total:.4f} L_flow {rep.L_flow:.4f} "
                  f"L_align {rep.L_align:.4f} lr {rep.lr:.2e} |g| {rep.grad_norm:.3f}", flush=True)

    trainer.run_schedule(out_dir=out, stop_at=args.stop_at, on_report=report)
    if args.stop_at is not None:
        trainer.save(out / f"ckpt-step{trainer.step}.nxtp")
    rows = read_metrics(out / "metrics.csv")
    if rows:
        L = [float(r["L_total"]) for r in rows]
        k = max(1, min(20, len(L) // 4))
        print(f"L_total moving average: first {np.mean(L[:k]):.4f} last {np.mean(L[-k:]):.4f}")
    print(f"outputs in {out}")
    return 0


def _load_split(cfg: RunConfig, corpus: Optional[str], split: str):
    if corpus:
        recs = [r for r in read_manifest(Path(corpus) / "manifest.tsv") if r.split == split]
        frames = np.stack([read_clip(Path(corpus) / "clips" / f"{r.clip_id}.nxtv").frames for r in recs]) if recs else np.zeros((0, cfg.shape.T_raw, cfg.shape.H, cfg.shape.W, cfg.shape.C), np.float32)
        return frames, np.array([r.class_id for r in recs])
    recs = [r for r in corpus_records(cfg.corpus.n_train, cfg.corpus.n_val, cfg.seed) if r.split == split]
    return clips_array(recs, cfg.shape)


def cmd_probe(args, cfg: RunConfig) -> int:
    if args.checkpoint:
        encoder, ckpt_cfg = load_encoder(args.checkpoint)
        cfg = dataclasses.replace(ckpt_cfg, seed=cfg.seed, corpus=cfg.corpus, probe=cfg.probe)
        name = str(args.checkpoint)
    else:
        from .encoder import Encoder
        torch.manual_seed(cfg.seed)
        encoder = Encoder(cfg.encoder, cfg.shape.token_dim_raw)
        name = "random-init"
    out = prepare_out(run_dir(args, "probe"), args.force)
    cfg.dump(out / "config.yaml")
    train, val = _load_split(cfg, args.corpus, "train"), _load_split(cfg, args.corpus, "val")
    _, acc, train_acc = run_probe(encoder, train, val, cfg.shape, NUM_CLASSES, cfg.probe, cfg.seed)
    append_results(out / "probe.csv", ProbeResult(name, args.corpus or f"synthetic-seed{cfg.seed}", acc, cfg.probe.epochs))
    print(f"probe top-1 val {acc:.4f} (train {train_acc:.4f}) on {len(val[1])} clips")
    return 0


def cmd_generate(args, cfg: RunConfig) -> int:
    from .generate import masked_generation, rollout

    trainer = Trainer.from_checkpoint(args.checkpoint, make_extractor(RunConfig.from_dict(_ckpt_config(args.checkpoint))))
    mcfg = trainer.cfg
    shape = mcfg.shape
    out = prepare_out(run_dir(args, "generate"), args.force)
    mcfg.dump(out / "config.yaml")
    recs = [r for r in corpus_records(mcfg.corpus.n_train, mcfg.corpus.n_val, cfg.seed) if r.split == "val"]
    ids = args.clips or [0]
    for i in ids:
        if not 0 <= i < len(recs):
            raise ValueError(f"clip index {i} outside the {len(recs)} validation clips")
        clip = clip_for(recs[i], shape)
        mask = sample_spatial_mask(mcfg.masks[-1], shape.grid, cfg.seed + i)
        g = masked_generation(trainer.model, clip.frames, shape, mask, args.steps, cfg.seed + i)
        write_ppm(frame_grid([list(g.original), list(g.masked), list(g.generated)]), out / f"masked-{recs[i].clip_id}.ppm")
        roll = rollout(trainer.model, clip.frames[0], shape, args.steps, cfg.seed + i)
        write_ppm(frame_grid([list(clip.frames), list(roll)]), out / f"rollout-{recs[i].clip_id}.ppm")
    print(f"wrote {2 * len(ids)} images to {out}")
    return 0


def _ckpt_config(path) -> dict:
    from .nncore import load_archive
    return load_archive(path)[1]["config"]


def cmd_verify(args, cfg: RunConfig) -> int:
    mode = "full" if args.inject_full_attention else FRAME_WISE_CAUSAL
    results = run_checks(mode, cfg.seed)
    print(format_report(results))
    if args.out:
        out = prepare_out(Path(args.out), args.force)
        (out / "verify.json").write_text(json.dumps([dataclasses.asdict(r) for r in results], indent=2))
    return 0 if all(r.passed for r in results) else 1


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--preset", help="desk-default, desk-small, paper-vitl, paper-vith or paper-vitg")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=None, help="torch threads (default: all cores)")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("--out", help="output directory (default: timestamped under $NXTV_OUT)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nextvid", description="Masked next-frame generative video pretraining at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", parents=[common], help="write the synthetic motion corpus")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("pretrain", parents=[common], help="run the staged pretraining schedule")
    t.add_argument("--no-mask", action="store_true", help="disable spatial masking")
    t.add_argument("--target", choices=["pixel", "latent"])
    t.add_argument("--ktau", type=int, help="override the per-stage tau fold count")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-at", type=int, help="stop after this many total steps and checkpoint")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(func=cmd_pretrain)

    pr = sub.add_parser("probe", parents=[common], help="attentive probe on a frozen encoder")
    pr.add_argument("--checkpoint", help="training checkpoint (omit for a random-init encoder)")
    pr.add_argument("--corpus", help="corpus directory from gen-corpus (default: regenerate in memory)")
    pr.set_defaults(func=cmd_probe)

    ge = sub.add_parser("generate", parents=[common], help="masked generation and seed-frame rollout images")
    ge.add_argument("--checkpoint", required=True)
    ge.add_argument("--clips", type=int, nargs="*", help="validation clip indices")
    ge.add_argument("--steps", type=int, default=8, help="Euler steps")
    ge.set_defaults(func=cmd_generate)

    v = sub.add_parser("verify", parents=[common], help="run the structural invariant suite")
    v.add_argument("--inject-full-attention", action="store_true", help="negative control: non-causal encoder")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(args.threads or os.cpu_count() or 1)
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except (ConfigError, FileExistsError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
