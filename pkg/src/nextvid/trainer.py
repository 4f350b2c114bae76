"""Loss combination, the staged schedule, optimization, EMA and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import ClipShape, LossWeights, RunConfig, StageSpec, TrainConfig
from .dataio import (
    MOTION_CLASSES, derive_seed, generate_synthetic_clip, image_to_clip, lattice, normalize, patchify_array,
)
from .encoder import Encoder, ReferenceState, ema_update
from .flowdecoder import FlowDecoder, TargetExtractor, flow_loss
from .masking import SpatialMask, empty_mask, sample_spatial_mask
from .nncore import load_archive, load_module_arrays, module_arrays, save_archive
from .predictor import Predictor, align_loss, query_positions

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "L_flow", "L_align", "L_total", "lr", "grad_norm", "stage", "flow_lr")


class TrainingAborted(RuntimeError):
    pass


def total_loss(flow, align, w: LossWeights):
    for name, v in (("L_flow", flow), ("L_align", align)):
        if not math.isfinite(float(torch.as_tensor(v).detach())):
            raise TrainingAborted(f"non-finite {name}={float(v)!r}")
    return w.w_flow * flow + w.w_align * align


@dataclass
class LossReport:
    step: int
    L_flow: float
    L_align: float
    L_total: float
    lr: float
    grad_norm: float
    stage: str = ""
    flow_lr: float = 0.0


class NextVid(nn.Module):
    def __init__(self, cfg: RunConfig, target_dim: Optional[int] = None):
        super().__init__()
        tok = cfg.shape.token_dim_raw
        self.encoder = Encoder(cfg.encoder, tok)
        self.predictor = Predictor(cfg.predictor, cfg.encoder.width)
        self.decoder = FlowDecoder(cfg.decoder, cfg.encoder.width, target_dim or tok)


@dataclass
class Batch:
    frames: np.ndarray  # [B, T_raw, H, W, C]
    labels: np.ndarray
    sources: list
    views: list  # one list of SpatialMask per view, indexed by clip


def make_batch(cfg: RunConfig, step: int, shape: ClipShape, batch_size: int, use_mask: bool = True) -> Batch:
    """Deterministic batch for ``step``: a function of (cfg.seed, step) only."""
    frames, labels, sources = [], [], []
    for i in range(batch_size):
        rng = np.random.default_rng(derive_seed(cfg.seed, 1, step, i))
        is_image = rng.random() < cfg.train.image_prob
        cls = int(rng.integers(len(MOTION_CLASSES)))
        clip_seed = int(rng.integers(2**31))
        clip = generate_synthetic_clip(clip_seed, cls, shape)
        if is_image:
            clip = image_to_clip(clip.frames[int(rng.integers(shape.T_raw))], shape.T_raw, shape.tubelet_size)
        frames.append(clip.frames)
        labels.append(cls)
        sources.append(clip.source)
    views = []
    if use_mask:
        for v, mcfg in enumerate(cfg.masks):
            for rep in range(mcfg.samples_per_clip):
                views.append([
                    sample_spatial_mask(mcfg, shape.grid, derive_seed(cfg.seed, 2, step, i, v, rep))
                    for i in range(batch_size)
                ])
    else:
        views.append([empty_mask(shape.grid)] * batch_size)
    return Batch(np.stack(frames), np.array(labels), sources, views)


def gather_visible(tokens: torch.Tensor, pos_grid: torch.Tensor, masks: Sequence[SpatialMask]):
    """Keep the visible spatial columns of each clip, padded to a common length.

    tokens [B, T, N, D], pos_grid [T, N, 3] -> (tokens [B, T*n, D], pos [B, T*n, 3], valid [B, T*n]).
    """
    B, T, N, D = tokens.shape
    vis = [m.visible() for m in masks]
    n = max(len(v) for v in vis)
    idx = torch.zeros(B, n, dtype=torch.long)
    svalid = torch.zeros(B, n, dtype=torch.bool)
    for b, v in enumerate(vis):
        idx[b, : len(v)] = torch.as_tensor(v)
        svalid[b, : len(v)] = True
    tok = torch.gather(tokens, 2, idx[:, None, :, None].expand(B, T, n, D)).reshape(B, T * n, D)
    pos = torch.gather(pos_grid[None].expand(B, T, N, 3), 2, idx[:, None, :, None].expand(B, T, n, 3)).reshape(B, T * n, 3)
    valid = svalid[:, None, :].expand(B, T, n).reshape(B, T * n)
    return tok, pos, valid


def param_groups(model: nn.Module, weight_decay: float) -> list[dict]:
    groups = {k: [] for k in ("main_decay", "main_nodecay", "flow_decay", "flow_nodecay")}
    for name, p in model.named_parameters():
        part = "flow" if name.startswith("decoder.") else "main"
        # weight matrices decay; biases, norm gains and the query vector do not
        groups[f"{part}_{'decay' if p.ndim >= 2 else 'nodecay'}"].append(p)
    return [
        {"name": k, "params": v, "weight_decay": 0.0 if k.endswith("nodecay") else weight_decay}
        for k, v in groups.items()
    ]


def build_optimizer(model: nn.Module, train: TrainConfig, lr: float) -> torch.optim.AdamW:
    """AdamW with decoupled weight decay applied to weight matrices only."""
    return torch.optim.AdamW(param_groups(model, train.weight_decay), lr=lr, betas=tuple(train.betas))


class Trainer:
    def __init__(self, cfg: RunConfig, extractor: Optional[TargetExtractor] = None):
        self.cfg = cfg
        self.dtype = torch.float64 if cfg.train.dtype == "float64" else torch.float32
        self.extractor = extractor or TargetExtractor()
        torch.manual_seed(derive_seed(cfg.seed, 0))
        self.model = NextVid(cfg, self.extractor.output_dim(cfg.shape)).to(self.dtype)
        self.ref = ReferenceState(self.model.encoder, cfg.train.ema)
        self.optimizer = build_optimizer(self.model, cfg.train, cfg.schedule[0].start_lr if cfg.schedule else 1e-4)
        self.step = 0

    # -------------------------------------------------------------- step

    def set_lr(self, lr: float, flow_lr: Optional[float] = None) -> None:
        for g in self.optimizer.param_groups:
            g["lr"] = flow_lr if (flow_lr and g["name"].startswith("flow")) else lr

    def losses(self, batch: Batch, shape: ClipShape, k_tau: int, generator: torch.Generator):
        """Forward pass; returns (total, flow, align) averaged over mask views."""
        m = self.model
        T, N = shape.T, shape.N_s
        tokens = torch.from_numpy(patchify_array(normalize(batch.frames), shape)).to(self.dtype)
        targets = torch.from_numpy(np.ascontiguousarray(self.extractor(batch.frames, shape))).to(self.dtype)
        B = tokens.shape[0]
        _, pos_np, _ = lattice(T, shape.grid)
        pos_grid = torch.from_numpy(pos_np).reshape(T, N, 3)
        full_pos = torch.from_numpy(pos_np)[None].expand(B, -1, -1)
        # the reference branch sees the full clip once, shared by all views
        c_ref = self.ref(tokens.reshape(B, T * N, -1), full_pos)[:, N:]
        q_pos = torch.from_numpy(query_positions(T, shape.grid))[None].expand(B, -1, -1)
        x1 = targets[:, 1:].reshape(B, (T - 1) * N, -1)
        flows, aligns = [], []
        for masks in batch.views:
            tok, pos, valid = gather_visible(tokens, pos_grid, masks)
            c = m.encoder(tok, pos, valid)
            z = m.predictor(c, pos, q_pos, c_valid=valid)
            aligns.append(align_loss(z, c_ref))
            flows.append(flow_loss(m.decoder, z, x1, k_tau, generator, q_pos, self.cfg.train.tau_mode))
        flow = torch.stack(flows).mean()
        align = torch.stack(aligns).mean()
        return total_loss(flow, align, self.cfg.loss), flow, align

    def train_step(self, batch: Batch, shape: ClipShape, k_tau: int, lr: float, flow_lr: Optional[float] = None, stage: str = "") -> LossReport:
        self.model.train()
        self.set_lr(lr, flow_lr)
        gen = torch.Generator().manual_seed(derive_seed(self.cfg.seed, 3, self.step))
        loss, flow, align = self.losses(batch, shape, k_tau, gen)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        grad_norm = float(torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.train.grad_clip))
        if not math.isfinite(grad_norm):
            raise TrainingAborted(f"non-finite gradient norm at step {self.step}")
        self.optimizer.step()
        ema_update(self.ref, self.model.encoder)
        report = LossReport(self.step, flow.item(), align.item(), loss.item(), lr, grad_norm, stage, flow_lr or lr)
        self.step += 1
        return report

    # ---------------------------------------------------------- schedule

    def run_schedule(
        self,
        stages: Optional[Sequence[StageSpec]] = None,
        out_dir: Optional[Path] = None,
        stop_at: Optional[int] = None,
        on_report: Optional[Callable[[LossReport], None]] = None,
    ) -> list[LossReport]:
        """Train from ``self.step`` through the end of the schedule.

        Metrics are appended to ``out_dir/metrics.csv`` and a checkpoint is
        written at every stage boundary. ``stop_at`` halts early (after that
        many total steps) so a run can be resumed later.
        """
        stages = list(stages if stages is not None else self.cfg.schedule)
        if not stages:
            raise ValueError("schedule has no stages")
        out_dir = Path(out_dir) if out_dir else None
        if out_dir:
            out_dir.mkdir(parents=True, exist_ok=True)
        reports = []
        start = 0
        for stage in stages:
            end = start + stage.steps
            shape = self.cfg.shape.with_frames(stage.frames)
            k_tau = self.cfg.train.ktau_override or stage.k_tau
            while start <= self.step < end:
                if stop_at is not None and self.step >= stop_at:
                    return reports
                i = self.step - start
                batch = make_batch(self.cfg, self.step, shape, stage.batch_size, self.cfg.train.use_mask)
                rep = self.train_step(batch, shape, k_tau, stage.lr_at(i), stage.flow_lr, stage.name)
                reports.append(rep)
                if out_dir:
                    append_metrics(out_dir / "metrics.csv", rep)
                if on_report:
                    on_report(rep)
                if self.step == end and out_dir:
                    self.save(out_dir / f"ckpt-{stage.name}.nxtp", stage=stage.name)
            start = end
        return reports

    # -------------------------------------------------------- checkpoint

    def save(self, path: str | Path, stage: str = "") -> None:
        arrays = module_arrays(self.model, "model.")
        arrays.update(module_arrays(self.ref.module, "ref."))
        sd = self.optimizer.state_dict()
        for idx, st in sd["state"].items():
            for k, v in st.items():
                arrays[f"optim.{idx}.{k}"] = torch.as_tensor(v).detach().cpu().numpy()
        groups = [{k: v for k, v in g.items() if k != "params"} | {"params": list(g["params"])} for g in sd["param_groups"]]
        meta = {
            "stage": stage, "step": self.step, "rng": {"seed": self.cfg.seed, "step": self.step},
            "param_groups": groups, "config": self.cfg.to_dict(),
        }
        digest = save_archive(path, arrays, meta)
        Path(path).with_suffix(".json").write_text(json.dumps({"stage": stage, "step": self.step, "sha256": digest, "rng": meta["rng"]}, indent=2))

    def load(self, path: str | Path) -> None:
        arrays, meta = load_archive(path)
        load_module_arrays(self.model, arrays, "model.")
        load_module_arrays(self.ref.module, arrays, "ref.")
        state = {}
        for name, arr in arrays.items():
            if name.startswith("optim."):
                _, idx, key = name.split(".", 2)
                state.setdefault(int(idx), {})[key] = torch.from_numpy(arr)
        self.optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
        self.step = int(meta["step"])

    @classmethod
    def from_checkpoint(cls, path: str | Path, extractor: Optional[TargetExtractor] = None) -> "Trainer":
        _, meta = load_archive(path)
        tr = cls(RunConfig.from_dict(meta["config"]), extractor)
        tr.load(path)
        return tr


def append_metrics(path: Path, rep: LossReport) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRIC_FIELDS)
        d = asdict(rep)
        w.writerow([repr(d[k]) if isinstance(d[k], float) else d[k] for k in METRIC_FIELDS])


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_encoder(path: str | Path) -> tuple[Encoder, RunConfig]:
    """Online encoder weights from a training checkpoint."""
    arrays, meta = load_archive(path)
    cfg = RunConfig.from_dict(meta["config"])
    enc = Encoder(cfg.encoder, cfg.shape.token_dim_raw)
    sub = {k[len("model.encoder."):]: v for k, v in arrays.items() if k.startswith("model.encoder.")}
    load_module_arrays(enc, sub)
    return enc, cfg
