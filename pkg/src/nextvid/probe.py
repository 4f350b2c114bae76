"""Attentive probe on frozen encoder features."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ClipShape, ProbeConfig
from .dataio import lattice, normalize, patchify_array
from .encoder import Encoder
from .nncore import Attention, init_linear_


@torch.no_grad()
def extract_features(encoder: Encoder, frames: np.ndarray, shape: ClipShape, batch_size: int = 64, last_k: int = 1) -> torch.Tensor:
    """Frozen features of full, unmasked clips: [N, T*N_s, width*last_k]."""
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    _, pos_np, _ = lattice(shape.T, shape.grid)
    out = []
    for s in range(0, len(frames), batch_size):
        chunk = frames[s:s + batch_size]
        tok = torch.from_numpy(patchify_array(normalize(chunk), shape)).to(dtype)
        B = tok.shape[0]
        tok = tok.reshape(B, shape.T * shape.N_s, -1)
        pos = torch.from_numpy(pos_np)[None].expand(B, -1, -1)
        out.append(encoder(tok, pos, return_layers=last_k))
    if not out:
        return torch.zeros(0, shape.T * shape.N_s, encoder.cfg.width * last_k, dtype=dtype)
    return torch.cat(out)


class ProbeHead(nn.Module):
    """One learnable query, one cross-attention layer, one linear classifier."""

    def __init__(self, width: int, num_classes: int, heads: int = 4):
        super().__init__()
        self.num_classes = num_classes
        self.query = nn.Parameter(torch.zeros(1, 1, width))
        self.norm_kv = nn.LayerNorm(width)
        self.attn = Attention(width, heads, rope_base=None)
        self.norm_out = nn.LayerNorm(width)
        self.classifier = nn.Linear(width, num_classes)
        init_linear_(self)
        nn.init.trunc_normal_(self.query, std=0.02)

    def pool(self, feats: torch.Tensor) -> torch.Tensor:
        q = self.query.expand(feats.shape[0], -1, -1)
        return self.attn(q, context=self.norm_kv(feats))[:, 0]

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.norm_out(self.pool(feats)))


def _check_labels(labels: torch.Tensor, num_classes: int) -> None:
    if len(labels) and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{int(labels.min())}, {int(labels.max())}]")


def probe_train(feats: torch.Tensor, labels, num_classes: int, cfg: Optional[ProbeConfig] = None, seed: int = 0) -> ProbeHead:
    cfg = cfg or ProbeConfig()
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_labels(labels, num_classes)
    feats = feats.detach()
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    head = ProbeHead(feats.shape[-1], num_classes, cfg.heads).to(feats.dtype)
    opt = torch.optim.AdamW(head.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(feats)
    steps = cfg.epochs * max(1, -(-n // cfg.batch_size))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1))
    head.train()
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            loss = F.cross_entropy(head(feats[idx]), labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
    head.eval()
    return head


@torch.no_grad()
def probe_predict(head: nn.Module, feats: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    head.eval()
    out = [head(feats[s:s + batch_size]).argmax(dim=-1) for s in range(0, len(feats), batch_size)]
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def probe_eval(head: nn.Module, feats: torch.Tensor, labels) -> float:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if len(labels) == 0:
        return 0.0
    if hasattr(head, "classifier") and feats.shape[-1] != head.classifier.in_features:
        raise ValueError("probe head width does not match the features")
    return float((probe_predict(head, feats) == labels).double().mean())


@dataclass
class ProbeResult:
    checkpoint: str
    corpus: str
    accuracy: float
    epochs: int
    train_accuracy: float = float("nan")


def run_probe(encoder: Encoder, train: tuple, val: tuple, shape: ClipShape, num_classes: int, cfg: Optional[ProbeConfig] = None, seed: int = 0):
    """Features -> trained head -> (head, val accuracy, train accuracy)."""
    cfg = cfg or ProbeConfig()
    for p in encoder.parameters():
        p.requires_grad_(False)
    ftr = extract_features(encoder, train[0], shape, last_k=cfg.last_k_layers)
    fva = extract_features(encoder, val[0], shape, last_k=cfg.last_k_layers)
    head = probe_train(ftr, train[1], num_classes, cfg, seed)
    return head, probe_eval(head, fva, val[1]), probe_eval(head, ftr, train[1])


def append_results(path: str | Path, res: ProbeResult) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["checkpoint", "corpus", "accuracy", "epochs"])
        w.writerow([res.checkpoint, res.corpus, repr(res.accuracy), res.epochs])
