"""Context-isolated autoregressive predictor and the alignment loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import PredictorConfig
from .dataio import lattice
from .encoder import ContextTokens
from .masking import AUTOREGRESSIVE, allow_matrix
from .nncore import Attention, Mlp, init_linear_, mask_bias


class CrossBlock(nn.Module):
    """Queries cross-attend to the context; no self-attention among queries."""

    def __init__(self, width: int, heads: int, mlp_ratio: float, rope_base: float):
        super().__init__()
        self.norm_q = nn.LayerNorm(width)
        self.attn = Attention(width, heads, rope_base=rope_base)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = Mlp(width, mlp_ratio)

    def forward(self, q, kv, allow, q_pos, k_pos):
        q = q + self.attn(self.norm_q(q), context=kv, allow=allow, q_pos=q_pos, k_pos=k_pos)
        return q + self.mlp(self.norm2(q))


class Predictor(nn.Module):
    def __init__(self, cfg: PredictorConfig, enc_width: int):
        super().__init__()
        self.cfg = cfg
        self.enc_width = enc_width
        self.ctx_proj = nn.Linear(enc_width, cfg.width)
        self.ctx_norm = nn.LayerNorm(cfg.width)
        self.query = nn.Parameter(torch.zeros(cfg.width))
        self.blocks = nn.ModuleList(CrossBlock(cfg.width, cfg.heads, cfg.mlp_ratio, cfg.rope_base) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.width)
        self.out = nn.Linear(cfg.width, enc_width)
        init_linear_(self)
        nn.init.zeros_(self.out.weight)

    def forward(self, context, c_pos, q_pos, c_valid=None):
        """context [B, Lc, We], c_pos [B, Lc, 3], q_pos [B, Lq, 3] -> z [B, Lq, We].

        The context is projected once and then only read as keys/values.
        """
        B, Lq = q_pos.shape[0], q_pos.shape[1]
        q_time, k_time = q_pos[..., 0], c_pos[..., 0]
        if bool((q_time < 1).any()):
            raise ValueError("predictor queries must target time steps >= 1")
        allow = allow_matrix(AUTOREGRESSIVE, q_time, k_time)
        if c_valid is not None:
            allow = allow & c_valid[:, None, :]
        if not bool(allow.any(dim=-1).all()):
            raise ValueError("some query has no context from any earlier time step")
        kv = self.ctx_norm(self.ctx_proj(context))
        allow = mask_bias(allow, kv.dtype)
        x = self.query.expand(B, Lq, -1)
        for blk in self.blocks:
            x = blk(x, kv, allow, q_pos, c_pos)
        return self.out(self.norm(x))


def query_positions(T: int, grid: tuple[int, int]) -> np.ndarray:
    """(t, y, x) for every spatial position of time steps 1..T-1."""
    _, pos, _ = lattice(T, grid)
    return pos[pos[:, 0] >= 1]


@dataclass
class PredictedLatents:
    z: torch.Tensor  # [(T-1) * N_s, We]
    pos_of: np.ndarray


def predictor_forward(context: ContextTokens, predictor: Predictor, T: int, grid: tuple[int, int]) -> PredictedLatents:
    times = set(np.unique(context.time_of).tolist())
    missing = [t for t in range(T - 1) if t not in times]
    if missing:
        raise ValueError(f"no context for time steps {missing}")
    qp = query_positions(T, grid)
    z = predictor(context.c[None], torch.as_tensor(context.pos_of)[None], torch.as_tensor(qp)[None])[0]
    return PredictedLatents(z=z, pos_of=qp)


def align_loss(z: torch.Tensor, c_ref: torch.Tensor, weighting: Optional[torch.Tensor] = None) -> torch.Tensor:
    """MSE between predictions and stop-gradient reference tokens.

    ``weighting`` optionally scales each token's squared error (broadcast
    over channels) and is normalized to keep the result a mean.
    """
    if z.shape != c_ref.shape:
        raise ValueError(f"prediction shape {tuple(z.shape)} != reference shape {tuple(c_ref.shape)}")
    target = c_ref.detach()
    if weighting is None:
        return F.mse_loss(z, target)
    sq = (z - target).pow(2).mean(dim=-1)
    return (sq * weighting).sum() / weighting.sum()
