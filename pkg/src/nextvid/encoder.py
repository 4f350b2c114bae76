"""Frame-wise causal ViT encoder and its EMA reference copy."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .config import EncoderConfig
from .dataio import TokenSequence
from .masking import FRAME_WISE_CAUSAL, allow_matrix
from .nncore import Attention, Mlp, init_linear_, mask_bias


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float, rope_base: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads, rope_base=rope_base)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = Mlp(width, mlp_ratio)

    def forward(self, x, allow, pos):
        x = x + self.attn(self.norm1(x), allow=allow, q_pos=pos)
        return x + self.mlp(self.norm2(x))


def self_allow(mode: str, time: torch.Tensor, valid: Optional[torch.Tensor]) -> torch.Tensor:
    """[B, L, L] mask for self-attention over padded token lists.

    Padding keys are never attended; padding queries attend only to themselves.
    """
    if mode == "full":
        allow = torch.ones(time.shape[0], time.shape[1], time.shape[1], dtype=torch.bool)
    else:
        allow = allow_matrix(mode, time, time)
    if valid is not None:
        allow = allow & valid[:, None, :]
        eye = torch.eye(time.shape[1], dtype=torch.bool)[None]
        allow = allow | (eye & ~valid[:, :, None])
    return allow


class Encoder(nn.Module):
    """ViT over tubelet tokens with 3D RoPE and frame-wise causal attention.

    ``mask_mode`` exists only so verification can inject a non-causal
    encoder as a negative control; training always uses the causal mask.
    """

    def __init__(self, cfg: EncoderConfig, token_dim: int, mask_mode: str = FRAME_WISE_CAUSAL):
        super().__init__()
        self.cfg = cfg
        self.token_dim = token_dim
        self.mask_mode = mask_mode
        self.patch_embed = nn.Linear(token_dim, cfg.width)
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads, cfg.mlp_ratio, cfg.rope_base) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.width)
        init_linear_(self)

    def forward(self, tokens, pos, valid=None, return_layers: int = 0):
        """tokens [B, L, D], pos [B, L, 3] -> [B, L, width].

        With ``return_layers=k`` the normalized outputs of the last k blocks
        are concatenated along channels.
        """
        x = self.patch_embed(tokens)
        allow = mask_bias(self_allow(self.mask_mode, pos[..., 0], valid), x.dtype)
        outs = []
        for blk in self.blocks:
            x = blk(x, allow, pos)
            outs.append(x)
        if return_layers > 1:
            return torch.cat([self.norm(o) for o in outs[-return_layers:]], dim=-1)
        return self.norm(x)


@dataclass
class ContextTokens:
    c: torch.Tensor  # [L, width]
    pos_of: np.ndarray
    time_of: np.ndarray
    produced_from: str = ""


def _check_frames(seq: TokenSequence) -> None:
    present = np.zeros(seq.T, dtype=bool)
    present[np.unique(seq.time_of)] = True
    if not present.all():
        raise ValueError(f"time steps {np.flatnonzero(~present).tolist()} have no visible token")


def encoder_forward(tokens: TokenSequence, encoder: Encoder, mask_id: str = "") -> ContextTokens:
    """Single-clip convenience wrapper around :class:`Encoder`."""
    _check_frames(tokens)
    p = next(encoder.parameters())
    x = torch.as_tensor(tokens.tokens, dtype=p.dtype)[None]
    pos = torch.as_tensor(tokens.pos_of)[None]
    c = encoder(x, pos)[0]
    return ContextTokens(c=c, pos_of=tokens.pos_of, time_of=tokens.time_of, produced_from=mask_id)


class ReferenceState:
    """EMA copy of the online encoder; never part of any autograd graph."""

    def __init__(self, encoder: Encoder, decay: float):
        self.module = copy.deepcopy(encoder)
        self.module.mask_mode = FRAME_WISE_CAUSAL
        self.module.requires_grad_(False)
        self.module.eval()
        self.decay = decay

    def parameters(self):
        return self.module.parameters()

    @torch.no_grad()
    def __call__(self, tokens, pos):
        return self.module(tokens, pos)


def reference_forward(tokens: TokenSequence, ref: ReferenceState) -> torch.Tensor:
    if not tokens.complete:
        raise ValueError("reference encoder expects the full, unmasked token lattice")
    p = next(ref.parameters())
    x = torch.as_tensor(tokens.tokens, dtype=p.dtype)[None]
    pos = torch.as_tensor(tokens.pos_of)[None]
    return ref(x, pos)[0]


@torch.no_grad()
def ema_update(ref: ReferenceState, online: nn.Module, m: Optional[float] = None) -> ReferenceState:
    """ref <- m * ref + (1 - m) * online, elementwise over all parameters and buffers."""
    m = ref.decay if m is None else m
    ref_sd, on_sd = ref.module.state_dict(), online.state_dict()
    if ref_sd.keys() != on_sd.keys():
        raise ValueError("reference and online encoders have different parameter sets")
    for k, r in ref_sd.items():
        o = on_sd[k]
        if r.shape != o.shape:
            raise ValueError(f"shape mismatch for {k}: {tuple(r.shape)} vs {tuple(o.shape)}")
        if m == 0.0:
            r.copy_(o)
        elif m != 1.0:
            r.mul_(m).add_(o, alpha=1.0 - m)
    return ref
