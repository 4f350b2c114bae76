"""Conditioned flow-matching decoder with frame-isolated attention."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import ClipShape, DecoderConfig
from .dataio import VideoClip, normalize, patchify_array
from .masking import FRAME_ISOLATED, allow_matrix
from .nncore import AdaLNModulate, Attention, Mlp, TimestepEmbedder, init_linear_, modulate

# ---------------------------------------------------------------- targets


class TargetExtractor:
    """Maps a clip to one target token per (t, y, x).

    ``pixel_cube`` is the normalized tubelet itself. ``pluggable_latent``
    wraps a per-frame function returning a latent map [h, w, c] whose
    spatial size is a multiple of the token grid; the frames of a tubelet
    are stacked along the latent channel axis before spatial patching.
    """

    def __init__(self, kind: str = "pixel_cube", frame_fn: Optional[Callable] = None, dim: Optional[int] = None):
        if kind not in ("pixel_cube", "pluggable_latent"):
            raise ValueError(f"unknown target kind {kind!r}")
        if kind == "pluggable_latent" and frame_fn is None:
            raise ValueError("pluggable_latent needs a frame function")
        self.kind = kind
        self.frame_fn = frame_fn
        self.dim = dim

    def output_dim(self, shape: ClipShape) -> int:
        return shape.token_dim_raw if self.kind == "pixel_cube" else int(self.dim)

    def __call__(self, frames: np.ndarray, shape: ClipShape) -> np.ndarray:
        """frames [..., T_raw, H, W, C] in [0, 1] -> [..., T, N_s, D]."""
        x = normalize(np.asarray(frames, dtype=np.float32))
        if self.kind == "pixel_cube":
            return patchify_array(x, shape)
        lead = x.shape[:-4]
        flat = x.reshape(-1, *x.shape[-3:])
        lat = np.stack([np.asarray(self.frame_fn(f), dtype=np.float32) for f in flat])
        _, h, w, c = lat.shape
        gh, gw = shape.grid
        if h % gh or w % gw:
            raise ValueError(f"latent map {h}x{w} does not tile the {gh}x{gw} token grid")
        lat = lat.reshape(*lead, shape.T, shape.tubelet_size, h, w, c)
        lat = np.moveaxis(lat, -4, -2)  # ..., T, h, w, tub, c
        lat = lat.reshape(*lead, shape.T, h, w, shape.tubelet_size * c)
        lat_shape = ClipShape(T_raw=shape.T, H=h, W=w, C=shape.tubelet_size * c, patch_h=h // gh, patch_w=w // gw, tubelet_size=1)
        out = patchify_array(lat, lat_shape)
        if self.dim is not None and out.shape[-1] != self.dim:
            raise ValueError(f"latent token dim {out.shape[-1]} != declared {self.dim}")
        return out


def extract_targets(clip: VideoClip, shape: ClipShape, extractor: Optional[TargetExtractor] = None) -> np.ndarray:
    clip.check(shape)
    return (extractor or TargetExtractor())(clip.frames, shape)


# ------------------------------------------------------------------ paths


@dataclass
class FlowSample:
    x0: torch.Tensor
    x1: torch.Tensor
    tau: torch.Tensor
    x_tau: torch.Tensor
    v: torch.Tensor


def _bcast(tau, like):
    tau = torch.as_tensor(tau, dtype=like.dtype)
    if tau.dim() == 0:
        return tau
    return tau.reshape(*tau.shape, *([1] * (like.dim() - tau.dim())))


def flow_interpolate(x0: torch.Tensor, x1: torch.Tensor, tau) -> torch.Tensor:
    if x0.shape != x1.shape:
        raise ValueError(f"x0 {tuple(x0.shape)} and x1 {tuple(x1.shape)} differ in shape")
    t = _bcast(tau, x0)
    return (1 - t) * x0 + t * x1


def make_flow_sample(x0, x1, tau) -> FlowSample:
    return FlowSample(x0=x0, x1=x1, tau=torch.as_tensor(tau), x_tau=flow_interpolate(x0, x1, tau), v=x1 - x0)


# ---------------------------------------------------------------- decoder


class DiTBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: float, rope_base: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(width, heads, rope_base=rope_base)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(width, mlp_ratio)
        self.ada = nn.Linear(width, 6 * width)

    def forward(self, x, cond, allow, pos):
        s1, sc1, g1, s2, sc2, g2 = self.ada(nn.functional.silu(cond)).unsqueeze(1).chunk(6, dim=-1)
        x = x + g1 * self.attn(modulate(self.norm1(x), s1, sc1), allow=allow, q_pos=pos)
        return x + g2 * self.mlp(modulate(self.norm2(x), s2, sc2))


class FlowDecoder(nn.Module):
    """DiT over per-token concat(condition, noisy target); predicts velocity."""

    def __init__(self, cfg: DecoderConfig, cond_dim: int, target_dim: int):
        super().__init__()
        self.cfg = cfg
        self.cond_dim = cond_dim
        self.target_dim = target_dim
        self.in_proj = nn.Linear(cond_dim + target_dim, cfg.width)
        self.t_embed = TimestepEmbedder(cfg.width, cfg.time_freq_dim)
        self.blocks = nn.ModuleList(DiTBlock(cfg.width, cfg.heads, cfg.mlp_ratio, cfg.rope_base) for _ in range(cfg.depth))
        self.final = AdaLNModulate(cfg.width, cfg.width)
        self.head = nn.Linear(cfg.width, target_dim)
        init_linear_(self)
        for blk in self.blocks:
            nn.init.zeros_(blk.ada.weight)
            nn.init.zeros_(blk.ada.bias)
        nn.init.zeros_(self.final.mod.weight)
        nn.init.zeros_(self.final.mod.bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, z, x_tau, tau, pos):
        """z [B, L, Dz], x_tau [B, L, Dt], tau [B], pos [B, L, 3] -> [B, L, Dt]."""
        if z.shape[:2] != x_tau.shape[:2] or pos.shape[:2] != z.shape[:2]:
            raise ValueError(f"lattice mismatch: z {tuple(z.shape)}, x_tau {tuple(x_tau.shape)}, pos {tuple(pos.shape)}")
        tau = torch.as_tensor(tau, dtype=z.dtype)
        if tau.dim() == 0:
            tau = tau.expand(z.shape[0])
        cond = self.t_embed(tau)
        x = self.in_proj(torch.cat([z, x_tau], dim=-1))
        frames = _regular_frames(pos[..., 0])
        if frames:
            # block-diagonal fast path: each frame becomes its own sequence
            B, L, _ = x.shape
            x = x.reshape(B * frames, L // frames, -1)
            pos = pos.reshape(B * frames, L // frames, 3)
            cond = cond.repeat_interleave(frames, dim=0)
            allow = None
        else:
            allow = allow_matrix(FRAME_ISOLATED, pos[..., 0], pos[..., 0])
        for blk in self.blocks:
            x = blk(x, cond, allow, pos)
        out = self.head(self.final(x, cond))
        return out.reshape(z.shape[0], z.shape[1], -1)


def _regular_frames(time: torch.Tensor) -> int:
    """Number of frames if every row is frame-major with equal-sized frames, else 0."""
    t0 = time[0]
    if not bool((time == t0).all()):
        return 0
    _, counts = torch.unique_consecutive(t0, return_counts=True)
    if len(counts) < 2 or not bool((counts == counts[0]).all()):
        return 0
    if len(torch.unique(t0)) != len(counts):
        return 0
    return len(counts)


def decoder_forward(z, x_tau, tau, decoder: FlowDecoder, pos) -> torch.Tensor:
    return decoder(z, x_tau, tau, pos)


# ------------------------------------------------------------------ losses


def draw_tau(n: int, generator: torch.Generator, mode: str = "uniform", dtype=torch.float32, timesteps: int = 1000):
    if mode == "uniform":
        return torch.rand(n, generator=generator, dtype=torch.float64).to(dtype)
    if mode == "grid":
        i = torch.randint(0, timesteps, (n,), generator=generator)
        return ((i.to(torch.float64) + 0.5) / timesteps).to(dtype)
    raise ValueError(f"unknown tau mode {mode!r}")


def draw_folds(shape: Sequence[int], k_tau: int, generator: torch.Generator, mode: str = "uniform", dtype=torch.float32):
    """k independent (tau, x0) draws; fold f consumes the rng before fold f+1."""
    out = []
    for _ in range(k_tau):
        tau = draw_tau(shape[0], generator, mode, dtype)
        x0 = torch.randn(*shape, generator=generator, dtype=torch.float64).to(dtype)
        out.append((tau, x0))
    return out


def flow_loss(decoder, z, targets, k_tau: int, generator: torch.Generator, pos, mode: str = "uniform", draws=None) -> torch.Tensor:
    """Mean squared velocity error over folds, tokens and channels.

    All folds run through the decoder as one batch; ``z`` is shared.
    """
    if k_tau < 1:
        raise ValueError("k_tau must be >= 1")
    draws = draws if draws is not None else draw_folds(targets.shape, k_tau, generator, mode, targets.dtype)
    taus = torch.cat([d[0] for d in draws])
    x0 = torch.cat([d[1] for d in draws])
    x1 = targets.repeat(k_tau, *([1] * (targets.dim() - 1)))
    sample = make_flow_sample(x0, x1, taus)
    zz = z.repeat(k_tau, *([1] * (z.dim() - 1)))
    pp = pos.expand(z.shape[0], -1, -1).repeat(k_tau, 1, 1)
    pred = decoder(zz, sample.x_tau, taus, pp)
    return (pred - sample.v).pow(2).mean()


@torch.no_grad()
def euler_sample(decoder, z, pos, steps: int, generator: Optional[torch.Generator] = None, x0=None, target_dim: Optional[int] = None):
    """Integrate dx/dtau = g(x, z, tau) from tau=0 to 1 with ``steps`` Euler steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if x0 is None:
        dim = target_dim if target_dim is not None else decoder.target_dim
        x0 = torch.randn(*z.shape[:-1], dim, generator=generator, dtype=torch.float64).to(z.dtype)
    x = x0
    for i in range(steps):
        tau = torch.full((z.shape[0],), i / steps, dtype=z.dtype)
        x = x + decoder(z, x, tau, pos) / steps
    return x
