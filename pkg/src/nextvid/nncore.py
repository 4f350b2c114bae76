"""Neural building blocks: masked attention, 3D RoPE, AdaLN, MLP.

Also hosts the finite-difference gradient checker and the named-array
checkpoint archive.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError

NEG_INF = -1e30


# ------------------------------------------------------------------ rope


@dataclass(frozen=True)
class Rope3DSpec:
    head_dim: int
    axis_split: tuple[int, int, int]
    base: float = 10000.0

    def __post_init__(self):
        if sum(self.axis_split) != self.head_dim:
            raise ConfigError(f"axis split {self.axis_split} does not sum to head_dim {self.head_dim}")
        if any(d % 2 or d < 0 for d in self.axis_split):
            raise ConfigError(f"every RoPE axis block must be even, got {self.axis_split}")
        if self.base <= 0:
            raise ConfigError("RoPE base must be positive")

    @classmethod
    def default(cls, head_dim: int, base: float = 10000.0) -> "Rope3DSpec":
        """Proportional 2:3:3 split of (t, y, x), each rounded to an even size."""
        if head_dim % 2:
            raise ConfigError(f"head_dim must be even for RoPE, got {head_dim}")
        d_t = 2 * round(head_dim * 2 / 8 / 2)
        d_t = min(max(d_t, 2 if head_dim >= 6 else 0), head_dim)
        rest = head_dim - d_t
        d_y = 2 * ((rest // 2) // 2)
        return cls(head_dim, (d_t, d_y, rest - d_y), base)


def rope3d_angles(positions: torch.Tensor, spec: Rope3DSpec, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables of shape [..., L, head_dim/2] for integer (t, y, x) positions."""
    pieces = []
    for axis, d in enumerate(spec.axis_split):
        if d == 0:
            continue
        i = torch.arange(d // 2, dtype=torch.float64)
        inv = spec.base ** (-2.0 * i / d)
        pieces.append(positions[..., axis, None].to(torch.float64) * inv)
    ang = torch.cat(pieces, dim=-1)
    return ang.cos().to(dtype), ang.sin().to(dtype)


def rope_rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate adjacent pairs (x[2i], x[2i+1]) by the tabulated angles."""
    x2 = x.reshape(*x.shape[:-1], -1, 2)
    a, b = x2[..., 0], x2[..., 1]
    out = torch.stack([a * cos - b * sin, a * sin + b * cos], dim=-1)
    return out.reshape(x.shape)


def rope3d_apply(tokens: torch.Tensor, positions: torch.Tensor, spec: Rope3DSpec) -> torch.Tensor:
    if tokens.shape[-1] != spec.head_dim:
        raise ConfigError(f"token dim {tokens.shape[-1]} does not match RoPE head_dim {spec.head_dim}")
    cos, sin = rope3d_angles(positions, spec, tokens.dtype)
    return rope_rotate(tokens, cos, sin)


# ------------------------------------------------------------- attention


def mask_bias(allow: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    """Additive logit bias: 0 where allowed, -1e30 elsewhere.

    Rejects masks with a query row that allows no key.
    """
    if not bool(allow.any(dim=-1).all()):
        raise ValueError("attention mask has a query row with no allowed key")
    return torch.zeros(allow.shape, dtype=dtype).masked_fill_(~allow, NEG_INF)


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, allow: Optional[torch.Tensor]) -> torch.Tensor:
    """Scaled dot-product attention under a boolean [.., Q, K] ``allow`` mask.

    A precomputed float bias from :func:`mask_bias` is accepted as well.
    Disallowed logits get -1e30 added so they vanish after softmax without
    producing NaNs.
    """
    if allow is not None and allow.dtype == torch.bool:
        allow = mask_bias(allow, q.dtype)
    return F.scaled_dot_product_attention(q, k, v, attn_mask=allow)


def masked_attention_reference(q, k, v, allow):
    """Explicit softmax(QK^T/sqrt(d) + bias) V; used to cross-check the fused path."""
    logits = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if allow is not None:
        if not bool(allow.any(dim=-1).all()):
            raise ValueError("attention mask has a query row with no allowed key")
        logits = logits.masked_fill(~allow, NEG_INF)
    return torch.matmul(logits.softmax(dim=-1), v)


class Attention(nn.Module):
    """Multi-head attention usable for self- or cross-attention, with optional 3D RoPE."""

    def __init__(self, dim: int, heads: int, kv_dim: Optional[int] = None, rope_base: Optional[float] = 10000.0):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        kv_dim = kv_dim or dim
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.rope = Rope3DSpec.default(self.head_dim, rope_base) if rope_base else None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        return x.view(B, L, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, context=None, allow=None, q_pos=None, k_pos=None):
        context = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        if self.rope is not None and q_pos is not None:
            k_pos = q_pos if k_pos is None else k_pos
            q = rope3d_apply(q, q_pos[:, None], self.rope)
            k = rope3d_apply(k, k_pos[:, None], self.rope)
        if allow is not None and allow.dim() == 3:
            allow = allow[:, None]
        if allow is not None and allow.dtype != q.dtype and allow.dtype != torch.bool:
            allow = allow.to(q.dtype)
        out = masked_attention(q, k, v, allow)
        B, _, L, _ = out.shape
        return self.proj(out.transpose(1, 2).reshape(B, L, -1))


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float = 4.0, out_dim: Optional[int] = None):
        super().__init__()
        hidden = int(round(dim * ratio))
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim or dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


# ----------------------------------------------------------------- adaln


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale) + shift


class AdaLNModulate(nn.Module):
    """LayerNorm(x) * (1 + scale(c)) + shift(c), identity-LayerNorm at init."""

    def __init__(self, dim: int, cond_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mod = nn.Linear(cond_dim, 2 * dim)
        nn.init.zeros_(self.mod.weight)
        nn.init.zeros_(self.mod.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shift, scale = self.mod(F.silu(cond)).unsqueeze(-2).chunk(2, dim=-1)
        return modulate(self.norm(x), shift, scale)


def adaln_modulate(tokens: torch.Tensor, timestep_embedding: torch.Tensor, params: AdaLNModulate) -> torch.Tensor:
    return params(tokens, timestep_embedding)


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimestepEmbedder(nn.Module):
    """Sinusoidal features of tau * 1000 followed by a two-layer MLP."""

    def __init__(self, dim: int, freq_dim: int = 64, scale: float = 1000.0):
        super().__init__()
        self.freq_dim = freq_dim
        self.scale = scale
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, tau: torch.Tensor) -> torch.Tensor:
        feats = sinusoidal_embedding(tau * self.scale, self.freq_dim).to(self.mlp[0].weight.dtype)
        return self.mlp(feats)


def init_linear_(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


# ------------------------------------------------------------ grad check


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_coords: int
    tol: float
    worst: tuple = ()
    errors: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-4,
    tol: float = 1e-3,
    n_coords: int = 64,
    seed: int = 0,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients with central finite differences.

    Coordinates are drawn uniformly over all parameter entries. The relative
    error uses ``max(|analytic|, |numeric|, abs_floor)`` as denominator so
    that exactly-zero gradients compare cleanly.
    """
    params = list(params)
    loss = f()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]
    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errors, worst = [], ()
    max_err = 0.0
    with torch.no_grad():
        for fi in flat_idx:
            pi = int(np.searchsorted(offsets, fi, side="right") - 1)
            j = int(fi - offsets[pi])
            flat = params[pi].view(-1)
            orig = flat[j].item()
            flat[j] = orig + eps
            up = f().item()
            flat[j] = orig - eps
            down = f().item()
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            analytic = grads[pi].view(-1)[j].item()
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)
            errors.append((pi, j, analytic, numeric, err))
            if err >= max_err:
                max_err, worst = err, (pi, j, analytic, numeric)
    return GradCheckReport(max_rel_err=max_err, n_coords=len(errors), tol=tol, worst=worst, errors=errors)


# ---------------------------------------------------------------- archive

ARCHIVE_MAGIC = b"NXTP"
ARCHIVE_VERSION = 1


class ArchiveError(ValueError):
    pass


def save_archive(path: str | Path, arrays: dict[str, np.ndarray], meta: Optional[dict] = None) -> str:
    """Write a named-array archive; returns the payload sha256.

    Layout: magic, u32 version, u64 manifest length, manifest JSON, payload.
    Every array is stored little-endian in C order.
    """
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).hexdigest()
    manifest = json.dumps({"entries": entries, "sha256": digest, "meta": meta or {}}, sort_keys=True).encode()
    Path(path).write_bytes(ARCHIVE_MAGIC + struct.pack("<IQ", ARCHIVE_VERSION, len(manifest)) + manifest + payload)
    return digest


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != ARCHIVE_MAGIC:
        raise ArchiveError(f"{path}: bad magic")
    version, mlen = struct.unpack("<IQ", raw[4:16])
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"{path}: unsupported archive version {version}")
    manifest = json.loads(raw[16:16 + mlen])
    payload = raw[16 + mlen:]
    if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
        raise ArchiveError(f"{path}: checksum mismatch")
    arrays = {}
    for e in manifest["entries"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, manifest["meta"]


def module_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    sd = module.state_dict()
    missing = [k for k in sd if prefix + k not in arrays]
    if missing:
        raise ArchiveError(f"archive lacks parameters {missing[:5]}")
    module.load_state_dict({k: torch.from_numpy(arrays[prefix + k]).to(sd[k].dtype) for k in sd})
