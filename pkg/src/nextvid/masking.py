"""Temporally consistent spatial masks and the three attention-mask modes."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, MaskConfig
from .dataio import TokenSequence

FRAME_WISE_CAUSAL = "frame_wise_causal"
AUTOREGRESSIVE = "autoregressive"
FRAME_ISOLATED = "frame_isolated"
MODES = (FRAME_WISE_CAUSAL, AUTOREGRESSIVE, FRAME_ISOLATED)

MAX_ATTEMPTS = 100


@dataclass(frozen=True)
class SpatialMask:
    """Hidden spatial positions; the same set applies at every time step."""

    hidden: tuple[int, ...]
    grid: tuple[int, int]
    seed: int = 0

    @property
    def n_spatial(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def ratio(self) -> float:
        return len(self.hidden) / self.n_spatial

    def visible(self) -> np.ndarray:
        keep = np.ones(self.n_spatial, dtype=bool)
        keep[list(self.hidden)] = False
        return np.flatnonzero(keep)

    def hidden_at(self, t: int) -> tuple[int, ...]:
        # time-independent by construction
        return self.hidden

    def dumps(self) -> str:
        return f"{self.grid[0]} {self.grid[1]}\n" + " ".join(map(str, self.hidden)) + "\n"

    @classmethod
    def loads(cls, text: str, seed: int = 0) -> "SpatialMask":
        lines = text.splitlines()
        rows, cols = map(int, lines[0].split())
        hidden = tuple(sorted(int(v) for v in (lines[1].split() if len(lines) > 1 else [])))
        return cls(hidden=hidden, grid=(rows, cols), seed=seed)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


def empty_mask(grid: tuple[int, int]) -> SpatialMask:
    return SpatialMask(hidden=(), grid=tuple(grid))


def _count_window(cfg: MaskConfig, n: int) -> tuple[int, int]:
    lo = math.ceil(cfg.spatial_scale[0] * n - 1e-9)
    hi = math.floor(cfg.spatial_scale[1] * n + 1e-9)
    # at least one visible token per frame
    hi = min(hi, n - 1)
    if lo > hi:
        raise ConfigError(
            f"mask scale {cfg.spatial_scale} admits no hidden count on a grid of {n} positions "
            "that leaves a visible token"
        )
    return lo, hi


def _draw_blocks(cfg: MaskConfig, rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    hidden = np.zeros((rows, cols), dtype=bool)
    n = rows * cols
    log_ar = (math.log(cfg.aspect_ratio[0]), math.log(cfg.aspect_ratio[1]))
    for _ in range(cfg.num_blocks):
        area = rng.uniform(*cfg.block_scale) * n
        ar = math.exp(rng.uniform(*log_ar))
        h = int(round(math.sqrt(area * ar)))
        w = int(round(math.sqrt(area / ar)))
        h, w = min(max(h, 1), rows), min(max(w, 1), cols)
        top = int(rng.integers(0, rows - h + 1))
        left = int(rng.integers(0, cols - w + 1))
        hidden[top:top + h, left:left + w] = True
    return hidden.ravel()


def sample_spatial_mask(cfg: MaskConfig, grid: tuple[int, int], seed: int) -> SpatialMask:
    """Union of rectangular blocks whose hidden ratio lands in ``cfg.spatial_scale``.

    Up to ``MAX_ATTEMPTS`` fresh draws are tried; after that the last draw is
    trimmed (highest indices first) or grown (lowest free indices first).
    """
    rows, cols = grid
    n = rows * cols
    lo, hi = _count_window(cfg, n)
    if hi == 0:
        return SpatialMask(hidden=(), grid=(rows, cols), seed=seed)
    rng = np.random.default_rng([seed, 0x6D61736B])
    hidden = np.zeros(n, dtype=bool)
    for _ in range(MAX_ATTEMPTS):
        hidden = _draw_blocks(cfg, rows, cols, rng)
        if lo <= hidden.sum() <= hi:
            break
    else:
        idx = np.flatnonzero(hidden)
        if len(idx) > hi:
            hidden[idx[hi:]] = False
        free = np.flatnonzero(~hidden)
        short = lo - int(hidden.sum())
        if short > 0:
            hidden[free[:short]] = True
    return SpatialMask(hidden=tuple(int(i) for i in np.flatnonzero(hidden)), grid=(rows, cols), seed=seed)


def apply_mask(tokens: TokenSequence, mask: SpatialMask) -> TokenSequence:
    if tuple(mask.grid) != tuple(tokens.grid):
        raise ValueError(f"mask grid {mask.grid} does not match token grid {tokens.grid}")
    if mask.n_spatial - len(mask.hidden) < 1:
        raise ValueError("mask hides every spatial position")
    keep = ~np.isin(tokens.spatial_of, np.asarray(mask.hidden, dtype=np.int64))
    return TokenSequence(
        tokens=tokens.tokens[keep], time_of=tokens.time_of[keep], pos_of=tokens.pos_of[keep],
        spatial_of=tokens.spatial_of[keep], grid=tokens.grid, T=tokens.T,
    )


@dataclass(frozen=True)
class AttentionMask:
    mode: str
    allow: np.ndarray  # [Q, K] bool
    q_time: np.ndarray
    k_time: np.ndarray


def allow_matrix(mode: str, q_time, k_time):
    """Boolean attendability for broadcastable time arrays (numpy or torch).

    ``q_time`` has shape [..., Q] and ``k_time`` [..., K]; result is [..., Q, K].
    """
    q = q_time[..., :, None]
    k = k_time[..., None, :]
    if mode == FRAME_WISE_CAUSAL:
        return k <= q
    if mode == AUTOREGRESSIVE:
        return k < q
    if mode == FRAME_ISOLATED:
        return k == q
    raise ValueError(f"unknown attention mask mode {mode!r}")


def build_attention_mask(mode: str, q_times, k_times) -> AttentionMask:
    q = np.asarray(q_times, dtype=np.int64)
    k = np.asarray(k_times, dtype=np.int64)
    if (q < 0).any() or (k < 0).any():
        raise ValueError("time steps must be non-negative")
    if mode == AUTOREGRESSIVE and len(q) and q.min() < 1:
        raise ValueError("autoregressive queries need time >= 1: nothing precedes time 0")
    allow = allow_matrix(mode, q, k)
    empty = ~allow.any(axis=1)
    if empty.any():
        raise ValueError(f"query rows {np.flatnonzero(empty).tolist()} have no allowed key")
    return AttentionMask(mode=mode, allow=allow, q_time=q, k_time=k)
