"""Sampling with a trained model: masked generation, seed-frame rollout, next-frame error."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .config import ClipShape
from .dataio import denormalize, lattice, normalize, patchify_array, unpatchify_array
from .flowdecoder import euler_sample
from .masking import SpatialMask
from .predictor import query_positions
from .trainer import NextVid


def _model_dtype(model: NextVid):
    return next(model.parameters()).dtype


def _check_pixel(model: NextVid, shape: ClipShape) -> None:
    if model.decoder.target_dim != shape.token_dim_raw:
        raise ValueError("pixel generation needs a model trained on pixel targets")


@torch.no_grad()
def predict_next(model: NextVid, tokens: np.ndarray, shape: ClipShape, visible: np.ndarray, steps: int, generator: torch.Generator) -> np.ndarray:
    """Sample every time step t >= 1 from context at times < t.

    tokens [B, T, N, D] normalized, visible spatial indices -> [B, T-1, N, D].
    """
    model.eval()
    dtype = _model_dtype(model)
    B, T, N, D = tokens.shape
    _, pos_np, _ = lattice(T, shape.grid)
    pos = torch.from_numpy(pos_np).reshape(T, N, 3)[:, visible].reshape(1, -1, 3).expand(B, -1, -1)
    x = torch.from_numpy(np.ascontiguousarray(tokens[:, :, visible])).to(dtype).reshape(B, -1, D)
    c = model.encoder(x, pos)
    qp = torch.from_numpy(query_positions(T, shape.grid))[None].expand(B, -1, -1)
    z = model.predictor(c, pos, qp)
    out = euler_sample(model.decoder, z, qp, steps, generator)
    return out.reshape(B, T - 1, N, -1).double().numpy()


@dataclass
class MaskedGeneration:
    original: np.ndarray  # [T_raw, H, W, C]
    masked: np.ndarray
    generated: np.ndarray


def masked_generation(model: NextVid, frames: np.ndarray, shape: ClipShape, mask: SpatialMask, steps: int = 8, seed: int = 0) -> MaskedGeneration:
    """Regenerate frames 1..T-1 of a clip from its masked view; frame 0 is kept."""
    _check_pixel(model, shape)
    tok = patchify_array(normalize(frames[None]), shape)
    gen = predict_next(model, tok, shape, mask.visible(), steps, torch.Generator().manual_seed(seed))
    full = np.concatenate([tok[:, :1], gen], axis=1)
    generated = np.clip(denormalize(unpatchify_array(full, shape)[0]), 0.0, 1.0)
    gray = tok.copy()
    gray[:, :, list(mask.hidden)] = 0.0  # normalized 0 is mid-gray
    masked = denormalize(unpatchify_array(gray, shape)[0])
    return MaskedGeneration(original=frames, masked=masked, generated=generated)


@torch.no_grad()
def rollout(model: NextVid, seed_frame: np.ndarray, shape: ClipShape, steps: int = 8, seed: int = 0) -> np.ndarray:
    """Autoregressive generation from one still frame.

    The seed frame fills time step 0; each later step is sampled from all
    earlier ones and fed back. Returns [T_raw, H, W, C] whose first tubelet
    is the seed and whose remaining T-1 tubelets are generated.
    """
    _check_pixel(model, shape)
    model.eval()
    dtype = _model_dtype(model)
    gen = torch.Generator().manual_seed(seed)
    T, N = shape.T, shape.N_s
    still = np.repeat(np.asarray(seed_frame, dtype=np.float32)[None], shape.T_raw, axis=0)
    tok = patchify_array(normalize(still), shape).astype(np.float64)
    tok[1:] = 0.0
    _, pos_np, _ = lattice(T, shape.grid)
    pos_all = torch.from_numpy(pos_np)
    for t in range(1, T):
        ctx = torch.from_numpy(tok[:t].reshape(1, t * N, -1)).to(dtype)
        c = model.encoder(ctx, pos_all[None, : t * N])
        qp = pos_all[None, t * N:(t + 1) * N]
        z = model.predictor(c, pos_all[None, : t * N], qp)
        tok[t] = euler_sample(model.decoder, z, qp, steps, gen)[0].double().numpy()
    return np.clip(denormalize(unpatchify_array(tok, shape)), 0.0, 1.0)


def next_frame_errors(model: NextVid, frames: np.ndarray, shape: ClipShape, steps: int = 8, seed: int = 0, batch_size: int = 32):
    """Per-clip pixel MSE of sampled next frames vs copying the previous frame.

    The model sees the full, unmasked past. Both errors are measured on
    time steps 1..T-1 in [0, 1] pixel units. Returns (model_mse, copy_mse).
    """
    _check_pixel(model, shape)
    gen = torch.Generator().manual_seed(seed)
    model_err, copy_err = [], []
    every = np.arange(shape.N_s)
    for s in range(0, len(frames), batch_size):
        chunk = frames[s:s + batch_size]
        tok = patchify_array(normalize(chunk), shape)
        pred = predict_next(model, tok, shape, every, steps, gen)
        pred_px = np.clip(denormalize(pred), 0.0, 1.0)
        truth = patchify_array(chunk, shape).astype(np.float64)
        model_err.append(((pred_px - truth[:, 1:]) ** 2).mean(axis=(1, 2, 3)))
        copy_err.append(((truth[:, :-1] - truth[:, 1:]) ** 2).mean(axis=(1, 2, 3)))
    if not model_err:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(model_err), np.concatenate(copy_err)
