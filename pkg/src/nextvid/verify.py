"""Structural invariant suite behind ``nextvid verify``.

Each check returns the measured error; a check passes when that error is
within its tolerance. Perturbation checks use tolerance 0 (bitwise).
"""
from __future__ import annotations

import time
import traceback
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .config import (
    ClipShape, DecoderConfig, EncoderConfig, MaskConfig, PredictorConfig, TrainConfig, default_mask_strategies,
    paper_schedule,
)
from .dataio import VideoClip, generate_synthetic_clip, lattice, patchify, unpatchify
from .encoder import Encoder, ReferenceState, ema_update
from .flowdecoder import FlowDecoder, draw_folds, euler_sample, flow_loss
from .masking import AUTOREGRESSIVE, FRAME_ISOLATED, FRAME_WISE_CAUSAL, allow_matrix, sample_spatial_mask
from .nncore import Attention, Rope3DSpec, grad_check, rope3d_apply
from .predictor import Predictor, query_positions
from .probe import ProbeHead

SHAPE = ClipShape(T_raw=6, H=8, W=8, C=3, patch_h=4, patch_w=4, tubelet_size=2)


@dataclass
class CheckResult:
    module: str
    name: str
    passed: bool
    error: float
    tol: float
    seconds: float
    detail: str = ""


def _randomize(module: torch.nn.Module, seed: int, std: float = 0.2) -> torch.nn.Module:
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * std)
    return module


def _pos(T: int, grid) -> torch.Tensor:
    return torch.as_tensor(lattice(T, grid)[1])[None]


def _maxdiff(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).detach().abs().max()) if a.numel() else 0.0


class Suite:
    """Builds every check; ``encoder_mode`` lets tests inject a non-causal encoder."""

    def __init__(self, encoder_mode: str = FRAME_WISE_CAUSAL, seed: int = 0):
        self.encoder_mode = encoder_mode
        self.seed = seed

    def encoder(self) -> Encoder:
        enc = Encoder(EncoderConfig(depth=2, width=16, heads=2), SHAPE.token_dim_raw, mask_mode=self.encoder_mode)
        return _randomize(enc.double(), self.seed)

    # ------------------------------------------------------------ dataio

    def patchify_roundtrip(self) -> float:
        clip = generate_synthetic_clip(self.seed, 3, SHAPE)
        return float(np.abs(unpatchify(patchify(clip, SHAPE), SHAPE).frames - clip.frames).max())

    # ----------------------------------------------------------- masking

    def mask_ratio_bound(self) -> float:
        lo, hi = MaskConfig().spatial_scale
        ratios = [sample_spatial_mask(c, (8, 8), s).ratio for c in default_mask_strategies() for s in range(500)]
        return max(0.0, lo - min(ratios), max(ratios) - hi)

    def mask_mode_algebra(self) -> float:
        rng = np.random.default_rng(self.seed)
        bad = 0
        for _ in range(50):
            q, k = rng.integers(0, 6, 10), rng.integers(0, 6, 12)
            iso, causal = allow_matrix(FRAME_ISOLATED, q, k), allow_matrix(FRAME_WISE_CAUSAL, q, k)
            bad += int((iso & ~causal).sum())
            bad += int((allow_matrix(AUTOREGRESSIVE, q, k) != allow_matrix(FRAME_WISE_CAUSAL, q - 1, k)).sum())
        return float(bad)

    # ------------------------------------------------------------ nncore

    def rope_norm(self) -> float:
        g = torch.Generator().manual_seed(self.seed)
        x = torch.randn(64, 16, generator=g, dtype=torch.float64)
        pos = torch.randint(0, 32, (64, 3), generator=g)
        y = rope3d_apply(x, pos, Rope3DSpec.default(16))
        return float((y.norm(dim=-1) - x.norm(dim=-1)).abs().max())

    def rope_relative(self) -> float:
        g = torch.Generator().manual_seed(self.seed)
        spec = Rope3DSpec.default(16)
        worst = 0.0
        for _ in range(20):
            q, k = torch.randn(1, 16, generator=g, dtype=torch.float64), torch.randn(1, 16, generator=g, dtype=torch.float64)
            p, d = torch.randint(0, 30, (1, 3), generator=g), torch.randint(-10, 10, (1, 3), generator=g)
            lhs = (rope3d_apply(q, p, spec) * rope3d_apply(k, p + d, spec)).sum()
            rhs = (rope3d_apply(q, torch.zeros_like(p), spec) * rope3d_apply(k, d, spec)).sum()
            worst = max(worst, abs(float(lhs - rhs)))
        return worst

    def attention_isolation(self) -> float:
        torch.manual_seed(self.seed)
        attn = Attention(16, 4).double()
        t = torch.tensor([0, 0, 1, 1])
        allow = allow_matrix(FRAME_ISOLATED, t, t)
        x = torch.randn(1, 4, 16, dtype=torch.float64)
        y = x.clone()
        y[:, 2:] = 0.0
        return _maxdiff(attn(x, allow=allow)[:, :2], attn(y, allow=allow)[:, :2])

    def primitive_grads(self) -> float:
        torch.manual_seed(self.seed)
        attn = _randomize(Attention(8, 2).double(), self.seed, 0.3)
        t = torch.tensor([0, 0, 1, 1])
        pos = torch.stack([t, torch.tensor([0, 1, 0, 1]), torch.zeros(4, dtype=torch.long)], -1)[None]
        allow = allow_matrix(FRAME_WISE_CAUSAL, t, t)
        x = torch.randn(1, 4, 8, dtype=torch.float64)
        return grad_check(lambda: attn(x, allow=allow, q_pos=pos).pow(2).sum(), list(attn.parameters()), n_coords=32).max_rel_err

    # ----------------------------------------------------------- encoder

    def encoder_causality(self) -> float:
        enc = self.encoder()
        n = SHAPE.N_s
        g = torch.Generator().manual_seed(self.seed)
        x = torch.randn(1, SHAPE.T * n, SHAPE.token_dim_raw, generator=g, dtype=torch.float64)
        pos = _pos(SHAPE.T, SHAPE.grid)
        worst = 0.0
        for t in range(SHAPE.T - 1):
            y = x.clone()
            y[:, (t + 1) * n:] += 10.0 * torch.randn(y[:, (t + 1) * n:].shape, generator=g, dtype=torch.float64)
            worst = max(worst, _maxdiff(enc(x, pos)[:, : (t + 1) * n], enc(y, pos)[:, : (t + 1) * n]))
        return worst

    def ema_closed_form(self) -> float:
        enc = self.encoder()
        ref = ReferenceState(enc, 0.99925)
        with torch.no_grad():
            for p in ref.parameters():
                p.fill_(1.0)
            for p in enc.parameters():
                p.fill_(0.0)
        ema_update(ref, enc)
        return max(float((p - 0.99925).abs().max()) for p in ref.parameters())

    def reference_no_grad(self) -> float:
        enc = self.encoder()
        ref = ReferenceState(enc, 0.99)
        x = torch.randn(1, SHAPE.T * SHAPE.N_s, SHAPE.token_dim_raw, dtype=torch.float64)
        pos = _pos(SHAPE.T, SHAPE.grid)
        (enc(x, pos) - ref(x, pos)).pow(2).sum().backward()
        return float(sum(0.0 if p.grad is None else float(p.grad.abs().sum()) for p in ref.parameters()))

    # --------------------------------------------------------- predictor

    def predictor_causality(self) -> float:
        torch.manual_seed(self.seed)
        pred = _randomize(Predictor(PredictorConfig(depth=2, width=16, heads=2), 16).double(), self.seed)
        n = SHAPE.N_s
        c = torch.randn(1, SHAPE.T * n, 16, dtype=torch.float64)
        cp = _pos(SHAPE.T, SHAPE.grid)
        qp = torch.as_tensor(query_positions(SHAPE.T, SHAPE.grid))[None]
        worst = 0.0
        for t in range(1, SHAPE.T):
            c2 = c.clone()
            c2[:, t * n:] += 10.0
            keep = qp[0, :, 0] <= t
            worst = max(worst, _maxdiff(pred(c, cp, qp)[:, keep], pred(c2, cp, qp)[:, keep]))
        return worst

    def predictor_isolation(self) -> float:
        pred = _randomize(Predictor(PredictorConfig(depth=2, width=16, heads=2), 16).double(), self.seed)
        c = torch.randn(1, SHAPE.T * SHAPE.N_s, 16, dtype=torch.float64)
        snap = c.clone()
        pred(c, _pos(SHAPE.T, SHAPE.grid), torch.as_tensor(query_positions(SHAPE.T, SHAPE.grid))[None])
        return _maxdiff(c, snap)

    # ------------------------------------------------------- flowdecoder

    def _decoder(self) -> FlowDecoder:
        dec = FlowDecoder(DecoderConfig(depth=2, width=16, heads=2, time_freq_dim=16), 16, SHAPE.token_dim_raw)
        return _randomize(dec.double(), self.seed)

    def _dec_inputs(self):
        L = (SHAPE.T - 1) * SHAPE.N_s
        g = torch.Generator().manual_seed(self.seed)
        z = torch.randn(1, L, 16, generator=g, dtype=torch.float64)
        x = torch.randn(1, L, SHAPE.token_dim_raw, generator=g, dtype=torch.float64)
        return z, x, torch.as_tensor(query_positions(SHAPE.T, SHAPE.grid))[None]

    def decoder_isolation(self) -> float:
        dec = self._decoder()
        z, x, pos = self._dec_inputs()
        n = SHAPE.N_s
        z2, x2 = z.clone(), x.clone()
        z2[:, n:] += 5.0
        x2[:, n:] += 5.0
        tau = torch.tensor([0.3], dtype=torch.float64)
        return _maxdiff(dec(z, x, tau, pos)[:, :n], dec(z2, x2, tau, pos)[:, :n])

    def flow_endpoints(self) -> float:
        from .flowdecoder import flow_interpolate
        _, x1, _ = self._dec_inputs()
        x0 = torch.randn_like(x1)
        return max(_maxdiff(flow_interpolate(x0, x1, 0.0), x0), _maxdiff(flow_interpolate(x0, x1, 1.0), x1))

    def flow_oracle(self) -> float:
        z, x1, pos = self._dec_inputs()
        draws = draw_folds(x1.shape, 4, torch.Generator().manual_seed(self.seed), dtype=torch.float64)
        x0 = torch.cat([d[1] for d in draws])
        v = x1.repeat(4, 1, 1) - x0
        return float(flow_loss(lambda *a: v, z, x1, 4, None, pos, draws=draws))

    def ktau_decomposition(self) -> float:
        dec = self._decoder()
        z, x1, pos = self._dec_inputs()
        draws = draw_folds(x1.shape, 4, torch.Generator().manual_seed(self.seed), dtype=torch.float64)
        with torch.no_grad():
            joint = flow_loss(dec, z, x1, 4, None, pos, draws=draws)
            singles = torch.stack([flow_loss(dec, z, x1, 1, None, pos, draws=[d]) for d in draws]).mean()
        return abs(float(joint - singles))

    def euler_constant_field(self) -> float:
        z, x0, pos = self._dec_inputs()
        x1 = torch.randn_like(x0)
        return _maxdiff(euler_sample(lambda *a: x1 - x0, z, pos, 8, x0=x0), x1)

    # ----------------------------------------------------------- trainer

    def schedule_fidelity(self) -> float:
        s = paper_schedule()
        ok = [st.k_tau for st in s] == [4, 4, 1, 1]
        ok &= [(st.start_lr, st.final_lr) for st in s] == [(1e-4, 5e-4), (5e-4, 4.5e-4), (4.5e-4, 1e-4), (1e-4, 1e-6)]
        ok &= TrainConfig().betas == (0.9, 0.95) and TrainConfig().grad_clip == 1.0
        return 0.0 if ok else 1.0

    # ------------------------------------------------------------- probe

    def probe_order_invariance(self) -> float:
        torch.manual_seed(self.seed)
        head = ProbeHead(8, 3, 2).double()
        f = torch.randn(2, 6, 8, dtype=torch.float64)
        return _maxdiff(head(f), head(f[:, torch.randperm(6)]))

    # ------------------------------------------------------------------

    def checks(self) -> list[tuple[str, str, Callable[[], float], float]]:
        return [
            ("dataio", "patchify_roundtrip", self.patchify_roundtrip, 0.0),
            ("masking", "ratio_bound_1000", self.mask_ratio_bound, 0.0),
            ("masking", "mode_algebra", self.mask_mode_algebra, 0.0),
            ("nncore", "rope_norm", self.rope_norm, 1e-6),
            ("nncore", "rope_relative_position", self.rope_relative, 1e-5),
            ("nncore", "attention_isolation", self.attention_isolation, 0.0),
            ("nncore", "primitive_grad_check", self.primitive_grads, 1e-3),
            ("encoder", "frame_wise_causality", self.encoder_causality, 0.0),
            ("encoder", "ema_closed_form", self.ema_closed_form, 1e-12),
            ("encoder", "reference_zero_grad", self.reference_no_grad, 0.0),
            ("predictor", "autoregressive_causality", self.predictor_causality, 0.0),
            ("predictor", "context_isolation", self.predictor_isolation, 0.0),
            ("flowdecoder", "frame_isolation", self.decoder_isolation, 0.0),
            ("flowdecoder", "path_endpoints", self.flow_endpoints, 0.0),
            ("flowdecoder", "oracle_velocity_loss", self.flow_oracle, 1e-12),
            ("flowdecoder", "ktau_decomposition", self.ktau_decomposition, 1e-9),
            ("flowdecoder", "euler_constant_field", self.euler_constant_field, 1e-12),
            ("trainer", "schedule_fidelity", self.schedule_fidelity, 0.0),
            ("probe", "pooling_order_invariance", self.probe_order_invariance, 1e-12),
        ]


def run_checks(encoder_mode: str = FRAME_WISE_CAUSAL, seed: int = 0) -> list[CheckResult]:
    out = []
    for module, name, fn, tol in Suite(encoder_mode, seed).checks():
        start = time.perf_counter()
        try:
            err = float(fn())
            out.append(CheckResult(module, name, err <= tol, err, tol, time.perf_counter() - start))
        except Exception as exc:  # a crashing check is a failing check
            out.append(CheckResult(module, name, False, float("nan"), tol, time.perf_counter() - start,
                                   f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"))
    return out


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'module':<12} {'check':<28} {'status':<6} {'error':>12} {'tol':>8}"]
    for r in results:
        lines.append(f"{r.module:<12} {r.name:<28} {'PASS' if r.passed else 'FAIL':<6} {r.error:>12.3e} {r.tol:>8.0e}")
        if r.detail:
            lines.append("    " + r.detail.strip().splitlines()[0])
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines)
