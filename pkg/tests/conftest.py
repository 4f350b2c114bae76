import numpy as np
import pytest
import torch

from nextvid.config import ClipShape, DecoderConfig, EncoderConfig, PredictorConfig
from nextvid.dataio import lattice

torch.set_num_threads(1)

TINY = ClipShape(T_raw=6, H=8, W=8, C=3, patch_h=4, patch_w=4, tubelet_size=2)  # T=3, grid 2x2


def randomize_(module, std=0.2, seed=0):
    """Overwrite every parameter (including zero-initialized ones) with noise."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * std)
    return module


def full_positions(T, grid, batch=1):
    _, pos, _ = lattice(T, grid)
    return torch.as_tensor(pos)[None].expand(batch, -1, -1)


@pytest.fixture
def tiny_shape():
    return TINY


@pytest.fixture
def tiny_cfgs():
    return EncoderConfig(depth=2, width=16, heads=2), PredictorConfig(depth=2, width=16, heads=2), DecoderConfig(depth=2, width=16, heads=2, time_freq_dim=16)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def micro_config(seed=0, steps=(2, 2, 2, 2), batch=4, dtype="float32", width=16, **train_kw):
    """Smallest RunConfig that still runs every stage: T=2 time steps on a 2x2 grid."""
    from nextvid.config import LossWeights, RunConfig, StageSpec, TrainConfig

    names = ("warmup", "stable1", "stable2", "cooldown")
    lrs = ((1e-4, 5e-4, None, 4), (5e-4, 4.5e-4, None, 4), (4.5e-4, 1e-4, 8e-4, 1), (1e-4, 1e-6, 3e-4, 1))
    sched = tuple(StageSpec(n, s, a, b, f, k, 4, batch) for n, s, (a, b, f, k) in zip(names, steps, lrs))
    return RunConfig(
        seed=seed,
        shape=ClipShape(T_raw=4, H=8, W=8, C=3, patch_h=4, patch_w=4, tubelet_size=2),
        encoder=EncoderConfig(depth=1, width=width, heads=2),
        predictor=PredictorConfig(depth=1, width=width, heads=2),
        decoder=DecoderConfig(depth=1, width=width, heads=2, time_freq_dim=16),
        loss=LossWeights(),
        schedule=sched,
        train=TrainConfig(ema=0.9, dtype=dtype, **train_kw),
    )


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
