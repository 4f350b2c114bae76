import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from nextvid.config import ClipShape, ConfigError, MaskConfig, default_mask_strategies
from nextvid.dataio import TokenSequence, lattice
from nextvid.masking import (
    AUTOREGRESSIVE, FRAME_ISOLATED, FRAME_WISE_CAUSAL, SpatialMask, allow_matrix, apply_mask,
    build_attention_mask, empty_mask, sample_spatial_mask,
)


def seq(T, grid, D=3):
    time_of, pos_of, spatial_of = lattice(T, grid)
    tokens = np.arange(len(time_of) * D, dtype=np.float32).reshape(-1, D)
    return TokenSequence(tokens=tokens, time_of=time_of, pos_of=pos_of, spatial_of=spatial_of, grid=grid, T=T)


def test_ratio_within_paper_scale_8x8():
    m = sample_spatial_mask(MaskConfig(), (8, 8), seed=0)
    assert 0.15 <= m.ratio <= 0.7
    assert m.ratio == len(m.hidden) / 64


def test_zero_scale_gives_empty_mask():
    m = sample_spatial_mask(MaskConfig(spatial_scale=(0.0, 0.0)), (8, 8), seed=3)
    assert m.hidden == ()


def test_infeasible_window_is_config_error():
    # on 2 positions, 0.6..0.7 admits no integer count
    with pytest.raises(ConfigError):
        sample_spatial_mask(MaskConfig(spatial_scale=(0.6, 0.7)), (1, 2), seed=0)


def test_invalid_config_rejected():
    with pytest.raises(ConfigError):
        MaskConfig(spatial_scale=(0.7, 0.15))
    with pytest.raises(ConfigError):
        MaskConfig(aspect_ratio=(0.0, 1.0))


def test_same_seed_same_mask():
    cfg = default_mask_strategies()[1]
    assert sample_spatial_mask(cfg, (8, 8), 11) == sample_spatial_mask(cfg, (8, 8), 11)


def test_ratio_bound_over_1000_masks():
    ratios = [
        sample_spatial_mask(cfg, (8, 8), seed).ratio
        for cfg in default_mask_strategies() for seed in range(500)
    ]
    assert len(ratios) == 1000
    assert min(ratios) >= 0.15 and max(ratios) <= 0.7


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(4, 4), (6, 6), (8, 8), (4, 8)]), st.integers(0, 1))
def test_mask_always_leaves_visible_and_in_window(seed, grid, which):
    cfg = default_mask_strategies()[which]
    m = sample_spatial_mask(cfg, grid, seed)
    n = grid[0] * grid[1]
    assert 1 <= len(m.visible())
    assert np.ceil(0.15 * n - 1e-9) <= len(m.hidden) <= np.floor(0.7 * n + 1e-9)
    assert list(m.hidden) == sorted(set(m.hidden))


def test_temporal_consistency():
    m = sample_spatial_mask(MaskConfig(), (4, 4), 5)
    assert all(m.hidden_at(t) == m.hidden for t in range(8))
    out = apply_mask(seq(4, (4, 4)), m)
    for t in range(4):
        assert set(out.spatial_of[out.time_of == t]) == set(m.visible())


def test_apply_empty_mask_is_identity():
    s = seq(2, (2, 2))
    out = apply_mask(s, empty_mask((2, 2)))
    assert np.array_equal(out.tokens, s.tokens) and np.array_equal(out.pos_of, s.pos_of)


def test_apply_mask_hidden_zero():
    s = seq(2, (2, 2))
    out = apply_mask(s, SpatialMask(hidden=(0,), grid=(2, 2)))
    assert len(out) == 6
    assert 0 not in out.spatial_of
    assert np.all(np.diff(out.time_of) >= 0)
    # survivors keep their original rows
    assert np.array_equal(out.tokens, s.tokens[s.spatial_of != 0])


def test_apply_full_mask_rejected():
    with pytest.raises(ValueError):
        apply_mask(seq(2, (2, 2)), SpatialMask(hidden=(0, 1, 2, 3), grid=(2, 2)))


def test_mask_text_roundtrip(tmp_path):
    m = sample_spatial_mask(MaskConfig(), (6, 6), 9)
    assert SpatialMask.loads(m.dumps(), seed=9) == m
    m.dump(tmp_path / "m.txt")
    assert (tmp_path / "m.txt").read_text().startswith("6 6\n")


def test_frame_wise_causal_example():
    m = build_attention_mask(FRAME_WISE_CAUSAL, [0, 0, 1, 1], [0, 0, 1, 1])
    assert m.allow.astype(int).tolist() == [[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1]]


def test_frame_isolated_example():
    m = build_attention_mask(FRAME_ISOLATED, [0, 0, 1, 1], [0, 0, 1, 1])
    assert m.allow.astype(int).tolist() == [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]]


def test_autoregressive_example():
    m = build_attention_mask(AUTOREGRESSIVE, [1, 1, 2, 2], [0, 0, 1, 1])
    assert m.allow.astype(int).tolist() == [[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1]]


def test_autoregressive_time_zero_rejected():
    with pytest.raises(ValueError):
        build_attention_mask(AUTOREGRESSIVE, [0, 1], [0, 1])


def test_negative_time_and_unknown_mode_rejected():
    with pytest.raises(ValueError):
        build_attention_mask(FRAME_WISE_CAUSAL, [-1], [0])
    with pytest.raises(ValueError):
        build_attention_mask("bidirectional", [0], [0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=12), st.lists(st.integers(0, 5), min_size=1, max_size=12))
def test_mode_algebra(q, k):
    q, k = np.array(q), np.array(k)
    iso = allow_matrix(FRAME_ISOLATED, q, k)
    causal = allow_matrix(FRAME_WISE_CAUSAL, q, k)
    assert not (iso & ~causal).any()
    assert np.array_equal(allow_matrix(AUTOREGRESSIVE, q, k), allow_matrix(FRAME_WISE_CAUSAL, q - 1, k))


def test_allow_matrix_torch_matches_numpy():
    q, k = np.array([[0, 1, 2]]), np.array([[0, 1, 1, 2]])
    for mode in (FRAME_WISE_CAUSAL, AUTOREGRESSIVE, FRAME_ISOLATED):
        assert np.array_equal(allow_matrix(mode, torch.as_tensor(q), torch.as_tensor(k)).numpy(), allow_matrix(mode, q, k))


def test_shape_grid_matches_mask():
    shape = ClipShape(T_raw=4, H=8, W=8, C=1, patch_h=4, patch_w=4, tubelet_size=2)
    with pytest.raises(ValueError):
        apply_mask(seq(2, shape.grid), SpatialMask(hidden=(0,), grid=(4, 4)))
