import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vqprior_ad.config import PriorConfig, ScoringConfig, TokenizerConfig
from vqprior_ad.data import SeriesRecord
from vqprior_ad.errors import ConfigError, ShapeError
from vqprior_ad.prior import PriorModel
from vqprior_ad.scoring import (
    aggregate,
    latent_score_maps,
    latent_window_score,
    map_to_data_space,
    moving_average,
    read_score_csv,
    score_array,
    score_series,
    score_window,
    write_score_csv,
)
from vqprior_ad.tokenizer import Tokenizer

from oracles import naive_moving_average, naive_score


def tiny_models(n_fft=2, W=4, K=4, T=16, seed=0):
    torch.manual_seed(seed)
    tok = Tokenizer(TokenizerConfig(n_fft=n_fft, latent_dim=4, codebook_size=K, latent_width=W, hidden_channels=4), T)
    tok.vq._init_from(torch.randn(64, 4))
    tok.eval()
    H = tok.n_freq
    prior = PriorModel(PriorConfig(n_layers=2, width=16, n_heads=2, dropout=0.0), K, H, W).eval()
    return tok, prior


def uniform_prior(K, H, W):
    prior = PriorModel(PriorConfig(n_layers=1, width=8, n_heads=2, dropout=0.0), K, H, W).eval()
    last = prior.head[-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.zero_()
    return prior


# ----------------------------------------------------------- latent scores


def test_uniform_logits_give_log_k():
    prior = uniform_prior(128, 3, 32)
    s = torch.randint(0, 128, (3, 32), generator=torch.Generator().manual_seed(0))
    for w, alpha in [(0, 1), (10, 3), (31, 8)]:
        np.testing.assert_allclose(latent_window_score(s, w, alpha, prior), math.log(128), atol=1e-6)
    maps = latent_score_maps(s[None], 4, prior)
    np.testing.assert_allclose(maps.numpy(), math.log(128), atol=1e-6)


def test_saturated_window_equals_full_mask():
    _, prior = tiny_models()
    s = torch.randint(0, 4, (2, 4), generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        u = prior(torch.full((1, 2, 4), prior.mask_id))[0]
    full = -torch.log_softmax(u, -1).gather(-1, s[..., None])[..., 0].double().mean(1).numpy()
    for w in range(4):
        np.testing.assert_allclose(latent_window_score(s, w, 100, prior), full, atol=1e-6)


def test_maps_match_single_window_scores():
    _, prior = tiny_models(n_fft=4, W=8, K=16)
    s = torch.randint(0, 16, (5, 3, 8), generator=torch.Generator().manual_seed(2))
    for alpha in (1, 2, 4):
        maps = latent_score_maps(s, alpha, prior, batch_size=7).numpy()
        for n in range(5):
            for w in range(8):
                np.testing.assert_allclose(maps[n, :, w], latent_window_score(s[n], w, alpha, prior), atol=1e-6)


def test_column_out_of_range():
    _, prior = tiny_models()
    with pytest.raises(IndexError):
        latent_window_score(torch.zeros(2, 4, dtype=torch.long), 4, 1, prior)


def test_score_window_shapes_and_invariance():
    tok, prior = tiny_models(n_fft=4, W=8, K=16, T=32)
    x = np.sin(np.arange(32) / 3.0) + 0.1 * np.arange(32) / 32
    a = score_window(x, [1, 2], tok, prior)
    b = score_window(x, [1, 2], tok, prior)
    c = score_window(2.0 * x + 5.0, [1, 2], tok, prior)
    for alpha in (1, 2):
        assert a[alpha].shape == (3, 8)
        np.testing.assert_array_equal(a[alpha], b[alpha])
        np.testing.assert_allclose(a[alpha], c[alpha], atol=1e-5)


# ---------------------------------------------------------- data mapping


def test_map_examples():
    row = np.array([[1.0, 2.0, 3.0, 4.0]])
    assert map_to_data_space(row, 8).tolist() == [[1, 1, 2, 2, 3, 3, 4, 4]]
    np.testing.assert_array_equal(map_to_data_space(row, 4), row)
    idx = map_to_data_space(np.array([[0, 1, 2]]), 8)
    assert idx.tolist() == [[0, 0, 0, 1, 1, 1, 2, 2]]


def test_map_too_short():
    with pytest.raises(ShapeError):
        map_to_data_space(np.zeros((2, 8)), 7)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 60))
def test_map_contiguous(W, extra):
    T = W + extra
    idx = map_to_data_space(np.arange(W)[None], T)[0]
    assert idx[0] == 0 and idx[-1] == W - 1
    assert set(np.diff(idx)) <= {0, 1}
    assert len(set(idx)) == W


# --------------------------------------------------------- moving average


def test_moving_average_example():
    out = moving_average(np.array([0, 0, 10, 0, 0.0]), 5)
    np.testing.assert_allclose(out, [10 / 3, 10 / 4, 2, 10 / 4, 10 / 3])


def test_moving_average_identity_cases():
    v = np.random.default_rng(0).normal(size=13)
    np.testing.assert_array_equal(moving_average(v, 1), v)
    np.testing.assert_allclose(moving_average(np.full(9, 2.5), 4), 2.5)
    with pytest.raises(ValueError):
        moving_average(v, 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.integers(1, 50))
def test_moving_average_oracle(values, window):
    v = np.array(values)
    np.testing.assert_allclose(moving_average(v, window), naive_moving_average(v, window), atol=1e-9)


# ------------------------------------------------------------ aggregation


def test_constant_field_fixed_point():
    raw = {1: np.full((3, 50), 2.0), 2: np.full((3, 50), 4.0)}
    counts = np.ones(50)
    _, summed, abar, abarbar, final = aggregate(raw, counts, 10)
    np.testing.assert_allclose(summed, 6.0)
    np.testing.assert_allclose(abar, 6.0)
    np.testing.assert_allclose(abarbar, 6.0)
    np.testing.assert_allclose(final, 6.0)


def test_raw_mode_skips_division():
    raw = {1: np.full((2, 6), 3.0)}
    counts = np.array([1, 2, 3, 3, 2, 1.0])
    per_alpha, *_ = aggregate(raw, counts, 2, normalize=False)
    np.testing.assert_array_equal(per_alpha[1], raw[1])
    per_alpha, *_ = aggregate(raw, counts, 2, normalize=True)
    np.testing.assert_allclose(per_alpha[1][0], 3.0 / counts)


# ------------------------------------------------------------ full series


def record_for(values, T):
    n = len(values)
    # whole series is the test split except the leading training stretch of length T
    return SeriesRecord("toy", np.concatenate([np.sin(np.arange(T)), values]), T, T, T + 1, T // 2)


@pytest.mark.parametrize("normalize", [True, False])
def test_stride_t_matches_naive_oracle(normalize):
    T = 16
    tok, prior = tiny_models(T=T)
    values = np.sin(np.arange(2 * T) / 2.0) + 0.3 * np.random.default_rng(0).normal(size=2 * T)
    cfg = ScoringConfig(window_rates=(0.5, 0.7), stride_rate=1.0, normalize_overlap=normalize)
    bundle = score_series(record_for(values, T), tok, prior, cfg)
    ref = naive_score(values, T, T, tok, prior, cfg.window_rates, normalize)
    assert bundle.meta["stride"] == T
    np.testing.assert_allclose(bundle.summed, ref["summed"], atol=1e-6)
    np.testing.assert_allclose(bundle.final, ref["final"], atol=1e-6)
    np.testing.assert_array_equal(bundle.counts, ref["counts"])


def test_stride_one_against_oracle():
    T = 16
    tok, prior = tiny_models(T=T, seed=3)
    values = np.cos(np.arange(40) / 3.0)
    cfg = ScoringConfig(window_rates=(0.5,), stride_rate=0.01)
    bundle = score_array(values, T, tok, prior, cfg)
    ref = naive_score(values, T, 1, tok, prior, cfg.window_rates)
    assert bundle.final.shape == (40,)
    np.testing.assert_allclose(bundle.final, ref["final"], atol=1e-6)


def test_bundle_invariants():
    T = 16
    tok, prior = tiny_models(T=T, seed=4)
    values = np.random.default_rng(1).normal(size=75)
    bundle = score_array(values, T, tok, prior, ScoringConfig(window_rates=(0.5, 0.7), stride_rate=0.3))
    for stage in (bundle.summed, bundle.abar, bundle.abarbar, bundle.final, *bundle.per_alpha.values()):
        assert (stage >= 0).all()
    np.testing.assert_array_equal(bundle.final, (bundle.abar + bundle.abarbar) / 2)
    np.testing.assert_array_equal(bundle.summed, sum(bundle.per_alpha[a] for a in sorted(bundle.per_alpha)))
    # stride 5 over T=16: interior counts are ceil(16/5) or one less, never zero
    assert bundle.counts.min() >= 1
    interior = bundle.counts[T:-T]
    assert set(np.unique(interior)) <= {3, 4}
    assert bundle.counts[0] == 1


def test_parallel_alphas_match_serial():
    T = 16
    tok, prior = tiny_models(T=T, seed=5)
    values = np.random.default_rng(2).normal(size=60)
    serial = score_array(values, T, tok, prior, ScoringConfig(window_rates=(0.5, 0.7), workers=1))
    par = score_array(values, T, tok, prior, ScoringConfig(window_rates=(0.5, 0.7), workers=2))
    np.testing.assert_array_equal(serial.final, par.final)


def test_config_errors():
    with pytest.raises(ConfigError):
        ScoringConfig(window_rates=()).alphas(32)
    with pytest.raises(ConfigError):
        ScoringConfig(window_rates=(0.8,)).alphas(32)
    with pytest.raises(ConfigError):
        ScoringConfig(stride_rate=1.5).stride(100)
    assert ScoringConfig().alphas(32) == [1, 4, 8]
    assert ScoringConfig(stride_rate=0.1).stride(100) == 10
    assert ScoringConfig(stride_rate=0.1).stride(105) == 11  # 10.5 rounds up


def test_short_region():
    tok, prior = tiny_models(T=16)
    with pytest.raises(ShapeError):
        score_array(np.zeros(10), 16, tok, prior, ScoringConfig())


def test_csv_roundtrip(tmp_path):
    T = 16
    tok, prior = tiny_models(T=T)
    bundle = score_array(np.random.default_rng(3).normal(size=40), T, tok, prior, ScoringConfig(), offset=100)
    path = tmp_path / "s.csv"
    write_score_csv(bundle, path)
    text = path.read_bytes()
    assert text.startswith(b"timestep,a_final,abar,abarbar,band_0,band_1\n")
    assert b"\r" not in text
    back = read_score_csv(path)
    np.testing.assert_array_equal(back["timestep"], np.arange(100, 140))
    np.testing.assert_allclose(back["a_final"], bundle.final, rtol=1e-5)
