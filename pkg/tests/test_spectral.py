import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vqprior_ad.errors import ShapeError
from vqprior_ad.spectral import Spectrogram, istft, n_frames, stft

from oracles import dft_frames


def test_height_from_n_fft():
    spec = stft(torch.zeros(32, dtype=torch.float64), n_fft=4)
    assert spec.n_freq == 3
    assert spec.data.shape == (2, 3, n_frames(32, 1))


def test_matches_dft_oracle():
    x = np.random.default_rng(0).normal(size=40)
    for n_fft, hop, window in [(4, 1, "rect"), (8, 2, "rect"), (4, 1, "hann"), (8, 2, "hann")]:
        ref = dft_frames(x, n_fft, hop, window)
        got = stft(torch.from_numpy(x), n_fft, hop, window).data.numpy()
        np.testing.assert_allclose(got[0], ref.real, atol=1e-10)
        np.testing.assert_allclose(got[1], ref.imag, atol=1e-10)


def test_zero_in_zero_out():
    spec = stft(torch.zeros(50, dtype=torch.float64))
    assert torch.count_nonzero(spec.data) == 0
    assert torch.count_nonzero(istft(spec)) == 0


def test_constant_energy_in_row_zero_rect():
    spec = stft(torch.ones(64, dtype=torch.float64), window="rect")
    mag = spec.data.pow(2).sum(0).sqrt()
    assert mag[0].min() > 0.5
    assert mag[1:].max() < 1e-10
    # oracle agrees on the same claim
    ref = dft_frames(np.ones(64), 4, 1)
    assert np.abs(ref[1:]).max() < 1e-10


def test_hann_constant_leaks_into_row_one():
    # periodic Hann [0, .5, 1, .5] has a nonzero DFT at bin 1, so a constant is not confined to row 0
    spec = stft(torch.ones(64, dtype=torch.float64), window="hann")
    mag = spec.data.pow(2).sum(0).sqrt().numpy()
    ref = np.abs(dft_frames(np.ones(64), 4, 1, "hann"))
    np.testing.assert_allclose(mag, ref, atol=1e-12)
    np.testing.assert_allclose(mag[0], 2.0, atol=1e-12)
    np.testing.assert_allclose(mag[1], 1.0, atol=1e-12)
    assert mag[2].max() < 1e-10


def test_short_input_rejected():
    with pytest.raises(ShapeError):
        stft(torch.zeros(3), n_fft=4)


def test_inconsistent_metadata_rejected():
    spec = stft(torch.randn(30, dtype=torch.float64))
    with pytest.raises(ShapeError):
        istft(Spectrogram(spec.data, spec.n_fft, spec.hop, 40))


@pytest.mark.parametrize("window", ["rect", "hann"])
@pytest.mark.parametrize("T", [64, 128, 256])
def test_roundtrip(T, window):
    x = torch.randn(5, T, dtype=torch.float64, generator=torch.Generator().manual_seed(T))
    err = (istft(stft(x, window=window)) - x).abs().max()
    assert err < 1e-5


def test_roundtrip_float32():
    x = torch.randn(8, 100)
    assert (istft(stft(x)) - x).abs().max() < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(8, 96), st.integers(0, 2**31 - 1), st.floats(-5, 5))
def test_linearity(T, seed, a):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(T, dtype=torch.float64, generator=g)
    y = torch.randn(T, dtype=torch.float64, generator=g)
    lhs = stft(x + y).data
    assert (lhs - stft(x).data - stft(y).data).abs().max() < 1e-6
    assert (stft(a * x).data - a * stft(x).data).abs().max() < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(8, 96), st.integers(0, 2**31 - 1), st.sampled_from(["hann", "rect"]))
def test_parseval_per_frame(T, seed, window):
    """Rebuilding the full spectrum from the stored half obeys Parseval within 1e-4 relative."""
    n_fft = 4
    x = np.random.default_rng(seed).normal(size=T)
    spec = stft(torch.from_numpy(x), n_fft, window=window).data.numpy()
    half = spec[0] + 1j * spec[1]
    full = np.concatenate([half, np.conj(half[1:-1][::-1])], axis=0)  # bins 0..n_fft-1
    pad = np.pad(x, n_fft // 2, mode="reflect")
    win = np.ones(n_fft) if window == "rect" else 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_fft) / n_fft)
    for j in range(full.shape[1]):
        frame = pad[j : j + n_fft] * win
        e_time = n_fft * np.sum(frame**2)
        e_freq = np.sum(np.abs(full[:, j]) ** 2)
        assert abs(e_freq - e_time) <= 1e-4 * max(e_time, 1e-12)
