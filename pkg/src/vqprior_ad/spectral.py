"""STFT / ISTFT between time-domain windows and 2 x H x T' real tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeError


@dataclass(frozen=True)
class Spectrogram:
    data: torch.Tensor  # (..., 2, H, T'): real and imaginary channels
    n_fft: int
    hop: int
    length: int
    window: str = "hann"

    @property
    def n_freq(self) -> int:
        return self.data.shape[-2]

    @property
    def n_frames(self) -> int:
        return self.data.shape[-1]


def default_hop(n_fft: int) -> int:
    return max(1, n_fft // 4)


def n_frames(length: int, hop: int) -> int:
    """Frame count of a centered STFT."""
    return 1 + length // hop


WINDOWS = ("rect", "hann")


def _window(name: str, n_fft: int, dtype, device=None) -> torch.Tensor:
    if name == "rect":
        return torch.ones(n_fft, dtype=dtype, device=device)
    if name == "hann":
        return torch.hann_window(n_fft, periodic=True, dtype=dtype, device=device)
    raise ValueError(f"unknown analysis window {name!r}; expected one of {WINDOWS}")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        return torch.from_numpy(x)
    return x


def stft(x, n_fft: int = 4, hop: int | None = None, window: str = "hann") -> Spectrogram:
    """Centered, reflect-padded STFT over the last axis of ``x``.

    ``window`` is ``"hann"`` (periodic) or ``"rect"``. Only the rectangular
    window confines a constant signal to row 0; Hann leaks part of it into row 1.
    """
    x = _as_tensor(x)
    hop = default_hop(n_fft) if hop is None else hop
    T = x.shape[-1]
    if T < n_fft:
        raise ShapeError(f"series length {T} shorter than n_fft={n_fft}")
    lead = x.shape[:-1]
    z = torch.stft(
        x.reshape(-1, T),
        n_fft=n_fft,
        hop_length=hop,
        win_length=n_fft,
        window=_window(window, n_fft, x.dtype, x.device),
        center=True,
        pad_mode="reflect",
        return_complex=True,
    )
    data = torch.stack([z.real, z.imag], dim=1)
    return Spectrogram(data.reshape(*lead, *data.shape[1:]), n_fft, hop, T, window)


def istft(spec: Spectrogram) -> torch.Tensor:
    data = spec.data
    H = spec.n_fft // 2 + 1
    if data.shape[-3] != 2 or data.shape[-2] != H or data.shape[-1] != n_frames(spec.length, spec.hop):
        raise ShapeError(
            f"spectrogram shape {tuple(data.shape)} inconsistent with n_fft={spec.n_fft}, "
            f"hop={spec.hop}, length={spec.length}"
        )
    lead = data.shape[:-3]
    flat = data.reshape(-1, 2, H, data.shape[-1])
    z = torch.complex(flat[:, 0], flat[:, 1])
    x = torch.istft(
        z,
        n_fft=spec.n_fft,
        hop_length=spec.hop,
        win_length=spec.n_fft,
        window=_window(spec.window, spec.n_fft, data.dtype, data.device),
        center=True,
        length=spec.length,
    )
    return x.reshape(*lead, spec.length)
