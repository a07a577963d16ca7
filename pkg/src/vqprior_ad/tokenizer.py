"""Stage 1: STFT -> encoder -> vector quantizer -> decoder -> ISTFT.

Every convolution has a kernel of height 1, so frequency rows never exchange
information; normalization is a per-cell LayerNorm over channels for the same
reason. Time-axis resizing is done on rows independently.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TokenizerConfig, TrainConfig
from .errors import ConfigError, ShapeError, TrainingDivergence, WallClockExceeded
from .spectral import Spectrogram, istft, n_frames, stft


class CellNorm(nn.Module):
    """LayerNorm over channels at each (h, w) cell."""

    def __init__(self, channels: int):
        super().__init__()
        self.ln = nn.LayerNorm(channels)

    def forward(self, x):
        return self.ln(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            CellNorm(channels),
            nn.GELU(),
            nn.Conv2d(channels, channels, (1, 3), padding=(0, 1)),
            CellNorm(channels),
            nn.GELU(),
            nn.Conv2d(channels, channels, (1, 3), padding=(0, 1)),
        )

    def forward(self, x):
        return x + self.block(x)


def resize_time(x: torch.Tensor, size: int, mode: str) -> torch.Tensor:
    """Resize the last (time) axis of ``(B, C, H, L)`` treating each row as its own signal."""
    B, C, H, L = x.shape
    if L == size:
        return x
    flat = x.reshape(B, C * H, L)
    if mode == "pool":
        flat = F.adaptive_avg_pool1d(flat, size)
    else:
        flat = F.interpolate(flat, size=size, mode="linear", align_corners=False)
    return flat.reshape(B, C, H, size)


def n_downsample(frames: int, width: int) -> int:
    if frames <= width:
        return 0
    return int(math.floor(math.log2(frames / width)))


class Encoder(nn.Module):
    def __init__(self, hidden: int, latent_dim: int, n_down: int, width: int):
        super().__init__()
        self.width = width
        self.conv_in = nn.Conv2d(2, hidden, (1, 3), padding=(0, 1))
        self.down = nn.ModuleList(
            nn.Sequential(nn.Conv2d(hidden, hidden, (1, 4), stride=(1, 2), padding=(0, 1)), ResBlock(hidden))
            for _ in range(n_down)
        )
        self.norm = CellNorm(hidden)
        self.conv_out = nn.Conv2d(hidden, latent_dim, 1)

    def forward(self, x):
        h = self.conv_in(x)
        for blk in self.down:
            h = blk(h)
        h = resize_time(h, self.width, "pool")
        return self.conv_out(F.gelu(self.norm(h)))


class Decoder(nn.Module):
    def __init__(self, hidden: int, latent_dim: int, n_up: int, frames: int):
        super().__init__()
        self.frames = frames
        self.conv_in = nn.Conv2d(latent_dim, hidden, 1)
        self.res_in = ResBlock(hidden)
        self.up = nn.ModuleList(
            nn.Sequential(
                nn.ConvTranspose2d(hidden, hidden, (1, 4), stride=(1, 2), padding=(0, 1)), ResBlock(hidden)
            )
            for _ in range(n_up)
        )
        self.norm = CellNorm(hidden)
        self.conv_out = nn.Conv2d(hidden, 2, (1, 3), padding=(0, 1))

    def forward(self, z):
        h = self.res_in(self.conv_in(z))
        for blk in self.up:
            h = blk(h)
        h = resize_time(h, self.frames, "linear")
        return self.conv_out(F.gelu(self.norm(h)))


# --------------------------------------------------------------- quantizer


def nearest_code(flat: torch.Tensor, codebook: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    """Index of the closest code (squared Euclidean); ties go to the lowest index."""
    if codebook.shape[0] == 0:
        raise ConfigError("codebook is empty")
    out = []
    for i in range(0, flat.shape[0], chunk):
        diff = flat[i : i + chunk, None, :] - codebook[None, :, :]
        out.append((diff * diff).sum(-1).argmin(dim=1))
    if not out:
        return torch.zeros(0, dtype=torch.long)
    return torch.cat(out)


def quantize(z: torch.Tensor, codebook: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Quantize a ``(D, H, W)`` or ``(B, D, H, W)`` latent; returns ``(z_q, tokens)``."""
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ConfigError("codebook must be a non-empty (K, D) matrix")
    squeeze = z.ndim == 3
    if squeeze:
        z = z[None]
    B, D, H, W = z.shape
    if D != codebook.shape[1]:
        raise ShapeError(f"latent dim {D} != code dim {codebook.shape[1]}")
    flat = z.permute(0, 2, 3, 1).reshape(-1, D)
    idx = nearest_code(flat, codebook.to(flat.dtype))
    zq = codebook.to(z.dtype)[idx].reshape(B, H, W, D).permute(0, 3, 1, 2)
    s = idx.reshape(B, H, W)
    if squeeze:
        return zq[0], s[0]
    return zq, s


class VectorQuantizer(nn.Module):
    """EMA-updated codebook with a straight-through gradient and a commitment term."""

    def __init__(self, n_codes: int, dim: int, decay: float = 0.99, eps: float = 1e-5):
        super().__init__()
        self.n_codes, self.dim, self.decay, self.eps = n_codes, dim, decay, eps
        self.register_buffer("codebook", torch.randn(n_codes, dim))
        self.register_buffer("ema_size", torch.ones(n_codes))
        self.register_buffer("ema_w", self.codebook.clone())
        self.register_buffer("initialized", torch.tensor(False))
        self.register_buffer("usage", torch.zeros(n_codes))
        self.register_buffer("dead_streak", torch.zeros(n_codes, dtype=torch.long))

    def _init_from(self, flat: torch.Tensor, generator=None):
        pick = torch.randint(0, flat.shape[0], (self.n_codes,), generator=generator)
        self.codebook.copy_(flat[pick])
        self.ema_w.copy_(self.codebook)
        self.ema_size.fill_(1.0)
        self.initialized.fill_(True)

    def forward(self, z: torch.Tensor):
        B, D, H, W = z.shape
        flat = z.permute(0, 2, 3, 1).reshape(-1, D)
        if self.training and not bool(self.initialized):
            self._init_from(flat.detach())
        idx = nearest_code(flat.detach(), self.codebook)
        zq = self.codebook[idx].reshape(B, H, W, D).permute(0, 3, 1, 2)
        if self.training:
            self._ema_update(flat.detach(), idx)
        commit = F.mse_loss(z, zq.detach())
        zq_st = z + (zq - z).detach()
        return zq_st, idx.reshape(B, H, W), commit

    @torch.no_grad()
    def _ema_update(self, flat, idx):
        counts = torch.bincount(idx, minlength=self.n_codes).to(flat.dtype)
        dw = torch.zeros_like(self.ema_w).index_add_(0, idx, flat)
        self.usage += counts
        self.ema_size.mul_(self.decay).add_(counts, alpha=1 - self.decay)
        self.ema_w.mul_(self.decay).add_(dw, alpha=1 - self.decay)
        n = self.ema_size.sum()
        size = (self.ema_size + self.eps) / (n + self.n_codes * self.eps) * n
        self.codebook.copy_(self.ema_w / size[:, None])

    @torch.no_grad()
    def end_epoch(self, sample: torch.Tensor, patience: int, generator=None) -> np.ndarray:
        """Advance dead-code streaks; re-seed codes idle for ``patience`` epochs from ``sample`` rows."""
        hist = self.usage.cpu().numpy().copy()
        idle = self.usage == 0
        self.dead_streak[idle] += 1
        self.dead_streak[~idle] = 0
        dead = torch.nonzero(self.dead_streak >= patience).flatten()
        if len(dead):
            pick = torch.randint(0, sample.shape[0], (len(dead),), generator=generator)
            self.codebook[dead] = sample[pick]
            self.ema_w[dead] = sample[pick]
            self.ema_size[dead] = 1.0
            self.dead_streak[dead] = 0
        self.usage.zero_()
        return hist


# ----------------------------------------------------------------- model


class Tokenizer(nn.Module):
    """Maps windows of length ``window_len`` to ``H x W`` token grids and back."""

    def __init__(self, cfg: TokenizerConfig, window_len: int):
        super().__init__()
        self.cfg = cfg
        self.window_len = window_len
        self.n_fft = cfg.n_fft
        self.hop = cfg.hop_length
        if window_len < self.n_fft:
            raise ConfigError(f"window length {window_len} < n_fft {self.n_fft}")
        self.n_freq = cfg.n_freq
        self.n_frames = n_frames(window_len, self.hop)
        self.latent_width = cfg.latent_width
        self.n_stages = n_downsample(self.n_frames, cfg.latent_width)
        self.encoder = Encoder(cfg.hidden_channels, cfg.latent_dim, self.n_stages, cfg.latent_width)
        self.decoder = Decoder(cfg.hidden_channels, cfg.latent_dim, self.n_stages, self.n_frames)
        self.vq = VectorQuantizer(cfg.codebook_size, cfg.latent_dim, cfg.ema_decay)

    @property
    def codebook(self) -> torch.Tensor:
        return self.vq.codebook

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.n_freq, self.latent_width

    def _param_dtype(self):
        return self.encoder.conv_in.weight.dtype

    def spectrogram(self, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=self._param_dtype())
        if x.shape[-1] != self.window_len:
            raise ShapeError(f"window length {x.shape[-1]} != model window {self.window_len}")
        return stft(x, self.n_fft, self.hop, self.cfg.window).data

    def encode(self, spec: torch.Tensor) -> torch.Tensor:
        if spec.ndim == 3:
            return self.encode(spec[None])[0]
        if tuple(spec.shape[1:]) != (2, self.n_freq, self.n_frames):
            raise ShapeError(
                f"spectrogram shape {tuple(spec.shape[1:])} != expected {(2, self.n_freq, self.n_frames)}"
            )
        return self.encoder(spec)

    def decode(self, zq: torch.Tensor) -> torch.Tensor:
        if zq.ndim == 3:
            return self.decode(zq[None])[0]
        expect = (self.cfg.latent_dim, self.n_freq, self.latent_width)
        if tuple(zq.shape[1:]) != expect:
            raise ShapeError(f"latent shape {tuple(zq.shape[1:])} != expected {expect}")
        return self.decoder(zq)

    def to_series(self, spec: torch.Tensor) -> torch.Tensor:
        return istft(Spectrogram(spec, self.n_fft, self.hop, self.window_len, self.cfg.window))

    def forward(self, x):
        spec = self.spectrogram(x)
        z = self.encode(spec)
        zq, s, commit = self.vq(z)
        spec_hat = self.decode(zq)
        x_hat = self.to_series(spec_hat)
        return x_hat, spec_hat, spec, s, commit

    @torch.no_grad()
    def tokenize(self, x) -> torch.Tensor:
        """Token grids ``(B, H, W)`` for z-normalized windows ``(B, T)``."""
        z = self.encode(self.spectrogram(x))
        return quantize(z, self.codebook)[1]

    @torch.no_grad()
    def detokenize(self, s: torch.Tensor) -> torch.Tensor:
        if s.min() < 0 or s.max() >= self.cfg.codebook_size:
            raise ShapeError("token ids outside [0, K)")
        zq = self.codebook[s].permute(0, 3, 1, 2)
        return self.to_series(self.decode(zq))

    def receptive_field(self, column: int) -> tuple[int, int]:
        """Inclusive range of spectrogram frames that can influence latent column ``column``."""
        if not 0 <= column < self.latent_width:
            raise IndexError(column)
        # forward lengths before the pooling step
        lengths = [self.n_frames]
        for _ in range(self.n_stages):
            lengths.append((lengths[-1] + 2 - 4) // 2 + 1)
        L = lengths[-1]
        W = self.latent_width
        lo = (column * L) // W
        hi = -((-(column + 1) * L) // W) - 1
        layers = [(3, 1, 1)]
        for _ in range(self.n_stages):
            layers += [(4, 2, 1), (3, 1, 1), (3, 1, 1)]
        for k, s, p in reversed(layers):
            lo, hi = lo * s - p, hi * s - p + k - 1
        return max(lo, 0), min(hi, self.n_frames - 1)


def encode(spec: Spectrogram | torch.Tensor, model: Tokenizer) -> torch.Tensor:
    data = spec.data if isinstance(spec, Spectrogram) else spec
    if isinstance(spec, Spectrogram) and spec.n_fft != model.n_fft:
        raise ShapeError(f"spectrogram n_fft {spec.n_fft} != model n_fft {model.n_fft}")
    return model.encode(data)


def decode(zq: torch.Tensor, model: Tokenizer) -> tuple[Spectrogram, torch.Tensor]:
    spec = model.decode(zq)
    out = Spectrogram(spec, model.n_fft, model.hop, model.window_len, model.cfg.window)
    return out, istft(out)


# ---------------------------------------------------------------- training


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    holdout_loss: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    epochs_done: int = 0


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(x_hat, x)


def _stage1_terms(model: Tokenizer, x: torch.Tensor):
    x_hat, spec_hat, spec, _, commit = model(x)
    recon = reconstruction_loss(x, x_hat)
    spec_term = F.mse_loss(spec_hat, spec)
    total = recon + model.cfg.spectral_loss_weight * spec_term + model.cfg.commitment_weight * commit
    return total, recon


@torch.no_grad()
def evaluate_reconstruction(model: Tokenizer, x: torch.Tensor, batch: int = 1024) -> float:
    was = model.training
    model.eval()
    tot, n = 0.0, 0
    for i in range(0, len(x), batch):
        xb = x[i : i + batch]
        x_hat = model.detokenize(model.tokenize(xb))
        tot += float(((x_hat - xb) ** 2).mean()) * len(xb)
        n += len(xb)
    model.train(was)
    return tot / max(n, 1)


def _holdout_split(x: torch.Tensor, fraction: float):
    n_hold = int(len(x) * fraction)
    if n_hold == 0 or len(x) - n_hold < 1:
        return x, x
    return x[:-n_hold], x[-n_hold:]


def subsample(x: np.ndarray, cap: int | None) -> np.ndarray:
    if cap is None or len(x) <= cap:
        return x
    idx = np.linspace(0, len(x) - 1, cap).round().astype(int)
    return x[idx]


def _snapshot(model, opt, sched, log) -> dict:
    return {
        "model": copy.deepcopy(model.state_dict()),
        "optimizer": copy.deepcopy(opt.state_dict()),
        "scheduler": copy.deepcopy(sched.state_dict()),
        "log": copy.deepcopy(log),
    }


def train_stage1(
    windows,
    cfg: TokenizerConfig,
    train: TrainConfig,
    seed: int = 0,
    resume: dict | None = None,
    deadline: float | None = None,
    progress=None,
) -> tuple[Tokenizer, TrainLog]:
    """Train the tokenizer on z-normalized windows ``(N, T)``.

    ``resume`` is a snapshot dict previously attached to a checkpoint; training
    continues from its recorded epoch. ``deadline`` is a ``time.monotonic()`` value.
    """
    x = torch.as_tensor(np.asarray(windows), dtype=torch.float32)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("train_stage1 needs a non-empty (N, T) array of windows")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    x_train, x_hold = _holdout_split(x, train.holdout_fraction)

    model = Tokenizer(cfg, x.shape[1])
    opt = torch.optim.AdamW(model.parameters(), lr=train.lr, weight_decay=train.weight_decay)
    batch = min(train.batch_size, len(x_train))
    steps_per_epoch = math.ceil(len(x_train) / batch)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, train.stage1_epochs * steps_per_epoch))
    log = TrainLog()
    if resume is not None:
        model.load_state_dict(resume["model"])
        opt.load_state_dict(resume["optimizer"])
        sched.load_state_dict(resume["scheduler"])
        log = copy.deepcopy(resume["log"])
    else:
        # codebook starts from encoder outputs of a random batch
        model.train()
        with torch.no_grad():
            pick = torch.randperm(len(x_train), generator=gen)[:batch]
            z = model.encode(model.spectrogram(x_train[pick]))
            model.vq._init_from(z.permute(0, 2, 3, 1).reshape(-1, cfg.latent_dim), gen)
        log.holdout_loss.append(evaluate_reconstruction(model, x_hold))

    good = _snapshot(model, opt, sched, log)
    for epoch in range(log.epochs_done, train.stage1_epochs):
        model.train()
        gen.manual_seed(seed + 1 + epoch)  # per-epoch reseed keeps resumed runs on the same stream
        perm = torch.randperm(len(x_train), generator=gen)
        tot = 0.0
        last_z = None
        for i in range(0, len(x_train), batch):
            xb = x_train[perm[i : i + batch]]
            loss, recon = _stage1_terms(model, xb)
            if not torch.isfinite(loss) or not torch.isfinite(model.codebook).all():
                raise TrainingDivergence(f"stage 1 diverged at epoch {epoch}", state=good, log=log)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            tot += recon.item() * len(xb)
            last_z = xb
        with torch.no_grad():
            z = model.encode(model.spectrogram(last_z)).permute(0, 2, 3, 1).reshape(-1, cfg.latent_dim)
        hist = model.vq.end_epoch(z, cfg.dead_code_epochs, gen)
        log.train_loss.append(tot / len(x_train))
        log.holdout_loss.append(evaluate_reconstruction(model, x_hold))
        log.extra["codebook_usage"] = hist.tolist()
        log.epochs_done = epoch + 1
        good = _snapshot(model, opt, sched, log)
        if progress is not None:
            progress(epoch, log)
        if deadline is not None and time.monotonic() > deadline and log.epochs_done < train.stage1_epochs:
            raise WallClockExceeded(f"stage 1 stopped at epoch {log.epochs_done}", state=good, log=log)
    model.eval()
    model.snapshot = good
    return model, log
