"""Windowed negative log-likelihood anomaly scores over a full series."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ScoringConfig
from .data import SeriesRecord, Window, normalize_window, sliding_origins
from .errors import ConfigError, ShapeError
from .prior import PriorModel, apply_mask, token_log_prob
from .tokenizer import Tokenizer


@dataclass
class ScoreBundle:
    """Every aggregation stage of the score pipeline over one scored region.

    ``offset`` is the index of the region's first timestep in the parent series.
    """

    per_alpha: dict[int, np.ndarray]  # alpha -> (H, L), overlap-normalized unless raw mode
    counts: np.ndarray  # (L,)
    summed: np.ndarray  # (H, L)
    abar: np.ndarray  # (L,) mean over frequency
    abarbar: np.ndarray  # (L,) moving average of abar
    final: np.ndarray  # (L,)
    offset: int = 0
    window_len: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def timesteps(self) -> np.ndarray:
        return self.offset + np.arange(len(self.final))


def column_span(w: int, alpha: int, width: int) -> tuple[int, int]:
    return max(0, w - alpha), min(width, w + alpha)


def latent_window_keep(width: int, height: int, alpha: int) -> torch.Tensor:
    """Keep-masks ``(W, H, W)``: entry ``w`` masks columns ``[w - alpha, w + alpha)`` in all rows."""
    cols = torch.arange(width)
    keep = torch.ones(width, height, width, dtype=torch.bool)
    for w in range(width):
        lo, hi = column_span(w, alpha, width)
        keep[w, :, (cols >= lo) & (cols < hi)] = False
    return keep


@torch.no_grad()
def latent_score_maps(s: torch.Tensor, alpha: int, model: PriorModel, batch_size: int = 2048) -> torch.Tensor:
    """Score maps ``(N, H, W)`` for token grids ``(N, H, W)`` with one sliding latent window size."""
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    N, H, W = s.shape
    keep = latent_window_keep(W, H, alpha)  # (W, H, W)
    width = (~keep[:, 0, :]).sum(1).to(torch.float64)  # masked columns per w
    grids = s[:, None].expand(N, W, H, W)
    masked = apply_mask(grids, keep[None].expand(N, W, H, W), model.mask_id).reshape(N * W, H, W)
    truth = grids.reshape(N * W, H, W)
    was = model.training
    model.eval()
    nll = torch.empty(N * W, H, W, dtype=torch.float64)
    for i in range(0, N * W, batch_size):
        u = model(masked[i : i + batch_size])
        nll[i : i + batch_size] = -token_log_prob(u, truth[i : i + batch_size]).double()
    model.train(was)
    nll = nll.reshape(N, W, H, W)
    drop = keep[None].expand(N, W, H, W)
    sums = torch.where(drop, torch.zeros_like(nll), nll).sum(-1)  # (N, W, H)
    return (sums / width[None, :, None]).permute(0, 2, 1)


def latent_window_score(s: torch.Tensor, w: int, alpha: int, model: PriorModel) -> np.ndarray:
    """Per-row mean of -log p over the masked span around column ``w``; shape ``(H,)``."""
    H, W = s.shape
    if not 0 <= w < W:
        raise IndexError(f"latent column {w} outside [0, {W})")
    lo, hi = column_span(w, alpha, W)
    keep = torch.ones(H, W, dtype=torch.bool)
    keep[:, lo:hi] = False
    was = model.training
    model.eval()
    with torch.no_grad():
        u = model(apply_mask(s, keep, model.mask_id)[None])[0]
    model.train(was)
    nll = -token_log_prob(u, s).double()
    return nll[:, lo:hi].mean(dim=1).numpy()


def score_window(x, alphas, tokenizer: Tokenizer, prior: PriorModel, batch_size: int = 2048) -> dict[int, np.ndarray]:
    """Latent score maps ``{alpha: (H, W)}`` for one window; the window is tokenized once."""
    if isinstance(x, Window):
        x = x.x
    else:
        x = normalize_window(np.asarray(x))[0]
    s = tokenizer.tokenize(np.asarray(x, dtype=np.float32)[None])
    return {a: latent_score_maps(s, a, prior, batch_size)[0].numpy() for a in alphas}


def map_to_data_space(a: np.ndarray, T: int) -> np.ndarray:
    """Nearest-neighbour expansion of ``(H, W)`` to ``(H, T)``: column i copies floor(i * W / T)."""
    a = np.asarray(a)
    W = a.shape[-1]
    if T < W:
        raise ShapeError(f"data length {T} shorter than latent width {W}")
    idx = (np.arange(T) * W) // T
    return a[..., idx]


def moving_average(v: np.ndarray, window: int) -> np.ndarray:
    """Centered mean over up to ``window`` neighbours, truncated (not zero-padded) at the edges."""
    if window < 1:
        raise ValueError("window must be >= 1")
    v = np.asarray(v, dtype=np.float64)
    if window == 1:
        return v.copy()
    L = len(v)
    left = window // 2
    right = window - 1 - left
    c = np.concatenate([[0.0], np.cumsum(v)])
    i = np.arange(L)
    lo = np.clip(i - left, 0, L)
    hi = np.clip(i + right + 1, 0, L)
    return (c[hi] - c[lo]) / (hi - lo)


def aggregate(per_alpha_raw: dict[int, np.ndarray], counts: np.ndarray, window_len: int, normalize: bool = True):
    """Combine per-alpha accumulators into ``(per_alpha, summed, abar, abarbar, final)``."""
    if normalize:
        safe = np.where(counts > 0, counts, 1)
        per_alpha = {a: acc / safe for a, acc in per_alpha_raw.items()}
    else:
        per_alpha = dict(per_alpha_raw)
    summed = np.zeros_like(next(iter(per_alpha.values())))
    for a in sorted(per_alpha):
        summed = summed + per_alpha[a]
    abar = summed.mean(axis=0)
    abarbar = moving_average(abar, window_len)
    final = (abar + abarbar) / 2
    return per_alpha, summed, abar, abarbar, final


def score_grid(s: torch.Tensor, alphas, prior: PriorModel, window_len: int, batch_size: int = 2048) -> np.ndarray:
    """``a_final`` of token grids taken as isolated windows: ``(H, W)`` gives ``(T,)``, ``(N, H, W)`` gives ``(N, T)``.

    No overlap averaging happens, so edge columns keep their larger scores;
    compare against thresholds fitted with this same function.
    """
    s = torch.as_tensor(s)
    single = s.ndim == 2
    if single:
        s = s[None]
    maps = {a: latent_score_maps(s, a, prior, batch_size).numpy() for a in alphas}
    ones = np.ones(window_len)
    out = np.stack([
        aggregate({a: map_to_data_space(maps[a][i], window_len) for a in alphas}, ones, window_len)[-1]
        for i in range(s.shape[0])
    ])
    return out[0] if single else out


def _window_tokens(values: np.ndarray, origins: list[int], T: int, tokenizer: Tokenizer, batch: int = 1024):
    out = []
    for i in range(0, len(origins), batch):
        xs = np.stack([normalize_window(values[o : o + T])[0] for o in origins[i : i + batch]])
        out.append(tokenizer.tokenize(xs.astype(np.float32)))
    return torch.cat(out)


def score_array(
    values: np.ndarray,
    window_len: int,
    tokenizer: Tokenizer,
    prior: PriorModel,
    cfg: ScoringConfig,
    offset: int = 0,
) -> ScoreBundle:
    """Rolling-window scoring of an arbitrary 1-D array (one bundle entry per element)."""
    cfg.validate()
    values = np.asarray(values, dtype=np.float64)
    T = window_len
    L = len(values)
    if L < T:
        raise ShapeError(f"region of {L} points shorter than window {T}")
    stride = cfg.stride(T)
    if stride > T:
        raise ConfigError(f"rolling stride {stride} larger than window {T}")
    H, W = tokenizer.grid_shape
    alphas = cfg.alphas(W)
    origins = sliding_origins(L, T, stride, cover_tail=True)
    s = _window_tokens(values, origins, T, tokenizer)
    counts = np.zeros(L)
    for o in origins:
        counts[o : o + T] += 1

    def run(alpha):
        # one private accumulator per alpha; merged by the caller
        acc = np.zeros((H, L))
        maps = latent_score_maps(s, alpha, prior, cfg.batch_size).numpy()
        for o, m in zip(origins, maps):
            acc[:, o : o + T] += map_to_data_space(m, T)
        return alpha, acc

    if cfg.workers > 1 and len(alphas) > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            raw = dict(pool.map(run, alphas))
    else:
        raw = dict(run(a) for a in alphas)
    per_alpha, summed, abar, abarbar, final = aggregate(raw, counts, T, cfg.normalize_overlap)
    return ScoreBundle(
        per_alpha, counts, summed, abar, abarbar, final, offset, T,
        meta={"stride": stride, "alphas": alphas, "n_windows": len(origins)},
    )


def score_series(record: SeriesRecord, tokenizer: Tokenizer, prior: PriorModel, cfg: ScoringConfig,
                 split: str = "test") -> ScoreBundle:
    offset, values = record.split(split)
    if len(values) < record.window_len:
        raise ShapeError(f"{record.name}: {split} split shorter than window {record.window_len}")
    return score_array(values, record.window_len, tokenizer, prior, cfg, offset)


def write_score_csv(bundle: ScoreBundle, path) -> None:
    H = bundle.summed.shape[0]
    header = ["timestep", "a_final", "abar", "abarbar"] + [f"band_{h}" for h in range(H)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for i, t in enumerate(bundle.timesteps):
            row = [bundle.final[i], bundle.abar[i], bundle.abarbar[i], *bundle.summed[:, i]]
            fh.write(f"{t}," + ",".join(f"{v:.6g}" for v in row) + "\n")


def read_score_csv(path) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {name: data[:, j] for j, name in enumerate(header)}
