"""Threshold fitting, anomalous-step detection and masked resampling of flagged segments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .config import SamplingConfig, ScoringConfig
from .data import Window, normalize_window, sliding_origins
from .errors import ConfigError
from .prior import PriorModel, apply_mask, iterative_decode
from .scoring import score_grid
from .tokenizer import Tokenizer


@dataclass
class Threshold:
    value: float
    quantile: float
    source: str = ""


@dataclass
class CounterfactualResult:
    window: Window
    x_cf: np.ndarray  # de-normalized, same scale as the original segment
    x_cf_normalized: np.ndarray
    keep: np.ndarray  # (H, W) latent keep-mask, 0 = resampled
    flags: np.ndarray  # (T,) per-timestep anomaly flags
    tokens: np.ndarray  # original grid
    tokens_cf: np.ndarray  # resampled grid
    posthoc_final: np.ndarray | None = None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def masked_columns(self) -> np.ndarray:
        return np.nonzero(~self.keep.all(axis=0))[0]


def compute_threshold(train_scores, n: float, source: str = "") -> Threshold:
    scores = np.asarray(train_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot fit a threshold on an empty score vector")
    if not 0.0 < n < 1.0:
        raise ValueError(f"quantile {n} outside (0, 1)")
    return Threshold(float(np.quantile(scores, n, method="linear")), n, source)


def window_threshold(values, window_len: int, tokenizer: Tokenizer, prior: PriorModel, scoring: ScoringConfig,
                     n: float, source: str = "") -> Threshold:
    """Quantile of isolated-window scores (``score_grid``) over rolling windows of ``values``.

    This is the reference for post-hoc counterfactual scores, which are also
    computed one window at a time.
    """
    values = np.asarray(values, dtype=np.float64)
    T = window_len
    origins = sliding_origins(len(values), T, scoring.stride(T), cover_tail=True)
    xs = np.stack([normalize_window(values[o : o + T])[0] for o in origins]).astype(np.float32)
    s = tokenizer.tokenize(xs)
    finals = score_grid(s, scoring.alphas(tokenizer.grid_shape[1]), prior, T, scoring.batch_size)
    return compute_threshold(finals.ravel(), n, source)


def detect_anomalous_steps(a_final, threshold: Threshold) -> np.ndarray:
    return np.asarray(a_final) > threshold.value


def flagged_columns(flags: np.ndarray, width: int) -> np.ndarray:
    """Latent columns whose data span (inverse of the nearest-neighbour map) contains a flag."""
    T = len(flags)
    col = (np.arange(T) * width) // T
    out = np.zeros(width, dtype=bool)
    out[col[np.asarray(flags, dtype=bool)]] = True
    return out


def column_scores(scores: np.ndarray, width: int) -> np.ndarray:
    T = len(scores)
    col = (np.arange(T) * width) // T
    return np.array([scores[col == c].mean() for c in range(width)])


def select_columns(flags: np.ndarray, width: int, max_rate: float, scores: np.ndarray | None = None) -> np.ndarray:
    """Boolean ``(W,)`` of columns to mask, capped at ``floor(max_rate * W)``.

    Over the cap, the flagged columns with the lowest scores stay unmasked.
    """
    cols = flagged_columns(flags, width)
    cap = int(np.floor(max_rate * width))
    idx = np.nonzero(cols)[0]
    if len(idx) > cap:
        cs = column_scores(scores, width) if scores is not None else np.zeros(width)
        # highest scores are masked first; stable sort keeps earlier columns on ties
        order = idx[np.argsort(-cs[idx], kind="stable")]
        cols = np.zeros(width, dtype=bool)
        cols[order[:cap]] = True
    return cols


def resample_counterfactual(
    window: Window,
    flags,
    tokenizer: Tokenizer,
    prior: PriorModel,
    sampling: SamplingConfig,
    seed: int = 0,
    scores=None,
    scoring: ScoringConfig | None = None,
) -> CounterfactualResult:
    """Mask the flagged latent columns across all rows, resample them, decode to a series.

    When ``scoring`` is given the resampled grid itself is scored (see
    ``scoring.score_grid``) and the result stored in ``posthoc_final``.
    Scoring the grid rather than the decoded series avoids a second, lossy
    pass through the tokenizer.
    """
    flags = np.asarray(flags, dtype=bool)
    T = tokenizer.window_len
    if len(window.x) != T or len(flags) != T:
        raise ConfigError(f"window/flags length must equal tokenizer window {T}")
    if prior.n_codes != tokenizer.cfg.codebook_size or (prior.height, prior.width) != tokenizer.grid_shape:
        raise ConfigError("prior and tokenizer were not trained together")
    if not flags.any():
        raise ValueError("no flagged timesteps in window")
    H, W = tokenizer.grid_shape
    cols = select_columns(flags, W, sampling.max_mask_rate, None if scores is None else np.asarray(scores))
    keep = np.ones((H, W), dtype=bool)
    keep[:, cols] = False
    s = tokenizer.tokenize(np.asarray(window.x, dtype=np.float32)[None])[0]
    s_m = apply_mask(s, torch.from_numpy(keep), prior.mask_id)
    s_cf = iterative_decode(s_m, prior, sampling.steps, sampling.temperature, seed)
    x_norm = tokenizer.detokenize(s_cf[None])[0].double().numpy()
    x_cf = window.denormalize(x_norm)
    post = None
    if scoring is not None:
        post = score_grid(s_cf, scoring.alphas(W), prior, T, scoring.batch_size)
    return CounterfactualResult(
        window, x_cf, x_norm, keep, flags, s.numpy(), s_cf.numpy(), post, seed,
        meta={"n_masked_columns": int(cols.sum())},
    )


def resampled_span(keep: np.ndarray, T: int) -> np.ndarray:
    """Boolean ``(T,)`` marking timesteps whose nearest latent column was resampled."""
    W = keep.shape[1]
    col = (np.arange(T) * W) // T
    return ~keep.all(axis=0)[col]


def write_counterfactual_csv(results, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("origin_t,timestep,x_original,x_counterfactual,flagged\n")
        for r in results:
            x_orig = r.window.denormalize(r.window.x)
            for i in range(len(r.x_cf)):
                fh.write(f"{r.window.origin_t},{r.window.origin_t + i},{x_orig[i]:.6g},"
                         f"{r.x_cf[i]:.6g},{int(r.flags[i])}\n")
