"""Fit both stages on one series and bundle the result."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import RunConfig
from .data import SeriesRecord, extract_windows, window_matrix
from .errors import TrainingDivergence, WallClockExceeded
from .prior import PriorModel, train_stage2
from .tokenizer import Tokenizer, TrainLog, subsample, train_stage1


@dataclass
class FittedModels:
    tokenizer: Tokenizer
    prior: PriorModel
    window_len: int
    stage1_log: TrainLog = field(default_factory=TrainLog)
    stage2_log: TrainLog = field(default_factory=TrainLog)


def training_windows(record: SeriesRecord, cfg: RunConfig) -> np.ndarray:
    x = window_matrix(extract_windows(record, "train", cfg.train.window_stride))
    return subsample(x, cfg.train.max_train_windows)


def fit(record: SeriesRecord, cfg: RunConfig, deadline: float | None = None, resume: dict | None = None,
        progress=None) -> FittedModels:
    """Stage 1 on the training split, then stage 2 on its frozen tokens.

    ``resume`` may hold ``"stage1"`` / ``"stage2"`` snapshots and an already
    trained ``"tokenizer"``; completed stages are not rerun. An interruption
    is re-raised with ``stage`` set and, in stage 2, the finished ``tokenizer``
    and ``stage1_log`` attached so a partial checkpoint can be written.
    """
    resume = resume or {}
    if deadline is None:
        deadline = time.monotonic() + cfg.train.wall_clock_hours * 3600
    x = training_windows(record, cfg)
    tok = resume.get("tokenizer")
    if tok is None:
        try:
            tok, log1 = train_stage1(x, cfg.tokenizer, cfg.train, seed=cfg.seed, resume=resume.get("stage1"),
                                     deadline=deadline, progress=progress)
        except (WallClockExceeded, TrainingDivergence) as e:
            e.stage, e.tokenizer, e.stage1_log = "stage1", None, None
            raise
    else:
        log1 = resume.get("stage1_log", TrainLog())
    tok.eval()
    for p in tok.parameters():
        p.requires_grad_(False)
    s = tok.tokenize(torch.as_tensor(x))
    try:
        prior, log2 = train_stage2(s, cfg.prior, cfg.train, cfg.tokenizer.codebook_size, seed=cfg.seed + 1,
                                   resume=resume.get("stage2"), deadline=deadline, progress=progress)
    except (WallClockExceeded, TrainingDivergence) as e:
        e.stage, e.tokenizer, e.stage1_log = "stage2", tok, log1
        raise
    return FittedModels(tok, prior, record.window_len, log1, log2)
