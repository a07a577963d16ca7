"""Versioned on-disk bundle holding the config and both stages' parameters."""

from __future__ import annotations

import dataclasses
import hashlib
from pathlib import Path

import torch

from .config import RunConfig
from .errors import ConfigError
from .pipeline import FittedModels
from .prior import PriorModel
from .tokenizer import Tokenizer, TrainLog

FORMAT_VERSION = 1


def _log_to_dict(log: TrainLog | None):
    return None if log is None else dataclasses.asdict(log)


def _log_from_dict(d) -> TrainLog:
    return TrainLog(**d) if d else TrainLog()


def _snapshot_out(snap: dict | None):
    if snap is None:
        return None
    return {**snap, "log": _log_to_dict(snap["log"])}


def _snapshot_in(snap: dict | None):
    if snap is None:
        return None
    return {**snap, "log": _log_from_dict(snap["log"])}


def save_checkpoint(
    path: str | Path,
    cfg: RunConfig,
    dataset: str,
    window_len: int,
    tokenizer: Tokenizer | None = None,
    prior: PriorModel | None = None,
    stage1_log: TrainLog | None = None,
    stage2_log: TrainLog | None = None,
    resume: dict | None = None,
) -> Path:
    """Write a checkpoint; ``resume`` carries optimizer snapshots of an unfinished stage."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    resume = resume or {}
    bundle = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_json(),
        "dataset": dataset,
        "window_len": int(window_len),
        "grid_order": "row-major (h, w)",
        "tokenizer": None if tokenizer is None else tokenizer.state_dict(),
        "prior": None if prior is None else prior.state_dict(),
        "stage1_log": _log_to_dict(stage1_log),
        "stage2_log": _log_to_dict(stage2_log),
        "resume": {k: _snapshot_out(resume.get(k)) for k in ("stage1", "stage2")},
    }
    torch.save(bundle, path)
    return path


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    bundle = torch.load(path, map_location="cpu", weights_only=True)
    version = bundle.get("format_version") if isinstance(bundle, dict) else None
    if version != FORMAT_VERSION:
        raise ConfigError(f"checkpoint {path} has format version {version!r}; this build reads {FORMAT_VERSION}")
    return bundle


def load_checkpoint(path: str | Path) -> tuple[FittedModels | None, RunConfig, dict]:
    """Returns ``(models, config, bundle)``; ``models`` is None for a checkpoint without a finished prior."""
    bundle = read_checkpoint(path)
    cfg = RunConfig.from_json(bundle["config"])
    T = bundle["window_len"]
    tok = None
    if bundle["tokenizer"] is not None:
        tok = Tokenizer(cfg.tokenizer, T)
        tok.load_state_dict(bundle["tokenizer"])
        tok.eval()
    models = None
    if tok is not None and bundle["prior"] is not None:
        H, W = tok.grid_shape
        prior = PriorModel(cfg.prior, cfg.tokenizer.codebook_size, H, W)
        prior.load_state_dict(bundle["prior"])
        prior.eval()
        models = FittedModels(tok, prior, T, _log_from_dict(bundle["stage1_log"]), _log_from_dict(bundle["stage2_log"]))
    bundle["resume"] = {k: _snapshot_in(v) for k, v in bundle["resume"].items()}
    bundle["tokenizer_model"] = tok
    return models, cfg, bundle


def resume_state(bundle: dict) -> dict:
    """Translate a partial checkpoint into the ``resume`` argument of ``pipeline.fit``."""
    out = {}
    if bundle.get("tokenizer_model") is not None and bundle["resume"].get("stage1") is None:
        # stage 1 finished; only stage 2 needs to continue
        out["tokenizer"] = bundle["tokenizer_model"]
        out["stage1_log"] = _log_from_dict(bundle["stage1_log"])
    if bundle["resume"].get("stage1") is not None:
        out["stage1"] = bundle["resume"]["stage1"]
    if bundle["resume"].get("stage2") is not None:
        out["stage2"] = bundle["resume"]["stage2"]
    return out


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
