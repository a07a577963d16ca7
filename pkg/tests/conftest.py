"""Session-wide fixtures: desk-preset models trained on the synthetic corpora.

Training all of them takes roughly twenty minutes on one CPU core. Set
``VQPRIOR_MODEL_CACHE`` to a directory to keep the fitted models between
sessions; entries are keyed by series name, seed and config digest.
"""

import os
import time
from dataclasses import dataclass
from pathlib import Path

import pytest
import torch

from vqprior_ad.config import desk_config
from vqprior_ad.data import SeriesRecord, SyntheticSpec, default_corpus, generate_synthetic
from vqprior_ad.pipeline import FittedModels, fit
from vqprior_ad.scoring import ScoreBundle, score_series

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = (title, bool(passed), detail)
    print(f"[acceptance {number:2d}] {'PASS' if passed else 'FAIL'} {title} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{n:2d}. {'PASS' if ok else 'FAIL'}  {title}  {detail}")


@dataclass
class Trained:
    spec: SyntheticSpec
    record: SeriesRecord
    models: FittedModels
    scores: ScoreBundle  # test split, default scoring config
    fit_s: float
    score_s: float


def _train(specs, cfg) -> list[Trained]:
    cache = os.environ.get("VQPRIOR_MODEL_CACHE")
    out = []
    for spec in specs:
        record = generate_synthetic(spec)
        path = Path(cache) / f"{spec.name}-{spec.seed}-{cfg.digest()[:12]}.pt" if cache else None
        if path is not None and path.exists():
            models, fit_s = torch.load(path, weights_only=False)
        else:
            t0 = time.perf_counter()
            models = fit(record, cfg)
            fit_s = time.perf_counter() - t0
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                torch.save((models, fit_s), path)
        t0 = time.perf_counter()
        scores = score_series(record, models.tokenizer, models.prior, cfg.scoring)
        out.append(Trained(spec, record, models, scores, fit_s, time.perf_counter() - t0))
    return out


@pytest.fixture(scope="session")
def desk():
    return desk_config()


@pytest.fixture(scope="session")
def corpus(desk):
    """The 20-series corpus cycling through all four anomaly kinds."""
    return _train(default_corpus(20), desk)


@pytest.fixture(scope="session")
def band_series(corpus, desk):
    """Ten spike and ten level-shift series: the corpus members plus a second seeded draw."""
    extra = _train(default_corpus(10, seed=1, kinds=("spike", "level-shift")), desk)
    return [t for t in corpus if t.spec.kind in ("spike", "level-shift")] + extra
