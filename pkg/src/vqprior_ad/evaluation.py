"""UCR-TSA protocol: +-100 correctness for top-1 and local-maxima top-k."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TOLERANCE = 100
MIN_PEAK_DISTANCE = 100


@dataclass
class EvalResult:
    dataset: str
    locations: list[int]  # best first
    correct: dict[int, int]  # k -> 0/1
    runtime_s: float = 0.0


def top1_location(scores) -> int:
    scores = np.asarray(scores)
    if scores.size == 0:
        raise ValueError("empty score vector")
    return int(np.argmax(scores))  # first occurrence on ties


def find_local_maxima(scores) -> list[int]:
    """Strict neighbour comparison; a plateau counts once, at its left edge, if it is followed by a drop."""
    a = np.asarray(scores, dtype=np.float64)
    peaks = []
    i, n = 1, len(a)
    while i < n - 1:
        if a[i] > a[i - 1]:
            j = i
            while j + 1 < n and a[j + 1] == a[i]:
                j += 1
            if j + 1 < n and a[j + 1] < a[i]:
                peaks.append(i)
            i = j + 1
        else:
            i += 1
    return peaks


def ranked_locations(scores, k: int, min_distance: int = MIN_PEAK_DISTANCE) -> list[int]:
    """Up to ``k`` candidate locations, best first.

    The global argmax leads; local maxima follow by descending score, then
    non-peak indices if peaks run out. Candidates within ``min_distance`` of
    an already chosen location are skipped.
    """
    a = np.asarray(scores, dtype=np.float64)
    chosen = [top1_location(a)]
    peaks = np.asarray(find_local_maxima(a), dtype=int)
    peak_order = peaks[np.argsort(-a[peaks], kind="stable")] if len(peaks) else peaks
    is_peak = np.zeros(len(a), dtype=bool)
    is_peak[peaks] = True
    rest = np.nonzero(~is_peak)[0]
    rest_order = rest[np.argsort(-a[rest], kind="stable")]
    for pool in (peak_order, rest_order):
        for c in pool:
            if len(chosen) >= k:
                return chosen
            if all(abs(int(c) - p) >= min_distance for p in chosen):
                chosen.append(int(c))
    return chosen[:k]


def hit(location: int, interval: tuple[int, int], tolerance: int = TOLERANCE) -> bool:
    begin, end = interval
    return begin - tolerance <= location <= end + tolerance


def topk_correct(scores, k: int, interval: tuple[int, int], offset: int = 0) -> int:
    """1 if any of the top-k locations (shifted by ``offset``) lies in [begin-100, end+100]."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return int(any(hit(offset + loc, interval) for loc in ranked_locations(scores, k)))


def evaluate_scores(dataset: str, scores, interval, offset: int = 0, ks=(1, 3, 5), runtime_s: float = 0.0) -> EvalResult:
    locs = [offset + loc for loc in ranked_locations(scores, max(ks))]
    correct = {k: int(any(hit(loc, interval) for loc in locs[:k])) for k in ks}
    return EvalResult(dataset, locs, correct, runtime_s)


@dataclass
class ArchiveSummary:
    n_datasets: int
    accuracy: dict[int, float]
    results: list[EvalResult] = field(default_factory=list)


def evaluate_archive(results, ks=(1, 3, 5)) -> ArchiveSummary:
    results = list(results)
    if not results:
        raise ValueError("no results to evaluate")
    names = [r.dataset for r in results]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ValueError(f"duplicate dataset names: {dupes}")
    acc = {k: float(np.mean([r.correct[k] for r in results])) for k in ks}
    return ArchiveSummary(len(results), acc, results)


def write_summary_csv(summary: ArchiveSummary, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("dataset,top1,top3,top5,pred1,pred2,pred3,pred4,pred5,runtime_s\n")
        for r in summary.results:
            preds = [str(p) for p in r.locations[:5]] + [""] * (5 - len(r.locations[:5]))
            fh.write(f"{r.dataset},{r.correct.get(1, 0)},{r.correct.get(3, 0)},{r.correct.get(5, 0)},"
                     f"{','.join(preds)},{r.runtime_s:.3f}\n")
