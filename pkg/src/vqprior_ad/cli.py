"""Command-line entry point: train, score, counterfactual, evaluate, plot, synth."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from .checkpoint import file_digest, load_checkpoint, resume_state, save_checkpoint
from .config import RunConfig, desk_config, full_config
from .counterfactual import (
    compute_threshold,
    detect_anomalous_steps,
    resample_counterfactual,
    write_counterfactual_csv,
)
from .data import (
    SeriesRecord,
    Window,
    default_corpus,
    discover_datasets,
    generate_synthetic,
    load_periods,
    load_ucr_dataset,
    lookup_period,
    normalize_window,
    read_manifest,
    save_periods,
    save_ucr_dataset,
    write_manifest,
)
from .errors import ConfigError, DataError, ShapeError, TrainingDivergence, WallClockExceeded
from .evaluation import evaluate_archive, evaluate_scores, write_summary_csv
from .pipeline import fit
from .plotting import plot_detection
from .scoring import read_score_csv, score_series, write_score_csv
from .tokenizer import TrainLog

log = logging.getLogger("vqprior_ad")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_WALL_CLOCK = 0, 2, 3, 4, 5


# ------------------------------------------------------------ config / data


def resolve_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = full_config() if args.full else desk_config()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.stride_rate is not None:
        cfg.scoring.stride_rate = args.stride_rate
    if args.quantile is not None:
        cfg.scoring.quantile = args.quantile
    if args.out is not None:
        cfg.out_dir = args.out
    if args.data_dir is not None:
        cfg.data_dir = args.data_dir
    if args.periods is not None:
        cfg.period_csv = args.periods
    if args.manifest is not None:
        cfg.manifest = args.manifest
    cfg.scoring.validate()
    return cfg


def synthetic_specs(cfg: RunConfig):
    if cfg.manifest:
        if not Path(cfg.manifest).exists():
            raise ConfigError(f"manifest not found: {cfg.manifest}")
        return read_manifest(cfg.manifest)
    return default_corpus(20)


class DatasetIndex:
    """Names resolvable from the synthetic corpus and the archive directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.synthetic = {s.name: s for s in synthetic_specs(cfg)}
        data_dir = Path(cfg.data_dir)
        self.files = discover_datasets(data_dir) if data_dir.is_dir() else {}
        self._periods = None

    @property
    def periods(self) -> dict[str, int]:
        if self._periods is None:
            p = Path(self.cfg.period_csv)
            if not p.exists():
                raise ConfigError(f"period table not found: {p}")
            self._periods = load_periods(p)
        return self._periods

    def names(self, selector: str) -> list[str]:
        if selector == "synthetic":
            return list(self.synthetic)
        if selector == "all":
            if not self.files:
                raise DataError(f"no archive files found under {self.cfg.data_dir}")
            return list(self.files)
        if selector in self.synthetic or selector in self.files:
            return [selector]
        available = sorted(self.synthetic) + sorted(self.files)
        raise ConfigError(f"unknown dataset {selector!r}; available: {', '.join(available)}")

    def load(self, name: str) -> SeriesRecord:
        if name in self.synthetic:
            return generate_synthetic(self.synthetic[name])
        return load_ucr_dataset(self.files[name], self.periods)

    def check_periods(self, names) -> None:
        """Fail fast on missing period entries before any training starts."""
        for n in names:
            if n in self.files:
                lookup_period(n, self.periods)


def checkpoint_path(args, cfg: RunConfig, name: str, many: bool) -> Path:
    if args.checkpoint:
        p = Path(args.checkpoint)
        return p / f"{name}.pt" if many or p.is_dir() else p
    return Path(cfg.checkpoint_dir) / f"{name}.pt"


def out_dir(cfg: RunConfig, name: str) -> Path:
    d = Path(cfg.out_dir) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_run_info(directory: Path, cfg: RunConfig, ckpt: Path | None, extra: dict | None = None) -> None:
    """Resolved config and checkpoint hash next to every output; earlier run.json keys are kept."""
    cfg.save(directory / "config.json")
    path = directory / "run.json"
    info = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    info.update({"checkpoint": str(ckpt) if ckpt else None, "checkpoint_sha256": file_digest(ckpt) if ckpt else None})
    info.update(extra or {})
    (directory / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_loss_csv(train_log: TrainLog, path: Path) -> None:
    """``epoch,train_loss,holdout_loss``; an epoch-0 holdout row precedes training when recorded."""
    offset = len(train_log.holdout_loss) - len(train_log.train_loss)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_loss,holdout_loss\n")
        for i, h in enumerate(train_log.holdout_loss):
            j = i - offset
            tr = f"{train_log.train_loss[j]:.6g}" if 0 <= j < len(train_log.train_loss) else ""
            fh.write(f"{i if offset else i + 1},{tr},{h:.6g}\n")


def models_config(cfg: RunConfig, ckpt_cfg: RunConfig) -> RunConfig:
    """CLI scoring/sampling settings on top of the architecture the checkpoint was trained with."""
    return dataclasses.replace(cfg, tokenizer=ckpt_cfg.tokenizer, prior=ckpt_cfg.prior, train=ckpt_cfg.train)


def load_models(path: Path):
    models, ckpt_cfg, _ = load_checkpoint(path)
    if models is None:
        raise ConfigError(f"checkpoint {path} is partial (training did not finish); rerun train with --resume")
    return models, ckpt_cfg


# ------------------------------------------------------------------- verbs


def cmd_train(args, cfg: RunConfig) -> int:
    index = DatasetIndex(cfg)
    names = index.names(args.dataset)
    index.check_periods(names)
    many = len(names) > 1
    for name in names:
        record = index.load(name)
        ckpt = checkpoint_path(args, cfg, name, many)
        resume = None
        if args.resume and ckpt.exists():
            models, _, bundle = load_checkpoint(ckpt)
            if models is not None:
                log.info("%s: checkpoint already complete, skipping", name)
                continue
            resume = resume_state(bundle)
            log.info("%s: resuming from %s", name, ckpt)
        t0 = time.monotonic()
        try:
            fitted = fit_with_backoff(record, cfg, resume)
        except (WallClockExceeded, TrainingDivergence) as e:
            stage_resume = {e.stage: e.state}
            save_checkpoint(ckpt, cfg, name, record.window_len, tokenizer=e.tokenizer, stage1_log=e.stage1_log,
                            resume=stage_resume)
            kind = "wall-clock cap reached" if isinstance(e, WallClockExceeded) else "training diverged"
            log.error("%s: %s in %s; partial checkpoint written to %s", name, kind, e.stage, ckpt)
            return EXIT_WALL_CLOCK if isinstance(e, WallClockExceeded) else EXIT_DIVERGED
        save_checkpoint(ckpt, cfg, name, record.window_len, fitted.tokenizer, fitted.prior,
                        fitted.stage1_log, fitted.stage2_log)
        d = out_dir(cfg, name)
        write_loss_csv(fitted.stage1_log, d / "stage1_loss.csv")
        write_loss_csv(fitted.stage2_log, d / "stage2_loss.csv")
        write_run_info(d, cfg, ckpt, {"train_runtime_s": round(time.monotonic() - t0, 3)})
        log.info("%s: trained in %.1fs -> %s", name, time.monotonic() - t0, ckpt)
    return EXIT_OK


def fit_with_backoff(record, cfg: RunConfig, resume):
    """Train, halving the batch size on memory exhaustion."""
    while True:
        try:
            return fit(record, cfg, resume=resume)
        except MemoryError:
            if cfg.train.batch_size <= 1:
                raise
            cfg.train.batch_size //= 2
            log.warning("out of memory; retrying with batch size %d", cfg.train.batch_size)


def cmd_score(args, cfg: RunConfig) -> int:
    index = DatasetIndex(cfg)
    names = index.names(args.dataset)
    many = len(names) > 1
    for name in names:
        record = index.load(name)
        ckpt = checkpoint_path(args, cfg, name, many)
        models, ckpt_cfg = load_models(ckpt)
        run_cfg = models_config(cfg, ckpt_cfg)
        t0 = time.perf_counter()
        bundle = score_series(record, models.tokenizer, models.prior, run_cfg.scoring)
        runtime = time.perf_counter() - t0
        d = out_dir(cfg, name)
        write_score_csv(bundle, d / "scores.csv")
        write_run_info(d, run_cfg, ckpt, {"score_runtime_s": round(runtime, 3), "stride": bundle.meta["stride"],
                                          "alphas": bundle.meta["alphas"]})
        log.info("%s: scored %d timesteps in %.2fs", name, len(bundle.final), runtime)
    return EXIT_OK


def counterfactual_windows(flags: np.ndarray, offset: int, T: int) -> list[int]:
    """Window origins (series indices) covering each flagged run once, centered where possible."""
    L = len(flags)
    origins: list[int] = []
    covered_to = -1
    i = 0
    while i < L:
        if not flags[i] or i <= covered_to:
            i += 1
            continue
        j = i
        while j + 1 < L and flags[j + 1]:
            j += 1
        center = (i + j) // 2
        o = int(np.clip(center - T // 2, 0, L - T))
        origins.append(offset + o)
        covered_to = o + T - 1
        i = j + 1
    return origins


def trial_seed(base: int, name: str, origin: int, trial: int) -> int:
    return (zlib.crc32(f"{name}:{origin}:{trial}".encode()) ^ base) & 0x7FFFFFFF


def cmd_counterfactual(args, cfg: RunConfig) -> int:
    index = DatasetIndex(cfg)
    names = index.names(args.dataset)
    many = len(names) > 1
    for name in names:
        record = index.load(name)
        ckpt = checkpoint_path(args, cfg, name, many)
        models, ckpt_cfg = load_models(ckpt)
        run_cfg = models_config(cfg, ckpt_cfg)
        tok, prior, T = models.tokenizer, models.prior, record.window_len
        train_bundle = score_series(record, tok, prior, run_cfg.scoring, split="train")
        threshold = compute_threshold(train_bundle.final, run_cfg.scoring.quantile, f"{name}:{run_cfg.digest()}")
        test = score_series(record, tok, prior, run_cfg.scoring, split="test")
        flags = detect_anomalous_steps(test.final, threshold)
        results = []
        for origin in counterfactual_windows(flags, test.offset, T):
            seg = record.values[origin : origin + T]
            xn, mean, std, deg = normalize_window(seg)
            win = Window(xn, origin, mean, std, deg)
            lo = origin - test.offset
            wflags, wscores = flags[lo : lo + T], test.final[lo : lo + T]
            for trial in range(run_cfg.sampling.n_samples):
                seed = trial_seed(run_cfg.seed, name, origin, trial)
                results.append(resample_counterfactual(win, wflags, tok, prior, run_cfg.sampling, seed, wscores))
        d = out_dir(cfg, name)
        write_counterfactual_csv(results, d / "counterfactual.csv")
        (d / "threshold.json").write_text(
            json.dumps({"value": threshold.value, "quantile": threshold.quantile, "source": threshold.source},
                       indent=2, sort_keys=True) + "\n", encoding="utf-8")
        write_score_csv(test, d / "scores.csv")
        write_run_info(d, run_cfg, ckpt, {"n_counterfactuals": len(results)})
        overlays = [(r.window.origin_t + np.arange(T), r.window.denormalize(r.window.x), r.x_cf) for r in results]
        plot_detection(d / "figure.png", record.values, (record.anomaly_begin, record.anomaly_end), test.timesteps,
                       test.summed, test.final, threshold.value, overlays, title=name)
        if not results:
            log.warning("%s: no test score exceeds the threshold %.4g; no counterfactual produced", name,
                        threshold.value)
        else:
            log.info("%s: %d counterfactual window(s)", name, len(results))
    return EXIT_OK


def read_labels(path: Path) -> dict[str, tuple[int, int]]:
    if not path.exists():
        raise DataError(f"label file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header != ["dataset", "anomaly_begin", "anomaly_end"]:
            raise DataError(f"{path}: expected header dataset,anomaly_begin,anomaly_end")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            try:
                out[parts[0]] = (int(parts[1]), int(parts[2]))
            except (IndexError, ValueError) as e:
                raise DataError(f"{path}: line {lineno}: {e}") from e
    return out


def cmd_evaluate(args, cfg: RunConfig) -> int:
    root = Path(cfg.out_dir)
    score_files = sorted(root.glob("*/scores.csv")) if root.is_dir() else []
    if not score_files:
        raise DataError(f"no score CSVs under {root}")
    names = [p.parent.name for p in score_files]
    if args.labels:
        labels = read_labels(Path(args.labels))
    else:
        index = DatasetIndex(cfg)
        labels = {}
        for n in names:
            if n in index.synthetic:
                s = index.synthetic[n]
                labels[n] = (s.anomaly_begin, s.anomaly_end)
            elif n in index.files:
                rec = index.load(n)
                labels[n] = (rec.anomaly_begin, rec.anomaly_end)
    missing = [n for n in names if n not in labels]
    if missing:
        raise DataError(f"no labels for: {', '.join(missing)}")
    results = []
    for name, path in zip(names, score_files):
        cols = read_score_csv(path)
        runtime = 0.0
        info = path.parent / "run.json"
        if info.exists():
            runtime = float(json.loads(info.read_text()).get("score_runtime_s", 0.0))
        t = cols["timestep"].astype(int)
        results.append(evaluate_scores(name, cols["a_final"], labels[name], offset=int(t[0]), runtime_s=runtime))
    summary = evaluate_archive(results)
    write_summary_csv(summary, root / "summary.csv")
    print(f"datasets={summary.n_datasets} " + " ".join(f"top{k}={v:.3f}" for k, v in summary.accuracy.items()))
    return EXIT_OK


def read_counterfactual_csv(path: Path):
    if not path.exists():
        return []
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    out = []
    for origin in dict.fromkeys(data[:, 0].astype(int)) if len(data) else []:
        rows = data[data[:, 0].astype(int) == origin]
        out.append((rows[:, 1], rows[:, 2], rows[:, 3]))
    return out


def cmd_plot(args, cfg: RunConfig) -> int:
    index = DatasetIndex(cfg)
    for name in index.names(args.dataset):
        d = Path(cfg.out_dir) / name
        scores = d / "scores.csv"
        if not scores.exists():
            raise DataError(f"{name}: no scores at {scores}; run score first")
        record = index.load(name)
        cols = read_score_csv(scores)
        band_keys = sorted((c for c in cols if c.startswith("band_")), key=lambda c: int(c.split("_")[1]))
        bands = np.stack([cols[k] for k in band_keys])
        thr = None
        if (d / "threshold.json").exists():
            thr = json.loads((d / "threshold.json").read_text())["value"]
        overlays = read_counterfactual_csv(d / "counterfactual.csv")
        rows = plot_detection(d / "figure.png", record.values, (record.anomaly_begin, record.anomaly_end),
                              cols["timestep"].astype(int), bands, cols["a_final"], thr, overlays, title=name)
        log.info("%s: %d-panel figure written to %s", name, rows, d / "figure.png")
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    specs = default_corpus(args.n_series, seed=cfg.seed)
    data_dir = Path(cfg.data_dir)
    periods = {}
    for spec in specs:
        rec = generate_synthetic(spec)
        save_ucr_dataset(rec, data_dir)
        periods[rec.name] = rec.period
    Path(cfg.period_csv).parent.mkdir(parents=True, exist_ok=True)
    save_periods(periods, cfg.period_csv)
    write_manifest(specs, data_dir / "manifest.txt")
    log.info("wrote %d synthetic series to %s", len(specs), data_dir)
    return EXIT_OK


VERBS = {
    "train": cmd_train,
    "score": cmd_score,
    "counterfactual": cmd_counterfactual,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; replaces the preset")
    preset = common.add_mutually_exclusive_group()
    preset.add_argument("--desk", action="store_true", help="small CPU preset (default)")
    preset.add_argument("--full", action="store_true", help="full-scale preset")
    common.add_argument("--dataset", default="synthetic", help="dataset name, 'all' or 'synthetic'")
    common.add_argument("--checkpoint", help="checkpoint file, or directory when several datasets are selected")
    common.add_argument("--seed", type=int)
    common.add_argument("--stride-rate", type=float)
    common.add_argument("--quantile", type=float)
    common.add_argument("--out", help="output directory")
    common.add_argument("--data-dir")
    common.add_argument("--periods", help="period table CSV (name,period)")
    common.add_argument("--manifest", help="synthetic corpus manifest")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vqprior-ad", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    p = sub.add_parser("train", parents=[common], help="fit both stages")
    p.add_argument("--resume", action="store_true", help="continue a partial checkpoint")
    sub.add_parser("score", parents=[common], help="write per-timestep anomaly scores")
    sub.add_parser("counterfactual", parents=[common], help="threshold, flag and resample anomalies")
    p = sub.add_parser("evaluate", parents=[common], help="top-k accuracy over a score directory")
    p.add_argument("--labels", help="CSV dataset,anomaly_begin,anomaly_end")
    sub.add_parser("plot", parents=[common], help="render the detection figure")
    p = sub.add_parser("synth", parents=[common], help="write the synthetic corpus as archive files")
    p.add_argument("--n-series", type=int, default=20)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return VERBS[args.verb](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except WallClockExceeded as e:
        print(f"wall-clock cap: {e}", file=sys.stderr)
        return EXIT_WALL_CLOCK


if __name__ == "__main__":
    sys.exit(main())
