"""Series records, UCR-TSA ingestion, window extraction and synthetic corpora."""

from __future__ import annotations

import csv
import re
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError

STD_EPS = 1e-8

_UCR_STEM = re.compile(r"^(?P<id>\d+)_UCR_Anomaly_(?P<name>.+)_(?P<train>\d+)_(?P<begin>\d+)_(?P<end>\d+)$")
_TRAILING = re.compile(r"^(?P<stem>.+)_(?P<train>\d+)_(?P<begin>\d+)_(?P<end>\d+)$")


@dataclass(eq=False)
class SeriesRecord:
    """A full univariate series with its train/test split and labeled anomaly (closed interval)."""

    name: str
    values: np.ndarray
    train_end: int
    anomaly_begin: int
    anomaly_end: int
    period: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.values)
        if self.values.ndim != 1:
            raise DataError(f"{self.name}: values must be 1-D")
        if not 0 < self.train_end < n:
            raise DataError(f"{self.name}: train_end={self.train_end} not in (0, {n})")
        if not self.train_end <= self.anomaly_begin <= self.anomaly_end < n:
            raise DataError(
                f"{self.name}: anomaly [{self.anomaly_begin}, {self.anomaly_end}] "
                f"not inside test split [{self.train_end}, {n})"
            )
        if self.period < 2 or 2 * self.period > self.train_end:
            raise DataError(f"{self.name}: period {self.period} incompatible with train_end {self.train_end}")

    def __eq__(self, other):
        if not isinstance(other, SeriesRecord):
            return NotImplemented
        return (
            self.name == other.name
            and self.train_end == other.train_end
            and self.anomaly_begin == other.anomaly_begin
            and self.anomaly_end == other.anomaly_end
            and self.period == other.period
            and np.array_equal(self.values, other.values)
        )

    @property
    def window_len(self) -> int:
        return 2 * self.period

    def split(self, which: str) -> tuple[int, np.ndarray]:
        """Return ``(offset, values)`` of the train or test split."""
        if which == "train":
            return 0, self.values[: self.train_end]
        if which == "test":
            return self.train_end, self.values[self.train_end :]
        raise ValueError(f"split must be 'train' or 'test', got {which!r}")


@dataclass
class Window:
    x: np.ndarray
    origin_t: int
    norm_mean: float
    norm_std: float
    degenerate: bool = False

    def denormalize(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y) * self.norm_std + self.norm_mean


def normalize_window(x: np.ndarray) -> tuple[np.ndarray, float, float, bool]:
    """z-normalize; a window with std below ``STD_EPS`` is centered and divided by 1."""
    x = np.asarray(x, dtype=np.float64)
    mean = float(x.mean())
    std = float(x.std())
    degenerate = std < STD_EPS
    if degenerate:
        std = 1.0
    return (x - mean) / std, mean, std, degenerate


def sliding_origins(length: int, window_len: int, stride: int, cover_tail: bool = False) -> list[int]:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if length < window_len:
        return []
    origins = list(range(0, length - window_len + 1, stride))
    if cover_tail and origins[-1] != length - window_len:
        origins.append(length - window_len)
    return origins


def extract_windows(record: SeriesRecord, split: str, stride: int = 1) -> list[Window]:
    offset, values = record.split(split)
    T = record.window_len
    origins = sliding_origins(len(values), T, stride)
    if not origins:
        raise DataError(f"{record.name}: {split} split has {len(values)} points, shorter than window {T}")
    out = []
    for o in origins:
        xn, mean, std, deg = normalize_window(values[o : o + T])
        out.append(Window(xn, offset + o, mean, std, deg))
    return out


def window_matrix(windows: Sequence[Window]) -> np.ndarray:
    return np.stack([w.x for w in windows]).astype(np.float32)


# ---------------------------------------------------------------- UCR files


def parse_ucr_filename(path: str | Path) -> tuple[str, int, int, int]:
    """Return ``(dataset_name, train_end, anomaly_begin, anomaly_end)`` from an archive filename."""
    stem = Path(path).stem
    m = _UCR_STEM.match(stem)
    if m is None:
        raise DataError(
            f"{Path(path).name}: filename does not follow "
            "<id>_UCR_Anomaly_<name>_<trainEnd>_<anomalyBegin>_<anomalyEnd>.txt"
        )
    name = f"{m['id']}_UCR_Anomaly_{m['name']}"
    return name, int(m["train"]), int(m["begin"]), int(m["end"])


def read_values(path: str | Path) -> np.ndarray:
    vals = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            for tok in line.split():
                try:
                    vals.append(float(tok))
                except ValueError:
                    raise DataError(f"{Path(path).name}: line {lineno}: non-numeric token {tok!r}") from None
    if not vals:
        raise DataError(f"{Path(path).name}: no values")
    return np.asarray(vals, dtype=np.float64)


def load_periods(path: str | Path) -> dict[str, int]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"period table not found: {p}")
    out = {}
    with open(p, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"name", "period"} <= set(reader.fieldnames):
            raise ConfigError(f"{p}: expected header 'name,period'")
        for row in reader:
            try:
                out[row["name"]] = int(row["period"])
            except ValueError:
                raise ConfigError(f"{p}: bad period for {row['name']!r}: {row['period']!r}") from None
    return out


def save_periods(periods: Mapping[str, int], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("name,period\n")
        for name in sorted(periods):
            fh.write(f"{name},{periods[name]}\n")


def lookup_period(name: str, periods: Mapping[str, int]) -> int:
    """Find ``name`` in the period table, also trying the bare id and bare dataset name."""
    candidates = [name]
    m = re.match(r"^(\d+)_UCR_Anomaly_(.+)$", name)
    if m:
        candidates += [m.group(1), m.group(2)]
    for c in candidates:
        if c in periods:
            return periods[c]
    raise ConfigError(f"no period entry for dataset {name!r}")


def load_ucr_dataset(path: str | Path, periods: Mapping[str, int]) -> SeriesRecord:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    name, train_end, begin, end = parse_ucr_filename(path)
    period = lookup_period(name, periods)
    values = read_values(path)
    return SeriesRecord(name, values, train_end, begin, end, period)


def ucr_filename(record: SeriesRecord) -> str:
    name = record.name
    if not re.match(r"^\d+_UCR_Anomaly_.+$", name):
        name = f"000_UCR_Anomaly_{name}"
    return f"{name}_{record.train_end}_{record.anomaly_begin}_{record.anomaly_end}.txt"


def save_ucr_dataset(record: SeriesRecord, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / ucr_filename(record)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for v in record.values:
            fh.write(repr(float(v)) + "\n")
    return path


def discover_datasets(directory: str | Path) -> dict[str, Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"data directory not found: {directory}")
    out = {}
    for p in sorted(directory.glob("*.txt")):
        if _TRAILING.match(p.stem):
            name, *_ = parse_ucr_filename(p)
            out[name] = p
    return out


# --------------------------------------------------------------- synthetic

ANOMALY_KINDS = ("spike", "level-shift", "frequency-change", "pattern-swap")


@dataclass
class SyntheticSpec:
    """Sinusoid mixture with one injected anomaly in the test split.

    ``magnitude`` is kind specific: spike height in units of the clean series std,
    additive level shift, or the speed-up factor for a frequency change.
    """

    name: str
    kind: str
    frequencies: tuple[float, ...] = (0.02,)
    amplitudes: tuple[float, ...] = (1.0,)
    length: int = 2400
    train_end: int = 1200
    anomaly_begin: int = 1800
    anomaly_end: int = 1800
    noise: float = 0.05
    magnitude: float = 6.0
    seed: int = 0
    period: int | None = None

    def __post_init__(self):
        self.frequencies = tuple(float(f) for f in self.frequencies)
        self.amplitudes = tuple(float(a) for a in self.amplitudes)

    @property
    def resolved_period(self) -> int:
        return self.period if self.period is not None else int(round(1.0 / min(self.frequencies)))

    def validate(self) -> None:
        if self.kind not in ANOMALY_KINDS:
            raise ConfigError(f"{self.name}: unknown anomaly kind {self.kind!r}")
        if len(self.frequencies) != len(self.amplitudes) or not self.frequencies:
            raise ConfigError(f"{self.name}: frequencies and amplitudes must be equal-length, non-empty")
        if not self.train_end < self.anomaly_begin <= self.anomaly_end < self.length - 1:
            raise ConfigError(
                f"{self.name}: anomaly [{self.anomaly_begin}, {self.anomaly_end}] "
                f"not strictly inside test split ({self.train_end}, {self.length - 1})"
            )
        if self.kind == "spike" and self.magnitude < 5:
            raise ConfigError(f"{self.name}: spike magnitude must be >= 5 sigma")


def _mixture(t: np.ndarray, spec: SyntheticSpec, phases: np.ndarray) -> np.ndarray:
    out = np.zeros_like(t, dtype=np.float64)
    for f, a, ph in zip(spec.frequencies, spec.amplitudes, phases):
        out += a * np.sin(2 * np.pi * f * t + ph)
    return out


def generate_synthetic(spec: SyntheticSpec) -> SeriesRecord:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    phases = rng.uniform(0, 2 * np.pi, size=len(spec.frequencies))
    t = np.arange(spec.length, dtype=np.float64)
    clean = _mixture(t, spec, phases)
    b, e = spec.anomaly_begin, spec.anomaly_end
    seg = slice(b, e + 1)
    if spec.kind == "spike":
        clean[seg] += spec.magnitude * clean.std()
    elif spec.kind == "level-shift":
        clean[seg] += spec.magnitude
    elif spec.kind == "frequency-change":
        # same waveform played faster: identical amplitude envelope, continuous at the start
        tt = b + spec.magnitude * (t[seg] - b)
        clean[seg] = _mixture(tt, spec, phases)
    elif spec.kind == "pattern-swap":
        # sawtooth of the same period, phase and peak amplitude
        peak = np.abs(clean[: spec.train_end]).max()
        P = spec.resolved_period
        ph = phases[0] / (2 * np.pi)
        frac = np.mod(t[seg] / P + ph + 0.25, 1.0)
        clean[seg] = peak * (2.0 * frac - 1.0)
    values = clean + spec.noise * rng.standard_normal(spec.length)
    return SeriesRecord(spec.name, values, spec.train_end, b, e, spec.resolved_period)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    return str(v)


def spec_to_line(spec: SyntheticSpec) -> str:
    keys = [
        "name", "kind", "frequencies", "amplitudes", "length", "train_end",
        "anomaly_begin", "anomaly_end", "noise", "magnitude", "seed",
    ]
    parts = [f"{k}={_fmt(getattr(spec, k))}" for k in keys]
    if spec.period is not None:
        parts.append(f"period={spec.period}")
    return " ".join(parts)


_INT_KEYS = {"length", "train_end", "anomaly_begin", "anomaly_end", "seed", "period"}
_FLOAT_KEYS = {"noise", "magnitude"}
_TUPLE_KEYS = {"frequencies", "amplitudes"}


def spec_from_line(line: str) -> SyntheticSpec:
    kwargs = {}
    for tok in shlex.split(line):
        if "=" not in tok:
            raise ConfigError(f"manifest token {tok!r} is not key=value")
        k, v = tok.split("=", 1)
        try:
            if k in _INT_KEYS:
                kwargs[k] = int(v)
            elif k in _FLOAT_KEYS:
                kwargs[k] = float(v)
            elif k in _TUPLE_KEYS:
                kwargs[k] = tuple(float(x) for x in v.split(","))
            elif k in ("name", "kind"):
                kwargs[k] = v
            else:
                raise ConfigError(f"unknown manifest key {k!r}")
        except ValueError:
            raise ConfigError(f"bad value for {k!r}: {v!r}") from None
    if "name" not in kwargs or "kind" not in kwargs:
        raise ConfigError(f"manifest line needs name= and kind=: {line!r}")
    return SyntheticSpec(**kwargs)


def read_manifest(path: str | Path) -> list[SyntheticSpec]:
    specs = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            specs.append(spec_from_line(line))
    return specs


def write_manifest(specs: Iterable[SyntheticSpec], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in specs:
            fh.write(spec_to_line(s) + "\n")


# harmonic layouts cycled through by ``default_corpus``
_WAVEFORMS = (
    ((1.0,), (1.0,)),
    ((1.0, 2.0), (1.0, 0.5)),
    ((1.0, 3.0), (1.0, 0.3)),
    ((1.0, 2.0, 3.0), (1.0, 0.4, 0.2)),
)

_ANOMALY_LEN = {"spike": 0, "level-shift": 0.4, "frequency-change": 1.0, "pattern-swap": 1.0}
_MAGNITUDE = {"spike": 6.0, "level-shift": 2.0, "frequency-change": 2.0, "pattern-swap": 0.0}


def make_spec(kind: str, index: int, seed: int, *, length: int = 2400, train_end: int = 1200,
              noise: float = 0.05, periods: Sequence[int] = (40, 50, 60)) -> SyntheticSpec:
    """One corpus member; waveform, period and anomaly location all derive from ``seed``."""
    rng = np.random.default_rng(seed)
    P = int(periods[index % len(periods)])
    harmonics, amps = _WAVEFORMS[index % len(_WAVEFORMS)]
    n_anom = int(round(_ANOMALY_LEN[kind] * P))
    lo = train_end + 2 * P
    hi = length - 2 * P - n_anom
    begin = int(rng.integers(lo, hi))
    return SyntheticSpec(
        name=f"synth-{kind}-{index:02d}",
        kind=kind,
        frequencies=tuple(h / P for h in harmonics),
        amplitudes=amps,
        length=length,
        train_end=train_end,
        anomaly_begin=begin,
        anomaly_end=begin + n_anom,
        noise=noise,
        magnitude=_MAGNITUDE[kind],
        seed=seed,
        period=P,
    )


def default_corpus(n: int = 20, seed: int = 0, kinds: Sequence[str] = ANOMALY_KINDS, **kwargs) -> list[SyntheticSpec]:
    return [make_spec(kinds[i % len(kinds)], i, seed * 1000 + i, **kwargs) for i in range(n)]
