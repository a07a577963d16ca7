"""Dataclass configuration for every stage, plus desk/full presets."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class TokenizerConfig:
    n_fft: int = 4
    hop: int | None = None  # None -> max(1, n_fft // 4)
    window: str = "hann"  # "hann" | "rect"
    latent_dim: int = 64
    codebook_size: int = 128
    latent_width: int = 32
    hidden_channels: int = 64
    commitment_weight: float = 0.25
    ema_decay: float = 0.99
    spectral_loss_weight: float = 1.0
    dead_code_epochs: int = 3

    @property
    def hop_length(self) -> int:
        return self.hop if self.hop is not None else max(1, self.n_fft // 4)

    @property
    def n_freq(self) -> int:
        return self.n_fft // 2 + 1


@dataclass
class PriorConfig:
    n_layers: int = 4
    width: int = 128
    n_heads: int = 4
    mlp_ratio: int = 4
    dropout: float = 0.1
    mask_schedule: str = "uniform"  # "uniform" | "cosine"


@dataclass
class TrainConfig:
    batch_size: int = 512
    lr: float = 1e-3
    weight_decay: float = 1e-5
    stage1_epochs: int = 500
    stage2_epochs: int = 1000
    wall_clock_hours: float = 12.0
    window_stride: int = 1
    max_train_windows: int | None = None
    holdout_fraction: float = 0.1


@dataclass
class ScoringConfig:
    window_rates: tuple[float, ...] = (0.1, 0.3, 0.5)
    stride_rate: float = 0.1
    quantile: float = 0.99
    normalize_overlap: bool = True
    batch_size: int = 2048
    workers: int = 1

    def validate(self) -> None:
        if not self.window_rates:
            raise ConfigError("window_rates must not be empty")
        for r in self.window_rates:
            if not 0.0 < r <= 0.7:
                raise ConfigError(f"window rate {r} outside (0, 0.7]")
        if not 0.0 < self.stride_rate <= 1.0:
            raise ConfigError(f"stride_rate {self.stride_rate} outside (0, 1]")
        if not 0.0 < self.quantile < 1.0:
            raise ConfigError(f"quantile {self.quantile} outside (0, 1)")

    def alphas(self, latent_width: int) -> list[int]:
        """Half-widths of the masked latent span, one per window rate (deduplicated, in order)."""
        self.validate()
        out: list[int] = []
        for r in self.window_rates:
            a = max(1, int(r * latent_width / 2))
            if a not in out:
                out.append(a)
        return out

    def stride(self, window_len: int) -> int:
        self.validate()
        # round-half-up of stride_rate * T
        return max(1, int(self.stride_rate * window_len + 0.5))


@dataclass
class SamplingConfig:
    steps: int = 20
    temperature: float = 1.0
    max_mask_rate: float = 0.9
    n_samples: int = 1


@dataclass
class RunConfig:
    data_dir: str = "data"
    period_csv: str = "data/periods.csv"
    out_dir: str = "runs"
    checkpoint_dir: str = "checkpoints"
    manifest: str | None = None
    seed: int = 0
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {
            "tokenizer": TokenizerConfig,
            "prior": PriorConfig,
            "train": TrainConfig,
            "scoring": ScoringConfig,
            "sampling": SamplingConfig,
        }
        kwargs = {}
        known = {f.name for f in dataclasses.fields(cls)}
        for key, value in d.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if key in sections:
                sub = sections[key]
                sub_known = {f.name for f in dataclasses.fields(sub)}
                bad = set(value) - sub_known
                if bad:
                    raise ConfigError(f"unknown keys in [{key}]: {sorted(bad)}")
                value = dict(value)
                if key == "scoring" and "window_rates" in value:
                    value["window_rates"] = tuple(value["window_rates"])
                kwargs[key] = sub(**value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_json(p.read_text(encoding="utf-8"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]


def desk_config(**overrides) -> RunConfig:
    """Small CPU preset: trains one synthetic series in well under a minute.

    Uses the rectangular STFT window, which keeps low and high bands apart at
    ``n_fft=4`` and gives the per-band scores a cleaner split.
    """
    cfg = RunConfig(
        tokenizer=TokenizerConfig(
            n_fft=4, latent_dim=32, codebook_size=32, latent_width=16, hidden_channels=32, window="rect"
        ),
        prior=PriorConfig(n_layers=2, width=32, n_heads=4, dropout=0.1),
        train=TrainConfig(
            batch_size=64,
            stage1_epochs=15,
            stage2_epochs=160,
            max_train_windows=400,
            wall_clock_hours=5 / 60,
            window_stride=1,
        ),
        scoring=ScoringConfig(),
        sampling=SamplingConfig(),
    )
    return dataclasses.replace(cfg, **overrides)


def full_config(**overrides) -> RunConfig:
    """Settings at the published scale (GPU-sized)."""
    return dataclasses.replace(RunConfig(), **overrides)
