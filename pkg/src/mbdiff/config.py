"""Pipeline configuration: nested dataclasses with a flat, typed file format.

Config files are JSON objects with dotted keys (``"eq.rho": 0.4``). Unknown
keys and values of the wrong type are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

from .denoiser import DenoiserConfig
from .schedule import DEFAULT_BETA0, DEFAULT_BETAT, DEFAULT_P, DEFAULT_SAMPLING_STEPS, DEFAULT_T


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EqConfig:
    n_bands: int = 8
    rho: float = 0.4
    kernel_len_taps: int = 255
    noise_samples: int = 400_000


@dataclass(frozen=True)
class BandConfig:
    n_bands: int = 4
    kernel_len_taps: int = 255


@dataclass(frozen=True)
class ScheduleConfig:
    variant: str = "power"
    p: float = DEFAULT_P
    beta0: float = DEFAULT_BETA0
    betaT: float = DEFAULT_BETAT
    T: int = DEFAULT_T
    cosine_offset: float = 0.008
    skip_above: Optional[int] = None


@dataclass(frozen=True)
class SamplingConfig:
    steps: int = DEFAULT_SAMPLING_STEPS


@dataclass(frozen=True)
class ConditionerConfig:
    K: int = 64
    n_books: int = 2
    frame_len_samples: int = 256
    hop_samples: int = 128
    dim: int = 16
    kmeans_iters: int = 25


@dataclass(frozen=True)
class TrainingConfig:
    batch: int = 16
    iters: int = 2000
    lr: float = 2e-3
    seed: int = 0
    segment_samples: int = 512
    precondition: bool = True


@dataclass(frozen=True)
class CorpusConfig:
    n_items: int = 50
    n_frames: int = 31
    kind: str = "sine-mixture"
    f_min_hz: float = 60.0
    f_max_hz: float = 3600.0
    max_partials: int = 3


@dataclass(frozen=True)
class PathsConfig:
    corpus_dir: str = ""
    artifacts_dir: str = "artifacts"


@dataclass(frozen=True)
class PipelineConfig:
    sample_rate_hz: int = 8000
    eq: EqConfig = field(default_factory=EqConfig)
    diffusion_bands: BandConfig = field(default_factory=BandConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    conditioner: ConditionerConfig = field(default_factory=ConditionerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if self.denoiser.T != self.schedule.T:
            raise ConfigError("denoiser.T must equal schedule.T")
        if self.denoiser.cond_dim != self.conditioner.dim:
            raise ConfigError("denoiser.cond_dim must equal conditioner.dim")
        if self.training.segment_samples % self.denoiser.multiple:
            raise ConfigError("training.segment_samples must be a multiple of 4**depth")
        if not 0.0 <= self.eq.rho <= 1.0:
            raise ConfigError("eq.rho must lie in [0, 1]")

    # flat key/value round trip --------------------------------------------

    def to_flat(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for g in dataclasses.fields(v):
                    out[f"{f.name}.{g.name}"] = getattr(v, g.name)
            else:
                out[f.name] = v
        return out

    def replace(self, **flat) -> "PipelineConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"eq.rho": 0.0})``."""
        data = self.to_flat()
        for k, v in flat.items():
            if k not in data:
                raise ConfigError(f"unknown config key {k!r}")
            data[k] = v
        return from_flat(data)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_flat(), fh, indent=2, sort_keys=True)


def _coerce(key: str, value, default):
    if default is None:
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"{key}: expected integer or null, got {value!r}")
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


def from_flat(data: dict) -> PipelineConfig:
    base = PipelineConfig()
    defaults = base.to_flat()
    unknown = sorted(set(data) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    merged = dict(defaults)
    for k, v in data.items():
        merged[k] = _coerce(k, v, defaults[k])
    kwargs = {}
    try:
        for f in dataclasses.fields(base):
            sub = getattr(base, f.name)
            if dataclasses.is_dataclass(sub):
                kwargs[f.name] = type(sub)(**{g.name: merged[f"{f.name}.{g.name}"] for g in dataclasses.fields(sub)})
            else:
                kwargs[f.name] = merged[f.name]
        return PipelineConfig(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat JSON object")
    return from_flat(data)
