"""Reversible per-band energy rebalancing toward white-noise band levels.

Band ``i`` of a signal is scaled by ``(sigma_noise[i] / sigma_data[i]) ** rho``
on the way in and by the reciprocal on the way out.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .audio import AudioSignal, RngStream
from .filterbank import FilterBank, split

SIGMA_FLOOR = 1e-8
DEFAULT_EQ_BANDS = 8
DEFAULT_RHO = 0.4


class DegenerateStatisticsWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EqProfile:
    bank: FilterBank
    sigma_noise: tuple
    sigma_data: tuple
    rho: float = DEFAULT_RHO

    def __post_init__(self):
        n = self.bank.n_bands
        if len(self.sigma_noise) != n or len(self.sigma_data) != n:
            raise ValueError("sigma vectors must match the number of bands")
        if min(self.sigma_noise) <= 0 or min(self.sigma_data) <= 0:
            raise ValueError("band sigmas must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        object.__setattr__(self, "sigma_noise", tuple(float(s) for s in self.sigma_noise))
        object.__setattr__(self, "sigma_data", tuple(float(s) for s in self.sigma_data))

    def gains(self) -> np.ndarray:
        return (np.asarray(self.sigma_noise) / np.asarray(self.sigma_data)) ** self.rho

    def inverse_gains(self) -> np.ndarray:
        return (np.asarray(self.sigma_data) / np.asarray(self.sigma_noise)) ** self.rho

    def with_rho(self, rho: float) -> "EqProfile":
        return EqProfile(self.bank, self.sigma_noise, self.sigma_data, rho)

    def to_dict(self) -> dict:
        return {
            "bank": self.bank.to_dict(),
            "sigma_noise": list(self.sigma_noise),
            "sigma_data": list(self.sigma_data),
            "rho": self.rho,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EqProfile":
        return cls(FilterBank.from_dict(d["bank"]), tuple(d["sigma_noise"]), tuple(d["sigma_data"]), float(d["rho"]))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "EqProfile":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def noise_band_stats(bank: FilterBank, n_samples: int, rng: RngStream):
    """Monte-Carlo band standard deviations of unit white noise.

    Returns ``(sigmas, rel_stderr)``; the relative standard error of each
    estimate is computed from the sample variance of the squared band values.
    """
    if n_samples < 100_000:
        raise ValueError("n_samples must be at least 1e5")
    noise = AudioSignal(rng.normal(n_samples), bank.sample_rate)
    bands = split(noise, bank).as_array()
    sq = bands**2
    ms = sq.mean(axis=1)
    # squared band samples are correlated over roughly kernel_len lags
    n_eff = n_samples / max(1, bank.kernel_len // 2) if bank.n_bands > 1 else n_samples
    rel_se = 0.5 * sq.std(axis=1) / np.maximum(ms, 1e-300) / np.sqrt(n_eff)
    return np.sqrt(ms), rel_se


def measure_band_stats(corpus: Sequence[AudioSignal], bank: FilterBank) -> np.ndarray:
    """Pooled per-band RMS over the unit-variance-normalized corpus."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    sum_sq = np.zeros(bank.n_bands)
    count = 0
    for x in corpus:
        if len(x) < bank.kernel_len:
            raise ValueError(f"signal of {len(x)} samples is shorter than the filter ({bank.kernel_len})")
        rms = np.sqrt(np.mean(x.samples**2))
        xn = x.with_samples(x.samples / rms) if rms > 0 else x
        sum_sq += np.sum(split(xn, bank).as_array() ** 2, axis=1)
        count += len(x)
    sigma = np.sqrt(sum_sq / count)
    low = sigma < SIGMA_FLOOR
    if np.any(low):
        warnings.warn(
            f"bands {np.flatnonzero(low).tolist()} carry no energy; floored at {SIGMA_FLOOR}",
            DegenerateStatisticsWarning,
            stacklevel=2,
        )
    return np.maximum(sigma, SIGMA_FLOOR)


def fit_profile(corpus: Sequence[AudioSignal], bank: FilterBank, rng: RngStream,
                rho: float = DEFAULT_RHO, n_noise: int = 400_000) -> EqProfile:
    sigma_noise, _ = noise_band_stats(bank, n_noise, rng)
    sigma_data = measure_band_stats(corpus, bank)
    return EqProfile(bank, tuple(sigma_noise), tuple(sigma_data), rho)


def _apply(x: AudioSignal, profile: EqProfile, gains: np.ndarray) -> AudioSignal:
    if x.sample_rate != profile.bank.sample_rate:
        raise ValueError(f"sample rate {x.sample_rate} does not match profile rate {profile.bank.sample_rate}")
    bands = split(x, profile.bank).as_array()
    return x.with_samples(gains @ bands)


def equalize(x: AudioSignal, profile: EqProfile) -> AudioSignal:
    return _apply(x, profile, profile.gains())


def deequalize(y: AudioSignal, profile: EqProfile) -> AudioSignal:
    return _apply(y, profile, profile.inverse_gains())
