"""Mel-spaced complementary FIR filterbanks.

Each band kernel is the difference of two Hann-windowed-sinc low-pass filters,
``band_i = LP(c_{i+1}) - LP(c_i)`` with ``LP(0) = 0`` and ``LP(nyquist) = delta``.
The kernels therefore telescope to a discrete delta and ``merge(split(x))``
reproduces ``x`` up to rounding.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import oaconvolve

from .audio import AudioSignal

DEFAULT_KERNEL_LEN = 255


class FilterDesignWarning(UserWarning):
    pass


def mel(f):
    """HTK mel scale, ``2595 * log10(1 + f / 700)``."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    out = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(out) if out.ndim == 0 else out


def mel_inv(m):
    m = np.asarray(m, dtype=np.float64)
    out = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return float(out) if out.ndim == 0 else out


def mel_cutoffs(sample_rate: int, n_bands: int) -> np.ndarray:
    top = mel(sample_rate / 2)
    return np.array([mel_inv(k * top / n_bands) for k in range(1, n_bands)])


def lowpass_kernel(cutoff: float, sample_rate: int, kernel_len: int) -> np.ndarray:
    """Hann-windowed sinc with unit DC gain at ``cutoff`` Hz."""
    half = kernel_len // 2
    n = np.arange(-half, half + 1, dtype=np.float64)
    fc = 2.0 * cutoff / sample_rate  # fraction of Nyquist
    window = np.hanning(kernel_len + 2)[1:-1]
    h = fc * np.sinc(fc * n) * window
    return h / h.sum()


@dataclass(frozen=True)
class FilterBank:
    sample_rate: int
    n_bands: int
    cutoffs_hz: tuple
    kernel_len: int
    kernels: np.ndarray = field(compare=False, repr=False)
    spacing: str = "mel"

    def to_dict(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "n_bands": self.n_bands,
            "kernel_len": self.kernel_len,
            "cutoffs_hz": [float(c) for c in self.cutoffs_hz],
            "spacing": self.spacing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FilterBank":
        bank = design_bands(d["sample_rate"], d["n_bands"], d["kernel_len"], spacing=d.get("spacing", "mel"))
        if not np.array_equal(np.asarray(bank.cutoffs_hz), np.asarray(d["cutoffs_hz"], dtype=np.float64)):
            raise ValueError("stored cutoffs do not match the regenerated filterbank")
        return bank

    def hash(self) -> str:
        h = hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.kernels).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class BandSet:
    bands: tuple
    bank: FilterBank

    def __post_init__(self):
        if len(self.bands) != self.bank.n_bands:
            raise ValueError("band count does not match filterbank")
        if len({len(b) for b in self.bands}) > 1:
            raise ValueError("bands must have equal lengths")

    def __len__(self):
        return len(self.bands)

    def __getitem__(self, i) -> AudioSignal:
        return self.bands[i]

    def as_array(self) -> np.ndarray:
        return np.stack([b.samples for b in self.bands])


def design_bands(sample_rate: int, n_bands: int, kernel_len: int = DEFAULT_KERNEL_LEN,
                 spacing: str = "mel") -> FilterBank:
    """Build ``n_bands`` complementary band-pass kernels.

    ``spacing="linear"`` places cutoffs at equal Hz intervals instead of equal
    mel intervals; it exists for analysis and tests.
    """
    if n_bands < 1:
        raise ValueError("n_bands must be >= 1")
    if kernel_len % 2 == 0 or kernel_len < 63:
        raise ValueError("kernel_len must be odd and >= 63")
    nyq = sample_rate / 2
    if spacing == "mel":
        cutoffs = mel_cutoffs(sample_rate, n_bands)
    elif spacing == "linear":
        cutoffs = np.array([k * nyq / n_bands for k in range(1, n_bands)])
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    edges = np.concatenate([[0.0], cutoffs, [nyq]])
    min_width = np.min(np.diff(edges))
    if n_bands > 1 and min_width < 4.0 / kernel_len * nyq:
        warnings.warn(
            f"narrowest band ({min_width:.1f} Hz) is below the {kernel_len}-tap transition width "
            f"({4.0 / kernel_len * nyq:.1f} Hz); expect inter-band leakage",
            FilterDesignWarning,
            stacklevel=2,
        )
    delta = np.zeros(kernel_len)
    delta[kernel_len // 2] = 1.0
    lows = [np.zeros(kernel_len)] + [lowpass_kernel(c, sample_rate, kernel_len) for c in cutoffs] + [delta]
    kernels = np.stack([lows[i + 1] - lows[i] for i in range(n_bands)])
    kernels.flags.writeable = False
    return FilterBank(int(sample_rate), int(n_bands), tuple(float(c) for c in cutoffs), int(kernel_len), kernels, spacing)


def _filter(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Zero-phase filtering of ``x`` by every row of ``kernels`` (reflect padded)."""
    n = x.shape[0]
    if n == 0:
        return np.zeros((kernels.shape[0], 0))
    half = kernels.shape[1] // 2
    mode = "reflect" if n > 1 else "edge"
    xp = np.pad(x, half, mode=mode)
    return oaconvolve(xp[None, :], kernels, mode="valid", axes=1)


def split(x: AudioSignal, bank: FilterBank) -> BandSet:
    if x.sample_rate != bank.sample_rate:
        raise ValueError(f"sample rate {x.sample_rate} does not match filterbank rate {bank.sample_rate}")
    if bank.n_bands == 1:
        return BandSet((x,), bank)
    out = _filter(x.samples, bank.kernels)
    return BandSet(tuple(AudioSignal(b, x.sample_rate) for b in out), bank)


def merge(bands: BandSet | Sequence[AudioSignal]) -> AudioSignal:
    seq = bands.bands if isinstance(bands, BandSet) else tuple(bands)
    if not seq:
        raise ValueError("nothing to merge")
    if len({len(b) for b in seq}) > 1:
        raise ValueError("band lengths differ")
    total = np.zeros(len(seq[0]))
    for b in seq:
        total = total + b.samples
    return AudioSignal(total, seq[0].sample_rate)
