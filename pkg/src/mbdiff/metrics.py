"""Mel power spectrograms and the clamped, band-split Mel-SNR score."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .audio import AudioSignal
from .conditioner import mel_matrix


@dataclass(frozen=True)
class MelConfig:
    n_fft: int = 512
    hop: int = 128
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None
    eps_floor: float = 1e-8
    clamp_db: float = 25.0

    def __post_init__(self):
        if self.hop > self.n_fft:
            raise ValueError("hop must not exceed n_fft")
        if self.n_mels < 3:
            raise ValueError("need at least 3 mel bands")
        if self.eps_floor <= 0:
            raise ValueError("eps_floor must be positive")


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # (n_mels, n_frames) power
    config: MelConfig


@dataclass(frozen=True)
class MelSnrReport:
    snr_low: float
    snr_mid: float
    snr_high: float
    snr_avg: float

    def as_row(self) -> list:
        return [self.snr_low, self.snr_mid, self.snr_high, self.snr_avg]


def stft_power(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Centered Hann STFT power, reflect padded; ``(n_fft // 2 + 1, n_frames)``."""
    window = np.hanning(n_fft + 1)[:-1]  # periodic
    pad = n_fft // 2
    xp = np.pad(x, pad, mode="reflect")
    n_frames = 1 + (len(xp) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    spec = np.fft.rfft(xp[idx] * window, axis=1)
    return (spec.real**2 + spec.imag**2).T


def mel_power_spectrogram(x: AudioSignal, cfg: MelConfig = MelConfig()) -> MelSpectrogram:
    if len(x) < cfg.n_fft:
        raise ValueError(f"signal of {len(x)} samples is shorter than n_fft={cfg.n_fft}")
    fb = mel_matrix(x.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    return MelSpectrogram(fb @ stft_power(x.samples, cfg.n_fft, cfg.hop), cfg)


def band_slices(n_mels: int):
    """Split mel bins into low/mid/high thirds (80 -> 27/27/26)."""
    return np.array_split(np.arange(n_mels), 3)


def mel_snr_bins(ref: AudioSignal, rec: AudioSignal, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Clamped per-bin SNR in dB, ``(n_mels, n_frames)``."""
    if len(ref) == 0 or len(rec) == 0:
        raise ValueError("empty signal")
    if ref.sample_rate != rec.sample_rate:
        raise ValueError("sample rates differ")
    if len(ref) != len(rec):
        n = min(len(ref), len(rec))
        warnings.warn(f"length mismatch ({len(ref)} vs {len(rec)}); cropping to {n}", stacklevel=2)
        ref, rec = ref.with_samples(ref.samples[:n]), rec.with_samples(rec.samples[:n])
    scale = cfg.eps_floor + np.sqrt(np.mean(ref.samples**2))
    z = mel_power_spectrogram(ref.with_samples(ref.samples / scale), cfg).values
    zh = mel_power_spectrogram(rec.with_samples(rec.samples / scale), cfg).values
    # distortion as a power: squared difference of mel amplitudes
    delta = np.maximum((np.sqrt(z) - np.sqrt(zh)) ** 2, cfg.eps_floor)
    s = 10.0 * (np.log10(np.maximum(z, cfg.eps_floor)) - np.log10(delta))
    return np.clip(s, -cfg.clamp_db, cfg.clamp_db)


def mel_snr(ref: AudioSignal, rec: AudioSignal, cfg: MelConfig = MelConfig()) -> MelSnrReport:
    per_bin = mel_snr_bins(ref, rec, cfg).mean(axis=1)
    low, mid, high = (float(per_bin[sl].mean()) for sl in band_slices(cfg.n_mels))
    return MelSnrReport(low, mid, high, (low + mid + high) / 3.0)


def scale_invariance_check(ref: AudioSignal, rec: AudioSignal, a: float, cfg: MelConfig = MelConfig(),
                           tol_db: float = 1e-9) -> bool:
    if a <= 0:
        raise ValueError("a must be positive")
    r1 = mel_snr(ref, rec, cfg)
    r2 = mel_snr(ref.with_samples(a * ref.samples), rec.with_samples(a * rec.samples), cfg)
    return bool(np.max(np.abs(np.subtract(r1.as_row(), r2.as_row()))) <= tol_db)
