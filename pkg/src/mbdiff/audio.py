"""Audio containers, seeded random streams, WAV I/O and synthetic test signals."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.io import wavfile

RNG_ALGORITHM = "numpy.PCG64/SeedSequence-v1"


class WavError(Exception):
    """Base class for WAV reading/writing failures."""


class WavMissingError(WavError, FileNotFoundError):
    pass


class WavHeaderError(WavError):
    pass


class WavEncodingError(WavError):
    pass


class AliasingError(ValueError):
    pass


@dataclass(frozen=True)
class AudioSignal:
    """Mono signal held as float64 samples."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"AudioSignal expects 1-D samples, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("AudioSignal samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        x = x.copy()
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "AudioSignal":
        return AudioSignal(samples, self.sample_rate)


class RngStream:
    """Single-owner Gaussian/uniform source with reproducible child streams.

    Child streams are derived through ``SeedSequence.spawn`` so a parent and its
    children never share state.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
            self.seed = int(seed.entropy)
        else:
            self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
            self._seq = np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def spawn(self, n: int) -> list["RngStream"]:
        return [RngStream(s) for s in self._seq.spawn(n)]

    def child(self, key: int) -> "RngStream":
        """Stream keyed by ``key``; independent of how many other children exist."""
        seq = np.random.SeedSequence(self._seq.entropy, spawn_key=self._seq.spawn_key + (int(key),))
        return RngStream(seq)

    def get_state(self) -> dict:
        return self.generator.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.generator.bit_generator.state = state


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic signal.

    ``kind`` is one of ``sine-mixture``, ``chirp``, ``white-noise`` or
    ``pulse-train``. Parameters per kind:

    * sine-mixture: ``frequencies``, ``amplitudes``, optional ``phases``
    * chirp: ``f_start``, ``f_end``, ``amplitude``
    * white-noise: ``amplitude``
    * pulse-train: ``frequency``, ``amplitude``
    """

    kind: str
    params: dict = field(default_factory=dict)

    KINDS = ("sine-mixture", "chirp", "white-noise", "pulse-train")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown synth kind {self.kind!r}")

    def frequencies(self) -> list[float]:
        p = self.params
        if self.kind == "sine-mixture":
            return [float(f) for f in p["frequencies"]]
        if self.kind == "chirp":
            return [float(p["f_start"]), float(p["f_end"])]
        if self.kind == "pulse-train":
            return [float(p["frequency"])]
        return []

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": _jsonable(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(d["kind"], dict(d.get("params", {})))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def synthesize(spec: SynthSpec, duration: float, sample_rate: int, rng: RngStream | None = None) -> AudioSignal:
    """Render ``spec`` as ``duration`` seconds of audio.

    Only ``white-noise`` consumes randomness; the other kinds are closed-form.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    nyquist = sample_rate / 2
    for f in spec.frequencies():
        if f >= nyquist or f < 0:
            raise AliasingError(f"component {f} Hz not in [0, {nyquist}) Hz")
    n = int(round(duration * sample_rate))
    k = np.arange(n, dtype=np.float64)
    p = spec.params
    if spec.kind == "sine-mixture":
        freqs = p["frequencies"]
        amps = p.get("amplitudes", [1.0] * len(freqs))
        phases = p.get("phases", [0.0] * len(freqs))
        x = np.zeros(n)
        for f, a, ph in zip(freqs, amps, phases):
            x += a * np.sin(2 * np.pi * f * k / sample_rate + ph)
    elif spec.kind == "chirp":
        f0, f1 = float(p["f_start"]), float(p["f_end"])
        tt = k / sample_rate
        # linear sweep: phase is the integral of the instantaneous frequency
        phase = 2 * np.pi * (f0 * tt + 0.5 * (f1 - f0) / duration * tt**2)
        x = p.get("amplitude", 1.0) * np.sin(phase)
    elif spec.kind == "white-noise":
        if rng is None:
            raise ValueError("white-noise synthesis needs an RngStream")
        x = p.get("amplitude", 1.0) * rng.normal(n)
    else:
        period = sample_rate / float(p["frequency"])
        x = np.zeros(n)
        x[np.floor(np.arange(0, n, period)).astype(int)] = p.get("amplitude", 1.0)
    return AudioSignal(x, sample_rate)


# --- WAV I/O ---------------------------------------------------------------


_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def _parse_chunks(raw: bytes, path: str):
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavHeaderError(f"{path}: not a RIFF/WAVE file or truncated header")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavHeaderError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _EXTENSIBLE and len(body) >= 26:
                (sub,) = struct.unpack("<H", body[24:26])
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            # tolerate a data chunk cut short by the writer
            data = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavHeaderError(f"{path}: missing fmt chunk")
    if data is None:
        raise WavHeaderError(f"{path}: missing data chunk")
    return fmt, data


def load_wav(path) -> AudioSignal:
    """Read a PCM16 or float32 WAV file, downmixing stereo to mono."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise WavMissingError(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    (tag, channels, rate, _, block_align, bits), data = _parse_chunks(raw, path)
    if channels < 1 or rate <= 0 or block_align <= 0:
        raise WavHeaderError(f"{path}: invalid fmt fields")
    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise WavEncodingError(f"{path}: unsupported encoding (format tag {tag}, {bits} bits)")
    if channels > 2:
        raise WavEncodingError(f"{path}: {channels} channels, only mono/stereo supported")
    n_frames = len(data) // block_align
    x = np.frombuffer(data[: n_frames * block_align], dtype=dtype).astype(np.float64) * scale
    if channels == 2:
        x = x.reshape(-1, 2).mean(axis=1)
    return AudioSignal(x, rate)


def save_wav(signal: AudioSignal, path, encoding: str = "float32") -> int:
    """Write ``signal``; returns the number of clipped samples (pcm16 only)."""
    path = os.fspath(path)
    x = signal.samples
    clipped = 0
    if encoding == "pcm16":
        clipped = int(np.count_nonzero(np.abs(x) > 1.0))
        y = np.clip(x, -1.0, 1.0)
        data = np.clip(np.round(y * 32768.0), -32768, 32767).astype(np.int16)
    elif encoding == "float32":
        data = x.astype(np.float32)
    else:
        raise WavEncodingError(f"unsupported encoding {encoding!r}")
    wavfile.write(path, signal.sample_rate, data)
    return clipped


def concat(signals: Sequence[AudioSignal]) -> AudioSignal:
    rates = {s.sample_rate for s in signals}
    if len(rates) != 1:
        raise ValueError("cannot concatenate signals with different sample rates")
    return AudioSignal(np.concatenate([s.samples for s in signals]), rates.pop())
