"""Frame-level codebook tokens used as decoder conditioning.

A stand-in for a neural codec: short-time mel log-power frames are quantized by
residual k-means codebooks into integer tokens. Tokens are embedded by averaging
the selected centroids across codebooks, then linearly upsampled in time.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .audio import AudioSignal, RngStream
from .filterbank import mel, mel_inv

FEATURE_FLOOR = 1e-10
DEFAULT_FEATURE_DIM = 16
TOKEN_MAGIC = b"MBDTOK01"


class GeometryError(ValueError):
    pass


class InsufficientFramesError(ValueError):
    pass


def mel_matrix(sample_rate: int, n_fft: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters, each scaled to unit area in Hz.

    Returns an ``(n_mels, n_fft // 2 + 1)`` matrix.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    pts = mel_inv(np.linspace(mel(fmin), mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, ctr, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs[None, :] - lo) / (ctr - lo)
    down = (hi - freqs[None, :]) / (hi - ctr)
    tri = np.maximum(0.0, np.minimum(up, down))
    return tri * (2.0 / (hi - lo))


def n_frames_for(n_samples: int, frame_len: int, hop: int) -> int:
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // hop + 1


def extract_frames(x: AudioSignal, frame_len: int = 256, hop: int = 128, dim: int = DEFAULT_FEATURE_DIM) -> np.ndarray:
    """Per-frame log10 mel power, power normalized by the window energy.

    Only complete frames are kept. Returns ``(n_frames, dim)``.
    """
    n = n_frames_for(len(x), frame_len, hop)
    if n == 0:
        raise GeometryError(f"signal of {len(x)} samples is shorter than one frame ({frame_len})")
    window = np.hanning(frame_len + 2)[1:-1]
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n)[:, None]
    frames = x.samples[idx] * window
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2 / np.sum(window**2)
    fb = mel_matrix(x.sample_rate, frame_len, dim)
    return np.log10(power @ fb.T + FEATURE_FLOOR)


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray  # (n_books, K, dim)
    frame_len: int
    hop: int
    sample_rate: int

    @property
    def n_books(self) -> int:
        return self.centroids.shape[0]

    @property
    def K(self) -> int:
        return self.centroids.shape[1]

    @property
    def dim(self) -> int:
        return self.centroids.shape[2]

    def geometry(self) -> dict:
        return {"frame_len": self.frame_len, "hop": self.hop, "sample_rate": self.sample_rate}

    def to_dict(self) -> dict:
        return {**self.geometry(), "centroids": self.centroids.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Codebook":
        return cls(np.asarray(d["centroids"], dtype=np.float64), int(d["frame_len"]), int(d["hop"]), int(d["sample_rate"]))

    def hash(self) -> str:
        h = hashlib.sha256(json.dumps(self.geometry(), sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.centroids, dtype="<f8").tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Codebook":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dequantize(self, tokens: np.ndarray) -> np.ndarray:
        """Residual reconstruction: sum of the selected centroids across books."""
        return sum(self.centroids[b][tokens[b]] for b in range(self.n_books))


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray  # (n_books, n_frames) int
    frame_len: int
    hop: int
    sample_rate: int
    K: int
    codebook_hash: str = ""

    def __post_init__(self):
        tok = np.asarray(self.tokens, dtype=np.int64)
        if tok.ndim != 2:
            raise ValueError("tokens must be a (n_books, n_frames) matrix")
        if tok.size and (tok.min() < 0 or tok.max() >= self.K):
            raise ValueError(f"token index outside [0, {self.K})")
        object.__setattr__(self, "tokens", tok)

    @property
    def n_books(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_frames(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_samples(self) -> int:
        """Length of the signal these frames tile exactly."""
        return (self.n_frames - 1) * self.hop + self.frame_len

    def bitrate(self) -> float:
        duration = self.n_samples / self.sample_rate
        return self.n_books * self.n_frames * np.log2(self.K) / duration


def _kmeans_pp(data: np.ndarray, K: int, rng: RngStream) -> np.ndarray:
    centers = [data[int(rng.integers(0, len(data)))]]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(0, len(data)))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.uniform() * total))
            idx = min(idx, len(data) - 1)
        centers.append(data[idx])
        d2 = np.minimum(d2, np.sum((data - data[idx]) ** 2, axis=1))
    return np.array(centers)


def _sqdist(data: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return np.sum((data[:, None, :] - centers[None, :, :]) ** 2, axis=2)


def kmeans(data: np.ndarray, K: int, iters: int, rng: RngStream):
    """Lloyd's algorithm from a k-means++ start.

    Empty clusters are re-seeded with the point farthest from its centroid.
    Returns ``(centroids, labels, inertia_history)``.
    """
    centers = _kmeans_pp(data, K, rng)
    history = []
    labels = None
    for _ in range(max(1, iters)):
        d = _sqdist(data, centers)
        labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(len(data)), labels].sum()))
        new = centers.copy()
        for k in range(K):
            members = labels == k
            if np.any(members):
                new[k] = data[members].mean(axis=0)
        for k in range(K):
            if not np.any(labels == k):
                dist = np.sum((data - new[labels]) ** 2, axis=1)
                far = int(np.argmax(dist))
                new[k] = data[far]
                labels[far] = k
        if np.array_equal(new, centers):
            break
        centers = new
    d = _sqdist(data, centers)
    labels = np.argmin(d, axis=1)
    history.append(float(d[np.arange(len(data)), labels].sum()))
    return centers, labels, history


def fit_codebook(frames: np.ndarray, K: int, n_books: int, iters: int, rng: RngStream,
                 frame_len: int = 256, hop: int = 128, sample_rate: int = 8000):
    """Fit ``n_books`` residual codebooks; returns ``(codebook, inertia_histories)``."""
    frames = np.asarray(frames, dtype=np.float64)
    residual = frames.copy()
    books, histories = [], []
    for b in range(n_books):
        distinct = np.unique(residual, axis=0).shape[0]
        if distinct < K:
            raise InsufficientFramesError(f"book {b}: {distinct} distinct frames for K={K}")
        centers, labels, hist = kmeans(residual, K, iters, rng)
        books.append(centers)
        histories.append(hist)
        residual = residual - centers[labels]
    return Codebook(np.stack(books), frame_len, hop, sample_rate), histories


def quantize(frames: np.ndarray, book: Codebook) -> np.ndarray:
    """Nearest-centroid residual assignment; ties go to the lowest index."""
    residual = np.asarray(frames, dtype=np.float64)
    out = np.empty((book.n_books, residual.shape[0]), dtype=np.int64)
    for b in range(book.n_books):
        idx = np.argmin(_sqdist(residual, book.centroids[b]), axis=1)
        out[b] = idx
        residual = residual - book.centroids[b][idx]
    return out


def encode(x: AudioSignal, book: Codebook) -> TokenSequence:
    if x.sample_rate != book.sample_rate:
        raise GeometryError(f"sample rate {x.sample_rate} != codebook rate {book.sample_rate}")
    frames = extract_frames(x, book.frame_len, book.hop, book.dim)
    return TokenSequence(quantize(frames, book), book.frame_len, book.hop, book.sample_rate, book.K, book.hash())


def embed(tokens: TokenSequence, book: Codebook) -> np.ndarray:
    """Average of the selected centroids across books, ``(n_frames, dim)``."""
    tok = tokens.tokens
    if tok.shape[0] != book.n_books:
        raise GeometryError(f"{tok.shape[0]} token rows for {book.n_books} codebooks")
    if tok.size and (tok.min() < 0 or tok.max() >= book.K):
        raise ValueError("token index out of range")
    return np.mean([book.centroids[b][tok[b]] for b in range(book.n_books)], axis=0)


def upsample_linear(frames, target_len: int) -> np.ndarray:
    """Endpoint-preserving linear interpolation along the first axis."""
    frames = np.asarray(frames, dtype=np.float64)
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    n = frames.shape[0]
    if n < 1:
        raise ValueError("need at least one frame")
    if n == target_len:
        return frames.copy()
    if n == 1:
        return np.repeat(frames, target_len, axis=0)
    pos = np.linspace(0.0, n - 1, target_len)
    i0 = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    frac = (pos - i0)[:, None]
    return frames[i0] * (1.0 - frac) + frames[i0 + 1] * frac


# --- token files -------------------------------------------------------------


def save_tokens(tokens: TokenSequence, path) -> None:
    header = {
        "K": tokens.K,
        "n_books": tokens.n_books,
        "n_frames": tokens.n_frames,
        "frame_len": tokens.frame_len,
        "hop": tokens.hop,
        "sample_rate": tokens.sample_rate,
        "codebook_hash": tokens.codebook_hash,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(TOKEN_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(np.ascontiguousarray(tokens.tokens, dtype="<i4").tobytes())


def load_tokens(path) -> TokenSequence:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != TOKEN_MAGIC:
        raise GeometryError(f"{path}: not a token file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    shape = (header["n_books"], header["n_frames"])
    body = raw[12 + hlen:]
    if len(body) != 4 * shape[0] * shape[1]:
        raise GeometryError(f"{path}: token payload size does not match header")
    tok = np.frombuffer(body, dtype="<i4").reshape(shape)
    return TokenSequence(tok, header["frame_len"], header["hop"], header["sample_rate"], header["K"],
                         header.get("codebook_hash", ""))


def import_external(token_matrix, centroid_table, frame_len: int, hop: int, sample_rate: int):
    """Wrap externally produced tokens and centroids (e.g. a real codec's latents).

    ``centroid_table`` is ``(n_books, K, dim)`` or ``(K, dim)`` for one book.
    Returns ``(TokenSequence, Codebook)``.
    """
    cents = np.asarray(centroid_table, dtype=np.float64)
    if cents.ndim == 2:
        cents = cents[None]
    tok = np.asarray(token_matrix, dtype=np.int64)
    if tok.ndim == 1:
        tok = tok[None]
    book = Codebook(cents, int(frame_len), int(hop), int(sample_rate))
    if tok.shape[0] != book.n_books:
        raise GeometryError("token rows do not match the number of centroid tables")
    return TokenSequence(tok, book.frame_len, book.hop, book.sample_rate, book.K, book.hash()), book


def load_external(tokens_path, centroids_path, frame_len: int, hop: int, sample_rate: int):
    """File front-end for :func:`import_external` (``.npy`` arrays)."""
    tok = np.load(tokens_path)
    cents = np.load(centroids_path)
    return import_external(tok, cents, frame_len, hop, sample_rate)

