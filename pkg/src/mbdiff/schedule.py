"""Noise schedules (linear, cosine, p-power) and sampling step plans.

Steps are indexed ``t = 1..T``; ``t = 0`` is the clean sample, so
``alphas_bar[t - 1]`` holds the noise level at step ``t`` and ``alpha_bar(0)``
is 1 by convention.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_P = 7.5
DEFAULT_BETA0 = 1.0e-5
DEFAULT_BETAT = 2.9e-2
DEFAULT_T = 1000
DEFAULT_SAMPLING_STEPS = 20


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas_bar: np.ndarray
    beta_tilde: np.ndarray
    variant: tuple

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alphas_bar[t - 1])

    def describe(self) -> dict:
        name, *args = self.variant
        return {"variant": name, "args": list(args), "T": self.T}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "beta", "alpha_bar", "beta_tilde"])
        for t in range(1, self.T + 1):
            w.writerow([t, repr(self.beta(t)), repr(self.alpha_bar(t)), repr(float(self.beta_tilde[t - 1]))])
        return buf.getvalue()

    def fraction_above(self, level: float = 0.99) -> float:
        return float(np.mean(self.alphas_bar > level))


def _from_betas(betas_ext: np.ndarray, variant: tuple) -> NoiseSchedule:
    """Assemble the tables from extended-precision betas."""
    b = np.asarray(betas_ext, dtype=np.longdouble)
    if np.any(b <= 0) or np.any(b >= 1):
        raise ValueError("betas must lie in (0, 1)")
    abar = np.cumprod(1 - b)
    abar_prev = np.concatenate([np.ones(1, dtype=np.longdouble), abar[:-1]])
    bt = (1 - abar_prev) / (1 - abar) * b
    tables = [np.asarray(a, dtype=np.float64) for a in (b, abar, bt)]
    for a in tables:
        a.flags.writeable = False
    return NoiseSchedule(*tables, variant)


def power_schedule(p: float = DEFAULT_P, beta0: float = DEFAULT_BETA0, betaT: float = DEFAULT_BETAT,
                   T: int = DEFAULT_T) -> NoiseSchedule:
    """Interpolate ``beta ** (1/p)`` linearly in ``t/T`` and raise back to ``p``."""
    if not (0 < beta0 < betaT < 1):
        raise ValueError("need 0 < beta0 < betaT < 1")
    if p <= 0 or T < 1:
        raise ValueError("need p > 0 and T >= 1")
    ld = np.longdouble
    t = np.arange(1, T + 1, dtype=ld)
    lo = ld(beta0) ** (1 / ld(p))
    hi = ld(betaT) ** (1 / ld(p))
    betas = (lo + t / ld(T) * (hi - lo)) ** ld(p)
    betas[-1] = ld(betaT)
    return _from_betas(betas, ("power", float(p), float(beta0), float(betaT)))


def linear_schedule(beta0: float, betaT: float, T: int) -> NoiseSchedule:
    if not (0 < beta0 < betaT < 1) or T < 1:
        raise ValueError("need 0 < beta0 < betaT < 1 and T >= 1")
    ld = np.longdouble
    t = np.arange(1, T + 1, dtype=ld)
    betas = ld(beta0) + t / ld(T) * (ld(betaT) - ld(beta0))
    betas[-1] = ld(betaT)
    return _from_betas(betas, ("linear", float(beta0), float(betaT)))


def cosine_schedule(T: int = DEFAULT_T, offset: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    if T < 1 or offset < 0:
        raise ValueError("need T >= 1 and offset >= 0")
    ld = np.longdouble
    x = np.arange(0, T + 1, dtype=ld) / ld(T)
    f = np.cos((x + ld(offset)) / (1 + ld(offset)) * ld(math.pi) / 2) ** 2
    betas = np.minimum(1 - f[1:] / f[:-1], ld(max_beta))
    return _from_betas(betas, ("cosine", float(offset)))


def make_schedule(variant: str, T: int = DEFAULT_T, p: float = DEFAULT_P, beta0: float = DEFAULT_BETA0,
                  betaT: float = DEFAULT_BETAT, offset: float = 0.008) -> NoiseSchedule:
    if variant == "power":
        return power_schedule(p, beta0, betaT, T)
    if variant == "linear":
        return linear_schedule(beta0, betaT, T)
    if variant == "cosine":
        return cosine_schedule(T, offset)
    raise ValueError(f"unknown schedule variant {variant!r}")


@dataclass(frozen=True)
class StepPlan:
    steps: tuple

    @property
    def N(self) -> int:
        return len(self.steps)

    def pairs(self):
        """Descending ``(t, t_prev)`` pairs; the last pair ends at 0."""
        s = (0,) + self.steps
        return [(s[k], s[k - 1]) for k in range(len(s) - 1, 0, -1)]


def subsample(T: int, N: int) -> StepPlan:
    """Evenly spaced steps ``round(i * T / N)`` for ``i = 1..N``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if N > T:
        raise ValueError("N cannot exceed T")
    steps = sorted({(2 * i * T + N) // (2 * N) for i in range(1, N + 1)})
    return StepPlan(tuple(s for s in steps if 1 <= s <= T))
