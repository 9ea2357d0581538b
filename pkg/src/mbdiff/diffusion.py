"""DDPM forward corruption, reverse steps and plan-driven sampling.

Everything here operates on plain float arrays of any shape; a batch of chains
is just a larger array. Denoisers are callables ``predict(x_t, t, cond)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import numpy as np

from .audio import RngStream
from .schedule import NoiseSchedule, StepPlan


class Denoiser(Protocol):
    def predict(self, x_t: np.ndarray, t: int, cond) -> np.ndarray: ...


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not 1 <= t <= sched.T:
        raise ValueError(f"step {t} outside 1..{sched.T}")


def forward_sample(x0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        _check_t(int(t), sched)
        abar = sched.alpha_bar(int(t))
    else:
        if t_arr.min() < 1 or t_arr.max() > sched.T:
            raise ValueError("step outside 1..T")
        abar = sched.alphas_bar[t_arr - 1].reshape(t_arr.shape + (1,) * (x0.ndim - t_arr.ndim))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def forward_chain(x0, t: int, sched: NoiseSchedule, rng: RngStream) -> np.ndarray:
    """Run ``q(x_s | x_{s-1})`` step by step up to ``t`` (reference for the closed form)."""
    x = np.array(x0, dtype=np.float64)
    for s in range(1, t + 1):
        b = sched.beta(s)
        x = np.sqrt(1.0 - b) * x + np.sqrt(b) * rng.normal(x.shape)
    return x


def training_pair(x0, cond, sched: NoiseSchedule, rng: RngStream):
    """Draw ``t ~ U{1..T}`` and ``eps ~ N(0, I)``; return ``(x_t, t, eps)``.

    ``cond`` is carried by the caller; it does not influence the corruption.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    t = int(rng.integers(1, sched.T + 1))
    eps = rng.normal(x0.shape)
    return forward_sample(x0, t, eps, sched), t, eps


def training_batch(x0: np.ndarray, sched: NoiseSchedule, rng: RngStream):
    """Batched :func:`training_pair` over the leading axis of ``x0``."""
    t = rng.integers(1, sched.T + 1, size=x0.shape[0])
    eps = rng.normal(x0.shape)
    return forward_sample(x0, t, eps, sched), t, eps


def l2_loss(eps, eps_hat) -> float:
    eps = np.asarray(eps)
    return float(np.mean((eps - np.asarray(eps_hat)) ** 2))


def _step(x, eps_hat, beta, abar, beta_tilde, noise):
    mean = (x - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(1.0 - beta)
    if noise is None:
        return mean
    return mean + np.sqrt(beta_tilde) * noise


def reverse_step(x_t, t: int, eps_hat, sched: NoiseSchedule, noise=None, variance: str = "beta_tilde"):
    """One ancestral step ``x_t -> x_{t-1}``.

    The injected noise has variance ``beta_tilde_t``; ``variance="beta"`` swaps
    in ``beta_t`` and exists only for comparisons in tests.
    """
    _check_t(t, sched)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape or (noise is not None and np.shape(noise) != x_t.shape):
        raise ValueError("length mismatch between x_t, eps_hat and noise")
    bt = sched.beta(t) if variance == "beta" else float(sched.beta_tilde[t - 1])
    return _step(x_t, eps_hat, sched.beta(t), sched.alpha_bar(t), bt, noise)


def plan_coefficients(sched: NoiseSchedule, t: int, t_prev: int):
    """``(beta, abar, beta_tilde)`` for jumping from ``t`` to ``t_prev``.

    Adjacent steps reuse the schedule tables verbatim so a full plan matches
    step-by-step sampling exactly.
    """
    if t_prev == t - 1:
        return sched.beta(t), sched.alpha_bar(t), float(sched.beta_tilde[t - 1])
    abar, abar_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    beta = 1.0 - abar / abar_prev
    return beta, abar, (1.0 - abar_prev) / (1.0 - abar) * beta


@dataclass
class SampleTrace:
    rows: list

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x_norm", "eps_hat_norm"])
            w.writerows(self.rows)


def sample(denoiser, cond, sched: NoiseSchedule, plan: StepPlan, prior: Optional[np.ndarray] = None,
           rng: Optional[RngStream] = None, shape=None, skip_above: Optional[int] = None,
           trace: Optional[SampleTrace] = None) -> np.ndarray:
    """Run the reverse chain over ``plan.steps`` (descending) from ``prior``.

    ``denoiser`` is either an object with ``predict`` or a bare callable.
    ``skip_above`` drops plan steps with ``t > skip_above``, i.e. treats the
    model as the identity there. No noise is added on the final step.
    """
    if plan.N == 0:
        raise ValueError("empty step plan")
    predict: Callable = getattr(denoiser, "predict", denoiser)
    if prior is None:
        if rng is None or shape is None:
            raise ValueError("need either a prior or (rng, shape)")
        prior = rng.normal(shape)
    x = np.array(prior, dtype=np.float64)
    pairs = plan.pairs()
    if skip_above is not None:
        pairs = [(t, tp) for t, tp in pairs if t <= skip_above]
    for t, t_prev in pairs:
        eps_hat = np.asarray(predict(x, t, cond), dtype=np.float64)
        if eps_hat.shape != x.shape:
            raise ValueError("denoiser output shape mismatch")
        beta, abar, bt = plan_coefficients(sched, t, t_prev)
        noise = None
        if t_prev > 0:
            if rng is None:
                raise ValueError("stochastic steps need an rng")
            noise = rng.normal(x.shape)
        x = _step(x, eps_hat, beta, abar, bt, noise)
        if trace is not None:
            trace.rows.append((t, float(np.linalg.norm(x)), float(np.linalg.norm(eps_hat))))
    return x


def oracle_eps(x_t, t: int, mu: float, s: float, sched: NoiseSchedule) -> np.ndarray:
    """Posterior mean of the noise when the data are ``N(mu, s^2)`` per coordinate."""
    if s < 0:
        raise ValueError("s must be non-negative")
    abar = sched.alpha_bar(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    return np.sqrt(1.0 - abar) * (x_t - np.sqrt(abar) * mu) / (abar * s * s + 1.0 - abar)


@dataclass(frozen=True)
class GaussianOracle:
    """Exact noise predictor for Gaussian data; a stand-in for a trained network."""

    mu: float
    s: float
    sched: NoiseSchedule

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError("s must be positive")

    def predict(self, x_t, t, cond=None):
        return oracle_eps(x_t, t, self.mu, self.s, self.sched)


def prior_kl(x0, sched: NoiseSchedule) -> float:
    """KL( N(sqrt(abar_T) x0, (1 - abar_T) I) || N(0, I) )."""
    x0 = np.asarray(x0, dtype=np.float64)
    a = sched.alpha_bar(sched.T)
    d = x0.size
    var = 1.0 - a
    return float(0.5 * (d * var + a * np.sum(x0**2) - d - d * np.log(var)))
