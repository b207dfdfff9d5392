"""Core denoising-diffusion mechanics.

Implements the Markovian noising process and its reversal for a linear
variance schedule:

    forward:    x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps
    x0 recover: x0_hat = (x_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)
    reverse:    x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat)
                          / sqrt(alpha_t)  +  sigma_t * z,
                sigma_t^2 = beta_t (fixed-variance choice), no noise at t=1

with alpha_t = 1 - beta_t and abar_t the running product of alpha.
Timesteps are 1-indexed: t runs over [1, T], and abar(0) == 1 by
convention (the clean sample).

All functions are pure and dtype/shape polymorphic: they accept either
numpy arrays or torch tensors and return the same kind, since schedule
coefficients enter as python floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .seeding import make_rng


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance tables beta_t, alpha_t, abar_t for t in [1, T]."""

    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def beta_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        """abar_t, with abar_0 == 1 (clean sample) by convention."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    def to_json(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start,
                "beta_end": self.beta_end, "kind": "linear"}

    @staticmethod
    def from_json(doc: dict) -> "NoiseSchedule":
        if doc.get("kind") != "linear":
            raise ValueError(f"unsupported schedule kind {doc.get('kind')!r}")
        return build_schedule(int(doc["T"]), float(doc["beta_start"]),
                              float(doc["beta_end"]))


@dataclass(frozen=True)
class NoiseDraw:
    """A reproducible standard-normal field, tagged with its seed."""

    data: np.ndarray
    seed: int

    @staticmethod
    def from_seed(seed: int, shape: tuple[int, ...]) -> "NoiseDraw":
        rng = make_rng(seed, "noise-draw")
        return NoiseDraw(rng.standard_normal(shape).astype(np.float32), seed)


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule over T steps.

    Requires 0 < beta_start <= beta_end < 1. With T == 1 the single beta
    is beta_start.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta_start=float(beta_start),
                         beta_end=float(beta_end), beta=beta, alpha=alpha,
                         alpha_bar=alpha_bar)


def _check_shapes(name_a: str, a, name_b: str, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(
            f"shape mismatch: {name_a} {tuple(a.shape)} vs {name_b} {tuple(b.shape)}")


def forward_diffuse(x0, t: int, noise, sched: NoiseSchedule):
    """Jump the clean sample straight to step t of the noising process."""
    _check_shapes("x0", x0, "noise", noise)
    abar = sched.alpha_bar_at(t)
    if t < 1:
        raise ValueError(f"forward_diffuse needs t >= 1, got {t}")
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * noise


def predict_x0(xt, eps_pred, t: int, sched: NoiseSchedule):
    """Invert the forward jump given a noise estimate."""
    _check_shapes("xt", xt, "eps_pred", eps_pred)
    abar = sched.alpha_bar_at(t)
    assert abar > 0.0, "alpha_bar must stay positive under schedule invariants"
    return (xt - math.sqrt(1.0 - abar) * eps_pred) / math.sqrt(abar)


def reverse_step(xt, eps_pred, t: int, sched: NoiseSchedule, noise=None):
    """One ancestral reverse transition x_t -> x_{t-1}.

    The injected-noise term uses sigma_t = sqrt(beta_t) and is dropped at
    t == 1 regardless of the supplied draw.
    """
    _check_shapes("xt", xt, "eps_pred", eps_pred)
    beta = sched.beta_at(t)
    alpha = sched.alpha_at(t)
    abar = sched.alpha_bar_at(t)
    mean = (xt - beta / math.sqrt(1.0 - abar) * eps_pred) / math.sqrt(alpha)
    if t == 1 or noise is None:
        return mean
    _check_shapes("xt", xt, "noise", noise)
    return mean + math.sqrt(beta) * noise


def ddim_step(xt, eps_pred, t: int, t_prev: int, sched: NoiseSchedule):
    """Deterministic update to the previous step of a strided plan.

    x_{t_prev} = sqrt(abar_prev) * x0_hat + sqrt(1 - abar_prev) * eps_pred.
    At t_prev == 0 this returns x0_hat itself.
    """
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got ({t_prev}, {t})")
    x0_hat = predict_x0(xt, eps_pred, t, sched)
    abar_prev = sched.alpha_bar_at(t_prev)
    return math.sqrt(abar_prev) * x0_hat + math.sqrt(1.0 - abar_prev) * eps_pred


def ddpm_training_loss(eps_true, eps_pred):
    """Mean squared error between true and predicted noise."""
    _check_shapes("eps_true", eps_true, "eps_pred", eps_pred)
    diff = eps_true - eps_pred
    return (diff * diff).mean()


def timestep_plan(T: int, sampler: str, ddim_steps: int | None = None) -> list[tuple[int, int]]:
    """(t, t_prev) pairs for a reverse pass, ending at t_prev == 0.

    ``ddpm`` visits every step. ``ddim`` uses an evenly strided
    subsequence, which requires ddim_steps to divide T.
    """
    if sampler == "ddpm":
        return [(t, t - 1) for t in range(T, 0, -1)]
    if sampler == "ddim":
        if not ddim_steps or ddim_steps < 1:
            raise ValueError("ddim sampler needs a positive step count")
        if ddim_steps > T or T % ddim_steps != 0:
            raise ValueError(
                f"ddim_steps={ddim_steps} must evenly divide T={T}")
        stride = T // ddim_steps
        ts = list(range(T, 0, -stride))
        return [(t, t - stride) for t in ts]
    raise ValueError(f"unknown sampler {sampler!r}")
