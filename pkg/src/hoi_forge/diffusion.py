"""Denoising diffusion with an x0-predicting denoiser.

A denoiser is any callable ``f(x_t, t, cond) -> x0_hat`` where ``t`` is an int
array of 1-based step indices, one per batch row, and ``cond`` is whatever the
model understands (``None`` means the null / unconditional condition).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autograd as ag
from .autograd import ContractViolation


class ConfigError(ValueError):
    pass


class SamplingDiverged(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite diffusion state at step {step}")
        self.step = step


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray   # index 0 is step t=1

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def abar(self, t) -> np.ndarray:
        """ᾱ at 1-based step(s) t, with ᾱ_0 = 1."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bar[np.maximum(t, 1) - 1])


def make_schedule(T: int, kind: str = "cosine", beta_start: float = 1e-4,
                  beta_end: float = 0.02, s: float = 0.008) -> DiffusionSchedule:
    if int(T) != T or T < 2:
        raise ConfigError(f"diffusion needs at least 2 steps, got {T}")
    T = int(T)
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T)
    elif kind == "cosine":
        f = lambda t: np.cos((t / T + s) / (1 + s) * np.pi / 2) ** 2
        ab = f(np.arange(T + 1)) / f(0)
        beta = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, 0.999)
    else:
        raise ConfigError(f"unknown schedule kind '{kind}'")
    return DiffusionSchedule(beta)


def _check_t(t, sched: DiffusionSchedule) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ContractViolation(f"step index out of range [1, {sched.T}]")
    return t


def q_sample(x0, t, noise, sched: DiffusionSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    t = _check_t(t, sched)
    ab = sched.abar(t)
    ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(noise, dtype=np.float64)


def posterior_mean(x0_hat, x_t, t: int, sched: DiffusionSchedule):
    """Mean of q(x_{t-1} | x_t, x0_hat). Works on arrays or Tensors."""
    ab_t, ab_prev = float(sched.abar(t)), float(sched.abar(t - 1))
    b = float(sched.beta[t - 1])
    a = 1.0 - b
    c0 = np.sqrt(ab_prev) * b / (1.0 - ab_t)
    ct = np.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab_t)
    return x0_hat * c0 + x_t * ct


def reverse_std(t: int, sched: DiffusionSchedule, posterior_variance: bool = False) -> float:
    b = float(sched.beta[t - 1])
    if posterior_variance:
        return float(np.sqrt(b * (1.0 - sched.abar(t - 1)) / (1.0 - sched.abar(t))))
    return float(np.sqrt(b))  # 1 - alpha_t


def cfg_mix(cond_pred, uncond_pred, scale: float):
    return (1.0 + scale) * cond_pred - scale * uncond_pred


def training_loss(denoiser: Callable, x0, cond, sched: DiffusionSchedule, rng: np.random.Generator,
                  p_uncond: float = 0.1, weight=None, drop_condition: Callable | None = None):
    """x0-MSE at uniformly drawn steps; conditions are dropped per row with ``p_uncond``.

    ``drop_condition(cond, mask)`` returns the condition with rows in ``mask``
    replaced by the null condition; without it the whole batch is dropped at once.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    b = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=b)
    noise = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, t, noise, sched)
    drop = rng.random(b) < p_uncond
    if drop_condition is not None:
        c = drop_condition(cond, drop)
    else:
        c = None if drop.all() else cond
    pred = denoiser(x_t, t, c)
    diff = ag.as_tensor(pred) - x0
    sq = diff * diff
    if weight is not None:
        sq = sq * np.asarray(weight, dtype=np.float64)
    return ag.mean(sq)


GuidanceHook = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


def sample(denoiser: Callable, cond, sched: DiffusionSchedule, shape, rng: np.random.Generator,
           cfg_scale: float = 2.5, guidance: Optional[GuidanceHook] = None,
           posterior_variance: bool = False, x_T: np.ndarray | None = None):
    """Ancestral sampling from t=T to 1; returns the clean state.

    ``guidance(mu, t, x0_hat)`` may adjust the mean at each step.
    """
    x = rng.standard_normal(shape) if x_T is None else np.array(x_T, dtype=np.float64)
    b = shape[0]
    for t in range(sched.T, 0, -1):
        tt = np.full(b, t)
        with ag.no_grad():
            c = _as_array(denoiser(x, tt, cond))
            if cfg_scale != 0.0:
                u = _as_array(denoiser(x, tt, None))
                x0_hat = cfg_mix(c, u, cfg_scale)
            else:
                x0_hat = c
        mu = posterior_mean(x0_hat, x, t, sched)
        if guidance is not None:
            mu = guidance(mu, t, x0_hat)
        noise = rng.standard_normal(shape)
        if t > 1:
            x = mu + reverse_std(t, sched, posterior_variance) * noise
        else:
            x = mu
        if not np.all(np.isfinite(x)):
            raise SamplingDiverged(t)
    return x


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, ag.Tensor) else np.asarray(x, dtype=np.float64)
