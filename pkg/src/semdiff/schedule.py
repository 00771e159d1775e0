"""Noise schedule and the closed-form forward/reverse process constants.

All arrays are float64 and precomputed once at construction; step indices are
1-based (t runs over 1..T). Operations are pure: given an explicit noise
tensor they are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step diffusion constants.

    betas[t-1] is the scheduled variance at step t; alpha_bars is the running
    product of (1 - beta); posterior_variances is the variance of the
    noising-process posterior q(x_{t-1} | x_t, x_0), pinned to betas[0] at
    t=1 so its log stays finite.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    posterior_variances: np.ndarray = field(init=False)
    sqrt_alpha_bars: np.ndarray = field(init=False)
    sqrt_one_minus_alpha_bars: np.ndarray = field(init=False)
    recip_sqrt_alphas: np.ndarray = field(init=False)
    posterior_mean_coef_x0: np.ndarray = field(init=False)
    posterior_mean_coef_xt: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.shape[0] != self.T:
            raise ParameterError(f"betas must be a length-{self.T} vector, got shape {betas.shape}")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ParameterError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", betas)

        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        # alpha_bar at t-1, with the t=0 convention alpha_bar_0 = 1
        alpha_bars_prev = np.concatenate(([1.0], alpha_bars[:-1]))
        posterior = betas * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars)
        posterior[0] = betas[0]

        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        object.__setattr__(self, "posterior_variances", posterior)
        object.__setattr__(self, "sqrt_alpha_bars", np.sqrt(alpha_bars))
        object.__setattr__(self, "sqrt_one_minus_alpha_bars", np.sqrt(1.0 - alpha_bars))
        object.__setattr__(self, "recip_sqrt_alphas", 1.0 / np.sqrt(alphas))
        object.__setattr__(
            self, "posterior_mean_coef_x0", betas * np.sqrt(alpha_bars_prev) / (1.0 - alpha_bars)
        )
        object.__setattr__(
            self,
            "posterior_mean_coef_xt",
            (1.0 - alpha_bars_prev) * np.sqrt(alphas) / (1.0 - alpha_bars),
        )
        for arr in (
            alphas, alpha_bars, posterior,
            self.sqrt_alpha_bars, self.sqrt_one_minus_alpha_bars, self.recip_sqrt_alphas,
            self.posterior_mean_coef_x0, self.posterior_mean_coef_xt,
        ):
            arr.setflags(write=False)
        betas.setflags(write=False)

    def check_t(self, t):
        """Validate 1-based step indices; returns them as an int64 array."""
        t_arr = np.asarray(t, dtype=np.int64)
        if t_arr.size == 0 or np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise ParameterError(f"step index t={t!r} outside 1..{self.T}")
        return t_arr

    def gather(self, constants: np.ndarray, t, ndim: int) -> np.ndarray:
        """Pick per-step constants and shape them to broadcast over an
        ndim-dimensional batch tensor (scalar t broadcasts as-is)."""
        t_arr = self.check_t(t)
        vals = constants[t_arr - 1]
        if vals.ndim == 0:
            return vals
        return vals.reshape(vals.shape + (1,) * (ndim - 1))


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Evenly spaced betas from beta_start to beta_end over T steps."""
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start:
        raise ParameterError(f"beta_start must be > 0, got {beta_start}")
    if beta_start > beta_end:
        raise ParameterError(f"beta_start={beta_start} must not exceed beta_end={beta_end}")
    if not beta_end < 1.0:
        raise ParameterError(f"beta_end must be < 1, got {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(T=T, betas=betas)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def q_sample(schedule: NoiseSchedule, x0, t, eps):
    """Closed-form noisy sample: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    _check_same_shape(x0, eps, "q_sample")
    a = schedule.gather(schedule.sqrt_alpha_bars, t, x0.ndim)
    b = schedule.gather(schedule.sqrt_one_minus_alpha_bars, t, x0.ndim)
    return a * x0 + b * eps


def forward_step(schedule: NoiseSchedule, x_prev, t, eps):
    """One Markov transition: sqrt(1 - beta_t) * x_prev + sqrt(beta_t) * eps."""
    x_prev = np.asarray(x_prev)
    eps = np.asarray(eps)
    _check_same_shape(x_prev, eps, "forward_step")
    beta = schedule.gather(schedule.betas, t, x_prev.ndim)
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * eps


def reverse_step_mean(schedule: NoiseSchedule, x_t, t, eps_hat):
    """Predicted posterior mean: (x_t - beta_t/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t)."""
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    _check_same_shape(x_t, eps_hat, "reverse_step_mean")
    beta = schedule.gather(schedule.betas, t, x_t.ndim)
    somab = schedule.gather(schedule.sqrt_one_minus_alpha_bars, t, x_t.ndim)
    ra = schedule.gather(schedule.recip_sqrt_alphas, t, x_t.ndim)
    return ra * (x_t - beta / somab * eps_hat)


def interpolate_variance(schedule: NoiseSchedule, t, v):
    """Log-space interpolation between the posterior variance (v=-1) and the
    scheduled variance (v=+1); v is clamped to [-1, 1] first."""
    v = np.asarray(v, dtype=np.float64)
    frac = (np.clip(v, -1.0, 1.0) + 1.0) / 2.0
    beta = schedule.gather(schedule.betas, t, max(v.ndim, 1))
    post = schedule.gather(schedule.posterior_variances, t, max(v.ndim, 1))
    # power form of exp(frac*log(beta) + (1-frac)*log(post)): exact at the endpoints
    return np.power(beta, frac) * np.power(post, 1.0 - frac)


def posterior_mean(schedule: NoiseSchedule, x0, x_t, t):
    """Mean of the noising-process posterior q(x_{t-1} | x_t, x_0)."""
    x0 = np.asarray(x0)
    x_t = np.asarray(x_t)
    _check_same_shape(x0, x_t, "posterior_mean")
    c0 = schedule.gather(schedule.posterior_mean_coef_x0, t, x0.ndim)
    ct = schedule.gather(schedule.posterior_mean_coef_xt, t, x0.ndim)
    return c0 * x0 + ct * x_t
