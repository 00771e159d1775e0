"""Hybrid training objective: L2 noise-prediction loss plus a per-step
variational-bound term that trains the interpolated variance.

The variational term freezes the predicted noise (gradient-stopped), so the
mean path is trained purely by the L2 term and only the variance logits v
receive gradient from the bound, following the hybrid-loss construction of
learned-variance diffusion models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf as _erf_np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ParameterError, ShapeError
from .schedule import NoiseSchedule, posterior_mean, q_sample
from .unet import DenoiserOutput


_TWO_OVER_SQRT_PI = float(2.0 / np.sqrt(np.pi))
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))


def erf(a) -> Tensor:
    """Elementwise error function with its analytic derivative."""
    a = as_tensor(a)
    out_data = _erf_np(a.data)

    def bwd(g):
        ad._accum(a, g * _TWO_OVER_SQRT_PI * np.exp(-a.data * a.data))

    return ad._make(out_data, (a,), bwd)


def _std_normal_cdf(z: Tensor) -> Tensor:
    return (erf(z * _INV_SQRT2) + 1.0) * 0.5


def l2_eps_loss(eps, eps_hat) -> Tensor:
    """Mean squared error between true and predicted noise (scalar Tensor)."""
    eps, eps_hat = as_tensor(eps), as_tensor(eps_hat)
    if eps.data.shape != eps_hat.data.shape:
        raise ShapeError(f"l2_eps_loss: shapes {eps.data.shape} and {eps_hat.data.shape} differ")
    return ad.mean(ad.square(eps - eps_hat))


def gaussian_kl(mu1, var1, mu2, var2) -> Tensor:
    """Elementwise KL( N(mu1,var1) || N(mu2,var2) ) in nats."""
    mu1, var1 = as_tensor(mu1), as_tensor(var1)
    mu2, var2 = as_tensor(mu2), as_tensor(var2)
    for v in (var1, var2):
        if np.any(v.data <= 0.0):
            raise ParameterError("gaussian_kl: variances must be positive")
    return (ad.log(var2 / var1) + (var1 + ad.square(mu1 - mu2)) / var2 - 1.0) * 0.5


def discretized_gaussian_nll(x, mean, var, bin_halfwidth: float = 1.0 / 255.0) -> Tensor:
    """Elementwise negative log-likelihood of 8-bit-quantized data on the
    [-1,1] scale under N(mean, var); edge bins extend to infinity."""
    x = as_tensor(x)
    mean, var = as_tensor(mean), as_tensor(var)
    inv_std = 1.0 / ad.sqrt(var)
    centered = x - mean
    cdf_hi = _std_normal_cdf((centered + bin_halfwidth) * inv_std)
    cdf_lo = _std_normal_cdf((centered - bin_halfwidth) * inv_std)
    low_tail = x.data < -1.0 + bin_halfwidth
    high_tail = x.data > 1.0 - bin_halfwidth
    prob = ad.where_const(low_tail, cdf_hi,
                          ad.where_const(high_tail, 1.0 - cdf_lo, cdf_hi - cdf_lo))
    return -ad.log(ad.clip(prob, 1e-12, 1.0))


def _gather_const(schedule: NoiseSchedule, arr: np.ndarray, t, ndim: int, dtype) -> np.ndarray:
    return np.asarray(schedule.gather(arr, t, ndim), dtype=dtype)


def vlb_term(schedule: NoiseSchedule, x0, x_t, t, out: DenoiserOutput) -> Tensor:
    """Per-step variational-bound term in nats, averaged over pixels and batch.

    For t > 1 this is KL between the closed-form noising posterior and the
    model's reverse kernel; for t = 1 it is the discretized decoder NLL of
    x0. The model mean uses a gradient-stopped eps_hat, so only the variance
    logits v train through this term.
    """
    x0 = np.asarray(x0)
    x_t = np.asarray(x_t)
    if x0.shape != x_t.shape:
        raise ShapeError(f"vlb_term: x0 {x0.shape} vs x_t {x_t.shape}")
    t_arr = schedule.check_t(t)
    dtype = x0.dtype

    eps_hat = out.eps_hat.detach() if isinstance(out.eps_hat, Tensor) else as_tensor(out.eps_hat)
    v = as_tensor(out.v)
    if eps_hat.data.shape != x0.shape or v.data.shape != x0.shape:
        raise ShapeError("vlb_term: denoiser output shape does not match x0")

    nd = x0.ndim
    beta = _gather_const(schedule, schedule.betas, t_arr, nd, dtype)
    somab = _gather_const(schedule, schedule.sqrt_one_minus_alpha_bars, t_arr, nd, dtype)
    ra = _gather_const(schedule, schedule.recip_sqrt_alphas, t_arr, nd, dtype)
    log_beta = _gather_const(schedule, np.log(schedule.betas), t_arr, nd, dtype)
    log_post = _gather_const(schedule, np.log(schedule.posterior_variances), t_arr, nd, dtype)
    post_var = _gather_const(schedule, schedule.posterior_variances, t_arr, nd, dtype)

    # model reverse kernel: frozen mean, learned-interpolation variance
    mean_p = ad.mul(Tensor(ra), as_tensor(x_t) - Tensor(beta / somab) * eps_hat)
    frac = (ad.clip(v, -1.0, 1.0) + 1.0) * 0.5
    var_p = ad.exp(frac * Tensor(log_beta) + (1.0 - frac) * Tensor(log_post))

    q_mean = posterior_mean(schedule, x0, x_t, t_arr).astype(dtype)
    kl = gaussian_kl(Tensor(q_mean), Tensor(post_var), mean_p, var_p)
    nll = discretized_gaussian_nll(Tensor(x0), mean_p, var_p)

    is_first = (t_arr == 1).astype(dtype).reshape((-1,) + (1,) * (nd - 1))
    per_pixel = ad.where_const(np.broadcast_to(is_first, x0.shape), nll, kl)
    per_sample = ad.mean_axes(per_pixel, tuple(range(1, nd)))
    return ad.mean(per_sample)


@dataclass
class LossTerms:
    l_simple: Tensor
    l_vlb: Tensor
    lambda_vlb: float
    total: Tensor

    def as_floats(self) -> tuple[float, float, float]:
        return self.l_simple.item(), self.l_vlb.item(), self.total.item()


def hybrid_loss(schedule: NoiseSchedule, x0, t, eps, out: DenoiserOutput,
                lambda_vlb: float = 0.001) -> LossTerms:
    """Combined objective: l_simple + lambda_vlb * l_vlb.

    x_t is recomputed from (x0, t, eps) in closed form, so the caller must
    pass the same noise used to produce the denoiser output.
    """
    if lambda_vlb < 0:
        raise ParameterError(f"lambda_vlb must be >= 0, got {lambda_vlb}")
    x0 = np.asarray(x0)
    eps_arr = np.asarray(eps)
    x_t = q_sample(schedule, x0, t, eps_arr).astype(x0.dtype)
    l_simple = l2_eps_loss(eps_arr, out.eps_hat)
    l_vlb = vlb_term(schedule, x0, x_t, t, out)
    total = l_simple + l_vlb * float(lambda_vlb)
    return LossTerms(l_simple=l_simple, l_vlb=l_vlb, lambda_vlb=float(lambda_vlb), total=total)
