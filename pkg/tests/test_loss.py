import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_concat_config
from semdiff import autodiff as ad
from semdiff import loss as L
from semdiff.autodiff import Tensor
from semdiff.errors import ParameterError, ShapeError
from semdiff.schedule import linear_schedule, q_sample
from semdiff.unet import ConditioningBundle, DenoiserOutput, Variant, build_denoiser

RNG = np.random.default_rng(21)


# ---------------------------------------------------------------------------
def test_l2_cases():
    e = np.ones((2, 3))
    assert L.l2_eps_loss(e, e).item() == 0.0
    assert L.l2_eps_loss(e, np.zeros_like(e)).item() == pytest.approx(1.0)
    assert L.l2_eps_loss(np.array([1.0, 2.0]), np.zeros(2)).item() == pytest.approx(2.5)
    with pytest.raises(ShapeError):
        L.l2_eps_loss(np.zeros(3), np.zeros(4))


def _kl_by_quadrature(mu1, var1, mu2, var2):
    # numerical integration of the KL integrand over a wide grid
    s1 = math.sqrt(var1)
    xs = np.linspace(mu1 - 12 * s1, mu1 + 12 * s1, 200_001)
    p = np.exp(-((xs - mu1) ** 2) / (2 * var1)) / math.sqrt(2 * math.pi * var1)
    q = np.exp(-((xs - mu2) ** 2) / (2 * var2)) / math.sqrt(2 * math.pi * var2)
    integrand = p * (np.log(p) - np.log(q))
    return float(np.trapezoid(integrand, xs))


def test_gaussian_kl_identical_zero():
    mu = RNG.normal(size=(3, 3))
    var = np.abs(RNG.normal(size=(3, 3))) + 0.5
    out = L.gaussian_kl(mu, var, mu.copy(), var.copy())
    assert np.abs(out.data).max() == 0.0


def test_gaussian_kl_against_quadrature():
    cases = [(0.0, 1.0, 1.0, 1.0, 0.5),
             (0.0, 2.0, 0.0, 1.0, 0.5 * (math.log(0.5) + 2.0 - 1.0))]
    for mu1, v1, mu2, v2, closed in cases:
        got = float(L.gaussian_kl(np.array(mu1), np.array(v1),
                                  np.array(mu2), np.array(v2)).data)
        assert got == pytest.approx(closed, abs=1e-12)
        assert got == pytest.approx(_kl_by_quadrature(mu1, v1, mu2, v2), abs=1e-7)
    assert cases[1][4] == pytest.approx(0.1534264097, abs=1e-9)


def test_gaussian_kl_rejects_nonpositive_variance():
    with pytest.raises(ParameterError):
        L.gaussian_kl(np.zeros(2), np.array([1.0, -1.0]), np.zeros(2), np.ones(2))
    with pytest.raises(ParameterError):
        L.gaussian_kl(np.zeros(2), np.ones(2), np.zeros(2), np.array([0.0, 1.0]))


# ---------------------------------------------------------------------------
def _perfect_setup(t_vals, schedule=None):
    sch = schedule or linear_schedule(100, 1e-3, 0.05)
    rng = np.random.default_rng(9)
    x0 = rng.uniform(-0.9, 0.9, (len(t_vals), 1, 6, 6)).astype(np.float64)
    eps = rng.standard_normal(x0.shape)
    t = np.asarray(t_vals)
    x_t = q_sample(sch, x0, t, eps)
    return sch, x0, eps, t, x_t


def test_vlb_zero_for_perfect_prediction():
    sch, x0, eps, t, x_t = _perfect_setup([5, 50, 100])
    out = DenoiserOutput(eps_hat=Tensor(eps), v=Tensor(np.full_like(x0, -1.0)))
    val = L.vlb_term(sch, x0, x_t, t, out).item()
    assert val >= 0.0
    assert val < 1e-6


def test_vlb_mean_mismatch_matches_kl_map():
    # equal variances (v=-1 pins the posterior variance); shift the mean by
    # perturbing eps_hat and compare against the closed-form KL map
    sch, x0, eps, t, x_t = _perfect_setup([7, 60])
    delta = 0.3
    eps_hat = eps + delta
    out = DenoiserOutput(eps_hat=Tensor(eps_hat), v=Tensor(np.full_like(x0, -1.0)))
    got = L.vlb_term(sch, x0, x_t, t, out).item()

    betas = sch.betas[t - 1].reshape(-1, 1, 1, 1)
    somab = sch.sqrt_one_minus_alpha_bars[t - 1].reshape(-1, 1, 1, 1)
    ra = sch.recip_sqrt_alphas[t - 1].reshape(-1, 1, 1, 1)
    post = sch.posterior_variances[t - 1].reshape(-1, 1, 1, 1)
    dmu = ra * betas / somab * delta  # mean shift induced by the eps shift
    expected = np.mean((dmu ** 2) / (2 * post) * np.ones_like(x0))
    assert got == pytest.approx(expected, rel=1e-9)


def test_vlb_t1_discretized_nll_oracle():
    # compare the t=1 branch against a direct CDF-difference evaluation
    sch, x0, eps, t, x_t = _perfect_setup([1, 1])
    v = np.full_like(x0, 0.25)
    out = DenoiserOutput(eps_hat=Tensor(eps), v=Tensor(v))
    got = L.vlb_term(sch, x0, x_t, t, out).item()

    # oracle: exact normal CDF via math.erf
    beta = sch.betas[0]
    post = sch.posterior_variances[0]
    frac = (0.25 + 1) / 2
    var = math.exp(frac * math.log(beta) + (1 - frac) * math.log(post))
    mean = (x_t - beta / sch.sqrt_one_minus_alpha_bars[0] * eps) / math.sqrt(sch.alphas[0])
    h = 1.0 / 255.0
    z_hi = (x0 - mean + h) / math.sqrt(var)
    z_lo = (x0 - mean - h) / math.sqrt(var)
    cdf = np.vectorize(lambda z: 0.5 * (1 + math.erf(z / math.sqrt(2))))
    prob = np.where(x0 < -1 + h, cdf(z_hi),
                    np.where(x0 > 1 - h, 1 - cdf(z_lo), cdf(z_hi) - cdf(z_lo)))
    expected = float(np.mean(-np.log(np.clip(prob, 1e-12, 1.0))))
    assert got == pytest.approx(expected, rel=1e-6)


def test_nll_near_bin_center_tight_variance():
    # x0 exactly at a bin center with tight variance: NLL ~ -log(bin mass)
    x = np.zeros((1, 1, 1, 1))
    mean = Tensor(np.zeros_like(x))
    sigma2 = 1e-6
    nll = L.discretized_gaussian_nll(Tensor(x), mean, Tensor(np.full_like(x, sigma2)))
    h = 1.0 / 255.0
    mass = math.erf(h / math.sqrt(2 * sigma2))
    assert nll.data.item() == pytest.approx(-math.log(mass), abs=1e-9)


# ---------------------------------------------------------------------------
def test_hybrid_lambda_zero_total_is_simple():
    sch, x0, eps, t, x_t = _perfect_setup([3, 40])
    out = DenoiserOutput(eps_hat=Tensor(eps * 0.9), v=Tensor(np.zeros_like(x0)))
    terms = L.hybrid_loss(sch, x0, t, eps, out, 0.0)
    assert terms.total.item() == terms.l_simple.item()


def test_hybrid_perfect_prediction_near_zero():
    sch, x0, eps, t, x_t = _perfect_setup([5, 50])
    out = DenoiserOutput(eps_hat=Tensor(eps), v=Tensor(np.full_like(x0, -1.0)))
    terms = L.hybrid_loss(sch, x0, t, eps, out, 1.0)
    assert terms.total.item() < 1e-6


def test_hybrid_linear_in_lambda():
    sch, x0, eps, t, x_t = _perfect_setup([9, 70])
    out = DenoiserOutput(eps_hat=Tensor(eps + 0.2), v=Tensor(np.full_like(x0, 0.3)))
    t0 = L.hybrid_loss(sch, x0, t, eps, out, 0.0).total.item()
    t1 = L.hybrid_loss(sch, x0, t, eps, out, 0.4).total.item()
    t2 = L.hybrid_loss(sch, x0, t, eps, out, 0.8).total.item()
    assert (t2 - t0) == pytest.approx(2 * (t1 - t0), abs=1e-9)


@given(shift=st.floats(-2, 2), vlog=st.floats(-1, 1), tval=st.integers(1, 100))
@settings(max_examples=30, deadline=None)
def test_hybrid_nonnegative_components(shift, vlog, tval):
    sch, x0, eps, t, x_t = _perfect_setup([tval])
    out = DenoiserOutput(eps_hat=Tensor(eps + shift), v=Tensor(np.full_like(x0, vlog)))
    terms = L.hybrid_loss(sch, x0, t, eps, out, 0.001)
    assert terms.l_simple.item() >= 0.0
    assert terms.l_vlb.item() >= 0.0
    assert terms.total.item() == pytest.approx(
        terms.l_simple.item() + 0.001 * terms.l_vlb.item(), abs=1e-9)


def test_gradient_gating():
    # eps_hat gradient must come only from the L2 pathway; v only from the bound
    sch, x0, eps, t, x_t = _perfect_setup([4, 80])
    for lam in (0.0, 0.5):
        eh = Tensor(eps + 0.1, requires_grad=True)
        vv = Tensor(np.full_like(x0, 0.2), requires_grad=True)
        out = DenoiserOutput(eps_hat=eh, v=vv)
        L.hybrid_loss(sch, x0, t, eps, out, lam).total.backward()
        if lam == 0.0:
            g_eh_base = eh.grad.copy()
            assert vv.grad is None or not np.any(vv.grad)
        else:
            assert np.allclose(eh.grad, g_eh_base, atol=1e-12)
            assert np.any(vv.grad)


def test_full_gradcheck_small_network():
    # quick version of the acceptance gradient check (5 directions)
    cfg = tiny_concat_config()
    net = build_denoiser(cfg, seed=1, dtype=np.float64)
    params = dict(net.named_parameters())
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-0.9, 0.9, (2, 1, 8, 8))
    labels = rng.integers(0, 2, (2, 8, 8))
    onehot = np.zeros((2, 2, 8, 8))
    for c in range(2):
        onehot[:, c][labels == c] = 1.0
    cond = ConditioningBundle(mask_onehot=onehot, variant=Variant.CONCAT)
    sch = linear_schedule(10, 1e-2, 0.1)
    eps = rng.standard_normal(x0.shape)
    t = np.array([1, 7])
    lam = 0.01
    x_t = q_sample(sch, x0, t, eps)

    out = net(x_t, t, cond)
    terms = L.hybrid_loss(sch, x0, t, eps, out, lam)
    for _, p in params.items():
        p.grad = None
    terms.total.backward()
    grads = {k: p.grad.copy() for k, p in params.items()}
    eps_hat0 = out.eps_hat.data.copy()

    def f():
        oo = net(x_t, t, cond)
        l_simple = L.l2_eps_loss(eps, oo.eps_hat)
        pinned = DenoiserOutput(eps_hat=Tensor(eps_hat0), v=oo.v)
        return l_simple.item() + lam * L.vlb_term(sch, x0, x_t, t, pinned).item()

    h = 1e-6
    rs = np.random.default_rng(77)
    for _ in range(5):
        ds = {k: rs.normal(size=p.data.shape) for k, p in params.items()}
        orig = {k: p.data.copy() for k, p in params.items()}
        for k, p in params.items():
            p.data = orig[k] + h * ds[k]
        lp = f()
        for k, p in params.items():
            p.data = orig[k] - h * ds[k]
        lm = f()
        for k, p in params.items():
            p.data = orig[k]
        fd = (lp - lm) / (2 * h)
        an = sum(float(np.sum(grads[k] * ds[k])) for k in params)
        assert abs(fd - an) / max(abs(fd), abs(an)) < 1e-3
