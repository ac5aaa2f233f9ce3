"""Quick oracle checks grouped by module, run by ``stsl verify``."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .editing import EditConfig, edit_step, f_predict, null_optimize
from .metrics import psnr, sliced_wasserstein, ssim
from .operators import (
    dense_operator,
    downsample_operator,
    gaussian_blur_operator,
    identity_codec,
    make_task,
    random_mask_operator,
)
from .samplers import SamplerConfig, expected_raw_nfe, nfe_report, sample_prior, stsl_invert
from .schedule import build_schedule
from .scoremodels import (
    ConditionalScore,
    ConditionalShiftPrior,
    GaussianMixturePrior,
    GaussianPrior,
    MixtureScore,
    fd_hessian,
)
from .tweedie import (
    SurrogateTerms,
    curvature_constant,
    exact_log_likelihood,
    hutchinson_samples,
    lower_bound,
    posterior_cov,
    posterior_mean,
    surrogate_grad,
    surrogate_loss,
)


@dataclass
class Check:
    suite: str
    name: str
    measured: float
    tolerance: float
    passed: bool
    seconds: float = 0.0


def _rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def _random_gaussian(rng, d):
    L = rng.standard_normal((d, d)) / np.sqrt(d)
    return GaussianPrior(rng.standard_normal(d), L @ L.T + 0.2 * np.eye(d))


def _random_gmm(rng, d, C=3):
    w = rng.dirichlet(np.ones(C))
    return GaussianMixturePrior(w, rng.standard_normal((C, d)), [rng.uniform(0.2, 1.0, d) for _ in range(C)])


def check_schedule():
    s = build_schedule(50)
    yield "alpha_bar is the running product", _rel(s.alpha_bars[1:], np.cumprod(s.alphas[1:])), 1e-12
    yield "alpha_bar decreasing in (0, 1]", float(not (np.all(np.diff(s.alpha_bars) < 0) and s.alpha_bars[-1] > 0)), 0.0


def check_scoremodels():
    rng = np.random.default_rng(0)
    s = build_schedule(20)
    m = MixtureScore(_random_gmm(rng, 3), s)
    z = rng.standard_normal(3)
    yield "GMM Hessian vs finite differences", _rel(m.hessian(z, 7), fd_hessian(m, z, 7)), 1e-6
    h = 1e-5
    e = np.eye(3)
    fd = np.array([(m.log_marginal(z + h * e[i], 7) - m.log_marginal(z - h * e[i], 7)) / (2 * h) for i in range(3)])
    yield "GMM score vs finite-difference log density", _rel(m.score(z, 7), fd), 1e-6


def check_operators():
    rng = np.random.default_rng(1)
    worst = 0.0
    for op in (random_mask_operator(64, 0.4, rng), downsample_operator((8, 8), 4), gaussian_blur_operator((8, 8), 5, 1.0)):
        x, y = rng.standard_normal(op.input_dim), rng.standard_normal(op.output_dim)
        worst = max(worst, abs(op.apply(x) @ y - x @ op.adjoint(y)) / (abs(x @ op.adjoint(y)) + 1e-300))
    yield "adjoint dot-product identity", worst, 1e-12


def check_tweedie():
    rng = np.random.default_rng(2)
    s = build_schedule(50)
    worst_m = worst_c = 0.0
    for _ in range(20):
        p = _random_gaussian(rng, 3)
        k = int(rng.integers(1, 51))
        ab = s.abar(k)
        z = rng.standard_normal(3)
        m = MixtureScore(p, s)
        S = p.cov_matrix()
        G = ab * S + (1 - ab) * np.eye(3)
        K = np.sqrt(ab) * S @ np.linalg.inv(G)
        worst_m = max(worst_m, _rel(posterior_mean(m, z, k), p.mean + K @ (z - np.sqrt(ab) * p.mean)))
        worst_c = max(worst_c, _rel(posterior_cov(m, z, k), S - np.sqrt(ab) * K @ S))
    yield "posterior mean vs Gaussian conditioning", worst_m, 1e-10
    yield "posterior covariance vs Gaussian conditioning", worst_c, 1e-8

    p = _random_gaussian(rng, 3)
    m = MixtureScore(p, s)
    z = rng.standard_normal(3)
    vals = hutchinson_samples(m, z, 10, 10000, 1.0, rng)
    exact = float(np.trace(m.hessian(z, 10)))
    yield "Hutchinson mean within 3 standard errors", abs(vals.mean() - exact) / (vals.std(ddof=1) / 100), 3.0

    g = _random_gmm(rng, 2)
    m = MixtureScore(g, s)
    task = make_task(dense_operator(rng.standard_normal((1, 2))), rng.standard_normal(2), 0.3, rng)
    codec = identity_codec(2)
    terms = SurrogateTerms(1.0, 0.5)
    probes = rng.standard_normal((2, 2))
    z = rng.standard_normal(2)
    an = surrogate_grad(task, codec, m, z, 20, terms, probes)
    h = 1e-5
    fd = np.array([(surrogate_loss(task, codec, m, z + h * e, 20, terms, probes)
                    - surrogate_loss(task, codec, m, z - h * e, 20, terms, probes)) / (2 * h) for e in np.eye(2)])
    yield "surrogate gradient vs central differences", float(np.linalg.norm(an - fd) / np.linalg.norm(fd)), 1e-4

    viol = 0
    gp = GaussianPrior(np.zeros(2), np.eye(2))
    m = MixtureScore(gp, s)
    task = make_task(dense_operator([[1.0, 0.5]]), np.zeros(2), 0.5, rng)
    states = [(rng.standard_normal(2), int(k)) for k in (2, 3, 5)]
    mc = curvature_constant(task, m, states, rng=rng)
    for z, k in states:
        try:
            lb = lower_bound(task, m, z, k, mc)
        except ValueError:
            continue
        viol += lb > exact_log_likelihood(task, m, z, k) + 1e-9
    yield "lower bound above exact log-likelihood (violations)", float(viol), 0.0


def check_samplers():
    s = build_schedule(50)
    cfg = SamplerConfig()
    m = MixtureScore(GaussianPrior(np.zeros(2), np.eye(2)), s)
    rng = np.random.default_rng(3)
    task = make_task(dense_operator([[1.0, 0.5]]), np.zeros(2), 0.05, rng)
    r = stsl_invert(task, m, identity_codec(2), s, cfg)
    counts = nfe_report(r)
    yield "guidance-convention NFE minus 250", float(abs(counts["guidance_convention"] - 250)), 0.0
    yield "raw NFE minus closed form", float(abs(counts["total"] - expected_raw_nfe(cfg))), 0.0
    X = sample_prior(m, identity_codec(2), s, rng=np.random.default_rng(4), n=10000)
    yield "prior samples: max |cov - I| in standard errors", float(np.max(np.abs(np.cov(X.T) - np.eye(2)) / np.sqrt(2 / 10000))), 4.0


def check_editing():
    s = build_schedule(50)
    rng = np.random.default_rng(5)
    cond = ConditionalScore(ConditionalShiftPrior(_random_gmm(rng, 2), np.eye(2)), s)
    z = rng.standard_normal(2)
    traj = [z]
    phi = np.array([0.3, -0.2])
    for t in range(50):
        traj.append(f_predict(cond, traj[-1], 50 - t, phi))
    fit = null_optimize(traj, cond, s, EditConfig(target=np.zeros(2)))
    ratio = np.mean([h[-1] / h[0] for h in fit.residuals if h[0] > 0])
    yield "planted null fit: mean residual ratio", float(ratio), 0.1
    terms = SurrogateTerms(0.0, 0.0)
    task = make_task(dense_operator(np.eye(2)), z, 0.1, rng)
    out = edit_step(z, task, cond.bind(np.zeros(2)), s, 10, terms, rng, identity_codec(2))
    yield "edit step with zero weights is identity", float(not np.array_equal(out, z)), 0.0


def check_metrics():
    rng = np.random.default_rng(6)
    x = rng.random((16, 16))
    yield "psnr at MSE 0.01 minus 20 dB", abs(psnr(x, x + 0.1) - 20.0), 1e-9
    yield "1 - ssim(x, x)", 1.0 - ssim(x, x), 0.0
    a = rng.standard_normal((10000, 1))
    b = rng.standard_normal((10000, 1)) + 10.0
    yield "sliced W1 relative error on a shift of 10", abs(sliced_wasserstein(a, b, 8, rng) - 10.0) / 10.0, 0.05


SUITES = {
    "schedule": check_schedule,
    "scoremodels": check_scoremodels,
    "operators": check_operators,
    "tweedie": check_tweedie,
    "samplers": check_samplers,
    "editing": check_editing,
    "metrics": check_metrics,
}


def run_suites(names=None) -> list[Check]:
    out = []
    for suite in names or SUITES:
        t0 = time.perf_counter()
        for name, measured, tol in SUITES[suite]():
            out.append(Check(suite, name, float(measured), tol, bool(measured <= tol)))
        dt = time.perf_counter() - t0
        for c in out:
            if c.suite == suite:
                c.seconds = dt
    return out


def format_table(checks) -> str:
    w = max(len(c.name) for c in checks)
    lines = [f"{'suite':<12} {'check':<{w}} {'measured':>12} {'tolerance':>10}  result"]
    for c in checks:
        lines.append(f"{c.suite:<12} {c.name:<{w}} {c.measured:>12.3e} {c.tolerance:>10.1e}  {'PASS' if c.passed else 'FAIL'}")
    return "\n".join(lines)
