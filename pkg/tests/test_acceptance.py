"""Acceptance criteria 1-11, one test (or pair) each, each printing a PASS/FAIL line."""

import time
from pathlib import Path

import numpy as np
import pytest

from conftest import random_gmm
from stsl import cli
from stsl.editing import EditConfig, edit_pipeline, f_predict, null_optimize
from stsl.experiment import cmd_bias_study, load_config
from stsl.experiment import invert_one
from stsl.operators import dense_operator, identity_codec, identity_operator, make_task
from stsl.samplers import SamplerConfig, combine_step, expected_raw_nfe, forward_encode, nfe_report, sample_prior
from stsl.schedule import build_schedule, forward_noising
from stsl.scoremodels import ConditionalScore, ConditionalShiftPrior, GaussianMixturePrior, GaussianPrior, MixtureScore
from stsl.experiment import gaussian_moment_check
from stsl.tweedie import (
    SurrogateTerms,
    curvature_constant,
    exact_log_likelihood,
    hutchinson_samples,
    jensen_gap,
    lower_bound,
    posterior_cov,
    posterior_mean,
    surrogate_grad,
)
from test_samplers import ROUND_TRIP_REL_ERROR, round_trip_setup

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SCALES = np.array([1.0, 0.5, 0.25, 0.125])


def rel(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def gaussian_conditioning(prior, z, ab):
    S = prior.cov_matrix()
    d = len(z)
    gain = np.sqrt(ab) * S @ np.linalg.inv(ab * S + (1 - ab) * np.eye(d))
    return prior.mean + gain @ (z - np.sqrt(ab) * prior.mean), S - np.sqrt(ab) * gain @ S


def random_linear_gaussian(rng, schedule):
    d = int(rng.integers(1, 4))
    L = rng.standard_normal((d, d))
    prior = GaussianPrior(rng.standard_normal(d), 0.3 * L @ L.T + 0.1 * np.eye(d))
    model = MixtureScore(prior, schedule)
    op = dense_operator(rng.standard_normal((int(rng.integers(1, d + 1)), d)))
    x0 = prior.sample(1, rng)[0]
    return prior, model, op, x0


def quadrature_probe_mean(model, z, k, scale, nodes):
    """Exact probe expectation of the single-probe estimator on a 2-D tensor Gauss-Hermite grid."""
    eps, w = scale * nodes[0], nodes[1]
    vals = np.sum(eps * (model.score(z + eps, k) - model.score(z, k)), axis=1) / scale**2
    return float(w @ vals)


def hermite_grid(n=120):
    x, w = np.polynomial.hermite_e.hermegauss(n)
    w = w / w.sum()
    X, Y = np.meshgrid(x, x)
    return np.stack([X.ravel(), Y.ravel()], 1), np.outer(w, w).ravel()


def marginal_states(prior, schedule, rng, n, k_range=(10, 46)):
    out = []
    for _ in range(n):
        k = int(rng.integers(*k_range))
        out.append((forward_noising(schedule, prior.sample(1, rng)[0], k, rng), k))
    return out


class TestCriterion01PosteriorMoments:
    def test_gaussian_conditioning(self, schedule, verdict):
        rng = np.random.default_rng(101)
        t0 = time.perf_counter()
        worst_m = worst_c = 0.0
        for _ in range(100):
            d = int(rng.integers(1, 6))
            L = rng.standard_normal((d, d)) / np.sqrt(d)
            prior = GaussianPrior(rng.standard_normal(d), L @ L.T + 0.1 * np.eye(d))
            k = int(rng.integers(1, 51))
            z = forward_noising(schedule, prior.sample(1, rng)[0], k, rng)
            m = MixtureScore(prior, schedule)
            mean, cov = gaussian_conditioning(prior, z, schedule.abar(k))
            worst_m = max(worst_m, rel(posterior_mean(m, z, k), mean))
            worst_c = max(worst_c, rel(posterior_cov(m, z, k), cov))
        dt = time.perf_counter() - t0
        ok = worst_m <= 1e-10 and worst_c <= 1e-8 and dt < 5
        verdict(1, ok, f"max rel err mean {worst_m:.2e} (tol 1e-10), cov {worst_c:.2e} (tol 1e-8), {dt:.2f}s")
        assert ok


class TestCriterion02Hutchinson:
    def test_gaussian_unbiased(self, schedule, verdict):
        rng = np.random.default_rng(202)
        t0 = time.perf_counter()
        p = GaussianPrior(rng.standard_normal(3), np.diag([0.3, 1.0, 2.0]) + 0.1)
        m = MixtureScore(p, schedule)
        worst = 0.0
        for k in (5, 15, 25, 35, 45):
            z = forward_noising(schedule, p.mean, k, rng)
            vals = hutchinson_samples(m, z, k, 10_000, 1.0, rng)
            exact = np.trace(m.hessian(z, k))
            worst = max(worst, abs(vals.mean() - exact) / (vals.std(ddof=1) / 100))
        dt = time.perf_counter() - t0
        ok = worst <= 3 and dt < 30
        verdict("2a", ok, f"Gaussian priors: worst |mean - trace| = {worst:.2f} SE over 5 levels (tol 3), {dt:.2f}s")
        assert ok

    def _gmm_bias(self, gmm2, schedule, scales):
        grid = hermite_grid()
        states = marginal_states(gmm2.prior, schedule, np.random.default_rng(0), 20)
        bias = np.array([[abs(quadrature_probe_mean(gmm2, z, k, s, grid) - gmm2.trace_hessian(z, k))
                          / abs(gmm2.trace_hessian(z, k)) for s in scales] for z, k in states])
        # geometric mean over states keeps one near-zero trace from dominating
        agg = np.exp(np.log(bias).mean(axis=0))
        return agg, np.polyfit(np.log(scales), np.log(agg), 1)[0]

    def test_gmm_bias_slope(self, gmm2, schedule, verdict):
        t0 = time.perf_counter()
        agg, slope = self._gmm_bias(gmm2, schedule, SCALES)
        dt = time.perf_counter() - t0
        ok = abs(slope - 1.0) <= 0.3 and dt < 30
        verdict("2b", ok, f"GMM d=2 log-bias vs log-scale slope {slope:.3f} (target 1 +/- 0.3), "
                          f"rel bias {np.array2string(agg, precision=2)}, {dt:.2f}s")
        assert ok

    def test_gmm_bias_is_second_order(self, gmm2, schedule, verdict):
        agg, slope = self._gmm_bias(gmm2, schedule, SCALES / 8)
        ok = abs(slope - 2.0) <= 0.3
        verdict("2c", ok, f"GMM d=2 asymptotic slope {slope:.3f} over scales 1/8..1/64 (odd moments cancel; expect 2)")
        assert ok


class TestCriterion03LowerBound:
    def test_no_violations(self, schedule, verdict):
        rng = np.random.default_rng(1)
        t0 = time.perf_counter()
        valid = skipped = violations = 0
        worst = -np.inf
        while valid < 100:
            prior, model, op, x0 = random_linear_gaussian(rng, schedule)
            k = int(rng.integers(1, 51))
            z = forward_noising(schedule, x0, k, rng)
            task = make_task(op, x0, rng.uniform(0.05, 1.0), rng)
            m = curvature_constant(task, model, [(z, k)], rng=rng)
            try:
                lb = lower_bound(task, model, z, k, m)
            except ValueError:
                skipped += 1
                continue
            valid += 1
            gap = lb - exact_log_likelihood(task, model, z, k)
            worst = max(worst, gap)
            violations += gap > 1e-9
        dt = time.perf_counter() - t0
        ok = violations == 0 and dt < 10
        verdict(3, ok, f"{violations} violations in 100 valid states ({skipped} states with no valid m skipped), "
                       f"max(bound - exact) {worst:.2e}, {dt:.2f}s")
        assert ok


class TestCriterion04JensenGap:
    def _configs(self, schedule):
        rng = np.random.default_rng(404)
        for sigma in np.linspace(0.05, 1.0, 100):
            prior, model, op, x0 = random_linear_gaussian(rng, schedule)
            k = int(rng.integers(1, 51))
            z = forward_noising(schedule, x0, k, rng)
            yield sigma, jensen_gap(make_task(op, x0, sigma, rng), model, z, k, rng, n_mc=20_000)

    def test_stated_bound(self, schedule, verdict):
        t0 = time.perf_counter()
        results = list(self._configs(schedule))
        dt = time.perf_counter() - t0
        bad = [s for s, j in results if j.gap > j.bound]
        ok = not bad and dt < 10
        detail = f"{len(bad)} violations in 100 configs, {dt:.2f}s"
        if bad:
            detail += f"; violating sigma_y in [{min(bad):.2f}, {max(bad):.2f}]"
        verdict(4, ok, detail)
        assert ok

    def test_lipschitz_bound(self, schedule, verdict):
        results = list(self._configs(schedule))
        bad = sum(j.gap > j.lipschitz_bound + 4 * j.lipschitz_bound * j.m1_stderr / j.m1 for _, j in results)
        ratio = max(j.gap / j.lipschitz_bound for _, j in results if j.lipschitz_bound > 0)
        verdict("4b", bad == 0, f"Lipschitz form: {bad} violations in 100 configs, max gap/bound {ratio:.3f}")
        assert bad == 0


class TestCriterion05GradientFidelity:
    def test_full_jacobian_vs_fd(self, schedule, verdict):
        rng = np.random.default_rng(505)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(20):
            d = int(rng.integers(2, 4))
            model = MixtureScore(random_gmm(rng, d, diag=bool(rng.integers(2))), schedule)
            k = int(rng.integers(1, 51))
            z = forward_noising(schedule, model.prior.sample(1, rng)[0], k, rng)
            task = make_task(dense_operator(rng.standard_normal((int(rng.integers(1, d + 1)), d))),
                             rng.standard_normal(d), 0.1, rng)
            terms = SurrogateTerms(1.0, float(rng.uniform(0.01, 1.0)))
            probes = rng.standard_normal((2, d))
            an = surrogate_grad(task, identity_codec(d), model, z, k, terms, probes)
            fd = surrogate_grad(task, identity_codec(d), model, z, k, terms, probes, mode="finite-difference")
            worst = max(worst, np.linalg.norm(an - fd) / np.linalg.norm(fd))
        dt = time.perf_counter() - t0
        ok = worst <= 1e-4 and dt < 10
        verdict(5, ok, f"max relative deviation {worst:.2e} over 20 GMM states (tol 1e-4), {dt:.2f}s")
        assert ok


class TestCriterion06NFE:
    def test_default_counts(self, monkeypatch, verdict):
        exp = load_config(CONFIGS / "default.ini")
        t0 = time.perf_counter()
        _, row, doc, _, _ = invert_one(exp, "inpaint", "stsl", 0)
        dt = time.perf_counter() - t0
        nfe = doc["nfe"]
        closed = expected_raw_nfe(exp.sampler)
        ok = nfe["guidance_convention"] == 250 and nfe["total"] == nfe["raw_instrumented"] == closed and dt < 1
        verdict(6, ok, f"guidance {nfe['guidance_convention']} (expect 250), raw {nfe['raw_instrumented']} "
                       f"vs closed form {closed}, {dt:.2f}s")
        assert ok


@pytest.mark.slow
class TestCriterion07BiasOrdering:
    def test_paired_ordering(self, tmp_path, verdict):
        exp = load_config(CONFIGS / "bias_study.ini")
        import dataclasses

        exp = dataclasses.replace(exp, outdir=str(tmp_path / "bias"))
        assert len(exp.seeds) >= 50 and set(exp.tasks) == {"inpaint", "blur", "downsample", "saltpepper"}
        t0 = time.perf_counter()
        rows, summary = cmd_bias_study(exp)
        dt = time.perf_counter() - t0
        means = {}
        for r in rows:
            means.setdefault((r["task"], r["variant"]), []).append(r["mse"])
        means = {k: float(np.mean(v)) for k, v in means.items()}
        ordered = all(means[(t, "stsl")] < means[(t, "stsl-biased")] < means[(t, "first-order")] for t in exp.tasks)
        cis = all(s["excludes_zero"] and s["mean_diff"] > 0 for s in summary) and len(summary) == 8
        ok = ordered and cis and dt < 600
        parts = [f"{t}: {means[(t, 'stsl')]:.2e} < {means[(t, 'stsl-biased')]:.2e} < {means[(t, 'first-order')]:.2e}"
                 for t in exp.tasks]
        worst_lo = min(s["ci_low"] for s in summary)
        verdict(7, ok, f"{len(exp.seeds)} seeds; " + "; ".join(parts)
                + f"; min CI lower end {worst_lo:.2e}; {dt:.0f}s")
        assert ok


class TestCriterion08RoundTrip:
    def test_frozen_bound(self, schedule, verdict):
        t0 = time.perf_counter()
        p, x0 = round_trip_setup()
        m = MixtureScore(p, schedule)
        z = forward_encode(m, identity_codec(4), schedule, start=x0)[-1]
        for k in range(schedule.T, 0, -1):
            z = combine_step(schedule, z, posterior_mean(m, z, k), k)
        err = float(np.linalg.norm(z - x0) / np.linalg.norm(x0))
        dt = time.perf_counter() - t0
        ok = err <= ROUND_TRIP_REL_ERROR * (1 + 1e-9) and dt < 5
        verdict(8, ok, f"relative round-trip error {err:.6f} (frozen bound {ROUND_TRIP_REL_ERROR:.6f}), {dt:.2f}s")
        assert ok


class TestCriterion09Sampling:
    def test_moments(self, schedule, verdict):
        mean, cov = np.zeros(2), np.eye(2)
        t0 = time.perf_counter()
        m = MixtureScore(GaussianPrior(mean, cov), schedule)
        X = sample_prior(m, identity_codec(2), schedule, rng=np.random.default_rng(9), n=10_000)
        chk = gaussian_moment_check(X, mean, cov, n_se=4)
        dt = time.perf_counter() - t0
        ok = chk["passed"] and dt < 30
        verdict(9, ok, f"mean within {chk['max_mean_se']:.2f} SE, covariance within {chk['max_cov_se']:.2f} SE "
                       f"(tol 4) at n=10^4, {dt:.2f}s")
        assert ok


class TestCriterion10Editing:
    def test_editing_properties(self, schedule, verdict):
        t0 = time.perf_counter()
        base = GaussianMixturePrior([0.5, 0.5], [[-1.0, 0.0], [1.0, 0.0]], [0.05, 0.05])
        cond = ConditionalScore(ConditionalShiftPrior(base, np.eye(2)), schedule)
        phi = base.means[1] - base.means[0]
        flips = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            x0 = base.means[0] + np.sqrt(0.05) * rng.standard_normal(2)
            task = make_task(identity_operator(2), x0, 0.05, rng)
            r = edit_pipeline(task, cond, identity_codec(2), schedule, SamplerConfig(seed=seed), EditConfig(target=phi))
            d = np.linalg.norm(r.reconstruction - base.means, axis=1)
            flips += d[1] < d[0]

        rng = np.random.default_rng(1000)
        task = make_task(identity_operator(2), base.means[0], 0.05, rng)
        null = edit_pipeline(task, cond, identity_codec(2), schedule, SamplerConfig(seed=3),
                             EditConfig(target=np.zeros(2), lam=0.0, eta=0.0, nu=0.0))
        bitwise = np.array_equal(null.final_latent, null.stages["inversion"].final_latent)

        worst_total = 0.0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            model = ConditionalScore(ConditionalShiftPrior(random_gmm(rng, 2), rng.standard_normal((2, 2))), schedule)
            phis = 0.3 * rng.standard_normal((50, 2))
            traj = [rng.standard_normal(2)]
            for t in range(50):
                traj.append(f_predict(model, traj[-1], 50 - t, phis[t]))
            fit = null_optimize(traj, model, schedule, EditConfig(target=np.zeros(2)))
            total = sum(h[-1] for h in fit.residuals) / sum(h[0] for h in fit.residuals)
            worst_total = max(worst_total, total)
        dt = time.perf_counter() - t0
        ok = flips >= 40 and bitwise and worst_total <= 0.1 and dt < 120
        verdict(10, ok, f"flip rate {flips}/50 (need 40), null edit bitwise={bitwise}, "
                        f"null fit residual kept {worst_total:.2e} worst of 10 planted (need <= 0.1), {dt:.1f}s")
        assert ok


class TestCriterion11Determinism:
    def test_cli_artifacts_repeat(self, tmp_path, monkeypatch, verdict):
        monkeypatch.setenv("STSL_THREADS", "1")
        runs = [
            ["invert", "--config", str(CONFIGS / "default.ini"), "--seed", "0,1"],
            ["invert", "--config", str(CONFIGS / "default.ini"), "--seed", "2", "--variant", "first-order"],
            ["bias-study", "--config", str(CONFIGS / "bias_study.ini"), "--seed", "0,1", "--tasks", "blur"],
            ["edit", "--config", str(CONFIGS / "edit.ini"), "--seed", "0"],
            ["sample", "--config", str(CONFIGS / "sample_gaussian.ini")],
        ]
        trees = []
        for attempt in ("a", "b"):
            for i, argv in enumerate(runs):
                assert cli.main(argv + ["--outdir", str(tmp_path / attempt / str(i))]) == 0
            root = tmp_path / attempt
            trees.append({str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()})
        same = trees[0].keys() == trees[1].keys() and all(trees[0][k] == trees[1][k] for k in trees[0])
        differing = [k for k in trees[0] if trees[1].get(k) != trees[0][k]]
        verdict(11, same, f"{len(trees[0])} artifacts compared, {len(differing)} differ")
        assert same
