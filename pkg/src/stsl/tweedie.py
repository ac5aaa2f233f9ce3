"""Tweedie posterior moments, Hutchinson trace estimation and the surrogate loss.

Conventions: ``z`` lives at noise index ``k``; ``Z̄`` (``posterior_mean``)
is the Tweedie estimate of the clean latent. The surrogate loss is

    lam * ||y - A decode(Z̄)||^2
      + (eta / d) * mean_j (1/s^2) eps_j^T (score(z + eps_j) - score(z))
      + w_nu * feature_loss(A decode(Z̄), y)

with probes ``eps_j ~ N(0, s^2 I)`` held fixed while differentiating, and
``w_nu = nu / d`` (or ``nu`` when ``nu_normalize`` is off).
"""

from __future__ import annotations

from dataclasses import dataclass
from math import lgamma

import numpy as np
from scipy.special import logsumexp

from .operators import LatentCodec, MeasurementTask, identity_codec
from .scoremodels import CapabilityError, MixtureScore, ScoreModel

GRAD_MODES = ("full-jacobian", "decoupled", "finite-difference")


@dataclass(frozen=True)
class SurrogateTerms:
    lam: float = 1.0
    eta: float = 0.02
    nu: float = 0.0
    eps_scale: float = 1.0
    nu_normalize: bool = True

    def __post_init__(self):
        for name in ("lam", "eta", "nu"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        if not self.eps_scale > 0:
            raise ValueError("eps_scale must be positive")

    def nu_weight(self, d: int) -> float:
        return self.nu / d if self.nu_normalize else self.nu


class SquaredFeatureLoss:
    """Squared distance between linear features of measurement-space vectors.

    With no feature map this is ``||pred - y||^2`` in operator space.
    """

    def __init__(self, feature_map=None):
        self.F = None if feature_map is None else np.atleast_2d(np.asarray(feature_map, dtype=np.float64))

    def _features(self, v):
        return v if self.F is None else self.F @ v

    def value(self, pred, y) -> float:
        r = self._features(pred) - self._features(y)
        return float(r @ r)

    def grad(self, pred, y) -> np.ndarray:
        r = self._features(pred) - self._features(y)
        g = 2.0 * r
        return g if self.F is None else self.F.T @ g


def _abar(model: ScoreModel, k: int, schedule=None) -> float:
    sched = schedule if schedule is not None else model.schedule
    return sched.abar(sched.check_index(k))


def tweedie_mean(z, s, abar: float):
    """Posterior mean from a precomputed score."""
    if abar == 1.0:
        return np.array(z, dtype=np.float64, copy=True)
    return (np.asarray(z) + (1.0 - abar) * s) / np.sqrt(abar)


def posterior_mean(model: ScoreModel, z, k: int, schedule=None):
    abar = _abar(model, k, schedule)
    if abar == 1.0:
        return np.array(z, dtype=np.float64, copy=True)
    return tweedie_mean(z, model.score(z, k), abar)


def posterior_cov(model: ScoreModel, z, k: int, schedule=None):
    abar = _abar(model, k, schedule)
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[-1]
    if abar == 1.0:
        return np.zeros((d, d))
    if not model.has_hessian:
        raise CapabilityError("posterior covariance needs Hessian access")
    H = model.hessian(z, k)
    cov = (1.0 - abar) / abar * (np.eye(d) + (1.0 - abar) * H)
    return 0.5 * (cov + cov.T)


def draw_probes(rng: np.random.Generator, n: int, d: int, eps_scale: float = 1.0):
    return eps_scale * rng.standard_normal((n, d))


def hutchinson_samples(model: ScoreModel, z, k: int, n_samples: int, eps_scale: float, rng):
    """Per-probe values ``(1/s^2) eps^T (score(z+eps) - score(z))``."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    z = np.asarray(z, dtype=np.float64)
    eps = draw_probes(rng, n_samples, z.shape[-1], eps_scale)
    s0 = model.score(z, k)
    diff = model.score(z + eps, k) - s0
    return np.sum(eps * diff, axis=-1) / eps_scale**2


def hutchinson_trace(model: ScoreModel, z, k: int, n_samples: int = 1, eps_scale: float = 1.0, rng=None):
    """Estimate ``Trace(hessian log p_k(z))`` from score differences along random probes."""
    rng = np.random.default_rng() if rng is None else rng
    return float(np.mean(hutchinson_samples(model, z, k, n_samples, eps_scale, rng)))


@dataclass
class SurrogateEval:
    loss: float
    measurement: float
    probe: float
    feature: float
    zbar: np.ndarray
    grad: np.ndarray | None = None


def _check_dims(task, codec, d):
    if codec.latent_dim != d:
        raise ValueError(f"latent dimension {d} does not match codec latent_dim {codec.latent_dim}")
    if task.operator.input_dim != codec.data_dim:
        raise ValueError(
            f"operator input {task.operator.input_dim} does not match codec output {codec.data_dim}"
        )


def _terms_value(task, codec, z, s0, probe_scores, probes, abar, terms, feature_loss):
    d = z.shape[-1]
    zbar = tweedie_mean(z, s0, abar)
    pred = task.operator.apply(codec.decode(zbar))
    r = task.y - pred
    meas = terms.lam * float(r @ r)
    probe = 0.0
    if terms.eta > 0:
        vals = np.sum(probes * (probe_scores - s0), axis=-1) / terms.eps_scale**2
        probe = terms.eta / d * float(np.mean(vals))
    feat = 0.0
    if terms.nu > 0 and feature_loss is not None:
        feat = terms.nu_weight(d) * feature_loss.value(pred, task.y)
    return zbar, pred, r, meas, probe, feat


def evaluate_surrogate(
    task: MeasurementTask,
    codec: LatentCodec,
    model: ScoreModel,
    z,
    k: int,
    terms: SurrogateTerms,
    probes,
    feature_loss=None,
    mode: str | None = None,
    s0=None,
    fd_step: float = 1e-5,
) -> SurrogateEval:
    """Evaluate the surrogate loss and, when ``mode`` is given, its gradient in ``z``.

    ``s0`` may carry an already computed ``score(z, k)`` to avoid a repeat call.
    """
    z = np.asarray(z, dtype=np.float64)
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    if probes.shape[0] < 1:
        raise ValueError("need at least one probe")
    _check_dims(task, codec, z.shape[-1])
    abar = _abar(model, k)
    if s0 is None:
        s0 = model.score(z, k)
    probe_scores = model.score(z + probes, k) if terms.eta > 0 else None
    zbar, pred, r, meas, probe, feat = _terms_value(
        task, codec, z, s0, probe_scores, probes, abar, terms, feature_loss
    )
    out = SurrogateEval(meas + probe + feat, meas, probe, feat, zbar)
    if mode is None:
        return out
    if mode not in GRAD_MODES:
        raise ValueError(f"unknown gradient mode {mode!r}; expected one of {GRAD_MODES}")
    if mode == "finite-difference":
        out.grad = _fd_grad(task, codec, model, z, k, terms, probes, feature_loss, fd_step)
        return out

    d = z.shape[-1]
    # gradient of the Z̄-dependent terms with respect to Z̄
    g_pred = -2.0 * terms.lam * r
    if terms.nu > 0 and feature_loss is not None:
        g_pred = g_pred + terms.nu_weight(d) * feature_loss.grad(pred, task.y)
    u = codec.decode_adjoint(task.operator.adjoint(g_pred))
    if abar == 1.0:
        grad = u
    elif mode == "full-jacobian":
        if not model.has_hessian:
            raise CapabilityError("full-jacobian gradient needs Hessian-vector products")
        grad = (u + (1.0 - abar) * model.hvp(z, k, u)) / np.sqrt(abar)
    else:
        grad = u / np.sqrt(abar)
    if terms.eta > 0:
        if not model.has_hessian:
            raise CapabilityError("the probe-term gradient needs Hessian-vector products")
        hv_shift = model.hvp(z + probes, k, probes)
        hv_base = model.hvp(z, k, probes)
        scale = terms.eta / (d * terms.eps_scale**2)
        grad = grad + scale * np.mean(hv_shift - hv_base, axis=0)
    out.grad = grad
    return out


def _fd_grad(task, codec, model, z, k, terms, probes, feature_loss, h):
    g = np.empty_like(z)
    for i in range(z.shape[-1]):
        e = np.zeros_like(z)
        e[i] = h
        up = surrogate_loss(task, codec, model, z + e, k, terms, probes, feature_loss)
        dn = surrogate_loss(task, codec, model, z - e, k, terms, probes, feature_loss)
        g[i] = (up - dn) / (2 * h)
    return g


def surrogate_loss(task, codec, model, z, k, terms, probes, feature_loss=None) -> float:
    return evaluate_surrogate(task, codec, model, z, k, terms, probes, feature_loss).loss


def surrogate_grad(task, codec, model, z, k, terms, probes, mode="full-jacobian", feature_loss=None):
    return evaluate_surrogate(task, codec, model, z, k, terms, probes, feature_loss, mode=mode).grad


# --- curvature lower bound and exact oracles ---------------------------------


def gaussian_logpdf(y, mean, cov) -> float:
    r = np.asarray(y, dtype=np.float64) - mean
    chol = np.linalg.cholesky(cov)
    sol = np.linalg.solve(chol, r)
    return float(-0.5 * sol @ sol - np.sum(np.log(np.diag(chol))) - 0.5 * len(r) * np.log(2 * np.pi))


def isotropic_loglik(task: MeasurementTask, x) -> float:
    """``log N(y; A x, sigma_y^2 I)``."""
    if task.sigma_y <= 0:
        raise ValueError("likelihood needs sigma_y > 0")
    r = task.y - task.operator.apply(x)
    m = r.size
    s2 = task.sigma_y**2
    return float(-0.5 * r @ r / s2 - 0.5 * m * np.log(2 * np.pi * s2))


def xi(abar: float, m: float, d: int) -> float:
    return 1.0 - (1.0 - abar) / abar * m * d


def trace_hessian(model: ScoreModel, z, k: int) -> float:
    if isinstance(model, MixtureScore):
        return float(model.trace_hessian(z, k))
    return float(np.trace(model.hessian(z, k)))


BOUND_FORMS = ("covariance", "printed")


def lower_bound(task: MeasurementTask, model: ScoreModel, z, k: int, m: float, form: str = "covariance") -> float:
    """``log N(y; A Z̄, s^2 I) + log(1 - m Trace(Cov[X0 | z]))`` for an identity codec.

    Expanding the trace of the Tweedie covariance gives ``xi_k - c m Trace(H)``
    with ``c = (1 - abar)^2 / abar``; ``form="printed"`` uses ``c = 1 - abar``
    instead.
    """
    if m <= 0:
        raise ValueError("curvature constant m must be positive")
    if form not in BOUND_FORMS:
        raise ValueError(f"form must be one of {BOUND_FORMS}")
    z = np.asarray(z, dtype=np.float64)
    abar = _abar(model, k)
    c = (1.0 - abar) ** 2 / abar if form == "covariance" else 1.0 - abar
    arg = xi(abar, m, z.shape[-1]) - c * m * trace_hessian(model, z, k)
    if not arg > 0:
        raise ValueError(f"log argument {arg:.6g} is not positive: m={m:.6g} is invalid for this state")
    return isotropic_loglik(task, posterior_mean(model, z, k)) + float(np.log(arg))


def conditional_components(model: MixtureScore, z, k: int):
    """Weights, means and covariances of the clean-data posterior given ``z`` at level ``k``."""
    if not isinstance(model, MixtureScore):
        raise CapabilityError("closed-form conditionals need an oracle mixture model")
    z = np.asarray(z, dtype=np.float64)
    abar = _abar(model, k)
    d = z.shape[-1]
    resp = model.responsibilities(z, k)
    out = []
    for w, comp in zip(resp, model._mixture.components()):
        S = comp.cov_matrix()
        if abar == 1.0:
            out.append((w, z.copy(), np.zeros((d, d))))
            continue
        C = abar * S + (1.0 - abar) * np.eye(d)
        gain = np.sqrt(abar) * np.linalg.solve(C, S).T  # sqrt(abar) S C^-1
        mean = comp.mean + gain @ (z - np.sqrt(abar) * comp.mean)
        cov = S - np.sqrt(abar) * gain @ S
        out.append((w, mean, 0.5 * (cov + cov.T)))
    return out


def exact_log_likelihood(task: MeasurementTask, model: MixtureScore, z, k: int) -> float:
    """Exact ``log p_k(y | z)`` for an oracle prior and identity codec."""
    if task.sigma_y <= 0:
        raise ValueError("exact likelihood needs sigma_y > 0")
    A = task.operator.matrix()
    noise = task.sigma_y**2 * np.eye(A.shape[0])
    terms = []
    for w, mean, cov in conditional_components(model, z, k):
        if w <= 0:
            continue
        terms.append(np.log(w) + gaussian_logpdf(task.y, A @ mean, A @ cov @ A.T + noise))
    return float(logsumexp(terms))


def curvature_constant(task: MeasurementTask, model: MixtureScore, states, n_draws: int = 64, rng=None):
    """Empirical curvature constant for the lower bound, doubled for slack.

    For each state, points are drawn from the clean-data posterior and the
    most negative eigenvalue of ``hessian_x N(y; A x, s^2 I)`` is divided
    by the likelihood at ``Z̄``; the maximum magnitude over all draws and
    states is returned times two.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    A = task.operator.matrix()
    s2 = task.sigma_y**2
    worst = 0.0
    for z, k in states:
        zbar = posterior_mean(model, z, k)
        log_ref = isotropic_loglik(task, zbar)
        comps = conditional_components(model, z, k)
        weights = np.array([c[0] for c in comps])
        for _ in range(n_draws):
            w, mean, cov = comps[rng.choice(len(comps), p=weights / weights.sum())]
            x = rng.multivariate_normal(mean, cov, method="eigh")
            r = task.y - A @ x
            g = A.T @ r / s2
            hess_over_p = np.outer(g, g) - A.T @ A / s2  # hessian of N divided by N
            ratio = np.exp(isotropic_loglik(task, x) - log_ref)
            lam_min = np.linalg.eigvalsh(hess_over_p)[0] * ratio
            worst = max(worst, -lam_min)
    return 2.0 * worst


@dataclass
class JensenGap:
    gap: float
    bound: float
    m1: float
    m1_stderr: float
    lipschitz_bound: float


def _gaussian_abs_moment(cov, rng, n_mc):
    d = cov.shape[0]
    evals = np.clip(np.linalg.eigvalsh(cov), 0.0, None)
    if d == 1:
        return float(np.sqrt(2 * evals[0] / np.pi)), 0.0
    if np.allclose(evals, evals[0], rtol=1e-12, atol=0):
        s = np.sqrt(evals[0])
        return float(s * np.sqrt(2) * np.exp(lgamma((d + 1) / 2) - lgamma(d / 2))), 0.0
    x = rng.standard_normal((n_mc, d)) * np.sqrt(evals)
    norms = np.linalg.norm(x, axis=1)
    return float(norms.mean()), float(norms.std(ddof=1) / np.sqrt(n_mc))


def jensen_gap(task: MeasurementTask, model: MixtureScore, z, k: int, rng=None, n_mc: int = 100_000) -> JensenGap:
    """Jensen's gap of the first-order estimator and two upper bounds on it.

    ``bound`` is ``(d / sqrt(2 pi s^2)) exp(-1 / (2 s^2)) ||A|| m1`` and
    ``lipschitz_bound`` is ``||A|| Lip(N(y; ., s^2 I)) m1``, which holds for
    every configuration. ``m1`` is the first absolute central moment of the
    clean-data posterior.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if task.sigma_y <= 0:
        raise ValueError("Jensen's gap needs sigma_y > 0")
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[-1]
    A = task.operator.matrix()
    msize = A.shape[0]
    s2 = task.sigma_y**2
    comps = conditional_components(model, z, k)
    zbar = posterior_mean(model, z, k)
    noise = s2 * np.eye(msize)
    expected = sum(w * np.exp(gaussian_logpdf(task.y, A @ mean, A @ cov @ A.T + noise)) for w, mean, cov in comps)
    plugin = np.exp(isotropic_loglik(task, zbar))
    gap = abs(expected - plugin)

    if len(comps) == 1:
        m1, se = _gaussian_abs_moment(comps[0][2], rng, n_mc)
    else:
        weights = np.array([c[0] for c in comps])
        labels = rng.choice(len(comps), size=n_mc, p=weights / weights.sum())
        norms = np.empty(n_mc)
        for i, (_, mean, cov) in enumerate(comps):
            idx = np.flatnonzero(labels == i)
            x = rng.multivariate_normal(mean, cov, size=idx.size, method="eigh")
            norms[idx] = np.linalg.norm(x - zbar, axis=1)
        m1, se = float(norms.mean()), float(norms.std(ddof=1) / np.sqrt(n_mc))

    a_norm = float(np.linalg.norm(A, 2)) if A.size else 0.0
    bound = d / np.sqrt(2 * np.pi * s2) * np.exp(-1.0 / (2 * s2)) * a_norm * m1
    lip = (2 * np.pi * s2) ** (-msize / 2) * np.exp(-0.5) / np.sqrt(s2)
    return JensenGap(float(gap), float(bound), m1, se, float(a_norm * lip * m1))
