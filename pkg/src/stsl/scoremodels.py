"""Score providers: closed-form Gaussian and Gaussian-mixture oracles.

The oracle priors stand in for a learned score network. Pushing a prior
through the forward kernel keeps it in the same family, so scores,
Hessians and log-densities of every diffused marginal are exact.

All vector arguments may carry leading batch dimensions; the last axis is
the data dimension.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from .schedule import NoiseSchedule

FD_STEP = 1e-5


class CapabilityError(RuntimeError):
    """Requested an operation the score model cannot provide."""


class _Component:
    """One Gaussian with scalar, diagonal or dense covariance."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64)
        d = self.mean.shape[-1]
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 0:
            cov = np.full(d, float(cov))
        if cov.ndim == 1:
            if cov.shape != (d,) or np.any(cov <= 0):
                raise ValueError("diagonal covariance must be positive with length d")
            self.diag = cov
            self.full = None
            self.logdet = float(np.sum(np.log(cov)))
        else:
            if cov.shape != (d, d):
                raise ValueError(f"covariance shape {cov.shape} does not match d={d}")
            if np.max(np.abs(cov - cov.T)) > 1e-12 * max(1.0, np.max(np.abs(cov))):
                raise ValueError("covariance is not symmetric")
            chol = np.linalg.cholesky(cov)  # raises LinAlgError if not SPD
            self.diag = None
            self.full = cov
            self.logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
            self.prec = np.linalg.inv(cov)
            self.prec = 0.5 * (self.prec + self.prec.T)
        self.d = d

    def cov_matrix(self):
        return np.diag(self.diag) if self.full is None else self.full

    def precision_matrix(self):
        return np.diag(1.0 / self.diag) if self.full is None else self.prec

    def prec_apply(self, x):
        if self.full is None:
            return x / self.diag
        return x @ self.prec  # prec is symmetric

    def logpdf(self, z):
        r = z - self.mean
        maha = np.sum(r * self.prec_apply(r), axis=-1)
        return -0.5 * (maha + self.logdet + self.d * np.log(2 * np.pi))

    def diffuse(self, abar: float) -> "_Component":
        mean = np.sqrt(abar) * self.mean
        if self.full is None:
            return _Component(mean, abar * self.diag + (1.0 - abar))
        cov = abar * self.full + (1.0 - abar) * np.eye(self.d)
        return _Component(mean, cov)


@dataclass(frozen=True)
class GaussianPrior:
    """``N(mean, cov)``; ``cov`` is a scalar, a diagonal vector or a dense SPD matrix."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=np.float64))
        _Component(self.mean, self.cov)

    @property
    def d(self) -> int:
        return self.mean.shape[-1]

    def cov_matrix(self) -> np.ndarray:
        return _Component(self.mean, self.cov).cov_matrix()

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        c = _Component(self.mean, self.cov)
        eps = rng.standard_normal((n, self.d))
        if c.full is None:
            return self.mean + eps * np.sqrt(c.diag)
        return self.mean + eps @ np.linalg.cholesky(c.full).T

    def as_mixture(self) -> "GaussianMixturePrior":
        return GaussianMixturePrior([1.0], self.mean[None], [self.cov])


@dataclass(frozen=True)
class GaussianMixturePrior:
    weights: np.ndarray
    means: np.ndarray
    covs: list

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if len(w) != len(means) or len(self.covs) != len(w):
            raise ValueError("weights, means and covs must have the same length")
        covs = [np.asarray(c, dtype=np.float64) for c in self.covs]
        for m, c in zip(means, covs):
            _Component(m, c)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def components(self) -> list[_Component]:
        return [_Component(m, c) for m, c in zip(self.means, self.covs)]

    def sample(self, n: int, rng: np.random.Generator, return_labels: bool = False):
        labels = rng.choice(len(self.weights), size=n, p=self.weights)
        out = np.empty((n, self.d))
        for i, comp in enumerate(self.components()):
            idx = np.flatnonzero(labels == i)
            if idx.size == 0:
                continue
            eps = rng.standard_normal((idx.size, self.d))
            if comp.full is None:
                out[idx] = comp.mean + eps * np.sqrt(comp.diag)
            else:
                out[idx] = comp.mean + eps @ np.linalg.cholesky(comp.full).T
        return (out, labels) if return_labels else out


@dataclass(frozen=True)
class ConditionalShiftPrior:
    """Mixture whose every component mean is translated by ``shift_map @ phi``."""

    base: GaussianMixturePrior
    shift_map: np.ndarray

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.shift_map, dtype=np.float64))
        if W.shape[0] != self.base.d or not np.all(np.isfinite(W)):
            raise ValueError(f"shift_map must be finite with {self.base.d} rows")
        object.__setattr__(self, "shift_map", W)

    @property
    def embed_dim(self) -> int:
        return self.shift_map.shape[1]

    def check_embedding(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=np.float64)
        if phi.shape != (self.embed_dim,):
            raise ValueError(f"embedding must have shape ({self.embed_dim},), got {phi.shape}")
        return phi

    def shifted(self, phi) -> GaussianMixturePrior:
        c = self.shift_map @ self.check_embedding(phi)
        return GaussianMixturePrior(self.base.weights, self.base.means + c, self.base.covs)


def marginal_at(prior, schedule: NoiseSchedule, k: int):
    """Exact diffused marginal at noise index ``k`` (same family as ``prior``)."""
    abar = schedule.abar(schedule.check_index(k))
    if isinstance(prior, GaussianPrior):
        c = _Component(prior.mean, prior.cov).diffuse(abar)
        cov = c.diag if c.full is None else c.full
        return GaussianPrior(c.mean, cov)
    if isinstance(prior, GaussianMixturePrior):
        comps = [c.diffuse(abar) for c in prior.components()]
        return GaussianMixturePrior(
            prior.weights,
            np.array([c.mean for c in comps]),
            [c.diag if c.full is None else c.full for c in comps],
        )
    raise TypeError(f"no closed-form marginal for {type(prior).__name__}")


class ScoreModel:
    """Base score provider.

    Subclasses implement ``score``; oracles also override ``hvp``,
    ``hessian`` and ``log_marginal``. With ``fd_fallback=True`` the
    curvature methods fall back to central differences of ``score``.
    """

    analytic_hessian = False
    analytic_log_marginal = False

    def __init__(self, schedule: NoiseSchedule, fd_fallback: bool = False):
        self.schedule = schedule
        self.fd_fallback = fd_fallback

    @property
    def has_hessian(self) -> bool:
        return self.analytic_hessian or self.fd_fallback

    def score(self, z, k):
        raise NotImplementedError

    def log_marginal(self, z, k):
        raise CapabilityError(f"{type(self).__name__} has no closed-form log density")

    def _require_curvature(self):
        if not self.fd_fallback:
            raise CapabilityError(
                f"{type(self).__name__} has no analytic Hessian and finite differences are disabled"
            )

    def hvp(self, z, k, v):
        self._require_curvature()
        return fd_hvp(self, z, k, v)

    def hessian(self, z, k):
        self._require_curvature()
        return fd_hessian(self, z, k)


def fd_hvp(model: ScoreModel, z, k, v, h: float = FD_STEP):
    z = np.asarray(z, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    unit = np.divide(v, norm, out=np.zeros_like(v), where=norm > 0)
    diff = model.score(z + h * unit, k) - model.score(z - h * unit, k)
    return norm * diff / (2 * h)


def fd_hessian(model: ScoreModel, z, k, h: float = FD_STEP):
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[-1]
    H = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        H[:, j] = (model.score(z + e, k) - model.score(z - e, k)) / (2 * h)
    return 0.5 * (H + H.T)


class MixtureScore(ScoreModel):
    """Exact score of a diffused Gaussian mixture (a Gaussian is the one-component case)."""

    analytic_hessian = True
    analytic_log_marginal = True

    def __init__(self, prior, schedule: NoiseSchedule, fd_fallback: bool = False):
        super().__init__(schedule, fd_fallback)
        self.prior = prior
        mixture = prior.as_mixture() if isinstance(prior, GaussianPrior) else prior
        self._mixture = mixture
        self._logw = np.log(np.maximum(mixture.weights, 1e-300))
        self._marginal = lru_cache(maxsize=None)(self._build_marginal)

    @property
    def d(self) -> int:
        return self._mixture.d

    def _build_marginal(self, k: int):
        return [c.diffuse(self.schedule.abar(k)) for c in self._mixture.components()]

    def components_at(self, k: int) -> list[_Component]:
        return self._marginal(self.schedule.check_index(int(k)))

    def _parts(self, z, k):
        comps = self.components_at(k)
        z = np.asarray(z, dtype=np.float64)
        logp = np.stack([lw + c.logpdf(z) for lw, c in zip(self._logw, comps)], axis=-1)
        total = logsumexp(logp, axis=-1, keepdims=True)
        resp = np.exp(logp - total)
        grads = np.stack([-c.prec_apply(z - c.mean) for c in comps], axis=-2)
        return comps, resp, grads, total[..., 0]

    def responsibilities(self, z, k):
        return self._parts(z, k)[1]

    def log_marginal(self, z, k):
        return self._parts(z, k)[3]

    def score(self, z, k):
        _, resp, grads, _ = self._parts(z, k)
        return np.einsum("...c,...cd->...d", resp, grads)

    def hvp(self, z, k, v):
        comps, resp, grads, _ = self._parts(z, k)
        v = np.asarray(v, dtype=np.float64)
        mean_grad = np.einsum("...c,...cd->...d", resp, grads)
        out = -sum(r[..., None] * c.prec_apply(v) for r, c in zip(np.moveaxis(resp, -1, 0), comps))
        gv = np.einsum("...cd,...d->...c", grads, v)
        out = out + np.einsum("...c,...cd->...d", resp * gv, grads)
        out = out - mean_grad * np.sum(mean_grad * v, axis=-1, keepdims=True)
        return out

    def hessian(self, z, k):
        comps, resp, grads, _ = self._parts(z, k)
        if resp.ndim != 1:
            raise ValueError("hessian takes a single state")
        mean_grad = resp @ grads
        H = -sum(r * c.precision_matrix() for r, c in zip(resp, comps))
        H = H + (grads.T * resp) @ grads - np.outer(mean_grad, mean_grad)
        return 0.5 * (H + H.T)

    def trace_hessian(self, z, k):
        """Exact ``Trace(hessian)`` without forming the matrix."""
        comps, resp, grads, _ = self._parts(z, k)
        mean_grad = np.einsum("...c,...cd->...d", resp, grads)
        tr_prec = np.stack(
            [np.sum(1.0 / c.diag) if c.full is None else np.trace(c.prec) for c in comps]
        )
        return (
            -np.sum(resp * tr_prec, axis=-1)
            + np.sum(resp * np.sum(grads**2, axis=-1), axis=-1)
            - np.sum(mean_grad**2, axis=-1)
        )


def oracle_score(prior, schedule: NoiseSchedule, fd_fallback: bool = False) -> MixtureScore:
    return MixtureScore(prior, schedule, fd_fallback)


class ConditionalScore:
    """Score of a :class:`ConditionalShiftPrior`, evaluated per embedding.

    Translating every component by ``c`` translates the diffused density by
    ``sqrt(abar_k) c``, so each call reduces to the base score at a shifted
    point.
    """

    def __init__(self, prior: ConditionalShiftPrior, schedule: NoiseSchedule):
        self.prior = prior
        self.schedule = schedule
        self.base = MixtureScore(prior.base, schedule)

    def _offset(self, k, phi):
        return np.sqrt(self.schedule.abar(k)) * (self.prior.shift_map @ self.prior.check_embedding(phi))

    def score(self, z, k, phi):
        return self.base.score(np.asarray(z) - self._offset(k, phi), k)

    def hvp(self, z, k, phi, v):
        return self.base.hvp(np.asarray(z) - self._offset(k, phi), k, v)

    def hessian(self, z, k, phi):
        return self.base.hessian(np.asarray(z) - self._offset(k, phi), k)

    def log_marginal(self, z, k, phi):
        return self.base.log_marginal(np.asarray(z) - self._offset(k, phi), k)

    def score_vjp_phi(self, z, k, phi, u):
        """``(d score / d phi)^T u``; the Jacobian is ``-sqrt(abar) H W``."""
        hu = self.hvp(z, k, phi, u)
        return -np.sqrt(self.schedule.abar(k)) * (self.prior.shift_map.T @ hu)

    def bind(self, phi) -> "BoundConditionalScore":
        return BoundConditionalScore(self, phi)


class BoundConditionalScore(ScoreModel):
    """A conditional score with its embedding fixed; usable wherever a ScoreModel is."""

    analytic_hessian = True
    analytic_log_marginal = True

    def __init__(self, cond: ConditionalScore, phi):
        super().__init__(cond.schedule)
        self.cond = cond
        self.phi = cond.prior.check_embedding(phi).copy()

    def score(self, z, k):
        return self.cond.score(z, k, self.phi)

    def hvp(self, z, k, v):
        return self.cond.hvp(z, k, self.phi, v)

    def hessian(self, z, k):
        return self.cond.hessian(z, k, self.phi)

    def log_marginal(self, z, k):
        return self.cond.log_marginal(z, k, self.phi)


def conditional_score(model: ConditionalScore, z, k, phi):
    return model.score(z, k, phi)


def score(model, z, k):
    return model.score(z, k)


def hessian(model, z, k):
    return model.hessian(z, k)


def hvp(model, z, k, v):
    return model.hvp(z, k, v)


class CountingScore(ScoreModel):
    """Wraps a model and counts every score / hvp / hessian call.

    Batched score calls count one evaluation per leading-axis row.
    """

    def __init__(self, inner: ScoreModel):
        super().__init__(inner.schedule, inner.fd_fallback)
        self.inner = inner
        self.analytic_hessian = inner.analytic_hessian
        self.analytic_log_marginal = inner.analytic_log_marginal
        self.score_calls = 0
        self.hvp_calls = 0
        self.hessian_calls = 0

    def _rows(self, z):
        z = np.asarray(z)
        return 1 if z.ndim <= 1 else int(np.prod(z.shape[:-1]))

    def score(self, z, k):
        self.score_calls += self._rows(z)
        return self.inner.score(z, k)

    def hvp(self, z, k, v):
        shape = np.broadcast_shapes(np.shape(z), np.shape(v))
        self.hvp_calls += 1 if len(shape) <= 1 else int(np.prod(shape[:-1]))
        if self.inner.analytic_hessian:
            return self.inner.hvp(z, k, v)
        return super().hvp(z, k, v)

    def hessian(self, z, k):
        self.hessian_calls += 1
        if self.inner.analytic_hessian:
            return self.inner.hessian(z, k)
        return super().hessian(z, k)

    def log_marginal(self, z, k):
        return self.inner.log_marginal(z, k)
