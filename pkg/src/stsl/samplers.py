"""Posterior samplers: STSL, its single-step ablation, a first-order baseline,
and ancestral sampling from the prior.

Reverse-loop step ``t`` (0..T-1) works at noise index ``k = T - t`` and
produces the latent at index ``k - 1``.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .operators import LatentCodec, MeasurementTask
from .schedule import NoiseSchedule
from .scoremodels import CountingScore, ScoreModel
from .tweedie import GRAD_MODES, SquaredFeatureLoss, SurrogateTerms, evaluate_surrogate, tweedie_mean

log = logging.getLogger(__name__)

VARIANTS = ("stsl", "stsl-biased", "first-order", "unconditional")
INIT_MODES = ("forward-latent", "pure-noise")
ENCODE_RULES = ("ddim", "literal")
INIT_PROJECTIONS = ("one-step", "adjoint")
OPTIMIZERS = ("adam", "plain")


@dataclass(frozen=True)
class SamplerConfig:
    T: int = 50
    K: int = 5
    N: int = 2
    lam: float = 1.0
    eta: float = 0.02
    nu: float = 0.0
    eps_scale: float = 1.0
    nu_normalize: bool = True
    kappa: float = 0.0
    lr0: float = 1e-2
    lr_decay: float = 0.998
    grad_mode: str = "full-jacobian"
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    init_mode: str = "forward-latent"
    encode_rule: str = "ddim"
    init_projection: str = "one-step"
    ancestral_variance: str = "beta"
    variant: str = "stsl"
    seed: int = 0

    def __post_init__(self):
        if self.T < 1 or self.K < 1 or self.N < 1:
            raise ValueError("T, K and N must be at least 1")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.kappa < 0 or self.lr0 < 0:
            raise ValueError("kappa and lr0 must be nonnegative")
        for name, allowed in (
            ("variant", VARIANTS),
            ("init_mode", INIT_MODES),
            ("grad_mode", GRAD_MODES),
            ("optimizer", OPTIMIZERS),
            ("encode_rule", ENCODE_RULES),
            ("init_projection", INIT_PROJECTIONS),
            ("ancestral_variance", ("beta", "beta-tilde")),
        ):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        SurrogateTerms(self.lam, self.eta, self.nu, self.eps_scale)

    def resolved(self) -> "SamplerConfig":
        """Apply the overrides each variant forces."""
        if self.variant == "stsl-biased":
            return dataclasses.replace(self, K=1, eta=0.0, init_mode="forward-latent")
        if self.variant == "first-order":
            return dataclasses.replace(self, K=1, eta=0.0, kappa=0.0, init_mode="pure-noise")
        if self.variant == "unconditional":
            return dataclasses.replace(self, lam=0.0, eta=0.0, nu=0.0, kappa=0.0, init_mode="pure-noise")
        return self

    def terms(self) -> SurrogateTerms:
        return SurrogateTerms(self.lam, self.eta, self.nu, self.eps_scale, self.nu_normalize)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


NFE_CATEGORIES = ("forward_encoding", "guidance", "probe", "finite_difference", "combine")


@dataclass
class RunReport:
    variant: str
    seed: int
    config: dict
    final_latent: np.ndarray
    reconstruction: np.ndarray
    losses: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    nfe: dict = field(default_factory=dict)
    hvp_calls: int = 0
    raw_score_calls: int = 0
    wall_time: float = 0.0
    trajectory: list | None = None
    forward_latents: list | None = None
    metrics: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def to_json(self, include_timing: bool = False) -> dict:
        out = {
            "variant": self.variant,
            "seed": self.seed,
            "config": self.config,
            "losses": [float(v) for v in self.losses],
            "residuals": [float(v) for v in self.residuals],
            "nfe": nfe_report(self),
            "hvp_calls": self.hvp_calls,
            "metrics": self.metrics,
            "wall_time_s": self.wall_time if include_timing else None,
        }
        if self.stages:
            out["stages"] = {name: rep.to_json(include_timing) for name, rep in self.stages.items()}
        return out


def nfe_report(report: RunReport) -> dict:
    """Raw score-call counts by category plus the guidance-only (T*K) convention."""
    counts = {c: int(report.nfe.get(c, 0)) for c in NFE_CATEGORIES}
    return {
        **counts,
        "total": sum(counts.values()),
        "raw_instrumented": int(report.raw_score_calls),
        "guidance_convention": counts["guidance"],
    }


def expected_raw_nfe(config: SamplerConfig) -> int:
    """Closed-form score-call count for a run in full-jacobian or decoupled mode.

    Per inner iteration one call at ``z`` (shared by Z̄ and the probe
    centring) plus ``N`` probe calls when ``eta > 0``; one call per step for
    the combine; one per step for forward encoding when it runs.
    """
    c = config.resolved()
    per_inner = 1 + (c.N if c.eta > 0 else 0)
    guided = c.variant != "unconditional"
    total = c.T * ((c.K * per_inner if guided else 0) + 1)
    if c.init_mode == "forward-latent" or c.kappa > 0:
        total += c.T
    return total


class NonFiniteLatentError(FloatingPointError):
    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


def _check_finite(z, snapshot):
    if not np.all(np.isfinite(z)):
        raise NonFiniteLatentError(f"non-finite latent at {snapshot}", snapshot)


class Adam:
    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.n = 0

    def step(self, x, g, lr):
        self.n += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.n)
        vhat = self.v / (1 - self.beta2**self.n)
        return x - lr * mhat / (np.sqrt(vhat) + self.eps)


class PlainGD:
    def step(self, x, g, lr):
        return x - lr * g


def _make_optimizer(config, shape):
    if config.optimizer == "adam":
        return Adam(shape, config.beta1, config.beta2, config.adam_eps)
    return PlainGD()


def initial_projection(task: MeasurementTask, rule: str = "one-step"):
    """Data-space starting point built from the observation.

    ``adjoint`` returns ``A^T y``; ``one-step`` takes one exact line-search
    step of steepest descent on ``||y - A x||^2`` from zero, i.e. ``A^T y``
    rescaled by ``<y, A A^T y> / ||A A^T y||^2``.
    """
    back = task.operator.adjoint(task.y)
    if rule == "adjoint":
        return back
    fwd = task.operator.apply(back)
    denom = float(fwd @ fwd)
    if denom == 0.0:
        return back
    return back * (float(task.y @ fwd) / denom)


def forward_encode(model: ScoreModel, codec: LatentCodec, schedule: NoiseSchedule, y=None, operator=None,
                   rule: str = "ddim", start=None):
    """Deterministic forward latents ``Z_0..Z_T`` starting from ``encode(A^T y)``.

    ``rule="ddim"`` is the deterministic DDIM inversion step; ``rule="literal"``
    is ``sqrt(a_{t+1}) Z_t - sqrt(1 - a_{t+1}) sqrt(1 - abar_t) score(Z_t, t)``.
    Both evaluate the score at noise index ``t``. ``start`` overrides the
    data-space starting point.
    """
    if rule not in ENCODE_RULES:
        raise ValueError(f"unknown encode rule {rule!r}")
    if start is None:
        start = operator.adjoint(y)
    z = codec.encode(start)
    out = [z]
    for t in range(schedule.T):
        s = model.score(z, t)
        ab_t, ab_next = schedule.alpha_bars[t], schedule.alpha_bars[t + 1]
        if rule == "literal":
            a = schedule.alphas[t + 1]
            z = np.sqrt(a) * z - np.sqrt(1 - a) * np.sqrt(1 - ab_t) * s
        else:
            x0 = tweedie_mean(z, s, ab_t)
            eps_hat = -np.sqrt(1 - ab_t) * s
            z = np.sqrt(ab_next) * x0 + np.sqrt(1 - ab_next) * eps_hat
        out.append(z)
    return out


def combine_coefficients(schedule: NoiseSchedule, k: int):
    """Weights of ``(Z_t, Z̄)`` in the noiseless step from index ``k`` to ``k - 1``.

    Returns ``None`` when ``1 - abar_k`` underflows.
    """
    ab_k, ab_prev, a_k = schedule.alpha_bars[k], schedule.alpha_bars[k - 1], schedule.alphas[k]
    denom = 1.0 - ab_k
    if denom <= 0.0:
        return None
    return np.sqrt(a_k) * (1.0 - ab_prev) / denom, np.sqrt(ab_prev) * (1.0 - a_k) / denom


def combine_step(schedule: NoiseSchedule, z, zbar, k: int):
    coef = combine_coefficients(schedule, k)
    if coef is None:
        log.warning("1 - abar_%d underflows; carrying the posterior mean", k)
        return np.array(zbar, copy=True)
    c1, c2 = coef
    if c2 == 0.0:
        return np.array(z, copy=True)
    return c1 * z + c2 * zbar


def _ancestral_std(schedule: NoiseSchedule, k: int, kind: str) -> float:
    beta = 1.0 - schedule.alphas[k]
    if kind == "beta":
        return float(np.sqrt(beta))
    denom = 1.0 - schedule.alpha_bars[k]
    if denom <= 0:
        return 0.0
    return float(np.sqrt((1.0 - schedule.alpha_bars[k - 1]) / denom * beta))


def _reverse(task, model, codec, schedule, config, rng, feature_loss=None, keep_trajectory=True):
    config = config.resolved()
    if config.T != schedule.T:
        raise ValueError(f"config T={config.T} differs from schedule T={schedule.T}")
    counter = model if isinstance(model, CountingScore) else CountingScore(model)
    nfe = dict.fromkeys(NFE_CATEGORIES, 0)
    terms = config.terms()
    if feature_loss is None and terms.nu > 0:
        feature_loss = SquaredFeatureLoss()
    T = schedule.T
    start_time = time.perf_counter()

    forward = None
    if config.init_mode == "forward-latent" or config.kappa > 0:
        before = counter.score_calls
        start = initial_projection(task, config.init_projection)
        forward = forward_encode(counter, codec, schedule, rule=config.encode_rule, start=start)
        nfe["forward_encoding"] += counter.score_calls - before
    if config.init_mode == "forward-latent":
        z = forward[T].copy()
    else:
        z = rng.standard_normal(codec.latent_dim)

    d = z.shape[-1]
    opt = _make_optimizer(config, d)
    losses, residuals = [], []
    trajectory = [z.copy()] if keep_trajectory else None
    guided = config.lam > 0 or config.eta > 0 or config.nu > 0 or config.kappa > 0

    for t in range(T):
        k = T - t
        lr = config.lr0 * config.lr_decay**t
        last = None
        if config.variant != "unconditional":
            for inner in range(config.K):
                probes = terms.eps_scale * rng.standard_normal((config.N, d)) if terms.eta > 0 else np.zeros((1, d))
                before = counter.score_calls
                s0 = counter.score(z, k)
                nfe["guidance"] += counter.score_calls - before
                before = counter.score_calls
                ev = evaluate_surrogate(task, codec, counter, z, k, terms, probes, feature_loss,
                                        mode=config.grad_mode if guided else None, s0=s0)
                used = counter.score_calls - before
                n_probe = config.N if terms.eta > 0 else 0
                nfe["probe"] += n_probe
                nfe["finite_difference"] += used - n_probe
                last = ev
                if guided:
                    g = ev.grad
                    if config.kappa > 0:
                        g = g + 2.0 * config.kappa * (z - forward[k])
                    z = opt.step(z, g, lr)
                    _check_finite(z, {"t": t, "k": k, "inner": inner, "grad_norm": float(np.linalg.norm(g))})

        before = counter.score_calls
        s = counter.score(z, k)
        nfe["combine"] += counter.score_calls - before
        zbar = tweedie_mean(z, s, schedule.alpha_bars[k])
        if last is not None:
            losses.append(last.loss)
            r = task.y - task.operator.apply(codec.decode(zbar))
            residuals.append(float(r @ r))
        z = combine_step(schedule, z, zbar, k)
        if config.variant == "unconditional":
            std = _ancestral_std(schedule, k, config.ancestral_variance)
            if std > 0:
                z = z + std * rng.standard_normal(d)
        _check_finite(z, {"t": t, "k": k, "stage": "combine"})
        if keep_trajectory:
            trajectory.append(z.copy())

    return RunReport(
        variant=config.variant,
        seed=config.seed,
        config=config.to_dict(),
        final_latent=z,
        reconstruction=codec.decode(z),
        losses=losses,
        residuals=residuals,
        nfe=nfe,
        hvp_calls=counter.hvp_calls,
        raw_score_calls=counter.score_calls,
        wall_time=time.perf_counter() - start_time,
        trajectory=trajectory,
        forward_latents=forward,
    )


def run_variant(task, model, codec, schedule, config: SamplerConfig, rng=None, feature_loss=None) -> RunReport:
    rng = np.random.default_rng(config.seed) if rng is None else rng
    return _reverse(task, model, codec, schedule, config, rng, feature_loss)


def stsl_invert(task, model, codec, schedule, config: SamplerConfig, rng=None, feature_loss=None) -> RunReport:
    """Posterior sampling with K surrogate-loss steps per diffusion step."""
    return run_variant(task, model, codec, schedule, dataclasses.replace(config, variant="stsl"), rng, feature_loss)


def stsl_biased_invert(task, model, codec, schedule, config: SamplerConfig, rng=None, feature_loss=None) -> RunReport:
    return run_variant(task, model, codec, schedule, dataclasses.replace(config, variant="stsl-biased"), rng, feature_loss)


def first_order_invert(task, model, codec, schedule, config: SamplerConfig, rng=None, feature_loss=None) -> RunReport:
    return run_variant(task, model, codec, schedule, dataclasses.replace(config, variant="first-order"), rng, feature_loss)


def sample_prior(model: ScoreModel, codec: LatentCodec, schedule: NoiseSchedule, config: SamplerConfig | None = None,
                 rng=None, n: int | None = None):
    """Ancestral sampling from the prior; ``n`` draws a batch of shape ``(n, d)``."""
    config = SamplerConfig(T=schedule.T, variant="unconditional") if config is None else config
    rng = np.random.default_rng(config.seed) if rng is None else rng
    shape = (codec.latent_dim,) if n is None else (n, codec.latent_dim)
    z = rng.standard_normal(shape)
    for k in range(schedule.T, 0, -1):
        zbar = tweedie_mean(z, model.score(z, k), schedule.alpha_bars[k])
        z = combine_step(schedule, z, zbar, k)
        std = _ancestral_std(schedule, k, config.ancestral_variance)
        if std > 0:
            z = z + std * rng.standard_normal(shape)
    return codec.decode(z)
