"""Toy editing pipeline: null-embedding fitting against the refined trajectory,
a latent hook standing in for attention control, and a one-step surrogate
correction.

The null embedding is the zero vector. Embeddings act through a
:class:`~stsl.scoremodels.ConditionalScore`, which shifts every prior
component by ``W @ phi``.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .operators import LatentCodec, MeasurementTask
from .samplers import RunReport, SamplerConfig, stsl_invert
from .schedule import NoiseSchedule
from .scoremodels import ConditionalScore
from .tweedie import SquaredFeatureLoss, SurrogateTerms, evaluate_surrogate, tweedie_mean

log = logging.getLogger(__name__)

HOOKS = ("identity", "blend")


@dataclass(frozen=True)
class EmbeddingSequence:
    phis: np.ndarray

    def __post_init__(self):
        phis = np.atleast_2d(np.asarray(self.phis, dtype=np.float64))
        if not np.all(np.isfinite(phis)):
            raise ValueError("embeddings must be finite")
        object.__setattr__(self, "phis", phis)

    def __len__(self):
        return self.phis.shape[0]

    def __getitem__(self, t):
        return self.phis[t]

    def to_text(self) -> str:
        return "\n".join(" ".join(f"{v:.17g}" for v in row) for row in self.phis) + "\n"


@dataclass(frozen=True)
class EditConfig:
    target: np.ndarray
    hook: str = "identity"
    blend_weight: float = 0.05
    steps: int = 10
    embed_lr: float = 0.1
    embed_step: str = "cauchy"
    edit_lr: float = 0.05
    lam: float = 1.0
    eta: float = 0.02
    nu: float = 0.02
    eps_scale: float = 1.0
    nu_normalize: bool = True
    switch_step: int = 30
    stage1: bool = True

    def __post_init__(self):
        target = np.atleast_1d(np.asarray(self.target, dtype=np.float64))
        if not np.all(np.isfinite(target)):
            raise ValueError("target embedding must be finite")
        object.__setattr__(self, "target", target)
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.switch_step < 0:
            raise ValueError("switch_step must be nonnegative")
        if self.embed_step not in ("cauchy", "fixed"):
            raise ValueError("embed_step must be 'cauchy' or 'fixed'")
        if self.hook not in HOOKS:
            raise ValueError(f"unknown hook {self.hook!r}; expected one of {HOOKS}")
        SurrogateTerms(self.lam, self.eta, self.nu, self.eps_scale)

    def terms_at(self, t: int) -> SurrogateTerms:
        """Measurement term before the switch-on step, feature term from it onwards."""
        if t < self.switch_step:
            return SurrogateTerms(self.lam, self.eta, 0.0, self.eps_scale, self.nu_normalize)
        return SurrogateTerms(0.0, self.eta, self.nu, self.eps_scale, self.nu_normalize)


def _predict_coefficients(schedule: NoiseSchedule, k: int):
    ab_k, ab_prev = schedule.alpha_bars[k], schedule.alpha_bars[k - 1]
    return np.sqrt(ab_prev), np.sqrt(1.0 - ab_prev) * np.sqrt(1.0 - ab_k)


def f_predict(model: ConditionalScore, z, k: int, phi, schedule: NoiseSchedule | None = None):
    """Deterministic one-step prediction from index ``k`` to ``k - 1`` under embedding ``phi``."""
    schedule = model.schedule if schedule is None else schedule
    if k < 1:
        raise ValueError("f_predict needs k >= 1")
    s = model.score(z, k, phi)
    zbar = tweedie_mean(z, s, schedule.alpha_bars[k])
    a, b = _predict_coefficients(schedule, k)
    return a * zbar - b * s


def _score_gain(schedule, k):
    # f depends on phi only through the score, with this coefficient
    ab_k = schedule.alpha_bars[k]
    a, b = _predict_coefficients(schedule, k)
    return a * (1.0 - ab_k) / np.sqrt(ab_k) - b


def f_predict_vjp_phi(model: ConditionalScore, z, k: int, phi, u, schedule: NoiseSchedule | None = None):
    """``(d f / d phi)^T u``."""
    schedule = model.schedule if schedule is None else schedule
    return _score_gain(schedule, k) * model.score_vjp_phi(z, k, phi, u)


def f_predict_jvp_phi(model: ConditionalScore, z, k: int, phi, v, schedule: NoiseSchedule | None = None):
    """``(d f / d phi) v``."""
    schedule = model.schedule if schedule is None else schedule
    shift = np.sqrt(schedule.alpha_bars[k]) * (model.prior.shift_map @ v)
    return -_score_gain(schedule, k) * model.hvp(z, k, phi, shift)


@dataclass
class NullFit:
    embeddings: EmbeddingSequence
    residuals: list = field(default_factory=list)
    converged: list = field(default_factory=list)


def _fit_one(model, z, z_next, k, schedule, steps, lr, phi0, rule="cauchy"):
    phi = phi0.copy()
    r = z_next - f_predict(model, z, k, phi, schedule)
    hist = [float(r @ r)]
    for _ in range(steps):
        g = -2.0 * f_predict_vjp_phi(model, z, k, phi, r, schedule)
        if not np.any(g):
            hist.append(hist[-1])
            continue
        step = lr
        if rule == "cauchy":
            jg = f_predict_jvp_phi(model, z, k, phi, g, schedule)
            denom = 2.0 * float(jg @ jg)
            if denom > 0:
                step = float(g @ g) / denom
        while True:
            cand = phi - step * g
            rc = z_next - f_predict(model, z, k, cand, schedule)
            val = float(rc @ rc)
            if val <= hist[-1]:
                phi, r = cand, rc
                hist.append(val)
                break
            step *= 0.5
            if step < lr * 1e-6:
                hist.append(hist[-1])
                break
    return phi, hist


def null_optimize(trajectory, model: ConditionalScore, schedule: NoiseSchedule, config: EditConfig) -> NullFit:
    """Fit ``phi_t`` so that ``f_predict(Z_t, T - t, phi_t)`` reproduces ``Z_{t+1}``.

    Gradient descent from zero. The trial step is ``embed_lr`` or, with
    ``embed_step="cauchy"``, the exact minimiser along the gradient of the
    linearised residual; halving backtracking keeps every residual history
    non-increasing.
    """
    T = schedule.T
    if len(trajectory) != T + 1:
        raise ValueError(f"trajectory must hold {T + 1} latents, got {len(trajectory)}")
    phis, residuals, converged = [], [], []
    zero = np.zeros(model.prior.embed_dim)
    for t in range(T):
        phi, hist = _fit_one(model, trajectory[t], trajectory[t + 1], T - t, schedule, config.steps, config.embed_lr, zero,
                             config.embed_step)
        phis.append(phi)
        residuals.append(hist)
        converged.append(hist[-1] < hist[0] or hist[0] == 0.0)
    if not all(converged):
        log.info("null_optimize: %d of %d steps did not reduce the residual", T - sum(converged), T)
    return NullFit(EmbeddingSequence(np.array(phis)), residuals, converged)


def apply_hook(hook: str, z, phi_target, phi_null, model: ConditionalScore | None = None, k: int | None = None,
               weight: float = 0.05):
    """Latent transform applied before the correction step.

    ``blend`` moves ``z`` (at noise index ``k``) by ``weight`` times the
    change in its denoised estimate when the conditioning switches from
    ``phi_null`` to ``phi_target``, rescaled to the noise level. The
    displacement accumulates over the reverse pass, hence the small default.
    """
    if hook not in HOOKS:
        raise ValueError(f"unknown hook {hook!r}; expected one of {HOOKS}")
    z = np.asarray(z, dtype=np.float64)
    if hook == "identity" or weight == 0.0:
        return z.copy()
    if model is None or k is None:
        raise ValueError("the blend hook needs a conditional model and a noise index")
    ab = model.schedule.alpha_bars[k]
    target = tweedie_mean(z, model.score(z, k, phi_target), ab)
    null = tweedie_mean(z, model.score(z, k, phi_null), ab)
    return z + weight * np.sqrt(ab) * (target - null)


def edit_step(z_next, task: MeasurementTask, model, schedule: NoiseSchedule, k: int, terms: SurrogateTerms, rng,
              codec: LatentCodec, lr: float = 0.05, feature_loss=None):
    """One plain gradient step of the surrogate loss at ``z_next`` (noise index ``k``)."""
    if terms.lam == 0 and terms.eta == 0 and terms.nu == 0:
        return z_next
    z_next = np.asarray(z_next, dtype=np.float64)
    probes = terms.eps_scale * rng.standard_normal((1, z_next.shape[-1]))
    if feature_loss is None and terms.nu > 0:
        feature_loss = SquaredFeatureLoss()
    ev = evaluate_surrogate(task, codec, model, z_next, k, terms, probes, feature_loss, mode="full-jacobian")
    return z_next - lr * ev.grad


def _guidance_free(config: SamplerConfig) -> SamplerConfig:
    return dataclasses.replace(config, variant="stsl", K=1, lam=0.0, eta=0.0, nu=0.0, kappa=0.0,
                               init_mode="forward-latent")


def edit_pipeline(task: MeasurementTask, model: ConditionalScore, codec: LatentCodec, schedule: NoiseSchedule,
                  sampler_config: SamplerConfig, edit_config: EditConfig, rng=None) -> RunReport:
    """Invert ``task`` with the zero embedding, fit null embeddings, then re-run the
    trajectory under the target embedding with a one-step correction per level.

    With ``edit_config.stage1`` off the reference trajectory is a guidance-free
    reverse pass from the forward latent.
    """
    rng = np.random.default_rng(sampler_config.seed) if rng is None else rng
    T = schedule.T
    phi_null = np.zeros(model.prior.embed_dim)
    target = model.prior.check_embedding(edit_config.target)
    base = model.bind(phi_null)
    inv_config = sampler_config if edit_config.stage1 else _guidance_free(sampler_config)
    inv = stsl_invert(task, base, codec, schedule, inv_config, rng)
    fit = null_optimize(inv.trajectory, model, schedule, edit_config)

    traj = inv.trajectory
    z = traj[0]
    edited = [z]
    for t in range(T):
        k = T - t
        phi_hat = fit.embeddings[t]
        z_hat = traj[t + 1] + (f_predict(model, z, k, phi_hat + target, schedule) - f_predict(model, traj[t], k, phi_hat, schedule))
        z_hat = apply_hook(edit_config.hook, z_hat, phi_hat + target, phi_hat, model, k - 1, edit_config.blend_weight)
        tgt_model = model.bind(phi_hat + target)
        z = edit_step(z_hat, task, tgt_model, schedule, k - 1, edit_config.terms_at(t), rng, codec, edit_config.edit_lr)
        edited.append(z)

    return RunReport(
        variant="edit",
        seed=sampler_config.seed,
        config={"sampler": inv.config, "edit": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                                                 for k, v in dataclasses.asdict(edit_config).items()}},
        final_latent=z,
        reconstruction=codec.decode(z),
        nfe=dict(inv.nfe),
        hvp_calls=inv.hvp_calls,
        raw_score_calls=inv.raw_score_calls,
        wall_time=inv.wall_time,
        trajectory=edited,
        stages={"inversion": inv},
        metrics={"null_fit_final_residual": float(np.mean([h[-1] for h in fit.residuals]))},
        artifacts={"embeddings": fit.embeddings, "null_fit": fit},
    )
