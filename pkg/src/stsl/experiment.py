"""Config-driven experiments: build objects from a config file and run them."""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import io
from .editing import EditConfig, edit_pipeline
from .io import ConfigError, ConfigFile
from .metrics import image_metrics, moment_error
from .operators import identity_codec
from .samplers import SamplerConfig, nfe_report, run_variant, sample_prior
from .schedule import build_schedule
from .scoremodels import ConditionalScore, ConditionalShiftPrior, GaussianPrior, MixtureScore
from .tasks import TASK_FAMILIES, DeskPriorConfig, desk_problem, desk_task

STUDY_VARIANTS = ("stsl", "stsl-biased", "first-order")

_SCHEDULE_KEYS = {"family": str, "t": int, "beta_start": float, "beta_end": float, "s": float, "max_beta": float,
                  "alpha": float}
_EXPERIMENT_KEYS = {"name": str, "seeds": "ints", "outdir": str, "tasks": "words", "sigma_y": float,
                    "max_value": float, "bootstrap": int}
_EDIT_KEYS = {"source": int, "target": int, "task": str, "hook": str, "blend_weight": float, "steps": int,
              "embed_lr": float, "edit_lr": float, "lam": float, "eta": float, "nu": float, "eps_scale": float,
              "nu_normalize": bool, "switch_step": int, "stage1": bool}
_SAMPLE_KEYS = {"n": int}


def _field_types(cls):
    out = {}
    for f in dataclasses.fields(cls):
        default = f.default
        kind = type(default) if default is not dataclasses.MISSING else str
        out[f.name.lower()] = (f.name, kind)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "desk"
    seeds: tuple = (0,)
    outdir: str = "runs"
    tasks: tuple = ("inpaint",)
    sigma_y: float = 0.05
    max_value: float = 1.0
    bootstrap: int = 10000
    schedule: dict = field(default_factory=lambda: {"family": "linear-beta", "T": 50})
    prior: dict = field(default_factory=lambda: {"kind": "desk"})
    sampler: SamplerConfig = SamplerConfig()
    edit: dict | None = None
    sample: dict = field(default_factory=lambda: {"n": 10000})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sampler"] = self.sampler.to_dict()
        return d


def _read_section(cfg: ConfigFile, section: str, allowed: dict) -> dict:
    out = {}
    for key in cfg.keys(section):
        if key not in allowed:
            raise cfg.error(f"unknown key {key!r} in [{section}]", section, key)
        out[key] = cfg.get(section, key, allowed[key])
    return out


def parse_config(cfg: ConfigFile) -> ExperimentConfig:
    known = {"experiment", "schedule", "prior", "sampler", "edit", "sample"}
    for sec in cfg.sections():
        if sec not in known:
            raise cfg.error(f"unknown section [{sec}]", sec)

    exp = _read_section(cfg, "experiment", _EXPERIMENT_KEYS)
    if "seeds" in exp and not exp["seeds"]:
        raise cfg.error("seeds must be nonempty", "experiment", "seeds")
    if any(s < 0 for s in exp.get("seeds", [])):
        raise cfg.error("seeds must be nonnegative", "experiment", "seeds")
    for t in exp.get("tasks", []):
        if t not in TASK_FAMILIES:
            raise cfg.error(f"unknown task family {t!r}; expected one of {TASK_FAMILIES}", "experiment", "tasks")
    if "sigma_y" in exp and exp["sigma_y"] < 0:
        raise cfg.error("sigma_y must be nonnegative", "experiment", "sigma_y")

    sch = _read_section(cfg, "schedule", _SCHEDULE_KEYS)
    schedule = {"family": sch.pop("family", "linear-beta"), "T": sch.pop("t", 50), **sch}
    try:
        build_schedule(schedule["T"], schedule["family"], **{k: v for k, v in schedule.items() if k not in ("family", "T")})
    except ValueError as exc:
        raise cfg.error(str(exc), "schedule") from None

    prior = {"kind": "desk"}
    if cfg.has("prior"):
        kind = cfg.get("prior", "kind", str, "desk")
        if kind == "desk":
            allowed = {"kind": str, **{k: (float if v is float else int) for k, (_, v) in _field_types(DeskPriorConfig).items()}}
        elif kind == "gaussian":
            allowed = {"kind": str, "dim": int, "mean": float, "variance": float}
        else:
            raise cfg.error(f"unknown prior kind {kind!r}; expected desk or gaussian", "prior", "kind")
        prior = _read_section(cfg, "prior", allowed)
        prior["kind"] = kind
        try:
            build_prior(prior)
        except ValueError as exc:
            raise cfg.error(f"invalid prior: {exc}", "prior") from None

    types = _field_types(SamplerConfig)
    values = {}
    for key in cfg.keys("sampler"):
        if key not in types:
            raise cfg.error(f"unknown key {key!r} in [sampler]", "sampler", key)
        name, kind = types[key]
        values[name] = cfg.get("sampler", key, kind)
    T = schedule["T"]
    if values.setdefault("T", T) != T:
        raise cfg.error(f"sampler T={values['T']} differs from schedule T={T}", "sampler", "t")
    try:
        sampler = SamplerConfig(**values)
    except (ValueError, TypeError) as exc:
        raise cfg.error(f"invalid sampler settings: {exc}", "sampler") from None

    edit = None
    if cfg.has("edit"):
        edit = _read_section(cfg, "edit", _EDIT_KEYS)
        try:
            EditConfig(target=np.zeros(1), **{k: v for k, v in edit.items() if k not in ("source", "target", "task")})
        except ValueError as exc:
            raise cfg.error(f"invalid edit settings: {exc}", "edit") from None
        if edit.get("task", "inpaint") not in TASK_FAMILIES:
            raise cfg.error(f"unknown task family {edit['task']!r}", "edit", "task")

    sample = {"n": 10000, **_read_section(cfg, "sample", _SAMPLE_KEYS)}
    if sample["n"] < 2:
        raise cfg.error("n must be at least 2", "sample", "n")

    return ExperimentConfig(
        name=exp.get("name", "desk"),
        seeds=tuple(exp.get("seeds", [0])),
        outdir=exp.get("outdir", "runs"),
        tasks=tuple(exp.get("tasks", ["inpaint"])),
        sigma_y=exp.get("sigma_y", 0.05),
        max_value=exp.get("max_value", 1.0),
        bootstrap=exp.get("bootstrap", 10000),
        schedule=schedule,
        prior=prior,
        sampler=sampler,
        edit=edit,
        sample=sample,
    )


def load_config(path) -> ExperimentConfig:
    return parse_config(ConfigFile.load(path))


def build_prior(prior: dict):
    """Return ``(problem_or_None, prior, codec)``."""
    if prior["kind"] == "desk":
        params = {k: v for k, v in prior.items() if k != "kind"}
        problem = desk_problem(DeskPriorConfig(**params))
        return problem, problem.prior, problem.codec
    dim = int(prior.get("dim", 2))
    if dim < 1:
        raise ValueError("dim must be positive")
    p = GaussianPrior(np.full(dim, float(prior.get("mean", 0.0))), np.asarray(float(prior.get("variance", 1.0))))
    return None, p, identity_codec(dim)


def build_schedule_from(exp: ExperimentConfig):
    s = dict(exp.schedule)
    return build_schedule(s.pop("T"), s.pop("family"), **s)


def _data_rng(seed: int, family: str):
    return np.random.default_rng([seed, TASK_FAMILIES.index(family)])


def _require_image_prior(problem, what):
    if problem is None:
        raise ConfigError(f"{what} needs the desk image prior")


def run_id(exp: ExperimentConfig, **extra) -> str:
    payload = exp.to_dict()
    payload.pop("seeds")
    payload.pop("outdir")
    return io.content_hash(payload, extra)


def _write_run(directory: Path, image, side, report_json, row, extra_files=None):
    directory.mkdir(parents=True, exist_ok=True)
    io.write_json(directory / "report.json", report_json)
    io.write_pgm(directory / "recon.pgm", np.asarray(image).reshape(side, side))
    io.write_f64(directory / "recon.f64", np.asarray(image).reshape(side, side))
    (directory / "metrics.csv").write_text(io.csv_text([row]), encoding="utf-8")
    for name, text in (extra_files or {}).items():
        (directory / name).write_text(text, encoding="utf-8")


def invert_one(exp: ExperimentConfig, family: str, variant: str, seed: int, timing: bool = False):
    problem, prior, codec = build_prior(exp.prior)
    _require_image_prior(problem, "invert")
    schedule = build_schedule_from(exp)
    model = MixtureScore(prior, schedule)
    rng = _data_rng(seed, family)
    _, x0 = problem.sample(rng)
    task = desk_task(family, x0, problem.side, exp.sigma_y, rng)
    config = dataclasses.replace(exp.sampler, variant=variant, seed=seed)
    report = run_variant(task, model, codec, schedule, config)
    shape = (problem.side, problem.side)
    report.metrics = image_metrics(x0, report.reconstruction, shape, exp.max_value)
    rid = run_id(exp, task=family, variant=variant, seed=seed, kind="invert")
    counts = nfe_report(report)
    row = {
        "run_id": rid,
        "task": family,
        "variant": variant,
        "seed": seed,
        "mse": report.metrics["mse"],
        "psnr": report.metrics["psnr"],
        "ssim": report.metrics["ssim"],
        "nfe_guidance": counts["guidance_convention"],
        "nfe_raw": counts["total"],
        "wall_ms": round(report.wall_time * 1000, 3) if timing else None,
    }
    doc = {"run_id": rid, "task": family, **report.to_json(timing)}
    return rid, row, doc, report.reconstruction, problem.side


def _pool_size():
    env = os.environ.get("STSL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"STSL_THREADS={env!r} is not an integer") from None
    return os.cpu_count() or 1


def _map_runs(fn, jobs):
    workers = min(_pool_size(), len(jobs))
    if workers <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def cmd_invert(exp: ExperimentConfig, variant: str | None = None, timing: bool = False):
    variant = variant or exp.sampler.variant
    jobs = [(exp, family, variant, seed, timing) for family in exp.tasks for seed in exp.seeds]
    results = _map_runs(invert_one, jobs)
    outdir = Path(exp.outdir)
    rows = []
    for rid, row, doc, image, side in results:
        _write_run(outdir / rid, image, side, doc, row)
        rows.append(row)
    return rows


def _bootstrap_ci(diff, n_resamples, seed=0):
    if len(diff) < 2 or np.all(diff == diff[0]):
        return float(diff.mean()), float(diff.mean())
    res = stats.bootstrap((diff,), np.mean, n_resamples=n_resamples, confidence_level=0.95,
                          method="percentile", random_state=np.random.default_rng(seed))
    return float(res.confidence_interval.low), float(res.confidence_interval.high)


def bias_summary(rows, n_resamples=10000) -> list[dict]:
    """Paired differences ``mse(worse) - mse(better)`` per task with bootstrap intervals."""
    out = []
    tasks = sorted({r["task"] for r in rows}, key=TASK_FAMILIES.index)
    for task in tasks:
        by = {v: {r["seed"]: r["mse"] for r in rows if r["task"] == task and r["variant"] == v} for v in STUDY_VARIANTS}
        for better, worse in (("stsl", "stsl-biased"), ("stsl-biased", "first-order")):
            seeds = sorted(set(by[better]) & set(by[worse]))
            if not seeds:
                continue
            diff = np.array([by[worse][s] - by[better][s] for s in seeds])
            lo, hi = _bootstrap_ci(diff, n_resamples)
            out.append({
                "task": task,
                "comparison": f"{worse} - {better}",
                "n": len(seeds),
                "mean_diff": float(diff.mean()),
                "ci_low": lo,
                "ci_high": hi,
                "sign": "+" if diff.mean() > 0 else ("-" if diff.mean() < 0 else "0"),
                "excludes_zero": bool(lo > 0 or hi < 0),
            })
    return out


SUMMARY_COLUMNS = ("task", "comparison", "n", "mean_diff", "ci_low", "ci_high", "sign", "excludes_zero")


def cmd_bias_study(exp: ExperimentConfig, tasks=None, timing: bool = False):
    tasks = tuple(tasks or exp.tasks)
    jobs = [(exp, family, v, seed, timing) for family in tasks for v in STUDY_VARIANTS for seed in exp.seeds]
    results = _map_runs(invert_one, jobs)
    rows = [r[1] for r in results]
    summary = bias_summary(rows, exp.bootstrap)
    outdir = Path(exp.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    text = io.csv_text(rows) + "\n" + io.csv_text(summary, SUMMARY_COLUMNS)
    (outdir / "bias_study.csv").write_text(text, encoding="utf-8")
    io.write_json(outdir / "bias_study_summary.json", summary)
    return rows, summary


def edit_one(exp: ExperimentConfig, seed: int, timing: bool = False):
    problem, prior, codec = build_prior(exp.prior)
    _require_image_prior(problem, "edit")
    schedule = build_schedule_from(exp)
    ed = dict(exp.edit or {})
    src, tgt = ed.pop("source", 0), ed.pop("target", 1)
    family = ed.pop("task", "inpaint")
    C = len(prior.weights)
    if not (0 <= src < C and 0 <= tgt < C):
        raise ConfigError(f"edit components must lie in [0, {C})")
    cond = ConditionalScore(ConditionalShiftPrior(prior, np.eye(codec.latent_dim)), schedule)
    phi = prior.means[tgt] - prior.means[src]
    rng = _data_rng(seed, family)
    z0 = prior.means[src] + np.sqrt(prior.covs[src]) * rng.standard_normal(codec.latent_dim)
    x0 = codec.decode(z0)
    task = desk_task(family, x0, problem.side, exp.sigma_y, rng)
    config = dataclasses.replace(exp.sampler, variant="stsl", seed=seed)
    report = edit_pipeline(task, cond, codec, schedule, config, EditConfig(target=phi, **ed))
    shape = (problem.side, problem.side)
    goal = codec.decode(z0 + phi)
    report.metrics.update(image_metrics(goal, report.reconstruction, shape, exp.max_value))
    inv = report.stages["inversion"]
    report.metrics["source_mse"] = float(np.mean((inv.reconstruction - x0) ** 2))
    report.metrics["edit_displacement"] = float(np.max(np.abs(report.final_latent - inv.final_latent)))
    dists = [np.linalg.norm(report.final_latent - m) for m in prior.means]
    report.metrics["nearest_component"] = int(np.argmin(dists))
    rid = run_id(exp, seed=seed, kind="edit")
    counts = nfe_report(report)
    row = {"run_id": rid, "task": family, "variant": "edit", "seed": seed, "mse": report.metrics["mse"],
           "psnr": report.metrics["psnr"], "ssim": report.metrics["ssim"], "nfe_guidance": counts["guidance_convention"],
           "nfe_raw": counts["total"], "wall_ms": round(report.wall_time * 1000, 3) if timing else None}
    fit_text = report.artifacts["embeddings"].to_text()
    return rid, row, {"run_id": rid, **report.to_json(timing)}, report.reconstruction, problem.side, fit_text


def cmd_edit(exp: ExperimentConfig, timing: bool = False):
    results = _map_runs(edit_one, [(exp, seed, timing) for seed in exp.seeds])
    rows = []
    for rid, row, doc, image, side, emb in results:
        _write_run(Path(exp.outdir) / rid, image, side, doc, row, {"embeddings.txt": emb})
        rows.append(row)
    return rows


def cmd_sample(exp: ExperimentConfig, timing: bool = False):
    problem, prior, codec = build_prior(exp.prior)
    schedule = build_schedule_from(exp)
    model = MixtureScore(prior, schedule)
    outdir = Path(exp.outdir)
    docs = []
    for seed in exp.seeds:
        config = dataclasses.replace(exp.sampler, variant="unconditional", seed=seed)
        X = sample_prior(model, codec, schedule, config, np.random.default_rng(seed), n=exp.sample["n"])
        rid = run_id(exp, seed=seed, kind="sample")
        doc = {"run_id": rid, "seed": seed, "n": exp.sample["n"], "config": config.to_dict()}
        if isinstance(prior, GaussianPrior):
            doc["moments"] = gaussian_moment_check(X, prior.mean, prior.cov_matrix())
        d = outdir / rid
        d.mkdir(parents=True, exist_ok=True)
        io.write_f64(d / "samples.f64", X)
        if problem is not None:
            io.write_pgm(d / "sample0.pgm", X[0].reshape(problem.side, problem.side))
        io.write_json(d / "report.json", doc)
        docs.append(doc)
    return docs


def gaussian_moment_check(X, mean, cov, n_se: float = 4.0) -> dict:
    """Compare sample moments with a Gaussian reference in units of their standard errors."""
    X = np.atleast_2d(X)
    n = X.shape[0]
    cov = np.atleast_2d(cov)
    se_mean = np.sqrt(np.diag(cov) / n)
    se_cov = np.sqrt((cov**2 + np.outer(np.diag(cov), np.diag(cov))) / n)
    emp_cov = np.atleast_2d(np.cov(X, rowvar=False))
    z_mean = np.abs(X.mean(0) - mean) / se_mean
    z_cov = np.abs(emp_cov - cov) / se_cov
    mean_err, cov_err = moment_error(X, mean, cov)
    return {
        "mean_error": mean_err,
        "cov_error": cov_err,
        "max_mean_se": float(z_mean.max()),
        "max_cov_se": float(z_cov.max()),
        "passed": bool(z_mean.max() <= n_se and z_cov.max() <= n_se),
    }
