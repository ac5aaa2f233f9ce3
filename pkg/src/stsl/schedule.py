"""Discrete variance-preserving noise schedules.

Noise index convention: ``k = 0`` is clean data and ``k = T`` is the
noisiest level. ``alphas[k]`` is the per-step retention of step ``k``
(``alphas[0] = 1`` is a placeholder) and ``alpha_bars[k]`` the cumulative
product, so ``alpha_bars[0] = 1`` and the forward kernel at level ``k`` is
``N(sqrt(alpha_bars[k]) x0, (1 - alpha_bars[k]) I)``.

A reverse-loop counter ``t`` in ``0..T-1`` visits noise index ``T - t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("linear-beta", "cosine", "constant-alpha")


@dataclass(frozen=True)
class NoiseSchedule:
    family: str
    T: int
    params: dict = field(default_factory=dict)
    alphas: np.ndarray = field(repr=False, default=None)
    alpha_bars: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        for arr in (self.alphas, self.alpha_bars):
            arr.setflags(write=False)

    def abar(self, k: int) -> float:
        return float(self.alpha_bars[k])

    def alpha(self, k: int) -> float:
        return float(self.alphas[k])

    def check_index(self, k: int) -> int:
        if not 0 <= k <= self.T:
            raise IndexError(f"noise index {k} outside [0, {self.T}]")
        return int(k)

    def to_config(self) -> dict:
        """Plain key/value description; the arrays are recomputed on load."""
        return {"family": self.family, "T": self.T, **self.params}


def _betas(T: int, family: str, params: dict) -> np.ndarray:
    if family == "linear-beta":
        start = float(params.get("beta_start", 1e-4))
        end = float(params.get("beta_end", 0.2))
        return np.linspace(start, end, T, dtype=np.float64)
    if family == "cosine":
        s = float(params.get("s", 0.008))
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        abar = f / f[0]
        betas = 1.0 - abar[1:] / abar[:-1]
        return np.clip(betas, 0.0, float(params.get("max_beta", 0.999)))
    if family == "constant-alpha":
        alpha = float(params.get("alpha", 1.0))
        return np.full(T, 1.0 - alpha, dtype=np.float64)
    raise ValueError(f"unknown schedule family {family!r}; expected one of {FAMILIES}")


def build_schedule(T: int = 50, kind: str = "linear-beta", **params) -> NoiseSchedule:
    """Build a schedule of ``T`` steps from a named family.

    Families and their parameters:

    - ``linear-beta``: ``beta_start`` (1e-4), ``beta_end`` (0.2)
    - ``cosine``: ``s`` (0.008), ``max_beta`` (0.999)
    - ``constant-alpha``: ``alpha`` (1.0)
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    betas = _betas(T, kind, params)
    alphas_tail = 1.0 - betas
    if not np.all(np.isfinite(alphas_tail)) or np.any(alphas_tail <= 0) or np.any(alphas_tail > 1):
        raise ValueError(f"schedule {kind!r} with {params} produces alpha outside (0, 1]")
    alphas = np.concatenate([[1.0], alphas_tail])
    alpha_bars = np.ones(T + 1)
    for k in range(1, T + 1):
        alpha_bars[k] = alpha_bars[k - 1] * alphas[k]
    return NoiseSchedule(kind, T, dict(params), alphas, alpha_bars)


def forward_noising(schedule: NoiseSchedule, x0, k: int, rng: np.random.Generator) -> np.ndarray:
    """Draw from the forward kernel at noise index ``k``."""
    k = schedule.check_index(k)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = rng.standard_normal(x0.shape)
    abar = schedule.alpha_bars[k]
    if abar == 1.0:
        return x0.copy()
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
