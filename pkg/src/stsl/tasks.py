"""Synthetic 32x32 desk tasks and their latent Gaussian-mixture prior.

Images are decoded from a ``keep x keep`` block of low DCT frequencies, and
the prior is a mixture in that latent space. Keeping the latent smaller than
every measurement (the x4 downsample sees 64 block means) keeps all four
tasks well posed at desk noise levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .operators import (
    LatentCodec,
    MeasurementTask,
    dct_codec,
    downsample_operator,
    gaussian_blur_operator,
    identity_operator,
    make_task,
    random_mask_operator,
    salt_pepper,
)
from .scoremodels import GaussianMixturePrior

TASK_FAMILIES = ("inpaint", "blur", "downsample", "saltpepper")


@dataclass(frozen=True)
class DeskPriorConfig:
    side: int = 32
    keep: int = 6
    components: int = 4
    variance: float = 0.1
    modes: int = 4
    seed: int = 1234


def smooth_image(side: int, modes: int, rng: np.random.Generator) -> np.ndarray:
    """Random low-frequency image with values in (0.1, 0.9)."""
    u = np.arange(side) / side
    img = np.zeros((side, side))
    for i in range(modes):
        for j in range(modes):
            amp = rng.standard_normal() / (1 + i + j)
            ph = rng.uniform(0, 2 * np.pi, size=2)
            img += amp * np.outer(np.cos(np.pi * i * u + ph[0]), np.cos(np.pi * j * u + ph[1]))
    img -= img.min()
    img /= max(img.max(), 1e-12)
    return 0.1 + 0.8 * img


@dataclass(frozen=True)
class DeskProblem:
    prior: GaussianMixturePrior
    codec: LatentCodec
    side: int

    def sample(self, rng: np.random.Generator):
        """Return ``(latent, image)`` drawn from the prior."""
        z = self.prior.sample(1, rng)[0]
        return z, self.codec.decode(z)


def desk_problem(cfg: DeskPriorConfig = DeskPriorConfig()) -> DeskProblem:
    rng = np.random.default_rng(cfg.seed)
    codec = dct_codec(cfg.side, cfg.keep)
    means = np.stack([codec.encode(smooth_image(cfg.side, cfg.modes, rng).ravel()) for _ in range(cfg.components)])
    weights = np.full(cfg.components, 1.0 / cfg.components)
    covs = [np.full(codec.latent_dim, cfg.variance)] * cfg.components
    return DeskProblem(GaussianMixturePrior(weights, means, covs), codec, cfg.side)


def desk_task(family: str, x0, side: int, sigma_y: float, rng: np.random.Generator) -> MeasurementTask:
    """Corrupt a flattened ``side x side`` image according to ``family``."""
    d = side * side
    if family == "inpaint":
        return make_task(random_mask_operator(d, 0.4, rng), x0, sigma_y, rng)
    if family == "blur":
        return make_task(gaussian_blur_operator((side, side), 9, 1.5), x0, sigma_y, rng)
    if family == "downsample":
        return make_task(downsample_operator((side, side), 4), x0, sigma_y, rng)
    if family == "saltpepper":
        op = identity_operator(d)
        y = salt_pepper(x0, 0.02, rng) + sigma_y * rng.standard_normal(d)
        return MeasurementTask(op, float(sigma_y), y)
    raise ValueError(f"unknown task family {family!r}; expected one of {TASK_FAMILIES}")
