"""Image and distribution metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

PRETRAINED_MARKER = "requires pretrained network"
UNAVAILABLE_METRICS = {"lpips": PRETRAINED_MARKER, "clip_accuracy": PRETRAINED_MARKER}


@dataclass(frozen=True)
class ImagePair:
    reference: np.ndarray
    candidate: np.ndarray
    max_value: float = 1.0

    def __post_init__(self):
        ref = np.asarray(self.reference, dtype=np.float64)
        cand = np.asarray(self.candidate, dtype=np.float64)
        if ref.shape != cand.shape:
            raise ValueError(f"shape mismatch: {ref.shape} vs {cand.shape}")
        if not self.max_value > 0:
            raise ValueError("max_value must be positive")
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "candidate", cand)


def _pair(a, b=None, max_value=1.0) -> ImagePair:
    return a if isinstance(a, ImagePair) else ImagePair(a, b, max_value)


def mse(a, b=None) -> float:
    p = _pair(a, b)
    return float(np.mean((p.reference - p.candidate) ** 2))


def psnr(a, b=None, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    p = _pair(a, b, max_value)
    err = mse(p)
    if err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(p.max_value**2 / err))


def ssim(a, b=None, max_value: float = 1.0, window: int = 8, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all valid ``window x window`` uniform windows of 2-D images."""
    p = _pair(a, b, max_value)
    x, y = p.reference, p.candidate
    if x.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if window < 1 or window > min(x.shape):
        raise ValueError(f"window {window} does not fit image of shape {x.shape}")
    c1 = (k1 * p.max_value) ** 2
    c2 = (k2 * p.max_value) ** 2

    def local_mean(img):
        m = uniform_filter(img, size=window, mode="constant")
        lo = (window - 1) // 2
        hi = lo + x.shape[0] - window + 1, lo + x.shape[1] - window + 1
        return m[lo : hi[0], lo : hi[1]]

    if np.array_equal(x, y):
        return 1.0
    mx, my = local_mean(x), local_mean(y)
    # population (biased) local moments
    vx = local_mean(x * x) - mx * mx
    vy = local_mean(y * y) - my * my
    cxy = local_mean(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def moment_error(samples, mean, cov) -> tuple[float, float]:
    """Euclidean error of the sample mean and Frobenius error of the sample covariance."""
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if X.shape[0] < 2:
        raise ValueError("need at least two samples")
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    emp_cov = np.atleast_2d(np.cov(X, rowvar=False))
    return float(np.linalg.norm(X.mean(0) - mean)), float(np.linalg.norm(emp_cov - cov))


def sliced_wasserstein(a, b, n_projections: int = 64, rng=None) -> float:
    """Monte-Carlo sliced 1-Wasserstein distance between two sample sets.

    Unequal sample counts are compared through matched quantiles.
    """
    A = np.atleast_2d(np.asarray(a, dtype=np.float64))
    B = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("sample sets must be nonempty")
    if A.shape[1] != B.shape[1]:
        raise ValueError("sample sets differ in dimension")
    rng = np.random.default_rng(0) if rng is None else rng
    dirs = rng.standard_normal((n_projections, A.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(A @ dirs.T, axis=0)
    pb = np.sort(B @ dirs.T, axis=0)
    if pa.shape[0] != pb.shape[0]:
        q = (np.arange(max(len(pa), len(pb))) + 0.5) / max(len(pa), len(pb))
        pa = np.quantile(pa, q, axis=0, method="inverted_cdf")
        pb = np.quantile(pb, q, axis=0, method="inverted_cdf")
    return float(np.mean(np.abs(pa - pb)))


def image_metrics(reference, candidate, shape, max_value: float = 1.0) -> dict:
    ref = np.asarray(reference).reshape(shape)
    cand = np.asarray(candidate).reshape(shape)
    return {
        "mse": mse(ref, cand),
        "psnr": psnr(ref, cand, max_value),
        "ssim": ssim(ref, cand, max_value),
        **UNAVAILABLE_METRICS,
    }
