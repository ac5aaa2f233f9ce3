"""Linear measurement operators, corruption generators and latent codecs.

Images are flattened row-major; operators that need the 2-D layout carry
the image shape. Convolutions use symmetric (edge-repeating) reflective
padding followed by a valid convolution, and the adjoint folds the padded
border back onto the image, so apply/adjoint are exact transposes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import idctn
from scipy.signal import convolve2d, correlate2d

OPERATOR_KINDS = ("identity", "mask", "downsample", "convolution", "dense")


@dataclass(frozen=True)
class LinearOperator:
    kind: str
    input_dim: int
    output_dim: int
    params: dict = field(default_factory=dict, repr=False)

    def _check(self, x, n, what):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != n:
            raise ValueError(f"{self.kind} {what} expects last dimension {n}, got {x.shape[-1]}")
        return x

    def apply(self, x):
        x = self._check(x, self.input_dim, "apply")
        return _APPLY[self.kind](self, x)

    def adjoint(self, y):
        y = self._check(y, self.output_dim, "adjoint")
        return _ADJOINT[self.kind](self, y)

    __call__ = apply

    def matrix(self) -> np.ndarray:
        """Dense matrix (columns are images of unit vectors); for tests and small d."""
        return self.apply(np.eye(self.input_dim)).T

    def norm(self) -> float:
        """Spectral norm."""
        if self.kind == "identity":
            return 1.0
        if self.kind == "mask":
            return 1.0 if self.output_dim else 0.0
        if self.kind == "downsample":
            f = self.params["factor"]
            return 1.0 / f
        return float(np.linalg.norm(self.matrix(), 2))

    def describe(self) -> dict:
        out = {"kind": self.kind, "input_dim": self.input_dim, "output_dim": self.output_dim}
        for key in ("factor", "shape"):
            if key in self.params:
                out[key] = self.params[key]
        return out


def _batched_images(x, shape):
    return x.reshape(x.shape[:-1] + tuple(shape))


def _apply_identity(op, x):
    return x.copy()


def _apply_mask(op, x):
    return x[..., op.params["keep"]]


def _adjoint_mask(op, y):
    out = np.zeros(y.shape[:-1] + (op.input_dim,))
    out[..., op.params["keep"]] = y
    return out


def _apply_downsample(op, x):
    h, w = op.params["shape"]
    f = op.params["factor"]
    img = _batched_images(x, (h // f, f, w // f, f))
    return img.mean(axis=(-3, -1)).reshape(x.shape[:-1] + (op.output_dim,))


def _adjoint_downsample(op, y):
    h, w = op.params["shape"]
    f = op.params["factor"]
    small = _batched_images(y, (h // f, w // f))
    big = np.repeat(np.repeat(small, f, axis=-2), f, axis=-1) / (f * f)
    return big.reshape(y.shape[:-1] + (op.input_dim,))


def _pad_index(n, p):
    return np.pad(np.arange(n), p, mode="symmetric")


def _conv_single(op, img):
    kernel = op.params["kernel"]
    p = kernel.shape[0] // 2
    rows = _pad_index(img.shape[0], p)
    cols = _pad_index(img.shape[1], p)
    padded = img[np.ix_(rows, cols)]
    return convolve2d(padded, kernel, mode="valid")


def _conv_adjoint_single(op, img):
    kernel = op.params["kernel"]
    p = kernel.shape[0] // 2
    h, w = img.shape
    full = correlate2d(img, kernel, mode="full")
    rows = _pad_index(h, p)
    cols = _pad_index(w, p)
    folded = np.zeros((h, len(cols)))
    np.add.at(folded, rows, full)
    out = np.zeros((h, w))
    np.add.at(out.T, cols, folded.T)
    return out


def _map_images(fn, op, x):
    shape = op.params["shape"]
    imgs = x.reshape((-1,) + tuple(shape))
    out = np.stack([fn(op, im) for im in imgs])
    return out.reshape(x.shape[:-1] + (-1,))


def _apply_conv(op, x):
    return _map_images(_conv_single, op, x)


def _adjoint_conv(op, y):
    return _map_images(_conv_adjoint_single, op, y)


def _apply_dense(op, x):
    return x @ op.params["matrix"].T


def _adjoint_dense(op, y):
    return y @ op.params["matrix"]


_APPLY = {
    "identity": _apply_identity,
    "mask": _apply_mask,
    "downsample": _apply_downsample,
    "convolution": _apply_conv,
    "dense": _apply_dense,
}
_ADJOINT = {
    "identity": _apply_identity,
    "mask": _adjoint_mask,
    "downsample": _adjoint_downsample,
    "convolution": _adjoint_conv,
    "dense": _adjoint_dense,
}


def identity_operator(d: int) -> LinearOperator:
    return LinearOperator("identity", d, d)


def mask_operator(keep) -> LinearOperator:
    """Keep the coordinates where ``keep`` is true (any shape, flattened row-major)."""
    keep = np.asarray(keep, dtype=bool).ravel()
    idx = np.flatnonzero(keep)
    return LinearOperator("mask", keep.size, idx.size, {"keep": idx, "bitmap": keep})


def random_mask_operator(d: int, drop_rate: float, rng: np.random.Generator) -> LinearOperator:
    """Drop exactly ``round(drop_rate * d)`` coordinates chosen uniformly."""
    if not 0 <= drop_rate <= 1:
        raise ValueError("drop_rate must lie in [0, 1]")
    keep = np.ones(d, dtype=bool)
    keep[rng.permutation(d)[: int(round(drop_rate * d))]] = False
    return mask_operator(keep)


def downsample_operator(shape, factor: int) -> LinearOperator:
    h, w = shape
    if h % factor or w % factor:
        raise ValueError(f"image shape {shape} not divisible by factor {factor}")
    return LinearOperator(
        "downsample", h * w, (h // factor) * (w // factor), {"shape": (h, w), "factor": int(factor)}
    )


def convolution_operator(shape, kernel) -> LinearOperator:
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise ValueError("kernel must be square with odd side")
    h, w = shape
    if kernel.shape[0] // 2 > min(h, w):
        raise ValueError("kernel larger than twice the image")
    return LinearOperator("convolution", h * w, h * w, {"shape": (h, w), "kernel": kernel})


def dense_operator(matrix) -> LinearOperator:
    M = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    return LinearOperator("dense", M.shape[1], M.shape[0], {"matrix": M})


def gaussian_kernel(side: int, sigma: float) -> np.ndarray:
    if side < 1 or side % 2 == 0:
        raise ValueError(f"kernel side must be a positive odd integer, got {side}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = np.arange(side) - side // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


def motion_kernel(length: int, angle: float = 0.0) -> np.ndarray:
    """Line kernel of ``length`` pixels through the centre at ``angle`` degrees.

    Samples along the segment are splatted bilinearly, then normalised.
    """
    if length < 1 or length % 2 == 0:
        raise ValueError(f"motion length must be a positive odd integer, got {length}")
    k = np.zeros((length, length))
    c = length // 2
    theta = np.deg2rad(angle)
    for s in np.linspace(-c, c, 4 * length + 1):
        x = c + s * np.cos(theta)
        y = c - s * np.sin(theta)
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                yy, xx = y0 + dy, x0 + dx
                if 0 <= yy < length and 0 <= xx < length:
                    k[yy, xx] += wy * wx
    return k / k.sum()


def gaussian_blur_operator(shape, side: int = 9, sigma: float = 1.5) -> LinearOperator:
    return convolution_operator(shape, gaussian_kernel(side, sigma))


def motion_blur_operator(shape, length: int = 9, angle: float = 0.0) -> LinearOperator:
    return convolution_operator(shape, motion_kernel(length, angle))


def salt_pepper(x, rate: float, rng: np.random.Generator, value_range=(0.0, 1.0)) -> np.ndarray:
    """Replace each coordinate by the range minimum or maximum with probability rate/2 each."""
    if not 0 <= rate <= 1:
        raise ValueError("rate must lie in [0, 1]")
    x = np.array(x, dtype=np.float64)
    u = rng.random(x.shape)
    lo, hi = value_range
    x[u < rate / 2] = lo
    x[(u >= rate / 2) & (u < rate)] = hi
    return x


@dataclass(frozen=True)
class MeasurementTask:
    operator: LinearOperator
    sigma_y: float
    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        if y.shape != (self.operator.output_dim,):
            raise ValueError(f"observation shape {y.shape} does not match operator output {self.operator.output_dim}")
        if not np.all(np.isfinite(y)):
            raise ValueError("observation contains non-finite values")
        if self.sigma_y < 0:
            raise ValueError("sigma_y must be nonnegative")
        object.__setattr__(self, "y", y)


def make_task(operator: LinearOperator, x0, sigma_y: float, rng: np.random.Generator) -> MeasurementTask:
    """Observe ``x0`` through ``operator`` with Gaussian noise of std ``sigma_y``."""
    y = operator.apply(x0)
    if sigma_y > 0:
        y = y + sigma_y * rng.standard_normal(y.shape)
    return MeasurementTask(operator, float(sigma_y), y)


@dataclass(frozen=True)
class LatentCodec:
    """Identity codec, or an orthonormal-row encoder ``E`` with decoder ``E^T``."""

    kind: str
    data_dim: int
    E: np.ndarray | None = field(default=None, repr=False)

    @property
    def latent_dim(self) -> int:
        return self.data_dim if self.E is None else self.E.shape[0]

    def encode(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.data_dim:
            raise ValueError(f"encode expects dimension {self.data_dim}, got {x.shape[-1]}")
        return x.copy() if self.E is None else x @ self.E.T

    def decode(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"decode expects dimension {self.latent_dim}, got {z.shape[-1]}")
        return z.copy() if self.E is None else z @ self.E

    def decode_adjoint(self, x):
        """Transpose of the decoder Jacobian applied to a data-space vector."""
        return self.encode(x)


def identity_codec(d: int) -> LatentCodec:
    return LatentCodec("identity", d)


def orthogonal_codec(d: int, latent_dim: int, rng: np.random.Generator) -> LatentCodec:
    if not 1 <= latent_dim <= d:
        raise ValueError("latent_dim must lie in [1, d]")
    q, r = np.linalg.qr(rng.standard_normal((d, latent_dim)))
    q = q * np.sign(np.diag(r))
    return LatentCodec("orthogonal-linear", d, np.ascontiguousarray(q.T))


def dct_codec(side: int, keep: int) -> LatentCodec:
    """Orthonormal 2-D DCT-II basis restricted to the lowest ``keep x keep`` frequencies."""
    if not 1 <= keep <= side:
        raise ValueError("keep must lie in [1, side]")
    rows = []
    for i in range(keep):
        for j in range(keep):
            c = np.zeros((side, side))
            c[i, j] = 1.0
            rows.append(idctn(c, norm="ortho").ravel())
    return LatentCodec("dct", side * side, np.array(rows))


def encode(codec: LatentCodec, x):
    return codec.encode(x)


def decode(codec: LatentCodec, z):
    return codec.decode(z)
