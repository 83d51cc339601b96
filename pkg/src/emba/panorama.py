"""Gradient map unknowns, valid-pixel mask, nearest-neighbour sampling and
Poisson reconstruction of the log-intensity panorama.

Arrays are indexed ``[row, column] = [v, u]``. Pixel ``(iu, iv)`` covers the
continuous coordinates ``round(u) == iu`` and ``round(v) == iv``; columns
wrap around in azimuth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ._cg import ConvergenceError, conjugate_gradient

logger = logging.getLogger(__name__)

DEFAULT_MAP_WIDTH = 1024
DEFAULT_MAP_HEIGHT = 512
DEFAULT_VALID_THRESHOLD = 5
MAX_MAP_WIDTH = 4096
MAX_MAP_HEIGHT = 2048


class NoValidPixelsError(ValueError):
    pass


@dataclass
class GradientMap:
    """Two-channel brightness-gradient panorama, ``data[v, u] = (g_x, g_y)``."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ValueError("gradient map data must have shape (H, W, 2)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("gradient map contains non-finite values")

    @classmethod
    def zeros(cls, width, height):
        return cls(np.zeros((height, width, 2)))

    @classmethod
    def from_channels(cls, gx, gy):
        return cls(np.stack([gx, gy], axis=-1))

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def gx(self):
        return self.data[..., 0]

    @property
    def gy(self):
        return self.data[..., 1]

    def copy(self):
        return GradientMap(self.data.copy())

    def masked(self, mask: "ValidMask"):
        out = self.data.copy()
        out[~mask.valid] = 0.0
        return GradientMap(out)


@dataclass
class ValidMask:
    """Per-pixel warped-event counts and the derived set of optimized pixels."""

    counts: np.ndarray
    threshold: int = DEFAULT_VALID_THRESHOLD

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.valid = self.counts > self.threshold
        self.flat_index = np.flatnonzero(self.valid.ravel())
        lookup = np.full(self.counts.size, -1, dtype=np.int64)
        lookup[self.flat_index] = np.arange(self.flat_index.size)
        self._lookup = lookup

    @property
    def n_valid(self):
        return int(self.flat_index.size)

    @property
    def width(self):
        return self.counts.shape[1]

    @property
    def height(self):
        return self.counts.shape[0]

    def valid_index(self, iu, iv):
        """Index into the list of valid pixels, or -1 for invalid pixels."""
        return self._lookup[np.asarray(iv) * self.width + np.asarray(iu)]

    def pixel_of(self, index):
        flat = self.flat_index[np.asarray(index)]
        return flat % self.width, flat // self.width


def build_valid_mask(counts, threshold=DEFAULT_VALID_THRESHOLD):
    """Pixels hit by more than ``threshold`` warped events become unknowns."""
    mask = ValidMask(counts, int(threshold))
    if mask.n_valid == 0:
        raise NoValidPixelsError(
            f"no map pixel received more than {threshold} events; nothing to optimize"
        )
    logger.debug("valid pixels: %d of %d", mask.n_valid, mask.counts.size)
    return mask


def nearest_pixel(p, width, height):
    """Integer pixel ``(iu, iv)`` nearest to map point(s) ``p``; u wraps, v clamps."""
    p = np.asarray(p, dtype=float)
    iu = np.floor(p[..., 0] + 0.5).astype(np.int64) % width
    iv = np.clip(np.floor(p[..., 1] + 0.5).astype(np.int64), 0, height - 1)
    return iu, iv


def sample_gradient_nn(G: GradientMap, p):
    """Gradient stored at the single pixel nearest to ``p``."""
    iu, iv = nearest_pixel(p, G.width, G.height)
    return G.data[iv, iu]


def gradient_hessian_field(G: GradientMap):
    """Central-difference derivative of both channels at every pixel.

    Result ``[v, u]`` is the 2x2 matrix with rows ``(dg_x/du, dg_x/dv)`` and
    ``(dg_y/du, dg_y/dv)``. Differences wrap in u and turn one-sided at the
    first and last rows.
    """
    g = G.data
    d_du = 0.5 * (np.roll(g, -1, axis=1) - np.roll(g, 1, axis=1))
    d_dv = np.empty_like(g)
    if G.height > 2:
        d_dv[1:-1] = 0.5 * (g[2:] - g[:-2])
    d_dv[0] = g[1] - g[0]
    d_dv[-1] = g[-1] - g[-2]
    return np.stack([d_du, d_dv], axis=-1)


def gradient_hessian_nn(G: GradientMap, p, field=None):
    if field is None:
        field = gradient_hessian_field(G)
    iu, iv = nearest_pixel(p, G.width, G.height)
    return field[iv, iu]


# ---------------------------------------------------------------------------
# Poisson reconstruction
# ---------------------------------------------------------------------------


def forward_gradient(M):
    """Forward differences, periodic in u; the last row has zero g_y."""
    M = np.asarray(M, dtype=float)
    gx = np.roll(M, -1, axis=1) - M
    gy = np.zeros_like(M)
    gy[:-1] = M[1:] - M[:-1]
    return gx, gy


def backward_divergence(gx, gy):
    """Negative adjoint of :func:`forward_gradient`."""
    div = gx - np.roll(gx, 1, axis=1)
    div_y = np.zeros_like(gy)
    div_y[0] = gy[0]
    div_y[1:-1] = gy[1:-1] - gy[:-2]
    div_y[-1] = -gy[-2]
    return div + div_y


def laplacian(M):
    """5-point Laplacian, periodic in u and Neumann in v."""
    gx, gy = forward_gradient(M)
    return backward_divergence(gx, gy)


def poisson_reconstruct(G: GradientMap, mask: ValidMask | None = None, rtol=1e-8, maxiter=None):
    """Least-squares log-intensity map whose forward gradient best fits ``G``.

    Solves ``laplacian(M) = div(G)`` by conjugate gradients and removes the
    mean over the valid region (the whole map when ``mask`` is None).
    Pixels outside ``mask`` contribute zero gradient.
    """
    gx, gy = G.gx.copy(), G.gy.copy()
    if mask is not None:
        gx[~mask.valid] = 0.0
        gy[~mask.valid] = 0.0
    rhs = backward_divergence(gx, gy)
    rhs -= rhs.mean()
    if maxiter is None:
        maxiter = 10 * G.width
    shape = rhs.shape

    def apply(x):
        x = x.reshape(shape)
        out = -laplacian(x)
        return out.ravel()

    b = -rhs.ravel()
    if not np.any(b):
        M = np.zeros(shape)
    else:
        x, info = conjugate_gradient(apply, b, rtol=rtol, maxiter=maxiter, project_mean=True)
        if not info.converged:
            raise ConvergenceError(
                f"Poisson CG stopped after {info.iterations} iterations at relative residual "
                f"{info.residual:.3e}",
                info,
            )
        M = x.reshape(shape)
    region = mask.valid if mask is not None and mask.n_valid else np.ones(shape, bool)
    return M - M[region].mean()
