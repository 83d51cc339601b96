"""Preconditioned conjugate gradients for symmetric positive (semi)definite operators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CGInfo:
    converged: bool
    iterations: int
    residual: float  # final relative residual ||b - Ax|| / ||b||


class ConvergenceError(RuntimeError):
    def __init__(self, message, info: CGInfo | None = None):
        super().__init__(message)
        self.info = info


def conjugate_gradient(apply_A, b, rtol=1e-10, maxiter=None, precond=None, x0=None, project_mean=False):
    """Solve ``A x = b``.

    ``precond`` is an array of inverse diagonal entries (Jacobi). With
    ``project_mean`` the constant vector is treated as the null space: the
    right-hand side and iterates are kept mean-free.
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    if maxiter is None:
        maxiter = 10 * n
    if project_mean:
        b = b - b.mean()
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), CGInfo(True, 0, 0.0)
    r = b - apply_A(x) if x0 is not None else b.copy()
    z = r * precond if precond is not None else r
    if project_mean:
        z = z - z.mean()
    d = z.copy()
    rz = float(r @ z)
    res = np.linalg.norm(r) / bnorm
    it = 0
    while res > rtol and it < maxiter:
        Ad = apply_A(d)
        dAd = float(d @ Ad)
        if dAd <= 0.0:
            break
        alpha = rz / dAd
        x += alpha * d
        r -= alpha * Ad
        it += 1
        res = np.linalg.norm(r) / bnorm
        if res <= rtol:
            break
        z = r * precond if precond is not None else r
        if project_mean:
            z = z - z.mean()
        rz_new = float(r @ z)
        d = z + (rz_new / rz) * d
        rz = rz_new
    if project_mean:
        x -= x.mean()
    return x, CGInfo(res <= rtol, it, float(res))
