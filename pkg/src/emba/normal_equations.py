"""Cumulative formation of the partitioned normal equations and their solvers.

The unknowns are ordered ``[alpha | beta]``: three rotation components for
every free control pose followed by two gradient channels for every valid
map pixel. The Jacobian is never materialized; each residual row touches at
most four control poses and exactly one map pixel, so ``A22`` is stored as
``(Np, 2, 2)`` blocks and ``A12`` as a list of keyed 3x2 blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from ._cg import CGInfo, conjugate_gradient

N_SLOTS = 4


class SingularSystemError(np.linalg.LinAlgError):
    pass


class NonFiniteContributionError(FloatingPointError):
    def __init__(self, term_index):
        super().__init__(f"non-finite normal-equation contribution from term {term_index}")
        self.term_index = term_index


@dataclass
class JacobianRows:
    """Per-term Jacobian rows in compact form.

    ``poses[k, s]`` is a control-pose index (-1 for an unused slot) and
    ``pose_blocks[k, s]`` its 1x3 derivative; ``pixel[k]`` is the valid-pixel
    index with 1x2 derivative ``map_block[k]``; ``e[k]`` is the residual.
    """

    poses: np.ndarray
    pose_blocks: np.ndarray
    pixel: np.ndarray
    map_block: np.ndarray
    e: np.ndarray

    def __len__(self):
        return int(self.e.size)

    def subset(self, index):
        return JacobianRows(
            self.poses[index], self.pose_blocks[index], self.pixel[index], self.map_block[index], self.e[index]
        )

    def scaled(self, s):
        return JacobianRows(
            self.poses,
            self.pose_blocks * s[:, None, None],
            self.pixel,
            self.map_block * s[:, None],
            self.e * s,
        )


def merge_duplicate_slots(poses, blocks):
    """Fold repeated pose indices within a row into a single slot (in place).

    Slots are ordered ``(i_k, i_k + 1, i_prev, i_prev + 1)`` with
    ``i_prev <= i_k``, so only three coincidences are possible.
    """
    same = poses[:, 2] == poses[:, 0]
    shifted = (poses[:, 3] == poses[:, 0]) & ~same
    w_same = same[:, None].astype(float)
    w_shift = shifted[:, None].astype(float)
    blocks[:, 0] += w_same * blocks[:, 2] + w_shift * blocks[:, 3]
    blocks[:, 1] += w_same * blocks[:, 3]
    blocks[:, 2] *= 1.0 - w_same
    blocks[:, 3] *= 1.0 - w_same - w_shift
    poses[:, 2] = np.where(same, -1, poses[:, 2])
    poses[:, 3] = np.where(same | shifted, -1, poses[:, 3])
    return poses, blocks


def free_pose_map(n_poses, fixed=(0,)):
    """Map control-pose index -> position in ``alpha`` (-1 for gauge-fixed poses)."""
    out = np.full(n_poses + 1, -1, dtype=np.int64)  # trailing entry absorbs slot index -1
    free = [i for i in range(n_poses) if i not in set(fixed)]
    out[free] = np.arange(len(free))
    return out


@dataclass
class NormalEquations:
    A11: np.ndarray  # (3 Nf, 3 Nf)
    a12_keys: np.ndarray  # (M, 2) rows of (free pose, valid pixel), sorted
    a12_blocks: np.ndarray  # (M, 3, 2)
    A22: np.ndarray  # (Np, 2, 2)
    b1: np.ndarray  # (3 Nf,)
    b2: np.ndarray  # (2 Np,)

    @property
    def n_free_poses(self):
        return self.A11.shape[0] // 3

    @property
    def n_pixels(self):
        return self.A22.shape[0]

    @property
    def size(self):
        return self.A11.shape[0] + 2 * self.n_pixels

    def copy(self):
        return NormalEquations(
            self.A11.copy(), self.a12_keys.copy(), self.a12_blocks.copy(), self.A22.copy(), self.b1.copy(), self.b2.copy()
        )

    def a12_block(self, pose, pixel):
        """The 3x2 coupling block for (free pose, valid pixel); zeros if absent."""
        key = np.array([pose, pixel])
        hit = np.flatnonzero(np.all(self.a12_keys == key, axis=1))
        return self.a12_blocks[hit[0]].copy() if hit.size else np.zeros((3, 2))

    def a12_sparse(self):
        """``A12`` as a CSR matrix of shape (3 Nf, 2 Np)."""
        if len(self.a12_keys) == 0:
            return sp.csr_matrix((self.A11.shape[0], 2 * self.n_pixels))
        f = self.a12_keys[:, 0]
        q = self.a12_keys[:, 1]
        rows = (3 * f[:, None, None] + np.arange(3)[None, :, None]) + np.zeros((1, 1, 2), dtype=np.int64)
        cols = (2 * q[:, None, None] + np.arange(2)[None, None, :]) + np.zeros((1, 3, 1), dtype=np.int64)
        return sp.csr_matrix(
            (self.a12_blocks.ravel(), (rows.ravel(), cols.ravel())),
            shape=(self.A11.shape[0], 2 * self.n_pixels),
        )

    def a22_sparse(self):
        n = self.n_pixels
        idx = np.arange(n)
        rows = (2 * idx[:, None, None] + np.arange(2)[None, :, None]) + np.zeros((1, 1, 2), dtype=np.int64)
        cols = (2 * idx[:, None, None] + np.arange(2)[None, None, :]) + np.zeros((1, 2, 1), dtype=np.int64)
        return sp.csr_matrix((self.A22.ravel(), (rows.ravel(), cols.ravel())), shape=(2 * n, 2 * n))

    def dense(self):
        """Full ``A`` and ``b`` as dense arrays (small instances only)."""
        n1 = self.A11.shape[0]
        A = np.zeros((self.size, self.size))
        A[:n1, :n1] = self.A11
        A12 = self.a12_sparse().toarray()
        A[:n1, n1:] = A12
        A[n1:, :n1] = A12.T
        A[n1:, n1:] = self.a22_sparse().toarray()
        return A, np.concatenate([self.b1, self.b2])

    def matvec(self, x, damping=0.0):
        n1 = self.A11.shape[0]
        x1, x2 = x[:n1], x[n1:]
        A12 = self.a12_sparse()
        y1 = self.A11 @ x1 + A12 @ x2
        y2 = A12.T @ x1 + np.einsum("nij,nj->ni", self.A22, x2.reshape(-1, 2)).ravel()
        return np.concatenate([y1, y2]) + damping * x


def _group_starts(keys):
    """Sort order of ``keys`` and the start/end offsets of each run of equal keys."""
    order = np.argsort(keys, kind="stable")
    k = keys[order]
    starts = np.flatnonzero(np.r_[True, k[1:] != k[:-1]]) if k.size else np.zeros(0, np.int64)
    ends = np.r_[starts[1:], k.size].astype(np.int64)
    return order, starts, ends


def accumulate(rows: JacobianRows, n_poses, n_pixels, fixed=(0,)):
    """Form ``A = sum_k r_k r_k^T`` and ``b = -sum_k r_k e_k`` block by block."""
    finite = (
        np.isfinite(rows.e)
        & np.all(np.isfinite(rows.map_block), axis=1)
        & np.all(np.isfinite(rows.pose_blocks), axis=(1, 2))
    )
    if not np.all(finite):
        raise NonFiniteContributionError(int(np.flatnonzero(~finite)[0]))

    fmap = free_pose_map(n_poses, fixed)
    nf = int(np.count_nonzero(fmap >= 0))
    n = len(rows)
    free = fmap[rows.poses]  # (N, 4), -1 where unused or fixed
    used = free >= 0
    blocks = np.where(used[:, :, None], rows.pose_blocks, 0.0)
    e = rows.e
    pix = rows.pixel
    m = rows.map_block

    # A11 and b1: rows with the same free slots hit the same blocks, so each
    # group reduces to one small matrix product.
    base = nf + 1
    sig = free[:, 0] + 1
    for s in range(1, N_SLOTS):
        sig = sig * base + free[:, s] + 1
    order, starts, ends = _group_starts(sig)
    R = blocks.reshape(n, 3 * N_SLOTS)[order]
    e_sorted = e[order]
    S = np.empty((len(starts), 3 * N_SLOTS, 3 * N_SLOTS))
    v = np.empty((len(starts), 3 * N_SLOTS))
    for g, (s0, s1) in enumerate(zip(starts, ends)):
        Rg = R[s0:s1]
        S[g] = Rg.T @ Rg
        v[g] = Rg.T @ e_sorted[s0:s1]
    S = S.reshape(-1, N_SLOTS, 3, N_SLOTS, 3)
    v = v.reshape(-1, N_SLOTS, 3)
    slots = free[order[starts]]
    A11 = np.zeros((nf * nf, 3, 3))
    b1 = np.zeros((nf, 3))
    for a in range(N_SLOTS):
        ga = slots[:, a] >= 0
        np.subtract.at(b1, slots[ga, a], v[ga, a])
        for b in range(N_SLOTS):
            gab = ga & (slots[:, b] >= 0)
            np.add.at(A11, slots[gab, a] * nf + slots[gab, b], S[gab, a, :, b, :])
    A11 = A11.reshape(nf, nf, 3, 3).transpose(0, 2, 1, 3).reshape(3 * nf, 3 * nf)

    # A12 = J_alpha^T J_beta, read back as keyed 3x2 blocks
    # both Jacobians are assembled directly in CSR layout, one row per term
    keep = np.repeat(used, 3, axis=1).ravel()
    J_alpha = sp.csr_matrix(
        (
            blocks.reshape(-1)[keep],
            (3 * free[:, :, None] + np.arange(3)).reshape(-1)[keep],
            np.r_[0, np.cumsum(3 * np.count_nonzero(used, axis=1))],
        ),
        shape=(n, 3 * nf),
    )
    J_beta = sp.csr_matrix(
        (m.ravel(), (2 * pix[:, None] + np.arange(2)).ravel(), np.arange(0, 2 * n + 1, 2)),
        shape=(n, 2 * n_pixels),
    )
    if nf and n_pixels:
        C = (J_alpha.T.tocsr() @ J_beta).tobsr(blocksize=(3, 2))
        C.sort_indices()
        a12_keys = np.stack([np.repeat(np.arange(nf), np.diff(C.indptr)), C.indices.astype(np.int64)], axis=1)
        a12_blocks = np.array(C.data, dtype=float).reshape(-1, 3, 2)
    else:
        a12_keys = np.zeros((0, 2), np.int64)
        a12_blocks = np.zeros((0, 3, 2))

    A22 = np.empty((n_pixels, 2, 2))
    A22[:, 0, 0] = np.bincount(pix, weights=m[:, 0] * m[:, 0], minlength=n_pixels)
    A22[:, 1, 1] = np.bincount(pix, weights=m[:, 1] * m[:, 1], minlength=n_pixels)
    A22[:, 0, 1] = np.bincount(pix, weights=m[:, 0] * m[:, 1], minlength=n_pixels)
    A22[:, 1, 0] = A22[:, 0, 1]
    b2 = np.stack([-np.bincount(pix, weights=m[:, i] * e, minlength=n_pixels) for i in range(2)], axis=1)
    return NormalEquations(A11, a12_keys, a12_blocks, A22, b1.ravel(), b2.ravel())


def merge(parts):
    """Block-wise sum of normal equations built over disjoint term ranges."""
    parts = list(parts)
    first = parts[0]
    n_pixels = first.n_pixels
    A11 = sum((p.A11 for p in parts[1:]), first.A11.copy())
    A22 = sum((p.A22 for p in parts[1:]), first.A22.copy())
    b1 = sum((p.b1 for p in parts[1:]), first.b1.copy())
    b2 = sum((p.b2 for p in parts[1:]), first.b2.copy())
    keys = np.concatenate([p.a12_keys[:, 0] * n_pixels + p.a12_keys[:, 1] for p in parts])
    blocks = np.concatenate([p.a12_blocks for p in parts])
    uniq, inverse = np.unique(keys, return_inverse=True)
    a12 = np.zeros((uniq.size, 3, 2))
    np.add.at(a12, inverse, blocks)
    a12_keys = np.stack([uniq // n_pixels, uniq % n_pixels], axis=1) if uniq.size else np.zeros((0, 2), np.int64)
    return NormalEquations(A11, a12_keys, a12, A22, b1, b2)


def apply_regularization(ne: NormalEquations, eta, g_valid):
    """Add the ``eta ||beta||^2`` prior: ``A22 += eta I`` and ``b2 -= eta beta_op``.

    ``g_valid`` holds the operating-point gradients of the valid pixels, (Np, 2).
    Invalid pixels are not unknowns: their prior-only update is ``-beta_op``,
    which keeps them at zero.
    """
    if eta < 0:
        raise ValueError("regularization weight must be non-negative")
    out = ne.copy()
    if eta == 0:
        return out
    out.A22[:, 0, 0] += eta
    out.A22[:, 1, 1] += eta
    out.b2 -= eta * np.asarray(g_valid, dtype=float).ravel()
    return out


def _invert_2x2(blocks):
    a, b = blocks[:, 0, 0], blocks[:, 0, 1]
    c, d = blocks[:, 1, 0], blocks[:, 1, 1]
    det = a * d - b * c
    scale = np.maximum(np.abs(blocks).reshape(len(blocks), -1).max(axis=1), 1e-300)
    if np.any(np.abs(det) <= 1e-12 * scale * scale):
        raise SingularSystemError("singular 2x2 map block")
    inv = np.empty_like(blocks)
    inv[:, 0, 0] = d / det
    inv[:, 0, 1] = -b / det
    inv[:, 1, 0] = -c / det
    inv[:, 1, 1] = a / det
    return inv


def _block_diag_sparse(blocks):
    n = len(blocks)
    idx = np.arange(n)
    rows = (2 * idx[:, None, None] + np.arange(2)[None, :, None]) + np.zeros((1, 1, 2), dtype=np.int64)
    cols = (2 * idx[:, None, None] + np.arange(2)[None, None, :]) + np.zeros((1, 2, 1), dtype=np.int64)
    return sp.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(2 * n, 2 * n))


# Above this many entries the coupling block is not densified.
DENSE_SCHUR_LIMIT = 2e7


def _dense_schur_product(ne: NormalEquations, Dinv):
    """``A12 A22^-1 A12^T`` through ``Z Z^T`` with ``Z = A12 L`` and ``A22^-1 = L L^T`` per block."""
    nf, n_pixels = ne.n_free_poses, ne.n_pixels
    D = np.zeros((nf, n_pixels, 3, 2))
    D[ne.a12_keys[:, 0], ne.a12_keys[:, 1]] = ne.a12_blocks
    D = D.transpose(0, 2, 1, 3).reshape(3 * nf, n_pixels, 2)
    l00 = np.sqrt(Dinv[:, 0, 0])
    l10 = Dinv[:, 1, 0] / l00
    l11 = np.sqrt(np.maximum(Dinv[:, 1, 1] - l10 * l10, 0.0))
    Z = np.empty_like(D)
    Z[:, :, 0] = D[:, :, 0] * l00 + D[:, :, 1] * l10
    Z[:, :, 1] = D[:, :, 1] * l11
    Z = Z.reshape(3 * nf, -1)
    return Z @ Z.T


def schur_solve(ne: NormalEquations, damping=0.0):
    """Eliminate the block-diagonal map part and solve the reduced pose system.

    ``damping`` is added to every diagonal entry of ``A``.
    """
    n1 = ne.A11.shape[0]
    A22 = ne.A22.copy()
    A22[:, 0, 0] += damping
    A22[:, 1, 1] += damping
    Dinv = _invert_2x2(A22)
    if n1 == 0:
        return np.zeros(0), np.einsum("nij,nj->ni", Dinv, ne.b2.reshape(-1, 2)).ravel()
    A12 = ne.a12_sparse()
    if n1 * 2 * ne.n_pixels <= DENSE_SCHUR_LIMIT:
        S = ne.A11 + damping * np.eye(n1) - _dense_schur_product(ne, Dinv)
    else:
        Y = A12 @ _block_diag_sparse(Dinv)  # A12 A22^-1
        S = ne.A11 + damping * np.eye(n1) - (Y @ A12.T).toarray()
    S = 0.5 * (S + S.T)
    rhs = ne.b1 - A12 @ np.einsum("nij,nj->ni", Dinv, ne.b2.reshape(-1, 2)).ravel()
    try:
        c, low = scipy.linalg.cho_factor(S, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"reduced pose system is not positive definite: {exc}") from None
    piv = np.diag(c) ** 2
    if piv.min() <= 1e-12 * max(piv.max(), 1e-300):
        raise SingularSystemError(f"reduced pose system pivot {piv.min():.3e} is numerically zero")
    d_alpha = scipy.linalg.cho_solve((c, low), rhs)
    r2 = ne.b2 - A12.T @ d_alpha
    d_beta = np.einsum("nij,nj->ni", Dinv, r2.reshape(-1, 2)).ravel()
    return d_alpha, d_beta


def dense_solve(ne: NormalEquations, damping=0.0):
    """Reference solver on the fully assembled system."""
    A, b = ne.dense()
    A[np.diag_indices_from(A)] += damping
    try:
        x = scipy.linalg.solve(A, b, assume_a="sym")
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from None
    n1 = ne.A11.shape[0]
    return x[:n1], x[n1:]


def cg_solve(ne: NormalEquations, damping=0.0, rtol=1e-10, maxiter=None, return_info=False):
    """Jacobi-preconditioned conjugate gradients on the full damped system."""
    n1 = ne.A11.shape[0]
    A12 = ne.a12_sparse()
    A12T = A12.T.tocsr()
    A22 = ne.A22

    def apply(x):
        x1, x2 = x[:n1], x[n1:]
        y1 = ne.A11 @ x1 + A12 @ x2
        y2 = A12T @ x1 + np.einsum("nij,nj->ni", A22, x2.reshape(-1, 2)).ravel()
        return np.concatenate([y1, y2]) + damping * x

    diag = np.concatenate([np.diag(ne.A11), A22[:, [0, 1], [0, 1]].ravel()]) + damping
    if np.any(diag <= 0):
        raise SingularSystemError("non-positive diagonal entry in damped system")
    b = np.concatenate([ne.b1, ne.b2])
    if maxiter is None:
        maxiter = 10 * b.size
    x, info = conjugate_gradient(apply, b, rtol=rtol, maxiter=maxiter, precond=1.0 / diag)
    if return_info:
        return x[:n1], x[n1:], info
    return x[:n1], x[n1:]


SOLVERS = {"schur": schur_solve, "cg": cg_solve, "dense": dense_solve}


def huber_weights(e, delta):
    """IRLS weights ``w`` such that ``sum w e^2`` is the Gauss-Newton surrogate of the Huber loss."""
    if not delta > 0:
        raise ValueError("Huber threshold must be positive")
    a = np.abs(e)
    return np.where(a < delta, 1.0, delta / np.maximum(a, 1e-300))


def huber_loss(e, delta):
    a = np.abs(e)
    return np.where(a < delta, a * a, (2.0 * a - delta) * delta)


def huber_reweight(rows: JacobianRows, delta):
    return rows.scaled(np.sqrt(huber_weights(rows.e, delta)))


__all__ = [
    "CGInfo",
    "JacobianRows",
    "NormalEquations",
    "NonFiniteContributionError",
    "SingularSystemError",
    "accumulate",
    "apply_regularization",
    "cg_solve",
    "dense_solve",
    "free_pose_map",
    "huber_loss",
    "huber_reweight",
    "huber_weights",
    "merge",
    "merge_duplicate_slots",
    "schur_solve",
]
