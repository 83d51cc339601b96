"""Continuous-time rotation trajectory over fixed-rate control poses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation as _ScipyRotation

from .geometry import exp_so3, hat, is_rotation, left_jacobian_inv, log_so3

DEFAULT_POSE_RATE = 20.0  # Hz


class TrajectorySpanError(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    """Control poses ``R_i`` at ``t0 + i / rate``, geodesically interpolated.

    Indices are zero-based. Rotations map camera bearings to the panorama
    (world) frame.
    """

    t0: float
    rate: float
    poses: np.ndarray

    def __post_init__(self):
        poses = np.array(self.poses, dtype=float)
        if poses.ndim != 3 or poses.shape[1:] != (3, 3):
            raise ValueError("poses must have shape (N, 3, 3)")
        if poses.shape[0] < 2:
            raise ValueError("a trajectory needs at least two control poses")
        if not self.rate > 0:
            raise ValueError("pose rate must be positive")
        if not is_rotation(poses, tol=1e-9):
            raise ValueError("control poses must be rotation matrices")
        poses.setflags(write=False)
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "rate", float(self.rate))

    @property
    def n_poses(self):
        return self.poses.shape[0]

    @property
    def times(self):
        return self.t0 + np.arange(self.n_poses) / self.rate

    @property
    def t_end(self):
        return self.t0 + (self.n_poses - 1) / self.rate

    def contains(self, t):
        t = np.asarray(t, dtype=float)
        return (t >= self.t0) & (t <= self.t_end)

    def interp_weights(self, t):
        """Segment index ``i`` and fraction ``tau`` with ``t = t_i + tau / rate``."""
        t = np.asarray(t, dtype=float)
        if not np.all(self.contains(t)):
            raise TrajectorySpanError(
                f"time outside trajectory span [{self.t0}, {self.t_end}]"
            )
        s = (t - self.t0) * self.rate
        # knot times land exactly on their index despite rounding in t0 + i / rate
        r = np.round(s)
        s = np.where(np.abs(s - r) <= 1e-12 * np.maximum(1.0, np.abs(s)), r, s)
        i =np.minimum(np.floor(s).astype(np.int64), self.n_poses - 2)
        tau = s - i
        if i.ndim == 0:
            return int(i), float(tau)
        return i, tau

    def segment_logs(self):
        """``log(R_i^T R_{i+1})`` for every segment, shape (N-1, 3)."""
        rel = np.swapaxes(self.poses[:-1], -1, -2) @ self.poses[1:]
        return log_so3(rel)

    def interpolate(self, t, segment_logs=None):
        """Orientation(s) at time(s) ``t``: ``R_i exp(tau log(R_i^T R_{i+1}))``."""
        i, tau = self.interp_weights(t)
        if segment_logs is None:
            segment_logs = self.segment_logs()
        phi = segment_logs[i] * np.asarray(tau)[..., None]
        return self.poses[i] @ exp_so3(phi)

    def rotate(self, i, tau, f, segment_logs=None):
        """``R(t) f`` for known segment indices.

        With ``K = hat(log(R_i^T R_{i+1}))`` Rodrigues gives
        ``R_i exp(tau K) f = R_i f + s1 R_i K f + s2 R_i K^2 f``; the three
        per-segment matrices are applied run by run.
        """
        if segment_logs is None:
            segment_logs = self.segment_logs()
        i = np.asarray(i)
        tau = np.asarray(tau, dtype=float)
        f = np.asarray(f, dtype=float)
        if i.ndim == 0:
            return self.rotate(i[None], tau[None], f[None], segment_logs)[0]
        theta = np.linalg.norm(segment_logs, axis=-1)[i]
        small = theta < 1e-8
        safe = np.where(small, 1.0, theta)
        s1 = np.where(small, tau, np.sin(tau * safe) / safe)
        s2 = np.where(small, 0.5 * tau * tau, (1.0 - np.cos(tau * safe)) / (safe * safe))
        K = hat(segment_logs)
        RK = self.poses[:-1] @ K
        mats = np.stack([self.poses[:-1], RK, RK @ K])  # (3, N-1, 3, 3)
        F = _apply_per_segment(i, f, np.swapaxes(mats, -1, -2))
        return F[0] + s1[:, None] * F[1] + s2[:, None] * F[2]

    def pose_perturbation_jacobian(self, t, linear=False, segment_logs=None):
        """How left perturbations of the two neighbouring control poses move ``R(t)``.

        Returns ``(i, A_i, A_next)`` with ``dphi(t) = A_i dphi_i + A_next dphi_{i+1}``.
        With ``linear=True`` the 3x3 blocks are ``(1 - tau) I`` and ``tau I``.
        Otherwise they are the exact first-order blocks of geodesic
        interpolation, which reduce to the linear weights as the segment
        rotation goes to zero and always sum to the identity.
        """
        i, tau = self.interp_weights(t)
        A_i, A_next = self.perturbation_blocks(i, tau, linear=linear, segment_logs=segment_logs)
        return i, A_i, A_next

    def perturbation_blocks(self, i, tau, linear=False, segment_logs=None):
        """Blocks of :meth:`pose_perturbation_jacobian` for known segment indices."""
        tau_arr = np.asarray(tau, dtype=float)
        eye = np.eye(3)
        if linear:
            A_next = tau_arr[..., None, None] * eye
            return eye - A_next, A_next
        if segment_logs is None:
            segment_logs = self.segment_logs()
        # J_l(tau phi) = I + a tau K + b tau^2 K^2 with K = phi^, so the
        # per-term block is a scalar combination of three per-segment matrices.
        P = _segment_perturbation_basis(self.poses[:-1], segment_logs)[:, i]
        theta = np.linalg.norm(segment_logs[i], axis=-1)
        a, b = _left_jacobian_coeffs(tau_arr * theta)
        t = tau_arr[..., None, None]
        A_next = t * (P[0] + (a * tau_arr)[..., None, None] * P[1] + (b * tau_arr**2)[..., None, None] * P[2])
        return eye - A_next, A_next

    def apply_perturbation_blocks(self, i, tau, r, linear=False, segment_logs=None):
        """Row vectors ``r A_i`` and ``r A_next`` for (N, 3) ``r``, without forming the blocks."""
        tau = np.asarray(tau, dtype=float)
        r = np.asarray(r, dtype=float)
        if linear:
            r_next = tau[:, None] * r
            return r - r_next, r_next
        if segment_logs is None:
            segment_logs = self.segment_logs()
        P = _segment_perturbation_basis(self.poses[:-1], segment_logs)
        theta = np.linalg.norm(segment_logs, axis=-1)[i]
        a, b = _left_jacobian_coeffs(tau * theta)
        F = _apply_per_segment(i, r, P)  # r P_j for j = 0, 1, 2
        r_next = tau[:, None] * (F[0] + (a * tau)[:, None] * F[1] + (b * tau * tau)[:, None] * F[2])
        return r - r_next, r_next

    def apply_update(self, delta, fixed=(0,)):
        """Left-multiply each control pose by ``exp`` of its 3-vector slice.

        Poses listed in ``fixed`` are copied through untouched.
        """
        delta = np.asarray(delta, dtype=float).reshape(-1)
        if delta.size != 3 * self.n_poses:
            raise ValueError(f"update must have {3 * self.n_poses} entries")
        if not np.all(np.isfinite(delta)):
            raise ValueError("non-finite trajectory update")
        steps = exp_so3(delta.reshape(-1, 3))
        poses = steps @ self.poses
        for k in fixed:
            poses[k] = self.poses[k]
        return Trajectory(self.t0, self.rate, poses)

    def left_multiply(self, R):
        return Trajectory(self.t0, self.rate, np.asarray(R) @ self.poses)

    @classmethod
    def from_samples(cls, times, rotations, rate=DEFAULT_POSE_RATE, t0=None, t_end=None):
        """Resample arbitrary timestamped rotations on a uniform grid at ``rate``."""
        times = np.asarray(times, dtype=float)
        rotations = np.asarray(rotations, dtype=float)
        if times.ndim != 1 or len(times) < 2:
            raise ValueError("need at least two samples")
        if np.any(np.diff(times) <= 0):
            raise ValueError("sample timestamps must be strictly increasing")
        t0 = times[0] if t0 is None else float(t0)
        t_end = times[-1] if t_end is None else float(t_end)
        n = int(np.floor((t_end - t0) * rate + 1e-9)) + 1
        if n < 2:
            raise ValueError("resampled trajectory would have fewer than two poses")
        grid = t0 + np.arange(n) / rate
        src = _IrregularTrajectory(times, rotations)
        return cls(t0, rate, src.interpolate(grid))


def _apply_per_segment(i, x, mats):
    """``x[k] @ mats[j, i[k]]`` for every j, as one matrix product per run of equal ``i``.

    ``x`` is (N, 3) and ``mats`` (J, S, 3, 3); returns (J, N, 3).
    """
    i = np.asarray(i)
    J, S = mats.shape[:2]
    out = np.empty((i.size, 3 * J))
    if i.size == 0:
        return np.moveaxis(out.reshape(-1, J, 3), 1, 0)
    # the J matrices of a segment side by side, so each run is a single product
    M = mats.transpose(1, 2, 0, 3).reshape(S, 3, 3 * J)
    if np.all(i[1:] >= i[:-1]):
        order = None
        keys, xs, res = i, x, out
    else:
        # a small key range lets the stable sort use radix sort
        order = np.argsort(i.astype(np.int16) if S < 2**15 else i, kind="stable")
        keys, xs = i[order], x[order]
        res = np.empty_like(out)
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    ends = np.r_[starts[1:], keys.size]
    for a, b in zip(starts, ends):
        np.matmul(xs[a:b], M[keys[a]], out=res[a:b])
    if order is not None:
        out[order] = res
    return np.moveaxis(out.reshape(-1, J, 3), 1, 0)


def _segment_perturbation_basis(R, segment_logs):
    """``R K^j J_l^-1(phi) R^T`` for j = 0, 1, 2 and every segment, shape (3, N-1, 3, 3)."""
    K = hat(segment_logs)
    right = left_jacobian_inv(segment_logs) @ np.swapaxes(R, -1, -2)
    P0 = R @ right
    P1 = R @ K @ right
    P2 = R @ K @ K @ right
    return np.stack([P0, P1, P2])


def _left_jacobian_coeffs(theta):
    """Scalars ``(1 - cos t) / t^2`` and ``(t - sin t) / t^3``, series-expanded near 0."""
    theta = np.asarray(theta, dtype=float)
    t2 = theta * theta
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    b = np.where(small, 1.0 / 6.0 - t2 / 120.0, (safe - np.sin(safe)) / safe**3)
    return a, b


class _IrregularTrajectory:
    """Geodesic interpolation over arbitrary sample times."""

    def __init__(self, times, rotations):
        self.times = times
        self.poses = rotations
        rel = np.swapaxes(rotations[:-1], -1, -2) @ rotations[1:]
        self.logs = log_so3(rel)

    def interpolate(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < self.times[0] - 1e-12) or np.any(t > self.times[-1] + 1e-12):
            raise TrajectorySpanError("resampling grid exceeds the sample span")
        i = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        tau = np.clip((t - self.times[i]) / (self.times[i + 1] - self.times[i]), 0.0, 1.0)
        return self.poses[i] @ exp_so3(self.logs[i] * tau[..., None])


def rotations_to_quaternions(R):
    """Unit quaternions ``(w, x, y, z)`` with non-negative ``w``."""
    q = _ScipyRotation.from_matrix(np.asarray(R)).as_quat()  # x, y, z, w
    q = np.concatenate([q[..., 3:], q[..., :3]], axis=-1)
    return np.where(q[..., :1] < 0, -q, q)


def quaternions_to_rotations(q):
    q = np.asarray(q, dtype=float)
    return _ScipyRotation.from_quat(np.concatenate([q[..., 1:], q[..., :1]], axis=-1)).as_matrix()


def read_trajectory_samples(path):
    """Parse ``t qw qx qy qz`` lines; returns (times, rotations)."""
    times, quats = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 't qw qx qy qz'")
            vals = [float(s) for s in parts]
            q = np.array(vals[1:])
            norm = np.linalg.norm(q)
            if abs(norm - 1.0) > 1e-3:
                raise ValueError(f"{path}:{lineno}: quaternion norm {norm:.6f} is not unit")
            times.append(vals[0])
            quats.append(q / norm)
    if len(times) < 2:
        raise ValueError(f"{path}: need at least two poses")
    return np.array(times), quaternions_to_rotations(np.array(quats))


def read_trajectory(path, rate=None):
    """Load a trajectory file.

    Samples already on a uniform grid at ``rate`` (or at their own rate when
    ``rate`` is None) are taken as control poses; otherwise they are
    resampled with geodesic interpolation.
    """
    times, rotations = read_trajectory_samples(path)
    steps = np.diff(times)
    own_rate = 1.0 / np.mean(steps)
    uniform = np.allclose(steps, steps[0], rtol=1e-6, atol=1e-9)
    if rate is None:
        if not uniform:
            raise ValueError(f"{path}: non-uniform samples need an explicit pose rate")
        rate = own_rate
    if uniform and abs(own_rate - rate) <= 1e-6 * rate:
        return Trajectory(times[0], rate, rotations)
    return Trajectory.from_samples(times, rotations, rate=rate)


def write_trajectory(path, traj: Trajectory):
    q = rotations_to_quaternions(traj.poses)
    with open(path, "w") as fh:
        fh.write("# t qw qx qy qz\n")
        for t, qq in zip(traj.times, q):
            fh.write(f"{t:.9f} {qq[0]:.17g} {qq[1]:.17g} {qq[2]:.17g} {qq[3]:.17g}\n")
