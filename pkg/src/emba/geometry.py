"""SO(3) algebra, pinhole camera model and equirectangular panorama projection.

Every function accepts either a single vector / matrix or a stack of them
(leading batch dimensions), so the solver can warp millions of events with a
handful of array operations.

Panorama convention: azimuth is measured from +z toward +x and mapped to
``u in [0, W)``; elevation ``asin(z_y / |z|)`` is mapped to ``v in [0, H]``
so that camera-down (+y) lands at the bottom row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this angle exp/log switch to Taylor expansions.
SMALL_ANGLE = 1e-8
# Bearings with |z_y|/|z| above 1 - POLE_GUARD are too close to a pole.
POLE_GUARD = 1e-9


def hat(v):
    """Skew-symmetric matrix such that ``hat(v) @ w == cross(v, w)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m):
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def exp_so3(omega):
    """Rodrigues' formula. ``omega`` has shape (..., 3), result (..., 3, 3)."""
    omega = np.asarray(omega, dtype=float)
    theta2 = np.sum(omega * omega, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = hat(omega)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def log_so3(R):
    """Rotation vector of ``R`` with norm in [0, pi]."""
    R = np.asarray(R, dtype=float)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    out = np.empty((R.shape[0], 3))

    tr = np.trace(R, axis1=1, axis2=2)
    cos_t = np.clip(0.5 * (tr - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_t)
    w = vee(R - np.transpose(R, (0, 2, 1))) * 0.5  # sin(theta) * axis
    sin_t = np.linalg.norm(w, axis=1)

    # Near pi sin(theta) loses the axis; recover it from the symmetric part.
    near_pi = cos_t < -0.99
    regular = ~near_pi
    small = regular & (theta < 1e-6)
    generic = regular & ~small
    out[small] = w[small] * (1.0 + theta[small] ** 2 / 6.0)[:, None]
    theta_g = np.arctan2(sin_t[generic], cos_t[generic])
    out[generic] = w[generic] * (theta_g / sin_t[generic])[:, None]

    for n in np.flatnonzero(near_pi):
        Rn = R[n]
        th = np.arctan2(sin_t[n], cos_t[n])
        # R + R^T = 2 cos I + 2 (1 - cos) a a^T
        S = 0.5 * (Rn + Rn.T) - cos_t[n] * np.eye(3)
        k = int(np.argmax(np.diag(S)))
        axis = S[:, k] / np.sqrt(max(S[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if np.dot(axis, w[n]) < 0.0:
            axis = -axis
        out[n] = axis * th
    return out.reshape(batch + (3,))


def left_jacobian(phi):
    """Left Jacobian of SO(3): exp((phi + d)^) ~= exp((J_l d)^) exp(phi^)."""
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    b = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (safe - np.sin(safe)) / safe**3)
    K = hat(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    half = 0.5 * safe
    c = np.where(
        small,
        1.0 / 12.0 + theta2 / 720.0,
        (1.0 - half * np.cos(half) / np.sin(half)) / (safe * safe),
    )
    K = hat(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - 0.5 * K + c[..., None, None] * (K @ K)


def rotation_angle(R):
    """Geodesic angle of a rotation, radians."""
    return np.linalg.norm(log_so3(R), axis=-1)


def is_rotation(R, tol=1e-12):
    R = np.asarray(R, dtype=float)
    eye = np.eye(3)
    orth = np.abs(R @ np.swapaxes(R, -1, -2) - eye).max() <= tol
    return bool(orth and np.all(np.abs(np.linalg.det(R) - 1.0) <= tol))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus the sensor size in pixels."""

    K: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.array(self.K, dtype=float)
        if K.shape != (3, 3):
            raise ValueError("intrinsic matrix must be 3x3")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if abs(np.linalg.det(K)) < 1e-12:
            raise ValueError("intrinsic matrix is singular")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("sensor size must be positive")
        K.setflags(write=False)
        object.__setattr__(self, "K", K)
        Kinv = np.linalg.inv(K)
        Kinv.setflags(write=False)
        object.__setattr__(self, "_Kinv", Kinv)

    @classmethod
    def from_fov(cls, width, height, hfov_deg):
        f = 0.5 * width / np.tan(0.5 * np.deg2rad(hfov_deg))
        K = [[f, 0.0, 0.5 * (width - 1)], [0.0, f, 0.5 * (height - 1)], [0.0, 0.0, 1.0]]
        return cls(np.array(K), int(width), int(height))

    @property
    def K_inv(self):
        return self._Kinv

    @property
    def fx(self):
        return float(self.K[0, 0])

    @property
    def fy(self):
        return float(self.K[1, 1])

    @property
    def cx(self):
        return float(self.K[0, 2])

    @property
    def cy(self):
        return float(self.K[1, 2])

    def all_pixel_bearings(self):
        """Bearings of every sensor pixel, shape (height, width, 3)."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        return pixel_bearing(np.stack([xs, ys], axis=-1), self)


def pixel_bearing(x, cam: CameraModel):
    """Unnormalized bearing ``K^-1 (x, y, 1)`` of a pixel (or stack of pixels)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 2:
        raise ValueError("pixel coordinates must have a trailing dimension of 2")
    inside = (
        (x[..., 0] >= 0)
        & (x[..., 0] <= cam.width - 1)
        & (x[..., 1] >= 0)
        & (x[..., 1] <= cam.height - 1)
    )
    if not np.all(inside):
        raise ValueError(f"pixel outside the {cam.width}x{cam.height} sensor")
    xh = np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)
    return xh @ cam.K_inv.T


def _check_bearing(z):
    norm = np.linalg.norm(z, axis=-1)
    if np.any(norm <= 0.0) or not np.all(np.isfinite(norm)):
        raise ValueError("bearing must have positive finite norm")
    return norm


def project_equirect(z, width, height):
    """Map bearing(s) to continuous panorama coordinates ``(u, v)``."""
    z = np.asarray(z, dtype=float)
    norm = _check_bearing(z)
    u = (np.arctan2(z[..., 0], z[..., 2]) / (2.0 * np.pi) + 0.5) * width
    u = np.where(u >= width, u - width, u)
    s = np.clip(z[..., 1] / norm, -1.0, 1.0)
    v = (np.arcsin(s) / np.pi + 0.5) * height
    return np.stack([u, v], axis=-1)


def unproject_equirect(p, width, height):
    """Unit bearing for panorama point(s); inverse of :func:`project_equirect`."""
    p = np.asarray(p, dtype=float)
    az = (p[..., 0] / width - 0.5) * 2.0 * np.pi
    el = (p[..., 1] / height - 0.5) * np.pi
    c = np.cos(el)
    return np.stack([c * np.sin(az), np.sin(el), c * np.cos(az)], axis=-1)


def near_pole(z):
    z = np.asarray(z, dtype=float)
    return np.abs(z[..., 1]) / np.linalg.norm(z, axis=-1) >= 1.0 - POLE_GUARD


def jac_equirect(z, width, height):
    """Jacobian d(u, v)/dz of :func:`project_equirect`, shape (..., 2, 3)."""
    z = np.asarray(z, dtype=float)
    _check_bearing(z)
    if np.any(near_pole(z)):
        raise ValueError("bearing too close to a pole; projection Jacobian is singular")
    return _jac_equirect_unchecked(z, width, height)


def _jac_equirect_unchecked(z, width, height):
    zx, zy, zz = z[..., 0], z[..., 1], z[..., 2]
    rho2 = zx * zx + zz * zz
    rho = np.sqrt(rho2)
    r2 = rho2 + zy * zy
    J = np.zeros(z.shape[:-1] + (2, 3))
    ku = width / (2.0 * np.pi)
    J[..., 0, 0] = ku * zz / rho2
    J[..., 0, 2] = -ku * zx / rho2
    kv = height / np.pi
    J[..., 1, 0] = -kv * zy * zx / (rho * r2)
    J[..., 1, 1] = kv * rho / r2
    J[..., 1, 2] = -kv * zy * zz / (rho * r2)
    return J


def e_matrix(z_op, width, height):
    """``jac_equirect(z) @ hat(z)``.

    For a left perturbation ``z -> exp(dphi^) z`` the map point moves by
    ``-e_matrix(z) @ dphi`` to first order.
    """
    z_op = np.asarray(z_op, dtype=float)
    return jac_equirect(z_op, width, height) @ hat(z_op)


def e_matrix_vjp(z_op, v, width, height):
    """``v @ e_matrix(z)`` for (N, 2) ``v``, without forming the 2x3 matrices.

    Row ``r`` of ``J hat(z)`` is ``J_r x z``, hence ``v^T J hat(z) = (J^T v) x z``.
    """
    zx, zy, zz = z_op[..., 0], z_op[..., 1], z_op[..., 2]
    rho2 = zx * zx + zz * zz
    rho = np.sqrt(rho2)
    r2 = rho2 + zy * zy
    ku = v[..., 0] * (width / (2.0 * np.pi)) / rho2
    kv = v[..., 1] * (height / np.pi) / (rho * r2)
    c0 = ku * zz - kv * zy * zx
    c1 = kv * rho2
    c2 = -ku * zx - kv * zy * zz
    return np.stack([c1 * zz - c2 * zy, c2 * zx - c0 * zz, c0 * zy - c1 * zx], axis=-1)


def e_matrix_unchecked(z_op, width, height):
    return _jac_equirect_unchecked(z_op, width, height) @ hat(z_op)
