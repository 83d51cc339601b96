"""Ideal event-camera simulator for a rotating camera viewing a panorama.

Deliberately independent of the solver's sampling: the log-intensity
panorama is sampled bilinearly, not by nearest neighbour, and events are
emitted from per-pixel reference levels rather than from gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .events import EventArray
from .geometry import CameraModel, exp_so3, project_equirect
from .panorama import GradientMap, forward_gradient
from .trajectory import Trajectory

logger = logging.getLogger(__name__)


class TimeStepTooLargeError(ValueError):
    pass


@dataclass
class SimConfig:
    contrast: float
    dt: float
    camera: CameraModel
    trajectory: Trajectory
    intensity: np.ndarray  # (H, W) log intensity panorama
    t_start: float | None = None
    t_end: float | None = None

    def __post_init__(self):
        if not self.contrast > 0:
            raise ValueError("contrast threshold must be positive")
        if not self.dt > 0:
            raise ValueError("time step must be positive")
        self.intensity = np.asarray(self.intensity, dtype=float)
        if self.intensity.ndim != 2:
            raise ValueError("intensity panorama must be a 2-D array")


def bilinear_sample(img, p):
    """Bilinear lookup with u wrapping and v clamped to the first/last row."""
    H, W = img.shape
    u = np.mod(p[..., 0], W)
    v = np.clip(p[..., 1], 0.0, H - 1.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.minimum(np.floor(v).astype(np.int64), H - 2)
    a = u - u0
    b = v - v0
    u0 %= W
    u1 = (u0 + 1) % W
    v1 = v0 + 1
    return (
        (1 - a) * (1 - b) * img[v0, u0]
        + a * (1 - b) * img[v0, u1]
        + (1 - a) * b * img[v1, u0]
        + a * b * img[v1, u1]
    )


def simulate_events(cfg: SimConfig):
    """Emit an event each time a pixel's log intensity crosses its reference
    level by ``+-C``; crossing times are linearly interpolated within a step."""
    traj = cfg.trajectory
    t_start = traj.t0 if cfg.t_start is None else cfg.t_start
    t_end = traj.t_end if cfg.t_end is None else cfg.t_end
    n_steps = int(np.ceil((t_end - t_start) / cfg.dt - 1e-9))
    if n_steps < 2:
        raise ValueError("trajectory span must cover at least two simulation steps")
    times = t_start + np.arange(n_steps + 1) * cfg.dt
    times[-1] = min(times[-1], t_end)

    cam = cfg.camera
    H, W = cfg.intensity.shape
    f = cam.all_pixel_bearings().reshape(-1, 3)
    seg_logs = traj.segment_logs()
    C = cfg.contrast

    def render(t):
        R = traj.interpolate(t, segment_logs=seg_logs)
        return bilinear_sample(cfg.intensity, project_equirect(f @ R.T, W, H))

    L_prev = render(times[0])
    ref = L_prev.copy()
    out_t, out_pix, out_p = [], [], []
    for j in range(1, len(times)):
        L = render(times[j])
        dL = L - L_prev
        worst = float(np.max(np.abs(dL)))
        if worst >= 2 * C:
            raise TimeStepTooLargeError(
                f"log-intensity changed by {worst:.3f} >= 2C within one step at t={times[j]:.6f}; "
                "use a smaller dt"
            )
        diff = L - ref
        n_pos = np.floor(np.maximum(diff, 0.0) / C + 1e-9).astype(np.int64)
        n_neg = np.floor(np.maximum(-diff, 0.0) / C + 1e-9).astype(np.int64)
        for n, sign in ((n_pos, 1), (n_neg, -1)):
            pix = np.flatnonzero(n)
            if pix.size == 0:
                continue
            counts = n[pix]
            rep = np.repeat(pix, counts)
            k = np.arange(rep.size) - np.repeat(np.cumsum(counts) - counts, counts) + 1
            level = ref[rep] + sign * k * C
            frac = np.clip((level - L_prev[rep]) / dL[rep], 0.0, 1.0)
            out_t.append(times[j - 1] + frac * (times[j] - times[j - 1]))
            out_pix.append(rep)
            out_p.append(np.full(rep.size, sign, dtype=np.int8))
            ref[pix] += sign * counts * C
        L_prev = L

    if not out_t:
        return EventArray.empty()
    t = np.concatenate(out_t)
    pix = np.concatenate(out_pix)
    p = np.concatenate(out_p)
    order = np.lexsort((pix, t))
    t, pix, p = t[order], pix[order], p[order]
    logger.debug("simulated %d events", t.size)
    return EventArray(t, pix % cam.width, pix // cam.width, p)


def true_gradient_map(intensity):
    """Forward-difference gradient of a log-intensity panorama (u wraps)."""
    gx, gy = forward_gradient(intensity)
    return GradientMap.from_channels(gx, gy)


def procedural_panorama(width, height, seed=0, n_waves=24, amplitude=0.5, max_freq=24):
    """Smooth random log-intensity field, seamless in azimuth."""
    rng = np.random.default_rng(seed)
    v, u = np.mgrid[0:height, 0:width].astype(float)
    M = np.zeros((height, width))
    for _ in range(n_waves):
        ku = rng.integers(-max_freq, max_freq + 1)
        kv = rng.uniform(-max_freq / 2, max_freq / 2)
        phase = rng.uniform(0, 2 * np.pi)
        a = rng.uniform(0.5, 1.0)
        M += a * np.sin(2 * np.pi * (ku * u / width + kv * v / height) + phase)
    M *= amplitude / max(M.std(), 1e-12)
    return M - M.mean()


def pan_trajectory(duration, rate=20.0, seed=0, yaw_rate_deg=30.0, wobble_deg=8.0, t0=0.0):
    """Smooth panning motion: steady yaw plus low-frequency pitch/roll wobble."""
    rng = np.random.default_rng(seed)
    n = int(np.floor(duration * rate + 1e-9)) + 1
    t = np.arange(n) / rate
    freqs = rng.uniform(0.2, 0.6, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    w = np.deg2rad(wobble_deg)
    yaw = np.deg2rad(yaw_rate_deg) * t + 0.3 * w * np.sin(2 * np.pi * freqs[0] * t + phases[0])
    pitch = w * np.sin(2 * np.pi * freqs[1] * t + phases[1])
    roll = 0.5 * w * np.sin(2 * np.pi * freqs[2] * t + phases[2])
    Ry = exp_so3(np.stack([np.zeros(n), yaw, np.zeros(n)], axis=1))
    Rx = exp_so3(np.stack([pitch, np.zeros(n), np.zeros(n)], axis=1))
    Rz = exp_so3(np.stack([np.zeros(n), np.zeros(n), roll], axis=1))
    return Trajectory(t0, rate, Ry @ Rx @ Rz)


def perturb_trajectory(traj: Trajectory, rms_deg, seed=0, keep_first=True):
    """Left-multiply control poses by random rotations of the given RMS angle.

    With ``keep_first`` the first pose stays exact, i.e. the perturbed
    trajectory is already aligned with ``traj`` at its start.
    """
    rng = np.random.default_rng(seed)
    noise = rng.normal(size=(traj.n_poses, 3)) * np.deg2rad(rms_deg) / np.sqrt(3.0)
    if keep_first:
        noise[0] = 0.0
    return Trajectory(traj.t0, traj.rate, exp_so3(noise) @ traj.poses)


def inject_spurious_events(ev: EventArray, fraction, camera: CameraModel, t_start, t_end, seed=0):
    """Add ``fraction * len(ev)`` events at uniformly random pixels, times and polarities."""
    if fraction < 0:
        raise ValueError("spurious-event fraction must be non-negative")
    n = int(round(fraction * len(ev)))
    if n == 0:
        return ev
    rng = np.random.default_rng(seed)
    t = np.concatenate([ev.t, rng.uniform(t_start, t_end, n)])
    x = np.concatenate([ev.x, rng.integers(0, camera.width, n)])
    y = np.concatenate([ev.y, rng.integers(0, camera.height, n)])
    p = np.concatenate([ev.p, rng.choice(np.array([-1, 1], dtype=np.int8), n)])
    order = np.lexsort((y * camera.width + x, t))
    return EventArray(t[order], x[order], y[order], p[order])
