import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from emba.events import EventArray, EventPairs, build_terms
from emba.geometry import CameraModel, exp_so3
from emba.panorama import ValidMask
from emba.simulator import SimConfig, pan_trajectory, procedural_panorama, simulate_events
from emba.trajectory import Trajectory

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_rotations(rng, n, scale=np.pi):
    """Rotations from uniformly random axes and angles up to ``scale``."""
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    return exp_so3(axis * rng.uniform(0, scale, size=(n, 1)))


def random_trajectory(rng, n_poses=8, rate=20.0, step=0.05, t0=0.0):
    """Random walk of control poses with per-segment angles of order ``step`` rad."""
    R = [random_rotations(rng, 1)[0]]
    for _ in range(n_poses - 1):
        R.append(exp_so3(rng.normal(size=3) * step) @ R[-1])
    return Trajectory(t0, rate, np.array(R))


class SmallScene:
    """A 1 s pan over a small panorama, shared by the event/solver/metrics tests."""

    W, H = 128, 64

    def __init__(self):
        self.cam = CameraModel.from_fov(32, 32, 60.0)
        self.M = procedural_panorama(self.W, self.H, seed=4, amplitude=0.6, max_freq=6)
        self.gt = pan_trajectory(1.0, 20.0, seed=5, yaw_rate_deg=30.0, wobble_deg=2.0)
        self.events = simulate_events(SimConfig(0.2, 2e-3, self.cam, self.gt, self.M))


@pytest.fixture(scope="session")
def scene():
    return SmallScene()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class SmoothField:
    """Analytic periodic log-intensity field; ``grad`` and ``hess`` are exact."""

    def __init__(self, rng, W, H, n=6):
        self.W, self.H = W, H
        self.k = np.stack([rng.integers(1, 4, n) * 2 * np.pi / W, rng.uniform(-3, 3, n) * np.pi / H], axis=1)
        self.phase = rng.uniform(0, 2 * np.pi, n)
        self.amp = rng.uniform(0.5, 1.0, n) * W / 40

    def grad(self, p):
        s = np.cos(p @ self.k.T + self.phase) * self.amp
        return s @ self.k

    def hess(self, p):
        s = -np.sin(p @ self.k.T + self.phase) * self.amp
        return np.einsum("nj,ja,jb->nab", s, self.k, self.k)


def random_terms(rng, n_terms=300, n_poses=6, W=256, H=128, valid=None, max_dt=0.08):
    """Residual terms for random events under a random trajectory.

    ``valid`` optionally restricts the map pixels that may carry terms.
    """
    cam = CameraModel.from_fov(64, 64, 60.0)
    R0 = exp_so3(rng.normal(size=3) * 0.3)  # keep the view away from the poles
    poses = [R0]
    for _ in range(n_poses - 1):
        poses.append(exp_so3(rng.normal(size=3) * 0.05) @ poses[-1])
    traj = Trajectory(0.0, 20.0, np.array(poses))
    n = 3 * n_terms
    dt = rng.uniform(0.002, max_dt, n)
    t = np.sort(rng.uniform(traj.t0 + max_dt, traj.t_end, n))
    ev = EventArray(t, rng.integers(0, 64, n), rng.integers(0, 64, n), rng.choice([-1, 1], n))
    pairs = EventPairs(np.arange(n), dt, np.full((64, 64), np.nan))
    counts = np.full((H, W), 10) if valid is None else np.where(valid, 10, 0)
    mask = ValidMask(counts, 5)
    terms, _ = build_terms(ev, pairs, traj, cam, mask, 0.2)
    # stay clear of the poles, where finite differences are unreliable
    zk = terms.z_k / np.linalg.norm(terms.z_k, axis=1, keepdims=True)
    keep = np.flatnonzero(np.abs(zk[:, 1]) < 0.8)[:n_terms]
    return terms.subset(keep), traj, cam, mask


_VERDICTS = []


def record_verdict(line):
    _VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
