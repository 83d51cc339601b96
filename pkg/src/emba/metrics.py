"""Absolute rotation error and photometric error."""

from __future__ import annotations

import json

import numpy as np

from .events import EventArray, NoTermsError, build_terms, count_map_hits, pair_events
from .geometry import CameraModel, log_so3
from .panorama import GradientMap, ValidMask
from .trajectory import Trajectory, TrajectorySpanError


def align_at(traj: Trajectory, reference: Trajectory, t0):
    """Rotate ``traj`` so that it coincides with ``reference`` at time ``t0``."""
    if not (traj.contains(t0) and reference.contains(t0)):
        raise TrajectorySpanError(f"alignment time {t0} outside one of the trajectories")
    R_est = traj.interpolate(t0)
    R_ref = reference.interpolate(t0)
    return traj.left_multiply(R_ref @ R_est.T)


def rotation_errors_deg(estimate: Trajectory, reference: Trajectory, times=None):
    if times is None:
        times = estimate.times
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise ValueError("no evaluation timestamps")
    R = estimate.interpolate(times)
    R_ref = reference.interpolate(times)
    dR = np.swapaxes(R_ref, -1, -2) @ R
    return np.rad2deg(np.linalg.norm(log_so3(dR), axis=-1))


def are_rmse(estimate: Trajectory, reference: Trajectory, times=None):
    """RMS rotation angle [deg] between estimate and reference at ``times``
    (the estimate's control-pose timestamps by default)."""
    err = rotation_errors_deg(estimate, reference, times)
    return float(np.sqrt(np.mean(err * err)))


def photometric_error(events: EventArray, traj: Trajectory, G: GradientMap, cam: CameraModel, contrast, mask: ValidMask | None = None, threshold=5):
    """Sum of squared residuals over the surviving terms.

    Without an explicit mask, every map pixel hit by more than ``threshold``
    warped events is considered. Returns ``(phe, n_terms, n_dropped)``.
    """
    if mask is None:
        mask = ValidMask(count_map_hits(events, traj, cam, G.width, G.height), threshold)
    pairs = pair_events(events, (cam.height, cam.width))
    terms, stats = build_terms(events, pairs, traj, cam, mask, contrast)
    iu, iv = mask.pixel_of(terms.pixel)
    e = np.einsum("ni,ni->n", G.data[iv, iu], terms.dp) - terms.measured
    if e.size == 0:
        raise NoTermsError("no residual terms")
    return float(e @ e), len(terms), stats.n_dropped


def metrics_dict(are_deg, phe=None, n_terms=None, n_dropped=None):
    return {"are_deg_rmse": are_deg, "phe": phe, "n_terms": n_terms, "n_dropped": n_dropped}


def metrics_text(d):
    return "".join(f"{k} {v}\n" for k, v in d.items())


def metrics_json(d):
    return json.dumps(d, indent=2, sort_keys=True)
