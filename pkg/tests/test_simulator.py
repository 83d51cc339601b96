import numpy as np
import pytest

from emba.geometry import CameraModel, exp_so3, rotation_angle
from emba.simulator import (
    SimConfig,
    TimeStepTooLargeError,
    bilinear_sample,
    inject_spurious_events,
    pan_trajectory,
    perturb_trajectory,
    procedural_panorama,
    simulate_events,
    true_gradient_map,
)
from emba.trajectory import Trajectory

W, H = 360, 180
CAM = CameraModel.from_fov(8, 8, 60.0)


def yaw_trajectory(angles_deg, rate=20.0):
    yaw = np.deg2rad(np.asarray(angles_deg, dtype=float))
    return Trajectory(0.0, rate, exp_so3(np.stack([np.zeros_like(yaw), yaw, np.zeros_like(yaw)], axis=1)))


def u_ramp(slope):
    """Log intensity growing linearly with u (one map pixel per degree)."""
    return slope * np.broadcast_to(np.arange(W, dtype=float), (H, W))


def test_bilinear_sample_examples():
    img = np.arange(12, dtype=float).reshape(3, 4)
    assert bilinear_sample(img, np.array([1.0, 2.0])) == img[2, 1]
    assert bilinear_sample(img, np.array([1.5, 0.5])) == pytest.approx(np.mean(img[0:2, 1:3]))
    # u wraps between the last and first column
    assert bilinear_sample(img, np.array([3.5, 0.0])) == pytest.approx(0.5 * (img[0, 3] + img[0, 0]))
    assert bilinear_sample(img, np.array([-0.5, 0.0])) == pytest.approx(0.5 * (img[0, 3] + img[0, 0]))
    # v is clamped
    assert bilinear_sample(img, np.array([2.0, 7.0])) == img[2, 2]
    assert bilinear_sample(img, np.array([2.0, -3.0])) == img[0, 2]


def test_config_validation():
    tr = yaw_trajectory([0, 1])
    with pytest.raises(ValueError):
        SimConfig(0.0, 1e-3, CAM, tr, u_ramp(0.1))
    with pytest.raises(ValueError):
        SimConfig(0.2, 0.0, CAM, tr, u_ramp(0.1))
    with pytest.raises(ValueError):
        SimConfig(0.2, 1e-3, CAM, tr, np.zeros(5))


def test_static_camera_emits_nothing():
    M = procedural_panorama(W, H, seed=1)
    ev = simulate_events(SimConfig(0.2, 1e-3, CAM, yaw_trajectory([10, 10, 10]), M))
    assert len(ev) == 0


def test_step_of_three_and_a_half_thresholds():
    C = 0.2
    # 7 degrees of yaw on a 0.1/degree ramp: every pixel sees +0.7 = 3.5 C
    ev = simulate_events(SimConfig(C, 1e-3, CAM, yaw_trajectory([0, 7]), u_ramp(0.1)))
    counts = np.zeros((CAM.height, CAM.width), int)
    np.add.at(counts, (ev.y, ev.x), 1)
    assert np.all(counts == 3)
    assert np.all(ev.p == 1)


def test_event_times_on_a_ramp():
    """L(t) is linear in t, so the k-th crossing happens at k C / (dL/dt)."""
    C = 0.2
    ev = simulate_events(SimConfig(C, 1e-3, CAM, yaw_trajectory([0, 7]), u_ramp(0.1)))
    rate = 0.7 / 0.05  # log intensity per second
    for x, y in [(0, 0), (3, 4), (7, 7)]:
        sel = (ev.x == x) & (ev.y == y)
        np.testing.assert_allclose(np.sort(ev.t[sel]), C * np.arange(1, 4) / rate, atol=1e-9)


def test_negative_motion_gives_negative_polarity():
    ev = simulate_events(SimConfig(0.2, 1e-3, CAM, yaw_trajectory([0, -7]), u_ramp(0.1)))
    assert len(ev) == 3 * CAM.width * CAM.height
    assert np.all(ev.p == -1)


def test_pan_and_return_nets_to_zero():
    M = procedural_panorama(W, H, seed=2, amplitude=0.8, max_freq=12)
    ev = simulate_events(SimConfig(0.15, 1e-3, CAM, yaw_trajectory([0, 4, 8, 4, 0]), M))
    assert len(ev) > 0
    net = np.zeros((CAM.height, CAM.width), int)
    np.add.at(net, (ev.y, ev.x), ev.p.astype(int))
    assert np.all(net == 0)


def test_events_are_time_ordered():
    M = procedural_panorama(W, H, seed=2)
    ev = simulate_events(SimConfig(0.1, 1e-3, CAM, pan_trajectory(0.5, seed=1), M))
    assert np.all(np.diff(ev.t) >= 0)
    assert ev.t.min() >= 0 and ev.t.max() <= 0.5


def test_time_step_guard():
    # 0.1/degree over 7 degrees in 0.05 s is 0.014 per ms; 40 ms steps change L by 0.56 >= 2C
    with pytest.raises(TimeStepTooLargeError):
        simulate_events(SimConfig(0.2, 0.04, CAM, yaw_trajectory([0, 7]), u_ramp(0.1)))


def test_true_gradient_map_ramp():
    G = true_gradient_map(u_ramp(0.1))
    np.testing.assert_allclose(G.gx[:, :-1], 0.1)
    np.testing.assert_allclose(G.gx[:, -1], -0.1 * (W - 1))  # wraps to column 0
    assert np.all(G.gy == 0)
    v = np.broadcast_to(np.arange(H, dtype=float)[:, None], (H, W))
    G = true_gradient_map(0.5 * v)
    np.testing.assert_allclose(G.gy[:-1], 0.5)
    assert np.all(G.gy[-1] == 0)


def test_procedural_panorama_statistics():
    M = procedural_panorama(256, 128, seed=3, amplitude=0.7)
    assert abs(M.mean()) < 1e-12
    assert M.std() == pytest.approx(0.7, rel=1e-6)
    np.testing.assert_array_equal(M, procedural_panorama(256, 128, seed=3, amplitude=0.7))
    assert not np.array_equal(M, procedural_panorama(256, 128, seed=4, amplitude=0.7))
    # seamless in azimuth: the wrap step is no larger than typical steps
    steps = np.abs(np.diff(M, axis=1))
    assert np.abs(M[:, 0] - M[:, -1]).max() <= steps.max()


def test_pan_trajectory_shape_and_rate():
    tr = pan_trajectory(2.0, 20.0, seed=1, yaw_rate_deg=30.0, wobble_deg=0.0)
    assert tr.n_poses == 41
    assert tr.t_end == pytest.approx(2.0)
    steps = np.rad2deg(rotation_angle(np.swapaxes(tr.poses[:-1], 1, 2) @ tr.poses[1:]))
    np.testing.assert_allclose(steps, 30.0 / 20.0, atol=1e-9)


def test_perturb_trajectory():
    tr = pan_trajectory(20.0, 20.0, seed=1)
    noisy = perturb_trajectory(tr, 2.0, seed=5)
    assert np.array_equal(noisy.poses[0], tr.poses[0])
    ang = np.rad2deg(rotation_angle(np.swapaxes(tr.poses, 1, 2) @ noisy.poses))[1:]
    assert np.sqrt(np.mean(ang**2)) == pytest.approx(2.0, rel=0.1)
    moved = perturb_trajectory(tr, 2.0, seed=5, keep_first=False)
    assert not np.array_equal(moved.poses[0], tr.poses[0])


def test_inject_spurious_events():
    M = procedural_panorama(W, H, seed=2)
    ev = simulate_events(SimConfig(0.1, 1e-3, CAM, pan_trajectory(0.5, seed=1), M))
    assert inject_spurious_events(ev, 0.0, CAM, 0.0, 0.5) is ev
    noisy = inject_spurious_events(ev, 0.05, CAM, 0.0, 0.5, seed=1)
    assert len(noisy) == len(ev) + round(0.05 * len(ev))
    assert np.all(np.diff(noisy.t) >= 0)
    assert noisy.x.max() < CAM.width and noisy.y.max() < CAM.height
    with pytest.raises(ValueError):
        inject_spurious_events(ev, -0.1, CAM, 0.0, 0.5)
