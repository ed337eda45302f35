import numpy as np
import pytest

from fastsplat import core
from fastsplat.config import TrainConfig
from fastsplat.gauss4d import (Store4D, condition_at_time, covariance4d, isoclinic_from_rotation,
                               marginal_weight, render_4d, rot4_from_isoclinic)
from fastsplat.raster_forward import RenderSettings, render

from conftest import orbit_camera, random_store


def test_identity_quaternions_give_identity():
    assert np.array_equal(rot4_from_isoclinic([1.0, 0, 0, 0], [1.0, 0, 0, 0]), np.eye(4))


def test_rotations_are_orthonormal(rng):
    R = rot4_from_isoclinic(rng.normal(size=(50, 4)), rng.normal(size=(50, 4)))
    assert np.abs(R @ np.swapaxes(R, 1, 2) - np.eye(4)).max() < 1e-14
    assert np.allclose(np.linalg.det(R), 1.0, atol=1e-13)


def test_conjugate_pair_is_a_3d_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    R = rot4_from_isoclinic(q, q * [1, -1, -1, -1])
    # q v q* fixes the real axis and rotates the imaginary ones
    expected = np.eye(4)
    expected[1:, 1:] = core.rotation_matrices(q)
    assert np.abs(R - expected).max() < 1e-14


def test_isoclinic_round_trip(rng):
    for _ in range(20):
        R, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        if np.linalg.det(R) < 0:
            R[:, 0] *= -1
        a, b = isoclinic_from_rotation(R)
        assert np.abs(rot4_from_isoclinic(a, b) - R).max() < 1e-12


def test_degenerate_quaternion_raises():
    with pytest.raises(core.DegenerateError):
        rot4_from_isoclinic([0.0, 0, 0, 0], [1.0, 0, 0, 0])


def test_conditioning_matches_precision_matrix_oracle(rng):
    for _ in range(10):
        A = rng.normal(size=(4, 4))
        cov = A @ A.T + 0.1 * np.eye(4)
        mu = rng.normal(size=4)
        t = rng.normal()
        m3, c3 = condition_at_time(mu, cov, t)
        P = np.linalg.inv(cov)
        c_ref = np.linalg.inv(P[:3, :3])
        m_ref = mu[:3] - c_ref @ P[:3, 3] * (t - mu[3])
        assert np.abs(c3 - c_ref).max() < 1e-10 and np.abs(m3 - m_ref).max() < 1e-10


def test_marginal_weight_examples():
    assert marginal_weight(0.3, 0.04, 0.3) == 1.0
    assert marginal_weight(0.3, 0.04, 0.5) == pytest.approx(np.exp(-0.5), rel=1e-15)


def test_covariance_uses_floored_temporal_scale():
    s = Store4D.zeros(1, np.float64)
    s.quat_left[:, 0] = s.quat_right[:, 0] = 1
    s.log_scales[:] = [0, 0, 0, -50]
    cov, _, _ = covariance4d(s)
    assert cov[0, 3, 3] == pytest.approx(1e-8)


def test_static_lift_renders_like_3d(rng):
    store = random_store(rng, 60)
    cam = orbit_camera(rng, 32)
    ref = render(cam, store, background=(0.2, 0.1, 0)).image
    lifted = Store4D.from_static(store)
    img = render_4d(cam, lifted, 0.5, background=(0.2, 0.1, 0)).image
    assert np.abs(img - ref).max() < 1e-6


def test_moving_gaussian_follows_its_velocity():
    # a 4D Gaussian tilted in x-t moves along x as t changes
    s = Store4D.zeros(1, np.float64)
    s.quat_left[:, 0] = s.quat_right[:, 0] = 1
    s.log_scales[:] = np.log([0.1, 0.1, 0.1, 0.5])
    th = 0.3
    R = np.eye(4)
    R[[0, 0, 3, 3], [0, 3, 0, 3]] = [np.cos(th), -np.sin(th), np.sin(th), np.cos(th)]
    s.quat_left[0], s.quat_right[0] = isoclinic_from_rotation(R)
    cov, _, _ = covariance4d(s)
    m0, _ = condition_at_time(s.means[0], cov[0], 0.0)
    m1, _ = condition_at_time(s.means[0], cov[0], 1.0)
    assert abs(m1[0] - m0[0] - cov[0, 0, 3] / cov[0, 3, 3]) < 1e-14 and m1[0] != m0[0]


def test_empty_store_renders_background():
    cam = orbit_camera(np.random.default_rng(0), 16)
    img = render_4d(cam, Store4D.zeros(0, np.float32), 0.5, background=(0.1, 0.2, 0.3)).image
    assert np.allclose(img, [0.1, 0.2, 0.3])


def test_antialiasing_forced_off_in_4d():
    assert TrainConfig(gauss4d=True, aa="full").render_settings().aa == "off"
    with pytest.raises(ValueError):
        render_4d(orbit_camera(np.random.default_rng(0), 16), Store4D.zeros(1, np.float64), 0.5,
                  RenderSettings(aa="filter3d_clip"))
