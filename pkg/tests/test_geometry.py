import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from istpose.geometry import (DegenerateConfiguration, DegenerateRepresentation, InvalidPose, Pose,
                              SymmetrySpec, axis_angle, box_corners, camera_from_canonical,
                              closest_axis_rotation, gamma_world_coords, iou3d, is_rotation,
                              random_rotation, rot_from_sixd, rotation_error_deg, sixd_from_rot,
                              umeyama_solve)

Y_SYM = SymmetrySpec(1, "continuous-axis", (0.0, 1.0, 0.0))
seeds = st.integers(0, 2**32 - 1)


def _pose(rng, s_norm=None):
    s = rng.uniform(0.05, 0.4, 3)
    if s_norm is not None:
        s = s / np.linalg.norm(s) * s_norm
    return Pose(random_rotation(rng), rng.uniform(-1, 1, 3), s)


# ---------------------------------------------------------------- 6D

def test_sixd_identity():
    assert np.allclose(rot_from_sixd([1, 0, 0, 0, 1, 0]), np.eye(3))


def test_sixd_gram_schmidt_by_hand():
    assert np.allclose(rot_from_sixd([2, 0, 0, 1, 1, 0]), np.eye(3), atol=1e-15)


def test_sixd_parallel_is_degenerate():
    with pytest.raises(DegenerateRepresentation):
        rot_from_sixd([1, 0, 0, 2, 0, 0])
    with pytest.raises(DegenerateRepresentation):
        rot_from_sixd([0, 0, 0, 0, 1, 0])


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_sixd_roundtrip(seed):
    R = random_rotation(np.random.default_rng(seed))
    assert np.allclose(rot_from_sixd(sixd_from_rot(R)), R, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=6, max_size=6))
def test_sixd_output_is_rotation(v):
    try:
        R = rot_from_sixd(v)
    except DegenerateRepresentation:
        return
    assert is_rotation(R, 1e-9)


# ---------------------------------------------------------------- gamma

def test_gamma_identity_pose():
    P = np.random.default_rng(0).standard_normal((5, 3))
    pose = Pose(np.eye(3), np.zeros(3), np.ones(3) / np.sqrt(3))
    assert np.allclose(gamma_world_coords(P, pose), P, atol=1e-15)


def test_gamma_of_translation_is_origin():
    pose = _pose(np.random.default_rng(1))
    assert np.allclose(gamma_world_coords(pose.t[None], pose), 0.0, atol=1e-15)
    assert np.allclose(camera_from_canonical(np.zeros((1, 3)), pose), pose.t)


def test_gamma_roundtrip_many_poses():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        pose = _pose(rng)
        Q = rng.uniform(-0.5, 0.5, (8, 3))
        assert np.abs(gamma_world_coords(camera_from_canonical(Q, pose), pose) - Q).max() <= 1e-10


def test_pose_validation():
    with pytest.raises(InvalidPose):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3), np.ones(3)).validate()
    with pytest.raises(InvalidPose):
        Pose(np.eye(3), np.zeros(3), np.array([1.0, 0.0, 1.0])).validate()
    assert Pose(np.eye(3), np.zeros(3), np.ones(3)).validate().scale == pytest.approx(np.sqrt(3))


# ---------------------------------------------------------------- umeyama

def test_umeyama_identity():
    src = np.random.default_rng(3).uniform(-0.5, 0.5, (20, 3))
    R, t, scale = umeyama_solve(src, src)
    assert np.allclose(R, np.eye(3)) and np.allclose(t, 0) and scale == pytest.approx(1.0)


def test_umeyama_recovers_known_similarity():
    src = np.random.default_rng(4).uniform(-0.5, 0.5, (50, 3))
    Rz = axis_angle([0, 0, 1], np.radians(30))
    t = np.array([0.1, 0.2, 0.3])
    R, t_hat, scale = umeyama_solve(src, 2 * src @ Rz.T + t)
    assert np.abs(R - Rz).max() < 1e-8
    assert np.abs(t_hat - t).max() < 1e-8
    assert abs(scale - 2) < 1e-8


@pytest.mark.parametrize("n", [3, 10, 100])
def test_umeyama_exact_on_noiseless(n):
    rng = np.random.default_rng(n)
    for _ in range(20):
        src = rng.uniform(-0.5, 0.5, (n, 3))
        R0, t0, s0 = random_rotation(rng), rng.uniform(-1, 1, 3), rng.uniform(0.1, 3)
        R, t, s = umeyama_solve(src, s0 * src @ R0.T + t0)
        assert np.abs(R - R0).max() < 1e-8
        assert np.abs(t - t0).max() < 1e-8
        assert abs(s - s0) < 1e-8


def test_umeyama_coincident_points():
    with pytest.raises(DegenerateConfiguration):
        umeyama_solve(np.ones((10, 3)), np.ones((10, 3)))


def test_umeyama_collinear_points():
    line = np.linspace(0, 1, 10)[:, None] * np.array([[1.0, 2.0, 3.0]])
    with pytest.raises(DegenerateConfiguration):
        umeyama_solve(line, line)


def test_umeyama_too_few_points():
    with pytest.raises(DegenerateConfiguration):
        umeyama_solve(np.eye(3)[:2], np.eye(3)[:2])


def test_umeyama_removes_reflection():
    rng = np.random.default_rng(6)
    src = rng.uniform(-0.5, 0.5, (30, 3))
    dst = src * np.array([1.0, 1.0, -1.0])
    R, _, scale = umeyama_solve(src, dst)
    assert is_rotation(R, 1e-9) and scale > 0


def test_umeyama_residual_shrinks_with_noise():
    rng = np.random.default_rng(7)
    src = rng.uniform(-0.5, 0.5, (200, 3))
    R0, t0 = random_rotation(rng), rng.uniform(-1, 1, 3)
    clean = 1.5 * src @ R0.T + t0
    noise = rng.standard_normal(clean.shape)
    res = []
    for sigma in (0.05, 0.01, 0.001):
        dst = clean + sigma * noise
        R, t, s = umeyama_solve(src, dst)
        res.append(np.sqrt(np.mean(np.sum((s * src @ R.T + t - dst) ** 2, axis=1))))
    assert res[0] >= res[1] >= res[2]


# ---------------------------------------------------------------- rotation error

def test_rotation_error_zero_and_constructed():
    R = random_rotation(np.random.default_rng(8))
    assert rotation_error_deg(R, R) == pytest.approx(0.0, abs=1e-5)
    R2 = R @ axis_angle([0, 0, 1], np.radians(10))
    assert abs(rotation_error_deg(R2, R) - 10.0) < 1e-6


def test_symmetric_rotation_error_ignores_axis_spin():
    R = random_rotation(np.random.default_rng(9))
    R2 = R @ axis_angle([0, 1, 0], np.radians(90))
    assert rotation_error_deg(R2, R, Y_SYM) == pytest.approx(0.0, abs=1e-5)
    assert rotation_error_deg(R2, R) == pytest.approx(90.0)


@settings(max_examples=50, deadline=None)
@given(seeds, st.floats(-np.pi, np.pi))
def test_symmetric_error_invariant_to_any_spin(seed, theta):
    rng = np.random.default_rng(seed)
    R_gt, R_pred = random_rotation(rng), random_rotation(rng)
    base = rotation_error_deg(R_pred, R_gt, Y_SYM)
    spun = rotation_error_deg(R_pred, R_gt @ axis_angle([0, 1, 0], theta), Y_SYM)
    assert abs(base - spun) < 1e-6


def test_rotation_error_clamped_range():
    R = np.eye(3)
    flip = axis_angle([1, 0, 0], np.pi)
    assert rotation_error_deg(flip, R) == pytest.approx(180.0)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_closest_axis_rotation_matches_dense_sweep(seed):
    rng = np.random.default_rng(seed)
    R_gt, R_pred = random_rotation(rng), random_rotation(rng)
    best = closest_axis_rotation(R_pred, R_gt, (0, 1, 0))
    sweep = np.radians(np.arange(0.0, 360.0, 0.1))
    dists = [np.linalg.norm(R_pred - R_gt @ axis_angle([0, 1, 0], th)) for th in sweep]
    assert np.linalg.norm(R_pred - best) <= min(dists) + 1e-9


def test_closest_axis_rotation_recovers_spin():
    R = random_rotation(np.random.default_rng(10))
    R_pred = R @ axis_angle([0, 1, 0], np.radians(37))
    assert np.allclose(closest_axis_rotation(R_pred, R, (0, 1, 0)), R_pred, atol=1e-12)


# ---------------------------------------------------------------- random rotations

def test_random_rotation_invariants_and_determinism():
    rng = np.random.default_rng(11)
    Rs = np.stack([random_rotation(rng) for _ in range(10_000)])
    eye = np.einsum("nji,njk->nik", Rs, Rs)
    assert np.abs(eye - np.eye(3)).max() < 1e-12
    assert np.abs(np.linalg.det(Rs) - 1).max() < 1e-12
    a = random_rotation(np.random.default_rng(5))
    b = random_rotation(np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_random_rotation_uniform_z_axis():
    rng = np.random.default_rng(12)
    z = np.stack([random_rotation(rng)[:, 2] for _ in range(100_000)])
    assert np.linalg.norm(z.mean(0)) < 0.02


# ---------------------------------------------------------------- IoU

def test_iou_identical_is_exactly_one():
    pose = _pose(np.random.default_rng(13))
    assert iou3d(pose, pose) == 1.0


def test_iou_disjoint_is_zero():
    a = Pose(np.eye(3), np.zeros(3), np.ones(3))
    b = Pose(random_rotation(np.random.default_rng(0)), np.array([5.0, 0, 0]), np.ones(3))
    assert iou3d(a, b) == 0.0


def test_iou_offset_cubes():
    a = Pose(np.eye(3), np.zeros(3), np.ones(3))
    b = Pose(np.eye(3), np.array([0.5, 0, 0]), np.ones(3))
    assert abs(iou3d(a, b) - 1 / 3) < 0.01


def test_iou_sampled_path_offset_cubes():
    # a rotation by a full turn about z breaks exact equality, forcing the grid path
    spin = axis_angle([0, 0, 1], 2 * np.pi)
    a = Pose(np.eye(3), np.zeros(3), np.ones(3))
    b = Pose(spin, np.array([0.5, 0, 0]), np.ones(3))
    assert abs(iou3d(a, b) - 1 / 3) < 0.01


def test_iou_rotated_square_prism():
    # a unit square prism against itself turned 45 degrees about z:
    # the overlap is a regular octagon of area 2 (sqrt 2 - 1)
    a = Pose(np.eye(3), np.zeros(3), np.ones(3))
    b = Pose(axis_angle([0, 0, 1], np.pi / 4), np.zeros(3), np.ones(3))
    inter = 2 * (np.sqrt(2) - 1)
    assert abs(iou3d(a, b) - inter / (2 - inter)) < 0.01


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_iou_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a = _pose(rng)
    b = Pose(random_rotation(rng), a.t + rng.normal(0, 0.1, 3), rng.uniform(0.05, 0.4, 3))
    x, y = iou3d(a, b, resolution=16), iou3d(b, a, resolution=16)
    assert x == y
    assert 0.0 <= x <= 1.0


def test_box_corners_extent():
    pose = Pose(np.eye(3), np.array([1.0, 2.0, 3.0]), np.array([0.2, 0.4, 0.6]))
    c = box_corners(pose)
    assert np.allclose(c.max(0) - c.min(0), pose.s)
    assert np.allclose(c.mean(0), pose.t)
