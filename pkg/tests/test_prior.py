import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from istpose import tensor_core as tc
from istpose.config import RunConfig
from istpose.geometry import Pose, random_rotation
from istpose.prior_baseline import (CASE_PRIOR, PriorNet, build_prior, chamfer,
                                    pose_from_correspondences, prior_case_study)
from istpose.synthdata import CATEGORIES, GenConfig, UnknownCategory, generate_dataset, \
    generate_shape

TINY = dict(n_points=16, d=8, hidden=8, k=4, variant="prior-case")


@pytest.fixture(autouse=True)
def f64():
    with tc.precision(np.float64):
        yield


@pytest.fixture(scope="module")
def data():
    return generate_dataset(GenConfig(count=8, n_points=16, n_model_points=128, seed=4))


def _net(case="case1", **kw):
    return PriorNet(RunConfig(**{**TINY, "prior_case": case, **kw}))


def _brute_chamfer(X, Y):
    a = np.mean([min(np.sum((x - y) ** 2) for y in Y) for x in X])
    b = np.mean([min(np.sum((x - y) ** 2) for x in X) for y in Y])
    return a + b


# ---------------------------------------------------------------- priors

def test_category_prior_of_identical_shapes():
    shape = generate_shape("mug", 3, 64)
    prior = build_prior("category", "mug", shapes=[shape, shape], n_points=64)
    assert np.array_equal(prior.points, shape.points)
    assert prior.provenance == "category-mean"


def test_category_prior_in_unit_cube():
    for cat in CATEGORIES:
        pts = build_prior("category", cat, n_points=64).points
        assert np.abs(pts).max() <= 0.5


def test_noise_prior_deterministic_and_bounded():
    a = build_prior("noise", n_points=100, seed=3)
    b = build_prior("noise", n_points=100, seed=3)
    assert np.array_equal(a.points, b.points)
    assert np.abs(a.points).max() <= 0.5
    assert a.provenance == "unit-cube-noise"


def test_shared_prior_identical_for_all_categories():
    priors = [build_prior("shared", cat, n_points=64).points for cat in CATEGORIES]
    for p in priors[1:]:
        assert np.array_equal(p, priors[0])


def test_prior_errors():
    with pytest.raises(ValueError):
        build_prior("autoencoder", "box")
    with pytest.raises(UnknownCategory):
        build_prior("category", "teapot")


# ---------------------------------------------------------------- chamfer

def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(0)
    X, Y = rng.standard_normal((1, 12, 3)), rng.standard_normal((1, 9, 3))
    assert abs(chamfer(X, Y).item() - _brute_chamfer(X[0], Y[0])) < 1e-12
    assert chamfer(X, X).item() == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_chamfer_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.standard_normal((1, 10, 3)), rng.standard_normal((1, 7, 3))
    base = chamfer(X, Y).item()
    assert abs(chamfer(X[:, rng.permutation(10)], Y[:, rng.permutation(7)]).item() - base) < 1e-12


# ---------------------------------------------------------------- deformation

def test_matching_rows_on_simplex(data):
    net = _net()
    b = net.collate(data[:4], np.float64)
    out = net.deform_forward(net.features(b), b["prior"])
    A = out.A.data
    assert A.shape == (4, 16, 16)
    assert (A >= 0).all() and np.abs(A.sum(-1) - 1).max() <= 1e-6
    assert np.allclose(out.recon.data, out.D.data + b["prior"])


def test_deformation_starts_at_zero(data):
    net = _net()
    b = net.collate(data[:2], np.float64)
    assert not net.deform_forward(net.features(b), b["prior"]).D.data.any()


def test_one_hot_matching_replicates_prior_point():
    prior = np.random.default_rng(1).uniform(-0.5, 0.5, (1, 5, 3))
    A = np.zeros((1, 4, 5))
    A[..., 2] = 1.0
    world = tc.matmul(tc.Value(A), tc.add(tc.Value(np.zeros_like(prior)), prior)).data
    assert np.allclose(world[0], np.repeat(prior[:, 2], 4, axis=0))


def test_perfect_outputs_give_zero_losses():
    Q = np.random.default_rng(2).uniform(-0.5, 0.5, (1, 6, 3))
    assert tc.add(chamfer(Q, Q), tc.smooth_l1(Q, Q)).item() == 0.0


def test_cases_one_to_three_share_parameter_layout():
    counts = {c: sum(v.data.size for _, v in _net(c).params.tensors.items()) for c in CASE_PRIOR}
    assert counts["case1"] == counts["case2"] == counts["case3"]
    assert counts["case4"] != counts["case1"]


def test_case_priors_differ(data):
    nets = {c: _net(c) for c in ("case1", "case2", "case3")}
    b = {c: n.collate(data[:4], np.float64)["prior"] for c, n in nets.items()}
    assert not np.array_equal(b["case1"], b["case3"])
    assert np.array_equal(b["case2"][0], b["case2"][1])


def test_losses_need_canonical_models(data):
    net = _net()
    b = net.collate(data[:2], np.float64)
    b["model"] = None
    with pytest.raises(ValueError):
        net.losses(b)


@pytest.mark.parametrize("case", ["case1", "case4"])
def test_loss_identity(data, case):
    net = _net(case)
    parts = net.losses(net.collate(data[:4], np.float64))
    assert parts.identity_gap() == 0.0


def test_gradcheck_deform(data):
    net = _net()
    rng = np.random.default_rng(0)
    for name, v in net.params:
        if name.endswith(".b"):
            v.data[:] = rng.uniform(0.02, 0.1, v.data.shape)
        if name.startswith("deform.1."):
            v.data[:] = rng.uniform(-0.1, 0.1, v.data.shape)
    b = net.collate(data[:2], np.float64)
    params = {k: v for k, v in net.params if k.startswith(("deform.", "match.", "obs.1"))}
    rep = tc.grad_check(lambda: net.losses(b).total, params, h=1e-6, tol=1e-3, max_coords=3)
    assert rep.passed, rep.per_param


# ---------------------------------------------------------------- pose fit and study

def test_pose_from_exact_correspondences():
    rng = np.random.default_rng(3)
    Q = generate_shape("box", 1, 64).points
    R, t = random_rotation(rng), np.array([0.0, 0.1, 0.9])
    pose = Pose(R, t, 0.3 * (Q.max(0) - Q.min(0)))
    P = 0.3 * Q @ R.T + t
    est = pose_from_correspondences(Q, P, Q)
    assert np.allclose(est.R, R, atol=1e-9) and np.allclose(est.t, t, atol=1e-9)
    assert np.allclose(est.s, pose.s, atol=1e-9)
    assert pose_from_correspondences(np.ones((5, 3)), np.ones((5, 3))) is None


def test_prior_case_study_is_deterministic(tmp_path):
    data = generate_dataset(GenConfig(count=16, n_points=16, n_model_points=128, seed=5))
    cfg = RunConfig(n_points=16, d=8, hidden=8, k=4, epochs=1, batch_size=8)
    out = tmp_path / "study.json"
    a = prior_case_study(["case1", "case4"], cfg, [0], data, data[:8], out_path=out)
    b = prior_case_study(["case1", "case4"], cfg, [0], data, data[:8])
    assert a == b
    assert set(a) == {"meta", "case1", "case4"}
    assert 0 <= a["case1"]["10deg2cm"]["mean"] <= 100
    assert out.exists()
