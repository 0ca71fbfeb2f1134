from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streampoint import geometry, synthdata
from streampoint.errors import EmptyEvaluationError, InvalidInputError, ShapeError
from streampoint.evaluation import (
    Alignment,
    confident_points,
    depth_metrics,
    evaluate_run,
    evaluate_sequences,
    nearest_neighbors,
    pca_normals,
    predict,
    recon_metrics,
    trajectory_metrics,
)
from streampoint.geometry import Pose
from streampoint.model import ModelConfig, StreamModel, save_checkpoint


def _random_rotation(rng):
    return geometry.axis_angle_quat(rng.normal(size=3), rng.uniform(0, np.pi))


def _trajectory(rng, n):
    return [Pose(_random_rotation(rng), rng.normal(size=3) * 2) for _ in range(n)]


def _sim3_poses(poses, s, q, t):
    R = geometry.Pose(q, np.zeros(3)).R
    return [Pose.from_rt(R @ p.R, s * R @ p.t + t) for p in poses]


def _grid(n=20, spacing=0.1):
    u, v = np.meshgrid(np.arange(n) * spacing, np.arange(n) * spacing)
    return np.stack([u.ravel(), v.ravel(), np.zeros(n * n)], axis=1)


# -- depth ------------------------------------------------------------------------------

@pytest.mark.parametrize("alignment", list(Alignment))
def test_depth_identity_any_alignment(alignment):
    gt = np.random.default_rng(0).uniform(1, 5, size=(3, 6, 7))
    rep = depth_metrics(gt.copy(), gt, np.ones_like(gt, bool), alignment)
    assert rep.abs_rel == pytest.approx(0.0, abs=1e-12) and rep.delta == 1.0
    assert rep.alignment == Alignment(alignment).value


def test_depth_scaled_prediction():
    gt = np.random.default_rng(1).uniform(1, 5, size=(2, 5, 5))
    valid = np.ones_like(gt, bool)
    rep = depth_metrics(1.3 * gt, gt, valid, "per_seq_scale")
    assert rep.abs_rel == pytest.approx(0.0, abs=1e-12) and rep.delta == 1.0
    rep = depth_metrics(1.3 * gt, gt, valid, "none")
    assert rep.abs_rel == pytest.approx(0.3, abs=1e-12) and rep.delta == 0.0
    rep = depth_metrics(1.3 * gt, gt, valid, "per_frame_median")
    assert rep.abs_rel == pytest.approx(0.0, abs=1e-12)
    rep = depth_metrics(2.0 * gt + 0.5, gt, valid, "per_seq_scale_shift")
    assert rep.abs_rel == pytest.approx(0.0, abs=1e-9)


def test_depth_delta_threshold_is_strict():
    gt = np.ones((1, 1, 2))
    assert depth_metrics(np.array([[[1.25, 1.0]]]), gt, np.ones_like(gt, bool)).delta == 0.5
    assert depth_metrics(np.array([[[-1.0, 0.0]]]), gt, np.ones_like(gt, bool)).delta == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_delta_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0.5, 3, size=(2, 4, 4)), rng.uniform(0.5, 3, size=(2, 4, 4))
    valid = np.ones_like(a, bool)
    assert depth_metrics(a, b, valid).delta == depth_metrics(b, a, valid).delta


def test_depth_errors():
    with pytest.raises(EmptyEvaluationError):
        depth_metrics(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2), bool))
    with pytest.raises(ShapeError):
        depth_metrics(np.ones((2, 2)), np.ones((2, 3)), np.ones((2, 3), bool))


# -- trajectories ---------------------------------------------------------------------------

def test_trajectory_identity():
    gt = _trajectory(np.random.default_rng(0), 6)
    rep = trajectory_metrics(gt, gt)
    assert rep.ate == pytest.approx(0, abs=1e-12) and rep.rpe_trans == pytest.approx(0, abs=1e-12)
    assert rep.rpe_rot == pytest.approx(0, abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_ate_sim3_invariance(seed):
    rng = np.random.default_rng(seed)
    gt = _trajectory(rng, 8)
    pred = _sim3_poses(gt, rng.uniform(0.2, 5), _random_rotation(rng), rng.normal(size=3) * 3)
    rep = trajectory_metrics(pred, gt)
    assert rep.ate < 1e-9
    assert rep.rpe_trans < 1e-9
    assert rep.rpe_rot < 1e-9


def _brute_rpe_rot(pred, gt):
    out = []
    for i in range(len(gt) - 1):
        dg = np.linalg.inv(gt[i].matrix()) @ gt[i + 1].matrix()
        dp = np.linalg.inv(pred[i].matrix()) @ pred[i + 1].matrix()
        err = np.linalg.inv(dg) @ dp
        # angle from the quaternion of the error rotation
        q = geometry.Pose.from_rt(err[:3, :3], np.zeros(3)).q
        out.append(np.degrees(2 * np.arctan2(np.linalg.norm(q[1:]), abs(q[0]))))
    return float(np.mean(out))


@pytest.mark.parametrize("n,k", [(5, 2), (8, 3), (10, 5)])
def test_rpe_rot_single_perturbed_pose(n, k):
    gt = _trajectory(np.random.default_rng(n), n)
    extra = geometry.Pose(geometry.axis_angle_quat([0.3, 1.0, -0.2], np.radians(10.0)), np.zeros(3)).R
    pred = list(gt)
    pred[k] = Pose.from_rt(gt[k].R @ extra, gt[k].t)
    rep = trajectory_metrics(pred, gt)
    assert rep.rpe_rot == pytest.approx(20.0 / (n - 1), abs=1e-9)
    assert rep.rpe_rot == pytest.approx(_brute_rpe_rot(pred, gt), abs=1e-9)
    assert rep.ate == pytest.approx(0.0, abs=1e-9)


def test_trajectory_errors():
    gt = _trajectory(np.random.default_rng(0), 3)
    with pytest.raises(InvalidInputError):
        trajectory_metrics(gt[:2], gt[:2])
    with pytest.raises(InvalidInputError):
        trajectory_metrics(gt, gt[:2])


# -- reconstruction -----------------------------------------------------------------------------

def test_nearest_neighbors_match_brute_force():
    rng = np.random.default_rng(0)
    q, r = rng.normal(size=(50, 3)), rng.normal(size=(70, 3))
    dist, idx = nearest_neighbors(q, r, chunk=7)
    full = np.linalg.norm(q[:, None] - r[None], axis=2)
    np.testing.assert_array_equal(idx, full.argmin(axis=1))
    np.testing.assert_allclose(dist, full.min(axis=1), atol=1e-12)


def test_pca_normals_on_plane():
    normals = pca_normals(_grid())
    np.testing.assert_allclose(np.abs(normals[:, 2]), 1.0, atol=1e-9)


def test_recon_identity():
    rng = np.random.default_rng(0)
    cloud = np.concatenate([_grid(), rng.uniform(size=(200, 3)) + [0, 0, 2]])
    rep = recon_metrics(cloud, cloud)
    assert rep.acc_mean == 0.0 and rep.comp_mean == 0.0
    assert rep.nc_mean == pytest.approx(1.0, abs=1e-6) and rep.nc_median == pytest.approx(1.0, abs=1e-6)


def test_recon_plane_offset():
    gt = _grid()
    rep = recon_metrics(gt + [0, 0, 0.01], gt)
    for v in (rep.acc_mean, rep.acc_median, rep.comp_mean, rep.comp_median):
        assert v == pytest.approx(0.01, abs=1e-12)
    assert rep.nc_mean == pytest.approx(1.0, abs=1e-9)


def test_recon_half_coverage():
    gt = _grid()
    rep = recon_metrics(gt[: len(gt) // 2], gt)
    assert rep.acc_mean == 0.0 and rep.comp_mean > 0


def test_comp_monotone_on_nested_clouds():
    rng = np.random.default_rng(3)
    gt = rng.uniform(size=(300, 3))
    pool = rng.uniform(size=(200, 3))
    comps = [recon_metrics(pool[:n], gt).comp_mean for n in (20, 50, 100, 200)]
    assert all(a >= b for a, b in zip(comps, comps[1:]))


def test_recon_errors():
    with pytest.raises(EmptyEvaluationError):
        recon_metrics(np.zeros((0, 3)), _grid())
    with pytest.raises(InvalidInputError):
        recon_metrics(_grid()[:5], _grid())
    with pytest.raises(InvalidInputError):
        recon_metrics(_grid(), _grid(), k_normals=2)


def test_confident_points_filter():
    pts = np.arange(12, dtype=float).reshape(2, 2, 3)
    conf = np.array([[1.0, 2.0], [3.0, 4.0]])
    kept = confident_points([pts], [conf], 0.5)
    np.testing.assert_array_equal(kept, pts[conf > 2.5])
    assert len(confident_points([pts], [conf], 1.0)) == 0


# -- harness ----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def eval_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    cfg = ModelConfig.toy()
    synthdata.generate_dataset(range(3), root, n_views=4, camera_only_prob=0.0,
                               height=cfg.height, width=cfg.width)
    ckpt = save_checkpoint(StreamModel(cfg, seed=0), root.parent / (root.name + "_ckpt"))
    return root, ckpt


def _sequences(root):
    return [(p.name, synthdata.read_sequence(p)) for p in synthdata.list_sequences(root)]


def test_bypass_reaches_ideal_values(eval_data):
    root, _ = eval_data
    seqs = _sequences(root)
    depth = evaluate_sequences(None, seqs, "depth", "none", bypass=True)
    assert depth["aggregate"]["abs_rel"]["mean"] == 0.0 and depth["aggregate"]["delta"]["mean"] == 1.0
    pose = evaluate_sequences(None, seqs, "pose", bypass=True)
    assert pose["aggregate"]["ate"]["mean"] < 1e-9 and pose["aggregate"]["rpe_rot"]["mean"] < 1e-9
    recon = evaluate_sequences(None, seqs, "recon", bypass=True)
    agg = recon["aggregate"]
    assert agg["acc_mean"]["mean"] == 0.0 and agg["comp_mean"]["mean"] == 0.0
    assert agg["nc_mean"]["mean"] >= 0.99
    assert all("error" not in r for r in depth["per_sequence"] + pose["per_sequence"] + recon["per_sequence"])


def test_report_bytes_deterministic(eval_data, tmp_path):
    root, ckpt = eval_data
    evaluate_run(ckpt, root, "recon", out_path=tmp_path / "a.json")
    evaluate_run(ckpt, root, "recon", out_path=tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    report = json.loads((tmp_path / "a.json").read_text())
    assert set(report) >= {"protocol", "alignment", "per_sequence", "aggregate"}
    assert len(report["per_sequence"]) == 3


def test_max_threshold_routes_error_per_sequence(eval_data):
    root, ckpt = eval_data
    report = evaluate_run(ckpt, root, "recon", conf_quantile=1.0)
    assert len(report["per_sequence"]) == 3
    assert all("EmptyEvaluationError" in r["error"] for r in report["per_sequence"])
    assert report["aggregate"] == {}


def test_predict_modes_and_mismatch(eval_data):
    root, _ = eval_data
    sample = _sequences(root)[0][1]
    model = StreamModel(ModelConfig.toy(), seed=0)
    assert len(predict(model, sample, "online")) == len(predict(model, sample, "revisit")) == len(sample)
    with pytest.raises(InvalidInputError):
        predict(model, sample, "sideways")
    with pytest.raises(ShapeError, match=r"\(8, 8\)"):
        predict(StreamModel(ModelConfig(), seed=0), sample)
