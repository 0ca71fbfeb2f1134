from __future__ import annotations

import json
import math

import numpy as np
import pytest

from streampoint import geometry, synthdata
from streampoint.errors import FormatError, InvalidInputError, UnsupportedVersionError
from streampoint.synthdata import (
    Kind,
    Primitive,
    SceneSpec,
    Supervision,
    cast_rays,
    generate_scene,
    mask_with_raymaps,
    read_sequence,
    render_frame,
    sample_sequence,
    write_sequence,
)

K16 = geometry.CameraIntrinsics(16.0, 16.0, 8.0, 8.0, 17, 17)  # pixel (8, 8) is the principal point


def _static_seed(start=0):
    seed = start
    while generate_scene(seed).dynamic is not None:
        seed += 1
    return seed


def _dynamic_seed():
    seed = 0
    while generate_scene(seed).dynamic is None:
        seed += 1
    return seed


# -- scenes -------------------------------------------------------------------------

def test_generate_scene_deterministic():
    assert generate_scene(11) == generate_scene(11)
    assert generate_scene(11) != generate_scene(12)


def test_every_scene_has_ground_and_primitives():
    dynamic = 0
    for seed in range(1000):
        scene = generate_scene(seed)
        ground = scene.primitives[0]
        assert ground.kind == "plane" and ground.normal == (0.0, 0.0, 1.0) and ground.center[2] == 0.0
        assert 3 <= len(scene.primitives) - 1 <= 8
        assert 4.0 <= scene.extent <= 10.0
        if scene.dynamic is not None:
            dynamic += 1
            v = np.asarray(scene.dynamic.velocity)
            assert np.linalg.norm(v) <= 0.5 + 1e-12
            for t in (0.0, synthdata.MOTION_HORIZON):
                assert np.linalg.norm(scene.dynamic.center_at(t)[:2]) <= 0.5 * scene.extent
    assert 250 <= dynamic <= 350


def test_dynamic_linear_motion():
    p = Primitive("sphere", (1.0, 2.0, 0.5), (0.5, 0.5, 0.5), (1, 1, 1), velocity=(0.1, 0.0, 0.0))
    np.testing.assert_allclose(p.center_at(2.0) - p.center_at(0.0), [0.2, 0.0, 0.0], atol=1e-15)


# -- rendering -----------------------------------------------------------------------------

def test_plane_in_front_depth():
    scene = SceneSpec((Primitive("plane", (0.0, 0.0, 5.0), (0.0, 0.0, 0.0), (1, 1, 1), normal=(0, 0, -1.0)),), 10.0)
    _, depth, _ = render_frame(scene, K16, geometry.Pose.identity(), dtype=np.float64)
    assert depth[8, 8] == pytest.approx(5.0, abs=1e-12)
    np.testing.assert_allclose(depth, 5.0, atol=1e-9)


def test_plane_behind_camera_gives_no_hits():
    scene = SceneSpec((Primitive("plane", (0.0, 0.0, -5.0), (0.0, 0.0, 0.0), (1, 1, 1), normal=(0, 0, 1.0)),), 10.0)
    image, depth, _ = render_frame(scene, K16, geometry.Pose.identity())
    assert np.all(depth == 0)
    np.testing.assert_allclose(image, np.broadcast_to(synthdata.BACKGROUND, image.shape), atol=1e-7)


def test_sphere_on_axis_depth():
    scene = SceneSpec((Primitive("sphere", (0.0, 0.0, 4.0), (1.0, 1.0, 1.0), (1, 1, 1)),), 10.0)
    _, depth, _ = render_frame(scene, K16, geometry.Pose.identity(), dtype=np.float64)
    # ray-sphere quadratic along +z: |t e_z - c|^2 = r^2 -> t = 4 - 1
    assert depth[8, 8] == pytest.approx(3.0, abs=1e-12)


def test_box_face_depth():
    scene = SceneSpec((Primitive("box", (0.0, 0.0, 6.0), (1.0, 1.0, 0.5), (1, 1, 1)),), 10.0)
    _, depth, _ = render_frame(scene, K16, geometry.Pose.identity(), dtype=np.float64)
    assert depth[8, 8] == pytest.approx(5.5, abs=1e-12)


def test_camera_inside_primitive_rejected():
    scene = SceneSpec((Primitive("sphere", (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (1, 1, 1)),), 10.0)
    with pytest.raises(InvalidInputError):
        render_frame(scene, K16, geometry.Pose.identity())


def test_static_frames_are_geometrically_consistent():
    scene = generate_scene(_static_seed())
    sample = sample_sequence(scene, 2, "video", np.random.default_rng(0), camera_only_prob=0.0)
    a, b = sample.frames
    _, depth_a, _ = render_frame(scene, a.K, a.pose, dtype=np.float64)
    pm = geometry.depth_to_pointmap(depth_a, a.K)
    world = a.pose.apply(pm.points[pm.valid])
    cam_b = geometry.pose_inverse(b.pose).apply(world)
    uv = geometry.project_points(cam_b, b.K)
    inside = (cam_b[:, 2] > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= b.K.width - 1) & (uv[:, 1] >= 0) \
        & (uv[:, 1] <= b.K.height - 1)
    rays = world[inside] - b.pose.t
    dist = np.linalg.norm(rays, axis=1)
    hit, _, _ = cast_rays(scene, b.pose.t, rays / dist[:, None])
    gap = dist - hit
    # seen from B each surface point is either hit exactly or hidden behind something closer
    assert np.all(gap > -1e-6)
    assert np.mean(np.abs(gap) < 1e-6) > 0.5


def test_dynamic_mask_matches_nearest_hit():
    scene = generate_scene(_dynamic_seed())
    dyn = scene.dynamic
    # look straight at the moving sphere from outside the scene
    for t in (0.0, 1.0):
        center = dyn.center_at(t)
        eye = center + np.array([0.45 * scene.extent, 0.1, 0.3 * scene.extent])
        pose = synthdata.look_at(eye, center)
        K = synthdata.default_intrinsics()
        _, depth, mask = render_frame(scene, K, pose, t, dtype=np.float64)
        only = SceneSpec((), scene.extent, dyn)
        static = SceneSpec(scene.primitives, scene.extent)
        _, d_dyn, _ = render_frame(only, K, pose, t, dtype=np.float64)
        _, d_static, _ = render_frame(static, K, pose, t, dtype=np.float64)
        expected = (d_dyn > 0) & ((d_static == 0) | (d_dyn < d_static))
        assert mask.any()
        np.testing.assert_array_equal(mask.astype(bool), expected)


# -- sampling --------------------------------------------------------------------------------

def test_single_view_sample():
    s = sample_sequence(generate_scene(0), 1, "video", np.random.default_rng(0))
    assert len(s) == 1 and s.frames[0].supervision is Supervision.SINGLE_VIEW


def test_video_rotation_deltas_small():
    for seed in range(30):
        s = sample_sequence(generate_scene(seed), 8, "video", np.random.default_rng(seed))
        for f0, f1 in zip(s.frames, s.frames[1:]):
            assert geometry.rotation_angle_deg(f0.pose.R.T @ f1.pose.R) < 10.0
            assert f1.time > f0.time


def test_collection_mode_deterministic_and_overlapping():
    scene = generate_scene(_static_seed())
    a = sample_sequence(scene, 5, "collection", np.random.default_rng(3), camera_only_prob=0.0)
    b = sample_sequence(scene, 5, "collection", np.random.default_rng(3), camera_only_prob=0.0)
    assert [f.pose.as_list() for f in a.frames] == [f.pose.as_list() for f in b.frames]
    for i, fa in enumerate(a.frames):
        for fb in a.frames[i + 1:]:
            assert synthdata.frame_overlap(fa, fb) >= 0.2


def test_collection_mode_rejects_dynamic_scene():
    with pytest.raises(InvalidInputError):
        sample_sequence(generate_scene(_dynamic_seed()), 3, "collection", np.random.default_rng(0))


def test_camera_only_rate_and_depth_dropped():
    scene = generate_scene(_static_seed())
    kinds = [sample_sequence(scene, 2, "video", np.random.default_rng(i)).frames[0].supervision
             for i in range(300)]
    rate = np.mean([k is Supervision.CAMERA_ONLY for k in kinds])
    assert 0.05 < rate < 0.15
    s = sample_sequence(scene, 2, "video", np.random.default_rng(0), camera_only_prob=1.0)
    assert all(f.depth is None for f in s.frames)
    targets = synthdata.frame_targets(s)
    assert all(t.valid is None and t.pose is not None for t in targets)


def test_targets_world_frame_is_first_camera():
    s = sample_sequence(generate_scene(1), 3, "video", np.random.default_rng(1), camera_only_prob=0.0)
    targets = synthdata.frame_targets(s)
    np.testing.assert_allclose(targets[0].x_world, targets[0].x_self, atol=1e-12)
    np.testing.assert_allclose(targets[0].pose.q, [1, 0, 0, 0], atol=1e-12)
    # a world point seen in frame 2 maps back through the absolute poses consistently
    t2 = targets[2]
    v, u = np.argwhere(t2.valid)[0]
    absolute = s.frames[2].pose.apply(t2.x_self[v, u])
    np.testing.assert_allclose(s.frames[0].pose.apply(t2.x_world[v, u]), absolute, atol=1e-9)


# -- raymap masking ----------------------------------------------------------------------------

def _sample(n=6):
    return sample_sequence(generate_scene(0), n, "video", np.random.default_rng(0), camera_only_prob=0.0)


def test_masking_extremes():
    s = _sample()
    same = mask_with_raymaps(s, 0.0, np.random.default_rng(0))
    assert [f.kind for f in same.frames] == [Kind.IMAGE] * 6
    all_ = mask_with_raymaps(s, 1.0, np.random.default_rng(0))
    assert [f.kind for f in all_.frames] == [Kind.IMAGE] + [Kind.RAYMAP] * 5
    inputs = synthdata.model_inputs(all_)
    assert isinstance(inputs[0], np.ndarray) and all(isinstance(x, geometry.Raymap) for x in inputs[1:])
    targets = synthdata.frame_targets(all_)
    assert targets[0].color is None and all(t.color is not None for t in targets[1:])


def test_masking_rate_monte_carlo():
    s = _sample(11)
    rng = np.random.default_rng(1)
    counts = [sum(f.kind is Kind.RAYMAP for f in mask_with_raymaps(s, 0.2, rng).frames[1:]) for _ in range(1000)]
    assert abs(sum(counts) / 10_000 - 0.2) <= 0.01


def test_masking_requires_metric():
    s = _sample()
    s.metric_flag = False
    with pytest.raises(InvalidInputError):
        mask_with_raymaps(s, 0.2, np.random.default_rng(0))


def test_query_raymap_reproduces_relative_camera():
    s = mask_with_raymaps(_sample(3), 1.0, np.random.default_rng(0))
    rm = synthdata.model_inputs(s)[2]
    K, pose = geometry.raymap_to_camera(rm)
    rel = s.relative_pose(2)
    assert K.fx == pytest.approx(s.frames[2].K.fx, rel=1e-9)
    np.testing.assert_allclose(pose.t, rel.t, atol=1e-9)


# -- on-disk format -----------------------------------------------------------------------------

def test_write_read_roundtrip(tmp_path):
    s = mask_with_raymaps(_sample(4), 0.5, np.random.default_rng(2))
    write_sequence(s, tmp_path / "seq")
    back = read_sequence(tmp_path / "seq")
    assert (back.metric_flag, back.mode, back.extent, back.scene_seed) == (s.metric_flag, s.mode, s.extent, s.scene_seed)
    for a, b in zip(s.frames, back.frames):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.depth.tobytes() == b.depth.tobytes()
        assert a.dynamic_mask.tobytes() == b.dynamic_mask.tobytes()
        assert a.K == b.K and a.pose.as_list() == b.pose.as_list()
        assert (a.kind, a.supervision, a.time) == (b.kind, b.supervision, b.time)


def test_manifest_layout(tmp_path):
    write_sequence(_sample(2), tmp_path / "seq")
    m = json.loads((tmp_path / "seq" / "manifest.json").read_text())
    assert m["version"] == 1 and m["n_frames"] == 2 and m["metric_flag"] is True
    entry = m["frames"][0]
    assert len(entry["K"]) == 4 and len(entry["pose"]) == 7
    assert set(entry["files"]) == {"image", "depth", "dynmask"}


def test_missing_frame_file_is_format_error(tmp_path):
    write_sequence(_sample(2), tmp_path / "seq")
    (tmp_path / "seq" / "frame_001" / "depth.ptm").unlink()
    with pytest.raises(FormatError, match="depth.ptm"):
        read_sequence(tmp_path / "seq")


def test_truncated_tensor_is_format_error(tmp_path):
    write_sequence(_sample(2), tmp_path / "seq")
    path = tmp_path / "seq" / "frame_000" / "image.ptm"
    path.write_bytes(path.read_bytes()[:50])
    with pytest.raises(FormatError, match="image.ptm"):
        read_sequence(tmp_path / "seq")


def test_unsupported_version(tmp_path):
    write_sequence(_sample(2), tmp_path / "seq")
    path = tmp_path / "seq" / "manifest.json"
    m = json.loads(path.read_text())
    m["version"] = 2
    path.write_text(json.dumps(m))
    with pytest.raises(UnsupportedVersionError):
        read_sequence(tmp_path / "seq")


def test_malformed_manifest(tmp_path):
    (tmp_path / "seq").mkdir()
    (tmp_path / "seq" / "manifest.json").write_text("{not json")
    with pytest.raises(FormatError, match="manifest.json"):
        read_sequence(tmp_path / "seq")


def test_generate_dataset_layout(tmp_path):
    written = synthdata.generate_dataset(range(3), tmp_path, n_views=2)
    assert [p.name for p in written] == ["scene_00000_00", "scene_00001_00", "scene_00002_00"]
    assert synthdata.list_sequences(tmp_path) == written
    index = json.loads((tmp_path / "dataset.json").read_text())
    assert index["sequences"] == [p.name for p in written]


def test_orbit_pose_looks_at_target():
    pose = synthdata.orbit_pose(4.0, math.pi / 3, 0.6, 0.3, 0.0)
    forward = pose.R[:, 2]
    to_target = -pose.t / np.linalg.norm(pose.t)
    np.testing.assert_allclose(forward, to_target, atol=1e-12)
    assert pose.R[2, 1] < 0  # camera y (down) points toward world -z
