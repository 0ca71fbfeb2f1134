"""Fast invariant suites shared by the ``selftest`` command."""

from __future__ import annotations

import time
from dataclasses import replace
from typing import Callable

import numpy as np

from streampoint import evaluation, geometry, losses, synthdata
from streampoint.model import ModelConfig, StreamModel
from streampoint.substrate.checks import primitive_gradient_errors
from streampoint.substrate.gradcheck import gradient_check
from streampoint.substrate.tensor import checked, no_grad


def toy_sequence(seed: int = 0, n_frames: int = 2, raymap_last: bool = True) -> synthdata.SequenceSample:
    """Rendered toy-resolution sequence; the last frame becomes a raymap query when asked."""
    cfg = ModelConfig.toy()
    scene = synthdata.generate_scene(seed)
    K = synthdata.default_intrinsics(cfg.height, cfg.width)
    sample = synthdata.sample_sequence(scene, n_frames, "video", np.random.default_rng(seed), K=K,
                                       camera_only_prob=0.0)
    if raymap_last and n_frames > 1:
        frames = sample.frames[:-1] + [replace(sample.frames[-1], kind=synthdata.Kind.RAYMAP)]
        sample = replace(sample, frames=frames)
    return sample


def toy_model_gradient_error(seed: int = 0, metric: bool = False, max_entries: int | None = None) -> float:
    """Gradient check of the total loss of a 2-frame toy sequence (image then raymap) in float64."""
    model = StreamModel(ModelConfig.toy(), seed=seed).astype(np.float64)
    sample = toy_sequence(seed)
    inputs = synthdata.model_inputs(sample)
    targets = synthdata.frame_targets(sample)

    def objective():
        preds, _ = model.run_sequence(inputs)
        return losses.total_loss(preds, targets, losses.LossConfig(), metric=metric)[0]

    with checked():
        return gradient_check(objective, model.named_parameters(), max_entries=max_entries, seed=seed)


def _random_raymap(rng: np.random.Generator, cfg: ModelConfig) -> geometry.Raymap:
    q = rng.normal(size=4)
    K = geometry.CameraIntrinsics(rng.uniform(4, 20), rng.uniform(4, 20), (cfg.width - 1) / 2,
                                  (cfg.height - 1) / 2, cfg.width, cfg.height)
    return geometry.camera_to_raymap(K, geometry.Pose(q / np.linalg.norm(q), rng.normal(size=3)))


def readout_purity(n_steps: int, seed: int = 0) -> bool:
    cfg = ModelConfig.toy()
    model = StreamModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    with no_grad():
        _, state = model.run_sequence([rng.uniform(size=(cfg.height, cfg.width, 3))])
        before = state.tokens.data.copy()
        for _ in range(n_steps):
            _, state = model.step(state, _random_raymap(rng, cfg))
    return state.tokens.data.tobytes() == before.tobytes() and state.step == 1


def _bits(preds) -> bytes:
    out = b""
    for p in preds:
        for t in (p.x_self, p.c_self, p.x_world, p.c_world, p.quat, p.trans):
            out += t.data.tobytes()
        if p.color is not None:
            out += p.color.data.tobytes()
    return out


def streaming_equality(n_splits: int, seed: int = 0) -> bool:
    cfg = ModelConfig.toy()
    model = StreamModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    ok = True
    with no_grad():
        for _ in range(n_splits):
            n = int(rng.integers(2, 7))
            frames = [rng.uniform(size=(cfg.height, cfg.width, 3)) if i == 0 or rng.uniform() < 0.7
                      else _random_raymap(rng, cfg) for i in range(n)]
            cut = int(rng.integers(1, n))
            full, s_full = model.run_sequence(frames)
            head, state = model.run_sequence(frames[:cut])
            tail = []
            for f in frames[cut:]:
                p, state = model.step(state, f)
                tail.append(p)
            ok &= _bits(full) == _bits(head + tail)
            ok &= s_full.tokens.data.tobytes() == state.tokens.data.tobytes() and s_full.step == state.step
    return bool(ok)


def reset_equivalence(n_views: int = 5, seed: int = 0) -> bool:
    cfg = ModelConfig.toy()
    model = StreamModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    images = [rng.uniform(size=(cfg.height, cfg.width, 3)) for _ in range(n_views)]
    with no_grad():
        stacked, _ = model.run_sequence(images, reset_each_view=True)
        independent = [model.run_sequence([im])[0][0] for im in images]
    return _bits(stacked) == _bits(independent)


def masking_rate(n_frames: int = 10_000, p: float = 0.2, seed: int = 0) -> tuple[float, bool]:
    """Masked fraction over non-first frames and whether any first frame was masked."""
    rng = np.random.default_rng(seed)
    K = synthdata.default_intrinsics(4, 4)
    img = np.zeros((4, 4, 3), np.float32)
    frame = synthdata.FrameSample(img, np.ones((4, 4), np.float32), K, geometry.Pose.identity(),
                                  np.zeros((4, 4), np.float32))
    seq_len = 10
    masked = total = 0
    first_masked = False
    while total < n_frames:
        sample = synthdata.SequenceSample([frame] * seq_len)
        out = synthdata.mask_with_raymaps(sample, p, rng)
        first_masked |= out.frames[0].kind is synthdata.Kind.RAYMAP
        kinds = [f.kind is synthdata.Kind.RAYMAP for f in out.frames[1:]]
        masked += sum(kinds)
        total += len(kinds)
    return masked / total, first_masked


def metric_sanity() -> bool:
    rng = np.random.default_rng(0)
    gt = rng.uniform(1, 5, size=(2, 6, 6))
    d = evaluation.depth_metrics(gt, gt, gt > 0, "per_seq_scale")
    poses = [geometry.Pose(geometry.axis_angle_quat(rng.normal(size=3), rng.uniform(0, 1)), rng.normal(size=3))
             for _ in range(5)]
    t = evaluation.trajectory_metrics(poses, poses)
    cloud = rng.normal(size=(200, 3))
    r = evaluation.recon_metrics(cloud, cloud)
    return (d.abs_rel == 0 and d.delta == 1 and t.ate < 1e-9 and t.rpe_trans < 1e-9 and t.rpe_rot < 1e-9
            and r.acc_mean == 0 and r.comp_mean == 0 and r.nc_mean >= 0.99)


def run(quick: bool = False) -> list[tuple[str, bool, str]]:
    """Run every suite; returns ``(name, passed, detail)`` rows."""
    suites: list[tuple[str, Callable[[], tuple[bool, str]]]] = []

    def prims():
        errs = primitive_gradient_errors()
        worst = max(max(v) for v in errs.values())
        return worst < 1e-6, f"{len(errs)} primitives, worst error {worst:.2e}"

    def full():
        err = toy_model_gradient_error(max_entries=4 if quick else 16)
        return err < 1e-4, f"toy model total loss, error {err:.2e}"

    def purity():
        n = 100 if quick else 1000
        return readout_purity(n), f"{n} raymap steps"

    def stream():
        n = 5 if quick else 20
        return streaming_equality(n), f"{n} random splits"

    def masks():
        frac, first = masking_rate()
        return abs(frac - 0.2) <= 0.01 and not first, f"masked fraction {frac:.4f}"

    suites += [("primitive gradients", prims), ("full-model gradient", full), ("readout purity", purity),
               ("streaming equality", stream), ("single-view reset", lambda: (reset_equivalence(), "5 views")),
               ("metric sanity", lambda: (metric_sanity(), "ideal inputs")), ("raymap masking rate", masks)]
    rows = []
    for name, fn in suites:
        t0 = time.perf_counter()
        ok, detail = fn()
        rows.append((name, bool(ok), f"{detail} ({time.perf_counter() - t0:.1f}s)"))
    return rows
