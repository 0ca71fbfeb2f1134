"""Depth, trajectory and reconstruction metrics plus the evaluation harness."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from streampoint import geometry, synthdata
from streampoint.errors import DegenerateError, EmptyEvaluationError, InvalidInputError, ShapeError
from streampoint.geometry import Pose
from streampoint.model import PredictionSet, StreamModel, load_checkpoint
from streampoint.substrate.tensor import no_grad

DELTA_THRESHOLD = 1.25
K_NORMALS = 8


class Alignment(str, enum.Enum):
    NONE = "none"
    PER_FRAME_MEDIAN = "per_frame_median"
    PER_SEQ_SCALE = "per_seq_scale"
    PER_SEQ_SCALE_SHIFT = "per_seq_scale_shift"


@dataclass(frozen=True)
class DepthReport:
    abs_rel: float
    delta: float
    alignment: str


@dataclass(frozen=True)
class TrajReport:
    ate: float
    rpe_trans: float
    rpe_rot: float


@dataclass(frozen=True)
class ReconReport:
    acc_mean: float
    acc_median: float
    comp_mean: float
    comp_median: float
    nc_mean: float
    nc_median: float


# -- depth ---------------------------------------------------------------------------

def _as_frames(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


def align_depth(pred, gt, valid, alignment: Alignment | str) -> np.ndarray:
    """Apply one of the four alignment regimes to ``pred`` (shape ``(F, H, W)`` or ``(H, W)``)."""
    alignment = Alignment(alignment)
    pred, gt = _as_frames(pred), _as_frames(gt)
    valid = _as_frames(valid).astype(bool) & (gt > 0)
    if pred.shape != gt.shape or valid.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape}, gt {gt.shape}, mask {valid.shape} differ")
    if not valid.any():
        raise EmptyEvaluationError("no valid depth pixels")
    if alignment is Alignment.NONE:
        return pred.copy()
    if alignment is Alignment.PER_FRAME_MEDIAN:
        out = pred.copy()
        for i in range(len(pred)):
            if valid[i].any():
                med = np.median(pred[i][valid[i]])
                if med <= 0:
                    raise DegenerateError(f"frame {i}: non-positive median predicted depth")
                out[i] = pred[i] * (np.median(gt[i][valid[i]]) / med)
        return out
    p, g = pred[valid], gt[valid]
    if alignment is Alignment.PER_SEQ_SCALE:
        denom = float(p @ p)
        if denom <= 0:
            raise DegenerateError("predicted depth is identically zero")
        return pred * (float(p @ g) / denom)
    A = np.stack([p, np.ones_like(p)], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, g, rcond=None)
    return a * pred + b


def depth_metrics(pred, gt, valid, alignment: Alignment | str = Alignment.NONE) -> DepthReport:
    """Abs Rel and the fraction of pixels with ``max(d'/d, d/d') < 1.25`` after alignment."""
    alignment = Alignment(alignment)
    aligned = align_depth(pred, gt, valid, alignment)
    gt = _as_frames(gt)
    mask = _as_frames(valid).astype(bool) & (gt > 0)
    d = gt[mask]
    p = aligned[mask]
    abs_rel = float(np.mean(np.abs(p - d) / d))
    # non-positive predictions can never be within the threshold
    p_pos = np.maximum(p, np.finfo(np.float64).tiny)
    ratio = np.maximum(p_pos / d, d / p_pos)
    delta = float(np.mean((ratio < DELTA_THRESHOLD) & (p > 0)))
    return DepthReport(abs_rel, delta, alignment.value)


# -- trajectories ----------------------------------------------------------------------

def _relative(a: Pose, b: Pose) -> tuple[np.ndarray, np.ndarray]:
    Ra, Rb = a.R, b.R
    return Ra.T @ Rb, Ra.T @ (b.t - a.t)


def trajectory_metrics(pred: Sequence[Pose], gt: Sequence[Pose]) -> TrajReport:
    """ATE after Sim(3) alignment of camera centres; RPE over consecutive pairs."""
    if len(pred) != len(gt):
        raise InvalidInputError(f"{len(pred)} predicted poses vs {len(gt)} ground-truth poses")
    if len(gt) < 3:
        raise InvalidInputError("trajectory metrics need at least 3 poses")
    src = np.stack([p.t for p in pred])
    dst = np.stack([g.t for g in gt])
    sim = geometry.umeyama_sim3(src, dst)
    residual = sim.apply(src) - dst
    ate = float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1))))
    trans_err, rot_err = [], []
    for i in range(len(gt) - 1):
        Rg, tg = _relative(gt[i], gt[i + 1])
        Rp, tp = _relative(pred[i], pred[i + 1])
        tp = sim.s * tp
        # error transform = inv(delta_gt) o delta_pred
        R_err = Rg.T @ Rp
        t_err = Rg.T @ (tp - tg)
        trans_err.append(float(np.linalg.norm(t_err)))
        rot_err.append(geometry.rotation_angle_deg(R_err))
    return TrajReport(ate, float(np.mean(trans_err)), float(np.mean(rot_err)))


# -- reconstruction ---------------------------------------------------------------------

def nearest_neighbors(query: np.ndarray, ref: np.ndarray, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest neighbour in ``ref`` for every query point: ``(distance, index)``."""
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    ref_sq = np.sum(ref * ref, axis=1)
    idx = np.empty(len(query), dtype=np.int64)
    for s in range(0, len(query), chunk):
        q = query[s:s + chunk]
        d2 = ref_sq[None, :] - 2.0 * (q @ ref.T)
        idx[s:s + chunk] = np.argmin(d2, axis=1)
    # recompute distances directly so coincident points give exactly 0
    dist = np.linalg.norm(query - ref[idx], axis=1)
    return dist, idx


def knn_indices(points: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    """Indices of the ``k`` nearest points (self included) for every point."""
    points = np.asarray(points, dtype=np.float64)
    sq = np.sum(points * points, axis=1)
    out = np.empty((len(points), k), dtype=np.int64)
    for s in range(0, len(points), chunk):
        q = points[s:s + chunk]
        d2 = sq[None, :] - 2.0 * (q @ points.T) + sq[s:s + chunk, None]
        part = np.argpartition(d2, k - 1, axis=1)[:, :k]
        out[s:s + chunk] = part
    return out


def pca_normals(points: np.ndarray, k: int = K_NORMALS) -> np.ndarray:
    """Unit normals from the smallest principal axis of each k-neighbourhood."""
    points = np.asarray(points, dtype=np.float64)
    nbrs = points[knn_indices(points, k)]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def recon_metrics(pred: np.ndarray, gt: np.ndarray, k_normals: int = K_NORMALS) -> ReconReport:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if k_normals < 3:
        raise InvalidInputError("k_normals must be at least 3")
    if len(pred) == 0 or len(gt) == 0:
        raise EmptyEvaluationError(f"empty cloud (pred {len(pred)} points, gt {len(gt)} points)")
    if len(pred) < k_normals or len(gt) < k_normals:
        raise InvalidInputError(f"clouds of {len(pred)} and {len(gt)} points are smaller than k_normals={k_normals}")
    acc, idx = nearest_neighbors(pred, gt)
    comp, _ = nearest_neighbors(gt, pred)
    n_pred = pca_normals(pred, k_normals)
    n_gt = pca_normals(gt, k_normals)
    nc = np.clip(np.abs(np.sum(n_pred * n_gt[idx], axis=1)), 0.0, 1.0)
    return ReconReport(float(acc.mean()), float(np.median(acc)), float(comp.mean()), float(np.median(comp)),
                       float(nc.mean()), float(np.median(nc)))


# -- harness ------------------------------------------------------------------------------

PROTOCOLS = ("depth", "pose", "recon")


@dataclass
class SequenceOutputs:
    """Everything the metrics consume for one sequence."""

    depth: np.ndarray  # (F, H, W)
    poses: list[Pose]
    world_points: list[np.ndarray]  # per frame (H, W, 3)
    world_conf: list[np.ndarray]  # per frame (H, W)
    keep: list[np.ndarray] | None = None  # explicit cloud masks; bypasses the confidence filter


def predict(model: StreamModel, sample: synthdata.SequenceSample, mode: str = "online") -> list[PredictionSet]:
    """Online streaming or revisit (second pass against the frozen final state)."""
    for f in sample.frames:
        if (f.K.height, f.K.width) != (model.cfg.height, model.cfg.width):
            raise ShapeError(f"sequence frames ({f.K.height}, {f.K.width}) vs model ({model.cfg.height}, {model.cfg.width})")
    inputs = synthdata.model_inputs(sample)
    with no_grad():
        preds, state = model.run_sequence(inputs)
        if mode == "online":
            return preds
        if mode == "revisit":
            return model.revisit(state, inputs)
    raise InvalidInputError(f"unknown inference mode {mode!r}")


def outputs_from_predictions(preds: Sequence[PredictionSet]) -> SequenceOutputs:
    return SequenceOutputs(
        depth=np.stack([p.depth for p in preds]),
        poses=[p.pose for p in preds],
        world_points=[p.x_world.data.astype(np.float64) for p in preds],
        world_conf=[p.c_world.data.astype(np.float64) for p in preds],
    )


def outputs_from_ground_truth(sample: synthdata.SequenceSample) -> SequenceOutputs:
    """Ground truth dressed up as predictions (harness sanity bypass)."""
    targets = synthdata.frame_targets(sample)
    depth, world, keep = [], [], []
    for f, t in zip(sample.frames, targets):
        shape = (f.K.height, f.K.width)
        depth.append(np.zeros(shape) if f.depth is None else f.depth.astype(np.float64))
        world.append(np.zeros(shape + (3,)) if t.x_world is None else t.x_world)
        keep.append(np.zeros(shape, bool) if t.valid is None else t.valid)
    conf = [1.0 + k.astype(np.float64) for k in keep]
    return SequenceOutputs(np.stack(depth), [t.pose for t in targets], world, conf, keep)


def confident_points(points: Sequence[np.ndarray], conf: Sequence[np.ndarray], quantile: float = 0.5) -> np.ndarray:
    """Stack points whose confidence is strictly above the per-frame ``quantile``."""
    kept = []
    for p, c in zip(points, conf):
        thresh = np.quantile(c, quantile)
        kept.append(p[c > thresh])
    return np.concatenate(kept, axis=0) if kept else np.zeros((0, 3))


def gt_cloud(sample: synthdata.SequenceSample) -> np.ndarray:
    targets = synthdata.frame_targets(sample)
    clouds = [t.x_world[t.valid] for t in targets if t.valid is not None]
    if not clouds:
        raise EmptyEvaluationError("sequence has no depth annotations")
    return np.concatenate(clouds, axis=0)


def sequence_metrics(sample: synthdata.SequenceSample, out: SequenceOutputs, protocol: str,
                     alignment: Alignment | str, conf_quantile: float = 0.5) -> dict[str, float]:
    if protocol == "depth":
        if any(f.depth is None for f in sample.frames):
            raise EmptyEvaluationError("sequence has no depth annotations")
        gt = np.stack([f.depth.astype(np.float64) for f in sample.frames])
        rep = depth_metrics(out.depth, gt, gt > 0, alignment)
        return {"abs_rel": rep.abs_rel, "delta": rep.delta}
    if protocol == "pose":
        gt_poses = [sample.relative_pose(i) for i in range(len(sample))]
        rep = trajectory_metrics(out.poses, gt_poses)
        return {"ate": rep.ate, "rpe_trans": rep.rpe_trans, "rpe_rot": rep.rpe_rot,
                "ate_rel_extent": rep.ate / sample.extent}
    if protocol == "recon":
        if out.keep is not None:
            pred = np.concatenate([p[k] for p, k in zip(out.world_points, out.keep)], axis=0)
        else:
            pred = confident_points(out.world_points, out.world_conf, conf_quantile)
        if len(pred) == 0:
            raise EmptyEvaluationError("confidence filter removed every point")
        return asdict(recon_metrics(pred, gt_cloud(sample)))
    raise InvalidInputError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")


def aggregate(per_sequence: Sequence[dict]) -> dict[str, dict[str, float]]:
    keys = sorted({k for row in per_sequence for k, v in row.items() if isinstance(v, float)})
    agg = {}
    for k in keys:
        vals = [row[k] for row in per_sequence if isinstance(row.get(k), float)]
        agg[k] = {"mean": float(np.mean(vals)), "median": float(np.median(vals))}
    return agg


def evaluate_sequences(
    model: StreamModel | None,
    sequences: Sequence[tuple[str, synthdata.SequenceSample]],
    protocol: str,
    alignment: Alignment | str = Alignment.NONE,
    mode: str = "online",
    bypass: bool = False,
    conf_quantile: float = 0.5,
) -> dict:
    """Report dict; per-sequence failures are recorded and the run continues."""
    if protocol not in PROTOCOLS:
        raise InvalidInputError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    alignment = Alignment(alignment)
    if model is None and not bypass:
        raise InvalidInputError("a model is required unless the ground-truth bypass is enabled")
    rows = []
    for seq_id, sample in sequences:
        out = outputs_from_ground_truth(sample) if bypass else outputs_from_predictions(predict(model, sample, mode))
        try:
            metrics = sequence_metrics(sample, out, protocol, alignment, conf_quantile)
            rows.append({"id": seq_id, **metrics})
        except (EmptyEvaluationError, DegenerateError, InvalidInputError) as exc:
            rows.append({"id": seq_id, "error": f"{type(exc).__name__}: {exc}"})
    return {
        "protocol": protocol,
        "alignment": alignment.value,
        "mode": mode,
        "per_sequence": rows,
        "aggregate": aggregate([r for r in rows if "error" not in r]),
    }


def evaluate_run(checkpoint, eval_dir, protocol: str, alignment: Alignment | str = Alignment.NONE,
                 mode: str = "online", bypass: bool = False, conf_quantile: float = 0.5,
                 out_path=None) -> dict:
    """Evaluate every sequence under ``eval_dir`` and optionally write the JSON report."""
    model = None if bypass else load_checkpoint(checkpoint)[0]
    seqs = [(p.name, synthdata.read_sequence(p)) for p in synthdata.list_sequences(eval_dir)]
    if not seqs:
        raise EmptyEvaluationError(f"{eval_dir}: no sequences to evaluate")
    report = evaluate_sequences(model, seqs, protocol, alignment, mode, bypass, conf_quantile)
    if out_path is not None:
        write_report(report, out_path)
    return report


def write_report(report: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)
    return path
