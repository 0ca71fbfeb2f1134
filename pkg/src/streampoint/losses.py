"""Training objective: confidence-weighted pointmap regression, pose and RGB terms.

Every term is a mean (over valid pixels, then over the frames that carry the
relevant supervision) so loss magnitudes do not depend on resolution or
sequence length.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from streampoint import geometry
from streampoint.errors import EmptySupervisionError, InvalidInputError, ShapeError
from streampoint.model import PredictionSet
from streampoint.substrate import tensor as T
from streampoint.substrate.tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.2
    w_pose: float = 1.0
    w_rgb: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0 or self.w_pose < 0 or self.w_rgb < 0:
            raise InvalidInputError(f"invalid loss config {self}")


@dataclass
class NormalizationFactors:
    """Scale of the ground truth and of the prediction.

    ``s_pred`` is a tensor when it is derived from predictions (so gradients
    flow through it) and a plain float when forced to ``s_gt``.
    """

    s_gt: float
    s_pred: float | Tensor


@dataclass
class FrameTarget:
    """Ground truth for one frame; ``None`` fields mean "not supervised"."""

    x_self: np.ndarray | None = None
    x_world: np.ndarray | None = None
    valid: np.ndarray | None = None
    pose: geometry.Pose | None = None
    color: np.ndarray | None = None

    @property
    def has_points(self) -> bool:
        return self.valid is not None and bool(self.valid.any())


def scale_norm_factor(pointmaps: Sequence[np.ndarray | geometry.Pointmap], masks: Sequence[np.ndarray] | None = None) -> float:
    """Mean Euclidean norm of all valid points across a sequence of pointmaps."""
    total, count = 0.0, 0
    for i, pm in enumerate(pointmaps):
        if isinstance(pm, geometry.Pointmap):
            points, valid = pm.points, pm.valid if masks is None else masks[i]
        else:
            points, valid = np.asarray(pm), masks[i]
        norms = np.linalg.norm(np.asarray(points, dtype=np.float64)[valid], axis=-1)
        total += norms.sum()
        count += norms.size
    if count == 0:
        raise EmptySupervisionError("scale normalization needs at least one valid point")
    return total / count


def _valid_rows(x: Tensor, valid: np.ndarray) -> Tensor:
    flat = T.reshape(x, (-1, x.shape[-1])) if x.ndim > 1 else x
    return T.gather(flat, np.flatnonzero(valid.reshape(-1)))


def predicted_scale_factor(points: Sequence[Tensor], masks: Sequence[np.ndarray]) -> Tensor:
    """Differentiable counterpart of :func:`scale_norm_factor` for predictions."""
    norms = [T.l2norm(_valid_rows(p, m)) for p, m in zip(points, masks) if m.any()]
    if not norms:
        raise EmptySupervisionError("scale normalization needs at least one valid point")
    return T.mean(T.concat(norms, axis=0))


COINCIDENT_CAMERAS = 1e-6


def normalization_factors(
    preds: Sequence[PredictionSet], targets: Sequence[FrameTarget], metric: bool
) -> NormalizationFactors:
    """One scale per sequence, computed from world-frame pointmaps.

    Sequences without any point supervision fall back to the mean camera
    distance from the first frame (or 1 when all cameras coincide).
    """
    idx = [i for i, t in enumerate(targets) if t.has_points]
    if idx:
        s_gt = scale_norm_factor([targets[i].x_world for i in idx], [targets[i].valid for i in idx])
        if metric:
            return NormalizationFactors(s_gt, s_gt)
        return NormalizationFactors(s_gt, predicted_scale_factor([preds[i].x_world for i in idx],
                                                                 [targets[i].valid for i in idx]))
    posed = [i for i, t in enumerate(targets) if t.pose is not None]
    gt_norm = float(np.mean([np.linalg.norm(targets[i].pose.t) for i in posed])) if posed else 0.0
    # round-off from relative poses leaves ~1e-16 offsets; treat those cameras as coincident
    if gt_norm <= COINCIDENT_CAMERAS:
        return NormalizationFactors(1.0, 1.0)
    s_gt = gt_norm
    if metric:
        return NormalizationFactors(s_gt, s_gt)
    pred_norm = T.mean(T.concat([T.reshape(T.l2norm(preds[i].trans), (1,)) for i in posed], axis=0))
    if pred_norm.data <= COINCIDENT_CAMERAS:
        return NormalizationFactors(s_gt, s_gt)
    return NormalizationFactors(s_gt, pred_norm)


def _over(x: Tensor, s: float | Tensor) -> Tensor:
    return T.div(x, s) if isinstance(s, Tensor) else T.scale(x, 1.0 / s)


def conf_regression_loss(
    preds: Sequence[Tensor],
    confs: Sequence[Tensor],
    gts: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    factors: NormalizationFactors,
    alpha: float,
) -> Tensor:
    """Mean over frames of the per-pixel ``c * ||x_hat/s_hat - x/s|| - alpha * log c``."""
    terms = []
    for x_hat, c, x, valid in zip(preds, confs, gts, masks):
        if x_hat.shape != x.shape or valid.shape != x.shape[:-1] or c.shape != valid.shape:
            raise ShapeError(f"prediction {x_hat.shape}, confidence {c.shape}, target {x.shape}, mask {valid.shape}")
        if not valid.any():
            continue
        rows = np.flatnonzero(valid.reshape(-1))
        pred_rows = _over(T.gather(T.reshape(x_hat, (-1, 3)), rows), factors.s_pred)
        target = np.asarray(x, dtype=np.float64).reshape(-1, 3)[rows] / factors.s_gt
        residual = T.l2norm(T.sub(pred_rows, target.astype(x_hat.dtype)))
        cv = T.gather(T.reshape(c, (-1,)), rows)
        per_pixel = T.sub(T.mul(cv, residual), T.scale(T.log(cv), alpha))
        terms.append(T.reshape(T.mean(per_pixel), (1,)))
    if not terms:
        raise EmptySupervisionError("no valid pixels to supervise")
    return T.mean(T.concat(terms, axis=0))


def pose_loss(
    pred_quats: Sequence[Tensor],
    pred_trans: Sequence[Tensor],
    gt_poses: Sequence[geometry.Pose],
    factors: NormalizationFactors,
) -> Tensor:
    """Mean over frames of ``||q_hat - q|| + ||t_hat/s_hat - t/s||`` with sign-aligned ``q_hat``."""
    if not (len(pred_quats) == len(pred_trans) == len(gt_poses)):
        raise ShapeError(f"{len(pred_quats)} predicted poses vs {len(gt_poses)} targets")
    if not gt_poses:
        raise EmptySupervisionError("no poses to supervise")
    terms = []
    for q_hat, t_hat, gt in zip(pred_quats, pred_trans, gt_poses):
        q = gt.q.astype(q_hat.dtype)
        if float(np.dot(q_hat.data, q)) < 0:
            q_hat = T.scale(q_hat, -1.0)
        rot = T.l2norm(T.sub(q_hat, q))
        trans = T.l2norm(T.sub(_over(t_hat, factors.s_pred), (gt.t / factors.s_gt).astype(t_hat.dtype)))
        terms.append(T.reshape(T.add(rot, trans), (1,)))
    return T.mean(T.concat(terms, axis=0))


def rgb_loss(pred_color: Tensor, gt_color: np.ndarray) -> Tensor:
    if pred_color.shape != np.shape(gt_color):
        raise ShapeError(f"color prediction {pred_color.shape} vs target {np.shape(gt_color)}")
    diff = T.sub(pred_color, np.asarray(gt_color, dtype=pred_color.dtype))
    return T.mean(T.mul(diff, diff))


def total_loss(
    preds: Sequence[PredictionSet],
    targets: Sequence[FrameTarget],
    cfg: LossConfig = LossConfig(),
    metric: bool = True,
) -> tuple[Tensor, dict[str, float]]:
    """``L_conf + w_pose * L_pose + w_rgb * L_rgb`` plus a float breakdown for logging."""
    if len(preds) != len(targets):
        raise ShapeError(f"{len(preds)} predictions vs {len(targets)} targets")
    factors = normalization_factors(preds, targets, metric)
    point_idx = [i for i, t in enumerate(targets) if t.has_points]
    pose_idx = [i for i, t in enumerate(targets) if t.pose is not None]
    rgb_idx = [i for i, t in enumerate(targets) if t.color is not None and preds[i].color is not None]
    if not (point_idx or pose_idx or rgb_idx):
        raise EmptySupervisionError("sequence carries no supervision")

    dtype = preds[0].x_self.dtype
    total = Tensor(np.zeros((), dtype=dtype))
    breakdown = {"loss_conf": 0.0, "loss_pose": 0.0, "loss_rgb": 0.0}
    if point_idx:
        conf = T.add(
            conf_regression_loss([preds[i].x_self for i in point_idx], [preds[i].c_self for i in point_idx],
                                 [targets[i].x_self for i in point_idx], [targets[i].valid for i in point_idx],
                                 factors, cfg.alpha),
            conf_regression_loss([preds[i].x_world for i in point_idx], [preds[i].c_world for i in point_idx],
                                 [targets[i].x_world for i in point_idx], [targets[i].valid for i in point_idx],
                                 factors, cfg.alpha),
        )
        total = T.add(total, conf)
        breakdown["loss_conf"] = float(conf.data)
    if pose_idx:
        lp = pose_loss([preds[i].quat for i in pose_idx], [preds[i].trans for i in pose_idx],
                       [targets[i].pose for i in pose_idx], factors)
        total = T.add(total, T.scale(lp, cfg.w_pose))
        breakdown["loss_pose"] = float(lp.data)
    if rgb_idx:
        lr = T.mean(T.concat([T.reshape(rgb_loss(preds[i].color, targets[i].color), (1,)) for i in rgb_idx]))
        total = T.add(total, T.scale(lr, cfg.w_rgb))
        breakdown["loss_rgb"] = float(lr.data)
    breakdown["loss_total"] = float(total.data)
    return total, breakdown
