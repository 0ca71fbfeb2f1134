"""AdamW training with a warmup+cosine schedule and a three-stage curriculum.

Stage A trains on short static sequences, stage B adds dynamic scenes and
partially annotated sequences, stage C freezes the image encoder and trains
on longer windows. All randomness of step ``k`` comes from
``default_rng([seed, k])`` so a resumed run replays exactly.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from streampoint import synthdata
from streampoint.errors import FormatError, InvalidInputError, NumericFault
from streampoint.losses import LossConfig, total_loss
from streampoint.model import ModelConfig, StreamModel, load_checkpoint, save_checkpoint
from streampoint.substrate.nn import Parameter
from streampoint.synthdata import SequenceSample, Supervision

STAGES = ("A", "B", "C")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    warmup_steps: int = 100
    stage_a_steps: int = 1000
    stage_b_steps: int = 0
    stage_c_steps: int = 0
    batch_size: int = 1
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.05
    grad_clip: float = 1.0
    seed: int = 0
    views: int = 4
    max_views_c: int = 12
    raymap_prob: float = 0.2
    single_view_prob: float = 0.0
    color_jitter: bool = True
    checkpoint_every: int = 500
    alpha: float = 0.2
    w_pose: float = 1.0
    w_rgb: float = 1.0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.lr0 <= 0:
            raise InvalidInputError("lr0 must be positive")
        if min(self.stage_a_steps, self.stage_b_steps, self.stage_c_steps) < 0:
            raise InvalidInputError("stage step counts must be non-negative")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise InvalidInputError(f"warmup_steps={self.warmup_steps} must be below total_steps={self.total_steps}")
        if self.batch_size < 1 or self.views < 1:
            raise InvalidInputError("batch_size and views must be at least 1")

    @property
    def total_steps(self) -> int:
        return self.stage_a_steps + self.stage_b_steps + self.stage_c_steps

    def stage_at(self, step: int) -> str:
        if step <= self.stage_a_steps:
            return "A"
        if step <= self.stage_a_steps + self.stage_b_steps:
            return "B"
        return "C"

    def stage_ends(self) -> list[int]:
        ends, acc = [], 0
        for n in (self.stage_a_steps, self.stage_b_steps, self.stage_c_steps):
            acc += n
            if n:
                ends.append(acc)
        return ends

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.alpha, self.w_pose, self.w_rgb)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidInputError(f"unknown training options: {', '.join(unknown)}")
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig(**d["model"])
        if "betas" in d:
            d["betas"] = tuple(float(b) for b in d["betas"])
        return cls(**d)


# Desk-scale presets: step counts and batch sizes are our own choices, sized
# for a single CPU core.
PRESETS: dict[str, dict] = {
    "overfit": dict(lr0=5e-4, warmup_steps=100, stage_a_steps=2000, raymap_prob=0.2,
                    color_jitter=False, checkpoint_every=1000, weight_decay=0.0),
    "generalize": dict(lr0=5e-4, warmup_steps=200, stage_a_steps=3000, stage_b_steps=2000,
                       stage_c_steps=1000, max_views_c=8, single_view_prob=0.05, checkpoint_every=1000),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise InvalidInputError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr0`` then cosine decay to 0 at ``total_steps``."""
    if step < cfg.warmup_steps:
        return cfg.lr0 * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "AdamState":
        state = cls()
        for key, arr in tensors.items():
            kind, name = key.split(".", 1)
            (state.m if kind == "m" else state.v)[name] = arr
        return state


def adamw_step(params: dict[str, Parameter], grads: dict[str, np.ndarray], moments: AdamState, step: int,
               lr: float, cfg: TrainConfig) -> None:
    """In-place AdamW update with decoupled weight decay and bias correction."""
    if step < 1:
        raise InvalidInputError("adam step counter starts at 1")
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise InvalidInputError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient for {name}")
        m = moments.m.get(name)
        v = moments.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        data = p.data
        if cfg.weight_decay:
            data = data - lr * cfg.weight_decay * data
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = (data - lr * update).astype(p.dtype)
        moments.m[name] = m.astype(p.dtype)
        moments.v[name] = v.astype(p.dtype)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * np.asarray(factor, dtype=grads[k].dtype)
    return total


# -- data -------------------------------------------------------------------------

def load_dataset(data_dir) -> list[SequenceSample]:
    paths = synthdata.list_sequences(data_dir)
    if not paths:
        raise FormatError(f"{data_dir}: no sequences found")
    return [synthdata.read_sequence(p) for p in paths]


def _is_static_full(s: SequenceSample) -> bool:
    return (s.frames[0].supervision is Supervision.FULL
            and not any(f.dynamic_mask.any() for f in s.frames))


def stage_pool(data: list[SequenceSample], stage: str) -> list[int]:
    """Indices of sequences eligible in ``stage`` (A falls back to all when nothing is static)."""
    if stage == "A":
        pool = [i for i, s in enumerate(data) if _is_static_full(s)]
        if pool:
            return pool
    return list(range(len(data)))


def jitter_colors(sample: SequenceSample, rng: np.random.Generator) -> SequenceSample:
    """Same per-channel gain/offset for every frame of the sequence."""
    gain = rng.uniform(0.85, 1.15, size=3)
    offset = rng.uniform(-0.05, 0.05, size=3)
    frames = [replace(f, image=np.clip(f.image * gain + offset, 0.0, 1.0).astype(np.float32))
              for f in sample.frames]
    return replace(sample, frames=frames)


def draw_sample(data: list[SequenceSample], stage: str, cfg: TrainConfig, rng: np.random.Generator
                ) -> tuple[SequenceSample, bool]:
    """One training unit: ``(sample, stacked_single_views)``."""
    pool = stage_pool(data, stage)
    seq = data[pool[int(rng.integers(len(pool)))]]
    if stage == "C":
        length = int(rng.integers(cfg.views, max(cfg.views, cfg.max_views_c) + 1))
    else:
        length = cfg.views
    length = min(length, len(seq))
    start = int(rng.integers(0, len(seq) - length + 1))
    sample = synthdata.window(seq, start, length)
    if cfg.color_jitter:
        sample = jitter_colors(sample, rng)
    singles = len(sample) > 1 and rng.uniform() < cfg.single_view_prob
    if singles:
        return sample, True
    full = sample.frames[0].supervision is Supervision.FULL
    if sample.metric_flag and full and cfg.raymap_prob > 0:
        sample = synthdata.mask_with_raymaps(sample, cfg.raymap_prob, rng)
    return sample, False


def sequence_loss(model: StreamModel, sample: SequenceSample, singles: bool, cfg: TrainConfig):
    """Differentiable loss of one training unit plus its breakdown."""
    if not singles:
        preds, _ = model.run_sequence(synthdata.model_inputs(sample))
        return total_loss(preds, synthdata.frame_targets(sample), cfg.loss, sample.metric_flag)
    preds, _ = model.run_sequence(synthdata.model_inputs(sample), reset_each_view=True)
    # every view is its own one-frame scene
    losses, parts = [], []
    for i, pred in enumerate(preds):
        view = synthdata.window(sample, i, 1)
        loss, br = total_loss([pred], synthdata.frame_targets(view), cfg.loss, sample.metric_flag)
        losses.append(loss)
        parts.append(br)
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    total = total * (1.0 / len(losses))
    breakdown = {k: float(np.mean([p[k] for p in parts])) for k in parts[0]}
    breakdown["loss_total"] = float(total.data)
    return total, breakdown


# -- loop --------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    history: list[dict]


def _checkpoint(model, out_dir: Path, step: int, cfg: TrainConfig, moments: AdamState) -> Path:
    return save_checkpoint(model, out_dir / "checkpoints" / f"step_{step:06d}", step,
                           extra={"train": cfg.to_dict(), "stage": cfg.stage_at(step)},
                           tensors=moments.tensors())


def train(
    cfg: TrainConfig,
    data_dir,
    out_dir,
    resume_from=None,
    stop_after: int | None = None,
    data: list[SequenceSample] | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run the curriculum and return the final checkpoint.

    ``resume_from`` continues from a checkpoint written by an earlier call
    with the same config. ``stop_after`` ends the run early at that global
    step (with a checkpoint) so it can be resumed later.
    """
    out_dir = Path(out_dir)
    data = data if data is not None else load_dataset(data_dir)
    for s in data:
        if (s.frames[0].K.height, s.frames[0].K.width) != (cfg.model.height, cfg.model.width):
            raise InvalidInputError(
                f"sequence images {s.frames[0].K.height}x{s.frames[0].K.width} do not match "
                f"model {cfg.model.height}x{cfg.model.width}")
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        model, manifest, extra = load_checkpoint(resume_from)
        if manifest["config"] != cfg.model.to_dict():
            raise InvalidInputError("checkpoint model config differs from the training config")
        moments = AdamState.from_tensors(extra)
        start = int(manifest["step"]) + 1
    else:
        model = StreamModel(cfg.model, seed=cfg.seed)
        moments = AdamState()
        start = 1
    params = model.named_parameters()
    last = cfg.total_steps if stop_after is None else min(stop_after, cfg.total_steps)
    ends = set(cfg.stage_ends())
    log_path = out_dir / "train_log.jsonl"
    history: list[dict] = []
    ckpt = Path(resume_from) if resume_from is not None else None
    with log_path.open("a") as log:
        for step in range(start, last + 1):
            t0 = time.perf_counter()
            stage = cfg.stage_at(step)
            rng = np.random.default_rng([cfg.seed, step])
            model.zero_grad()
            parts = []
            for _ in range(cfg.batch_size):
                sample, singles = draw_sample(data, stage, cfg, rng)
                loss, br = sequence_loss(model, sample, singles, cfg)
                if not np.isfinite(loss.data):
                    raise NumericFault(f"non-finite loss at step {step}")
                (loss * (1.0 / cfg.batch_size)).backward()
                parts.append(br)
            trainable = {k: p for k, p in params.items()
                         if not (stage == "C" and k.startswith("image_encoder."))}
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in trainable.items()}
            grad_norm = clip_gradients(grads, cfg.grad_clip)
            lr = lr_schedule(step, cfg)
            adamw_step(params, grads, moments, step, lr, cfg)
            record = {"step": step, "stage": stage, "lr": lr}
            for key in ("loss_total", "loss_conf", "loss_pose", "loss_rgb"):
                record[key] = float(np.mean([p[key] for p in parts]))
            record["grad_norm"] = grad_norm
            record["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
            log.write(json.dumps(record) + "\n")
            log.flush()
            history.append(record)
            if on_step is not None:
                on_step(record)
            if step in ends or step % cfg.checkpoint_every == 0 or step == last:
                ckpt = _checkpoint(model, out_dir, step, cfg, moments)
    model.zero_grad()
    if ckpt is None:
        raise InvalidInputError("no training steps were run")
    return TrainResult(ckpt, log_path, history)
