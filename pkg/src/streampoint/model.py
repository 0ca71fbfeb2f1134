"""Stateful recurrent transformer producing pointmaps, confidences and poses.

A frame (image or raymap) is patch-encoded, then interacts with a persistent
set of state tokens through two coupled decoder stacks: the token side reads
from the state while the state side writes the frame into it. Images update
the state; raymap queries and revisit passes only read it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from streampoint import geometry
from streampoint.errors import FormatError, InvalidInputError, ShapeError, UnsupportedVersionError
from streampoint.substrate import nn
from streampoint.substrate import ptm
from streampoint.substrate import tensor as T
from streampoint.substrate.tensor import Tensor

Frame = Union[np.ndarray, geometry.Raymap]

POSE_TOKEN_POS = -1


@dataclass(frozen=True)
class ModelConfig:
    patch: int = 8
    d_enc: int = 128
    d_dec: int = 128
    enc_blocks: int = 4
    dec_blocks: int = 4
    raymap_enc_blocks: int = 2
    heads: int = 4
    n_state: int = 64
    height: int = 32
    width: int = 32
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise InvalidInputError(f"image {self.height}x{self.width} not divisible by patch {self.patch}")
        for name in ("d_enc", "d_dec"):
            if getattr(self, name) % (4 * self.heads):
                # 2D RoPE rotates head features in groups of four
                raise InvalidInputError(f"{name}={getattr(self, name)} must be divisible by 4*heads={4 * self.heads}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @classmethod
    def toy(cls) -> "ModelConfig":
        """Smallest config that still exercises every code path (gradient checks)."""
        return cls(patch=4, d_enc=8, d_dec=8, enc_blocks=1, dec_blocks=1, raymap_enc_blocks=2,
                   heads=2, n_state=3, height=8, width=8, mlp_ratio=2)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SceneState:
    tokens: Tensor
    step: int = 0


@dataclass
class PredictionSet:
    """Per-frame outputs; tensors keep their graph when gradients are enabled."""

    x_self: Tensor
    c_self: Tensor
    x_world: Tensor
    c_world: Tensor
    quat: Tensor
    trans: Tensor
    color: Tensor | None = None

    @property
    def pose(self) -> geometry.Pose:
        q = self.quat.data.astype(np.float64)
        return geometry.Pose(q / np.linalg.norm(q), self.trans.data.astype(np.float64))

    def self_pointmap(self) -> geometry.Pointmap:
        pts = self.x_self.data.astype(np.float64)
        return geometry.Pointmap(pts, geometry.Frame.SELF, np.ones(pts.shape[:2], bool))

    def world_pointmap(self) -> geometry.Pointmap:
        pts = self.x_world.data.astype(np.float64)
        return geometry.Pointmap(pts, geometry.Frame.WORLD, np.ones(pts.shape[:2], bool))

    @property
    def depth(self) -> np.ndarray:
        return self.x_self.data[..., 2].astype(np.float64)


def patch_positions(cfg: ModelConfig) -> np.ndarray:
    gh, gw = cfg.grid
    rows, cols = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=-1)


def patchify(array: np.ndarray, patch: int) -> np.ndarray:
    """``(H, W, C)`` -> ``(n_patches, patch*patch*C)``, row-major over patches."""
    H, W, C = array.shape
    x = array.reshape(H // patch, patch, W // patch, patch, C).transpose(0, 2, 1, 3, 4)
    return x.reshape((H // patch) * (W // patch), patch * patch * C)


def unpatchify(tokens: Tensor, cfg: ModelConfig, channels: int) -> Tensor:
    """Inverse of :func:`patchify` on a differentiable ``(n_patches, p*p*C)`` tensor."""
    gh, gw = cfg.grid
    p = cfg.patch
    x = T.reshape(tokens, (gh, gw, p, p, channels))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (cfg.height, cfg.width, channels))


class Encoder(nn.Module):
    def __init__(self, in_channels: int, n_blocks: int, cfg: ModelConfig, rng: np.random.Generator):
        self.in_channels = in_channels
        self.embed = nn.Linear(cfg.patch * cfg.patch * in_channels, cfg.d_enc, rng)
        self.blocks = [nn.Block(cfg.d_enc, cfg.heads, rng, cfg.mlp_ratio) for _ in range(n_blocks)]
        self.norm = nn.LayerNorm(cfg.d_enc)

    def __call__(self, patches: np.ndarray, pos: np.ndarray) -> Tensor:
        x = self.embed(Tensor(patches.astype(self.embed.weight.dtype)))
        for block in self.blocks:
            x = block(x, pos)
        return self.norm(x)


class DecoderBlock(nn.Module):
    """One side of a coupled decoder layer: self-attn, cross-attn to the other side, MLP."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, mlp_ratio: int):
        self.norm1 = nn.LayerNorm(d)
        self.self_attn = nn.SelfAttention(d, heads, rng)
        self.norm2 = nn.LayerNorm(d)
        self.norm_ctx = nn.LayerNorm(d)
        self.cross_attn = nn.CrossAttention(d, heads, rng)
        self.norm3 = nn.LayerNorm(d)
        self.mlp = nn.MLP(d, mlp_ratio * d, rng)

    def attend_self(self, x: Tensor, pos) -> Tensor:
        return x + self.self_attn(self.norm1(x), pos)

    def attend_other(self, x: Tensor, other: Tensor, pos, other_pos) -> Tensor:
        x = x + self.cross_attn(self.norm2(x), self.norm_ctx(other), pos, other_pos)
        return x + self.mlp(self.norm3(x))


class PointHead(nn.Module):
    """Linear per-token head to ``(H, W, 4)``: three point channels plus confidence."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, positive_depth: bool):
        self.cfg = cfg
        self.positive_depth = positive_depth
        self.proj = nn.Linear(cfg.d_dec, cfg.patch * cfg.patch * 4, rng, std=0.02)

    def __call__(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        out = unpatchify(self.proj(tokens), self.cfg, 4)
        xy, z, conf = T.split(out, [2, 1, 1], axis=-1)
        if self.positive_depth:
            z = T.exp(z)
        points = T.concat([xy, z], axis=-1)
        confidence = T.add(T.exp(T.reshape(conf, (self.cfg.height, self.cfg.width))), 1.0)
        return points, confidence


class WorldHead(nn.Module):
    """Pose-token-modulated attention blocks followed by an unconstrained point head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.blocks = [nn.ModulatedBlock(cfg.d_dec, cfg.d_dec, cfg.heads, rng, cfg.mlp_ratio) for _ in range(2)]
        self.norm = nn.ModulatedLayerNorm(cfg.d_dec, cfg.d_dec, rng)
        self.point = PointHead(cfg, rng, positive_depth=False)

    def __call__(self, tokens: Tensor, z: Tensor, pos, modulate: bool = True) -> tuple[Tensor, Tensor]:
        for block in self.blocks:
            tokens = block(tokens, z, pos, modulate=modulate)
        tokens = self.norm(tokens, z) if modulate else T.layer_norm(tokens)
        return self.point(tokens)


class PoseHead(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.mlp = nn.MLP(cfg.d_dec, cfg.d_dec, rng, d_out=7)
        self.mlp.fc2.weight.data *= 0.1
        self.mlp.fc2.bias.data[0] = 1.0

    def __call__(self, z: Tensor) -> tuple[Tensor, Tensor]:
        quat_raw, trans = T.split(self.mlp(z), [4, 3], axis=-1)
        norm = float(np.linalg.norm(quat_raw.data))
        if norm == 0.0:
            return Tensor(np.array([1.0, 0.0, 0.0, 0.0], dtype=quat_raw.dtype)), trans
        return T.div(quat_raw, T.l2norm(quat_raw)), trans


class ColorHead(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.proj = nn.Linear(cfg.d_dec, cfg.patch * cfg.patch * 3, rng, std=0.02)

    def __call__(self, tokens: Tensor) -> Tensor:
        return T.sigmoid(unpatchify(self.proj(tokens), self.cfg, 3))


class StreamModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.image_encoder = Encoder(3, cfg.enc_blocks, cfg, rng)
        self.raymap_encoder = Encoder(6, cfg.raymap_enc_blocks, cfg, rng)
        self.enc_to_dec = nn.Linear(cfg.d_enc, cfg.d_dec, rng)
        self.pose_token = nn.init_normal(rng, (1, cfg.d_dec), 0.02)
        self.state_init = nn.init_normal(rng, (cfg.n_state, cfg.d_dec), 0.02)
        self.token_blocks = [DecoderBlock(cfg.d_dec, cfg.heads, rng, cfg.mlp_ratio) for _ in range(cfg.dec_blocks)]
        self.state_blocks = [DecoderBlock(cfg.d_dec, cfg.heads, rng, cfg.mlp_ratio) for _ in range(cfg.dec_blocks)]
        self.token_norm = nn.LayerNorm(cfg.d_dec)
        self.state_norm = nn.LayerNorm(cfg.d_dec)
        self.head_self = PointHead(cfg, rng, positive_depth=True)
        self.head_world = WorldHead(cfg, rng)
        self.head_pose = PoseHead(cfg, rng)
        self.head_color = ColorHead(cfg, rng)
        self._pos = patch_positions(cfg)
        self._token_pos = np.concatenate([[[POSE_TOKEN_POS, POSE_TOKEN_POS]], self._pos])

    # -- state -----------------------------------------------------------
    def fresh_state(self) -> SceneState:
        return SceneState(self.state_init, 0)

    # -- encoders ----------------------------------------------------------
    def encode_image(self, image: np.ndarray) -> Tensor:
        cfg = self.cfg
        image = np.asarray(image)
        if image.shape != (cfg.height, cfg.width, 3):
            raise ShapeError(f"image {image.shape} does not match config ({cfg.height}, {cfg.width}, 3)")
        return self.image_encoder(patchify(image * 2.0 - 1.0, cfg.patch), self._pos)

    def encode_raymap(self, raymap: geometry.Raymap) -> Tensor:
        cfg = self.cfg
        if (raymap.height, raymap.width) != (cfg.height, cfg.width):
            raise ShapeError(f"raymap {raymap.height}x{raymap.width} does not match config {cfg.height}x{cfg.width}")
        norms = np.linalg.norm(raymap.directions, axis=-1)
        if np.max(np.abs(norms - 1.0)) > 1e-5:
            raise InvalidInputError("raymap directions must be unit vectors")
        return self.raymap_encoder(patchify(raymap.as_array(), cfg.patch), self._pos)

    # -- decoders ----------------------------------------------------------
    def decode_interact(
        self, tokens: Tensor, state: SceneState, update_state: bool
    ) -> tuple[Tensor, Tensor, SceneState]:
        cfg = self.cfg
        if tokens.shape != (cfg.n_patches, cfg.d_enc):
            raise ShapeError(f"tokens {tokens.shape} do not match ({cfg.n_patches}, {cfg.d_enc})")
        x = T.concat([self.pose_token, self.enc_to_dec(tokens)], axis=0)
        s = state.tokens
        if s.shape != (cfg.n_state, cfg.d_dec):
            raise ShapeError(f"state {s.shape} does not match ({cfg.n_state}, {cfg.d_dec})")
        pos = self._token_pos
        last = len(self.token_blocks) - 1
        for i, (tb, sb) in enumerate(zip(self.token_blocks, self.state_blocks)):
            x1 = tb.attend_self(x, pos)
            s1 = sb.attend_self(s, None)
            x = tb.attend_other(x1, s1, pos, None)
            if update_state or i < last:
                s = sb.attend_other(s1, x1, None, pos)
        x = self.token_norm(x)
        z, feats = T.split(x, [1, cfg.n_patches], axis=0)
        z = T.reshape(z, (cfg.d_dec,))
        if update_state:
            new_state = SceneState(self.state_norm(s), state.step + 1)
        else:
            new_state = state
        return z, feats, new_state

    # -- heads -------------------------------------------------------------
    def predict(self, z: Tensor, feats: Tensor, with_color: bool) -> PredictionSet:
        x_self, c_self = self.head_self(feats)
        x_world, c_world = self.head_world(feats, z, self._pos)
        quat, trans = self.head_pose(z)
        color = self.head_color(feats) if with_color else None
        return PredictionSet(x_self, c_self, x_world, c_world, quat, trans, color)

    # -- streaming API -------------------------------------------------------
    def step(self, state: SceneState, frame: Frame) -> tuple[PredictionSet, SceneState]:
        if isinstance(frame, geometry.Raymap):
            z, feats, new_state = self.decode_interact(self.encode_raymap(frame), state, update_state=False)
            return self.predict(z, feats, with_color=True), new_state
        z, feats, new_state = self.decode_interact(self.encode_image(frame), state, update_state=True)
        return self.predict(z, feats, with_color=False), new_state

    def run_sequence(
        self,
        frames: Sequence[Frame],
        state: SceneState | None = None,
        reset_each_view: bool = False,
    ) -> tuple[list[PredictionSet], SceneState]:
        """Fold :meth:`step` over ``frames`` starting from ``state`` (fresh by default).

        ``reset_each_view`` processes stacked independent views: the state is
        reset to its initialization after every frame.
        """
        if not frames:
            raise InvalidInputError("run_sequence needs at least one frame")
        if state is None:
            if isinstance(frames[0], geometry.Raymap):
                raise InvalidInputError("a sequence cannot start with a raymap query")
            state = self.fresh_state()
        preds = []
        for frame in frames:
            if reset_each_view:
                state = self.fresh_state()
            pred, state = self.step(state, frame)
            preds.append(pred)
        return preds, state

    def revisit(self, frozen: SceneState, frames: Sequence[Frame]) -> list[PredictionSet]:
        """Predict every frame against ``frozen`` without writing to it."""
        preds = []
        for frame in frames:
            if isinstance(frame, geometry.Raymap):
                tokens, with_color = self.encode_raymap(frame), True
            else:
                tokens, with_color = self.encode_image(frame), False
            z, feats, _ = self.decode_interact(tokens, frozen, update_state=False)
            preds.append(self.predict(z, feats, with_color))
        return preds

    def encoder_parameters(self) -> dict[str, nn.Parameter]:
        return {k: v for k, v in self.named_parameters().items() if k.startswith("image_encoder.")}


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_VERSION = 1
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def save_checkpoint(model: StreamModel, directory, step: int = 0, extra: dict | None = None,
                    tensors: dict[str, np.ndarray] | None = None) -> Path:
    """Write one PTM1 file per parameter plus ``manifest.json``.

    ``tensors`` holds additional named arrays (optimizer moments) stored under
    ``extra/``.
    """
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.named_parameters().items():
        fname = f"params/{name}.ptm"
        ptm.save(directory / fname, p.data)
        entries.append({"name": name, "shape": list(p.shape), "dtype": _DTYPE_NAMES[p.dtype], "file": fname})
    extra_entries = []
    if tensors:
        (directory / "extra").mkdir(exist_ok=True)
        for name, arr in sorted(tensors.items()):
            fname = f"extra/{name}.ptm"
            ptm.save(directory / fname, arr)
            extra_entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "step": int(step),
        "parameters": entries,
        "extra_tensors": extra_entries,
        "extra": extra or {},
    }
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    tmp.replace(directory / "manifest.json")
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: checkpoint manifest not found") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    return manifest


def load_checkpoint(directory, dtype=np.float32) -> tuple[StreamModel, dict, dict[str, np.ndarray]]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    model = StreamModel(ModelConfig(**manifest["config"]))
    state = {e["name"]: ptm.load(directory / e["file"]) for e in manifest["parameters"]}
    model.load_state_dict(state)
    model.astype(dtype)
    extra = {e["name"]: ptm.load(directory / e["file"]) for e in manifest.get("extra_tensors", [])}
    return model, manifest, extra
