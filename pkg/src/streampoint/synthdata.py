"""Procedural scenes, an analytic ray-caster and annotated sequence sampling.

Worlds are z-up with a ground plane at z = 0; cameras follow the OpenCV
convention (x right, y down, z forward). Every scene is a pure function of
its seed and every sequence a pure function of ``(scene, rng)``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from streampoint import geometry
from streampoint.errors import FormatError, InvalidInputError, UnsupportedVersionError
from streampoint.geometry import CameraIntrinsics, Pose
from streampoint.losses import FrameTarget
from streampoint.substrate import ptm

SEQUENCE_VERSION = 1
FRAME_DT = 0.25  # seconds between consecutive trajectory samples
MOTION_HORIZON = 4.0  # seconds a dynamic primitive must stay inside the scene
LIGHT_DIR = np.array([0.45, 0.3, 0.84]) / np.linalg.norm([0.45, 0.3, 0.84])
AMBIENT = 0.3
BACKGROUND = np.array([0.62, 0.74, 0.9])
_EPS = 1e-9


class Kind(str, enum.Enum):
    IMAGE = "image"
    RAYMAP = "raymap"


class Supervision(str, enum.Enum):
    FULL = "full"
    CAMERA_ONLY = "camera_only"
    SINGLE_VIEW = "single_view"


@dataclass(frozen=True)
class Primitive:
    """``sphere``: radius in ``size[0]``; ``box``: axis-aligned half extents;
    ``plane``: square of half side ``size[0]`` (0 means unbounded) with ``normal``.
    """

    kind: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    albedo: tuple[float, float, float]
    normal: tuple[float, float, float] = (0.0, 0.0, 1.0)
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "plane"):
            raise InvalidInputError(f"unknown primitive kind {self.kind!r}")

    def center_at(self, t: float) -> np.ndarray:
        return np.asarray(self.center) + t * np.asarray(self.velocity)

    def contains(self, point: np.ndarray, t: float = 0.0) -> bool:
        d = np.asarray(point, dtype=np.float64) - self.center_at(t)
        if self.kind == "sphere":
            return bool(np.linalg.norm(d) < self.size[0])
        if self.kind == "box":
            return bool(np.all(np.abs(d) < np.asarray(self.size)))
        return False


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple[Primitive, ...]
    extent: float
    dynamic: Primitive | None = None
    seed: int | None = None

    @property
    def all_primitives(self) -> tuple[Primitive, ...]:
        return self.primitives + ((self.dynamic,) if self.dynamic is not None else ())


@dataclass
class FrameSample:
    image: np.ndarray
    depth: np.ndarray | None
    K: CameraIntrinsics
    pose: Pose
    dynamic_mask: np.ndarray
    kind: Kind = Kind.IMAGE
    supervision: Supervision = Supervision.FULL
    time: float = 0.0


@dataclass
class SequenceSample:
    frames: list[FrameSample]
    metric_flag: bool = True
    mode: str = "video"
    extent: float = 1.0
    scene_seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise InvalidInputError("a sequence needs at least one frame")
        if self.frames[0].kind is not Kind.IMAGE:
            raise InvalidInputError("the first frame of a sequence must be an image")

    def __len__(self) -> int:
        return len(self.frames)

    def relative_pose(self, i: int) -> Pose:
        """Pose of frame ``i`` in the coordinate frame of the first camera."""
        return geometry.relative_pose(self.frames[0].pose, self.frames[i].pose)


# -- scenes -----------------------------------------------------------------------

def _random_albedo(rng: np.random.Generator) -> tuple[float, float, float]:
    return tuple(float(v) for v in rng.uniform(0.15, 0.95, size=3))


def _disc_point(rng: np.random.Generator, radius: float) -> np.ndarray:
    r = radius * math.sqrt(rng.uniform())
    a = rng.uniform(0, 2 * math.pi)
    return np.array([r * math.cos(a), r * math.sin(a)])


def generate_scene(seed: int) -> SceneSpec:
    """Ground plane plus 3-8 static primitives; one moving sphere 30% of the time."""
    rng = np.random.default_rng(seed)
    extent = float(rng.uniform(4.0, 10.0))
    gray = float(rng.uniform(0.35, 0.6))
    ground = 1.2 * extent  # bounded so far-away ground does not dominate depth statistics
    prims = [Primitive("plane", (0.0, 0.0, 0.0), (ground, ground, 0.0), (gray, gray, gray * 0.9))]
    spread = 0.3 * extent
    for _ in range(int(rng.integers(3, 9))):
        kind = str(rng.choice(["sphere", "box", "plane"], p=[0.45, 0.4, 0.15]))
        x, y = _disc_point(rng, spread)
        if kind == "sphere":
            r = float(rng.uniform(0.05, 0.12) * extent)
            prims.append(Primitive("sphere", (x, y, r), (r, r, r), _random_albedo(rng)))
        elif kind == "box":
            h = rng.uniform(0.04, 0.1, size=3) * extent
            prims.append(Primitive("box", (x, y, float(h[2])), tuple(float(v) for v in h), _random_albedo(rng)))
        else:
            half = float(rng.uniform(0.06, 0.12) * extent)
            a = rng.uniform(0, 2 * math.pi)
            prims.append(Primitive("plane", (x, y, half), (half, half, 0.0), _random_albedo(rng),
                                   normal=(math.cos(a), math.sin(a), 0.0)))
    dynamic = None
    if rng.uniform() < 0.3:
        r = float(rng.uniform(0.04, 0.08) * extent)
        speed = float(rng.uniform(0.1, 0.5))
        a = rng.uniform(0, 2 * math.pi)
        v = speed * np.array([math.cos(a), math.sin(a), 0.0])
        # the midpoint sits far enough inside that the whole path stays in bounds
        mid = _disc_point(rng, spread - speed * MOTION_HORIZON / 2)
        start = np.array([mid[0], mid[1], r]) - v * MOTION_HORIZON / 2
        dynamic = Primitive("sphere", tuple(float(c) for c in start), (r, r, r), _random_albedo(rng),
                            velocity=tuple(float(c) for c in v))
    return SceneSpec(tuple(prims), extent, dynamic, seed)


# -- rendering ---------------------------------------------------------------------

def _plane_axes(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    a = np.cross(n, helper)
    a /= np.linalg.norm(a)
    return a, np.cross(n, a)


def _intersect(prim: Primitive, o: np.ndarray, d: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Hit distances ``(N,)`` (inf on miss) and outward normals ``(N, 3)``."""
    c = prim.center_at(t)
    n_rays = d.shape[0]
    lam = np.full(n_rays, np.inf)
    normals = np.zeros((n_rays, 3))
    if prim.kind == "sphere":
        oc = o - c
        b = d @ oc
        disc = b * b - (oc @ oc - prim.size[0] ** 2)
        hit = disc >= 0
        root = -b[hit] - np.sqrt(disc[hit])
        lam[hit] = np.where(root > _EPS, root, np.inf)
        ok = np.isfinite(lam)
        normals[ok] = (o + lam[ok, None] * d[ok] - c) / prim.size[0]
    elif prim.kind == "box":
        half = np.asarray(prim.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (c - half - o) * inv
            t2 = (c + half - o) * inv
        t1 = np.nan_to_num(t1, nan=-np.inf)
        t2 = np.nan_to_num(t2, nan=np.inf)
        t_near = np.minimum(t1, t2).max(axis=1)
        t_far = np.maximum(t1, t2).min(axis=1)
        ok = (t_near <= t_far) & (t_near > _EPS)
        lam[ok] = t_near[ok]
        axis = np.argmax(np.minimum(t1, t2)[ok], axis=1)
        rows = np.flatnonzero(ok)
        normals[rows, axis] = -np.sign(d[rows, axis])
    else:
        n = np.asarray(prim.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            root = ((c - o) @ n) / denom
        ok = (np.abs(denom) > 1e-12) & (root > _EPS)
        if prim.size[0] > 0:
            a, b = _plane_axes(n)
            rel = o + np.where(ok, root, 0.0)[:, None] * d - c
            ok &= (np.abs(rel @ a) <= prim.size[0]) & (np.abs(rel @ b) <= prim.size[1])
        lam[ok] = root[ok]
        normals[ok] = np.where((denom[ok] > 0)[:, None], -n, n)
    return lam, normals


def cast_rays(scene: SceneSpec, origin: np.ndarray, directions: np.ndarray, t: float = 0.0
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest hit along each unit ray: ``(distance, normal, primitive index)``; misses give inf and -1."""
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    o = np.asarray(origin, dtype=np.float64)
    best = np.full(d.shape[0], np.inf)
    normal = np.zeros_like(d)
    owner = np.full(d.shape[0], -1)
    for idx, prim in enumerate(scene.all_primitives):
        lam, nrm = _intersect(prim, o, d, t)
        closer = lam < best
        best[closer] = lam[closer]
        normal[closer] = nrm[closer]
        owner[closer] = idx
    return best, normal, owner


def render_frame(scene: SceneSpec, K: CameraIntrinsics, pose: Pose, t: float = 0.0, dtype=np.float32
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray-cast ``scene`` at time ``t``: ``(image, depth, dynamic_mask)``.

    Depth is the camera-frame z of the nearest hit, 0 where rays escape.
    Computation is float64; ``dtype`` only sets the returned precision.
    """
    for prim in scene.all_primitives:
        if prim.contains(pose.t, t):
            raise InvalidInputError(f"camera at {pose.t.tolist()} lies inside a {prim.kind}")
    d = geometry.camera_to_raymap(K, pose).directions.reshape(-1, 3)
    best, normal, owner = cast_rays(scene, pose.t, d, t)
    hit = owner >= 0
    albedo = np.array([p.albedo for p in scene.all_primitives] + [tuple(BACKGROUND)])[owner]
    shade = AMBIENT + (1 - AMBIENT) * np.clip(normal @ LIGHT_DIR, 0.0, None)
    color = np.where(hit[:, None], albedo * shade[:, None], BACKGROUND)
    z_cam = d @ pose.R[:, 2]  # camera-frame z component of each unit ray
    depth = np.where(hit, best, 0.0) * z_cam
    mask = hit & (owner == len(scene.primitives)) if scene.dynamic is not None else np.zeros_like(hit)
    H, W = K.height, K.width
    return (color.reshape(H, W, 3).astype(dtype), depth.reshape(H, W).astype(dtype),
            mask.reshape(H, W).astype(dtype))


# -- cameras & sequences -------------------------------------------------------------

def default_intrinsics(height: int = 32, width: int = 32) -> CameraIntrinsics:
    return CameraIntrinsics(fx=float(width), fy=float(width), cx=(width - 1) / 2, cy=(height - 1) / 2,
                            width=width, height=height)


def look_at(eye: np.ndarray, target: np.ndarray) -> Pose:
    """Camera-to-world pose at ``eye`` looking at ``target`` with world +z up."""
    f = np.asarray(target, float) - np.asarray(eye, float)
    f /= np.linalg.norm(f)
    r = np.cross(f, [0.0, 0.0, 1.0])
    r /= np.linalg.norm(r)
    return Pose.from_rt(np.stack([r, np.cross(f, r), f], axis=1), eye)


def orbit_pose(extent: float, azimuth: float, radius: float, height: float, target_z: float) -> Pose:
    eye = np.array([radius * math.cos(azimuth), radius * math.sin(azimuth), height]) * extent
    return look_at(eye, np.array([0.0, 0.0, target_z * extent]))


def frame_overlap(a: FrameSample, b: FrameSample) -> float:
    """Fraction of ``a``'s valid pixels whose world points project inside ``b``."""
    pm = geometry.depth_to_pointmap(a.depth, a.K)
    if not pm.valid.any():
        return 0.0
    world = a.pose.apply(pm.points[pm.valid])
    cam = geometry.pose_inverse(b.pose).apply(world)
    front = cam[:, 2] > _EPS
    uv = geometry.project_points(cam[front], b.K)
    inside = (uv[:, 0] >= 0) & (uv[:, 0] <= b.K.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= b.K.height - 1)
    return float(inside.sum()) / len(world)


def _render_sample(scene: SceneSpec, K: CameraIntrinsics, pose: Pose, t: float) -> FrameSample:
    image, depth, mask = render_frame(scene, K, pose, t)
    return FrameSample(image, depth, K, pose, mask, time=t)


def sample_sequence(
    scene: SceneSpec,
    n_views: int,
    mode: str,
    rng: np.random.Generator,
    K: CameraIntrinsics | None = None,
    camera_only_prob: float = 0.1,
    min_overlap: float = 0.2,
) -> SequenceSample:
    """Render ``n_views`` frames along a jittered orbit (video) or as a shuffled collection."""
    if n_views < 1:
        raise InvalidInputError("n_views must be at least 1")
    if mode not in ("video", "collection"):
        raise InvalidInputError(f"unknown mode {mode!r}")
    if mode == "collection" and scene.dynamic is not None:
        raise InvalidInputError("dynamic scenes can only be sampled as videos")
    K = K or default_intrinsics()
    az0 = rng.uniform(0, 2 * math.pi)
    radius = rng.uniform(0.55, 0.75)
    height = rng.uniform(0.2, 0.4)
    target_z = rng.uniform(0.0, 0.08)
    frames: list[FrameSample] = []
    if mode == "video":
        direction = rng.choice([-1.0, 1.0])
        step = math.radians(rng.uniform(2.0, 3.0))
        phase = rng.uniform(0, 2 * math.pi, size=2)
        index = 0
        for i in range(n_views):
            if i:
                index += int(rng.integers(1, 4))
            wobble = 0.03 * np.sin(0.3 * index + phase)
            pose = orbit_pose(scene.extent, az0 + direction * step * index, radius * (1 + wobble[0]),
                              height * (1 + wobble[1]), target_z)
            frames.append(_render_sample(scene, K, pose, index * FRAME_DT))
    else:
        for _attempt in range(400):
            if len(frames) == n_views:
                break
            pose = orbit_pose(scene.extent, az0 + rng.uniform(-1.0, 1.0), rng.uniform(0.55, 0.75),
                              rng.uniform(0.2, 0.4), target_z)
            cand = _render_sample(scene, K, pose, 0.0)
            if all(frame_overlap(cand, f) >= min_overlap and frame_overlap(f, cand) >= min_overlap
                   for f in frames):
                frames.append(cand)
        if len(frames) < n_views:
            raise InvalidInputError(f"could not place {n_views} overlapping views")
        frames = [frames[i] for i in rng.permutation(n_views)]
    if n_views == 1:
        supervision = Supervision.SINGLE_VIEW
    elif rng.uniform() < camera_only_prob:
        supervision = Supervision.CAMERA_ONLY
    else:
        supervision = Supervision.FULL
    for f in frames:
        f.supervision = supervision
        if supervision is Supervision.CAMERA_ONLY:
            f.depth = None
    return SequenceSample(frames, metric_flag=True, mode=mode, extent=scene.extent, scene_seed=scene.seed)


def mask_with_raymaps(sample: SequenceSample, p: float, rng: np.random.Generator) -> SequenceSample:
    """Turn each non-first frame into a raymap query with probability ``p``.

    The rendered image stays attached as colour supervision. Always consumes
    one uniform draw per non-first frame so callers see a fixed rng advance.
    """
    if not sample.metric_flag:
        raise InvalidInputError("raymap masking needs metric ground truth")
    if not 0.0 <= p <= 1.0:
        raise InvalidInputError(f"masking probability {p} outside [0, 1]")
    draws = rng.uniform(size=len(sample.frames) - 1)
    frames = [sample.frames[0]] + [
        replace(f, kind=Kind.RAYMAP) if u < p else f for f, u in zip(sample.frames[1:], draws)
    ]
    return replace(sample, frames=frames)


def window(sample: SequenceSample, start: int, length: int) -> SequenceSample:
    """Contiguous sub-sequence; its first frame becomes the new world frame."""
    frames = [replace(f, kind=Kind.IMAGE) if i == 0 else f
              for i, f in enumerate(sample.frames[start:start + length])]
    return replace(sample, frames=frames)


# -- model-facing views ----------------------------------------------------------------

def model_inputs(sample: SequenceSample) -> list[np.ndarray | geometry.Raymap]:
    """Images as-is; raymap frames use ground-truth cameras relative to frame 0."""
    out: list[np.ndarray | geometry.Raymap] = []
    for i, f in enumerate(sample.frames):
        if f.kind is Kind.RAYMAP:
            out.append(geometry.camera_to_raymap(f.K, sample.relative_pose(i)))
        else:
            out.append(f.image.astype(np.float64))
    return out


def frame_targets(sample: SequenceSample) -> list[FrameTarget]:
    """Ground truth for every frame, expressed in the first camera's frame."""
    targets = []
    for i, f in enumerate(sample.frames):
        rel = sample.relative_pose(i)
        color = f.image.astype(np.float64) if f.kind is Kind.RAYMAP else None
        if f.depth is None or f.supervision is Supervision.CAMERA_ONLY:
            targets.append(FrameTarget(pose=rel, color=color))
            continue
        pm = geometry.depth_to_pointmap(f.depth, f.K)
        world = geometry.transform_pointmap(pm, rel)
        targets.append(FrameTarget(pm.points, world.points, pm.valid, rel, color))
    return targets


# -- on-disk format ----------------------------------------------------------------------

def write_sequence(sample: SequenceSample, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, f in enumerate(sample.frames):
        sub = f"frame_{i:03d}"
        (directory / sub).mkdir(exist_ok=True)
        files = {"image": f"{sub}/image.ptm", "dynmask": f"{sub}/dynmask.ptm"}
        ptm.save(directory / files["image"], f.image.astype(np.float32))
        ptm.save(directory / files["dynmask"], f.dynamic_mask.astype(np.float32))
        if f.depth is not None:
            files["depth"] = f"{sub}/depth.ptm"
            ptm.save(directory / files["depth"], f.depth.astype(np.float32))
        entries.append({
            "kind": f.kind.value,
            "supervision": f.supervision.value,
            "files": files,
            "K": [f.K.fx, f.K.fy, f.K.cx, f.K.cy],
            "size": [f.K.width, f.K.height],
            "pose": f.pose.as_list(),
            "time": f.time,
        })
    manifest = {
        "version": SEQUENCE_VERSION,
        "n_frames": len(sample.frames),
        "metric_flag": sample.metric_flag,
        "mode": sample.mode,
        "extent": sample.extent,
        "scene_seed": sample.scene_seed,
        "meta": sample.meta,
        "frames": entries,
    }
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1))
    tmp.replace(directory / "manifest.json")
    return directory


def read_sequence(directory) -> SequenceSample:
    directory = Path(directory)
    path = directory / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: sequence manifest not found") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if manifest.get("version") != SEQUENCE_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported sequence version {manifest.get('version')}")
    try:
        frames = []
        for entry in manifest["frames"]:
            fx, fy, cx, cy = entry["K"]
            w, h = entry["size"]
            K = CameraIntrinsics(fx, fy, cx, cy, int(w), int(h))
            files = entry["files"]
            depth = ptm.load(directory / files["depth"]) if "depth" in files else None
            frames.append(FrameSample(
                image=ptm.load(directory / files["image"]),
                depth=depth,
                K=K,
                pose=Pose.from_list(entry["pose"]),
                dynamic_mask=ptm.load(directory / files["dynmask"]),
                kind=Kind(entry["kind"]),
                supervision=Supervision(entry["supervision"]),
                time=float(entry.get("time", 0.0)),
            ))
        if len(frames) != manifest["n_frames"]:
            raise FormatError(f"{path}: n_frames={manifest['n_frames']} but {len(frames)} entries")
        return SequenceSample(frames, bool(manifest["metric_flag"]), manifest["mode"],
                              float(manifest.get("extent", 1.0)), manifest.get("scene_seed"),
                              manifest.get("meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc


def list_sequences(data_dir) -> list[Path]:
    """Sequence directories under ``data_dir`` in sorted order."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FormatError(f"{data_dir}: data directory not found")
    return sorted(p.parent for p in data_dir.glob("*/manifest.json"))


def generate_dataset(seeds: Sequence[int], out_dir, n_views: int = 4, sequences_per_scene: int = 1,
                     modes: Sequence[str] = ("video", "collection"), camera_only_prob: float = 0.1,
                     height: int = 32, width: int = 32) -> list[Path]:
    """Render ``sequences_per_scene`` sequences for every scene seed into ``out_dir``."""
    out_dir = Path(out_dir)
    K = default_intrinsics(height, width)
    written = []
    for seed in seeds:
        scene = generate_scene(seed)
        for j in range(sequences_per_scene):
            rng = np.random.default_rng([seed, j])
            mode = str(rng.choice(list(modes))) if scene.dynamic is None else "video"
            sample = sample_sequence(scene, n_views, mode, rng, K=K, camera_only_prob=camera_only_prob)
            written.append(write_sequence(sample, out_dir / f"scene_{seed:05d}_{j:02d}"))
    index = {"version": SEQUENCE_VERSION, "sequences": [p.name for p in written]}
    tmp = out_dir / "dataset.json.tmp"
    tmp.write_text(json.dumps(index, indent=1))
    tmp.replace(out_dir / "dataset.json")
    return written
