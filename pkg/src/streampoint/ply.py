"""ASCII PLY export of coloured, confidence-tagged point clouds."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from streampoint.errors import EmptyExportError, FormatError, ShapeError

_HEADER = """ply
format ascii 1.0
element vertex {n}
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
property float confidence
end_header
"""


def _flatten(arrays: Sequence[np.ndarray] | np.ndarray, channels: int) -> np.ndarray:
    if isinstance(arrays, np.ndarray):
        arrays = [arrays]
    return np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1, channels) for a in arrays], axis=0)


def export_ply(path, points, colors, confidences, threshold: float = 0.0) -> Path:
    """Write points whose confidence is strictly above ``threshold``.

    Inputs may be single arrays or per-frame lists; order is frame-major then
    row-major. Colours are in [0, 1] and stored as 8-bit channels.
    """
    pts = _flatten(points, 3)
    cols = _flatten(colors, 3)
    conf = _flatten(confidences, 1)[:, 0]
    if not (len(pts) == len(cols) == len(conf)):
        raise ShapeError(f"{len(pts)} points, {len(cols)} colours, {len(conf)} confidences")
    keep = (conf > threshold) & np.all(np.isfinite(pts), axis=1)
    if not keep.any():
        raise EmptyExportError(f"no points with confidence above {threshold}")
    rgb = np.clip(np.rint(cols[keep] * 255.0), 0, 255).astype(np.int64)
    lines = [
        f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b} {c:.6f}"
        for (x, y, z), (r, g, b), c in zip(pts[keep], rgb, conf[keep])
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_HEADER.format(n=len(lines)) + "\n".join(lines) + "\n")
    return path


def read_ply(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parse a file written by :func:`export_ply` into ``(points, rgb uint8, confidence)``."""
    path = Path(path)
    text = path.read_text().splitlines()
    try:
        end = text.index("end_header")
        n = int(next(l.split()[-1] for l in text[:end] if l.startswith("element vertex")))
        rows = np.array([l.split() for l in text[end + 1:end + 1 + n]], dtype=np.float64).reshape(n, 7)
    except (ValueError, StopIteration) as exc:
        raise FormatError(f"{path}: malformed PLY ({exc})") from exc
    return rows[:, :3], rows[:, 3:6].astype(np.uint8), rows[:, 6]
