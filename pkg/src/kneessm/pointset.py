"""Ordered point sets and their manifest + binary blob persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import TriMesh

FORMAT_TAG = "kneessm-pointset/1"


@dataclass(frozen=True)
class PointSet:
    points: np.ndarray
    mesh: TriMesh | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point set contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


def as_points(x) -> np.ndarray:
    if isinstance(x, PointSet):
        return x.points
    if isinstance(x, TriMesh):
        return x.vertices
    return np.asarray(x, dtype=float).reshape(-1, 3)


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".bin") else path


def save_pointset(ps, path) -> None:
    """Write ``<name>.json`` manifest and ``<name>.bin`` float64 little-endian blob."""
    stem = _stem(path)
    pts = as_points(ps)
    blob = stem.with_name(stem.name + ".bin")
    blob.write_bytes(pts.astype("<f8").tobytes())
    manifest = {"format": FORMAT_TAG, "n_points": len(pts), "dtype": "<f8", "blob": blob.name}
    stem.with_name(stem.name + ".json").write_text(json.dumps(manifest, indent=1))


def load_pointset(path) -> PointSet:
    stem = _stem(path)
    manifest = json.loads(stem.with_name(stem.name + ".json").read_text())
    if manifest.get("format") != FORMAT_TAG:
        raise ValueError(f"{path}: not a point set manifest")
    data = (stem.parent / manifest["blob"]).read_bytes()
    n = int(manifest["n_points"])
    if len(data) != 24 * n:
        raise ValueError(f"{path}: blob size does not match n_points")
    return PointSet(np.frombuffer(data, dtype="<f8").reshape(n, 3).copy())
