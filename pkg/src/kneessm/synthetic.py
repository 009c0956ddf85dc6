"""Analytic test geometry: spheres, boxes, plane patches, ellipsoid cohorts."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .mesh import TriMesh


def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
         [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
         [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]],
        dtype=float,
    )
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]],
        dtype=np.int64,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        v, f = _subdivide(v, f)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
    return TriMesh(v * radius + np.asarray(center, dtype=float), f)


def _subdivide(v, f):
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    uniq, inv = np.unique(e, axis=0, return_inverse=True)
    mid = 0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]])
    m = inv.ravel().reshape(3, -1).T + len(v)
    a, b, c = f.T
    ab, bc, ca = m.T
    nf = np.concatenate([
        np.stack([a, ab, ca], 1), np.stack([ab, b, bc], 1),
        np.stack([ca, bc, c], 1), np.stack([ab, bc, ca], 1),
    ])
    return np.vstack([v, mid]), nf


def box(size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> TriMesh:
    """Axis-aligned box, 12 outward-wound triangles."""
    sx, sy, sz = size
    corners = np.array(
        [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
         [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]],
        dtype=float,
    ) * [sx, sy, sz] + np.asarray(origin, dtype=float)
    f = np.array(
        [[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
         [0, 1, 5], [0, 5, 4], [2, 3, 7], [2, 7, 6],
         [1, 2, 6], [1, 6, 5], [0, 4, 7], [0, 7, 3]],
        dtype=np.int64,
    )
    return TriMesh(corners, f)


def plane_grid(n: int = 10, size: float = 1.0, z: float = 0.0, quads: bool = False):
    """Regular grid on the z-plane; triangles by default, quad face array with ``quads``."""
    xs = np.linspace(0.0, size, n + 1)
    gx, gy = np.meshgrid(xs, xs, indexing="xy")
    v = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    if quads:
        return v, np.column_stack([a, b, c, d])
    return TriMesh(v, np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])]))


def ellipsoid_mesh(radii, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> TriMesh:
    s = icosphere(subdivisions)
    return TriMesh(s.vertices * np.asarray(radii, dtype=float) + np.asarray(center, dtype=float), s.faces)


def ellipsoid_family(n_samples: int = 30, seed: int = 0, base=(24.0, 14.0, 8.0), spread: float = 0.25):
    """Radii for a cohort with two independently varied semi-axes; the third is fixed."""
    rng = np.random.default_rng(seed)
    base = np.asarray(base, dtype=float)
    radii = np.tile(base, (n_samples, 1))
    radii[:, 0] *= 1.0 + spread * rng.uniform(-1, 1, n_samples)
    radii[:, 1] *= 1.0 + spread * rng.uniform(-1, 1, n_samples)
    return radii


def rasterize_ellipsoid(radii, dims, spacing=(1.0, 1.0, 1.0), center=None, label: int = 1) -> np.ndarray:
    """uint8 label array (x, y, z indexing) with ``label`` inside the ellipsoid."""
    dims = tuple(int(d) for d in dims)
    spacing = np.asarray(spacing, dtype=float)
    if center is None:
        center = (np.asarray(dims) - 1) * spacing / 2.0
    grids = np.meshgrid(*[np.arange(d) * s for d, s in zip(dims, spacing)], indexing="ij")
    r = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, radii))
    out = np.zeros(dims, dtype=np.uint8)
    out[r <= 1.0] = label
    return out


def sinusoidal_warp(points, amplitude: float = 2.0, wavelength: float | None = None) -> np.ndarray:
    """Smooth displacement field, bounded by ``amplitude`` per axis."""
    p = np.asarray(points, dtype=float)
    c = p - p.mean(axis=0)
    if wavelength is None:
        wavelength = 2.0 * np.ptp(p, axis=0).max()
    k = 2.0 * np.pi / wavelength
    d = np.column_stack([
        np.sin(k * c[:, 1] + 0.3),
        np.sin(k * c[:, 2] + 1.1),
        np.sin(k * c[:, 0] + 2.0),
    ])
    return amplitude * d


def bone_like_points(n: int = 1000, seed: int = 0) -> np.ndarray:
    """Asymmetric closed surface point cloud (a bumpy, tapered ellipsoid), mm scale."""
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    x, y, z = u.T
    r = 1.0 + 0.25 * np.sin(3 * x + 1.0) * np.cos(2 * y) + 0.15 * z
    p = u * r[:, None] * np.array([25.0, 15.0, 10.0])
    p[:, 0] += 4.0 * (p[:, 2] / 10.0) ** 2
    return p


def write_ellipsoid_cohort(directory, n_subjects: int = 30, seed: int = 0, spacing=(1.0, 1.0, 1.0),
                           base=(24.0, 14.0, 8.0), spread: float = 0.25) -> list[dict]:
    """Write label volumes for an ellipsoid cohort; returns subject entries for a config."""
    from .volume import LabelVolume, save_label_volume

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    radii = ellipsoid_family(n_subjects, seed=seed, base=base, spread=spread)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (3,))
    dims = tuple(int(d) for d in np.ceil(2 * radii.max(axis=0) / spacing + 6))
    subjects = []
    for i, r in enumerate(radii):
        sid = f"s{i:03d}"
        labels = rasterize_ellipsoid(r, dims, spacing)
        vol = LabelVolume(labels, spacing=tuple(spacing), origin=(0.0, 0.0, 0.0))
        path = directory / f"{sid}.json"
        save_label_volume(vol, path)
        subjects.append({"id": sid, "volume": str(path)})
    (directory / "radii.json").write_text(json.dumps(radii.tolist()))
    return subjects
