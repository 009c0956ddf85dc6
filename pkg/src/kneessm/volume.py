"""Label volume I/O and bone surface extraction."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.measure import marching_cubes

from .mesh import MeshError, TriMesh, face_areas, face_components, signed_volume, submesh


class VolumeFormatError(ValueError):
    pass


class LabelAbsentError(ValueError):
    pass


_DTYPES = {"u8": np.dtype("<u1")}


@dataclass(frozen=True)
class LabelVolume:
    """Voxel grid of tissue ids, ``labels[i, j, k]`` at ``origin + (i, j, k) * spacing``."""

    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise VolumeFormatError("labels must be a 3-D array")
        if labels.dtype != np.uint8:
            if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
                raise VolumeFormatError("labels must fit in unsigned 8 bits")
            labels = labels.astype(np.uint8)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise VolumeFormatError("spacing must be 3 positive values")
        if len(origin) != 3:
            raise VolumeFormatError("origin must have 3 components")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple:
        return tuple(int(d) for d in self.labels.shape)

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label


def _sidecar_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".raw") else path
    return stem.with_suffix(".json"), stem.with_suffix(".raw")


def load_label_volume(path) -> LabelVolume:
    """Read a ``<name>.json`` sidecar and its ``<name>.raw`` x-fastest voxel blob."""
    meta_path, raw_path = _sidecar_paths(path)
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{meta_path}: malformed sidecar ({exc})") from exc
    try:
        dims = [int(d) for d in meta["dims"]]
        spacing = [float(s) for s in meta["spacing_mm"]]
        origin = [float(o) for o in meta.get("origin_mm", (0.0, 0.0, 0.0))]
        dtype = meta["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{meta_path}: malformed sidecar ({exc})") from exc
    if len(dims) != 3 or min(dims) <= 0:
        raise VolumeFormatError(f"{meta_path}: dims must be 3 positive integers")
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"{meta_path}: unsupported dtype {dtype!r}")
    blob = raw_path.read_bytes()
    expected = int(np.prod(dims)) * _DTYPES[dtype].itemsize
    if len(blob) != expected:
        raise VolumeFormatError(f"{raw_path}: size mismatch, expected {expected} bytes, found {len(blob)}")
    labels = np.frombuffer(blob, dtype=_DTYPES[dtype]).reshape(dims, order="F").copy()
    return LabelVolume(labels, spacing=spacing, origin=origin)


def save_label_volume(vol: LabelVolume, path) -> None:
    meta_path, raw_path = _sidecar_paths(path)
    meta = {"dims": list(vol.dims), "spacing_mm": list(vol.spacing), "origin_mm": list(vol.origin), "dtype": "u8"}
    meta_path.write_text(json.dumps(meta))
    raw_path.write_bytes(vol.labels.ravel(order="F").astype("<u1").tobytes())


def extract_surface(vol: LabelVolume, label: int, iso: float = 0.5) -> TriMesh:
    """Closed, outward-wound isosurface of one label in mm coordinates.

    The label is binarized and padded by one background voxel on every side,
    so structures touching the volume boundary still close.
    """
    if not 0.0 < iso < 1.0:
        raise ValueError("iso must lie in (0, 1)")
    mask = vol.mask(label)
    if not mask.any():
        raise LabelAbsentError(f"label {label} not present in volume")
    field = np.pad(mask.astype(np.float64), 1)
    verts, faces, _, _ = marching_cubes(field, level=iso, spacing=vol.spacing, method="lewiner")
    if len(faces) == 0:
        raise MeshError("surface extraction produced an empty mesh")
    verts = verts - np.asarray(vol.spacing) + np.asarray(vol.origin)
    mesh = TriMesh(verts, faces)
    keep = face_areas(mesh) > 0
    if not keep.all():
        mesh = submesh(mesh, keep)
    if signed_volume(mesh) < 0:
        mesh = mesh.flipped()
    return mesh


def largest_component(mesh: TriMesh) -> TriMesh:
    """Connected component with the largest surface area."""
    if mesh.is_empty():
        raise MeshError("empty mesh")
    labels = face_components(mesh)
    if labels.max() == 0:
        return mesh
    area = np.bincount(labels, weights=face_areas(mesh))
    return submesh(mesh, labels == int(np.argmax(area)))


def winding_number(mesh: TriMesh, points, chunk: int = 4096) -> np.ndarray:
    """Generalized winding number of ``mesh`` at each point (1 inside, 0 outside a closed surface)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    tri = mesh.triangles()
    out = np.empty(len(pts))
    fchunk = max(1, chunk * 64 // max(1, len(tri)))
    for s in range(0, len(pts), fchunk):
        q = pts[s:s + fchunk, None, None, :]
        A, B, C = (tri[None, :, k, :] - q[:, :, 0] for k in range(3))
        la, lb, lc = (np.linalg.norm(v, axis=-1) for v in (A, B, C))
        det = np.einsum("pfi,pfi->pf", A, np.cross(B, C))
        den = (la * lb * lc + np.einsum("pfi,pfi->pf", A, B) * lc
               + np.einsum("pfi,pfi->pf", B, C) * la + np.einsum("pfi,pfi->pf", C, A) * lb)
        out[s:s + fchunk] = np.arctan2(det, den).sum(axis=1) / (2.0 * np.pi)
    return out


def voxelize_mesh(mesh: TriMesh, spacing, origin, dims, label: int = 1) -> LabelVolume:
    """Label voxels whose centres lie inside a closed mesh."""
    dims = tuple(int(d) for d in dims)
    spacing = np.asarray(spacing, dtype=float)
    origin = np.asarray(origin, dtype=float)
    grids = np.meshgrid(*[origin[i] + np.arange(dims[i]) * spacing[i] for i in range(3)], indexing="ij")
    centres = np.stack([g.ravel() for g in grids], axis=1)
    labels = np.zeros(len(centres), dtype=np.uint8)
    lo, hi = mesh.vertices.min(0), mesh.vertices.max(0)
    box = np.all((centres >= lo) & (centres <= hi), axis=1)
    inside = winding_number(mesh, centres[box]) > 0.5
    idx = np.flatnonzero(box)[inside]
    labels[idx] = label
    return LabelVolume(labels.reshape(dims), spacing=tuple(spacing), origin=tuple(origin))


def common_grid(meshes, spacing: float, pad: int = 1):
    """Origin and dims of a grid of ``spacing`` covering every mesh."""
    lo = np.min([m.vertices.min(0) for m in meshes], axis=0) - pad * spacing
    hi = np.max([m.vertices.max(0) for m in meshes], axis=0) + pad * spacing
    dims = tuple(int(d) for d in np.ceil((hi - lo) / spacing) + 1)
    return (float(spacing),) * 3, tuple(float(v) for v in lo), dims
