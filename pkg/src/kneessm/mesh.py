"""Triangle mesh container, basic measures and STL/OBJ input-output."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

DEGENERATE_AREA = 1e-14


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class TriMesh:
    """Triangle surface in physical (mm) coordinates.

    Parameters
    ----------
    vertices : array of shape (n_vertices, 3)
    faces : integer array of shape (n_faces, 3), counter-clockwise seen from outside
    normals : optional array of shape (n_vertices, 3)
    """

    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex coordinates")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(n) != len(v):
                raise MeshError("normals must match vertex count")
            object.__setattr__(self, "normals", n)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def is_empty(self) -> bool:
        return self.n_faces == 0

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(vertices, self.faces)

    def flipped(self) -> "TriMesh":
        return TriMesh(self.vertices, self.faces[:, ::-1])

    def triangles(self) -> np.ndarray:
        """Corner coordinates, shape (n_faces, 3, 3)."""
        return self.vertices[self.faces]


def _require_nonempty(mesh: TriMesh):
    if mesh.is_empty():
        raise MeshError("empty mesh")


def face_areas(mesh: TriMesh) -> np.ndarray:
    tri = mesh.triangles()
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def surface_area(mesh: TriMesh) -> float:
    _require_nonempty(mesh)
    return float(face_areas(mesh).sum())


def signed_volume(mesh: TriMesh) -> float:
    """Enclosed volume by the divergence theorem; negative for inward winding."""
    _require_nonempty(mesh)
    tri = mesh.triangles()
    return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def face_normals(mesh: TriMesh) -> np.ndarray:
    """Unnormalized face normals (length equals twice the face area)."""
    tri = mesh.triangles()
    return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted unit vertex normals."""
    _require_nonempty(mesh)
    fn = face_normals(mesh)
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    return acc / norm


def edges(mesh: TriMesh) -> np.ndarray:
    """Directed half-edges, one row (a, b) per face corner."""
    f = mesh.faces
    return np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])


def unique_edges(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Undirected edges and the number of faces sharing each."""
    e = np.sort(edges(mesh), axis=1)
    return np.unique(e, axis=0, return_counts=True)


def is_watertight(mesh: TriMesh) -> bool:
    if mesh.is_empty():
        return False
    _, counts = unique_edges(mesh)
    return bool(np.all(counts == 2))


def is_edge_manifold(mesh: TriMesh) -> bool:
    _, counts = unique_edges(mesh)
    return bool(np.all(counts <= 2))


def is_consistently_oriented(mesh: TriMesh) -> bool:
    """True when no directed half-edge appears twice."""
    he = edges(mesh)
    _, counts = np.unique(he, axis=0, return_counts=True)
    return bool(np.all(counts == 1))


def euler_characteristic(mesh: TriMesh) -> int:
    used = np.unique(mesh.faces)
    return int(len(used) - len(unique_edges(mesh)[0]) + mesh.n_faces)


def vertex_adjacency(mesh: TriMesh):
    """Symmetric sparse vertex adjacency (CSR, unit weights)."""
    e = np.sort(edges(mesh), axis=1)
    e = np.unique(e, axis=0)
    n = mesh.n_vertices
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()


def face_components(mesh: TriMesh) -> np.ndarray:
    """Component label per face; faces are connected through shared vertices."""
    nf = mesh.n_faces
    rows = np.repeat(np.arange(nf), 3)
    cols = mesh.faces.ravel()
    inc = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nf, mesh.n_vertices)).tocsr()
    _, labels = connected_components(inc @ inc.T, directed=False)
    return labels


def submesh(mesh: TriMesh, face_mask: np.ndarray) -> TriMesh:
    """Keep the selected faces and drop vertices no longer referenced."""
    faces = mesh.faces[face_mask]
    used, inverse = np.unique(faces, return_inverse=True)
    return TriMesh(mesh.vertices[used], inverse.reshape(-1, 3))


def remove_unreferenced(mesh: TriMesh) -> TriMesh:
    return submesh(mesh, np.ones(mesh.n_faces, dtype=bool))


def merge_vertices(vertices: np.ndarray, faces: np.ndarray, decimals: int | None = None) -> TriMesh:
    """Weld exactly coincident (optionally rounded) vertices."""
    key = vertices if decimals is None else np.round(vertices, decimals)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    new_faces = remap[inverse.ravel()[faces]]
    return TriMesh(vertices[first[order]], new_faces)


# -- file formats -------------------------------------------------------------

def write_stl(mesh: TriMesh, path, header: bytes = b"kneessm binary STL") -> None:
    """Binary STL: 80-byte header, uint32 count, then 50-byte little-endian records."""
    tri = mesh.triangles().astype("<f4")
    fn = face_normals(mesh)
    ln = np.linalg.norm(fn, axis=1, keepdims=True)
    ln[ln == 0] = 1.0
    rec = np.zeros(mesh.n_faces, dtype=np.dtype([("n", "<f4", (3,)), ("v", "<f4", (3, 3)), ("attr", "<u2")]))
    rec["n"] = (fn / ln).astype("<f4")
    rec["v"] = tri
    with open(path, "wb") as fh:
        fh.write(header[:80].ljust(80, b"\0"))
        fh.write(struct.pack("<I", mesh.n_faces))
        fh.write(rec.tobytes())


def read_stl(path) -> TriMesh:
    data = Path(path).read_bytes()
    if len(data) < 84:
        raise MeshError(f"{path}: truncated STL")
    (count,) = struct.unpack("<I", data[80:84])
    if len(data) != 84 + 50 * count:
        if data.lstrip().lower().startswith(b"solid"):
            return _read_ascii_stl(data.decode("ascii", errors="replace"))
        raise MeshError(f"{path}: STL size does not match its face count")
    dt = np.dtype([("n", "<f4", (3,)), ("v", "<f4", (3, 3)), ("attr", "<u2")])
    rec = np.frombuffer(data, dtype=dt, count=count, offset=84)
    verts = rec["v"].reshape(-1, 3).astype(float)
    return merge_vertices(verts, np.arange(3 * count).reshape(-1, 3))


def _read_ascii_stl(text: str) -> TriMesh:
    verts = [list(map(float, line.split()[1:4])) for line in text.splitlines() if line.strip().startswith("vertex")]
    if len(verts) % 3:
        raise MeshError("ASCII STL vertex count is not a multiple of 3")
    v = np.array(verts, dtype=float).reshape(-1, 3)
    return merge_vertices(v, np.arange(len(v)).reshape(-1, 3))


def write_obj(mesh: TriMesh, path) -> None:
    """ASCII OBJ with round-trip precision coordinates."""
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            # fan-triangulate polygons
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return TriMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def load_mesh(path) -> TriMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".stl":
        return read_stl(path)
    if suffix == ".obj":
        return read_obj(path)
    raise MeshError(f"unsupported mesh format: {suffix}")


def save_mesh(mesh: TriMesh, path) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".stl":
        write_stl(mesh, path)
    elif suffix == ".obj":
        write_obj(mesh, path)
    else:
        raise MeshError(f"unsupported mesh format: {suffix}")
