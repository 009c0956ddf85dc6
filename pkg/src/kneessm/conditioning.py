"""Mesh conditioning and point-set preparation.

Taubin smoothing, Poisson-disk sampling by weighted sample elimination,
point uniformization on the surface, template retessellation and layered
hexahedral extrusion of cartilage.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .mesh import (
    MeshError,
    TriMesh,
    face_areas,
    is_edge_manifold,
    surface_area,
    vertex_adjacency,
    vertex_normals,
)
from .pointset import PointSet, as_points
from .proximity import MeshProximity


# -- smoothing ----------------------------------------------------------------

def _umbrella(mesh: TriMesh):
    adj = vertex_adjacency(mesh)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    return adj, deg


def taubin_smooth(mesh: TriMesh, lamb: float = 0.5, mu: float = -0.53, iterations: int = 10) -> TriMesh:
    """Alternating positive/negative umbrella-Laplacian steps (one pair per iteration)."""
    if not 0.0 <= lamb < 1.0:
        raise ValueError("lambda must lie in [0, 1)")
    if not -1.0 < mu <= 0.0:
        raise ValueError("mu must lie in (-1, 0]")
    if lamb > 0 and mu != 0 and abs(mu) <= lamb:
        raise ValueError("|mu| must exceed lambda to compensate shrinkage")
    if not is_edge_manifold(mesh):
        raise MeshError("taubin_smooth requires an edge-manifold mesh")
    if iterations == 0 or lamb == 0:
        return mesh
    adj, deg = _umbrella(mesh)
    v = mesh.vertices.copy()
    for _ in range(iterations):
        for factor in (lamb, mu):
            if factor:
                v = v + factor * (adj @ v / deg[:, None] - v)
    return mesh.with_vertices(v)


def laplacian_smooth(mesh: TriMesh, lamb: float = 0.5, iterations: int = 10) -> TriMesh:
    """Plain umbrella smoothing; shrinks, kept for comparison against Taubin."""
    return taubin_smooth(mesh, lamb, 0.0, iterations)


def relax_tessellation(mesh: TriMesh, iterations: int = 10, step: float = 0.5) -> TriMesh:
    """Improve triangle shape by tangential Laplacian relaxation.

    Each vertex moves toward its one-ring centroid within its tangent plane and
    is then projected back onto the input surface, so the geometry is kept while
    the vertex distribution evens out.
    """
    if iterations == 0:
        return mesh
    prox = MeshProximity(mesh)
    adj, deg = _umbrella(mesh)
    v = mesh.vertices.copy()
    for _ in range(iterations):
        n = vertex_normals(mesh.with_vertices(v))
        d = adj @ v / deg[:, None] - v
        d -= np.einsum("ij,ij->i", d, n)[:, None] * n
        v = prox.project(v + step * d)
    return mesh.with_vertices(v)


def triangle_quality(mesh: TriMesh) -> np.ndarray:
    """Per-face normalized radius ratio, 1 for equilateral, 0 for degenerate."""
    tri = mesh.triangles()
    a = np.linalg.norm(tri[:, 1] - tri[:, 2], axis=1)
    b = np.linalg.norm(tri[:, 2] - tri[:, 0], axis=1)
    c = np.linalg.norm(tri[:, 0] - tri[:, 1], axis=1)
    s = 0.5 * (a + b + c)
    area = face_areas(mesh)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = 8.0 * area ** 2 / (a * b * c * s)
    return np.nan_to_num(q)


# -- sampling -----------------------------------------------------------------

def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator):
    """Area-uniform random surface samples; returns (points, face ids)."""
    area = face_areas(mesh)
    if area.sum() <= 0:
        raise MeshError("mesh has zero area")
    cdf = np.cumsum(area)
    cdf /= cdf[-1]
    fid = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), len(cdf) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.triangles()[fid]
    pts = (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]
    return pts, fid


def poisson_radius(area: float, n: int) -> float:
    """Maximal Poisson-disk radius for ``n`` samples on a surface of given area."""
    return float(np.sqrt(area / (2.0 * np.sqrt(3.0) * n)))


def eliminate_samples(candidates: np.ndarray, n: int, r_max: float, alpha: float = 8.0) -> np.ndarray:
    """Weighted sample elimination down to ``n`` points; returns sorted pool indices.

    Each candidate carries the weight ``sum_j (1 - d_ij / (2 r_max)) ** alpha``
    over neighbours closer than ``2 r_max``; the heaviest is removed and its
    neighbours' weights are reduced until ``n`` remain.
    """
    m = len(candidates)
    if n > m:
        raise ValueError(f"requested {n} samples from a pool of {m}")
    tree = cKDTree(candidates)
    pairs = tree.query_pairs(2.0 * r_max, output_type="ndarray")
    d = np.linalg.norm(candidates[pairs[:, 0]] - candidates[pairs[:, 1]], axis=1)
    w = (1.0 - d / (2.0 * r_max)) ** alpha
    weight = np.zeros(m)
    np.add.at(weight, pairs[:, 0], w)
    np.add.at(weight, pairs[:, 1], w)

    order = np.argsort(np.concatenate([pairs[:, 0], pairs[:, 1]]), kind="stable")
    nbr = np.concatenate([pairs[:, 1], pairs[:, 0]])[order]
    nw = np.concatenate([w, w])[order]
    ptr = np.searchsorted(np.concatenate([pairs[:, 0], pairs[:, 1]])[order], np.arange(m + 1))

    alive = np.ones(m, dtype=bool)
    heap = [(-weight[i], i) for i in range(m)]
    heapq.heapify(heap)
    remaining = m
    while remaining > n:
        negw, i = heapq.heappop(heap)
        if not alive[i] or -negw != weight[i]:
            continue
        alive[i] = False
        remaining -= 1
        for j, wij in zip(nbr[ptr[i]:ptr[i + 1]], nw[ptr[i]:ptr[i + 1]]):
            if alive[j]:
                weight[j] -= wij
                heapq.heappush(heap, (-weight[j], j))
    return np.flatnonzero(alive)


def poisson_disk_sample(mesh: TriMesh, n: int, seed: int = 0, candidates: int | None = None) -> PointSet:
    """Exactly ``n`` well-spread surface points by sample elimination.

    Parameters
    ----------
    mesh : TriMesh
    n : int
        Number of output samples.
    seed : int
        Seed of the candidate pool; equal seeds give identical output.
    candidates : int, optional
        Pool size, by default ``5 * n``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    area = surface_area(mesh)
    if area <= 0:
        raise MeshError("mesh has zero area")
    m = 5 * n if candidates is None else int(candidates)
    if n > m:
        raise ValueError(f"n = {n} exceeds candidate pool size {m}")
    pool, _ = sample_surface(mesh, m, np.random.default_rng(seed))
    keep = eliminate_samples(pool, n, poisson_radius(area, n))
    return PointSet(pool[keep], mesh=mesh)


def nearest_neighbor_distances(points) -> np.ndarray:
    p = as_points(points)
    d, _ = cKDTree(p).query(p, 2)
    return d[:, 1]


def uniformize(ps, mesh: TriMesh, iterations: int = 10, k: int = 8, step: float = 0.5, tolerance: float = 1e-3) -> PointSet:
    """Even out neighbour spacing of surface points.

    Every neighbour ``j`` of point ``i`` proposes the position at the mean
    k-neighbour spacing ``h`` from itself along ``x_i - x_j``; the point moves a
    fraction ``step`` toward the centroid of these proposals and is projected
    back onto ``mesh``. Points already spaced at ``h`` are stationary.
    """
    pts = as_points(ps).copy()
    if iterations == 0:
        return PointSet(pts, mesh=mesh)
    prox = MeshProximity(mesh)
    off = prox.distance(pts)
    if off.max() > tolerance:
        raise ValueError(f"point lies {off.max():.3g} mm off the surface (tolerance {tolerance})")
    k = min(k, len(pts) - 1)
    if k < 1:
        return PointSet(pts, mesh=mesh)
    for _ in range(iterations):
        d, idx = cKDTree(pts).query(pts, k + 1)
        d, nb = d[:, 1:], pts[idx[:, 1:]]
        h = d.mean()
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where(d > 0, (h - d) / d, 0.0)
        disp = ((pts[:, None, :] - nb) * gain[..., None]).mean(axis=1)
        pts = prox.project(pts + step * disp)
    return PointSet(pts, mesh=mesh)


# -- cartilage extrusion ------------------------------------------------------

# trilinear hexahedron corner signs, VTK/Abaqus node order
_HEX_SIGNS = np.array(
    [[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
     [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]],
    dtype=float,
)


def hex_jacobian(nodes8: np.ndarray, xi=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Jacobian determinants of 8-node cells (shape (n, 8, 3)) at a reference point."""
    xi = np.asarray(xi, dtype=float)
    s = _HEX_SIGNS
    g = np.empty((8, 3))
    f = 1.0 + s * xi
    g[:, 0] = s[:, 0] * f[:, 1] * f[:, 2] / 8.0
    g[:, 1] = s[:, 1] * f[:, 0] * f[:, 2] / 8.0
    g[:, 2] = s[:, 2] * f[:, 0] * f[:, 1] / 8.0
    jac = np.einsum("cni,nj->cij", nodes8, g)
    return np.linalg.det(jac)


@dataclass(frozen=True)
class LayeredHexMesh:
    """Stacked 8-node cells; ``collapsed`` marks prisms stored as degenerate hexes."""

    nodes: np.ndarray
    cells: np.ndarray
    layer_count: int
    cell_layer: np.ndarray
    collapsed: np.ndarray = field(repr=False)

    def cell_volumes(self) -> np.ndarray:
        g = 1.0 / np.sqrt(3.0)
        x = self.nodes[self.cells]
        pts = [(a, b, c) for a in (-g, g) for b in (-g, g) for c in (-g, g)]
        return sum(hex_jacobian(x, p) for p in pts)

    @property
    def metadata(self) -> dict:
        return {"layers": self.layer_count, "n_prism_cells": int(self.collapsed.sum()), "n_cells": len(self.cells)}


def extrude_layers(surface, thickness, layers: int = 5, normals=None) -> LayeredHexMesh:
    """Extrude a bone surface into ``layers`` of solid cells along vertex normals.

    Parameters
    ----------
    surface : TriMesh or (vertices, faces)
        Faces with 4 columns give hexahedra; triangles give prism cells whose
        last corner is repeated (``[a, b, c, c]`` per layer face).
    thickness : array of shape (n_vertices,)
        Local cartilage thickness in mm.
    normals : array, optional
        Unit extrusion directions; area-weighted vertex normals by default.

    The base layer nodes are the surface vertices themselves, so the
    bone-cartilage interface shares nodes with the bone mesh.
    """
    if isinstance(surface, TriMesh):
        verts, faces = surface.vertices, surface.faces
    else:
        verts, faces = (np.asarray(a) for a in surface)
        verts = verts.astype(float)
    faces = np.asarray(faces, dtype=np.int64)
    if layers < 1:
        raise ValueError("layers must be positive")
    t = np.asarray(thickness, dtype=float).reshape(-1)
    if t.shape != (len(verts),):
        raise ValueError("thickness must have one value per vertex")
    if np.any(t <= 0):
        raise ValueError("thickness must be strictly positive")

    if faces.shape[1] == 4:
        tris = np.concatenate([faces[:, [0, 1, 2]], faces[:, [0, 2, 3]]])
        quad = faces
    elif faces.shape[1] == 3:
        tris = faces
        quad = faces[:, [0, 1, 2, 2]]
    else:
        raise ValueError("faces must be triangles or quads")
    if normals is None:
        normals = vertex_normals(TriMesh(verts, tris))
    normals = np.asarray(normals, dtype=float)

    nv = len(verts)
    frac = np.arange(layers + 1) / layers
    nodes = (verts[None] + frac[:, None, None] * (t[:, None] * normals)[None]).reshape(-1, 3)
    nodes[:nv] = verts
    cells = np.concatenate([
        np.hstack([quad + l * nv, quad + (l + 1) * nv]) for l in range(layers)
    ])
    cell_layer = np.repeat(np.arange(layers), len(quad))
    collapsed = np.tile(np.full(len(quad), faces.shape[1] == 3), layers)
    det = hex_jacobian(nodes[cells])
    if np.any(det <= 0):
        bad = int(np.flatnonzero(det <= 0)[0])
        raise ValueError(f"cell {bad} is inverted (Jacobian {det[bad]:.3g} at its centroid)")
    return LayeredHexMesh(nodes, cells, layers, cell_layer, collapsed)
