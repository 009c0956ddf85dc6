import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import pdist

import oracles
from kneessm.conditioning import (
    extrude_layers,
    laplacian_smooth,
    nearest_neighbor_distances,
    poisson_disk_sample,
    poisson_radius,
    relax_tessellation,
    sample_surface,
    taubin_smooth,
    triangle_quality,
    uniformize,
)
from kneessm.mesh import (
    MeshError,
    TriMesh,
    is_watertight,
    load_mesh,
    save_mesh,
    signed_volume,
    surface_area,
    vertex_normals,
)
from kneessm.pointset import PointSet, load_pointset, save_pointset
from kneessm.synthetic import box, ellipsoid_mesh, icosphere, plane_grid


# -- measures -----------------------------------------------------------------

def test_unit_cube_measures():
    cube = box()
    assert surface_area(cube) == pytest.approx(6.0, abs=1e-12)
    assert signed_volume(cube) == pytest.approx(1.0, abs=1e-12)
    assert signed_volume(cube.flipped()) == pytest.approx(-1.0, abs=1e-12)


def test_icosphere_area():
    s = icosphere(4, radius=2.0)
    assert abs(surface_area(s) / (16 * np.pi) - 1) < 0.01
    assert surface_area(s) == pytest.approx(oracles.triangle_area_sum(s.vertices, s.faces), rel=1e-12)
    assert signed_volume(s) == pytest.approx(oracles.divergence_volume(s.vertices, s.faces), rel=1e-12)


def test_vertex_normals_are_unit_and_outward():
    s = icosphere(3)
    n = vertex_normals(s)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)
    assert np.all(np.einsum("ij,ij->i", n, s.vertices) > 0.99)


def test_empty_mesh_measures_raise():
    empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    for fn in (surface_area, signed_volume, vertex_normals):
        with pytest.raises(MeshError):
            fn(empty)


def test_face_index_out_of_range():
    with pytest.raises(MeshError):
        TriMesh(np.zeros((3, 3)), [[0, 1, 3]])


@pytest.mark.parametrize("suffix", [".stl", ".obj"])
def test_mesh_file_round_trip(tmp_path, suffix):
    s = ellipsoid_mesh((3.0, 2.0, 1.0), 2)
    save_mesh(s, tmp_path / f"m{suffix}")
    back = load_mesh(tmp_path / f"m{suffix}")
    assert back.n_faces == s.n_faces and back.n_vertices == s.n_vertices
    tol = 1e-6 if suffix == ".stl" else 0.0
    np.testing.assert_allclose(back.triangles(), s.triangles(), atol=tol)
    assert is_watertight(back)


def test_stl_header_layout(tmp_path):
    save_mesh(box(), tmp_path / "b.stl")
    data = (tmp_path / "b.stl").read_bytes()
    assert len(data) == 84 + 50 * 12
    assert int.from_bytes(data[80:84], "little") == 12


def test_pointset_round_trip(tmp_path):
    pts = np.random.default_rng(0).normal(size=(17, 3))
    save_pointset(PointSet(pts), tmp_path / "p.points")
    np.testing.assert_array_equal(load_pointset(tmp_path / "p.points.json").points, pts)


# -- smoothing ----------------------------------------------------------------

def test_taubin_identities():
    s = icosphere(2)
    assert taubin_smooth(s, iterations=0) is s
    assert taubin_smooth(s, lamb=0.0, iterations=5) is s


def test_taubin_shrinks_less_than_laplacian():
    s = icosphere(2)
    v0 = signed_volume(s)
    taubin = abs(signed_volume(taubin_smooth(s, 0.5, -0.53, 10)) - v0)
    lap = abs(signed_volume(laplacian_smooth(s, 0.5, 10)) - v0)
    assert taubin < lap


def test_taubin_parameter_checks():
    with pytest.raises(ValueError):
        taubin_smooth(icosphere(1), 0.5, -0.4)
    fin = TriMesh(np.zeros((5, 3)) + np.arange(5)[:, None] * [1, 0.3, 0.1],
                  [[0, 1, 2], [0, 1, 3], [0, 1, 4]])
    with pytest.raises(MeshError):
        taubin_smooth(fin)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.05, 0.9), st.integers(1, 15))
def test_taubin_preserves_connectivity(lamb, iters):
    s = icosphere(2)
    out = taubin_smooth(s, lamb, -min(0.99, lamb + 0.03), iters)
    assert out.n_vertices == s.n_vertices
    np.testing.assert_array_equal(out.faces, s.faces)


# -- sampling -----------------------------------------------------------------

def test_single_sample_lies_on_a_face():
    s = icosphere(2)
    p = poisson_disk_sample(s, 1, seed=4).points
    assert p.shape == (1, 3)
    assert oracles.point_mesh_distance(p[0], s) < 1e-12


@pytest.mark.parametrize("seed", [0, 1, 7])
def test_poisson_min_spacing(seed):
    s = icosphere(4)
    ps = poisson_disk_sample(s, 500, seed=seed)
    assert len(ps) == 500
    r_max = np.sqrt(surface_area(s) / (2 * np.sqrt(3) * 500))
    assert r_max == pytest.approx(poisson_radius(surface_area(s), 500))
    assert pdist(ps.points).min() >= 0.5 * r_max


def test_poisson_determinism_and_subset():
    s = icosphere(3)
    a = poisson_disk_sample(s, 200, seed=11).points
    b = poisson_disk_sample(s, 200, seed=11).points
    np.testing.assert_array_equal(a, b)
    pool, _ = sample_surface(s, 1000, np.random.default_rng(11))
    matched = (np.abs(pool[None] - a[:, None]).sum(-1) == 0).any(axis=1)
    assert matched.all()


def test_poisson_pool_too_small():
    with pytest.raises(ValueError, match="exceeds"):
        poisson_disk_sample(icosphere(1), 50, candidates=10)


# -- uniformization -----------------------------------------------------------

def _cv(points):
    d = nearest_neighbor_distances(points)
    return d.std() / d.mean()


def test_uniformize_reduces_variation_on_clustered_plane():
    plane = plane_grid(20, size=10.0)
    rng = np.random.default_rng(3)
    pts = np.column_stack([rng.beta(2, 5, 300) * 10, rng.uniform(0, 10, 300), np.zeros(300)])
    out = uniformize(PointSet(pts), plane, iterations=20)
    assert len(out) == 300
    assert _cv(out.points) < _cv(pts)
    assert np.abs(out.points[:, 2]).max() < 1e-6


def test_uniformize_stays_on_surface():
    s = icosphere(3, radius=10.0)
    ps = poisson_disk_sample(s, 300, seed=2)
    out = uniformize(ps, s, iterations=10)
    d = oracles.point_triangle_distances
    tri = s.triangles()
    off = [d(p, tri[:, 0], tri[:, 1], tri[:, 2]).min() for p in out.points]
    assert max(off) < 1e-6


def test_uniformize_identity_and_tolerance():
    s = icosphere(2)
    ps = poisson_disk_sample(s, 40, seed=0)
    np.testing.assert_array_equal(uniformize(ps, s, iterations=0).points, ps.points)
    with pytest.raises(ValueError, match="off the surface"):
        uniformize(PointSet(ps.points * 1.1), s)


def test_relax_tessellation_keeps_surface_and_improves_quality():
    rng = np.random.default_rng(0)
    s = icosphere(3, radius=5.0)
    normals = vertex_normals(s)
    tangential = rng.normal(scale=0.08, size=s.vertices.shape)
    tangential -= np.einsum("ij,ij->i", tangential, normals)[:, None] * normals
    rough = s.with_vertices(s.vertices + tangential)
    rough = rough.with_vertices(5.0 * rough.vertices / np.linalg.norm(rough.vertices, axis=1, keepdims=True))
    out = relax_tessellation(rough, iterations=10)
    assert triangle_quality(out).min() > triangle_quality(rough).min()
    assert np.abs(np.linalg.norm(out.vertices, axis=1) - 5.0).max() < 0.05


# -- extrusion ----------------------------------------------------------------

def test_extrude_uniform_quad_layers():
    v, q = plane_grid(1, size=1.0, quads=True)
    hexes = extrude_layers((v, q), np.ones(len(v)), layers=5, normals=np.tile([0, 0, 1.0], (len(v), 1)))
    assert len(hexes.nodes) == 6 * len(v) and len(hexes.cells) == 5
    z = hexes.nodes[:, 2].reshape(6, -1)[:, 0]
    np.testing.assert_allclose(np.diff(z), 0.2, atol=1e-12)
    np.testing.assert_array_equal(hexes.nodes[: len(v)], v)
    np.testing.assert_allclose(hexes.cell_volumes(), 0.2, atol=1e-12)
    assert hexes.metadata["n_prism_cells"] == 0


@pytest.mark.parametrize("quads", [True, False])
def test_extrude_volume_matches_prisms(quads):
    rng = np.random.default_rng(5)
    grid = plane_grid(6, size=3.0, quads=quads)
    v, f = (grid.vertices, grid.faces) if not quads else grid
    t = rng.uniform(0.5, 1.5, len(v))
    hexes = extrude_layers((v, f), t, layers=5, normals=np.tile([0, 0, 1.0], (len(v), 1)))
    if quads:
        tris = np.concatenate([f[:, [0, 1, 2]], f[:, [0, 2, 3]]])
    else:
        tris = f
    area = 0.5 * np.linalg.norm(np.cross(v[tris[:, 1]] - v[tris[:, 0]], v[tris[:, 2]] - v[tris[:, 0]]), axis=1)
    analytic = float((area * t[tris].mean(axis=1)).sum())
    assert abs(hexes.cell_volumes().sum() / analytic - 1) < 0.01
    assert len(hexes.nodes) == 6 * len(v)
    assert len(hexes.cells) == 5 * len(f)
    assert hexes.metadata["n_prism_cells"] == (0 if quads else len(hexes.cells))


def test_extrude_on_sphere_shares_base_nodes():
    s = icosphere(2, radius=20.0)
    hexes = extrude_layers(s, np.full(s.n_vertices, 2.0))
    np.testing.assert_array_equal(hexes.nodes[: s.n_vertices], s.vertices)
    assert hexes.layer_count == 5


def test_extrude_rejects_bad_thickness():
    v, q = plane_grid(2, quads=True)
    t = np.ones(len(v))
    t[3] = 0.0
    with pytest.raises(ValueError, match="positive"):
        extrude_layers((v, q), t)


def test_extrude_rejects_inverted_cells():
    v, q = plane_grid(2, quads=True)
    with pytest.raises(ValueError, match="inverted"):
        extrude_layers((v, q), np.ones(len(v)), normals=np.tile([0, 0, -1.0], (len(v), 1)))
