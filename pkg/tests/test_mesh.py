import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from vortexlab.mesh import (
    InvalidMeshError,
    build_sphere_mesh,
    build_torus_mesh,
    dec_operators,
    mesh_from_descriptor,
)


def test_torus_counts_4x4():
    m = build_torus_mesh(4, 4, 2 * np.pi, 2 * np.pi)
    assert (m.n_vertices, m.n_edges, m.n_faces) == (16, 32, 16)
    assert m.euler_characteristic == 0
    assert m.total_area == pytest.approx(4 * np.pi**2, rel=1e-14)


def test_torus_2x2_face_areas():
    m = build_torus_mesh(2, 2, 1.0, 1.0)
    assert m.total_area == 1.0
    np.testing.assert_allclose(m.face_areas, 0.25)


def test_torus_8x4_rectangular():
    m = build_torus_mesh(8, 4, 2.0, 1.0)
    assert m.n_faces == 32
    np.testing.assert_allclose(m.face_areas, 1 / 16)
    assert m.euler_characteristic == 0


@pytest.mark.parametrize("nx, ny", [(1, 4), (4, 1), (0, 0)])
def test_torus_rejects_small_dimensions(nx, ny):
    with pytest.raises(InvalidMeshError):
        build_torus_mesh(nx, ny, 1.0, 1.0)


def test_torus_rejects_nonpositive_length():
    with pytest.raises(InvalidMeshError):
        build_torus_mesh(4, 4, 0.0, 1.0)


def test_icosahedron_counts():
    m = build_sphere_mesh(0)
    assert (m.n_vertices, m.n_edges, m.n_faces) == (12, 30, 20)
    assert m.euler_characteristic == 2


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_icosphere_counts(n):
    m = build_sphere_mesh(n)
    assert m.n_vertices == 10 * 4**n + 2
    assert m.n_edges == 30 * 4**n
    assert m.n_faces == 20 * 4**n
    assert m.euler_characteristic == 2


@pytest.mark.parametrize("radius", [1.0, 2.5])
def test_sphere_area_exact(radius):
    m = build_sphere_mesh(3, radius)
    total = 4 * np.pi * radius**2
    assert m.total_area == pytest.approx(total, rel=1e-12)
    assert m.face_areas.sum() == pytest.approx(total, rel=1e-12)
    assert m.vertex_areas.sum() == pytest.approx(total, rel=1e-12)


def test_sphere_faces_counterclockwise_outward():
    m = build_sphere_mesh(2)
    P = m.positions[m.faces]
    normal = np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0])
    assert np.all(np.einsum("fk,fk->f", normal, P.mean(axis=1)) > 0)


def test_sphere_edges_lexicographic():
    m = build_sphere_mesh(2)
    assert np.all(m.edges[:, 0] < m.edges[:, 1])


@pytest.mark.parametrize("builder", [lambda: build_torus_mesh(5, 3, 1.0, 2.0), lambda: build_sphere_mesh(2)])
def test_boundary_of_boundary_exact(builder):
    m = builder()
    product = (m.d1 @ m.d0).toarray()
    assert np.all(product == 0)
    rng = np.random.default_rng(3)
    assert np.all(m.d1 @ (m.d0 @ rng.integers(-1000, 1000, m.n_vertices).astype(float)) == 0)


@pytest.mark.parametrize("builder", [lambda: build_torus_mesh(6, 4, 1.0, 2.0), lambda: build_sphere_mesh(3)])
def test_areas_and_positive_weights(builder):
    m = builder()
    assert m.face_areas.sum() == pytest.approx(m.total_area, rel=1e-12)
    assert m.vertex_areas.sum() == pytest.approx(m.total_area, rel=1e-12)
    ops = dec_operators(m)
    assert np.all(ops.star0 > 0) and np.all(ops.star1 > 0) and np.all(ops.star2 > 0)


def test_square_torus_star_values():
    L, n = 3.0, 6
    ops = dec_operators(build_torus_mesh(n, n, L, L))
    np.testing.assert_allclose(ops.star0, (L / n) ** 2)
    np.testing.assert_allclose(ops.star1, 1.0)


def test_sphere_laplacian_constants_harmonic():
    ops = dec_operators(build_sphere_mesh(2))
    L = ops.laplacian().toarray()
    # symmetric generalized problem via mass scaling
    s = 1.0 / np.sqrt(ops.star0)
    vals, vecs = np.linalg.eigh(s[:, None] * (ops.d0.T @ sp.diags(ops.star1) @ ops.d0).toarray() * s[None, :])
    assert abs(vals[0]) < 1e-12
    v0 = vecs[:, 0] * s
    np.testing.assert_allclose(v0 / v0[0], 1.0, atol=1e-10)
    assert np.allclose(L @ np.ones(L.shape[0]), 0, atol=1e-12)


@pytest.mark.parametrize("n", [4, 6, 8])
def test_torus_laplacian_fft_symbol(n):
    L = 2.0
    h = L / n
    ops = dec_operators(build_torus_mesh(n, n, L, L))
    lap = ops.laplacian().toarray()
    vals = np.sort(np.linalg.eigvalsh(lap))
    k = np.arange(n)
    symbol = (4 / h**2) * (np.sin(np.pi * k / n)[:, None] ** 2 + np.sin(np.pi * k / n)[None, :] ** 2)
    expected = np.sort(symbol.ravel())
    np.testing.assert_allclose(vals[1:], expected[1:], rtol=1e-10)
    assert abs(vals[0]) < 1e-10


def test_deterministic_construction():
    a, b = build_sphere_mesh(3), build_sphere_mesh(3)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.face_areas, b.face_areas)
    assert a.checksum() == b.checksum()


def test_checksum_distinguishes_meshes():
    assert build_torus_mesh(4, 4, 1, 1).checksum() != build_torus_mesh(4, 5, 1, 1).checksum()
    assert build_torus_mesh(4, 4, 1, 1).checksum() != build_torus_mesh(4, 4, 1, 2).checksum()


def test_descriptor_round_trip():
    for m in (build_torus_mesh(5, 7, 1.5, 2.5), build_sphere_mesh(2, 3.0)):
        again = mesh_from_descriptor({"topology": m.topology, "params": m.params})
        assert again.checksum() == m.checksum()
    with pytest.raises(InvalidMeshError):
        mesh_from_descriptor({"topology": "klein", "params": {}})


def test_summary_fields():
    s = build_sphere_mesh(1).summary()
    assert s["topology"] == "sphere" and s["euler_characteristic"] == 2
    assert set(s) >= {"vertices", "edges", "faces", "total_area", "checksum"}


@settings(max_examples=25, deadline=None)
@given(
    nx=st.integers(2, 9),
    ny=st.integers(2, 9),
    lx=st.floats(0.1, 10.0),
    ly=st.floats(0.1, 10.0),
)
def test_torus_invariants_property(nx, ny, lx, ly):
    m = build_torus_mesh(nx, ny, lx, ly)
    assert m.euler_characteristic == 0
    assert m.face_areas.sum() == pytest.approx(lx * ly, rel=1e-12)
    assert m.vertex_areas.sum() == pytest.approx(lx * ly, rel=1e-12)
    assert np.all(m.edge_weights > 0)
    assert (m.d1 @ m.d0).count_nonzero() == 0 or np.all((m.d1 @ m.d0).data == 0)
