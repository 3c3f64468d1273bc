"""Closed oriented surface meshes and their DEC operators.

Two surfaces are supported: a flat periodic torus built from a uniform
rectangular lattice, and the round sphere built from a subdivided
icosahedron. Every mesh carries the same flat-array layout so that the
bundle and energy code never needs to know which one it is looking at.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp


class InvalidMeshError(ValueError):
    """Raised for mesh parameters that cannot produce a valid surface."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable surface discretization.

    Faces are stored as counterclockwise vertex loops. ``face_edges[f, k]`` is
    the edge joining loop vertex ``k`` to loop vertex ``k + 1`` and
    ``face_signs[f, k]`` is +1 when that edge's stored orientation agrees with
    the traversal. ``face_coords`` holds the loop vertices in an orthonormal,
    positively oriented frame of the face (first vertex at the origin).
    """

    topology: str
    params: dict
    positions: np.ndarray
    vertex_areas: np.ndarray
    edges: np.ndarray
    edge_lengths: np.ndarray
    dual_lengths: np.ndarray
    faces: np.ndarray
    face_edges: np.ndarray
    face_signs: np.ndarray
    face_areas: np.ndarray
    face_coords: np.ndarray
    total_area: float
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def euler_characteristic(self) -> int:
        return self.n_vertices - self.n_edges + self.n_faces

    @property
    def edge_weights(self) -> np.ndarray:
        """DEC 1-form Hodge weights, dual length over primal length."""
        return self.dual_lengths / self.edge_lengths

    @cached_property
    def d0(self) -> sp.csr_matrix:
        E = self.n_edges
        rows = np.repeat(np.arange(E), 2)
        cols = self.edges.ravel()
        vals = np.tile([-1.0, 1.0], E)
        return sp.csr_matrix((vals, (rows, cols)), shape=(E, self.n_vertices))

    @cached_property
    def d1(self) -> sp.csr_matrix:
        F, k = self.face_edges.shape
        rows = np.repeat(np.arange(F), k)
        return sp.csr_matrix(
            (self.face_signs.ravel().astype(float), (rows, self.face_edges.ravel())),
            shape=(F, self.n_edges),
        )

    @cached_property
    def vertex_faces(self) -> sp.csr_matrix:
        """0/1 incidence (V x F) between vertices and faces."""
        F, k = self.faces.shape
        rows = self.faces.ravel()
        cols = np.repeat(np.arange(F), k)
        return sp.csr_matrix((np.ones(F * k), (rows, cols)), shape=(self.n_vertices, F))

    def face_average(self, vertex_field: np.ndarray) -> np.ndarray:
        """Average a vertex field onto faces (equal corner weights)."""
        return vertex_field[self.faces].mean(axis=1)

    def vertex_average(self, face_field: np.ndarray) -> np.ndarray:
        """Area-weighted average of a face field onto vertices."""
        weights = self.vertex_faces @ self.face_areas
        return (self.vertex_faces @ (self.face_areas * face_field)) / weights

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.topology.encode())
        h.update(json.dumps(self.params, sort_keys=True).encode())
        for arr in (self.edges, self.faces, self.face_edges, self.face_signs):
            h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
        return h.hexdigest()

    def summary(self) -> dict:
        return {
            "topology": self.topology,
            "params": dict(self.params),
            "vertices": self.n_vertices,
            "edges": self.n_edges,
            "faces": self.n_faces,
            "euler_characteristic": self.euler_characteristic,
            "total_area": self.total_area,
            "checksum": self.checksum(),
        }


@dataclass(frozen=True)
class DecOperators:
    d0: sp.csr_matrix
    d1: sp.csr_matrix
    star0: np.ndarray
    star1: np.ndarray
    star2: np.ndarray

    def laplacian(self) -> sp.csr_matrix:
        """Positive scalar Laplacian star0^-1 d0^T star1 d0."""
        stiff = self.d0.T @ sp.diags(self.star1) @ self.d0
        return sp.diags(1.0 / self.star0) @ stiff


def dec_operators(mesh: Mesh) -> DecOperators:
    return DecOperators(
        d0=mesh.d0,
        d1=mesh.d1,
        star0=mesh.vertex_areas.copy(),
        star1=mesh.edge_weights.copy(),
        star2=1.0 / mesh.face_areas,
    )


def build_torus_mesh(nx: int, ny: int, lx: float, ly: float) -> Mesh:
    """Uniform periodic ``nx`` x ``ny`` lattice on the flat ``lx`` x ``ly`` torus.

    Edges point in the +x / +y directions; x-edges come first.
    """
    if int(nx) != nx or int(ny) != ny or nx < 2 or ny < 2:
        raise InvalidMeshError(f"torus needs nx, ny >= 2, got ({nx}, {ny})")
    if not (lx > 0 and ly > 0):
        raise InvalidMeshError(f"torus side lengths must be positive, got ({lx}, {ly})")
    nx, ny, lx, ly = int(nx), int(ny), float(lx), float(ly)
    hx, hy = lx / nx, ly / ny
    V = nx * ny
    jj, ii = np.divmod(np.arange(V), nx)
    vid = lambda i, j: (j % ny) * nx + (i % nx)  # noqa: E731

    positions = np.column_stack([ii * hx, jj * hy, np.zeros(V)])
    x_edges = np.column_stack([vid(ii, jj), vid(ii + 1, jj)])
    y_edges = np.column_stack([vid(ii, jj), vid(ii, jj + 1)])
    edges = np.vstack([x_edges, y_edges])
    edge_lengths = np.concatenate([np.full(V, hx), np.full(V, hy)])
    dual_lengths = np.concatenate([np.full(V, hy), np.full(V, hx)])

    faces = np.column_stack([vid(ii, jj), vid(ii + 1, jj), vid(ii + 1, jj + 1), vid(ii, jj + 1)])
    face_edges = np.column_stack([vid(ii, jj), V + vid(ii + 1, jj), vid(ii, jj + 1), V + vid(ii, jj)])
    face_signs = np.tile(np.array([1, 1, -1, -1], dtype=np.int8), (V, 1))
    corner = np.array([[0.0, 0.0], [hx, 0.0], [hx, hy], [0.0, hy]])
    face_coords = np.broadcast_to(corner, (V, 4, 2)).copy()

    return Mesh(
        topology="torus",
        params={"nx": nx, "ny": ny, "lx": lx, "ly": ly},
        positions=positions,
        vertex_areas=np.full(V, hx * hy),
        edges=edges,
        edge_lengths=edge_lengths,
        dual_lengths=dual_lengths,
        faces=faces,
        face_edges=face_edges,
        face_signs=face_signs,
        face_areas=np.full(V, hx * hy),
        face_coords=face_coords,
        total_area=lx * ly,
    )


def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=float,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    return verts / np.linalg.norm(verts, axis=1, keepdims=True), faces


def _subdivide(verts: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    pairs = np.concatenate([np.column_stack([a, b]), np.column_stack([b, c]), np.column_stack([c, a])])
    keys = np.sort(pairs, axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    mids = verts[uniq[:, 0]] + verts[uniq[:, 1]]
    mids /= np.linalg.norm(mids, axis=1, keepdims=True)
    new_ids = len(verts) + inverse
    F = len(faces)
    ab, bc, ca = new_ids[:F], new_ids[F:2 * F], new_ids[2 * F:]
    new_faces = np.concatenate(
        [
            np.column_stack([a, ab, ca]),
            np.column_stack([b, bc, ab]),
            np.column_stack([c, ca, bc]),
            np.column_stack([ab, bc, ca]),
        ]
    )
    return np.vstack([verts, mids]), new_faces


def _spherical_triangle_area(p0, p1, p2) -> np.ndarray:
    """Spherical excess of unit-sphere triangles via L'Huilier's formula."""
    a = np.arccos(np.clip(np.einsum("ij,ij->i", p1, p2), -1.0, 1.0))
    b = np.arccos(np.clip(np.einsum("ij,ij->i", p2, p0), -1.0, 1.0))
    c = np.arccos(np.clip(np.einsum("ij,ij->i", p0, p1), -1.0, 1.0))
    s = 0.5 * (a + b + c)
    prod = np.tan(s / 2) * np.tan((s - a) / 2) * np.tan((s - b) / 2) * np.tan((s - c) / 2)
    return 4.0 * np.arctan(np.sqrt(np.maximum(prod, 0.0)))


def build_sphere_mesh(subdivisions: int, radius: float = 1.0) -> Mesh:
    """Geodesic icosphere of the given radius.

    Face areas are exact spherical triangle areas so they partition the sphere;
    edge weights are cotangent weights of the chordal triangles.
    """
    if int(subdivisions) != subdivisions or subdivisions < 0:
        raise InvalidMeshError(f"subdivisions must be a nonnegative integer, got {subdivisions}")
    if not radius > 0:
        raise InvalidMeshError(f"radius must be positive, got {radius}")
    subdivisions, radius = int(subdivisions), float(radius)
    unit, faces = _icosahedron()
    for _ in range(subdivisions):
        unit, faces = _subdivide(unit, faces)

    # ccw w.r.t. the outward normal
    p0, p1, p2 = unit[faces[:, 0]], unit[faces[:, 1]], unit[faces[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(p1 - p0, p2 - p0), p0 + p1 + p2) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]

    V, F = len(unit), len(faces)
    loop_pairs = np.stack([faces, np.roll(faces, -1, axis=1)], axis=2)  # (F, 3, 2)
    keys = np.sort(loop_pairs.reshape(-1, 2), axis=1)
    edges, inverse = np.unique(keys, axis=0, return_inverse=True)
    face_edges = inverse.reshape(F, 3)
    face_signs = np.where(loop_pairs[:, :, 0] < loop_pairs[:, :, 1], 1, -1).astype(np.int8)

    positions = unit * radius
    p0, p1, p2 = positions[faces[:, 0]], positions[faces[:, 1]], positions[faces[:, 2]]
    face_areas = _spherical_triangle_area(unit[faces[:, 0]], unit[faces[:, 1]], unit[faces[:, 2]]) * radius**2
    # rescale the last bit of rounding so the partition is exact
    face_areas *= (4.0 * np.pi * radius**2) / face_areas.sum()

    vertex_areas = np.bincount(faces.ravel(), weights=np.repeat(face_areas / 3.0, 3), minlength=V)
    edge_lengths = np.linalg.norm(positions[edges[:, 1]] - positions[edges[:, 0]], axis=1)

    # cotangent weights: for each triangle corner, cot of its angle goes to the opposite edge
    corners = positions[faces]  # (F, 3, 3)
    cot_w = np.zeros(len(edges))
    for k in range(3):
        apex = corners[:, k]
        u = corners[:, (k + 1) % 3] - apex
        v = corners[:, (k + 2) % 3] - apex
        cot = np.einsum("ij,ij->i", u, v) / np.linalg.norm(np.cross(u, v), axis=1)
        np.add.at(cot_w, face_edges[:, (k + 1) % 3], 0.5 * cot)
    dual_lengths = cot_w * edge_lengths

    e1 = p1 - p0
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    n = np.cross(p1 - p0, p2 - p0)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    e2 = np.cross(n, e1)
    rel = corners - p0[:, None, :]
    face_coords = np.stack([np.einsum("fkj,fj->fk", rel, e1), np.einsum("fkj,fj->fk", rel, e2)], axis=2)

    return Mesh(
        topology="sphere",
        params={"subdivisions": subdivisions, "radius": radius},
        positions=positions,
        vertex_areas=vertex_areas,
        edges=edges,
        edge_lengths=edge_lengths,
        dual_lengths=dual_lengths,
        faces=faces,
        face_edges=face_edges,
        face_signs=face_signs,
        face_areas=face_areas,
        face_coords=face_coords,
        total_area=4.0 * np.pi * radius**2,
    )


def mesh_from_descriptor(descriptor: dict) -> Mesh:
    """Rebuild a mesh from ``{"topology": ..., "params": {...}}``."""
    topology = descriptor["topology"]
    params = descriptor["params"]
    if topology == "torus":
        return build_torus_mesh(params["nx"], params["ny"], params["lx"], params["ly"])
    if topology == "sphere":
        return build_sphere_mesh(params["subdivisions"], params["radius"])
    raise InvalidMeshError(f"unknown topology {topology!r}")
