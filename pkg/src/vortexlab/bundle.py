"""Hermitian line bundles of fixed degree over a mesh.

A connection is a fixed background (edge phases realizing the degree) plus a
real fluctuation 1-form ``A``. The transport attached to edge ``e`` is
``exp(-i (phi_e + A_e))``; it maps the fiber at the head of ``e`` to the fiber
at its tail, so the covariant difference of a section along ``e`` is
``U_e u[head] - u[tail]``. Around a counterclockwise face the ordered product
of transports is ``exp(-i F_face)``.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh

logger = logging.getLogger("vortexlab")


class CorruptedConnectionError(ValueError):
    """Total flux is not an integer multiple of 2*pi."""


class PoissonSolveError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True, eq=False)
class Connection:
    mesh: Mesh
    background_phase: np.ndarray
    background_curvature: np.ndarray
    A: np.ndarray
    degree: int

    @property
    def background_transport(self) -> np.ndarray:
        return np.exp(-1j * self.background_phase)

    @property
    def edge_phase(self) -> np.ndarray:
        """Total phase per edge; the transport is ``exp(-1j * edge_phase)``."""
        return self.background_phase + self.A

    def transports(self) -> np.ndarray:
        return np.exp(-1j * self.edge_phase)

    def with_fluctuation(self, A: np.ndarray) -> "Connection":
        return replace(self, A=np.asarray(A, dtype=float))


@dataclass(frozen=True, eq=False)
class Section:
    mesh: Mesh
    value: np.ndarray

    def norm(self) -> np.ndarray:
        return np.abs(self.value)


@dataclass(frozen=True, eq=False)
class Configuration:
    section: Section
    connection: Connection
    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.section.mesh is not self.connection.mesh:
            raise ValueError("section and connection live on different meshes")

    @property
    def mesh(self) -> Mesh:
        return self.connection.mesh

    @property
    def u(self) -> np.ndarray:
        return self.section.value

    @property
    def A(self) -> np.ndarray:
        return self.connection.A

    @property
    def degree(self) -> int:
        return self.connection.degree

    def replace(self, u=None, A=None, epsilon=None) -> "Configuration":
        section = self.section if u is None else Section(self.mesh, np.asarray(u, dtype=complex))
        conn = self.connection if A is None else self.connection.with_fluctuation(A)
        return Configuration(section, conn, self.epsilon if epsilon is None else float(epsilon))

    @classmethod
    def from_arrays(cls, conn: Connection, u: np.ndarray, epsilon: float) -> "Configuration":
        return cls(Section(conn.mesh, np.asarray(u, dtype=complex)), conn, float(epsilon))


def _torus_background_phase(mesh: Mesh, d: int) -> np.ndarray:
    """Constant-flux twisted lattice in Landau gauge.

    y-edges in column i carry ``2 pi d i / (nx ny)``; the x-edges that wrap
    from column nx-1 back to column 0 carry ``-2 pi d j / ny`` in row j.
    """
    nx, ny = mesh.params["nx"], mesh.params["ny"]
    V = nx * ny
    jj, ii = np.divmod(np.arange(V), nx)
    phase = np.zeros(2 * V)
    phase[V:] = 2.0 * np.pi * d * ii / V
    seam = ii == nx - 1
    phase[:V][seam] = -2.0 * np.pi * d * jj[seam] / ny
    return phase


def _tree_cotree_phase(mesh: Mesh, target: np.ndarray) -> np.ndarray:
    """Edge phases whose face circulations match ``target`` modulo 2 pi.

    Primal spanning-tree edges get phase 0; the remaining edges are fixed face by
    face, leaves of a dual spanning tree first. Only the root face absorbs the
    total 2 pi d, which is invisible in the transports.
    """
    V, E, F = mesh.n_vertices, mesh.n_edges, mesh.n_faces
    in_tree = np.zeros(E, dtype=bool)
    adjacency = [[] for _ in range(V)]
    for e, (a, b) in enumerate(mesh.edges):
        adjacency[a].append((b, e))
        adjacency[b].append((a, e))
    seen = np.zeros(V, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        a = queue.popleft()
        for b, e in adjacency[a]:
            if not seen[b]:
                seen[b] = True
                in_tree[e] = True
                queue.append(b)

    edge_faces = [[] for _ in range(E)]
    for f in range(F):
        for e in mesh.face_edges[f]:
            edge_faces[e].append(f)

    parent_edge = np.full(F, -1)
    visited = np.zeros(F, dtype=bool)
    visited[0] = True
    order = [0]
    queue = deque([0])
    while queue:
        f = queue.popleft()
        for e in mesh.face_edges[f]:
            if in_tree[e]:
                continue
            for g in edge_faces[e]:
                if not visited[g]:
                    visited[g] = True
                    parent_edge[g] = e
                    order.append(g)
                    queue.append(g)

    phase = np.zeros(E)
    for f in reversed(order[1:]):
        e_par = parent_edge[f]
        edges, signs = mesh.face_edges[f], mesh.face_signs[f]
        k = int(np.flatnonzero(edges == e_par)[0])
        known = np.dot(signs, phase[edges]) - signs[k] * phase[e_par]
        phase[e_par] = (target[f] - known) / signs[k]
    return phase


def background_connection(mesh: Mesh, d: int) -> Connection:
    """Connection of degree ``d`` whose curvature has constant density."""
    d = int(d)
    curvature = 2.0 * np.pi * d * mesh.face_areas / mesh.total_area
    if d == 0:
        phase = np.zeros(mesh.n_edges)
    elif mesh.topology == "torus":
        phase = _torus_background_phase(mesh, d)
    else:
        phase = _tree_cotree_phase(mesh, curvature)
    return Connection(
        mesh=mesh,
        background_phase=phase,
        background_curvature=curvature,
        A=np.zeros(mesh.n_edges),
        degree=d,
    )


def curvature(conn: Connection) -> np.ndarray:
    """Integrated curvature ``i F_A`` per face, computed without angle wrapping."""
    return conn.background_curvature + conn.mesh.d1 @ conn.A


def degree(conn: Connection, tol: float = 1e-8) -> int:
    flux = np.sum(curvature(conn)) / (2.0 * np.pi)
    n = round(flux)
    if abs(flux - n) > tol:
        raise CorruptedConnectionError(f"total flux / 2pi = {flux!r} is not an integer")
    return int(n)


def transport(conn: Connection, edge: int, reverse: bool = False) -> complex:
    """Holonomy of one edge; ``reverse`` gives the opposite traversal."""
    value = np.exp(-1j * (conn.background_phase[edge] + conn.A[edge]))
    return complex(np.conj(value) if reverse else value)


def face_holonomy(conn: Connection) -> np.ndarray:
    """Ordered product of transports around every face."""
    mesh = conn.mesh
    U = conn.transports()[mesh.face_edges]
    U = np.where(mesh.face_signs > 0, U, np.conj(U))
    return np.prod(U, axis=1)


def covariant_derivative(conn: Connection) -> sp.csr_matrix:
    """Complex E x V matrix of ``(D u)_e = U_e u[head] - u[tail]``."""
    mesh = conn.mesh
    E = mesh.n_edges
    rows = np.repeat(np.arange(E), 2)
    cols = mesh.edges.ravel()
    vals = np.column_stack([-np.ones(E, dtype=complex), conn.transports()]).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(E, mesh.n_vertices))


def apply_gauge(config: Configuration, theta: np.ndarray) -> Configuration:
    """Act by ``exp(i theta)``: ``u -> e^{i theta} u`` and ``A -> A + d0 theta``."""
    theta = np.asarray(theta, dtype=float)
    mesh = config.mesh
    return config.replace(u=np.exp(1j * theta) * config.u, A=config.A + mesh.d0 @ theta)


def _weighted_laplacian(mesh: Mesh) -> sp.csr_matrix:
    return (mesh.d0.T @ sp.diags(mesh.edge_weights) @ mesh.d0).tocsr()


def solve_poisson(mesh: Mesh, rhs: np.ndarray, rtol: float = 1e-12, maxiter: int | None = None) -> np.ndarray:
    """Solve ``d0^T W d0 theta = rhs`` by conjugate gradients.

    The solution is kept mean-zero against the vertex areas; ``rhs`` must sum
    to zero (it is projected if it does not).
    """
    L = _weighted_laplacian(mesh)
    areas = mesh.vertex_areas
    b = rhs - rhs.mean()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(mesh.n_vertices)
    maxiter = maxiter or 10 * mesh.n_vertices

    def project(x):
        return x - np.dot(areas, x) / areas.sum()

    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    for _ in range(maxiter):
        Lp = L @ p
        alpha = rr / (p @ Lp)
        x = project(x + alpha * p)
        r -= alpha * Lp
        rr_new = r @ r
        if np.sqrt(rr_new) <= rtol * bnorm:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    residual = np.linalg.norm(L @ x - b)
    if residual > 100 * rtol * max(bnorm, 1.0):
        raise PoissonSolveError("Poisson solve did not converge", residual)
    return x


def divergence(mesh: Mesh, A: np.ndarray) -> np.ndarray:
    """Integrated discrete codifferential ``d0^T W A`` per vertex."""
    return mesh.d0.T @ (mesh.edge_weights * A)


def coulomb_gauge_fix(config: Configuration) -> tuple[np.ndarray, Configuration]:
    """Return ``(theta, fixed)`` with ``fixed.A = A - d0 theta`` divergence free."""
    theta = solve_poisson(config.mesh, divergence(config.mesh, config.A))
    return theta, apply_gauge(config, -theta)
