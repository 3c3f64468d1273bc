"""Discrete Yang-Mills-Higgs energy, its derivatives, and diagnostic fields.

The energy of a configuration is

    eps^2 sum_f F_f^2 / area_f                 (curvature)
  + sum_e w_e |U_e u[head] - u[tail]|^2        (kinetic)
  + sum_v area_v (1 - |u_v|^2)^2 / (4 eps^2)   (potential)

Complex gradients use the convention ``dE = Re(conj(grad_u) . du) + grad_A . dA``,
so in real coordinates ``[Re u, Im u, A]`` the gradient is
``[Re grad_u, Im grad_u, grad_A]``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from .bundle import Configuration, curvature
from .mesh import Mesh

logger = logging.getLogger("vortexlab")


@dataclass(frozen=True)
class EnergyBreakdown:
    curvature_term: float
    kinetic_term: float
    potential_term: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class DiagnosticsReport:
    h: np.ndarray
    f: np.ndarray
    phi: np.ndarray
    sigma_norm_sq_plus: np.ndarray
    sigma_norm_sq_minus: np.ndarray
    grad_norm_sq: np.ndarray
    cross: np.ndarray
    max_f_minus_h: float
    max_negf_minus_h: float

    def to_dict(self, include_fields: bool = False) -> dict:
        out = {
            "max_f_minus_h": self.max_f_minus_h,
            "max_negf_minus_h": self.max_negf_minus_h,
            "h_min": float(self.h.min()),
            "h_max": float(self.h.max()),
            "f_min": float(self.f.min()),
            "f_max": float(self.f.max()),
            "sigma_norm_sq_plus_max": float(self.sigma_norm_sq_plus.max()),
            "sigma_norm_sq_minus_max": float(self.sigma_norm_sq_minus.max()),
        }
        if include_fields:
            for name in ("h", "f", "phi", "sigma_norm_sq_plus", "sigma_norm_sq_minus"):
                out[name] = getattr(self, name).tolist()
        return out


@dataclass(frozen=True)
class BogomolnySplit:
    defect_plus: float
    defect_minus: float
    topological: float

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# per-mesh geometry shared by all routines


class _FaceGeometry:
    def __init__(self, mesh: Mesh):
        coords = mesh.face_coords
        k = coords.shape[1]
        self.k = k
        # edge vectors along the counterclockwise loop, in the face frame
        self.edge_vec = np.roll(coords, -1, axis=1) - coords
        self.pinv = np.linalg.pinv(self.edge_vec)  # (F, 2, k)
        # dual-cell boundary piece inside each face for each corner:
        # midpoint(incoming edge) - midpoint(outgoing edge)
        self.dual_seg = 0.5 * (np.roll(coords, 1, axis=1) - np.roll(coords, -1, axis=1))


def _geometry(mesh: Mesh) -> _FaceGeometry:
    geo = mesh._cache.get("face_geometry")
    if geo is None:
        geo = mesh._cache["face_geometry"] = _FaceGeometry(mesh)
    return geo


def _edge_state(config: Configuration):
    mesh = config.mesh
    t, h = mesh.edges[:, 0], mesh.edges[:, 1]
    U = config.connection.transports()
    q = U * config.u[h]
    z = q - config.u[t]
    return t, h, U, q, z


# --------------------------------------------------------------------------
# energy and derivatives


def energy(config: Configuration) -> EnergyBreakdown:
    mesh = config.mesh
    eps2 = config.epsilon**2
    F = curvature(config.connection)
    curv = eps2 * np.sum(F**2 / mesh.face_areas)
    *_, z = _edge_state(config)
    kin = np.sum(mesh.edge_weights * (z.real**2 + z.imag**2))
    pot = np.sum(mesh.vertex_areas * (1.0 - np.abs(config.u) ** 2) ** 2) / (4.0 * eps2)
    return EnergyBreakdown(float(curv), float(kin), float(pot), float(curv + kin + pot))


def gradient(config: Configuration) -> tuple[np.ndarray, np.ndarray]:
    mesh = config.mesh
    V = mesh.n_vertices
    eps2 = config.epsilon**2
    w = mesh.edge_weights
    t, h, U, q, z = _edge_state(config)

    gu_head = 2.0 * w * np.conj(U) * z
    gu_tail = -2.0 * w * z
    grad_u = np.bincount(h, gu_head.real, V) + 1j * np.bincount(h, gu_head.imag, V)
    grad_u += np.bincount(t, gu_tail.real, V) + 1j * np.bincount(t, gu_tail.imag, V)
    u = config.u
    grad_u -= mesh.vertex_areas * (1.0 - np.abs(u) ** 2) * u / eps2

    F = curvature(config.connection)
    grad_A = 2.0 * eps2 * (mesh.d1.T @ (F / mesh.face_areas))
    grad_A += 2.0 * w * np.imag(np.conj(z) * q)
    return grad_u, grad_A


def _edge_hessian_local(w, U, q, z, u_head, v_t, v_h, a):
    """Second differential of the kinetic term on each edge applied to (v, a)."""
    dz = U * v_h - v_t - 1j * a * q
    g_h = 2.0 * w * (np.conj(U) * dz + 1j * a * np.conj(U) * z)
    g_t = -2.0 * w * dz
    g_a = 2.0 * w * np.imag(np.conj(dz) * q - 1j * a * np.conj(z) * q + np.conj(z) * U * v_h)
    return g_t, g_h, g_a


def _potential_hessian_local(area, u, v, eps2):
    return -area / eps2 * ((1.0 - np.abs(u) ** 2) * v - 2.0 * np.real(np.conj(u) * v) * u)


def hessian_apply(config: Configuration, v: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact second differential of the discrete energy applied to ``(v, a)``."""
    mesh = config.mesh
    V = mesh.n_vertices
    eps2 = config.epsilon**2
    t, h, U, q, z = _edge_state(config)
    v = np.asarray(v, dtype=complex)
    a = np.asarray(a, dtype=float)
    g_t, g_h, g_a = _edge_hessian_local(mesh.edge_weights, U, q, z, config.u[h], v[t], v[h], a)
    out_u = np.bincount(h, g_h.real, V) + 1j * np.bincount(h, g_h.imag, V)
    out_u += np.bincount(t, g_t.real, V) + 1j * np.bincount(t, g_t.imag, V)
    out_u += _potential_hessian_local(mesh.vertex_areas, config.u, v, eps2)
    out_a = g_a + 2.0 * eps2 * (mesh.d1.T @ ((mesh.d1 @ a) / mesh.face_areas))
    return out_u, out_a


def hessian_matrix(config: Configuration) -> sp.csr_matrix:
    """Sparse Hessian in real coordinates ``[Re u, Im u, A]``.

    Assembled from local element matrices, independently of the vectorized
    scatter in :func:`hessian_apply`.
    """
    mesh = config.mesh
    V, E = mesh.n_vertices, mesh.n_edges
    eps2 = config.epsilon**2
    t, h, U, q, z = _edge_state(config)
    w = mesh.edge_weights
    rows, cols, vals = [], [], []

    # kinetic: 5x5 blocks over (Re v_t, Im v_t, Re v_h, Im v_h, a_e)
    dof = np.column_stack([t, V + t, h, V + h, 2 * V + np.arange(E)])
    zero_c = np.zeros(E, dtype=complex)
    zero_r = np.zeros(E)
    basis = [
        (zero_c + 1, zero_c, zero_r),
        (zero_c + 1j, zero_c, zero_r),
        (zero_c, zero_c + 1, zero_r),
        (zero_c, zero_c + 1j, zero_r),
        (zero_c, zero_c, zero_r + 1),
    ]
    for col, (vt, vh, ae) in enumerate(basis):
        g_t, g_h, g_a = _edge_hessian_local(w, U, q, z, config.u[h], vt, vh, ae)
        for row, value in enumerate((g_t.real, g_t.imag, g_h.real, g_h.imag, g_a)):
            rows.append(dof[:, row])
            cols.append(dof[:, col])
            vals.append(value)

    # potential: 2x2 blocks per vertex
    vid = np.arange(V)
    for col, direction in enumerate((1.0 + 0j, 1j)):
        out = _potential_hessian_local(mesh.vertex_areas, config.u, np.full(V, direction), eps2)
        for row, value in enumerate((out.real, out.imag)):
            rows.append(vid + row * V)
            cols.append(vid + col * V)
            vals.append(value)

    # curvature: rank-one blocks per face
    fe, fs = mesh.face_edges, mesh.face_signs.astype(float)
    k = fe.shape[1]
    coef = 2.0 * eps2 / mesh.face_areas
    for i in range(k):
        for j in range(k):
            rows.append(2 * V + fe[:, i])
            cols.append(2 * V + fe[:, j])
            vals.append(coef * fs[:, i] * fs[:, j])

    n = 2 * V + E
    H = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return H.tocsr()


# --------------------------------------------------------------------------
# flat real-vector interface used by the solver and the eigensolvers


def pack(u: np.ndarray, A: np.ndarray) -> np.ndarray:
    return np.concatenate([u.real, u.imag, A])


def unpack(x: np.ndarray, n_vertices: int) -> tuple[np.ndarray, np.ndarray]:
    V = n_vertices
    return x[:V] + 1j * x[V:2 * V], x[2 * V:]


def mass_diagonal(mesh: Mesh) -> np.ndarray:
    """L2 mass of the real coordinates: vertex areas twice, then edge weights."""
    return np.concatenate([mesh.vertex_areas, mesh.vertex_areas, mesh.edge_weights])


def el_residual(config: Configuration) -> tuple[float, float]:
    """L2 norms of the two Euler-Lagrange blocks (mass-weighted gradient norms)."""
    grad_u, grad_A = gradient(config)
    mesh = config.mesh
    res_u = np.sqrt(np.sum(np.abs(grad_u) ** 2 / mesh.vertex_areas))
    res_A = np.sqrt(np.sum(grad_A**2 / mesh.edge_weights))
    return float(res_u), float(res_A)


# --------------------------------------------------------------------------
# face reconstruction of the covariant derivative


@dataclass(frozen=True, eq=False)
class _FaceFields:
    grad: np.ndarray  # (F, 2) complex, d_A u in the face frame, base-vertex fiber
    u_mean: np.ndarray  # (F,) complex, u at the face, same fiber
    fiber: np.ndarray  # (F, k) unit complex, maps corner fibers to the base fiber


def _reconstruct(config: Configuration) -> _FaceFields:
    mesh = config.mesh
    geo = _geometry(mesh)
    F = curvature(config.connection)
    theta = mesh.face_signs * config.connection.edge_phase[mesh.face_edges]
    # spread the face holonomy evenly so the corrected loop closes
    corrected = theta - F[:, None] / geo.k
    cum = np.concatenate([np.zeros((mesh.n_faces, 1)), np.cumsum(corrected[:, :-1], axis=1)], axis=1)
    fiber = np.exp(-1j * cum)
    ut = fiber * config.u[mesh.faces]
    diffs = np.roll(ut, -1, axis=1) - ut
    grad = np.einsum("fjk,fk->fj", geo.pinv, diffs)
    return _FaceFields(grad=grad, u_mean=ut.mean(axis=1), fiber=fiber)


def _hodge(g: np.ndarray) -> np.ndarray:
    """Hodge star on face 1-forms: (g1, g2) -> (-g2, g1)."""
    return np.stack([-g[..., 1], g[..., 0]], axis=-1)


def diagnostics(config: Configuration) -> DiagnosticsReport:
    mesh = config.mesh
    eps2 = config.epsilon**2
    u = config.u
    h = (1.0 - np.abs(u) ** 2) / (2.0 * eps2)
    f = curvature(config.connection) / mesh.face_areas
    h_face = mesh.face_average(h)
    g = _reconstruct(config).grad
    star_g = _hodge(g)
    sig_plus = np.sum(np.abs(g - 1j * star_g) ** 2, axis=1)
    sig_minus = np.sum(np.abs(g + 1j * star_g) ** 2, axis=1)
    cross = 2.0 * np.real(1j * g[:, 0] * np.conj(g[:, 1]))
    return DiagnosticsReport(
        h=h,
        f=f,
        phi=f - h_face,
        sigma_norm_sq_plus=sig_plus,
        sigma_norm_sq_minus=sig_minus,
        grad_norm_sq=np.sum(np.abs(g) ** 2, axis=1),
        cross=cross,
        max_f_minus_h=float(np.max(f - h_face)),
        max_negf_minus_h=float(np.max(-f - h_face)),
    )


def bogomolny_split(config: Configuration, report: DiagnosticsReport | None = None) -> BogomolnySplit:
    """Nonnegative defects of the two first-order systems plus the flux term."""
    mesh = config.mesh
    diag = report or diagnostics(config)
    eps2 = config.epsilon**2
    h_face = mesh.face_average(diag.h)
    area = mesh.face_areas
    plus = np.sum((0.5 * diag.sigma_norm_sq_plus + eps2 * (diag.f - h_face) ** 2) * area)
    minus = np.sum((0.5 * diag.sigma_norm_sq_minus + eps2 * (diag.f + h_face) ** 2) * area)
    return BogomolnySplit(float(plus), float(minus), 2.0 * np.pi * config.degree)


def pointwise_bound_check(config: Configuration) -> tuple[float, float]:
    """Signed maxima of ``f - h`` and ``-f - h`` over faces."""
    diag = diagnostics(config)
    return diag.max_f_minus_h, diag.max_negf_minus_h


def _wrap(x):
    return np.angle(np.exp(1j * x))


def vortex_census(config: Configuration) -> tuple[list[tuple[int, int]], int]:
    """Faces around which ``u`` winds, with their gauge-invariant winding numbers."""
    mesh = config.mesh
    u = config.u
    small = np.abs(u) < 1e-12
    flagged = np.zeros(mesh.n_faces, dtype=bool)
    if small.any():
        flagged = small[mesh.faces].any(axis=1)
        warnings.warn(
            f"{int(small.sum())} vertices with |u| < 1e-12; {int(flagged.sum())} faces flagged",
            RuntimeWarning,
            stacklevel=2,
        )
    F = curvature(config.connection)
    theta = mesh.face_signs * config.connection.edge_phase[mesh.face_edges]
    uc = u[mesh.faces]
    nxt = np.roll(uc, -1, axis=1)
    steps = np.angle(np.conj(uc) * np.exp(-1j * theta) * nxt)
    winding = np.rint((steps.sum(axis=1) + F) / (2.0 * np.pi)).astype(int)
    winding[flagged] = 0
    entries = [(int(f), int(winding[f])) for f in np.flatnonzero(winding)]
    return entries, int(winding.sum())


def identity_residuals(config: Configuration) -> dict:
    """L2 residual norms of the pointwise identities satisfied by solutions.

    Keys ``a``, ``d``, ``e`` carry the monitored identities; ``b`` is reported
    for information only.
    """
    mesh = config.mesh
    geo = _geometry(mesh)
    eps2 = config.epsilon**2
    u = config.u
    areas_v = mesh.vertex_areas
    w = mesh.edge_weights
    L = mesh.d0.T @ sp.diags(w) @ mesh.d0

    rec = _reconstruct(config)
    g = rec.grad
    h = (1.0 - np.abs(u) ** 2) / (2.0 * eps2)
    f = curvature(config.connection) / mesh.face_areas
    f_v = mesh.vertex_average(f)
    du_sq_v = mesh.vertex_average(np.sum(np.abs(g) ** 2, axis=1))

    # (a) Laplacian of h
    lap_h = (L @ h) / areas_v
    res_a = lap_h - (du_sq_v - np.abs(u) ** 2 * h) / eps2

    # (b) Laplacian of f, information only
    cross_v = mesh.vertex_average(2.0 * np.real(1j * g[:, 0] * np.conj(g[:, 1])))
    res_b = (L @ f_v) / areas_v - (cross_v - np.abs(u) ** 2 * f_v) / eps2

    sigma = g - 1j * _hodge(g)
    fh_v = f_v - h

    # (d) codifferential of phi against Re<i u, sigma> / eps^2, on faces
    d_fh = np.roll(fh_v[mesh.faces], -1, axis=1) - fh_v[mesh.faces]
    G = np.einsum("fjk,fk->fj", geo.pinv, d_fh)
    lhs_d = np.stack([G[:, 1], -G[:, 0]], axis=1)
    rhs_d = np.real(1j * rec.u_mean[:, None] * np.conj(sigma)) / eps2
    res_d = lhs_d - rhs_d

    # (e) covariant exterior derivative of sigma via dual-cell circulation
    circ = np.einsum("fj,fkj->fk", sigma, geo.dual_seg) * np.conj(rec.fiber)
    curl = np.bincount(mesh.faces.ravel(), circ.real.ravel(), mesh.n_vertices)
    curl = curl + 1j * np.bincount(mesh.faces.ravel(), circ.imag.ravel(), mesh.n_vertices)
    res_e = curl / areas_v + 1j * fh_v * u

    def vnorm(r):
        return float(np.sqrt(np.sum(areas_v * np.abs(r) ** 2)))

    return {
        "a": vnorm(res_a),
        "b": vnorm(res_b),
        "d": float(np.sqrt(np.sum(mesh.face_areas[:, None] * res_d**2))),
        "e": vnorm(res_e),
    }
