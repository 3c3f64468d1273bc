"""Spectral stability tests.

Eigenvalues are Rayleigh quotients against the L2 mass, i.e. the generalized
problem ``H x = lambda M x``, restricted to the M-orthogonal complement of the
gauge directions ``(i theta u, d0 theta)``. Small problems are solved densely
on an explicit basis of that complement. Large ones go through a shift-invert
Lanczos pass on a gauge-penalized Hessian followed by projected Rayleigh-Ritz
and an LOBPCG polish in which the exact gauge projector sits inside every
product.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, eigsh, lobpcg, splu

from .bundle import Configuration, Connection, Section, background_connection, covariant_derivative
from .energy import bogomolny_split, energy, hessian_matrix, mass_diagonal
from .mesh import Mesh
from .solver import MinimizeResult

logger = logging.getLogger("vortexlab")

DENSE_THRESHOLD = 4000
# complex dense eigh is slow; shift-invert is cheap for the scalar operator
LAPLACIAN_DENSE_THRESHOLD = 1500
ZERO_SECTION_TOL = 1e-10
DISCRETE_NOTE = (
    "stability is tested over the finite-dimensional lattice variation space, "
    "not over all W^{1,2} variations"
)


@dataclass
class SpectrumResult:
    eigenvalues: list[float]
    gauge_mode_count: int
    residuals: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = True
    method: str = "dense"
    operator_norm: float = 0.0
    negative_count: int | None = None
    note: str = DISCRETE_NOTE

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StabilityVerdict:
    is_stable: bool
    lambda_min: float
    vortex_residual: float
    branch: str
    satisfies_vortex: bool
    theorem_consistent: bool
    edge_case: str | None = None
    energy: float = 0.0
    degree: int = 0
    epsilon: float = 0.0
    spectrum: SpectrumResult | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.spectrum is not None:
            out["spectrum"] = self.spectrum.to_dict()
        return out


# --------------------------------------------------------------------------
# shared linear algebra


def _symmetric_lu(A: sp.spmatrix):
    return splu(
        sp.csc_matrix(A),
        permc_spec="MMD_AT_PLUS_A",
        diag_pivot_thresh=0.0,
        options={"SymmetricMode": True},
    )


def _count_below(A: sp.spmatrix, sigma: float) -> tuple[int, object]:
    """Number of eigenvalues of symmetric ``A`` below ``sigma`` (Sylvester inertia)."""
    lu = _symmetric_lu(A - sigma * sp.identity(A.shape[0], format="csc"))
    return int(np.sum(lu.U.diagonal() < 0)), lu


def _lower_shift(A: sp.spmatrix, start: float, floor: float):
    """A shift strictly below the spectrum of ``A`` and the factorization there."""
    sigma = start
    while True:
        count, lu = _count_below(A, sigma)
        if count == 0:
            return sigma, lu
        if sigma <= floor:
            raise RuntimeError("could not bracket the bottom of the spectrum")
        sigma = max(2.0 * sigma - 1.0, floor)


def _gershgorin(A: sp.spmatrix) -> float:
    return float(np.max(np.asarray(abs(A).sum(axis=1)).ravel()))


# --------------------------------------------------------------------------
# Hessian spectrum modulo gauge


def gauge_basis(config: Configuration, zero_tol: float = ZERO_SECTION_TOL) -> sp.csr_matrix:
    """Columns ``(i theta_b u, d0 theta_b)`` for vertex indicators ``theta_b``.

    When ``u`` vanishes to ``zero_tol`` the section part drops out and one
    vertex is grounded so the remaining columns stay independent.
    """
    mesh = config.mesh
    V, E = mesh.n_vertices, mesh.n_edges
    d0 = mesh.d0.tocsc()
    if np.max(np.abs(config.u)) < zero_tol:
        top = sp.csc_matrix((2 * V, V - 1))
        return sp.vstack([top, d0[:, 1:]]).tocsr()
    u = config.u
    upper = sp.vstack([sp.diags(-u.imag), sp.diags(u.real)])
    return sp.vstack([upper, d0]).tocsr()


class _ProjectedHessian:
    """Mass-normalized Hessian with the exact gauge projector."""

    def __init__(self, config: Configuration, zero_tol: float = ZERO_SECTION_TOL):
        self.config = config
        mass = mass_diagonal(config.mesh)
        self.scale_in = sp.diags(1.0 / np.sqrt(mass))
        self.H = (self.scale_in @ hessian_matrix(config) @ self.scale_in).tocsr()
        self.n = self.H.shape[0]
        G = gauge_basis(config, zero_tol)
        self.Q = (sp.diags(np.sqrt(mass)) @ G).tocsr()
        self.m = self.Q.shape[1]
        self.S = (self.Q.T @ self.Q).tocsc()
        self.S_lu = splu(self.S)

    def project(self, Y: np.ndarray) -> np.ndarray:
        coeff = self.S_lu.solve(np.asarray(self.Q.T @ Y))
        return Y - self.Q @ coeff

    def apply(self, Y: np.ndarray) -> np.ndarray:
        PY = self.project(Y)
        return self.project(self.H @ PY) + self.penalty * (Y - PY)

    def penalized(self, penalty: float) -> sp.csr_matrix:
        return (self.H + penalty * (self.Q @ self.Q.T)).tocsr()


def _dense_restricted(ph: _ProjectedHessian, k: int) -> SpectrumResult:
    Z = sla.null_space(ph.Q.T.toarray())
    Hd = ph.H.toarray()
    block = Z.T @ Hd @ Z
    vals, vecs = np.linalg.eigh(0.5 * (block + block.T))
    k = min(k, len(vals))
    X = Z @ vecs[:, :k]
    R = ph.project(Hd @ X) - X * vals[:k]
    return SpectrumResult(
        eigenvalues=[float(v) for v in vals[:k]],
        gauge_mode_count=ph.m,
        residuals=[float(r) for r in np.linalg.norm(R, axis=0)],
        method="dense",
        operator_norm=_gershgorin(ph.H),
    )


def smallest_hessian_eigs(
    config: Configuration,
    k: int = 4,
    tol: float = 1e-8,
    dense_threshold: int = DENSE_THRESHOLD,
    stability_tol: float = 1e-6,
    zero_tol: float = ZERO_SECTION_TOL,
) -> SpectrumResult:
    """Smallest ``k`` Hessian eigenvalues on the gauge-orthogonal complement.

    ``tol`` is the residual target relative to a norm estimate of the
    operator. ``negative_count`` counts eigenvalues of the gauge-penalized
    Hessian below ``-stability_tol`` by inertia; it is a convergence-free
    check of the stability verdict.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ph = _ProjectedHessian(config, zero_tol)
    if ph.n <= dense_threshold:
        return _dense_restricted(ph, k)

    norm = _gershgorin(ph.H)
    scale = max(1.0, 1.0 / config.epsilon**2)
    s_min = float(eigsh(ph.S, k=1, sigma=-1e-12 * _gershgorin(ph.S), which="LM", return_eigenvectors=False)[0])
    ph.penalty = 10.0 * scale / max(s_min, 1e-8 * scale)
    Hp = ph.penalized(ph.penalty)

    negative_count, _ = _count_below(Hp, -stability_tol)
    sigma, lu = _lower_shift(Hp, -0.01 * scale, -2.0 * _gershgorin(Hp))
    op = LinearOperator(Hp.shape, matvec=lu.solve, dtype=float)
    extra = min(k + 4, ph.n - 2)
    vals, Y = eigsh(Hp, k=extra, sigma=sigma, which="LM", OPinv=op, tol=1e-12)

    Y = ph.project(Y)
    keep = np.linalg.norm(Y, axis=0) > 0.5
    Y, _ = np.linalg.qr(Y[:, keep])
    B = Y.T @ ph.apply(Y)
    theta, W = np.linalg.eigh(0.5 * (B + B.T))
    X = Y @ W
    R = ph.apply(X) - X * theta
    res = np.linalg.norm(R, axis=0)
    iterations = 0

    target = tol * norm
    if np.any(res[:k] > target):
        precond = LinearOperator(Hp.shape, matvec=lambda r: ph.project(lu.solve(ph.project(r))), dtype=float)
        A_op = LinearOperator(Hp.shape, matvec=ph.apply, matmat=ph.apply, dtype=float)
        theta, X, hist = lobpcg(
            A_op, X, M=precond, tol=target, maxiter=200, largest=False, retResidualNormsHistory=True
        )
        iterations = len(hist)
        order = np.argsort(theta)
        theta, X = theta[order], X[:, order]
        R = ph.apply(X) - X * theta
        res = np.linalg.norm(R, axis=0)

    k = min(k, len(theta))
    converged = bool(np.all(res[:k] <= target))
    if not converged:
        logger.warning("hessian eigensolve: residuals %s exceed %.2e", res[:k], target)
    return SpectrumResult(
        eigenvalues=[float(v) for v in theta[:k]],
        gauge_mode_count=ph.m,
        residuals=[float(r) for r in res[:k]],
        iterations=iterations,
        converged=converged,
        method="shift-invert+lobpcg",
        operator_norm=norm,
        negative_count=negative_count,
    )


# --------------------------------------------------------------------------
# magnetic Laplacian


def magnetic_laplacian(conn: Connection) -> sp.csr_matrix:
    """Mass-normalized ``M^-1/2 D^H W D M^-1/2`` (Hermitian, PSD)."""
    mesh = conn.mesh
    D = covariant_derivative(conn)
    s = sp.diags(1.0 / np.sqrt(mesh.vertex_areas))
    return (s @ (D.conj().T @ sp.diags(mesh.edge_weights) @ D) @ s).tocsr()


def magnetic_laplacian_eigs(
    conn: Connection, k: int = 4, dense_threshold: int = LAPLACIAN_DENSE_THRESHOLD
) -> SpectrumResult:
    L = magnetic_laplacian(conn)
    V = L.shape[0]
    norm = _gershgorin(L)
    if V <= dense_threshold:
        vals, vecs = np.linalg.eigh(L.toarray())
        k = min(k, V)
        R = L @ vecs[:, :k] - vecs[:, :k] * vals[:k]
        return SpectrumResult(
            eigenvalues=[float(v) for v in vals[:k]],
            gauge_mode_count=0,
            residuals=[float(r) for r in np.linalg.norm(R, axis=0)],
            method="dense",
            operator_norm=norm,
        )
    # real symmetric embedding doubles every eigenvalue
    Lr = sp.bmat([[L.real, -L.imag], [L.imag, L.real]]).tocsc()
    sigma = -1e-3 * max(norm, 1.0) / V
    vals, vecs = eigsh(Lr, k=2 * k, sigma=sigma, which="LM", tol=1e-12)
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]
    R = Lr @ vecs - vecs * vals
    res = np.linalg.norm(R, axis=0)
    return SpectrumResult(
        eigenvalues=[float(v) for v in vals[::2][:k]],
        gauge_mode_count=0,
        residuals=[float(r) for r in res[::2][:k]],
        method="shift-invert",
        operator_norm=norm,
    )


# --------------------------------------------------------------------------
# verdicts


def _bradlow_equality(mesh: Mesh, d: int, epsilon: float, rtol: float = 1e-9) -> bool:
    return abs(abs(d) - mesh.total_area / (4.0 * np.pi * epsilon**2)) <= rtol * max(1.0, abs(d))


def _verdict(
    config: Configuration,
    spectrum: SpectrumResult,
    stability_tol: float,
    vortex_tol: float,
    zero_tol: float,
) -> StabilityVerdict:
    mesh = config.mesh
    d = config.degree
    E = energy(config).total
    split = bogomolny_split(config)
    lam = spectrum.eigenvalues[0]
    is_stable = lam >= -stability_tol * max(1.0, E)
    if d > 0:
        branch, residual = "vortex", split.defect_plus
    elif d < 0:
        branch, residual = "anti-vortex", split.defect_minus
    else:
        branch, residual = "vacuum", min(split.defect_plus, split.defect_minus)
    satisfies = residual <= vortex_tol * max(1.0, E)

    edge_case = None
    zero_section = float(np.max(np.abs(config.u))) <= zero_tol
    if zero_section and not satisfies:
        # the theorem excludes u = 0 on the torus; on the sphere only when |d| > eps^-2
        if mesh.topology == "torus" or abs(d) > mesh.total_area / (4.0 * np.pi * config.epsilon**2):
            edge_case = "zero-section"
    consistent = (not is_stable) or satisfies or edge_case is not None
    return StabilityVerdict(
        is_stable=bool(is_stable),
        lambda_min=float(lam),
        vortex_residual=float(residual),
        branch=branch,
        satisfies_vortex=bool(satisfies),
        theorem_consistent=bool(consistent),
        edge_case=edge_case,
        energy=float(E),
        degree=int(d),
        epsilon=float(config.epsilon),
        spectrum=spectrum,
    )


def zero_section_report(
    mesh: Mesh,
    d: int,
    epsilon: float,
    k: int = 4,
    stability_tol: float = 1e-6,
    vortex_tol: float = 1e-8,
) -> StabilityVerdict:
    """Stability of ``(0, harmonic connection)`` and whether it solves the vortex system."""
    conn = background_connection(mesh, d)
    config = Configuration(Section(mesh, np.zeros(mesh.n_vertices, dtype=complex)), conn, float(epsilon))
    spectrum = smallest_hessian_eigs(config, k=k, stability_tol=stability_tol)
    return _verdict(config, spectrum, stability_tol, vortex_tol, zero_tol=ZERO_SECTION_TOL)


@dataclass
class VerdictTolerances:
    stability: float = 1e-6
    vortex: float = 0.02
    zero_section: float = 1e-3
    k: int = 4


def theorem_verdict(result: MinimizeResult, tol_bundle: VerdictTolerances | None = None) -> StabilityVerdict:
    """Stable minimizers should solve the first-order system matching sign(d)."""
    tols = tol_bundle or VerdictTolerances()
    if not result.converged:
        raise ValueError("theorem_verdict needs a converged minimization result")
    spectrum = smallest_hessian_eigs(result.config, k=tols.k, stability_tol=tols.stability)
    return _verdict(result.config, spectrum, tols.stability, tols.vortex, tols.zero_section)
