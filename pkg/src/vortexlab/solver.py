"""Energy minimization by preconditioned Polak-Ribiere nonlinear CG.

The default preconditioner approximates the principal part of the Hessian:
the covariant Laplacian plus a potential shift on the section, and the
Hodge Laplacian on 1-forms plus the Higgs mass ``2 w |u|^2`` on the
connection. It is refactored whenever the gauge is re-fixed. The ``mass``
preconditioner (plain L2 mass) is kept for comparison.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .bundle import (
    Configuration,
    Section,
    background_connection,
    coulomb_gauge_fix,
    covariant_derivative,
    curvature,
)
from .energy import bogomolny_split, gradient, hessian_apply, mass_diagonal, pack, unpack
from .mesh import Mesh

logger = logging.getLogger("vortexlab")


@dataclass
class SolveOptions:
    max_iterations: int | None = None
    grad_tolerance: float = 1e-8
    shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    restart_period: int = 50
    hard_restart: bool = False
    preconditioner: str = "laplacian"
    seed: int = 0
    log_path: str | None = None

    def __post_init__(self):
        errors = []
        if not self.grad_tolerance > 0:
            errors.append("grad_tolerance must be positive")
        if not 0 < self.shrink < 1:
            errors.append("shrink must lie in (0, 1)")
        if not 0 < self.sufficient_decrease <= 0.5:
            errors.append("sufficient_decrease must lie in (0, 0.5]")
        if self.restart_period < 1:
            errors.append("restart_period must be >= 1")
        if self.preconditioner not in ("laplacian", "mass"):
            errors.append("preconditioner must be 'laplacian' or 'mass'")
        if self.max_iterations is not None and self.max_iterations < 1:
            errors.append("max_iterations must be >= 1")
        if errors:
            raise ValueError("; ".join(errors))

    def iteration_cap(self, n_unknowns: int) -> int:
        if self.max_iterations is not None:
            return self.max_iterations
        return min(200_000, int(50 * math.sqrt(n_unknowns)))


@dataclass
class MinimizeResult:
    config: Configuration
    iterations: int
    energy_history: list[float]
    grad_norm: float
    converged: bool
    message: str = ""
    gauge_fix_shifts: list[float] = field(default_factory=list)

    @property
    def energy(self) -> float:
        return self.energy_history[-1]


def random_configuration(mesh: Mesh, d: int, epsilon: float, seed: int) -> Configuration:
    """Gaussian section with E|u|^2 = 1 and a small uniform fluctuation."""
    rng = np.random.default_rng(seed)
    V, E = mesh.n_vertices, mesh.n_edges
    u = (rng.standard_normal(V) + 1j * rng.standard_normal(V)) / np.sqrt(2.0)
    A = rng.uniform(-0.1, 0.1, E)
    conn = background_connection(mesh, d).with_fluctuation(A)
    return Configuration(Section(mesh, u), conn, float(epsilon))


class _Problem:
    """Flat real-vector view of the energy for a fixed mesh, background and eps."""

    def __init__(self, template: Configuration):
        self.template = template
        self.mesh = template.mesh
        self.V = self.mesh.n_vertices
        self.mass = mass_diagonal(self.mesh)

    def config(self, x: np.ndarray) -> Configuration:
        u, A = unpack(x, self.V)
        return self.template.replace(u=u, A=A)

    def energy(self, x: np.ndarray) -> float:
        mesh = self.mesh
        c = self.config(x)
        eps2 = c.epsilon**2
        F = curvature(c.connection)
        t, h = mesh.edges[:, 0], mesh.edges[:, 1]
        z = c.connection.transports() * c.u[h] - c.u[t]
        return float(
            eps2 * np.sum(F**2 / mesh.face_areas)
            + np.sum(mesh.edge_weights * (z.real**2 + z.imag**2))
            + np.sum(mesh.vertex_areas * (1.0 - np.abs(c.u) ** 2) ** 2) / (4.0 * eps2)
        )

    def energy_change(self, x: np.ndarray, step: np.ndarray) -> float:
        """``E(x + step) - E(x)`` built from increments, without cancellation."""
        mesh = self.mesh
        c = self.config(x)
        eps2 = c.epsilon**2
        du, dA = unpack(step, self.V)
        u = c.u

        F = curvature(c.connection)
        dF = mesh.d1 @ dA
        d_curv = eps2 * np.sum(dF * (2.0 * F + dF) / mesh.face_areas)

        t, h = mesh.edges[:, 0], mesh.edges[:, 1]
        U = c.connection.transports()
        z = U * u[h] - u[t]
        # exp(-i y) - 1 without cancellation
        half = np.sin(0.5 * dA)
        em1 = -2.0 * half**2 - 1j * np.sin(dA)
        dz = U * (em1 * (u[h] + du[h]) + du[h]) - du[t]
        d_kin = np.sum(mesh.edge_weights * np.real(dz * np.conj(2.0 * z + dz)))

        s_old = 1.0 - np.abs(u) ** 2
        ds = -np.real(du * np.conj(2.0 * u + du))
        d_pot = np.sum(mesh.vertex_areas * ds * (2.0 * s_old + ds)) / (4.0 * eps2)
        return float(d_curv + d_kin + d_pot)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        gu, gA = gradient(self.config(x))
        return pack(gu, gA)

    def curvature_along(self, x: np.ndarray, p: np.ndarray) -> float:
        pu, pA = unpack(p, self.V)
        Hu, HA = hessian_apply(self.config(x), pu, pA)
        return float(np.real(np.vdot(pu, Hu)) + HA @ pA)


# floor on the edge |u|^2 so the connection block stays definite in the normal phase
_HIGGS_FLOOR = 0.05


def _spd_lu(P):
    # symmetric ordering and diagonal pivots: far less fill than the default
    return splu(
        sp.csc_matrix(P),
        permc_spec="MMD_AT_PLUS_A",
        diag_pivot_thresh=0.0,
        options={"SymmetricMode": True},
    )


class _Preconditioner:
    def __init__(self, config: Configuration, kind: str):
        mesh = config.mesh
        self.V = mesh.n_vertices
        self.mass = mass_diagonal(mesh)
        self.kind = kind
        if kind == "mass":
            return
        eps2 = config.epsilon**2
        w = mesh.edge_weights
        D = covariant_derivative(config.connection)
        Pu = 2.0 * (D.conj().T @ sp.diags(w) @ D + sp.diags(mesh.vertex_areas / (2.0 * eps2)))
        abs2 = np.abs(config.u) ** 2
        edge_abs2 = np.maximum(0.5 * (abs2[mesh.edges[:, 0]] + abs2[mesh.edges[:, 1]]), _HIGGS_FLOOR)
        W = sp.diags(w)
        hodge = mesh.d1.T @ sp.diags(1.0 / mesh.face_areas) @ mesh.d1 + W @ mesh.d0 @ sp.diags(
            1.0 / mesh.vertex_areas
        ) @ mesh.d0.T @ W
        PA = 2.0 * eps2 * hodge + 2.0 * sp.diags(w * edge_abs2)
        self.lu_u = _spd_lu(Pu)
        self.lu_A = _spd_lu(PA)

    def __call__(self, g: np.ndarray) -> np.ndarray:
        if self.kind == "mass":
            return g / self.mass
        gu, gA = unpack(g, self.V)
        return pack(self.lu_u.solve(gu), self.lu_A.solve(gA))


def minimize(initial: Configuration, opts: SolveOptions | None = None) -> MinimizeResult:
    opts = opts or SolveOptions()
    prob = _Problem(initial)
    V = prob.V
    x = pack(initial.u, initial.A)
    n = len(x)
    cap = opts.iteration_cap(n)

    E = prob.energy(x)
    history = [E]
    g = prob.gradient(x)
    precond = _Preconditioner(initial, opts.preconditioner)
    s = precond(g)
    gs = float(g @ s)
    gnorm = math.sqrt(float(g @ (g / prob.mass)))
    p = -s
    alpha_prev = 1.0
    shifts: list[float] = []
    log_rows = [] if opts.log_path else None
    converged = False
    message = "iteration cap reached"
    it = 0

    def grad_norm():
        return gnorm

    for it in range(1, cap + 1):
        if grad_norm() <= opts.grad_tolerance * max(1.0, E):
            converged = True
            message = "gradient tolerance reached"
            it -= 1
            break

        slope = float(g @ p)
        if slope >= 0:
            p = -s
            slope = -gs
        curv = prob.curvature_along(x, p)
        alpha = -slope / curv if curv > 0 else 2.0 * alpha_prev
        accepted = False
        while alpha > 1e-20:
            dE = prob.energy_change(x, alpha * p)
            if dE <= opts.sufficient_decrease * alpha * slope:
                accepted = True
                break
            alpha *= opts.shrink
        if not accepted:
            if np.array_equal(p, -s):
                message = "line search failed along steepest descent"
                it -= 1
                break
            p = -s
            continue

        x = x + alpha * p
        E = E + dE
        history.append(E)
        alpha_prev = alpha

        g_new = prob.gradient(x)
        gnorm = math.sqrt(float(g_new @ (g_new / prob.mass)))
        s_new = precond(g_new)
        beta = max(0.0, float(g_new @ (s_new - s)) / gs) if gs > 0 else 0.0
        g, s = g_new, s_new
        if it % opts.restart_period == 0:
            x, g, p, shift = _gauge_fix_state(prob, x, g, p)
            shifts.append(shift)
            precond = _Preconditioner(prob.config(x), opts.preconditioner)
            s = precond(g)
            if opts.hard_restart:
                beta = 0.0
        gs = float(g @ s)
        p = -s + beta * p

        if log_rows is not None:
            defect = bogomolny_split(prob.config(x)).defect_plus
            log_rows.append((it, E, grad_norm(), defect))
    else:
        converged = grad_norm() <= opts.grad_tolerance * max(1.0, E)
        if converged:
            message = "gradient tolerance reached"

    if log_rows is not None:
        _write_log(opts.log_path, log_rows)

    final = prob.config(x)
    logger.info("minimize: %s after %d iterations, E=%.12g, |g|=%.3e", message, it, E, grad_norm())
    return MinimizeResult(
        config=final,
        iterations=it,
        energy_history=history,
        grad_norm=grad_norm(),
        converged=converged,
        message=message,
        gauge_fix_shifts=shifts,
    )


def _gauge_fix_state(prob: _Problem, x, g, p):
    """Move to Coulomb gauge, carrying gradient and direction along covariantly."""
    V = prob.V
    theta, fixed = coulomb_gauge_fix(prob.config(x))
    phase = np.exp(-1j * theta)

    def rotate(y):
        yu, yA = unpack(y, V)
        return pack(phase * yu, yA)

    x_new = pack(fixed.u, fixed.A)
    shift = prob.energy_change(x, x_new - x)
    return x_new, rotate(g), rotate(p), shift


def _write_log(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "energy", "grad_norm", "defect_plus"])
        for row in rows:
            writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


def continue_in_epsilon(
    config: Configuration, epsilon_schedule: list[float], opts: SolveOptions | None = None
) -> list[MinimizeResult]:
    """Minimize at each epsilon in turn, warm-starting from the previous stage."""
    if not epsilon_schedule:
        raise ValueError("epsilon schedule is empty")
    results = []
    current = config
    for eps in epsilon_schedule:
        result = minimize(current.replace(epsilon=eps), opts)
        results.append(result)
        current = result.config
    return results
