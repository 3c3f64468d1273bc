import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.linalg import eigsh

from vortexlab.bundle import Configuration, Section, background_connection
from vortexlab.mesh import build_sphere_mesh, build_torus_mesh
from vortexlab.solver import minimize, random_configuration
from vortexlab.stability import magnetic_laplacian

TWO_PI = 2.0 * np.pi
ACCEPTANCE_LINES = pytest.StashKey[list]()


# --------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, "rep_" + rep.when, rep)


class _Criterion:
    def __init__(self):
        self.label = ""
        self.detail = {}


@pytest.fixture
def criterion(request):
    """Collects a label and measured values; prints the verdict line at teardown."""
    rec = _Criterion()
    yield rec
    rep = getattr(request.node, "rep_call", None)
    status = "PASS" if rep is not None and rep.passed else "FAIL"
    values = "; ".join(f"{k}: {v}" for k, v in rec.detail.items())
    line = f"{status} {rec.label}: {values}"
    request.config.stash.setdefault(ACCEPTANCE_LINES, []).append(line)
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    if reporter is not None:
        reporter.write_line("")
        reporter.write_line(line)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def torus8():
    return build_torus_mesh(8, 8, TWO_PI, TWO_PI)


@pytest.fixture(scope="session")
def torus6x5():
    return build_torus_mesh(6, 5, 2.0, 1.5)


@pytest.fixture(scope="session")
def sphere1():
    return build_sphere_mesh(1)


@pytest.fixture(scope="session")
def sphere2():
    return build_sphere_mesh(2)


@pytest.fixture(scope="session")
def vortex32():
    """Converged d=1, eps=0.5 minimizer on the 2pi x 2pi torus, 32 x 32."""
    mesh = build_torus_mesh(32, 32, TWO_PI, TWO_PI)
    result = minimize(random_configuration(mesh, 1, 0.5, 1))
    assert result.converged
    return result


def random_config(mesh, d, eps, seed):
    return random_configuration(mesh, d, eps, seed)


def lowest_landau_section(conn):
    """Lowest eigenvector of the magnetic Laplacian, normalized to mean |u|^2 = 1."""
    mesh = conn.mesh
    L = magnetic_laplacian(conn)
    V = mesh.n_vertices
    if V <= 400:
        _, vecs = np.linalg.eigh(L.toarray())
        psi = vecs[:, 0]
    else:
        Lr = sp.bmat([[L.real, -L.imag], [L.imag, L.real]]).tocsc()
        _, vecs = eigsh(Lr, 1, sigma=-1e-3, which="LM")
        psi = vecs[:V, 0] + 1j * vecs[V:, 0]
    psi = psi / np.sqrt(mesh.vertex_areas)
    return psi / np.sqrt(np.sum(mesh.vertex_areas * np.abs(psi) ** 2) / mesh.total_area)


def smooth_config(n, d=1, eps=0.5, seed=0):
    """Smooth synthetic configuration on the 2pi torus: modulated lowest Landau level
    section plus a smooth fluctuation 1-form integrated along the edges."""
    mesh = build_torus_mesh(n, n, TWO_PI, TWO_PI)
    conn = background_connection(mesh, d)
    psi = lowest_landau_section(conn)
    x, y = mesh.positions[:, 0], mesh.positions[:, 1]
    a = np.random.default_rng(seed).uniform(-0.3, 0.3, 4)
    u = psi * (1 + a[0] * np.cos(x) + a[1] * np.sin(y) + 1j * a[2] * np.cos(x + y))
    mid = 0.5 * (mesh.positions[mesh.edges[:, 0]] + mesh.positions[mesh.edges[:, 1]])
    h = TWO_PI / n
    E = mesh.n_edges
    A = np.empty(E)
    A[: E // 2] = a[3] * np.sin(mid[: E // 2, 1]) * h
    A[E // 2 :] = 0.2 * np.cos(mid[E // 2 :, 0]) * h
    return Configuration(Section(mesh, u), conn.with_fluctuation(A), eps)
