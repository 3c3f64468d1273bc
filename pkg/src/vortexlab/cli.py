"""Command-line front end.

Every subcommand writes one JSON report (to ``--out`` or stdout) that embeds
the fully resolved configuration. Exit codes: 0 success, 1 invalid input,
2 numerical failure. Failures also print a JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence

from . import __version__
from .bundle import CorruptedConnectionError, PoissonSolveError, degree
from .energy import bogomolny_split, diagnostics, energy, identity_residuals, vortex_census
from .io import (
    ConfigError,
    ExperimentConfig,
    SnapshotError,
    dump_fields,
    load_fields,
    load_snapshot,
    parse_config,
    provenance,
    save_snapshot,
    validate_config,
    write_json,
    write_table,
)
from .solver import MinimizeResult, minimize, random_configuration
from .stability import (
    VerdictTolerances,
    magnetic_laplacian_eigs,
    smallest_hessian_eigs,
    theorem_verdict,
    zero_section_report,
)

logger = logging.getLogger("vortexlab")


class NumericalFailure(RuntimeError):
    """A computation finished but did not meet its own convergence criterion."""

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report


# --------------------------------------------------------------------------
# argument handling

# flag name -> (config path, type)
_OVERRIDES = {
    "degree": (("degree",), int),
    "epsilon": (("epsilon",), float),
    "seed": (("seed",), int),
    "nx": (("geometry", "torus", "nx"), int),
    "ny": (("geometry", "torus", "ny"), int),
    "lx": (("geometry", "torus", "lx"), float),
    "ly": (("geometry", "torus", "ly"), float),
    "subdiv": (("geometry", "sphere", "subdivisions"), int),
    "radius": (("geometry", "sphere", "radius"), float),
    "max_iterations": (("solve", "max_iterations"), int),
    "grad_tolerance": (("solve", "grad_tolerance"), float),
    "restart_period": (("solve", "restart_period"), int),
    "k": (("spectrum", "k"), int),
    "tolerance": (("spectrum", "tolerance"), float),
    "stability_tolerance": (("spectrum", "stability_tolerance"), float),
    "vortex_tolerance": (("spectrum", "vortex_tolerance"), float),
    "out": (("output", "out"), str),
    "fields_dir": (("output", "fields_dir"), str),
    "log": (("output", "log"), str),
    "snapshot": (("output", "snapshot"), str),
}


def _add_common(p: argparse.ArgumentParser, snapshot_input: bool = False) -> None:
    p.add_argument("--config", help="JSON experiment document")
    p.add_argument("--out", help="report path (default: stdout)")
    p.add_argument("--fields-dir", dest="fields_dir", help="directory for whitespace CSV field dumps")
    p.add_argument("--log", help="per-iteration CSV log of the minimizer")
    p.add_argument("--seed", type=int)
    p.add_argument("--geometry", choices=["torus", "sphere"])
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--lx", type=float)
    p.add_argument("--ly", type=float)
    p.add_argument("--subdiv", type=int)
    p.add_argument("--radius", type=float)
    p.add_argument("--degree", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--grad-tolerance", dest="grad_tolerance", type=float)
    p.add_argument("--restart-period", dest="restart_period", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--stability-tolerance", dest="stability_tolerance", type=float)
    p.add_argument("--vortex-tolerance", dest="vortex_tolerance", type=float)
    if snapshot_input:
        p.add_argument("--snapshot", help="snapshot to analyse instead of minimizing")
        p.add_argument("--from-fields", dest="from_fields", help="field-dump directory to analyse")
    else:
        p.add_argument("--snapshot", help="where to write the final snapshot")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vortexlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"vortexlab {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("mesh-info", help="mesh counts, areas and checksum"))
    _add_common(sub.add_parser("minimize", help="minimize from a seeded random start"))
    _add_common(sub.add_parser("spectrum", help="smallest Hessian eigenvalues modulo gauge"), snapshot_input=True)
    _add_common(sub.add_parser("kuwabara", help="lowest magnetic Laplacian eigenvalues"))
    _add_common(sub.add_parser("zero-section", help="stability of the zero section"))
    scan = sub.add_parser("bradlow-scan", help="minimize over a range of epsilon")
    _add_common(scan)
    scan.add_argument("--epsilons", required=True, help="start:stop:count, inclusive linear spacing")
    _add_common(sub.add_parser("diagnose", help="energy split, bounds, census and identity residuals"), snapshot_input=True)
    _add_common(sub.add_parser("verdict", help="stability plus vortex-equation check"), snapshot_input=True)
    return parser


def _set(doc: dict, path: tuple, value) -> None:
    for key in path[:-1]:
        node = doc.get(key)
        if not isinstance(node, dict):
            node = {}
            doc[key] = node
        doc = node
    doc[path[-1]] = value


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (if any) with command-line overrides applied, then validated."""
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError([{"field": "--config", "message": str(exc)}]) from None
        doc = json.loads(parse_config(text).model_dump_json(exclude_unset=True))
    else:
        doc = {}
    geometry = doc.get("geometry") or {}
    if args.geometry:
        if args.geometry not in geometry:
            geometry = {args.geometry: {}}
    elif not geometry:
        if args.subdiv is not None or args.radius is not None:
            geometry = {"sphere": {}}
        else:
            geometry = {"torus": {}}
    doc["geometry"] = geometry
    kind = next(iter(geometry)) if len(geometry) == 1 else None
    for name, (path, _) in _OVERRIDES.items():
        value = getattr(args, name, None)
        if value is None:
            continue
        if path[0] == "geometry":
            if path[1] != kind:
                raise ConfigError([{"field": f"--{name}", "message": f"does not apply to {kind} geometry"}])
        # on analysis subcommands --snapshot names an input, reported under "input"
        if name == "snapshot" and hasattr(args, "from_fields"):
            continue
        _set(doc, path, value)
    return validate_config(doc)


def parse_epsilons(text: str) -> list[float]:
    parts = text.split(":")
    try:
        if len(parts) != 3:
            raise ValueError
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise ConfigError([{"field": "epsilons", "message": "expected start:stop:count"}]) from None
    if count < 1 or not (start > 0 and stop > 0) or not (math.isfinite(start) and math.isfinite(stop)):
        raise ConfigError([{"field": "epsilons", "message": "need positive finite bounds and count >= 1"}])
    if count == 1:
        return [start]
    return [float(x) for x in np.linspace(start, stop, count)]


# --------------------------------------------------------------------------
# shared pieces


def _header(command: str, cfg: ExperimentConfig) -> dict:
    return {"command": command, "version": __version__, "config": cfg.resolved()}


def _minimize(cfg: ExperimentConfig, mesh=None) -> MinimizeResult:
    mesh = mesh or cfg.build_mesh()
    start = random_configuration(mesh, cfg.degree, cfg.epsilon, cfg.seed)
    return minimize(start, cfg.solve_options())


def _state_summary(config) -> dict:
    report = diagnostics(config)
    split = bogomolny_split(config, report)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        entries, total = vortex_census(config)
    return {
        "degree": degree(config.connection),
        "epsilon": config.epsilon,
        "energy": energy(config).to_dict(),
        "bogomolny": split.to_dict(),
        "bound": report.to_dict(),
        "sup_abs_u": float(np.max(np.abs(config.u))),
        "census": {"total_winding": total, "faces": [list(e) for e in entries]},
    }


def _minimize_block(result: MinimizeResult) -> dict:
    return {
        "converged": result.converged,
        "message": result.message,
        "iterations": result.iterations,
        "grad_norm": result.grad_norm,
        "initial_energy": result.energy_history[0],
        "final_energy": result.energy,
        "max_gauge_fix_shift": max((abs(s) for s in result.gauge_fix_shifts), default=0.0),
    }


def _input_state(args, cfg: ExperimentConfig):
    """Configuration from --snapshot / --from-fields, else a fresh minimization.

    The returned experiment config describes the state actually analysed.
    """
    if getattr(args, "from_fields", None):
        snap = load_fields(args.from_fields)
        source = {"source": "fields", "path": args.from_fields, "provenance": snap.provenance}
        return snap.config, source, None, cfg.with_state(snap.config)
    if args.snapshot:
        snap = load_snapshot(args.snapshot)
        source = {"source": "snapshot", "path": args.snapshot, "provenance": snap.provenance}
        return snap.config, source, None, cfg.with_state(snap.config)
    result = _minimize(cfg)
    return result.config, {"source": "minimize", "minimize": _minimize_block(result)}, result, cfg


def _emit_report(report: dict, cfg: ExperimentConfig) -> None:
    from .io import dumps

    if cfg.output.out:
        write_json(cfg.output.out, report)
    else:
        sys.stdout.write(dumps(report))


# --------------------------------------------------------------------------
# subcommands


def cmd_mesh_info(args, cfg):
    mesh = cfg.build_mesh()
    return dict(_header("mesh-info", cfg), mesh=mesh.summary())


def cmd_minimize(args, cfg):
    result = _minimize(cfg)
    report = dict(_header("minimize", cfg), minimize=_minimize_block(result), state=_state_summary(result.config))
    prov = provenance("minimize", cfg.seed, converged=result.converged, iterations=result.iterations, grad_norm=result.grad_norm)
    snap = cfg.output.snapshot
    if snap is None and cfg.output.out:
        snap = str(Path(cfg.output.out).with_suffix(".snapshot.json"))
    if snap:
        save_snapshot(result.config, snap, prov)
        report["snapshot"] = snap
    if cfg.output.fields_dir:
        dump_fields(result.config, cfg.output.fields_dir, prov)
    if not result.converged:
        raise NumericalFailure(f"minimizer did not converge: {result.message}", report)
    return report


def cmd_spectrum(args, cfg):
    config, source, _, cfg = _input_state(args, cfg)
    sp = cfg.spectrum
    spectrum = smallest_hessian_eigs(config, k=sp.k, tol=sp.tolerance, stability_tol=sp.stability_tolerance)
    report = dict(_header("spectrum", cfg), input=source, spectrum=spectrum.to_dict())
    if cfg.output.fields_dir:
        write_table(
            Path(cfg.output.fields_dir) / "eigenvalues.csv",
            ["index", "eigenvalue", "residual"],
            [[i, v, r] for i, (v, r) in enumerate(zip(spectrum.eigenvalues, spectrum.residuals))],
        )
    if not spectrum.converged:
        raise NumericalFailure("eigensolver residuals above tolerance", report)
    return report


def cmd_kuwabara(args, cfg):
    from .bundle import background_connection

    mesh = cfg.build_mesh()
    spectrum = magnetic_laplacian_eigs(background_connection(mesh, cfg.degree), k=cfg.spectrum.k)
    lam = spectrum.eigenvalues[0]
    expected = 2.0 * math.pi * abs(cfg.degree) / mesh.total_area
    report = dict(
        _header("kuwabara", cfg),
        mesh=mesh.summary(),
        lambda1=lam,
        expected=expected,
        relative_error=abs(lam - expected) / expected if expected > 0 else abs(lam),
        spectrum=spectrum.to_dict(),
    )
    if cfg.output.fields_dir:
        write_table(
            Path(cfg.output.fields_dir) / "laplacian_eigenvalues.csv",
            ["index", "eigenvalue", "residual"],
            [[i, v, r] for i, (v, r) in enumerate(zip(spectrum.eigenvalues, spectrum.residuals))],
        )
    return report


def cmd_zero_section(args, cfg):
    mesh = cfg.build_mesh()
    sp = cfg.spectrum
    verdict = zero_section_report(mesh, cfg.degree, cfg.epsilon, k=sp.k, stability_tol=sp.stability_tolerance)
    threshold = mesh.total_area / (4.0 * math.pi * cfg.epsilon**2)
    return dict(
        _header("zero-section", cfg),
        bradlow_ratio=abs(cfg.degree) / threshold,
        predicted_lambda1=2.0 * (2.0 * math.pi * abs(cfg.degree) / mesh.total_area) - 1.0 / cfg.epsilon**2,
        verdict=verdict.to_dict(),
    )


def cmd_bradlow_scan(args, cfg):
    epsilons = parse_epsilons(args.epsilons)
    mesh = cfg.build_mesh()
    flux_sq = (2.0 * math.pi * cfg.degree) ** 2 / mesh.total_area
    rows, table = [], []
    failed = []
    for eps in epsilons:
        start = random_configuration(mesh, cfg.degree, eps, cfg.seed)
        result = minimize(start, cfg.solve_options())
        split = bogomolny_split(result.config)
        normal = eps**2 * flux_sq + mesh.total_area / (4.0 * eps**2)
        sup_u = float(np.max(np.abs(result.config.u)))
        rows.append(
            {
                "epsilon": eps,
                "sup_abs_u": sup_u,
                "energy": result.energy,
                "defect_plus": split.defect_plus,
                "defect_minus": split.defect_minus,
                "normal_energy": normal,
                "above_threshold": 4.0 * math.pi * abs(cfg.degree) > mesh.total_area / eps**2,
                "converged": result.converged,
                "iterations": result.iterations,
            }
        )
        table.append([eps, sup_u, result.energy, split.defect_plus, normal])
        if not result.converged:
            failed.append(eps)
        logger.info("bradlow-scan eps=%.4g sup|u|=%.3e E=%.8g", eps, sup_u, result.energy)
    threshold = math.sqrt(mesh.total_area / (4.0 * math.pi * abs(cfg.degree))) if cfg.degree else math.inf
    report = dict(_header("bradlow-scan", cfg), epsilons=epsilons, critical_epsilon=threshold, rows=rows)
    if cfg.output.fields_dir:
        write_table(
            Path(cfg.output.fields_dir) / "bradlow.csv",
            ["epsilon", "sup_abs_u", "energy", "defect_plus", "normal_energy"],
            table,
        )
    if failed:
        raise NumericalFailure(f"minimizer did not converge for epsilon in {failed}", report)
    return report


def cmd_diagnose(args, cfg):
    config, source, _, cfg = _input_state(args, cfg)
    report = dict(
        _header("diagnose", cfg),
        input=source,
        state=_state_summary(config),
        identity_residuals=identity_residuals(config),
    )
    if cfg.output.fields_dir:
        dump_fields(config, cfg.output.fields_dir, source)
    return report


def cmd_verdict(args, cfg):
    config, source, result, cfg = _input_state(args, cfg)
    if result is None:
        prov = source.get("provenance", {})
        converged = bool(prov.get("converged", False))
        result = MinimizeResult(
            config=config,
            iterations=int(prov.get("iterations", 0)),
            energy_history=[energy(config).total],
            grad_norm=float(prov.get("grad_norm", math.nan)),
            converged=converged,
            message="loaded",
        )
    if not result.converged:
        raise NumericalFailure("verdict needs a converged minimizer")
    sp = cfg.spectrum
    tols = VerdictTolerances(stability=sp.stability_tolerance, vortex=sp.vortex_tolerance, k=sp.k)
    verdict = theorem_verdict(result, tols)
    report = dict(_header("verdict", cfg), input=source, verdict=verdict.to_dict())
    if not verdict.theorem_consistent:
        logger.error("theorem_consistent is false: stable state fails the vortex equations")
    return report


COMMANDS = {
    "mesh-info": cmd_mesh_info,
    "minimize": cmd_minimize,
    "spectrum": cmd_spectrum,
    "kuwabara": cmd_kuwabara,
    "zero-section": cmd_zero_section,
    "bradlow-scan": cmd_bradlow_scan,
    "diagnose": cmd_diagnose,
    "verdict": cmd_verdict,
}


def _fail(kind: str, message: str, code: int, extra: dict | None = None) -> int:
    payload = {"error": kind, "message": message, "exit_code": code}
    if extra:
        payload.update(extra)
    sys.stderr.write(json.dumps(payload) + "\n")
    return code


def _thread_limit():
    value = os.environ.get("VORTEXLAB_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError([{"field": "VORTEXLAB_THREADS", "message": f"not an integer: {value!r}"}]) from None
    if n < 1:
        raise ConfigError([{"field": "VORTEXLAB_THREADS", "message": "must be >= 1"}])
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    limiter = None
    try:
        limiter = _thread_limit()
        cfg = resolve_config(args)
        report = COMMANDS[args.command](args, cfg)
        _emit_report(report, cfg)
        return 0
    except ConfigError as exc:
        return _fail("validation", str(exc), 1, {"fields": exc.fields})
    except (SnapshotError, OSError) as exc:
        return _fail("input", str(exc), 1)
    except NumericalFailure as exc:
        if exc.report is not None:
            exc.report["failure"] = str(exc)
            _emit_report(exc.report, cfg)
        return _fail("numerical", str(exc), 2)
    except (PoissonSolveError, CorruptedConnectionError, ArpackError, ArpackNoConvergence,
            np.linalg.LinAlgError, RuntimeError, FloatingPointError) as exc:
        return _fail("numerical", f"{type(exc).__name__}: {exc}", 2)
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
