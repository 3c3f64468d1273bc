"""Experiment configuration, snapshots and field dumps.

Snapshots and reports are JSON whose floats re-read bit-identically:
snapshots use 17 significant digits, reports the shortest round-trip form.
Complex sections are stored
as interleaved ``[re0, im0, re1, im1, ...]``. Field dumps are
whitespace-separated columns with a ``#`` header, which gnuplot reads as is.
"""

from __future__ import annotations

import datetime as _dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .bundle import Configuration, Section, background_connection, curvature
from .mesh import Mesh, build_sphere_mesh, build_torus_mesh, mesh_from_descriptor

FORMAT_VERSION = 1
TWO_PI = 2.0 * math.pi


# --------------------------------------------------------------------------
# configuration schema


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class TorusGeometry(_Strict):
    nx: int = Field(64, ge=2, le=4096)
    ny: int = Field(64, ge=2, le=4096)
    lx: float = Field(TWO_PI, gt=0, allow_inf_nan=False)
    ly: float = Field(TWO_PI, gt=0, allow_inf_nan=False)


class SphereGeometry(_Strict):
    subdivisions: int = Field(4, ge=0, le=7)
    radius: float = Field(1.0, gt=0, allow_inf_nan=False)


class GeometryBlock(_Strict):
    torus: TorusGeometry | None = None
    sphere: SphereGeometry | None = None

    @model_validator(mode="after")
    def _exactly_one(self):
        if self.torus is not None and self.sphere is not None:
            raise ValueError("ambiguous geometry: give either 'torus' or 'sphere', not both")
        if self.torus is None and self.sphere is None:
            raise ValueError("geometry needs a 'torus' or a 'sphere' block")
        return self

    @property
    def kind(self) -> str:
        return "torus" if self.torus is not None else "sphere"


class SolveBlock(_Strict):
    max_iterations: int | None = Field(None, ge=1)
    grad_tolerance: float = Field(1e-8, gt=0, allow_inf_nan=False)
    shrink: float = Field(0.5, gt=0, lt=1)
    sufficient_decrease: float = Field(1e-4, gt=0, le=0.5)
    restart_period: int = Field(50, ge=1)
    hard_restart: bool = False


class SpectrumBlock(_Strict):
    k: int = Field(4, ge=1, le=64)
    tolerance: float = Field(1e-8, gt=0, allow_inf_nan=False)
    stability_tolerance: float = Field(1e-6, ge=0, allow_inf_nan=False)
    vortex_tolerance: float = Field(0.02, gt=0, allow_inf_nan=False)


class OutputBlock(_Strict):
    out: str | None = None
    fields_dir: str | None = None
    log: str | None = None
    snapshot: str | None = None


class ExperimentConfig(_Strict):
    geometry: GeometryBlock
    degree: int = Field(1, ge=-64, le=64)
    epsilon: float = Field(0.5, gt=0, allow_inf_nan=False)
    seed: int = Field(0, ge=0)
    solve: SolveBlock = Field(default_factory=SolveBlock)
    spectrum: SpectrumBlock = Field(default_factory=SpectrumBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)

    def build_mesh(self) -> Mesh:
        g = self.geometry
        if g.torus is not None:
            return build_torus_mesh(g.torus.nx, g.torus.ny, g.torus.lx, g.torus.ly)
        return build_sphere_mesh(g.sphere.subdivisions, g.sphere.radius)

    def solve_options(self):
        from .solver import SolveOptions

        return SolveOptions(seed=self.seed, log_path=self.output.log, **self.solve.model_dump())

    def resolved(self) -> dict:
        out = self.model_dump(mode="json")
        out["geometry"] = {k: v for k, v in out["geometry"].items() if v is not None}
        return out

    def with_state(self, config: Configuration) -> "ExperimentConfig":
        """Copy whose geometry, degree and epsilon describe ``config``."""
        mesh = config.mesh
        geometry = {mesh.topology: dict(mesh.params)}
        doc = self.model_dump()
        doc.update(geometry=geometry, degree=int(config.degree), epsilon=float(config.epsilon))
        return ExperimentConfig.model_validate(doc)


class ConfigError(ValueError):
    """Invalid experiment configuration; ``fields`` lists every violation."""

    def __init__(self, fields: list[dict]):
        self.fields = fields
        lines = [f"{item['field']}: {item['message']}" for item in fields]
        super().__init__("invalid configuration: " + "; ".join(lines))


def _errors(exc: ValidationError) -> list[dict]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        out.append({"field": loc, "message": err["msg"]})
    return out


def validate_config(document: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as exc:
        raise ConfigError(_errors(exc)) from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a JSON experiment document."""
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([{"field": "<document>", "message": f"malformed JSON: {exc}"}]) from None
    if not isinstance(document, dict):
        raise ConfigError([{"field": "<document>", "message": "top level must be an object"}])
    return validate_config(document)


# --------------------------------------------------------------------------
# exact JSON emission


def _emit(obj: Any, fmt) -> str:
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(bool(obj) if obj is not None else None)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"non-finite float {x!r} cannot be serialized")
        text = fmt(x)
        return text if any(c in text for c in ".e") else text + ".0"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_emit(v, fmt)}" for k, v in obj.items()) + "}"
    if isinstance(obj, np.ndarray):
        return _emit(obj.tolist(), fmt)
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_emit(v, fmt) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _fixed17(x: float) -> str:
    return format(x, ".17g")


def dumps(obj: Any, fixed: bool = False) -> str:
    """JSON text whose floats re-read bit-identically.

    ``fixed`` writes every float with 17 significant digits (snapshots);
    otherwise the shortest round-trip form is used (reports).
    """
    return _emit(obj, _fixed17 if fixed else repr) + "\n"


def write_json(path: str | Path, obj: Any, fixed: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj, fixed))


# --------------------------------------------------------------------------
# snapshots


class SnapshotError(ValueError):
    pass


class SnapshotChecksumError(SnapshotError):
    pass


class SnapshotVersionError(SnapshotError):
    pass


class SnapshotTruncatedError(SnapshotError):
    pass


@dataclass
class Snapshot:
    config: Configuration
    provenance: dict = field(default_factory=dict)


def mesh_descriptor(mesh: Mesh) -> dict:
    return {"topology": mesh.topology, "params": dict(mesh.params)}


def provenance(command: str, seed: int | None, **extra) -> dict:
    stamp = _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()
    return {"command": command, "seed": seed, "timestamp": stamp, **extra}


def snapshot_document(config: Configuration, prov: dict | None = None) -> dict:
    mesh = config.mesh
    u = np.empty(2 * mesh.n_vertices)
    u[0::2] = config.u.real
    u[1::2] = config.u.imag
    return {
        "format_version": FORMAT_VERSION,
        "mesh": mesh_descriptor(mesh),
        "checksum": mesh.checksum(),
        "degree": int(config.degree),
        "epsilon": float(config.epsilon),
        "A": config.A,
        "u": u,
        "provenance": prov if prov is not None else provenance("save_snapshot", None),
    }


def save_snapshot(config: Configuration, path: str | Path, prov: dict | None = None) -> None:
    """Write ``config``; pass a loaded snapshot's provenance to reproduce its bytes."""
    write_json(path, snapshot_document(config, prov), fixed=True)


def snapshot_from_document(doc: dict) -> Snapshot:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise SnapshotVersionError(f"snapshot format_version {version!r}, expected {FORMAT_VERSION}")
    required = ("mesh", "checksum", "degree", "epsilon", "A", "u")
    missing = [key for key in required if key not in doc]
    if missing:
        raise SnapshotTruncatedError(f"snapshot lacks {', '.join(missing)}")
    mesh = mesh_from_descriptor(doc["mesh"])
    if mesh.checksum() != doc["checksum"]:
        raise SnapshotChecksumError(
            f"mesh checksum {mesh.checksum()} does not match stored {doc['checksum']}"
        )
    A = np.asarray(doc["A"], dtype=float)
    u_flat = np.asarray(doc["u"], dtype=float)
    if A.shape != (mesh.n_edges,) or u_flat.shape != (2 * mesh.n_vertices,):
        raise SnapshotTruncatedError(
            f"array sizes A={A.size}, u={u_flat.size // 2} do not match mesh "
            f"({mesh.n_edges} edges, {mesh.n_vertices} vertices)"
        )
    conn = background_connection(mesh, int(doc["degree"])).with_fluctuation(A)
    u = u_flat[0::2] + 1j * u_flat[1::2]
    config = Configuration(Section(mesh, u), conn, float(doc["epsilon"]))
    return Snapshot(config, doc.get("provenance", {}))


def load_snapshot(path: str | Path) -> Snapshot:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SnapshotTruncatedError(f"{path}: unreadable snapshot ({exc})") from None
    if not isinstance(doc, dict):
        raise SnapshotTruncatedError(f"{path}: snapshot is not an object")
    return snapshot_from_document(doc)


# --------------------------------------------------------------------------
# field dumps


def _write_columns(path: Path, header: list[str], columns: list[np.ndarray], ints: int) -> None:
    rows = np.column_stack(columns)
    with path.open("w") as fh:
        fh.write("# " + " ".join(header) + "\n")
        for row in rows:
            head = [str(int(v)) for v in row[:ints]]
            tail = [format(float(v), ".17g") for v in row[ints:]]
            fh.write(" ".join(head + tail) + "\n")


def dump_fields(config: Configuration, directory: str | Path, prov: dict | None = None) -> list[Path]:
    """Vertex, edge and face tables plus a manifest; enough to rebuild ``config``."""
    from .energy import diagnostics, vortex_census

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mesh = config.mesh
    report = diagnostics(config)
    u = config.u
    P = mesh.positions
    if P.shape[1] == 2:
        P = np.column_stack([P, np.zeros(len(P))])

    vertices = directory / "vertices.csv"
    _write_columns(
        vertices,
        ["id", "x", "y", "z", "re_u", "im_u", "abs_u", "h"],
        [np.arange(mesh.n_vertices), P, u.real, u.imag, np.abs(u), 0.5 * (1.0 - np.abs(u) ** 2) / config.epsilon**2],
        ints=1,
    )
    edges = directory / "edges.csv"
    mid = 0.5 * (P[mesh.edges[:, 0]] + P[mesh.edges[:, 1]])
    _write_columns(
        edges,
        ["id", "tail", "head", "x", "y", "z", "A"],
        [np.arange(mesh.n_edges), mesh.edges, mid, config.A],
        ints=3,
    )
    entries, _ = vortex_census(config)
    winding = np.zeros(mesh.n_faces)
    for f, w in entries:
        winding[f] = w
    centroid = P[mesh.faces].mean(axis=1)
    faces = directory / "faces.csv"
    _write_columns(
        faces,
        ["id", "x", "y", "z", "F", "f", "f_minus_h", "winding"],
        [np.arange(mesh.n_faces), centroid, curvature(config.connection), report.f, report.phi, winding],
        ints=1,
    )
    manifest = directory / "fields.json"
    write_json(
        manifest,
        {
            "format_version": FORMAT_VERSION,
            "mesh": mesh_descriptor(mesh),
            "checksum": mesh.checksum(),
            "degree": int(config.degree),
            "epsilon": float(config.epsilon),
            "provenance": prov or {},
        },
        fixed=True,
    )
    return [vertices, edges, faces, manifest]


def read_columns(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, comments="#", ndmin=2)


def load_fields(directory: str | Path) -> Snapshot:
    """Rebuild a configuration from a ``dump_fields`` directory."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "fields.json").read_text())
    except json.JSONDecodeError as exc:
        raise SnapshotTruncatedError(f"{directory}: unreadable manifest ({exc})") from None
    vert = read_columns(directory / "vertices.csv")
    edge = read_columns(directory / "edges.csv")
    u = np.empty(2 * len(vert))
    u[0::2] = vert[:, 4]
    u[1::2] = vert[:, 5]
    doc = dict(manifest, A=edge[:, 6], u=u)
    return snapshot_from_document(doc)


def write_table(path: str | Path, header: list[str], rows: list[list[float]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write("# " + " ".join(header) + "\n")
        for row in rows:
            fh.write(" ".join(str(v) if isinstance(v, (int, np.integer)) else format(float(v), ".17g") for v in row) + "\n")
