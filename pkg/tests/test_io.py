import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vortexlab.bundle import apply_gauge
from vortexlab.energy import diagnostics, energy
from vortexlab.io import (
    ConfigError,
    ExperimentConfig,
    SnapshotChecksumError,
    SnapshotTruncatedError,
    SnapshotVersionError,
    dump_fields,
    dumps,
    load_fields,
    load_snapshot,
    parse_config,
    provenance,
    read_columns,
    save_snapshot,
    snapshot_document,
    write_table,
)
from vortexlab.mesh import build_sphere_mesh, build_torus_mesh

from conftest import random_config


# --------------------------------------------------------------------------
# configuration


def test_minimal_torus_defaults():
    cfg = parse_config('{"geometry": {"torus": {}}}')
    assert cfg.geometry.kind == "torus"
    assert (cfg.geometry.torus.nx, cfg.geometry.torus.ny) == (64, 64)
    assert cfg.geometry.torus.lx == pytest.approx(2 * np.pi)
    assert (cfg.degree, cfg.epsilon, cfg.seed) == (1, 0.5, 0)
    assert cfg.solve.grad_tolerance == 1e-8 and cfg.solve.restart_period == 50
    assert cfg.solve.shrink == 0.5 and cfg.solve.sufficient_decrease == 1e-4
    assert cfg.spectrum.k == 4 and cfg.spectrum.stability_tolerance == 1e-6
    opts = cfg.solve_options()
    assert opts.grad_tolerance == 1e-8 and opts.max_iterations is None


def test_sphere_config_builds_mesh():
    cfg = parse_config('{"geometry": {"sphere": {"subdivisions": 1}}, "degree": -2}')
    mesh = cfg.build_mesh()
    assert mesh.topology == "sphere" and mesh.n_vertices == 42
    assert cfg.resolved()["geometry"] == {"sphere": {"subdivisions": 1, "radius": 1.0}}


def test_negative_epsilon_names_field():
    with pytest.raises(ConfigError) as info:
        parse_config('{"geometry": {"torus": {}}, "epsilon": -1}')
    assert [f["field"] for f in info.value.fields] == ["epsilon"]
    assert "epsilon" in str(info.value)


def test_every_violation_listed():
    doc = {"geometry": {"torus": {"nx": 1}}, "epsilon": 0, "solve": {"shrink": 2}}
    with pytest.raises(ConfigError) as info:
        parse_config(json.dumps(doc))
    fields = {f["field"] for f in info.value.fields}
    assert fields == {"geometry.torus.nx", "epsilon", "solve.shrink"}


def test_both_geometries_ambiguous():
    with pytest.raises(ConfigError, match="ambiguous"):
        parse_config('{"geometry": {"torus": {}, "sphere": {}}}')


def test_missing_geometry():
    with pytest.raises(ConfigError):
        parse_config('{"geometry": {}}')
    with pytest.raises(ConfigError):
        parse_config("{}")


@pytest.mark.parametrize(
    "doc",
    [
        {"geometry": {"torus": {}}, "epsilonn": 0.5},
        {"geometry": {"torus": {"nz": 3}}},
        {"geometry": {"torus": {}}, "solve": {"tolerance": 1}},
    ],
)
def test_unknown_keys_rejected(doc):
    with pytest.raises(ConfigError, match="Extra inputs"):
        parse_config(json.dumps(doc))


@pytest.mark.parametrize("text", ["{not json", "[1, 2]"])
def test_malformed_document(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_with_state_tracks_configuration(torus6x5):
    cfg = parse_config('{"geometry": {"sphere": {}}, "seed": 9}')
    c = random_config(torus6x5, -1, 0.7, 0)
    again = cfg.with_state(c)
    assert again.geometry.kind == "torus" and again.geometry.torus.nx == 6
    assert (again.degree, again.epsilon, again.seed) == (-1, 0.7, 9)


def test_resolved_config_revalidates():
    cfg = parse_config('{"geometry": {"torus": {"nx": 8}}, "epsilon": 0.3}')
    assert ExperimentConfig.model_validate(cfg.resolved()) == cfg


# --------------------------------------------------------------------------
# exact JSON


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_round_trip(x):
    for fixed in (False, True):
        assert json.loads(dumps(x, fixed)) == x
        assert np.float64(json.loads(dumps([x], fixed))[0]).tobytes() == np.float64(x).tobytes()


def test_dumps_rejects_nonfinite():
    with pytest.raises(ValueError):
        dumps(float("nan"))


def test_dumps_integral_floats_stay_floats():
    assert json.loads(dumps({"a": 2.0, "b": 2})) == {"a": 2.0, "b": 2}
    assert isinstance(json.loads(dumps(np.float64(3.0))), float)


# --------------------------------------------------------------------------
# snapshots


@pytest.mark.parametrize("mesh", [build_torus_mesh(6, 5, 2.0, 1.5), build_sphere_mesh(1, 2.0)])
def test_snapshot_byte_identical(tmp_path, mesh):
    c = random_config(mesh, 2, 0.6, 4)
    first, second = tmp_path / "a.json", tmp_path / "b.json"
    save_snapshot(c, first, provenance("test", 4))
    snap = load_snapshot(first)
    save_snapshot(snap.config, second, snap.provenance)
    assert first.read_bytes() == second.read_bytes()
    assert np.array_equal(snap.config.u, c.u) and np.array_equal(snap.config.A, c.A)
    assert snap.config.epsilon == c.epsilon and snap.config.degree == c.degree


def test_snapshot_energy_zero_ulps(tmp_path, torus8):
    c = apply_gauge(random_config(torus8, 1, 0.5, 1), np.linspace(0, 3, torus8.n_vertices))
    save_snapshot(c, tmp_path / "s.json")
    loaded = load_snapshot(tmp_path / "s.json").config
    assert energy(loaded).total == energy(c).total


def test_snapshot_provenance(tmp_path, torus8):
    save_snapshot(random_config(torus8, 1, 0.5, 1), tmp_path / "s.json", provenance("minimize", 1, iterations=3))
    prov = load_snapshot(tmp_path / "s.json").provenance
    assert prov["command"] == "minimize" and prov["seed"] == 1 and prov["iterations"] == 3
    assert "timestamp" in prov


def _write_doc(path, doc):
    path.write_text(dumps(doc, fixed=True))


def test_snapshot_checksum_mismatch(tmp_path, torus8):
    doc = snapshot_document(random_config(torus8, 1, 0.5, 0))
    doc["checksum"] = "0" * len(doc["checksum"])
    _write_doc(tmp_path / "s.json", doc)
    with pytest.raises(SnapshotChecksumError):
        load_snapshot(tmp_path / "s.json")


def test_snapshot_checksum_detects_geometry_edit(tmp_path, torus8):
    doc = snapshot_document(random_config(torus8, 1, 0.5, 0))
    doc["mesh"]["params"]["lx"] = 1.0
    _write_doc(tmp_path / "s.json", doc)
    with pytest.raises(SnapshotChecksumError):
        load_snapshot(tmp_path / "s.json")


def test_snapshot_version_mismatch(tmp_path, torus8):
    doc = snapshot_document(random_config(torus8, 1, 0.5, 0))
    doc["format_version"] = 99
    _write_doc(tmp_path / "s.json", doc)
    with pytest.raises(SnapshotVersionError):
        load_snapshot(tmp_path / "s.json")


def test_snapshot_truncated_text(tmp_path, torus8):
    save_snapshot(random_config(torus8, 1, 0.5, 0), tmp_path / "s.json")
    text = (tmp_path / "s.json").read_text()
    (tmp_path / "t.json").write_text(text[: len(text) // 2])
    with pytest.raises(SnapshotTruncatedError):
        load_snapshot(tmp_path / "t.json")


def test_snapshot_short_arrays(tmp_path, torus8):
    doc = snapshot_document(random_config(torus8, 1, 0.5, 0))
    doc["A"] = doc["A"][:-1]
    _write_doc(tmp_path / "s.json", doc)
    with pytest.raises(SnapshotTruncatedError):
        load_snapshot(tmp_path / "s.json")


def test_snapshot_missing_key(tmp_path, torus8):
    doc = snapshot_document(random_config(torus8, 1, 0.5, 0))
    del doc["u"]
    _write_doc(tmp_path / "s.json", doc)
    with pytest.raises(SnapshotTruncatedError):
        load_snapshot(tmp_path / "s.json")


def test_snapshot_errors_are_distinct():
    assert len({SnapshotChecksumError, SnapshotVersionError, SnapshotTruncatedError}) == 3
    assert not issubclass(SnapshotChecksumError, SnapshotVersionError)
    assert not issubclass(SnapshotTruncatedError, SnapshotChecksumError)


# --------------------------------------------------------------------------
# field dumps


@pytest.mark.parametrize("mesh", [build_torus_mesh(8, 8, 2 * np.pi, 2 * np.pi), build_sphere_mesh(2)])
def test_field_dump_reloads(tmp_path, mesh):
    c = random_config(mesh, 1, 0.5, 3)
    paths = dump_fields(c, tmp_path / "fields")
    assert [p.name for p in paths] == ["vertices.csv", "edges.csv", "faces.csv", "fields.json"]
    again = load_fields(tmp_path / "fields").config
    assert np.array_equal(again.u, c.u) and np.array_equal(again.A, c.A)
    assert energy(again).total == pytest.approx(energy(c).total, rel=1e-12)
    faces = read_columns(tmp_path / "fields" / "faces.csv")
    assert faces.shape == (mesh.n_faces, 8)


def test_field_dump_columns(tmp_path, torus8):
    c = random_config(torus8, 1, 0.5, 3)
    dump_fields(c, tmp_path)
    header = (tmp_path / "faces.csv").read_text().splitlines()[0]
    assert header == "# id x y z F f f_minus_h winding"
    faces = read_columns(tmp_path / "faces.csv")
    report = diagnostics(c)
    np.testing.assert_allclose(faces[:, 5], report.f, rtol=0, atol=1e-15)
    h_face = torus8.face_average(report.h)
    np.testing.assert_allclose(faces[:, 6], report.f - h_face, rtol=0, atol=1e-14)
    np.testing.assert_array_equal(faces[:, 0], np.arange(torus8.n_faces))
    vert = read_columns(tmp_path / "vertices.csv")
    np.testing.assert_array_equal(vert[:, 6], np.abs(c.u))
    assert faces[:, 7].sum() == 1


def test_write_table(tmp_path):
    write_table(tmp_path / "t.csv", ["eps", "sup_u"], [[0.5, 1.0 / 3], [1, 2.0]])
    data = read_columns(tmp_path / "t.csv")
    assert data[0, 1] == 1.0 / 3 and data.shape == (2, 2)
