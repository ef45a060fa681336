"""
Unit tests for the command-line interface.
Tests exit codes, written reports and run manifests for every subcommand.
"""

import json

import pytest

from src.cli import (
    EXIT_INFEASIBLE,
    EXIT_OK,
    EXIT_REFUTED,
    EXIT_UNDECIDED,
    EXIT_USAGE,
    file_digest,
    main,
    parse_box,
)
from src.fixtures import FixtureSpec, generate
from src.polycore import norm_squared
from src.shapelearn import ShapeModel, save_shape


def _fixture(kind, tmp_path, **kwargs):
    return generate(FixtureSpec(kind=kind, **kwargs), tmp_path / "fixtures")[0]


def _oracle_args(*extra):
    return ["--grid", "120", "--oracle-budget", "2000", *extra]


def test_learn_writes_shape_and_manifest(tmp_path):
    """Test learning a degree-6 shape from the circle cloud."""
    cloud = _fixture("circle_cloud", tmp_path)
    out = tmp_path / "circle.json"
    code = main(["learn", "--input", str(cloud), "--degree", "6", "--box", "-1.1,1.1", "--out", str(out)])
    assert code == EXIT_OK
    shape = json.loads(out.read_text(encoding="utf-8"))
    assert shape["config"]["degree"] == 6
    manifest = json.loads((tmp_path / "circle.json.manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "learn"
    assert manifest["inputs"][str(cloud)] == file_digest(cloud)
    assert manifest["outputs"][str(out)] == file_digest(out)
    assert set(manifest["timings"]) == {"load", "learn"}


def test_learn_missing_input_is_usage_error(tmp_path):
    """Test a nonexistent point cloud file."""
    code = main(["learn", "--input", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "s.json")])
    assert code == EXIT_USAGE


def test_learn_solver_failure_exit_code(tmp_path):
    """Test that a one-iteration budget reports a learning failure."""
    cloud = _fixture("circle_cloud", tmp_path, size=50)
    out = tmp_path / "s.json"
    code = main(["learn", "--input", str(cloud), "--degree", "4", "--box", "-1.1,1.1", "--max-iters", "1", "--out", str(out)])
    assert code == EXIT_INFEASIBLE
    assert not out.exists()


def test_learn_rejects_points_outside_box(tmp_path):
    """Test the default box [-1, 1] against a cloud of radius 1."""
    cloud = tmp_path / "far.csv"
    cloud.write_text("0.0,0.0\n1.5,0.0\n", encoding="utf-8")
    assert main(["learn", "--input", str(cloud), "--out", str(tmp_path / "s.json")]) == EXIT_USAGE


def test_certify_exit_codes(tmp_path):
    """Test certified, refuted and undecided scenes."""
    disks = _fixture("scene_ex4_disks", tmp_path)
    overlapping = _fixture("disks_overlapping", tmp_path)
    corrected = _fixture("scene_ex4_corrected", tmp_path)
    assert main(["certify", "--scene", str(disks), "--jobs", "2", "--out", str(tmp_path / "a.json"), *_oracle_args()]) == EXIT_OK
    assert main(["certify", "--scene", str(overlapping), "--out", str(tmp_path / "b.json"), *_oracle_args()]) == EXIT_REFUTED
    assert main(["certify", "--scene", str(corrected), "--degree", "2", "--out", str(tmp_path / "c.json"), *_oracle_args()]) == EXIT_UNDECIDED
    report = json.loads((tmp_path / "b.json").read_text(encoding="utf-8"))
    assert report["verdict"] == "refuted"
    assert report["counterexamples"][0]["constraint"] == "overlap:0:1"


def test_certify_report_is_deterministic(tmp_path):
    """Test identical report bytes for two runs with the same seed."""
    scene = _fixture("disks_overlapping", tmp_path)
    main(["certify", "--scene", str(scene), "--out", str(tmp_path / "one.json"), *_oracle_args("--seed", "7")])
    main(["certify", "--scene", str(scene), "--out", str(tmp_path / "two.json"), *_oracle_args("--seed", "7")])
    assert (tmp_path / "one.json").read_bytes() == (tmp_path / "two.json").read_bytes()


def test_oracle_check_exit_codes(tmp_path):
    """Test the oracle on disjoint and overlapping disks."""
    disjoint = _fixture("disks_disjoint", tmp_path)
    overlapping = _fixture("disks_overlapping", tmp_path)
    assert main(["oracle-check", "--scene", str(disjoint), "--grid", "120", "--samples", "2000"]) == EXIT_OK
    out = tmp_path / "oracle.json"
    code = main(["oracle-check", "--scene", str(overlapping), "--grid", "120", "--samples", "2000", "--out", str(out)])
    assert code == EXIT_REFUTED
    report = json.loads(out.read_text(encoding="utf-8"))
    assert report["violation"] is True
    witnesses = {entry["id"]: entry["witness"] for entry in report["constraints"]}
    assert witnesses["overlap:0:1"] is not None
    assert witnesses["containment:0"] is None


def test_sample_shape_rows(tmp_path):
    """Test 360 boundary rows of the unit disk."""
    shape = tmp_path / "disk.json"
    save_shape(ShapeModel(norm_squared(2) - 1.0, 1.5), shape)
    out = tmp_path / "boundary.csv"
    assert main(["sample", "--shape", str(shape), "--resolution", "360", "--out", str(out)]) == EXIT_OK
    rows = out.read_text(encoding="utf-8").splitlines()
    assert len(rows) == 360
    x, y = (float(v) for v in rows[0].split(","))
    assert x * x + y * y == pytest.approx(1.0, abs=1e-3)


def test_sample_scene_labels(tmp_path):
    """Test labelled object and container rows for a two-disk scene."""
    scene = _fixture("disks_disjoint", tmp_path)
    out = tmp_path / "scene.csv"
    assert main(["sample", "--scene", str(scene), "--resolution", "90", "--out", str(out)]) == EXIT_OK
    labels = {row.split(",")[0] for row in out.read_text(encoding="utf-8").splitlines()}
    assert "container" in labels
    assert len(labels) == 3


def test_fixtures_generate(tmp_path):
    """Test the fixture subcommand output and manifest."""
    out = tmp_path / "fx"
    assert main(["fixtures", "generate", "--kind", "star_cloud", "--seed", "3", "--size", "40", "--out", str(out)]) == EXIT_OK
    assert len((out / "star_cloud.csv").read_text(encoding="utf-8").splitlines()) == 40
    manifest = json.loads((out / "star_cloud.manifest.json").read_text(encoding="utf-8"))
    assert manifest["seed"] == 3


def test_manifest_digest_tracks_input_bytes(tmp_path):
    """Test that changing one input byte changes the recorded digest."""
    scene = _fixture("disks_disjoint", tmp_path)
    main(["oracle-check", "--scene", str(scene), "--grid", "60", "--samples", "500", "--out", str(tmp_path / "a.json")])
    first = json.loads((tmp_path / "a.json.manifest.json").read_text(encoding="utf-8"))["inputs"][str(scene)]
    scene.write_text(scene.read_text(encoding="utf-8") + " ", encoding="utf-8")
    main(["oracle-check", "--scene", str(scene), "--grid", "60", "--samples", "500", "--out", str(tmp_path / "a.json")])
    second = json.loads((tmp_path / "a.json.manifest.json").read_text(encoding="utf-8"))["inputs"][str(scene)]
    assert first != second


def test_usage_errors():
    """Test missing subcommands, unknown kinds and bad priors."""
    assert main([]) == EXIT_USAGE
    assert main(["fixtures", "generate", "--kind", "teapot", "--out", "x"]) == EXIT_USAGE
    assert main(["learn", "--input", "a.csv", "--out", "b.json", "--backend", "mosek"]) == EXIT_USAGE


def test_parse_box():
    """Test cube and per-axis box spellings."""
    assert parse_box("-1,1", 2).lower == (-1.0, -1.0)
    assert parse_box("0,1,-2,2", 2).upper == (1.0, 2.0)
    with pytest.raises(ValueError):
        parse_box("0,1,2", 2)
