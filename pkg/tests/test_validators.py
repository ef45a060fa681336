"""
Unit tests for file schemas, settings and structured logging.
Tests schema rejection messages, environment overrides and the JSON log line format.
"""

import json
import logging

import pytest

from src.logger import StructuredLogger
from src.settings import OracleBudget, SolverOptions, VerificationTolerances
from src.validators import validate_polynomial, validate_scene, validate_shape


def _polynomial(dim=2):
    return {"dim": dim, "terms": [{"exp": [2, 0], "coef": 1.0}, {"exp": [0, 0], "coef": -1.0}]}


def test_polynomial_schema():
    """Test accepted terms and rejected exponents, lengths and coefficients."""
    assert len(validate_polynomial(_polynomial()).terms) == 2
    with pytest.raises(ValueError, match="Invalid polynomial schema"):
        validate_polynomial({"dim": 2, "terms": [{"exp": [-1, 0], "coef": 1.0}]})
    with pytest.raises(ValueError):
        validate_polynomial({"dim": 2, "terms": [{"exp": [1], "coef": 1.0}]})
    with pytest.raises(ValueError):
        validate_polynomial({"dim": 2, "terms": [{"exp": [1, 0], "coef": float("inf")}]})


def test_scene_schema():
    """Test a minimal scene and rejected transforms and ground-truth tags."""
    transform = {"linear": [[1.0, 0.0], [0.0, 1.0]], "offset": [0.0, 0.0], "rigid": True}
    scene = {
        "dim": 2,
        "container": {"c": _polynomial()},
        "objects": [{"label": "a", "p": _polynomial(), "transform": transform}],
        "degree": 4,
    }
    assert validate_scene(scene).gamma_cap == 1.0
    with pytest.raises(ValueError):
        validate_scene({**scene, "ground_truth": "maybe"})
    bad = {**transform, "linear": [[1.0, 0.0]]}
    with pytest.raises(ValueError):
        validate_scene({**scene, "objects": [{"label": "a", "p": _polynomial(), "transform": bad}]})


def test_shape_schema():
    """Test that a shape needs a positive radius and known prior kinds."""
    assert validate_shape({**_polynomial(), "radius": 1.5}).config is None
    with pytest.raises(ValueError):
        validate_shape({**_polynomial(), "radius": 0.0})
    config = {
        "degree": 4,
        "box": {"lower": [-1.0, -1.0], "upper": [1.0, 1.0]},
        "radius": 1.5,
        "margin": 1e-4,
        "domain_radius": 1.0,
        "priors": [{"kind": "round"}],
    }
    with pytest.raises(ValueError):
        validate_shape({**_polynomial(), "radius": 1.5, "config": config})


def test_settings_from_env(monkeypatch):
    """Test environment overrides and their defaults."""
    monkeypatch.setenv("SUBLEVELPACK_MAX_ITERS", "50")
    monkeypatch.setenv("SUBLEVELPACK_SOLVER_BACKEND", "CVXPY")
    monkeypatch.setenv("SUBLEVELPACK_TOL_RES", "1e-5")
    monkeypatch.setenv("SUBLEVELPACK_ORACLE_GRID", "80")
    options = SolverOptions.from_env()
    assert options.max_iters == 50
    assert options.backend == "cvxpy"
    assert VerificationTolerances.from_env().tol_res == pytest.approx(1e-5)
    budget = OracleBudget.from_env()
    assert budget.resolution_for(3) == 80
    assert OracleBudget().resolution_for(2) == 200
    assert OracleBudget().resolution_for(3) == 40


def test_settings_validation():
    """Test rejected backends and non-positive limits."""
    with pytest.raises(ValueError):
        SolverOptions(backend="mosek")
    with pytest.raises(ValueError):
        SolverOptions(max_iters=0)


def test_structured_log_line(capsys):
    """Test one JSON object per event on standard error."""
    log = StructuredLogger("sublevelpack.test")
    log.logger.setLevel(logging.DEBUG)
    log.log_certificate("containment:0", 0.5, True, "optimal")
    line = capsys.readouterr().err.strip().splitlines()[-1]
    entry = json.loads(line)
    assert entry["event_type"] == "certificate"
    assert entry["constraint"] == "containment:0"
    assert entry["verified"] is True
