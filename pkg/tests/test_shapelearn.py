"""
Unit tests for shape learning.
Tests point cloud ingestion, normalization, the learning program and its priors, and boundary sampling.
"""

import math

import numpy as np
import pytest

from src.fixtures import circle_cloud, star_cloud, two_cluster_cloud
from src.polycore import (
    AffineTransform,
    Box,
    Polynomial,
    compose_affine,
    evaluate,
    evaluate_many,
    hessian,
    max_abs_coefficient,
    norm_squared,
)
from src.settings import SolverOptions
from src.shapelearn import (
    ConvexPrior,
    LearnConfig,
    LearnConfigError,
    PointCloud,
    PointCloudError,
    ShapeLearningError,
    ShapeModel,
    StarPrior,
    SymmetryPrior,
    bounding_box_area,
    learn_shape,
    load_point_cloud,
    load_shape,
    normalize_cloud,
    parse_prior,
    sample_boundary,
    save_shape,
    sublevel_volume,
)


CIRCLE_BOX = Box.cube(-1.1, 1.1, 2)


@pytest.fixture(scope="module")
def circle_model():
    return learn_shape(circle_cloud(200, seed=0), LearnConfig(degree=6, box=CIRCLE_BOX, radius=1.66))


def test_load_csv(tmp_path):
    """Test a two-point CSV cloud."""
    path = tmp_path / "cloud.csv"
    path.write_text("0.1,0.2\n-0.3,0.4\n", encoding="utf-8")
    cloud = load_point_cloud(path)
    assert cloud.dimension == 2
    assert len(cloud) == 2
    assert cloud.points[1].tolist() == [-0.3, 0.4]


def test_load_xyz(tmp_path):
    """Test whitespace-separated 3D points with a comment line."""
    path = tmp_path / "cloud.xyz"
    path.write_text("# teapot\n0 0 1\n1 0 0\n0.5 0.5 0.5\n", encoding="utf-8")
    cloud = load_point_cloud(path)
    assert cloud.dimension == 3
    assert len(cloud) == 3


def test_load_errors_carry_line_numbers(tmp_path):
    """Test empty files, unparsable tokens and ragged rows."""
    empty = tmp_path / "empty.csv"
    empty.write_text("", encoding="utf-8")
    with pytest.raises(PointCloudError):
        load_point_cloud(empty)
    bad = tmp_path / "bad.csv"
    bad.write_text("0.1,0.2\n0.3,abc\n", encoding="utf-8")
    with pytest.raises(PointCloudError) as info:
        load_point_cloud(bad)
    assert info.value.line == 2
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("0.1,0.2\n0.3\n", encoding="utf-8")
    with pytest.raises(PointCloudError):
        load_point_cloud(ragged)


def test_normalize_two_points():
    """Test points 0 and 10 rescaled into [-1.1, 1.1] with a 5% margin."""
    cloud = PointCloud(np.array([[0.0], [10.0]]))
    normalized, transform = normalize_cloud(cloud, Box.cube(-1.1, 1.1, 1))
    assert normalized.points[:, 0] == pytest.approx([-1.045, 1.045])
    assert transform.forward(normalized.points) == pytest.approx(cloud.points)


def test_normalize_single_point_and_degenerate_axis():
    """Test a single point at the box centre and a flat axis scaled like the widest one."""
    single, _ = normalize_cloud(PointCloud(np.array([[3.0, -2.0]])), Box.cube(-1.0, 1.0, 2))
    assert single.points[0] == pytest.approx([0.0, 0.0])
    flat = PointCloud(np.array([[0.0, 5.0], [2.0, 5.0]]))
    normalized, transform = normalize_cloud(flat, Box.cube(-1.0, 1.0, 2))
    assert normalized.points[:, 1] == pytest.approx([0.0, 0.0])
    assert transform.matrix[1, 1] == pytest.approx(transform.matrix[0, 0])


def test_learn_config_validation():
    """Test odd degree, box outside the ball and the radius defaults."""
    with pytest.raises(LearnConfigError):
        LearnConfig(degree=5, box=CIRCLE_BOX)
    with pytest.raises(LearnConfigError):
        LearnConfig(degree=4, box=CIRCLE_BOX, radius=1.0)
    config = LearnConfig(degree=4, box=CIRCLE_BOX)
    assert config.radius == pytest.approx(1.05 * 1.1 * math.sqrt(2))
    assert config.domain_radius == pytest.approx(1.1)
    assert config.multiplier_degree == 2


def test_parse_prior():
    """Test every prior spelling."""
    assert parse_prior("star", 2) == StarPrior()
    assert parse_prior("convex", 3) == ConvexPrior()
    assert parse_prior("symmetry:neg-identity", 2) == SymmetryPrior(((-1.0, 0.0), (0.0, -1.0)))
    assert parse_prior("symmetry:reflect-2", 2) == SymmetryPrior(((1.0, 0.0), (0.0, -1.0)))
    assert parse_prior("symmetry:0,1;1,0", 2) == SymmetryPrior(((0.0, 1.0), (1.0, 0.0)))
    with pytest.raises(LearnConfigError):
        parse_prior("round", 2)


def test_points_outside_box_are_rejected():
    """Test the strict box containment check."""
    cloud = PointCloud(np.array([[0.0, 0.0], [1.5, 0.0]]))
    with pytest.raises(LearnConfigError):
        learn_shape(cloud, LearnConfig(degree=2, box=CIRCLE_BOX))


def test_learned_circle_contains_every_point(circle_model):
    """Test J(x_i) <= -margin on all 200 training points."""
    cloud = circle_cloud(200, seed=0)
    assert circle_model.certificate.verified
    assert np.max(circle_model.evaluate(cloud.points)) <= -circle_model.config.margin
    assert circle_model.contains(cloud.points).all()


def test_learned_circle_is_bounded_on_ball(circle_model):
    """Test J <= 1 on 10^4 uniform samples of the radius-R ball."""
    rng = np.random.default_rng(1)
    u = rng.standard_normal((10000, 2))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    x = u * (1.66 * np.sqrt(rng.uniform(0, 1, 10000)))[:, None]
    assert np.max(evaluate_many(circle_model.polynomial, x)) <= 1.0 + 1e-6


def test_symmetry_prior_gives_even_polynomial():
    """Test J(-x) - J(x) vanishes coefficient-wise under A = -I."""
    config = LearnConfig(degree=6, box=CIRCLE_BOX, radius=1.66, priors=[parse_prior("symmetry:neg-identity", 2)])
    model = learn_shape(circle_cloud(200, seed=0), config)
    mirrored = compose_affine(model.polynomial, AffineTransform.linear_map(-np.eye(2)))
    assert max_abs_coefficient(mirrored - model.polynomial) <= 1e-9


def test_convex_prior_bridges_clusters():
    """Test that convexity pulls the midpoint of two clusters into the set."""
    cloud = two_cluster_cloud(100, seed=0)
    model = learn_shape(cloud, LearnConfig(degree=4, box=CIRCLE_BOX, priors=[ConvexPrior()]))
    assert evaluate(model.polynomial, [0.0, 0.0]) <= 0.0
    rng = np.random.default_rng(2)
    samples = rng.uniform(CIRCLE_BOX.lower, CIRCLE_BOX.upper, (20000, 2))
    inside = samples[model.evaluate(samples) <= 0.0]
    assert len(inside) > 100
    pairs = rng.integers(0, len(inside), (1000, 2))
    alpha = rng.uniform(0, 1, (1000, 1))
    mid = alpha * inside[pairs[:, 0]] + (1 - alpha) * inside[pairs[:, 1]]
    ends = np.maximum(model.evaluate(inside[pairs[:, 0]]), model.evaluate(inside[pairs[:, 1]]))
    assert np.all(model.evaluate(mid) <= ends + 1e-6)


def test_convex_prior_hessian_is_positive_semidefinite():
    """Test the smallest Hessian eigenvalue of the convex shape at 10^4 points of the box."""
    model = learn_shape(two_cluster_cloud(100, seed=0), LearnConfig(degree=4, box=CIRCLE_BOX, priors=[ConvexPrior()]))
    points = np.random.default_rng(8).uniform(CIRCLE_BOX.lower, CIRCLE_BOX.upper, (10000, 2))
    h = hessian(model.polynomial)
    matrices = np.empty((len(points), 2, 2))
    for i in range(2):
        for k in range(2):
            matrices[:, i, k] = evaluate_many(h[i][k], points)
    assert np.min(np.linalg.eigvalsh(matrices)) >= -1e-7


@pytest.mark.parametrize("degree", [6, 8])
def test_star_prior_is_monotone_along_rays(degree):
    """Test J(lambda x) <= J(x) for 10^4 points of the learned set and lambda in (0, 1]."""
    cloud = star_cloud(200, seed=0)
    model = learn_shape(cloud, LearnConfig(degree=degree, box=CIRCLE_BOX, priors=[StarPrior()]))
    rng = np.random.default_rng(3)
    x = rng.uniform(-1.1, 1.1, (40000, 2))
    x = x[model.evaluate(x) <= 0.0][:10000]
    assert len(x) > 1000
    base = model.evaluate(x)
    for lam in np.linspace(0.1, 1.0, 10):
        assert np.all(model.evaluate(lam * x) <= base + 1e-6)


def test_objective_does_not_decrease_with_degree():
    """Test the optimal mean of J for d = 4, 6 and 8 on the circle cloud."""
    cloud = circle_cloud(100, seed=4)
    objectives = [
        learn_shape(cloud, LearnConfig(degree=d, box=CIRCLE_BOX, radius=1.66)).objective for d in (4, 6, 8)
    ]
    for low, high in zip(objectives, objectives[1:]):
        assert high >= low - 1e-6


def test_higher_degree_shrinks_circle_bounding_box():
    """Test that the d = 8 circle fit has no larger bounding box than the d = 4 fit."""
    cloud = circle_cloud(200, seed=0)
    low = learn_shape(cloud, LearnConfig(degree=4, box=CIRCLE_BOX, radius=1.66))
    high = learn_shape(cloud, LearnConfig(degree=8, box=CIRCLE_BOX, radius=1.66))
    assert bounding_box_area(high, 301) <= bounding_box_area(low, 301)


def test_learned_circle_boundary_is_near_unit_circle(circle_model):
    """Test the Hausdorff distance between the learned boundary and the unit circle."""
    boundary = sample_boundary(circle_model, 360)
    angles = np.linspace(0.0, 2 * math.pi, 360, endpoint=False)
    circle = np.column_stack([np.cos(angles), np.sin(angles)])
    distances = np.linalg.norm(boundary[:, None, :] - circle[None, :, :], axis=2)
    assert max(distances.min(axis=1).max(), distances.min(axis=0).max()) <= 0.1


def test_unverified_solve_raises():
    """Test that a one-iteration solve is reported as a learning failure."""
    with pytest.raises(ShapeLearningError) as info:
        learn_shape(circle_cloud(50, seed=0), LearnConfig(degree=4, box=CIRCLE_BOX), SolverOptions(max_iters=1))
    assert info.value.solver_status in {"iteration_limit", "numerical_trouble"}


def test_shape_save_and_load(tmp_path, circle_model):
    """Test that the saved shape reloads with its polynomial, radius and config."""
    path = tmp_path / "circle.json"
    save_shape(circle_model, path)
    loaded = load_shape(path)
    assert loaded.polynomial == circle_model.polynomial
    assert loaded.radius == circle_model.radius
    assert loaded.config.degree == 6
    assert loaded.certificate.verified


def test_sample_boundary_unit_circle():
    """Test 360 rays on ||x||^2 - 1."""
    model = ShapeModel(norm_squared(2) - 1.0, 1.5)
    points = sample_boundary(model, 360)
    assert points.shape == (360, 2)
    assert np.linalg.norm(points, axis=1) == pytest.approx(np.ones(360), abs=1e-3)


def test_sample_boundary_sphere_grid():
    """Test the 3D marching grid on the unit sphere."""
    points = sample_boundary(ShapeModel(norm_squared(3) - 1.0, 1.2), 20)
    assert len(points) > 0
    assert np.linalg.norm(points, axis=1) == pytest.approx(np.ones(len(points)), abs=1e-6)


def test_sample_boundary_empty_set():
    """Test J = 1 has no boundary."""
    model = ShapeModel(Polynomial.constant(2, 1.0), 1.0)
    assert sample_boundary(model, 90).shape == (0, 2)


def test_learned_boundary_stays_in_domain(circle_model):
    """Test boundary points of the learned circle lie on J = 0 inside the ball."""
    points = sample_boundary(circle_model, 360)
    assert len(points) > 0
    assert np.all(np.linalg.norm(points, axis=1) <= circle_model.radius + 1e-9)
    assert np.max(np.abs(circle_model.evaluate(points))) < 1e-6


def test_area_diagnostics_on_unit_disk():
    """Test bounding box area and sublevel volume of the unit disk."""
    model = ShapeModel(norm_squared(2) - 1.0, 1.5)
    assert bounding_box_area(model, 301) == pytest.approx(4.0, rel=0.02)
    assert sublevel_volume(model, 301) == pytest.approx(math.pi, rel=0.02)
