"""
Learning polynomial sublevel-set shapes from point clouds.

The learned shape is {x : ||x|| <= r, J(x) <= 0} where J maximises its mean over
the box subject to J(x_i) <= -margin at every point, J <= 1 on the ball of radius
R (certified by an SOS multiplier), and the optional symmetry, star and convexity
priors.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg as la
from scipy.optimize import brentq

from src.logger import logger
from src.polycore import (
    AffineTransform,
    Box,
    Polynomial,
    compose_affine,
    evaluate,
    evaluate_many,
    integrate_box,
    monomial_basis,
    norm_squared,
    polynomial_from_dict,
    polynomial_to_dict,
)
from src.settings import SolverOptions, VerificationTolerances
from src.soscore import (
    SCALAR,
    Certificate,
    PolyExpr,
    SosConstraintSystem,
    solve_system,
    verify_certificate,
)
from src.validators import validate_shape


DEFAULT_MARGIN = 1e-4
RADIUS_HEADROOM = 1.05
NORMALIZE_FILL = 0.95
RAY_SAMPLES = 256
BISECTION_STEPS = 48


class PointCloudError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class LearnConfigError(ValueError):
    pass


class ShapeLearningError(RuntimeError):
    def __init__(self, message: str, solver_status: str, certificate: Optional[Certificate] = None):
        super().__init__(f"{message} (solver status: {solver_status})")
        self.solver_status = solver_status
        self.certificate = certificate


@dataclass
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] == 0:
            raise PointCloudError("Point cloud must contain at least one point.")
        if not np.all(np.isfinite(pts)):
            raise PointCloudError("Point cloud contains non-finite coordinates.")
        self.points = pts

    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class SymmetryPrior:
    matrix: Tuple[Tuple[float, ...], ...]

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": "symmetry", "matrix": [list(row) for row in self.matrix]}


@dataclass(frozen=True)
class StarPrior:
    def to_dict(self) -> Dict[str, Any]:
        return {"kind": "star"}


@dataclass(frozen=True)
class ConvexPrior:
    def to_dict(self) -> Dict[str, Any]:
        return {"kind": "convex"}


Prior = Union[SymmetryPrior, StarPrior, ConvexPrior]


def parse_prior(text: str, dimension: int) -> Prior:
    """
    Parse a CLI prior: `star`, `convex`, `symmetry:neg-identity`,
    `symmetry:reflect-<k>` (flip axis k, 1-based) or `symmetry:<row>;<row>` with
    comma-separated entries.
    """
    kind, _, arg = text.strip().partition(":")
    kind = kind.lower()
    if kind == "star" and not arg:
        return StarPrior()
    if kind == "convex" and not arg:
        return ConvexPrior()
    if kind != "symmetry" or not arg:
        raise LearnConfigError(f"Unsupported prior '{text}'. Use star, convex or symmetry:<matrix-spec|neg-identity>.")
    if arg == "neg-identity":
        matrix = -np.eye(dimension)
    elif arg.startswith("reflect-"):
        axis = int(arg.split("-", 1)[1]) - 1
        if not 0 <= axis < dimension:
            raise LearnConfigError(f"Reflection axis out of range in '{text}'.")
        matrix = np.eye(dimension)
        matrix[axis, axis] = -1.0
    else:
        try:
            matrix = np.array([[float(v) for v in row.split(",")] for row in arg.split(";")])
        except ValueError as exc:
            raise LearnConfigError(f"Cannot parse symmetry matrix '{arg}'.") from exc
    return SymmetryPrior(tuple(map(tuple, matrix)))


def prior_from_dict(data: Dict[str, Any]) -> Prior:
    kind = data["kind"]
    if kind == "symmetry":
        return SymmetryPrior(tuple(map(tuple, data["matrix"])))
    return StarPrior() if kind == "star" else ConvexPrior()


@dataclass
class LearnConfig:
    degree: int
    box: Box
    radius: Optional[float] = None
    margin: float = DEFAULT_MARGIN
    priors: List[Prior] = field(default_factory=list)
    domain_radius: Optional[float] = None
    multiplier_degree: Optional[int] = None

    def __post_init__(self):
        if self.degree <= 0 or self.degree % 2:
            raise LearnConfigError(f"Degree must be an even positive integer, got {self.degree}.")
        if self.radius is None:
            self.radius = RADIUS_HEADROOM * math.sqrt(self.box.max_norm_squared())
        if self.radius <= 0:
            raise LearnConfigError("Ball radius must be positive.")
        if self.box.max_norm_squared() > self.radius ** 2:
            raise LearnConfigError(
                f"Box is not inside the ball of radius {self.radius}: "
                f"needs R^2 >= {self.box.max_norm_squared():.6g}."
            )
        if self.margin <= 0:
            raise LearnConfigError("Margin must be positive.")
        if self.domain_radius is None:
            self.domain_radius = self.box.inner_radius() or self.radius
        if self.multiplier_degree is None:
            self.multiplier_degree = 2 * ((self.degree - 2) // 2)
        if self.multiplier_degree < 0 or self.multiplier_degree % 2:
            raise LearnConfigError("Boundedness multiplier degree must be even and non-negative.")
        n = self.box.dimension
        for prior in self.priors:
            if isinstance(prior, SymmetryPrior):
                a = np.array(prior.matrix, dtype=float)
                if a.shape != (n, n):
                    raise LearnConfigError(f"Symmetry matrix has shape {a.shape}, expected {(n, n)}.")
                if abs(np.linalg.det(a)) < 1e-12:
                    raise LearnConfigError("Symmetry matrix is singular.")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "degree": self.degree,
            "box": self.box.to_dict(),
            "radius": self.radius,
            "margin": self.margin,
            "priors": [p.to_dict() for p in self.priors],
            "domain_radius": self.domain_radius,
            "multiplier_degree": self.multiplier_degree,
        }


@dataclass
class ShapeModel:
    polynomial: Polynomial
    radius: float
    config: Optional[LearnConfig] = None
    certificate: Optional[Certificate] = None
    objective: float = math.nan

    @property
    def dimension(self) -> int:
        return self.polynomial.dimension

    def domain_polynomial(self) -> Polynomial:
        """F(x) = ||x||^2 - r^2, whose 0-sublevel set is the representation ball."""
        return norm_squared(self.dimension) - self.radius ** 2

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return evaluate_many(self.polynomial, points)

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside_ball = np.sum(pts ** 2, axis=1) <= self.radius ** 2
        return inside_ball & (self.evaluate(pts) <= 0.0)


def load_point_cloud(path: Path, fmt: Optional[str] = None) -> PointCloud:
    """Read a CSV (comma separated) or XYZ (whitespace separated) point file."""
    path = Path(path)
    fmt = (fmt or ("xyz" if path.suffix.lower() in {".xyz", ".txt"} else "csv")).lower()
    if fmt not in {"csv", "xyz"}:
        raise PointCloudError(f"Unsupported point cloud format '{fmt}'.")
    rows: List[List[float]] = []
    width: Optional[int] = None
    with path.open("r", encoding="utf-8") as file:
        for lineno, line in enumerate(file, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split(",") if fmt == "csv" else text.split()
            try:
                values = [float(part) for part in parts]
            except ValueError:
                raise PointCloudError(f"cannot parse '{text}' as numbers", line=lineno)
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise PointCloudError(f"expected {width} columns, found {len(values)}", line=lineno)
            if not all(math.isfinite(v) for v in values):
                raise PointCloudError("non-finite coordinate", line=lineno)
            rows.append(values)
    if not rows:
        raise PointCloudError(f"Point cloud file {path} is empty.")
    return PointCloud(np.array(rows))


def save_points_csv(points: np.ndarray, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    with path.open("w", encoding="utf-8", newline="\n") as file:
        for row in pts:
            if row.size:
                file.write(",".join(f"{v:.12g}" for v in row) + "\n")


def normalize_cloud(cloud: PointCloud, target_box: Box) -> Tuple[PointCloud, AffineTransform]:
    """
    Rescale every coordinate into the target box with a 5% margin.

    The returned transform maps raw coordinates to normalized ones through `apply`
    and back through `forward`, so compose_affine(J, transform) is the learned
    shape in raw coordinates.
    """
    if target_box.dimension != cloud.dimension:
        raise LearnConfigError("Target box dimension does not match the cloud.")
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    center = (lo + hi) / 2
    extent = hi - lo
    half_target = NORMALIZE_FILL * (np.array(target_box.upper) - np.array(target_box.lower)) / 2
    mid = np.array(target_box.center)
    scales = np.ones(cloud.dimension)
    positive = extent > 0
    scales[positive] = 2 * half_target[positive] / extent[positive]
    if not positive.all():
        widest = int(np.argmax(extent))
        fallback = scales[widest] if positive.any() else 1.0
        logger.log_warning(
            "Degenerate cloud axis rescaled by the widest axis",
            {"axes": np.flatnonzero(~positive).tolist(), "scale": float(fallback)},
        )
        scales[~positive] = fallback
    offset = center - mid / scales
    transform = AffineTransform(tuple(map(tuple, np.diag(scales))), tuple(offset), False)
    return PointCloud(transform.apply(cloud.points)), transform


def symmetry_coefficient_map(matrix: np.ndarray, basis: Sequence[Tuple[int, ...]]) -> np.ndarray:
    """M with coefficients(J(Ax)) = M @ coefficients(J) over the given basis."""
    transform = AffineTransform.linear_map(matrix)
    position = {alpha: k for k, alpha in enumerate(basis)}
    m = np.zeros((len(basis), len(basis)))
    for col, alpha in enumerate(basis):
        for beta, coef in compose_affine(Polynomial.monomial(alpha), transform).terms.items():
            m[position[beta], col] = coef
    return m


def _shape_unknown(system: SosConstraintSystem, config: LearnConfig) -> PolyExpr:
    n, d = config.box.dimension, config.degree
    symmetries = [p for p in config.priors if isinstance(p, SymmetryPrior)]
    if not symmetries:
        return system.declare_free_polynomial("J", d)
    # J restricted to the invariant subspace, so J(Ax) = J(x) holds coefficient-exactly
    basis = monomial_basis(n, d)
    stacked = np.vstack(
        [symmetry_coefficient_map(np.array(p.matrix), basis) - np.eye(len(basis)) for p in symmetries]
    )
    invariant = la.null_space(stacked)
    terms: Dict[Tuple[int, ...], Dict[Any, float]] = {alpha: {} for alpha in basis}
    for k in range(invariant.shape[1]):
        system.declare_scalar(f"J.z{k}")
        for row in np.flatnonzero(invariant[:, k]):
            terms[basis[row]][(SCALAR, f"J.z{k}")] = float(invariant[row, k])
    return PolyExpr(n, terms)


def build_learning_system(
    cloud: PointCloud, config: LearnConfig, tolerances: Optional[VerificationTolerances] = None
) -> Tuple[SosConstraintSystem, PolyExpr]:
    tol = tolerances or VerificationTolerances()
    n = cloud.dimension
    if config.box.dimension != n:
        raise LearnConfigError(f"Box dimension {config.box.dimension} does not match cloud dimension {n}.")
    inside = config.box.contains_strictly(cloud.points)
    if not inside.all():
        first = int(np.flatnonzero(~inside)[0])
        raise LearnConfigError(f"Point {first} {cloud.points[first].tolist()} is not strictly inside the box.")

    system = SosConstraintSystem(n)
    j = _shape_unknown(system, config)
    volume = config.box.volume
    system.maximize({key: coef / volume for key, coef in j.integrate_box(config.box).items()})

    # solve-side margin carries the verification tolerance so the exact check passes
    required = config.margin + tol.tol_res
    for i, form in enumerate(j.evaluate_many(cloud.points)):
        system.add_nonnegative(-PolyExpr.from_form(n, form) - required, f"point{i}")

    ball = Polynomial.constant(n, config.radius ** 2) - norm_squared(n)
    bound_multiplier = system.declare_sos("bounded.multiplier", config.multiplier_degree)
    system.add_nonnegative(1.0 - j - bound_multiplier.times_known(ball), "bounded.sos")

    for prior in config.priors:
        if isinstance(prior, StarPrior):
            radial = PolyExpr.zero(n)
            for i in range(n):
                radial = radial + j.derivative(i).times_known(Polynomial.variable(n, i))
            star_multiplier = system.declare_sos("star.multiplier", config.multiplier_degree)
            system.add_nonnegative(radial - star_multiplier.times_known(ball), "star.sos")
        elif isinstance(prior, ConvexPrior):
            system.add_sos_matrix_constraint(j.hessian(), "convex.sos")
    return system, j


def learn_shape(
    cloud: PointCloud,
    config: LearnConfig,
    options: Optional[SolverOptions] = None,
    tolerances: Optional[VerificationTolerances] = None,
) -> ShapeModel:
    tol = tolerances or VerificationTolerances()
    system, j = build_learning_system(cloud, config, tol)
    solution = solve_system(system, options)
    certificate = verify_certificate(system, solution, tol)
    polynomial = j.substitute(system.assignment(solution))

    certificate.multipliers = {
        name: p for name, p in certificate.multipliers.items() if not name.startswith("point") and name != "J"
    }
    certificate.gram_matrices = {
        name: q for name, q in certificate.gram_matrices.items() if not name.startswith("point")
    }
    objective = integrate_box(polynomial, config.box) / config.box.volume
    logger.log_learn_complete(config.degree, len(cloud), objective, certificate.verified)

    if not certificate.verified:
        raise ShapeLearningError(
            f"Shape certificate failed verification (residual {certificate.identity_residual:.3g}, "
            f"min Gram eigenvalue {certificate.min_gram_eig:.3g})",
            solution.status.value,
            certificate,
        )
    worst = float(np.max(evaluate_many(polynomial, cloud.points)))
    if worst > -config.margin:
        raise ShapeLearningError(
            f"Margin violated: max J(x_i) = {worst:.3g} > {-config.margin:.3g}",
            solution.status.value,
            certificate,
        )
    return ShapeModel(polynomial, float(config.domain_radius), config, certificate, objective)


def save_shape(model: ShapeModel, path: Path) -> None:
    data = polynomial_to_dict(model.polynomial)
    data["radius"] = model.radius
    data["config"] = model.config.to_dict() if model.config else None
    data["certificate"] = model.certificate.to_dict() if model.certificate else None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as file:
        json.dump(data, file, indent=2, ensure_ascii=False)


def load_shape(path: Path) -> ShapeModel:
    with Path(path).open("r", encoding="utf-8") as file:
        data = json.load(file)
    parsed = validate_shape(data)
    polynomial = polynomial_from_dict(data)
    config = None
    if parsed.config is not None:
        c = parsed.config
        config = LearnConfig(
            degree=c.degree,
            box=Box(tuple(c.box.lower), tuple(c.box.upper)),
            radius=c.radius,
            margin=c.margin,
            priors=[prior_from_dict(p.model_dump()) for p in c.priors],
            domain_radius=c.domain_radius,
            multiplier_degree=c.multiplier_degree,
        )
    certificate = None
    if parsed.certificate is not None:
        cert = parsed.certificate
        certificate = Certificate(
            gamma=cert.gamma,
            multipliers={k: polynomial_from_dict(v.model_dump()) for k, v in cert.multipliers.items()},
            gram_matrices={},
            identity_residual=cert.identity_residual if cert.identity_residual is not None else math.nan,
            min_gram_eig=cert.min_gram_eig if cert.min_gram_eig is not None else math.inf,
            verified=cert.verified,
            solver_status=cert.solver_status,
        )
    return ShapeModel(polynomial, parsed.radius, config, certificate)


def _ray_roots(p: Polynomial, directions: np.ndarray, radius: float) -> np.ndarray:
    rho = np.linspace(0.0, radius, RAY_SAMPLES)
    n = p.dimension
    samples = directions[:, None, :] * rho[None, :, None]
    values = evaluate_many(p, samples.reshape(-1, n)).reshape(len(directions), RAY_SAMPLES)
    negative = values < 0
    roots = []
    for ray, k in np.argwhere(negative[:, :-1] != negative[:, 1:]):
        u = directions[ray]
        t = brentq(lambda s: evaluate(p, s * u), rho[k], rho[k + 1], xtol=1e-13)
        roots.append(t * u)
    return np.array(roots) if roots else np.zeros((0, n))


def _grid_crossings(p: Polynomial, radius: float, resolution: int) -> np.ndarray:
    """Zero crossings of p along every edge of a cubic grid over [-r, r]^3."""
    axis = np.linspace(-radius, radius, resolution)
    mesh = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    values = evaluate_many(p, mesh.reshape(-1, 3)).reshape(mesh.shape[:3])
    found = []
    for k in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[k] = slice(None, -1)
        hi[k] = slice(1, None)
        a_vals, b_vals = values[tuple(lo)], values[tuple(hi)]
        mask = (a_vals < 0) != (b_vals < 0)
        if not mask.any():
            continue
        a = mesh[tuple(lo)][mask]
        b = mesh[tuple(hi)][mask]
        fa = a_vals[mask]
        for _ in range(BISECTION_STEPS):
            mid = (a + b) / 2
            fm = evaluate_many(p, mid)
            same = (fm < 0) == (fa < 0)
            a = np.where(same[:, None], mid, a)
            fa = np.where(same, fm, fa)
            b = np.where(same[:, None], b, mid)
        found.append((a + b) / 2)
    return np.vstack(found) if found else np.zeros((0, 3))


def sample_boundary(model: ShapeModel, resolution: int, seed: int = 0) -> np.ndarray:
    """
    Points on {J = 0} inside the representation ball.

    2D uses `resolution` equally spaced rays, 3D a marching grid with `resolution`
    nodes per axis, any other dimension `resolution` seeded random rays.
    """
    p = model.polynomial
    n = p.dimension
    r = model.radius
    if resolution < 1:
        raise ValueError("Resolution must be positive.")
    if n == 2:
        theta = 2 * math.pi * np.arange(resolution) / resolution
        points = _ray_roots(p, np.column_stack([np.cos(theta), np.sin(theta)]), r)
    elif n == 3:
        points = _grid_crossings(p, r, max(resolution, 2))
    elif n == 1:
        points = _ray_roots(p, np.array([[-1.0], [1.0]]), r)
    else:
        rng = np.random.default_rng(seed)
        directions = rng.standard_normal((resolution, n))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        points = _ray_roots(p, directions, r)
    if points.size:
        points = points[np.sum(points ** 2, axis=1) <= r ** 2 * (1 + 1e-12)]
    if not points.size:
        logger.log_warning("Sublevel set boundary is empty", {"dimension": n, "resolution": resolution})
        return np.zeros((0, n))
    return points


def _grid_over(model: ShapeModel, resolution: int) -> Tuple[np.ndarray, Box]:
    n = model.dimension
    box = model.config.box if model.config else Box.cube(-model.radius, model.radius, n)
    axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(box.lower, box.upper)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    return grid, box


def bounding_box_area(model: ShapeModel, resolution: int = 200) -> float:
    """Area (volume) of the axis-aligned bounding box of the learned set, sampled on a grid."""
    grid, _ = _grid_over(model, resolution)
    inside = grid[model.contains(grid)]
    if not inside.size:
        return 0.0
    return float(np.prod(inside.max(axis=0) - inside.min(axis=0)))


def sublevel_volume(model: ShapeModel, resolution: int = 200) -> float:
    grid, box = _grid_over(model, resolution)
    return float(np.mean(model.contains(grid)) * box.volume)
