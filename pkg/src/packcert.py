"""
Packing certification.

A scene places objects P_i = {p_i <= 0, F_i <= 0} with inverse maps T_i^-1 in a
container {c < 0, F_0 < 0}. Each constraint is certified separately by maximising
gamma (capped) in a Putinar identity; positive verified gamma proves it. Constraints
that do not verify are handed to a sampling oracle that searches for a concrete
violating point.

Constraint ids: "containment:<i>", "domain:<i>", "overlap:<i>:<j>" (0-based, i < j).
"""

import json
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from src.logger import logger
from src.polycore import (
    AffineTransform,
    Box,
    Polynomial,
    compose_affine,
    compose_transforms,
    evaluate,
    evaluate_many,
    polynomial_from_dict,
    polynomial_to_dict,
    total_degree,
)
from src.settings import OracleBudget, SolverOptions, VerificationTolerances
from src.soscore import Certificate, SosConstraintSystem, solve_system, verify_certificate
from src.validators import validate_scene


CERTIFIED = "certified"
REFUTED = "refuted"
UNDECIDED = "undecided"

RAY_STEPS = 512
MAX_EXTENT = 1e4
EXTENT_HEADROOM = 1.05
DIRECTION_COUNT = 2000


class SceneError(ValueError):
    pass


class SearchRegionError(ValueError):
    pass


@dataclass
class SceneObject:
    label: str
    p: Polynomial
    transform: AffineTransform
    F: Optional[Polynomial] = None

    def __post_init__(self):
        n = self.p.dimension
        if self.transform.dimension != n or (self.F is not None and self.F.dimension != n):
            raise SceneError(f"Object '{self.label}': dimensions of p, F and transform disagree.")
        if self.F is not None and not leading_form_positive(self.F):
            raise SceneError(f"Object '{self.label}': domain polynomial F has an unbounded sublevel set.")
        self._composed_p = compose_affine(self.p, self.transform)
        self._composed_f = compose_affine(self.F, self.transform) if self.F is not None else None

    @property
    def composed_p(self) -> Polynomial:
        return self._composed_p

    @property
    def composed_f(self) -> Optional[Polynomial]:
        return self._composed_f

    def set_polynomials(self) -> List[Polynomial]:
        """Polynomials that are <= 0 on the placed object, in world coordinates."""
        return [self.composed_p] + ([self.composed_f] if self.composed_f is not None else [])


@dataclass
class Scene:
    container_c: Polynomial
    objects: List[SceneObject]
    cert_degree: int
    container_f0: Optional[Polynomial] = None
    gamma_cap: float = 1.0
    search_box: Optional[Box] = None
    ground_truth: Optional[str] = None

    def __post_init__(self):
        if not self.objects:
            raise SceneError("A scene needs at least one object.")
        if self.cert_degree <= 0:
            raise SceneError(f"Certification degree must be positive, got {self.cert_degree}.")
        if self.gamma_cap <= 0:
            raise SceneError("gamma_cap must be positive.")
        n = self.container_c.dimension
        if self.container_f0 is not None and self.container_f0.dimension != n:
            raise SceneError("Container polynomials have different dimensions.")
        for obj in self.objects:
            if obj.p.dimension != n:
                raise SceneError(f"Object '{obj.label}' has dimension {obj.p.dimension}, container has {n}.")
        if self.search_box is not None and self.search_box.dimension != n:
            raise SceneError("Search box dimension does not match the scene.")
        top = max(
            [self.container_c.degree]
            + ([self.container_f0.degree] if self.container_f0 is not None else [])
            + [p.degree for obj in self.objects for p in obj.set_polynomials()]
        )
        if self.cert_degree < top:
            logger.log_warning(
                "Certification degree below the largest scene polynomial degree",
                {"degree": self.cert_degree, "max_polynomial_degree": top},
            )

    @property
    def dimension(self) -> int:
        return self.container_c.dimension

    def constraint_ids(self) -> List[str]:
        ids = [f"containment:{i}" for i in range(len(self.objects))]
        ids += [f"domain:{i}" for i in range(len(self.objects))]
        ids += [
            f"overlap:{i}:{j}" for i in range(len(self.objects)) for j in range(i + 1, len(self.objects))
        ]
        return ids

    def with_degree(self, degree: int) -> "Scene":
        return Scene(
            self.container_c, self.objects, degree, self.container_f0, self.gamma_cap, self.search_box, self.ground_truth
        )

    def with_cap(self, gamma_cap: float) -> "Scene":
        return Scene(
            self.container_c, self.objects, self.cert_degree, self.container_f0, gamma_cap, self.search_box,
            self.ground_truth,
        )


@dataclass
class ConstraintResult:
    constraint_id: str
    certificate: Optional[Certificate]
    skipped: bool = False
    ordering: Optional[Tuple[int, int]] = None
    witness: Optional[np.ndarray] = None

    @property
    def kind(self) -> str:
        return self.constraint_id.split(":")[0]

    @property
    def verified(self) -> bool:
        return self.skipped or (self.certificate is not None and self.certificate.verified)

    def to_dict(self) -> Dict[str, Any]:
        cert = self.certificate
        return {
            "id": self.constraint_id,
            "kind": self.kind,
            "skipped": self.skipped,
            "verified": self.verified,
            "gamma": cert.gamma if cert is not None and cert.gamma is not None and math.isfinite(cert.gamma) else None,
            "ordering": list(self.ordering) if self.ordering else None,
            "certificate": cert.to_dict() if cert is not None else None,
            "witness": self.witness.tolist() if self.witness is not None else None,
        }


@dataclass
class PackingReport:
    results: List[ConstraintResult]
    verdict: str
    degree: int
    gamma_cap: float

    @property
    def counterexamples(self) -> List[Tuple[str, np.ndarray]]:
        return [(r.constraint_id, r.witness) for r in self.results if r.witness is not None]

    @property
    def min_gamma(self) -> Optional[float]:
        gammas = [
            r.certificate.gamma
            for r in self.results
            if not r.skipped and r.certificate is not None and r.certificate.gamma is not None
            and math.isfinite(r.certificate.gamma)
        ]
        return min(gammas) if gammas else None

    def result(self, constraint_id: str) -> ConstraintResult:
        for r in self.results:
            if r.constraint_id == constraint_id:
                return r
        raise KeyError(constraint_id)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "verdict": self.verdict,
            "degree": self.degree,
            "gamma_cap": self.gamma_cap,
            "min_gamma": self.min_gamma,
            "constraints": [r.to_dict() for r in self.results],
            "counterexamples": [{"constraint": cid, "witness": w.tolist()} for cid, w in self.counterexamples],
        }


def leading_form_positive(p: Polynomial, samples: int = 512, seed: int = 0) -> bool:
    """Top-degree homogeneous part positive on sampled unit directions."""
    d = p.degree
    top = Polynomial(p.dimension, {a: c for a, c in p.terms.items() if total_degree(a) == d})
    if d == 0 or d % 2:
        return False
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((samples, p.dimension))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    if p.dimension == 1:
        u = np.array([[1.0], [-1.0]])
    return bool(np.all(evaluate_many(top, u) > 0))


def _certify_identity(
    scene: Scene,
    target: Polynomial,
    gs: Sequence[Polynomial],
    label: str,
    options: Optional[SolverOptions],
    tolerances: Optional[VerificationTolerances],
) -> Certificate:
    """max gamma s.t. target - gamma - sum s_k g_k is SOS, gamma <= cap; g_k >= 0 on the set."""
    system = SosConstraintSystem(scene.dimension)
    gamma = system.declare_scalar("gamma", gamma=True)
    system.maximize(gamma)
    system.add_nonnegative(scene.gamma_cap - gamma, "cap")
    system.add_putinar_constraint(target - gamma, list(gs), scene.cert_degree, label)
    try:
        solution = solve_system(system, options)
        certificate = verify_certificate(system, solution, tolerances)
    except (np.linalg.LinAlgError, ArithmeticError) as exc:
        logger.log_error(str(exc), {"constraint": label})
        certificate = Certificate(None, {}, {}, math.inf, -math.inf, False, "numerical_trouble")
    certificate.multipliers = {k: v for k, v in certificate.multipliers.items() if k != "cap"}
    certificate.gram_matrices = {k: v for k, v in certificate.gram_matrices.items() if k != "cap"}
    logger.log_certificate(label, certificate.gamma, certificate.verified, certificate.solver_status)
    return certificate


def _object(scene: Scene, i: int) -> SceneObject:
    if not 0 <= i < len(scene.objects):
        raise SceneError(f"Object index {i} out of range (scene has {len(scene.objects)} objects).")
    return scene.objects[i]


def certify_containment(
    scene: Scene,
    i: int,
    options: Optional[SolverOptions] = None,
    tolerances: Optional[VerificationTolerances] = None,
) -> Certificate:
    """-c + p~ s1 + F~ s2 = s3 + gamma: gamma > 0 proves the placed object lies in {c < 0}."""
    obj = _object(scene, i)
    gs = [-p for p in obj.set_polynomials()]
    return _certify_identity(scene, -scene.container_c, gs, f"containment:{i}", options, tolerances)


def certify_domain(
    scene: Scene,
    i: int,
    options: Optional[SolverOptions] = None,
    tolerances: Optional[VerificationTolerances] = None,
) -> Optional[Certificate]:
    """Same as containment with F_0 in place of c; None when the container has no F_0."""
    obj = _object(scene, i)
    if scene.container_f0 is None:
        return None
    gs = [-p for p in obj.set_polynomials()]
    return _certify_identity(scene, -scene.container_f0, gs, f"domain:{i}", options, tolerances)


def _certify_ordered(scene, i, j, options, tolerances) -> Certificate:
    obj_i, obj_j = _object(scene, i), _object(scene, j)
    gs = [-p for p in obj_i.set_polynomials()]
    if obj_j.composed_f is not None:
        gs.append(-obj_j.composed_f)
    return _certify_identity(scene, obj_j.composed_p, gs, f"overlap:{i}:{j}", options, tolerances)


def _certify_pair(scene, i, j, options, tolerances) -> Tuple[Certificate, Tuple[int, int]]:
    if i == j:
        raise SceneError("Non-overlap needs two different objects.")
    first = _certify_ordered(scene, i, j, options, tolerances)
    if first.verified:
        return first, (i, j)
    second = _certify_ordered(scene, j, i, options, tolerances)
    if second.verified:
        return second, (j, i)
    return first, (i, j)


def certify_non_overlap(
    scene: Scene,
    i: int,
    j: int,
    options: Optional[SolverOptions] = None,
    tolerances: Optional[VerificationTolerances] = None,
) -> Certificate:
    """p_j~ > 0 on placed object i (within F_j): tries (i, j), then (j, i)."""
    certificate, _ = _certify_pair(scene, i, j, options, tolerances)
    return certificate


def _parse_constraint(scene: Scene, constraint_id: str) -> Tuple[str, List[int]]:
    kind, *indices = constraint_id.split(":")
    try:
        idx = [int(v) for v in indices]
    except ValueError as exc:
        raise SceneError(f"Malformed constraint id '{constraint_id}'.") from exc
    expected = {"containment": 1, "domain": 1, "overlap": 2}
    if kind not in expected or len(idx) != expected[kind]:
        raise SceneError(f"Unknown constraint id '{constraint_id}'.")
    for k in idx:
        _object(scene, k)
    if kind == "overlap" and idx[0] == idx[1]:
        raise SceneError("Non-overlap needs two different objects.")
    return kind, idx


def _violation_polynomials(scene: Scene, kind: str, idx: List[int]) -> Optional[List[Polynomial]]:
    """Polynomials that are all >= margin at a violating point."""
    obj = scene.objects[idx[0]]
    inside = [-p for p in obj.set_polynomials()]
    if kind == "containment":
        return inside + [scene.container_c]
    if kind == "domain":
        if scene.container_f0 is None:
            return None
        return inside + [scene.container_f0]
    other = scene.objects[idx[1]]
    return inside + [-p for p in other.set_polynomials()]


def _directions(n: int, count: int = DIRECTION_COUNT) -> np.ndarray:
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        theta = 2 * math.pi * np.arange(720) / 720
        return np.column_stack([np.cos(theta), np.sin(theta)])
    if n == 3:
        k = np.arange(count) + 0.5
        phi = np.arccos(1 - 2 * k / count)
        theta = math.pi * (1 + math.sqrt(5)) * k
        return np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])
    rng = np.random.default_rng(0)
    u = rng.standard_normal((count, n))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def coefficient_extent(p: Polynomial) -> Optional[float]:
    """Cauchy-style radius beyond which p > 0.

    With lam the minimum of the top-degree form on the unit sphere and a_k the sum of
    |coefficients| of degree k < d, p(x) >= lam r^d - sum_k a_k r^k, which is positive
    once r > max(1, sum_k a_k / lam). lam is taken at half its sampled minimum.
    """
    if not leading_form_positive(p):
        return None
    d = p.degree
    top = Polynomial(p.dimension, {a: c for a, c in p.terms.items() if total_degree(a) == d})
    lam = 0.5 * float(np.min(evaluate_many(top, _directions(p.dimension))))
    if lam <= 0:
        return None
    lower = math.fsum(abs(c) for a, c in p.terms.items() if total_degree(a) < d)
    return max(1.0, lower / lam)


def radial_extent(p: Polynomial) -> Optional[float]:
    """Radius of an origin ball containing {p <= 0}, or None if the set looks unbounded.

    Rays from the origin are scanned on growing radii up to the coefficient bound. A set
    that no ray sample reaches keeps the coefficient bound.
    """
    bound = coefficient_extent(p)
    if bound is None or bound > MAX_EXTENT:
        return None
    u = _directions(p.dimension)
    limit = min(1.0, bound)
    while True:
        t = np.linspace(0.0, limit, RAY_STEPS)
        values = evaluate_many(p, (u[:, None, :] * t[None, :, None]).reshape(-1, p.dimension))
        inside = values.reshape(len(u), RAY_STEPS) <= 0
        if limit < bound and (inside[:, -1].any() or not inside.any()):
            limit = min(2 * limit, bound)
            continue
        if not inside.any():
            return bound
        last = t[np.max(np.nonzero(inside)[1])]
        return min(bound, EXTENT_HEADROOM * (last + 2 * (t[1] - t[0])))


def _object_region(scene: Scene, obj: SceneObject) -> Optional[Box]:
    for source in (obj.F, obj.p):
        if source is None:
            continue
        rho = radial_extent(source)
        if rho is None:
            continue
        half = max(rho * obj.transform.inverse_norm(), 1e-12)
        center = obj.transform.vector
        return Box(tuple(center - half), tuple(center + half))
    return None


def _intersect(a: Box, b: Box) -> Optional[Box]:
    lower = np.maximum(a.lower, b.lower)
    upper = np.minimum(a.upper, b.upper)
    if np.any(lower >= upper):
        return None
    return Box(tuple(lower), tuple(upper))


def search_region(scene: Scene, constraint_id: str) -> Optional[Box]:
    """Bounded box holding every possible violation; None when the relevant sets cannot meet."""
    kind, idx = _parse_constraint(scene, constraint_id)
    regions = [_object_region(scene, scene.objects[k]) for k in idx]
    known = [r for r in regions if r is not None]
    if known:
        region = known[0]
        for other in known[1:]:
            region = _intersect(region, other)
            if region is None:
                return None
        return region
    if scene.search_box is not None:
        return scene.search_box
    rho = radial_extent(scene.container_c)
    if rho is not None and kind != "containment":
        return Box.cube(-rho, rho, scene.dimension)
    raise SearchRegionError(
        f"No bounded search region for '{constraint_id}': objects have no bounded F or p; set search_box."
    )


def _margins(polys: Sequence[Polynomial], points: np.ndarray) -> np.ndarray:
    return np.min(np.column_stack([evaluate_many(p, points) for p in polys]), axis=1)


def _exact_margin(polys: Sequence[Polynomial], x: np.ndarray) -> float:
    return min(evaluate(p, x) for p in polys)


def find_counterexample(
    scene: Scene, constraint_id: str, budget: Optional[OracleBudget] = None
) -> Optional[np.ndarray]:
    """
    Deepest violating point found by a grid plus seeded random samples, refined by
    Nelder-Mead. Every returned point has all violation margins >= budget.margin
    under exact evaluation of the composed polynomials.
    """
    budget = budget or OracleBudget()
    kind, idx = _parse_constraint(scene, constraint_id)
    polys = _violation_polynomials(scene, kind, idx)
    if polys is None:
        return None
    region = search_region(scene, constraint_id)
    if region is None:
        logger.log_oracle(constraint_id, None, None)
        return None

    n = scene.dimension
    res = budget.resolution_for(n)
    axes = [np.linspace(lo, hi, res) for lo, hi in zip(region.lower, region.upper)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    rng = np.random.default_rng([budget.seed, zlib.crc32(constraint_id.encode())])
    random_points = rng.uniform(region.lower, region.upper, size=(budget.random_samples, n))
    candidates = np.vstack([grid, random_points])
    margins = _margins(polys, candidates)
    best = int(np.argmax(margins))
    if margins[best] < budget.margin:
        logger.log_oracle(constraint_id, None, float(margins[best]))
        return None

    start = candidates[best]
    refined = minimize(
        lambda x: -_margins(polys, x.reshape(1, -1))[0],
        start,
        method="Nelder-Mead",
        options={"maxiter": 400 * n, "xatol": 1e-10, "fatol": 1e-14},
    )
    witness = None
    depth = -math.inf
    for point in (refined.x, start):
        value = _exact_margin(polys, point)
        if value >= budget.margin and value > depth:
            witness, depth = np.asarray(point, dtype=float), value
    logger.log_oracle(constraint_id, witness.tolist() if witness is not None else None, depth)
    return witness


def oracle_check(scene: Scene, budget: Optional[OracleBudget] = None) -> List[Tuple[str, Optional[np.ndarray]]]:
    return [(cid, find_counterexample(scene, cid, budget)) for cid in scene.constraint_ids()]


def _run_constraint(scene, constraint_id, options, tolerances) -> ConstraintResult:
    kind, idx = _parse_constraint(scene, constraint_id)
    if kind == "containment":
        return ConstraintResult(constraint_id, certify_containment(scene, idx[0], options, tolerances))
    if kind == "domain":
        certificate = certify_domain(scene, idx[0], options, tolerances)
        return ConstraintResult(constraint_id, certificate, skipped=certificate is None)
    certificate, ordering = _certify_pair(scene, idx[0], idx[1], options, tolerances)
    return ConstraintResult(constraint_id, certificate, ordering=ordering)


def certify_packing(
    scene: Scene,
    parallelism: int = 1,
    options: Optional[SolverOptions] = None,
    tolerances: Optional[VerificationTolerances] = None,
    budget: Optional[OracleBudget] = None,
) -> PackingReport:
    """Certify every constraint, search unverified ones for witnesses and aggregate the verdict."""
    ids = scene.constraint_ids()
    workers = max(1, parallelism)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda cid: _run_constraint(scene, cid, options, tolerances), ids))
        pending = [r for r in results if not r.verified]
        witnesses = list(
            pool.map(lambda r: _safe_counterexample(scene, r.constraint_id, budget), pending)
        )
    for result, witness in zip(pending, witnesses):
        result.witness = witness

    if all(r.verified for r in results):
        verdict = CERTIFIED
    elif any(r.witness is not None for r in results):
        verdict = REFUTED
    else:
        verdict = UNDECIDED
    logger.log_event("packing_verdict", verdict=verdict, constraints=len(results), degree=scene.cert_degree)
    return PackingReport(results, verdict, scene.cert_degree, scene.gamma_cap)


def _safe_counterexample(scene, constraint_id, budget) -> Optional[np.ndarray]:
    try:
        return find_counterexample(scene, constraint_id, budget)
    except SearchRegionError as exc:
        logger.log_warning("Oracle skipped", {"constraint": constraint_id, "reason": str(exc)})
        return None


def transform_scene(scene: Scene, motion: AffineTransform) -> Scene:
    """Move the whole scene rigidly: world points x become motion.forward(x)."""
    if not motion.rigid:
        raise SceneError("Scene motions must be rigid.")
    objects = [
        SceneObject(obj.label, obj.p, compose_transforms(obj.transform, motion), obj.F) for obj in scene.objects
    ]
    search_box = None
    if scene.search_box is not None:
        corners = np.array(np.meshgrid(*zip(scene.search_box.lower, scene.search_box.upper))).reshape(
            scene.dimension, -1
        ).T
        moved = motion.forward(corners)
        search_box = Box(tuple(moved.min(axis=0)), tuple(moved.max(axis=0)))
    return Scene(
        container_c=compose_affine(scene.container_c, motion),
        objects=objects,
        cert_degree=scene.cert_degree,
        container_f0=compose_affine(scene.container_f0, motion) if scene.container_f0 is not None else None,
        gamma_cap=scene.gamma_cap,
        search_box=search_box,
        ground_truth=scene.ground_truth,
    )


def scene_to_dict(scene: Scene) -> Dict[str, Any]:
    data: Dict[str, Any] = {
        "dim": scene.dimension,
        "container": {
            "c": polynomial_to_dict(scene.container_c),
            "F0": polynomial_to_dict(scene.container_f0) if scene.container_f0 is not None else None,
        },
        "objects": [
            {
                "label": obj.label,
                "p": polynomial_to_dict(obj.p),
                "F": polynomial_to_dict(obj.F) if obj.F is not None else None,
                "transform": obj.transform.to_dict(),
            }
            for obj in scene.objects
        ],
        "degree": scene.cert_degree,
        "gamma_cap": scene.gamma_cap,
    }
    if scene.search_box is not None:
        data["search_box"] = scene.search_box.to_dict()
    if scene.ground_truth is not None:
        data["ground_truth"] = scene.ground_truth
    return data


def scene_from_dict(data: Dict[str, Any]) -> Scene:
    parsed = validate_scene(data)
    n = parsed.dim

    def poly(model) -> Optional[Polynomial]:
        if model is None:
            return None
        p = polynomial_from_dict(model.model_dump())
        if p.dimension != n:
            raise SceneError(f"Polynomial of dimension {p.dimension} in a {n}-dimensional scene.")
        return p

    try:
        objects = [
            SceneObject(
                label=o.label,
                p=poly(o.p),
                transform=AffineTransform(tuple(map(tuple, o.transform.linear)), tuple(o.transform.offset), o.transform.rigid),
                F=poly(o.F),
            )
            for o in parsed.objects
        ]
    except ValueError as exc:
        if isinstance(exc, SceneError):
            raise
        raise SceneError(str(exc)) from exc
    box = Box(tuple(parsed.search_box.lower), tuple(parsed.search_box.upper)) if parsed.search_box else None
    return Scene(
        container_c=poly(parsed.container.c),
        objects=objects,
        cert_degree=parsed.degree,
        container_f0=poly(parsed.container.F0),
        gamma_cap=parsed.gamma_cap,
        search_box=box,
        ground_truth=parsed.ground_truth,
    )


def load_scene(path: Path) -> Scene:
    with Path(path).open("r", encoding="utf-8") as file:
        return scene_from_dict(json.load(file))


def save_scene(scene: Scene, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as file:
        json.dump(scene_to_dict(scene), file, indent=2, ensure_ascii=False)
