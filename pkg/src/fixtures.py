"""
Deterministic point clouds and packing scenes.

Every generator is a pure function of its arguments: clouds come from a seeded
numpy Generator and scene files embed fixed polynomials, so the same spec always
writes the same bytes.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from src.logger import logger
from src.packcert import Scene, SceneObject, find_counterexample, save_scene
from src.polycore import AffineTransform, Box, Polynomial, norm_squared, rotation_2d
from src.settings import OracleBudget
from src.shapelearn import LearnConfig, PointCloud, learn_shape, save_points_csv


CLOUD_KINDS = {
    "circle_cloud",
    "annulus_cloud",
    "sphere_cloud",
    "blended_surface_cloud",
    "star_cloud",
    "two_cluster_cloud",
}
SCENE_KINDS = {
    "scene_ex3_initial",
    "scene_ex3_corrected",
    "scene_ex3_balls",
    "scene_ex3_balls_moved",
    "scene_ex4_initial",
    "scene_ex4_corrected",
    "scene_ex4_disks",
    "disks_disjoint",
    "disks_overlapping",
}

EX3_INITIAL_CENTERS = [(1.0, 1.0, 0.0), (-0.4, 0.0, 0.0), (-0.5, 0.5, 0.0), (-0.5, -0.5, 0.0)]
# objects 1 and 2 moved by (-0.5, -0.5, 0) and (0.9, -0.5, 0)
EX3_CORRECTED_CENTERS = [(0.5, 0.5, 0.0), (0.5, -0.5, 0.0), (-0.5, 0.5, 0.0), (-0.5, -0.5, 0.0)]
EX3_SCALE = 3.0
DISK_RADIUS = 0.2


@dataclass(frozen=True)
class FixtureSpec:
    kind: str
    seed: int = 0
    size: Optional[int] = None

    def __post_init__(self):
        if self.kind not in CLOUD_KINDS | SCENE_KINDS:
            allowed = ", ".join(sorted(CLOUD_KINDS | SCENE_KINDS))
            raise ValueError(f"Unsupported fixture kind '{self.kind}'. Allowed: {allowed}.")
        if self.size is not None and self.size < 1:
            raise ValueError("Fixture size must be positive.")


def circle_cloud(size: int = 200, seed: int = 0, radius: float = 1.0) -> PointCloud:
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2 * math.pi, size)
    return PointCloud(radius * np.column_stack([np.cos(theta), np.sin(theta)]))


def annulus_cloud(size: int = 300, seed: int = 0, inner: float = 0.5, outer: float = 1.0) -> PointCloud:
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2 * math.pi, size)
    r = np.sqrt(rng.uniform(inner ** 2, outer ** 2, size))
    return PointCloud(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))


def sphere_cloud(size: int = 400, seed: int = 0, radius: float = 1.0) -> PointCloud:
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((size, 3))
    return PointCloud(radius * u / np.linalg.norm(u, axis=1, keepdims=True))


def star_cloud(size: int = 200, seed: int = 0) -> PointCloud:
    """Outline r(theta) = 0.7 + 0.2 cos(5 theta): star-shaped about the origin, not convex."""
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2 * math.pi, size)
    r = 0.7 + 0.2 * np.cos(5 * theta)
    return PointCloud(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))


def two_cluster_cloud(size: int = 100, seed: int = 0, spread: float = 0.1) -> PointCloud:
    rng = np.random.default_rng(seed)
    half = size // 2
    theta = rng.uniform(0.0, 2 * math.pi, size)
    r = spread * np.sqrt(rng.uniform(0.0, 1.0, size))
    centers = np.where(np.arange(size)[:, None] < half, [0.8, 0.0], [-0.8, 0.0])
    return PointCloud(centers + np.column_stack([r * np.cos(theta), r * np.sin(theta)]))


def _smooth_min(values: List[np.ndarray], k: float) -> np.ndarray:
    stacked = np.stack(values)
    low = stacked.min(axis=0)
    return low - k * np.log(np.sum(np.exp(-(stacked - low) / k), axis=0))


def blended_surface(points: np.ndarray, handle: bool = True) -> np.ndarray:
    """Teapot-like implicit: body, spout and (optionally) a genus-one handle, smoothly blended."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    body = (x / 0.6) ** 2 + (y / 0.6) ** 2 + (z / 0.45) ** 2 - 1.0
    spout = ((x - 0.7) / 0.25) ** 2 + (y / 0.1) ** 2 + ((z - 0.1) / 0.1) ** 2 - 1.0
    parts = [body, spout]
    if handle:
        ring = np.sqrt((x + 0.65) ** 2 + (z - 0.05) ** 2) - 0.2
        parts.append((ring ** 2 + y ** 2) / 0.06 ** 2 - 1.0)
    return _smooth_min(parts, 0.3)


def blended_surface_cloud(size: int = 300, seed: int = 0, handle: bool = True) -> PointCloud:
    """Seeded samples projected onto the blended surface with Newton steps along the gradient."""
    rng = np.random.default_rng(seed)
    accepted: List[np.ndarray] = []
    h = 1e-6
    while sum(len(a) for a in accepted) < size:
        x = rng.uniform(-0.95, 0.95, (4 * size, 3)) * np.array([1.0, 0.7, 0.55])
        for _ in range(30):
            f = blended_surface(x, handle)
            grad = np.column_stack([
                (blended_surface(x + h * e, handle) - blended_surface(x - h * e, handle)) / (2 * h)
                for e in np.eye(3)
            ])
            x = x - (f / np.maximum(np.sum(grad ** 2, axis=1), 1e-12))[:, None] * grad
        ok = (np.abs(blended_surface(x, handle)) < 1e-8) & (np.linalg.norm(x, axis=1) < 0.97)
        accepted.append(x[ok])
    return PointCloud(np.vstack(accepted)[:size])


def unit_disk_container(dimension: int = 2) -> Polynomial:
    return norm_squared(dimension) - 1.0


def torus_container() -> Polynomial:
    """c(x) = (||x||^2 + 1)^3 - 10 (x1^2 + x2^2)(x3^2 + 1)."""
    x1, x2, x3 = (Polynomial.variable(3, i) for i in range(3))
    return (norm_squared(3) + 1.0) ** 3 - 10.0 * (x1 * x1 + x2 * x2) * (x3 * x3 + 1.0)


def disk(center: Tuple[float, float], radius: float = DISK_RADIUS) -> Polynomial:
    x1, x2 = Polynomial.variable(2, 0), Polynomial.variable(2, 1)
    return (x1 - center[0]) ** 2 + (x2 - center[1]) ** 2 - radius ** 2


def crisp_packet() -> Polynomial:
    """Superellipse (u/0.62)^4 + (v/0.25)^4 - 1."""
    u, v = Polynomial.variable(2, 0), Polynomial.variable(2, 1)
    return (u * (1 / 0.62)) ** 4 + (v * (1 / 0.25)) ** 4 - 1.0


def _disk_objects() -> List[SceneObject]:
    identity = AffineTransform.identity(2)
    centers = [(0.75, 0.0), (-0.75, 0.0), (0.0, 0.75), (0.0, -0.75)]
    return [SceneObject(f"disk{k + 1}", disk(c), identity) for k, c in enumerate(centers)]


def scene_ex4(rotation: float, degree: int = 8) -> Scene:
    crisp = SceneObject("crisp", crisp_packet(), AffineTransform.placement(rotation_2d(rotation), (0.0, 0.0)))
    return Scene(unit_disk_container(), [crisp] + _disk_objects(), degree)


def scene_ex4_disks(degree: int = 4) -> Scene:
    return Scene(unit_disk_container(), _disk_objects(), degree)


def scene_two_disks(first: Tuple[float, float], second: Tuple[float, float], degree: int = 4) -> Scene:
    identity = AffineTransform.identity(2)
    objects = [SceneObject("disk1", disk(first), identity), SceneObject("disk2", disk(second), identity)]
    return Scene(unit_disk_container(), objects, degree)


def _ball_objects(shape: Polynomial, centers: List[Tuple[float, float, float]], prefix: str) -> List[SceneObject]:
    domain = norm_squared(3) - 1.0
    return [
        SceneObject(f"{prefix}{k + 1}", shape, AffineTransform.placement(None, c, EX3_SCALE), domain)
        for k, c in enumerate(centers)
    ]


def scene_ex3_balls(moved: bool = False, degree: int = 8) -> Scene:
    """Two unit balls scaled by 1/3 in the torus: centres (+-0.8, 0, 0), or (1, 1, 0) for the first when moved."""
    centers = [(1.0, 1.0, 0.0) if moved else (0.8, 0.0, 0.0), (-0.8, 0.0, 0.0)]
    return Scene(torus_container(), _ball_objects(norm_squared(3) - 1.0, centers, "ball"), degree)


def teapot_polynomial(seed: int = 0, size: int = 300, degree: int = 6) -> Polynomial:
    """Shape learned at degree 6 from the blended-surface cloud inside [-1, 1]^3."""
    cloud = blended_surface_cloud(size, seed)
    model = learn_shape(cloud, LearnConfig(degree=degree, box=Box.cube(-1.0, 1.0, 3)))
    return model.polynomial


def scene_ex3(corrected: bool, seed: int = 0, size: int = 300, degree: int = 8) -> Scene:
    centers = EX3_CORRECTED_CENTERS if corrected else EX3_INITIAL_CENTERS
    shape = teapot_polynomial(seed, size)
    return Scene(torus_container(), _ball_objects(shape, centers, "teapot"), degree)


def ground_truth(scene: Scene, seed: int = 0) -> str:
    """'incorrect' when a high-budget oracle finds any violation, 'correct' otherwise."""
    budget = OracleBudget(grid_resolution=400 if scene.dimension == 2 else 60, random_samples=50000, seed=seed)
    for constraint_id in scene.constraint_ids():
        if find_counterexample(scene, constraint_id, budget) is not None:
            return "incorrect"
    return "correct"


def build_cloud(spec: FixtureSpec) -> PointCloud:
    builders: Dict[str, Callable[..., PointCloud]] = {
        "circle_cloud": circle_cloud,
        "annulus_cloud": annulus_cloud,
        "sphere_cloud": sphere_cloud,
        "blended_surface_cloud": blended_surface_cloud,
        "star_cloud": star_cloud,
        "two_cluster_cloud": two_cluster_cloud,
    }
    builder = builders[spec.kind]
    return builder(spec.size, spec.seed) if spec.size is not None else builder(seed=spec.seed)


def build_scene(spec: FixtureSpec) -> Scene:
    kind = spec.kind
    if kind == "scene_ex3_initial":
        return scene_ex3(False, spec.seed, spec.size or 300)
    if kind == "scene_ex3_corrected":
        return scene_ex3(True, spec.seed, spec.size or 300)
    if kind == "scene_ex3_balls":
        return scene_ex3_balls()
    if kind == "scene_ex3_balls_moved":
        return scene_ex3_balls(moved=True)
    if kind == "scene_ex4_initial":
        return scene_ex4(0.0)
    if kind == "scene_ex4_corrected":
        return scene_ex4(math.pi / 4)
    if kind == "scene_ex4_disks":
        return scene_ex4_disks()
    if kind == "disks_disjoint":
        return scene_two_disks((-0.3, 0.0), (0.3, 0.0))
    return scene_two_disks((0.1, 0.0), (0.4, 0.0))


def generate(spec: FixtureSpec, out_dir: Path) -> List[Path]:
    """Write the fixture into out_dir and return the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if spec.kind in CLOUD_KINDS:
        path = out_dir / f"{spec.kind}.csv"
        save_points_csv(build_cloud(spec).points, path)
        logger.log_event("fixture_written", kind=spec.kind, path=str(path))
        return [path]
    scene = build_scene(spec)
    scene.ground_truth = ground_truth(scene, spec.seed)
    path = out_dir / f"{spec.kind}.json"
    save_scene(scene, path)
    logger.log_event("fixture_written", kind=spec.kind, path=str(path), ground_truth=scene.ground_truth)
    return [path]
