"""
Command-line entry point: learn shapes, certify scenes, export boundaries, run the
oracle and generate fixtures. Every command that writes a file also writes
`<out>.manifest.json` with input digests, timings and the resolved configuration.

Exit codes: 0 ok or certified, 1 usage or I/O error, 2 learning failed,
3 refuted (violation found), 4 undecided.
"""

import argparse
import hashlib
import json
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

import numpy as np

from src import __version__
from src.fixtures import CLOUD_KINDS, SCENE_KINDS, FixtureSpec, generate
from src.logger import logger
from src.packcert import (
    CERTIFIED,
    REFUTED,
    Scene,
    SearchRegionError,
    certify_packing,
    find_counterexample,
    load_scene,
    radial_extent,
)
from src.polycore import Box, evaluate_many
from src.settings import OracleBudget, SolverOptions, VerificationTolerances
from src.shapelearn import (
    LearnConfig,
    ShapeLearningError,
    ShapeModel,
    learn_shape,
    load_point_cloud,
    load_shape,
    parse_prior,
    sample_boundary,
    save_shape,
)


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_REFUTED = 3
EXIT_UNDECIDED = 4


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class RunManifest:
    """Reproducibility record written next to every output file."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.config = {k: v for k, v in vars(args).items() if k != "handler"}
        self.inputs: Dict[str, str] = {}
        self.outputs: Dict[str, str] = {}
        self.timings: Dict[str, float] = {}

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - start, 6)

    def add_input(self, path: Path) -> None:
        self.inputs[str(path)] = file_digest(path)

    def add_output(self, path: Path) -> None:
        self.outputs[str(path)] = file_digest(path)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "version": __version__,
            "seed": self.config.get("seed"),
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timings": self.timings,
        }

    def write(self, out: Path) -> Path:
        path = Path(f"{out}.manifest.json")
        write_json(path, self.to_dict())
        return path


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path: Path, data: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False, default=str) + "\n", encoding="utf-8")


def parse_box(text: str, dimension: int) -> Box:
    """'lo,hi' for a cube, or 'lo1,hi1,...,lon,hin' per axis."""
    values = [float(v) for v in text.split(",") if v.strip()]
    if len(values) == 2:
        return Box.cube(values[0], values[1], dimension)
    if len(values) == 2 * dimension:
        return Box(tuple(values[0::2]), tuple(values[1::2]))
    raise UsageError(f"--box needs 2 or {2 * dimension} comma-separated numbers, got '{text}'.")


def solver_options(args: argparse.Namespace) -> SolverOptions:
    base = SolverOptions.from_env().model_dump()
    if getattr(args, "max_iters", None) is not None:
        base["max_iters"] = args.max_iters
    if getattr(args, "backend", None):
        base["backend"] = args.backend
    return SolverOptions(**base)


def oracle_budget(args: argparse.Namespace) -> OracleBudget:
    base = OracleBudget.from_env().model_dump()
    if getattr(args, "grid", None) is not None:
        base["grid_resolution"] = args.grid
    if getattr(args, "samples", None) is not None:
        base["random_samples"] = args.samples
    if getattr(args, "seed", None) is not None:
        base["seed"] = args.seed
    return OracleBudget(**base)


def cmd_learn(args: argparse.Namespace) -> int:
    manifest = RunManifest("learn", args)
    input_path = Path(args.input)
    out = Path(args.out)
    with manifest.phase("load"):
        cloud = load_point_cloud(input_path, args.format)
        manifest.add_input(input_path)
    box = parse_box(args.box, cloud.dimension)
    priors = [parse_prior(text, cloud.dimension) for text in args.prior]
    config = LearnConfig(
        degree=args.degree,
        box=box,
        radius=args.radius,
        margin=args.margin,
        priors=priors,
        domain_radius=args.domain_radius,
    )
    try:
        with manifest.phase("learn"):
            model = learn_shape(cloud, config, solver_options(args))
    except ShapeLearningError as exc:
        logger.log_error(str(exc), {"solver_status": exc.solver_status})
        print(f"Learning failed ({exc.solver_status}): {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    save_shape(model, out)
    manifest.add_output(out)
    manifest.write(out)
    print(f"Shape written to: {out}")
    print(json.dumps({"degree": config.degree, "points": len(cloud), "objective": model.objective}, indent=2))
    return EXIT_OK


def _load_scene(args: argparse.Namespace, manifest: RunManifest) -> Scene:
    path = Path(args.scene)
    with manifest.phase("load"):
        scene = load_scene(path)
        manifest.add_input(path)
    return scene


def cmd_certify(args: argparse.Namespace) -> int:
    manifest = RunManifest("certify", args)
    scene = _load_scene(args, manifest)
    if args.degree is not None:
        scene = scene.with_degree(args.degree)
    if args.gamma_cap is not None:
        scene = scene.with_cap(args.gamma_cap)
    with manifest.phase("certify"):
        report = certify_packing(
            scene,
            parallelism=args.jobs,
            options=solver_options(args),
            tolerances=VerificationTolerances.from_env(),
            budget=oracle_budget(args),
        )
    out = Path(args.out)
    write_json(out, report.to_dict())
    manifest.add_output(out)
    manifest.write(out)
    print(f"Verdict: {report.verdict} (degree {report.degree}, min gamma {report.min_gamma})")
    if report.verdict == CERTIFIED:
        return EXIT_OK
    return EXIT_REFUTED if report.verdict == REFUTED else EXIT_UNDECIDED


def cmd_oracle_check(args: argparse.Namespace) -> int:
    manifest = RunManifest("oracle-check", args)
    scene = _load_scene(args, manifest)
    budget = oracle_budget(args)
    entries: List[Dict[str, Any]] = []
    with manifest.phase("oracle"):
        for constraint_id in scene.constraint_ids():
            try:
                witness = find_counterexample(scene, constraint_id, budget)
            except SearchRegionError as exc:
                logger.log_warning("Oracle skipped", {"constraint": constraint_id, "reason": str(exc)})
                entries.append({"id": constraint_id, "searched": False, "witness": None})
                continue
            entries.append({
                "id": constraint_id,
                "searched": True,
                "witness": witness.tolist() if witness is not None else None,
            })
    violated = [e for e in entries if e["witness"] is not None]
    report = {"violation": bool(violated), "seed": budget.seed, "constraints": entries}
    if args.out:
        out = Path(args.out)
        write_json(out, report)
        manifest.add_output(out)
        manifest.write(out)
    for entry in violated:
        print(f"{entry['id']}: witness {entry['witness']}")
    return EXIT_REFUTED if violated else EXIT_OK


def _scene_boundaries(scene: Scene, resolution: int, seed: int) -> List[tuple]:
    """(label, points) per placed object boundary, then the container boundary."""
    sections = []
    for obj in scene.objects:
        source = obj.F if obj.F is not None else obj.p
        rho = radial_extent(source)
        if rho is None:
            logger.log_warning("Object boundary skipped: unbounded set", {"label": obj.label})
            continue
        local = sample_boundary(ShapeModel(obj.p, rho), resolution, seed)
        if obj.F is not None and len(local):
            local = local[evaluate_many(obj.F, local) <= 0]
        sections.append((obj.label, obj.transform.forward(local) if len(local) else local))
    rho = radial_extent(scene.container_c)
    if rho is None:
        logger.log_warning("Container boundary skipped: unbounded set", {})
    else:
        sections.append(("container", sample_boundary(ShapeModel(scene.container_c, rho), resolution, seed)))
    return sections


def cmd_sample(args: argparse.Namespace) -> int:
    manifest = RunManifest("sample", args)
    out = Path(args.out)
    with manifest.phase("sample"):
        if args.shape:
            path = Path(args.shape)
            model = load_shape(path)
            manifest.add_input(path)
            sections = [(None, sample_boundary(model, args.resolution, args.seed))]
        else:
            sections = _scene_boundaries(_load_scene(args, manifest), args.resolution, args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8", newline="\n") as file:
        for label, points in sections:
            for row in np.atleast_2d(points):
                if not row.size:
                    continue
                values = ",".join(f"{v:.12g}" for v in row)
                file.write(f"{label},{values}\n" if label is not None else f"{values}\n")
    manifest.add_output(out)
    manifest.write(out)
    print(f"Boundary points written to: {out}")
    return EXIT_OK


def cmd_fixtures(args: argparse.Namespace) -> int:
    manifest = RunManifest("fixtures generate", args)
    spec = FixtureSpec(kind=args.kind, seed=args.seed, size=args.size)
    out_dir = Path(args.out)
    try:
        with manifest.phase("generate"):
            paths = generate(spec, out_dir)
    except ShapeLearningError as exc:
        print(f"Fixture shape could not be learned: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    for path in paths:
        manifest.add_output(path)
    manifest.write(out_dir / spec.kind)
    for path in paths:
        print(f"Fixture written to: {path}")
    return EXIT_OK


def _add_solver_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--max-iters", type=int, default=None, help="Interior-point iteration limit.")
    parser.add_argument("--backend", choices=["ipm", "cvxpy"], default=None, help="SDP backend.")


def _add_oracle_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--grid", type=int, default=None, help="Oracle grid nodes per axis.")
    parser.add_argument("--samples", type=int, default=None, help="Oracle random samples per constraint.")
    parser.add_argument("--seed", type=int, default=0, help="Oracle seed (default: 0).")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sublevelpack", description="Learn polynomial shapes and certify packings.")
    parser.add_argument("--version", action="version", version=f"sublevelpack {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    learn = commands.add_parser("learn", help="Learn a sublevel-set shape from a point cloud.")
    learn.add_argument("--input", required=True, help="Point cloud file (CSV or XYZ).")
    learn.add_argument("--format", choices=["csv", "xyz"], default=None, help="Override format detection.")
    learn.add_argument("--degree", type=int, default=6, help="Even polynomial degree (default: 6).")
    learn.add_argument("--box", default="-1,1", help="Integration box: 'lo,hi' or per-axis bounds.")
    learn.add_argument("--radius", type=float, default=None, help="Boundedness ball radius R.")
    learn.add_argument("--domain-radius", type=float, default=None, help="Representation ball radius r.")
    learn.add_argument("--margin", type=float, default=1e-4, help="Point margin epsilon.")
    learn.add_argument("--prior", action="append", default=[], help="symmetry:<spec>, star or convex.")
    learn.add_argument("--out", required=True, help="Shape JSON output path.")
    _add_solver_flags(learn)
    learn.set_defaults(handler=cmd_learn)

    certify = commands.add_parser("certify", help="Certify a packing scene.")
    certify.add_argument("--scene", required=True, help="Scene JSON file.")
    certify.add_argument("--degree", type=int, default=None, help="Override the scene certification degree.")
    certify.add_argument("--gamma-cap", type=float, default=None, help="Override the gamma cap.")
    certify.add_argument("--jobs", type=int, default=1, help="Constraints certified in parallel.")
    certify.add_argument("--oracle-budget", dest="samples", type=int, default=None, help="Oracle random samples.")
    certify.add_argument("--grid", type=int, default=None, help="Oracle grid nodes per axis.")
    certify.add_argument("--seed", type=int, default=0, help="Oracle seed (default: 0).")
    certify.add_argument("--out", required=True, help="Report JSON output path.")
    _add_solver_flags(certify)
    certify.set_defaults(handler=cmd_certify)

    sample = commands.add_parser("sample", help="Export boundary points of a shape or scene.")
    source = sample.add_mutually_exclusive_group(required=True)
    source.add_argument("--shape", help="Shape JSON file.")
    source.add_argument("--scene", help="Scene JSON file.")
    sample.add_argument("--resolution", type=int, default=360, help="Rays (2D) or grid nodes per axis (3D).")
    sample.add_argument("--seed", type=int, default=0)
    sample.add_argument("--out", required=True, help="Boundary CSV output path.")
    sample.set_defaults(handler=cmd_sample)

    oracle = commands.add_parser("oracle-check", help="Search a scene for violations without certificates.")
    oracle.add_argument("--scene", required=True, help="Scene JSON file.")
    oracle.add_argument("--out", default=None, help="Optional report JSON output path.")
    _add_oracle_flags(oracle)
    oracle.set_defaults(handler=cmd_oracle_check)

    fixtures = commands.add_parser("fixtures", help="Deterministic test inputs.")
    fixture_commands = fixtures.add_subparsers(dest="fixtures_command", required=True)
    gen = fixture_commands.add_parser("generate", help="Write one fixture.")
    gen.add_argument("--kind", required=True, choices=sorted(CLOUD_KINDS | SCENE_KINDS))
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--size", type=int, default=None, help="Number of points for cloud kinds.")
    gen.add_argument("--out", required=True, help="Output directory.")
    gen.set_defaults(handler=cmd_fixtures)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except (UsageError, ValueError, OSError) as exc:
        logger.log_error(str(exc), {"argv": list(argv) if argv is not None else sys.argv[1:]})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
