"""Command-line entry point: ``pdsub <command> --out-dir DIR [options]``.

Every command writes its outputs into ``--out-dir`` together with
``run_config.txt``, the fully resolved parameters as ``key = value`` lines. That
file can be passed back with ``--config`` to repeat the run; options given on the
command line override values from the file. Logs go to stderr, data only to files.

Exit codes: 0 success, 1 usage or configuration error, 2 data error (unreadable
or malformed input, oversize input for an in-core baseline), 3 internal error.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import analysis, baselines, scan_sim
from .core import PointCloud
from .cost import CostConfig, CostKind, YukselParams
from .decimator import decimate, resume, target_count
from .errors import ConfigError, DataError, InvariantViolation, MemoryBudgetError
from .ply import read_header, read_ply, write_ply
from .voxel_store import VoxelStore

log = logging.getLogger("pdsub")

RUN_CONFIG = "run_config.txt"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
# options that describe how a command is invoked rather than what it computes
_NOT_ECHOED = {"config", "func", "log_level"}


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config files -------------------------------------------------------------

def read_config(path) -> dict:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return " ".join(_format_value(v) for v in value)
    return str(value)


def write_run_config(out_dir: str, command: str, args: argparse.Namespace):
    items = {k: v for k, v in vars(args).items() if k not in _NOT_ECHOED and v is not None}
    with open(os.path.join(out_dir, RUN_CONFIG), "w") as f:
        f.write(f"# pdsub {command}\n")
        for key in sorted(items):
            # "lambda" is the option name users type; it is stored as ``lam``
            name = "lambda" if key == "lam" else key
            f.write(f"{name} = {_format_value(items[key])}\n")


# -- argument types -------------------------------------------------------------

def _floats(text: str) -> list:
    try:
        return [float(v) for v in str(text).replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _mb(value: Optional[float]) -> Optional[int]:
    return None if value is None else int(value * (1 << 20))


# -- commands -------------------------------------------------------------------

def cmd_simulate(args) -> None:
    if args.mesh:
        mesh = scan_sim.read_obj(args.mesh)
    else:
        mesh = scan_sim.make_cube_mesh(args.cube_side, inward=True)
    if args.poses:
        poses = scan_sim.read_poses(args.poses)
    else:
        # uniform positions inside the mesh bounding box, kept off the walls
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
        margin = np.minimum(args.margin, (hi - lo) / 2)
        rng = np.random.default_rng(args.seed)
        poses = [tuple(p) for p in rng.uniform(lo + margin, hi - margin, size=(args.n_poses, 3))]
    if not poses:
        raise UsageError("at least one scanner pose is required")
    if args.step_deg is not None:
        step = math.radians(args.step_deg)
    else:
        step = math.sqrt(2.0 * math.pi * math.pi / (args.points / len(poses)))
    specs = [scan_sim.ScannerSpec(p, step, step, (-math.pi / 2, math.pi / 2), args.sigma,
                                  args.max_range if args.max_range else math.inf, args.seed * 1000 + i)
             for i, p in enumerate(poses)]
    parts = []
    with open(os.path.join(args.out_dir, "scan_stats.txt"), "w") as f:
        f.write("pose x y z rays hits\n")
        for i, spec in enumerate(specs):
            part = scan_sim.scan(mesh, spec)
            parts.append(part)
            x, y, z = spec.position
            f.write(f"{i} {x!r} {y!r} {z!r} {spec.ray_count} {len(part)}\n")
    cloud = PointCloud.concatenate(parts, renumber=True)
    write_ply(os.path.join(args.out_dir, "cloud.ply"), cloud, ids=True)
    scan_sim.write_poses(os.path.join(args.out_dir, "poses.txt"), poses)
    log.info("simulated %d points from %d poses", len(cloud), len(poses))


def cmd_voxelize(args) -> None:
    store = VoxelStore.build(args.input, args.voxel_size, os.path.join(args.out_dir, "store"))
    m = store.manifest
    log.info("voxelized %d points into %d voxels", m.total_points, len(m))


def _cost_config(args) -> CostConfig:
    kind = CostKind.parse(args.cost)
    yk = YukselParams(args.alpha, args.beta, args.gamma, args.lam)
    return CostConfig(kind, args.k, args.epsilon_d, args.sigma_c, yk)


def cmd_decimate(args) -> None:
    if bool(args.input) == bool(args.store):
        raise UsageError("give exactly one of --input (a PLY cloud) or --store (an existing store)")
    if args.budget_mb is not None:
        log.info("--budget-mb only applies to in-core baselines; use --working-set-mb for decimation")
    if args.store:
        store = VoxelStore.open(args.store)
    else:
        if args.voxel_size is None:
            raise UsageError("--voxel-size is required with --input")
        store = VoxelStore.build(args.input, args.voxel_size, os.path.join(args.out_dir, "store"))
    budget = _mb(args.working_set_mb)
    if args.resume:
        report = resume(store)
    else:
        report = decimate(store, args.lam, _cost_config(args), k=args.k, b=args.buffer, seed=args.seed,
                          memory_budget=budget, workers=args.threads, audit=args.audit)
    store.export(os.path.join(args.out_dir, "decimated.ply"), ids=True)
    with open(os.path.join(args.out_dir, "report.txt"), "w") as f:
        f.write(report.to_text(timings=False))
    log.info("wall time per iteration: %s", " ".join(f"{t:.3f}" for t in report.wall_time_per_iteration))
    log.info("kept %d of %d points in %d iteration(s)", report.final_count, report.original_count,
             report.iterations)


def _load_in_core(path: str, budget: Optional[int]) -> PointCloud:
    if budget is not None:
        header = read_header(path)
        size = header.count * (8 + 24 + (12 if header.has_normals else 0) + (3 if header.has_colors else 0))
        if size > budget:
            raise MemoryBudgetError(f"{path}: {header.count} points ({size} bytes) exceed the in-core "
                                    f"budget of {budget} bytes; raise --budget-mb")
    return read_ply(path)


def cmd_baseline(args) -> None:
    budget = _mb(args.budget_mb)
    cloud = _load_in_core(args.input, budget)
    name = args.method
    if name == "yuksel":
        if args.lam is None:
            raise UsageError("yuksel needs --lambda")
        result = baselines.yuksel_eliminate(cloud, args.lam, args.alpha, args.beta, args.gamma,
                                            memory_budget=budget)
    elif name == "dart":
        if args.lam is None:
            raise UsageError("dart needs --lambda")
        result = baselines.dart_throwing(cloud, args.lam, args.seed, args.tolerance)
    else:
        radius = args.radius
        if radius is None:
            if args.lam is None or args.surface_area is None:
                raise UsageError(f"{name} needs --radius, or --lambda with --surface-area")
            radius = baselines.corsini_radius(args.surface_area, target_count(args.lam, len(cloud)))
        result = baselines.random_purge(cloud, radius, args.seed)
        result.parameters["method"] = name
    out = result.select(cloud)
    write_ply(os.path.join(args.out_dir, f"{name}.ply"), out, ids=True)
    with open(os.path.join(args.out_dir, "report.txt"), "w") as f:
        f.write(f"achieved_count: {result.achieved_count}\n")
        for key in sorted(result.parameters):
            f.write(f"{key}: {_format_value(result.parameters[key])}\n")
    log.info("%s kept %d of %d points", name, result.achieved_count, len(cloud))


def _named_inputs(items: Sequence[str]) -> list:
    out = []
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = os.path.splitext(os.path.basename(item))[0], item
        out.append((name, path))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise UsageError("input names must be unique; use name=path")
    return out


def cmd_analyze(args) -> None:
    inputs = _named_inputs(args.input)
    clouds = [(name, read_ply(path)) for name, path in inputs]
    if args.areas is not None:
        areas = np.asarray(args.areas, dtype=np.float64)
    elif args.spacing is not None:
        areas = analysis.area_grid(args.spacing, args.area_count)
    elif args.surface_area is not None:
        areas = analysis.area_grid(analysis.surface_spacing(args.surface_area, len(clouds[0][1])),
                                   args.area_count)
    else:
        areas = analysis.default_areas(clouds[0][1], args.area_count)
    profiles = {}
    for name, cloud in clouds:
        prof = analysis.density_profile(cloud, areas, args.sample_size, args.seed)
        prof.write_csv(os.path.join(args.out_dir, f"profile_{name}.csv"))
        profiles[name] = prof
        log.info("%s: slope %.6g R^2 %.6f RMSE %.6g", name, prof.slope, prof.r_squared, prof.rmse)
        if args.density_radius is not None:
            dens = analysis.local_density_map(cloud, args.density_radius)
            write_ply(os.path.join(args.out_dir, f"density_{name}.ply"), cloud, ids=True,
                      extra={"density": dens.astype(np.float32)})
    if len(profiles) > 1:
        cmp = analysis.compare_profiles(profiles)
        with open(os.path.join(args.out_dir, "comparison.csv"), "w") as f:
            f.write(cmp.to_csv())
        with open(os.path.join(args.out_dir, "comparison.txt"), "w") as f:
            f.write(cmp.to_table())


def cmd_export(args) -> None:
    store = VoxelStore.open(args.store)
    store.export(os.path.join(args.out_dir, args.name), ids=True)
    log.info("exported %d points", store.manifest.total_points)


# -- parser ---------------------------------------------------------------------

def _cost_options(p):
    p.add_argument("--k", type=int, default=6, help="neighbors summed into the cost")
    p.add_argument("--alpha", type=float, default=8.0)
    p.add_argument("--beta", type=float, default=0.65)
    p.add_argument("--gamma", type=float, default=1.5)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out-dir", required=True, help="directory for every output of the run")
    common.add_argument("--config", help="key = value file; command-line options take precedence")
    common.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    common.add_argument("--threads", type=int, default=1, help="threads for neighbor searches")
    common.add_argument("--budget-mb", type=float, help="memory cap for in-core baselines")
    common.add_argument("--seed", type=int, default=0)

    parser = _Parser(prog="pdsub", description="Out-of-core Poisson-disk subsampling of point clouds.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="simulate terrestrial scans of a mesh")
    p.add_argument("--mesh", help="triangle mesh (OBJ); default is a cube scanned from inside")
    p.add_argument("--cube-side", type=float, default=10.0)
    p.add_argument("--poses", help="file with one 'x y z' scanner position per line")
    p.add_argument("--n-poses", type=int, default=8, help="random poses when --poses is not given")
    p.add_argument("--margin", type=float, default=1.5, help="distance of random poses from the walls")
    p.add_argument("--points", type=int, default=50_000, help="approximate total ray count")
    p.add_argument("--step-deg", type=float, help="angular step; overrides --points")
    p.add_argument("--sigma", type=float, default=scan_sim.DEFAULT_RANGE_SIGMA, help="range noise (m)")
    p.add_argument("--max-range", type=float, default=0.0, help="0 for unlimited")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("voxelize", parents=[common], help="partition a PLY cloud into a voxel store")
    p.add_argument("--input", required=True)
    p.add_argument("--voxel-size", type=float, required=True)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("decimate", parents=[common], help="decimate to floor(lambda * n) points")
    p.add_argument("--input", help="PLY cloud, voxelized into <out-dir>/store")
    p.add_argument("--store", help="existing voxel store, decimated in place")
    p.add_argument("--voxel-size", type=float)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1, help="fraction of points kept")
    p.add_argument("--cost", default="knn", choices=[c.value for c in CostKind])
    p.add_argument("--buffer", type=int, default=8, help="extra buffered neighbors b")
    p.add_argument("--epsilon-d", type=float, default=1e-6)
    p.add_argument("--sigma-c", type=float, default=0.2)
    _cost_options(p)
    p.add_argument("--working-set-mb", type=float, help="page neighbor caches to disk under this budget")
    p.add_argument("--audit", type=_bool, nargs="?", const=True, default=False,
                   help="log every removal to <store>/audit.log")
    p.add_argument("--resume", type=_bool, nargs="?", const=True, default=False,
                   help="continue from the store's checkpoint")
    p.set_defaults(func=cmd_decimate)

    p = sub.add_parser("baseline", parents=[common], help="run an in-core reference subsampler")
    p.add_argument("method", choices=["yuksel", "dart", "corsini", "random"])
    p.add_argument("--input", required=True)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--radius", type=float, help="disk radius for corsini/random")
    p.add_argument("--surface-area", type=float, help="sampled area, to derive the corsini radius")
    p.add_argument("--tolerance", type=float, default=baselines.DEFAULT_TOLERANCE)
    _cost_options(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("analyze", parents=[common], help="density profiles and method ranking")
    p.add_argument("--input", required=True, nargs="+", help="PLY files, optionally as name=path")
    p.add_argument("--areas", type=_floats, help="explicit comma-separated area grid (m^2)")
    p.add_argument("--spacing", type=float, help="point spacing defining the area grid")
    p.add_argument("--surface-area", type=float, help="sampled area; spacing is sqrt(area / n)")
    p.add_argument("--area-count", type=int, default=analysis.DEFAULT_AREA_COUNT)
    p.add_argument("--sample-size", type=int, default=analysis.DEFAULT_SAMPLE_SIZE)
    p.add_argument("--density-radius", type=float, help="also write a per-point density PLY")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("export", parents=[common], help="write a voxel store as one PLY file")
    p.add_argument("--store", required=True)
    p.add_argument("--name", default="cloud.ply")
    p.set_defaults(func=cmd_export)
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config = pre.parse_known_args(argv)[0].config
    commands = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in commands), None)
    if config and command:
        values = read_config(config)
        values.pop("command", None)
        if "lambda" in values:
            values["lam"] = values.pop("lambda")
        sub = commands[command]
        actions = {a.dest: a for a in sub._actions}
        unknown = sorted(set(values) - set(actions))
        if unknown:
            raise UsageError(f"{config}: unknown keys {', '.join(unknown)}")
        for key, value in values.items():
            action = actions[key]
            action.required = False
            if action.nargs in ("+", "*"):
                values[key] = value.split()
        # string defaults go through each option's type when parsing
        sub.set_defaults(**values)
    return parser.parse_args(argv)


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"pdsub: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(stream=sys.stderr, level=args.log_level.upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        os.makedirs(args.out_dir, exist_ok=True)
        write_run_config(args.out_dir, args.command, args)
        args.func(args)
    except MemoryBudgetError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except InvariantViolation as exc:
        log.error("internal invariant violated: %s", exc)
        return EXIT_INTERNAL
    except Exception:
        log.exception("unexpected failure")
        return EXIT_INTERNAL
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
