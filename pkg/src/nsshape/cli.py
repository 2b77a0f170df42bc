"""Command-line batch front end.

Subcommands:
    solve     forward flow solve with optional VTK snapshots
    optimize  donor solve plus gradient-descent shape recovery
    verify    adjoint-versus-finite-difference probe battery
    mms       manufactured-solution convergence study

Every subcommand reads one INI configuration file with sections
[problem], [mesh], [optimizer] and [output], ``key = value`` lines and
``#`` comments.  Unknown sections or keys, missing files and
out-of-range values are rejected at parse time.

Exit codes: 0 success, 1 configuration error, 2 solver failure,
3 morph retries exhausted, 4 verification below threshold.
"""

import argparse
import configparser
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adjoint import TRACKING, VORTICITY, TargetField
from .benchmark import rotating_outer_bc, tracking_body_force
from .errors import (ConfigError, MeshError, MorphExhaustedError,
                     NonlinearDivergenceError, SingularMatrixError,
                     VerificationError)
from .fem import TaylorHoodSpace
from .forward import ProblemConfig, kinetic_energy, solve_forward
from .mesh import (TriMesh, circle_boundary, ellipse_boundary,
                   generate_annulus_mesh, generate_square_mesh, load_mesh,
                   save_mesh, warp_to_circle)
from .optimize import StepController, run
from .verify import (MMS_PRESSURE_ORDER_FLOOR, MMS_VELOCITY_ORDER_FLOOR,
                     manufactured_convergence, run_battery)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_MORPH = 3
EXIT_VERIFY = 4

# analytic fields selectable by name; force factories take alpha
BODY_FORCES = {"zero": None, "swirl_force": tracking_body_force}
OUTER_BCS = {"zero": None, "rotating_bc": rotating_outer_bc}

_SECTIONS = ("problem", "mesh", "optimizer", "output")
_MESH_SOURCES = {
    "file": {"path"},
    "annulus": {"outer_radius", "obstacle_radius", "edge_length"},
    "ellipse": {"outer_radius", "semi_axis_a", "semi_axis_b", "edge_length"},
    "square": {"divisions"},
}
_PROBLEM_KEYS = {"alpha", "dt", "t_final", "body_force", "outer_bc",
                 "linearization", "max_nonlinear_iter", "nonlinear_tol"}
_OPTIMIZER_KEYS = {"cost", "iterations", "step", "shrink", "growth",
                   "alignment", "max_retries", "donor_path", "target_radius"}
_OUTPUT_KEYS = {"directory", "snapshots"}


@dataclass
class RunConfig:
    """Validated contents of one configuration file."""

    subcommand: str
    problem: ProblemConfig | None
    mesh_spec: dict | None
    cost: str
    iterations: int
    controller: StepController | None
    donor_path: Path | None
    target_radius: float
    out_dir: Path
    snapshots: int


def _check_keys(name, items, allowed):
    unknown = sorted(set(items) - set(allowed))
    if unknown:
        raise ConfigError(f"[{name}] has unknown key {unknown[0]!r}")


def _typed(name, items):
    def get(key, conv, default=None, required=False):
        if key not in items:
            if required:
                raise ConfigError(f"[{name}] is missing required key "
                                  f"{key!r}")
            return default
        raw = items[key]
        try:
            return conv(raw)
        except ValueError:
            raise ConfigError(f"[{name}] {key} = {raw!r} is not a valid "
                              f"{conv.__name__}") from None
    return get


def _positive(value, dotted):
    if value is None or value <= 0.0:
        raise ConfigError(f"{dotted} must be positive, got {value}")
    return value


def _parse_problem(parser):
    items = dict(parser.items("problem"))
    _check_keys("problem", items, _PROBLEM_KEYS)
    get = _typed("problem", items)
    alpha = get("alpha", float, required=True)
    kwargs = {"alpha": alpha, "dt": get("dt", float, required=True),
              "t_final": get("t_final", float, required=True)}
    force = get("body_force", str, default="zero")
    if force not in BODY_FORCES:
        raise ConfigError(f"[problem] body_force must be one of "
                          f"{sorted(BODY_FORCES)}, got {force!r}")
    if BODY_FORCES[force] is not None:
        kwargs["body_force"] = BODY_FORCES[force](alpha)
    bc = get("outer_bc", str, default="zero")
    if bc not in OUTER_BCS:
        raise ConfigError(f"[problem] outer_bc must be one of "
                          f"{sorted(OUTER_BCS)}, got {bc!r}")
    if OUTER_BCS[bc] is not None:
        kwargs["outer_bc"] = OUTER_BCS[bc]
    for key, conv in (("linearization", str), ("max_nonlinear_iter", int),
                      ("nonlinear_tol", float)):
        val = get(key, conv, default=None)
        if val is not None:
            kwargs[key] = val
    return ProblemConfig(**kwargs)


def _parse_mesh(parser, base):
    items = dict(parser.items("mesh"))
    get = _typed("mesh", items)
    source = get("source", str, required=True)
    if source not in _MESH_SOURCES:
        raise ConfigError(f"[mesh] source must be one of "
                          f"{sorted(_MESH_SOURCES)}, got {source!r}")
    _check_keys("mesh", items, {"source"} | _MESH_SOURCES[source])
    spec = {"source": source}
    if source == "file":
        path = base / get("path", str, required=True)
        if not path.is_file():
            raise ConfigError(f"[mesh] path {path} does not exist")
        spec["path"] = path
    elif source == "square":
        n = get("divisions", int, required=True)
        if n < 1:
            raise ConfigError("[mesh] divisions must be >= 1")
        spec["divisions"] = n
    else:
        outer = _positive(get("outer_radius", float, required=True),
                          "mesh.outer_radius")
        spec["outer_radius"] = outer
        spec["edge_length"] = _positive(
            get("edge_length", float, required=True), "mesh.edge_length")
        if source == "annulus":
            radius = _positive(get("obstacle_radius", float, required=True),
                               "mesh.obstacle_radius")
            if radius >= outer:
                raise ConfigError("[mesh] obstacle_radius must be smaller "
                                  "than outer_radius")
            spec["obstacle_radius"] = radius
        else:
            a = _positive(get("semi_axis_a", float, required=True),
                          "mesh.semi_axis_a")
            b = _positive(get("semi_axis_b", float, required=True),
                          "mesh.semi_axis_b")
            if max(a, b) >= outer:
                raise ConfigError("[mesh] semi-axes must be smaller than "
                                  "outer_radius")
            spec["semi_axis_a"], spec["semi_axis_b"] = a, b
    return spec


def _parse_optimizer(parser, base):
    if not parser.has_section("optimizer"):
        return TRACKING, 30, None, None, 0.2
    items = dict(parser.items("optimizer"))
    _check_keys("optimizer", items, _OPTIMIZER_KEYS)
    get = _typed("optimizer", items)
    cost = get("cost", str, default=TRACKING)
    if cost not in (TRACKING, VORTICITY):
        raise ConfigError(f"[optimizer] cost must be {TRACKING!r} or "
                          f"{VORTICITY!r}, got {cost!r}")
    iterations = get("iterations", int, default=30)
    if iterations < 1:
        raise ConfigError("[optimizer] iterations must be >= 1")
    ctrl = {}
    for key, conv in (("step", float), ("shrink", float), ("growth", float),
                      ("alignment", float), ("max_retries", int)):
        val = get(key, conv, default=None)
        if val is not None:
            ctrl[key] = val
    controller = StepController(**ctrl) if ctrl else None
    donor_path = None
    donor = get("donor_path", str, default=None)
    if donor is not None:
        donor_path = base / donor
        if not donor_path.is_file():
            raise ConfigError(f"[optimizer] donor_path {donor_path} does "
                              f"not exist")
    radius = _positive(get("target_radius", float, default=0.2),
                       "optimizer.target_radius")
    return cost, iterations, controller, donor_path, radius


def _parse_output(parser):
    if not parser.has_section("output"):
        return Path("out"), 0
    items = dict(parser.items("output"))
    _check_keys("output", items, _OUTPUT_KEYS)
    get = _typed("output", items)
    snapshots = get("snapshots", int, default=0)
    if snapshots < 0:
        raise ConfigError("[output] snapshots must be >= 0")
    return Path(get("directory", str, default="out")), snapshots


_REQUIRED_SECTIONS = {"solve": ("problem", "mesh"),
                      "optimize": ("problem", "mesh"),
                      "verify": (), "mms": ()}


def parse_config(path, subcommand="optimize") -> RunConfig:
    """Read and validate one INI configuration file.

    Every referenced file must exist and every value must be in range;
    keys outside the documented schema are errors.
    """
    if subcommand not in _REQUIRED_SECTIONS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                       inline_comment_prefixes=("#",))
    try:
        parser.read_string(path.read_text())
    except configparser.Error as err:
        raise ConfigError(f"malformed config file {path}: {err}") from None
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
    for section in _REQUIRED_SECTIONS[subcommand]:
        if not parser.has_section(section):
            raise ConfigError(f"{subcommand} requires a [{section}] section")

    problem = (_parse_problem(parser) if parser.has_section("problem")
               else None)
    mesh_spec = (_parse_mesh(parser, path.parent)
                 if parser.has_section("mesh") else None)
    cost, iterations, controller, donor_path, radius = _parse_optimizer(
        parser, path.parent)
    out_dir, snapshots = _parse_output(parser)
    return RunConfig(subcommand=subcommand, problem=problem,
                     mesh_spec=mesh_spec, cost=cost, iterations=iterations,
                     controller=controller, donor_path=donor_path,
                     target_radius=radius, out_dir=out_dir,
                     snapshots=snapshots)


def build_mesh(spec: dict) -> TriMesh:
    source = spec["source"]
    if source == "file":
        return load_mesh(spec["path"])
    if source == "square":
        return generate_square_mesh(spec["divisions"])
    if source == "annulus":
        inner = circle_boundary(spec["obstacle_radius"])
    else:
        inner = ellipse_boundary(spec["semi_axis_a"], spec["semi_axis_b"])
    return generate_annulus_mesh(spec["outer_radius"], inner,
                                 spec["edge_length"])


def write_vtk(mesh: TriMesh, velocity, pressure, path) -> None:
    """Write one flow state as a VTK legacy ASCII snapshot.

    Vertex data only: the vertex coefficients of the quadratic velocity
    are its nodal values, and the linear pressure is nodal already.
    Values carry 9 significant digits so identical states produce
    byte-identical files.
    """
    u = np.asarray(velocity, dtype=float).ravel()
    p = np.asarray(pressure, dtype=float).ravel()
    n = mesh.n_nodes
    half = u.size // 2
    if u.size % 2 or half < n or p.size < n:
        raise ValueError("velocity/pressure vectors do not fit the mesh")
    lines = ["# vtk DataFile Version 3.0", "flow state", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {n} float"]
    lines += [f"{x:.9g} {y:.9g} 0" for x, y in mesh.nodes]
    m = mesh.n_triangles
    lines.append(f"CELLS {m} {4 * m}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {m}")
    lines += ["5"] * m
    lines += [f"POINT_DATA {n}", "VECTORS velocity float"]
    lines += [f"{a:.9g} {b:.9g} 0" for a, b in zip(u[:n], u[half:half + n])]
    lines += ["SCALARS pressure float 1", "LOOKUP_TABLE default"]
    lines += [f"{v:.9g}" for v in p[:n]]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _cmd_solve(rc: RunConfig) -> int:
    mesh = build_mesh(rc.mesh_spec)
    rc.out_dir.mkdir(parents=True, exist_ok=True)
    state = solve_forward(TaylorHoodSpace(mesh), rc.problem)
    last = state.n_levels - 1
    for k in range(state.n_levels):
        if k == last or (rc.snapshots > 0 and k % rc.snapshots == 0):
            write_vtk(mesh, state.velocities[k], state.pressures[k],
                      rc.out_dir / f"state_{k:04d}.vtk")
    print(f"solve: {state.n_levels} time levels on {mesh.n_nodes} nodes, "
          f"final kinetic energy {kinetic_energy(state, last):.6e}")
    return EXIT_OK


def _cmd_optimize(rc: RunConfig) -> int:
    mesh0 = build_mesh(rc.mesh_spec)
    rc.out_dir.mkdir(parents=True, exist_ok=True)
    target = None
    if rc.cost == TRACKING:
        donor = (load_mesh(rc.donor_path) if rc.donor_path is not None
                 else warp_to_circle(mesh0, rc.target_radius))
        save_mesh(donor, rc.out_dir / "donor_mesh.txt")
        donor_state = solve_forward(TaylorHoodSpace(donor), rc.problem)
        target = TargetField.from_trajectory(donor_state)

    writer = None
    if rc.snapshots > 0:
        cadence = rc.snapshots

        def writer(out, k, space, state):
            if k % cadence == 0:
                write_vtk(space.mesh, state.velocities[-1],
                          state.pressures[-1],
                          Path(out) / f"state_{k:04d}.vtk")

    final_mesh, records = run(mesh0, rc.problem, rc.cost, rc.iterations,
                              rc.out_dir, target=target,
                              controller=rc.controller,
                              snapshot_writer=writer)
    print(f"optimize: {len(records)} iterations, J {records[0].J:.6e} -> "
          f"{records[-1].J:.6e}, last gradient norm "
          f"{records[-1].grad_norm:.3e}")
    return EXIT_OK


def _cmd_verify(rc: RunConfig) -> int:
    rc.out_dir.mkdir(parents=True, exist_ok=True)
    report = run_battery(csv_path=rc.out_dir / "gradient_check.csv")
    for lvl in report.levels:
        print(f"verify: h={lvl.h:g} nodes={lvl.n_nodes} worst rel err "
              f"tracking {lvl.tracking_max:.4f} vorticity "
              f"{lvl.vorticity_max:.4f}")
    print(f"verify: {'PASS' if report.passed() else 'FAIL'}")
    return EXIT_OK if report.passed() else EXIT_VERIFY


def _cmd_mms(rc: RunConfig) -> int:
    report = manufactured_convergence()
    for lvl in report.levels:
        print(f"mms: h={lvl.h:g} dt={lvl.dt:g} velocity error "
              f"{lvl.velocity_error:.4e} pressure error "
              f"{lvl.pressure_error:.4e}")
    ok = (report.velocity_order >= MMS_VELOCITY_ORDER_FLOOR
          and report.pressure_order >= MMS_PRESSURE_ORDER_FLOOR)
    print(f"mms: observed orders velocity {report.velocity_order:.3f} "
          f"pressure {report.pressure_order:.3f} "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


_DISPATCH = {"solve": _cmd_solve, "optimize": _cmd_optimize,
             "verify": _cmd_verify, "mms": _cmd_mms}


def _parse_args(argv):
    ap = argparse.ArgumentParser(
        prog="nsshape",
        description="Flow solves, shape optimization and solver "
                    "verification on 2D triangular meshes.")
    sub = ap.add_subparsers(dest="subcommand", required=True)
    helps = {"solve": "forward flow solve",
             "optimize": "gradient-descent shape recovery",
             "verify": "adjoint vs finite-difference battery",
             "mms": "manufactured-solution convergence study"}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="INI configuration")
        p.add_argument("--out", default=None,
                       help="output directory (overrides [output])")
        p.add_argument("--snapshots", type=int, default=None,
                       help="snapshot cadence (overrides [output])")
    return ap.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = _parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        rc = parse_config(args.config, args.subcommand)
        if args.out is not None:
            rc.out_dir = Path(args.out)
        if args.snapshots is not None:
            if args.snapshots < 0:
                raise ConfigError("--snapshots must be >= 0")
            rc.snapshots = args.snapshots
        return _DISPATCH[args.subcommand](rc)
    except (ConfigError, MeshError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonlinearDivergenceError, SingularMatrixError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_SOLVER
    except MorphExhaustedError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MORPH
    except VerificationError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
