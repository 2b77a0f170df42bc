"""Circle-recovery experiment.

A rotating annular flow is solved on a donor domain whose obstacle is
the circle r = 0.2; the tracking functional then pulls an elliptic
obstacle toward that circle.  The donor mesh is the start mesh warped
onto the target domain, so both discretizations share one far-field
texture and the cost compares obstacle-driven flow differences rather
than mesh artifacts.  Pass thresholds: mean radial deviation down by
at least 80%, max deviation at most 0.05, final cost at most 5% of
the initial cost.  At very low viscosity only cost decrease is
expected.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adjoint import TRACKING, TargetField
from .errors import ConfigError, MorphExhaustedError
from .fem import TaylorHoodSpace
from .forward import ProblemConfig, solve_forward
from .gradient import evaluate_J1
from .mesh import (BoundaryTag, TriMesh, circle_boundary, ellipse_boundary,
                   generate_annulus_mesh, load_mesh, warp_to_circle)
from .optimize import IterationRecord, run

ALPHA_SWEEP = (0.1, 0.01, 0.001)

# recovery thresholds on the obstacle's distance to the target circle
RECOVERY_MEAN_DROP = 0.8
RECOVERY_MAX_DEVIATION = 0.05
COST_DROP = 0.05

# below this viscosity the flow is too weakly damped for a clean
# reconstruction; only cost decrease is enforced
STRICT_ALPHA_FLOOR = 0.01


def rotating_outer_bc(points, t=None):
    """Clockwise solid-body rotation 0.15(y, -x) on the outer circle."""
    return 0.15 * np.stack([points[:, 1], -points[:, 0]], axis=1)


def tracking_body_force(alpha):
    """Rotational driving force with a time-growing swirl component.

    Closes over the viscosity so the same formula serves the whole
    alpha sweep.
    """

    def force(points, t):
        x, y = points[:, 0], points[:, 1]
        r2 = x * x + y * y
        r = np.sqrt(r2)
        ring = -46.0 - 25.0 * r2 - 1.0 / r2 + 12.0 / r + 60.0 * r
        spin = alpha * t * (15.0 * r2 - 1.0) / (5.0 * r2 * r)
        f1 = -45.0 * x / (31.0 * r) + spin * y + t * t * x * ring / 25.0
        f2 = -45.0 * y / (31.0 * r) - spin * x + t * t * y * ring / 25.0
        return np.stack([f1, f2], axis=1)

    return force


def default_mesh_size(alpha: float, t_final: float = 1.0) -> float:
    """Edge length that keeps the outer shear layer resolved.

    The rotating rim drives a layer of thickness ~ sqrt(alpha * T).
    The annulus generator sets its azimuthal count at the obstacle, so
    rim edges come out roughly 1.6x the nominal size for this
    geometry; once the layer gets thinner than a few rim edges, cost
    and gradient evaluations drown in mesh noise.
    """
    layer = np.sqrt(alpha * t_final)
    return 0.11 if layer >= 0.3 else 0.0275


@dataclass(frozen=True)
class BenchmarkSpec:
    """Geometry, flow data and budgets of one recovery experiment."""

    alpha: float = 0.1
    outer_radius: float = 0.8
    target_radius: float = 0.2
    ellipse_axes: tuple = (0.6, 0.4)
    dt: float = 0.05
    t_final: float = 1.0
    iterations: int = 30
    mesh_size: float | None = None

    def __post_init__(self):
        a, b = max(self.ellipse_axes), min(self.ellipse_axes)
        if not 0.0 < self.target_radius < b <= a < self.outer_radius:
            raise ConfigError("geometry must nest: target radius < ellipse "
                              "semi-axes < outer radius")
        if self.alpha <= 0.0 or self.dt <= 0.0 or self.t_final <= 0.0:
            raise ConfigError("alpha, dt and t_final must be positive")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.mesh_size is None:
            object.__setattr__(self, "mesh_size",
                               default_mesh_size(self.alpha, self.t_final))
        if self.mesh_size <= 0.0:
            raise ConfigError("mesh_size must be positive")

    def problem(self) -> ProblemConfig:
        return ProblemConfig(alpha=self.alpha, dt=self.dt,
                             t_final=self.t_final,
                             body_force=tracking_body_force(self.alpha),
                             outer_bc=rotating_outer_bc)

    def target_mesh(self, edge_length: float = 0.07) -> TriMesh:
        """Free-standing mesh of the target domain.

        The default edge length keeps the r = 0.2 loop above the
        generator's minimum node count.
        """
        return generate_annulus_mesh(self.outer_radius,
                                     circle_boundary(self.target_radius),
                                     edge_length)

    def initial_mesh(self) -> TriMesh:
        a, b = self.ellipse_axes
        return generate_annulus_mesh(self.outer_radius,
                                     ellipse_boundary(a, b), self.mesh_size)

    def donor_mesh(self, start: TriMesh | None = None) -> TriMesh:
        """Target-domain mesh sharing the start mesh's nodes and cells.

        Each node slides along its ray so the obstacle loop lands on
        the target circle while the rim stays bitwise in place; the
        connectivity is untouched.  Running the donor solve on this
        warp keeps the two discretizations' far-field bias aligned.
        """
        if start is None:
            start = self.initial_mesh()
        return warp_to_circle(start, self.target_radius)

    def solve_target(self, start: TriMesh | None = None) -> TargetField:
        """Donor solve on the warped target domain; its trajectory is y_d."""
        mesh = self.donor_mesh(start)
        state = solve_forward(TaylorHoodSpace(mesh), self.problem())
        return TargetField.from_trajectory(state)


def radial_deviation(mesh: TriMesh, radius: float = 0.2) -> dict:
    """Mean and max of | |x| - radius | over the obstacle nodes."""
    r = np.linalg.norm(mesh.nodes[mesh.obstacle_nodes()], axis=1)
    dev = np.abs(r - radius)
    return {"mean": float(dev.mean()), "max": float(dev.max())}


@dataclass
class BenchmarkReport:
    """Outcome of one recovery run with its pass flags."""

    alpha: float
    iterations: int
    iterations_completed: int
    aborted: bool
    strict: bool
    J_initial: float
    J_final: float
    deviation_initial: dict
    deviation_final: dict
    recovered: bool
    cost_reduced: bool
    cost_decreased: bool
    seconds: float
    history: list = field(default_factory=list, repr=False)

    def passed(self) -> bool:
        if self.strict:
            return (self.recovered and self.cost_reduced
                    and not self.aborted)
        return self.cost_decreased

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "iterations": self.iterations,
            "iterations_completed": self.iterations_completed,
            "aborted": self.aborted,
            "strict": self.strict,
            "J_initial": self.J_initial,
            "J_final": self.J_final,
            "deviation_initial": self.deviation_initial,
            "deviation_final": self.deviation_final,
            "recovered": self.recovered,
            "cost_reduced": self.cost_reduced,
            "cost_decreased": self.cost_decreased,
            "passed": self.passed(),
            "seconds": self.seconds,
        }


def _records_from_history(path: Path) -> list:
    """Rebuild the iteration log from the csv the optimizer flushed."""
    if not path.exists():
        return []
    rows = path.read_text().strip().splitlines()[1:]
    records = []
    for row in rows:
        parts = row.split(",")
        records.append(IterationRecord(
            iteration=int(parts[0]), J=float(parts[1]),
            grad_norm=float(parts[2]), step=float(parts[3]),
            area=float(parts[4]), min_quality=float(parts[5]),
            seconds=float(parts[6])))
    return records


def run_benchmark(alpha: float = 0.1, iterations: int = 30,
                  mesh_size: float | None = None, out_dir=None,
                  controller=None, snapshot_writer=None,
                  strict=None) -> BenchmarkReport:
    """Run one recovery experiment and evaluate its pass flags.

    mesh_size=None picks the viscosity-dependent default.  strict=None
    enforces the full recovery thresholds for alpha at or above 0.01
    and only the cost-decrease clause below that.  An optimizer abort
    (step retries exhausted) is reported, not raised: the flags are
    then judged on the partial run.  Writes report.json next to the
    optimizer artifacts when out_dir is given.
    """
    t0 = time.perf_counter()
    bench = BenchmarkSpec(alpha=alpha, iterations=iterations,
                          mesh_size=mesh_size)
    if strict is None:
        strict = alpha >= STRICT_ALPHA_FLOOR

    mesh0 = bench.initial_mesh()
    target = bench.solve_target(mesh0)
    dev0 = radial_deviation(mesh0, bench.target_radius)

    if out_dir is None:
        import tempfile
        out_dir = tempfile.mkdtemp(prefix="recovery-")
    out = Path(out_dir)

    aborted = False
    try:
        final_mesh, records = run(mesh0, bench.problem(), TRACKING,
                                  iterations, out, target=target,
                                  controller=controller,
                                  snapshot_writer=snapshot_writer)
    except MorphExhaustedError:
        aborted = True
        records = _records_from_history(out / "history.csv")
        snapshots = sorted(out.glob("mesh_*.txt"))
        final_mesh = load_mesh(snapshots[-1]) if snapshots else mesh0

    space = TaylorHoodSpace(final_mesh)
    state = solve_forward(space, bench.problem())
    J_final = evaluate_J1(space, state, target, bench.problem())
    J_initial = records[0].J if records else J_final
    dev1 = radial_deviation(final_mesh, bench.target_radius)

    recovered = (dev1["mean"] <= (1.0 - RECOVERY_MEAN_DROP) * dev0["mean"]
                 and dev1["max"] <= RECOVERY_MAX_DEVIATION)
    report = BenchmarkReport(
        alpha=alpha, iterations=iterations,
        iterations_completed=len(records), aborted=aborted, strict=strict,
        J_initial=J_initial, J_final=J_final,
        deviation_initial=dev0, deviation_final=dev1,
        recovered=recovered,
        cost_reduced=J_final <= COST_DROP * J_initial,
        cost_decreased=J_final < J_initial,
        seconds=time.perf_counter() - t0,
        history=records)

    with open(out / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    return report
