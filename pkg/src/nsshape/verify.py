"""Independent checks of the solver stack.

Finite-difference Eulerian derivatives obtained by transporting mesh
nodes along an analytic velocity field, a three-probe comparison
battery against the adjoint-based derivative on a refinement ladder,
and a manufactured-solution convergence study of the flow solver.
"""

import csv
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import sympy as sp

from .adjoint import TRACKING, VORTICITY, TargetField, solve_adjoint
from .errors import VerificationError
from .fem import TaylorHoodSpace
from .forward import ProblemConfig, solve_forward
from .gradient import (assemble_gradient, eulerian_derivative, evaluate_J1,
                       evaluate_J2)
from .mesh import (BoundaryTag, TriMesh, circle_boundary,
                   generate_annulus_mesh, generate_square_mesh, morph)

REL_ERR_FLOOR = 1e-12

# battery thresholds on the coarse (~125 node) level
TRACKING_COARSE_TOL = 0.10
VORTICITY_COARSE_TOL = 0.15

# observed-order floors for the manufactured-solution study
MMS_VELOCITY_ORDER_FLOOR = 1.8
MMS_PRESSURE_ORDER_FLOOR = 0.9


@dataclass(frozen=True)
class PerturbationField:
    """Analytic domain velocity used for finite-difference probes.

    The field is expected to vanish on the outer boundary; node
    displacements there are hard-zeroed regardless, so the outer loop
    never moves under perturbation.
    """

    func: Callable
    description: str = ""

    def __call__(self, points: np.ndarray) -> np.ndarray:
        vals = np.asarray(self.func(points), dtype=float)
        if vals.shape != points.shape:
            raise VerificationError(
                f"perturbation field returned shape {vals.shape}, "
                f"expected {points.shape}")
        return vals

    def displacement(self, mesh: TriMesh) -> np.ndarray:
        disp = self(mesh.nodes).copy()
        disp[mesh.nodes_of(BoundaryTag.OUTER)] = 0.0
        if not np.all(np.isfinite(disp)):
            raise VerificationError("perturbation field is not finite on "
                                    "the mesh")
        return disp

    def negated(self) -> "PerturbationField":
        return PerturbationField(lambda p: -self.func(p),
                                 f"-({self.description})")


def standard_probes() -> list:
    """Three independent probes on the r = 0.8 annulus, zero at the rim."""

    def radial(points):
        r = np.linalg.norm(points, axis=1, keepdims=True)
        return (0.8 - r) / 0.6 * points / r

    def lopsided(points):
        x = points[:, :1]
        r = np.linalg.norm(points, axis=1, keepdims=True)
        return (0.8 - r) / 0.6 * (1.0 + x / r) * points / r

    def sheared(points):
        x, y = points[:, 0], points[:, 1]
        bump = 0.5 * (0.64 - x * x - y * y)
        V = np.stack([bump * x * y, bump * (1.0 - x * x)], axis=1)
        return V + radial(points)

    return [PerturbationField(radial, "radial-bump"),
            PerturbationField(lopsided, "lopsided-bump"),
            PerturbationField(sheared, "sheared-bump")]


def _cost_of(mesh: TriMesh, config: ProblemConfig, target, cost) -> float:
    space = TaylorHoodSpace(mesh)
    state = solve_forward(space, config)
    if cost == TRACKING:
        return evaluate_J1(space, state, target, config)
    return evaluate_J2(space, state, config)


def fd_eulerian_derivative(mesh: TriMesh, config: ProblemConfig, target,
                           cost, V: PerturbationField, eps: float) -> float:
    """Central difference of the cost under node transport x -> x + s V."""
    if eps <= 0.0:
        raise VerificationError(f"eps must be positive, got {eps}")
    disp = V.displacement(mesh)
    plus = _cost_of(morph(mesh, disp, -eps), config, target, cost)
    minus = _cost_of(morph(mesh, disp, eps), config, target, cost)
    return (plus - minus) / (2.0 * eps)


@dataclass
class ComparisonRow:
    """One adjoint-versus-finite-difference measurement."""

    probe: str
    eps: float
    adjoint: float
    fd: float
    rel_err: float


def _relative_error(adjoint: float, fd: float) -> float:
    return abs(adjoint - fd) / max(abs(fd), REL_ERR_FLOOR)


def compare_gradient(mesh: TriMesh, config: ProblemConfig, target, cost,
                     V: PerturbationField, eps: float) -> ComparisonRow:
    """Adjoint boundary-integral derivative against the central difference."""
    space = TaylorHoodSpace(mesh)
    state = solve_forward(space, config)
    adj = solve_adjoint(space, state, config, cost, target)
    grad = assemble_gradient(space, state, adj, config, cost, target)
    a = eulerian_derivative(grad, V(grad.coords))
    f = fd_eulerian_derivative(mesh, config, target, cost, V, eps)
    return ComparisonRow(V.description or "probe", eps, a, f,
                         _relative_error(a, f))


def write_comparison_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["probe", "eps", "adjoint", "fd", "rel_err"])
        for r in rows:
            w.writerow([r.probe, f"{r.eps:.17g}", f"{r.adjoint:.17g}",
                        f"{r.fd:.17g}", f"{r.rel_err:.17g}"])


# -- built-in comparison battery -----------------------------------------------


def battery_problem() -> ProblemConfig:
    """Flow with no symmetry: rotating rim, asymmetric forcing, spun-up start.

    Rotationally symmetric data would make every zero-mean probe hit a
    0/0 in the relative error, so the forcing deliberately breaks the
    symmetry.
    """

    def forcing(p, t):
        x, y = p[:, 0], p[:, 1]
        return np.stack([-3.0 * y + 2.0 * np.sin(2.0 * np.pi * y),
                         3.0 * x + 1.5 * np.cos(np.pi * x)], axis=1)

    def rim(p, t):
        return 0.15 * np.stack([p[:, 1], -p[:, 0]], axis=1)

    def spun_up(p, t=None):
        x, y = p[:, 0], p[:, 1]
        r = np.hypot(x, y)
        s = 0.12 * ((r - 0.2) / 0.6) ** 2
        return s[:, None] * np.stack([y / r, -x / r], axis=1)

    return ProblemConfig(alpha=0.1, dt=0.5 / 60.0, t_final=0.5,
                         outer_bc=rim, body_force=forcing,
                         initial_velocity=spun_up)


@dataclass
class BatteryLevel:
    """Worst-probe relative errors for one mesh resolution."""

    h: float
    n_nodes: int
    tracking_max: float
    vorticity_max: float
    seconds: float
    rows: list = field(default_factory=list)


@dataclass
class BatteryReport:
    levels: list

    def tracking_ladder(self) -> list:
        return [lvl.tracking_max for lvl in self.levels]

    def vorticity_ladder(self) -> list:
        return [lvl.vorticity_max for lvl in self.levels]

    def passed(self) -> bool:
        t, v = self.tracking_ladder(), self.vorticity_ladder()
        ok = t[0] <= TRACKING_COARSE_TOL and v[0] <= VORTICITY_COARSE_TOL
        return ok and all(a > b for a, b in zip(t, t[1:]))

    def all_rows(self) -> list:
        return [r for lvl in self.levels for r in lvl.rows]


def run_battery(mesh_sizes=(0.07, 0.035, 0.0175), eps: float = 1e-3,
                csv_path=None) -> BatteryReport:
    """Adjoint-versus-FD comparison on a refinement ladder.

    Central differences on the first two levels; on finer levels a
    one-sided difference reuses the unperturbed solve, halving the
    dominant cost.  Per level the worst relative error over the three
    standard probes is reported, for both cost functionals, against a
    zero target field.
    """
    zero_target = TargetField.analytic(lambda p, t: np.zeros((len(p), 2)))
    cfg = battery_problem()
    levels = []
    for idx, h in enumerate(mesh_sizes):
        t0 = time.perf_counter()
        mesh = generate_annulus_mesh(0.8, circle_boundary(0.2), h)
        space = TaylorHoodSpace(mesh)
        state = solve_forward(space, cfg)
        g1 = assemble_gradient(
            space, state, solve_adjoint(space, state, cfg, TRACKING,
                                        zero_target),
            cfg, TRACKING, zero_target)
        g2 = assemble_gradient(
            space, state, solve_adjoint(space, state, cfg, VORTICITY),
            cfg, VORTICITY)
        J0 = (evaluate_J1(space, state, zero_target, cfg),
              evaluate_J2(space, state, cfg))

        one_sided = idx >= 2
        rows, worst1, worst2 = [], 0.0, 0.0
        for probe in standard_probes():
            disp = probe.displacement(mesh)
            a1 = eulerian_derivative(g1, disp[g1.node_ids])
            a2 = eulerian_derivative(g2, disp[g2.node_ids])

            def costs(scale):
                m2 = morph(mesh, disp, -scale)
                s2 = TaylorHoodSpace(m2)
                st = solve_forward(s2, cfg)
                return (evaluate_J1(s2, st, zero_target, cfg),
                        evaluate_J2(s2, st, cfg))

            if one_sided:
                Jp = costs(eps)
                fd1 = (Jp[0] - J0[0]) / eps
                fd2 = (Jp[1] - J0[1]) / eps
            else:
                Jp, Jm = costs(eps), costs(-eps)
                fd1 = (Jp[0] - Jm[0]) / (2.0 * eps)
                fd2 = (Jp[1] - Jm[1]) / (2.0 * eps)

            r1, r2 = _relative_error(a1, fd1), _relative_error(a2, fd2)
            worst1, worst2 = max(worst1, r1), max(worst2, r2)
            rows.append(ComparisonRow(f"{probe.description}/tracking@h={h}",
                                      eps, a1, fd1, r1))
            rows.append(ComparisonRow(f"{probe.description}/vorticity@h={h}",
                                      eps, a2, fd2, r2))
        levels.append(BatteryLevel(h, mesh.n_nodes, worst1, worst2,
                                   time.perf_counter() - t0, rows))

    report = BatteryReport(levels)
    if csv_path is not None:
        write_comparison_csv(csv_path, report.all_rows())
    return report


# -- manufactured-solution convergence ------------------------------------------


def _manufactured_fields(alpha: float):
    """Closed-form unit-square solution and its compatible forcing.

    The stream function vanishes to second order on the boundary, so
    the velocity is exactly divergence-free and exactly zero on the
    walls; the pressure has exact zero mean.
    """
    x, y, t = sp.symbols("x y t")
    psi = (x * (1 - x) * y * (1 - y)) ** 2
    beta = t ** 2
    u = beta * sp.diff(psi, y)
    v = -beta * sp.diff(psi, x)
    p = beta * (x ** 3 + y ** 3 - sp.Rational(1, 2))

    def momentum(w):
        lap = sp.diff(w, x, 2) + sp.diff(w, y, 2)
        adv = u * sp.diff(w, x) + v * sp.diff(w, y)
        return sp.diff(w, t) - alpha * lap + adv

    f1 = sp.expand(momentum(u) + sp.diff(p, x))
    f2 = sp.expand(momentum(v) + sp.diff(p, y))

    fu = sp.lambdify((x, y, t), [u, v], "numpy")
    ff = sp.lambdify((x, y, t), [f1, f2], "numpy")
    fp = sp.lambdify((x, y, t), p, "numpy")

    def _pair(fn, points, tv):
        a, b = fn(points[:, 0], points[:, 1], tv)
        a = np.broadcast_to(np.asarray(a, dtype=float), (len(points),))
        b = np.broadcast_to(np.asarray(b, dtype=float), (len(points),))
        return np.stack([a, b], axis=1)

    def velocity(points, tv):
        return _pair(fu, points, tv)

    def force(points, tv):
        return _pair(ff, points, tv)

    def pressure(points, tv):
        vals = np.asarray(fp(points[:, 0], points[:, 1], tv), dtype=float)
        return np.broadcast_to(vals, (len(points),))

    return velocity, force, pressure


@dataclass
class MmsLevel:
    h: float
    dt: float
    velocity_error: float
    pressure_error: float


@dataclass
class MmsReport:
    levels: list
    velocity_order: float
    pressure_order: float

    def pair_orders(self) -> list:
        out = []
        for a, b in zip(self.levels, self.levels[1:]):
            ratio = np.log2(a.h / b.h)
            out.append((np.log2(a.velocity_error / b.velocity_error) / ratio,
                        np.log2(a.pressure_error / b.pressure_error) / ratio))
        return out


def manufactured_convergence(levels: int = 3, alpha: float = 0.1,
                             n0: int = 8, t_final: float = 0.2,
                             dt0: float = 0.05) -> MmsReport:
    """Convergence study on nested square meshes with dt proportional
    to h squared; errors are final-time L2 norms."""
    if levels < 2:
        raise VerificationError("need at least 2 levels for an order")
    velocity, force, pressure = _manufactured_fields(alpha)
    rows = []
    for k in range(levels):
        n = n0 * 2 ** k
        dt = dt0 / 4 ** k
        mesh = generate_square_mesh(n)
        space = TaylorHoodSpace(mesh)
        cfg = ProblemConfig(alpha=alpha, dt=dt, t_final=t_final,
                            body_force=force, outer_bc=velocity,
                            initial_velocity=lambda pts, t=None:
                                velocity(pts, 0.0))
        state = solve_forward(space, cfg)
        T = state.times[-1]

        yq = space.velocity_at_qpoints(state.velocities[-1])
        yx = velocity(space.qpoints.reshape(-1, 2), T).reshape(yq.shape)
        err_v = np.sqrt(space.integrate(((yq - yx) ** 2).sum(axis=-1)))

        pq = space.pressure_at_qpoints(state.pressures[-1])
        px = pressure(space.qpoints.reshape(-1, 2), T).reshape(pq.shape)
        err_p = np.sqrt(space.integrate((pq - px) ** 2))

        rows.append(MmsLevel(1.0 / n, dt, float(err_v), float(err_p)))

    last = rows[-2], rows[-1]
    vorder = float(np.log2(last[0].velocity_error / last[1].velocity_error))
    porder = float(np.log2(last[0].pressure_error / last[1].pressure_error))
    return MmsReport(rows, vorder, porder)
