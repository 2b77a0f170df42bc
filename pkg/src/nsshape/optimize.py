"""Gradient-descent shape optimization: boundary gradient smoothing, step
adaptation, and mesh morphing with retry control.

The loop never touches the outer boundary: the smoothed descent field is
pinned to zero there, so only the obstacle wall and interior nodes move.
"""

import csv
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sps
from scipy.sparse.linalg import splu

from .adjoint import COST_KINDS, TRACKING, solve_adjoint
from .errors import (ConfigError, MorphExhaustedError,
                     NonlinearDivergenceError, SingularMatrixError)
from .fem import TaylorHoodSpace, apply_dirichlet
from .forward import solve_forward
from .gradient import (BoundaryGradient, assemble_gradient, evaluate_J1,
                       evaluate_J2)
from .mesh import (BoundaryTag, ReversedTriangleError, TriMesh, min_quality,
                   morph, save_mesh)

# 3-point Gauss rule on [0, 1]: exact for the cubic edge integrands below
_EDGE_QP = np.array([0.5 - np.sqrt(0.6) / 2.0, 0.5, 0.5 + np.sqrt(0.6) / 2.0])
_EDGE_QW = np.array([5.0, 8.0, 5.0]) / 18.0


@dataclass
class DescentField:
    """Smoothed descent direction: a vector P2 field with its seminorm matrix."""

    coeffs: np.ndarray
    h1: sps.csr_matrix
    space: TaylorHoodSpace

    def vertex_displacement(self) -> np.ndarray:
        return self.space.vertex_velocity(self.coeffs)

    def h1_inner(self, other: "DescentField") -> float:
        return float(self.coeffs @ (self.h1 @ other.coeffs))

    def h1_norm(self) -> float:
        return float(np.sqrt(max(self.h1_inner(self), 0.0)))


@dataclass
class StepController:
    """Step size with multiplicative adaptation and a retry budget."""

    step: float | None = None
    shrink: float = 0.5
    growth: float = 1.2
    alignment: float = 0.95
    max_retries: int = 10

    def __post_init__(self):
        if not 0.0 < self.shrink < 1.0:
            raise ConfigError("shrink factor must lie in (0, 1)")
        if self.growth <= 1.0:
            raise ConfigError("growth factor must exceed 1")
        if self.step is not None and self.step <= 0.0:
            raise ConfigError("step must be positive")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")


@dataclass
class IterationRecord:
    iteration: int
    J: float
    grad_norm: float
    step: float
    area: float
    min_quality: float
    seconds: float


HISTORY_HEADER = ["iter", "J", "grad_norm", "step", "area", "min_quality",
                  "seconds"]


def smooth_gradient(space: TaylorHoodSpace,
                    gradient: BoundaryGradient) -> DescentField:
    """Lift the boundary gradient density to a domain descent field.

    Solves the vector seminorm problem (Dd, Dv) = sum over obstacle edges of
    int g (v . n) ds with d = 0 on the outer boundary and the natural
    condition on the obstacle. g is taken linear on each boundary edge.
    """
    K = space.stiffness.tocsr()
    nf = gradient.normals
    rhs = np.zeros(space.n_u)
    pos = {int(n): i for i, n in enumerate(nf.node_ids)}
    g = gradient.values
    # P2 trace shape functions at the quadrature points: ends then midside
    s = _EDGE_QP
    N = np.stack([(1.0 - s) * (1.0 - 2.0 * s), s * (2.0 * s - 1.0),
                  4.0 * s * (1.0 - s)])
    trace_nodes, lengths, normals = space.boundary_trace(nf.tag)
    for (a, b, m), L, n in zip(trace_nodes, lengths, normals):
        gq = (1.0 - s) * g[pos[int(a)]] + s * g[pos[int(b)]]
        w = L * (_EDGE_QW * gq @ N.T)
        for comp in range(2):
            rhs[comp * space.n_p2 + np.array([a, b, m])] += w * n[comp]
    dofs = space.velocity_dofs(BoundaryTag.OUTER)
    A, b = apply_dirichlet(K, rhs, dofs, np.zeros(len(dofs)))
    nb = float(np.linalg.norm(b))
    if nb == 0.0:
        return DescentField(np.zeros(space.n_u), space.stiffness, space)
    try:
        lu = splu(A.tocsc())
    except RuntimeError as exc:
        raise SingularMatrixError(str(exc)) from exc
    d = lu.solve(b)
    r = b - A @ d
    if np.linalg.norm(r) > 1e-10 * nb:
        d = d + lu.solve(r)
        if np.linalg.norm(b - A @ d) > 1e-10 * nb:
            raise SingularMatrixError("smoothing solve did not reach tolerance")
    return DescentField(d, space.stiffness, space)


def adapt_step(controller: StepController, d_now: DescentField,
               d_prev: DescentField | None,
               morph_failed: bool = False) -> float:
    """One application of the step rules, in fixed precedence order."""
    if controller.step is None:
        raise ConfigError("step not initialized")
    if morph_failed:
        controller.step *= controller.shrink
    elif d_prev is not None:
        inner = d_now.h1_inner(d_prev)
        if inner < 0.0:
            controller.step *= controller.shrink
        else:
            scale = d_now.h1_norm() * d_prev.h1_norm()
            if scale > 0.0 and inner / scale >= controller.alignment:
                controller.step *= controller.growth
    return controller.step


def _obstacle_diameter(mesh: TriMesh) -> float:
    pts = mesh.nodes[mesh.obstacle_nodes()]
    diff = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((diff ** 2).sum(-1)).max())


def _initial_step(mesh: TriMesh, displacement: np.ndarray) -> float:
    """First step scaled so the wall moves by 5% of the obstacle diameter."""
    diam = _obstacle_diameter(mesh)
    wall = np.linalg.norm(displacement[mesh.obstacle_nodes()], axis=1).max()
    # a stationary shape produces roundoff-level descent fields; never
    # normalize those up to a finite wall move
    if wall <= 1e-12 * diam:
        return 1.0
    return 0.05 * diam / float(wall)


def _evaluate_cost(space, state, cost, target, config) -> float:
    if cost == TRACKING:
        return evaluate_J1(space, state, target, config)
    return evaluate_J2(space, state, config)


def _history_row(rec: IterationRecord) -> list[str]:
    return [str(rec.iteration), f"{rec.J:.17g}", f"{rec.grad_norm:.17g}",
            f"{rec.step:.17g}", f"{rec.area:.17g}",
            f"{rec.min_quality:.17g}", f"{rec.seconds:.6f}"]


def run(initial_mesh: TriMesh, config, cost: str, iterations: int,
        out_dir, target=None, controller: StepController | None = None,
        snapshot_writer=None) -> tuple[TriMesh, list[IterationRecord]]:
    """Descent loop: solve, assemble, smooth, morph; repeat.

    Each iteration ends in exactly one accepted morph. A morph attempt is
    rejected when it reverses a triangle or when it would produce a second
    consecutive cost increase; each rejection shrinks the step and retries,
    up to the controller budget.
    """
    if cost not in COST_KINDS:
        raise ConfigError(f"unknown cost '{cost}'")
    if cost == TRACKING and target is None:
        raise ConfigError("tracking cost requires a target")
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctrl = controller if controller is not None else StepController()

    mesh = initial_mesh
    space = TaylorHoodSpace(mesh)
    state = _solve_at(space, config, iteration=0)
    J_cur = _evaluate_cost(space, state, cost, target, config)
    d_prev = None
    last_increased = False
    records: list[IterationRecord] = []

    with open(out / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_HEADER)
        for k in range(1, iterations + 1):
            t0 = time.perf_counter()
            adj = solve_adjoint(space, state, config, cost, target)
            grad = assemble_gradient(space, state, adj, config, cost, target)
            d = smooth_gradient(space, grad)
            disp = d.vertex_displacement()
            if ctrl.step is None:
                ctrl.step = _initial_step(mesh, disp)
            adapt_step(ctrl, d, d_prev, morph_failed=False)

            accepted = None
            for _ in range(ctrl.max_retries + 1):
                try:
                    new_mesh = morph(mesh, disp, ctrl.step)
                    new_space = TaylorHoodSpace(new_mesh)
                    new_state = _solve_at(new_space, config, iteration=k)
                    J_new = _evaluate_cost(new_space, new_state, cost, target,
                                           config)
                except ReversedTriangleError:
                    adapt_step(ctrl, d, d_prev, morph_failed=True)
                    continue
                if J_new > J_cur and last_increased:
                    adapt_step(ctrl, d, d_prev, morph_failed=True)
                    continue
                accepted = (new_mesh, new_space, new_state, J_new)
                break
            if accepted is None:
                raise MorphExhaustedError(k, ctrl.step, ctrl.max_retries)
            new_mesh, new_space, new_state, J_new = accepted

            rec = IterationRecord(k, J_cur, d.h1_norm(), ctrl.step,
                                  new_mesh.area(), min_quality(new_mesh),
                                  time.perf_counter() - t0)
            records.append(rec)
            writer.writerow(_history_row(rec))
            fh.flush()
            save_mesh(new_mesh, out / f"mesh_{k:04d}.txt")
            if snapshot_writer is not None:
                snapshot_writer(out, k, new_space, new_state)
            if rec.min_quality < 0.05:
                warnings.warn(
                    f"iteration {k}: mesh quality degraded to "
                    f"{rec.min_quality:.3f}", RuntimeWarning)

            last_increased = J_new > J_cur
            mesh, space, state, J_cur = new_mesh, new_space, new_state, J_new
            d_prev = d
    return mesh, records


def _solve_at(space, config, iteration: int):
    try:
        return solve_forward(space, config)
    except NonlinearDivergenceError as exc:
        exc.iteration = iteration
        raise
