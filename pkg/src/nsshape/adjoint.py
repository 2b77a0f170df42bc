"""Backward-in-time dual solves for the tracking and vorticity costs.

The dual pair (v, q) satisfies a linear saddle system at each level, marched
from v = 0 at the final time down to level 0. The advecting field is the
primal velocity at the level being solved, the dual velocity vanishes on the
whole boundary, and the dual pressure is normalized to zero mean.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .fem import (PointLocator, TaylorHoodSpace, apply_dirichlet,
                  assemble_convection, assemble_velocity_load, build_saddle,
                  solve_saddle)
from .forward import ProblemConfig, StateTrajectory
from .mesh import BoundaryTag, winding_number

TRACKING = "tracking"
VORTICITY = "vorticity"
COST_KINDS = (TRACKING, VORTICITY)


class _DonorHandle:
    """Located query points in the donor mesh, reusable across time levels."""

    def __init__(self, tri, lam, zero_mask):
        self.tri = tri
        self.lam = lam
        self.zero_mask = zero_mask


class TargetField:
    """Desired velocity, either a callable of (points, t) or a donor flow.

    A donor target carries a full trajectory on its own mesh; queries are
    interpolated there, points inside the donor's obstacle return zero, and
    points marginally outside the donor mesh are clamped to the nearest
    donor triangle. Donor evaluation is tied to the donor's own time grid,
    so the consumer must step on the same grid.
    """

    def __init__(self, fn=None, trajectory: StateTrajectory | None = None):
        if (fn is None) == (trajectory is None):
            raise ConfigError(
                "target needs exactly one of a callable or a trajectory")
        self.fn = fn
        self.trajectory = trajectory
        self._locator = None
        self._hole = None

    @classmethod
    def analytic(cls, fn) -> "TargetField":
        return cls(fn=fn)

    @classmethod
    def from_trajectory(cls, traj: StateTrajectory) -> "TargetField":
        return cls(trajectory=traj)

    @property
    def is_donor(self) -> bool:
        return self.trajectory is not None

    def check_times(self, times: np.ndarray):
        if not self.is_donor:
            return
        donor = self.trajectory.times
        if len(donor) != len(times) or np.max(np.abs(donor - times)) > 1e-9:
            raise ConfigError(
                "donor target was computed on a different time grid; the "
                "consumer must use the same dt and final time")

    def locate(self, points: np.ndarray):
        """Prepare evaluation of the target at fixed query points."""
        points = np.asarray(points, dtype=float)
        if not self.is_donor:
            return points
        if self._locator is None:
            self._locator = PointLocator(self.trajectory.space)
        tri, lam = self._locator.locate(points)
        zero_mask = np.zeros(len(points), dtype=bool)
        miss = tri < 0
        if np.any(miss):
            inside_hole = self._inside_obstacle(points[miss])
            zero_mask[np.flatnonzero(miss)[inside_hole]] = True
            clamp_rows = np.flatnonzero(miss)[~inside_hole]
            if len(clamp_rows):
                ctri, clam = self._locator.locate_clamped(points[clamp_rows])
                tri[clamp_rows] = ctri
                lam[clamp_rows] = clam
        return _DonorHandle(tri, lam, zero_mask)

    def _inside_obstacle(self, points: np.ndarray) -> np.ndarray:
        if self._hole is None:
            mesh = self.trajectory.space.mesh
            loops = [cyc for tag, cyc in mesh.boundary_loops()
                     if tag == BoundaryTag.OBSTACLE]
            self._hole = mesh.nodes[loops[0]] if loops else np.zeros((0, 2))
        if len(self._hole) == 0:
            return np.zeros(len(points), dtype=bool)
        return winding_number(self._hole, points) != 0

    def eval(self, handle, level: int, t: float) -> np.ndarray:
        """Target values at the located points for time level / time t."""
        if not self.is_donor:
            return np.asarray(self.fn(handle, t), dtype=float)
        times = self.trajectory.times
        if not 0 <= level < len(times) or abs(times[level] - t) > 1e-9:
            raise ConfigError(
                f"donor target has no level {level} at t={t:.6g}")
        u = self.trajectory.velocities[level]
        vals = self._locator.eval_velocity(u, handle.tri, handle.lam)
        vals[handle.zero_mask] = 0.0
        return vals


class AdjointTrajectory:
    """Dual velocity/pressure coefficients at every time level 0..M."""

    def __init__(self, space: TaylorHoodSpace, times: np.ndarray,
                 velocities: np.ndarray, pressures: np.ndarray, cost: str):
        self.space = space
        self.times = times
        self.velocities = velocities
        self.pressures = pressures
        self.cost = cost

    @property
    def n_levels(self) -> int:
        return len(self.times)


def evaluate_adjoint(traj: AdjointTrajectory, k: int):
    if not 0 <= k < traj.n_levels:
        raise IndexError(f"time level {k} outside 0..{traj.n_levels - 1}")
    return traj.velocities[k], traj.pressures[k]


def _tracking_source(space, state, target, handle, k):
    yd = target.eval(handle, k, state.times[k])
    yd_q = yd.reshape(space.qpoints.shape)
    load = assemble_velocity_load(space, None, values=yd_q)
    return space.mass @ state.velocities[k] - load


def solve_adjoint(space: TaylorHoodSpace, state: StateTrajectory,
                  config: ProblemConfig, cost: str,
                  target: TargetField | None = None,
                  rhs_scale: float = 1.0) -> AdjointTrajectory:
    """March the dual system backward over the trajectory's levels.

    rhs_scale multiplies the cost-derivative source term only; it exists for
    diagnostics (the dual state is exactly linear in it).
    """
    if cost not in COST_KINDS:
        raise ConfigError(f"cost must be one of {COST_KINDS}, got {cost!r}")
    if cost == TRACKING and target is None:
        raise ConfigError("tracking cost requires a target field")
    if state.space is not space:
        raise ConfigError("state was computed on a different space")

    n_levels = state.n_levels
    dt = config.dt
    M_vec = space.mass
    a_lin = (M_vec / dt + config.alpha * space.stiffness).tocsr()
    K = space.stiffness

    dofs = []
    for tag in space.all_boundary_tags():
        nodes = space.boundary_p2_nodes(tag)
        dofs.append(np.concatenate([nodes, space.n_p2 + nodes]))
    dofs = np.unique(np.concatenate(dofs))
    vals = np.zeros(len(dofs))

    handle = None
    if cost == TRACKING:
        target.check_times(state.times)
        handle = target.locate(space.qpoints.reshape(-1, 2))

    v = np.zeros((n_levels, space.n_u))
    q = np.zeros((n_levels, space.n_p))
    for k in range(n_levels - 2, -1, -1):
        if cost == TRACKING:
            src = _tracking_source(space, state, target, handle, k)
        else:
            src = config.alpha * (K @ state.velocities[k])
        rhs = M_vec @ (v[k + 1] / dt) + rhs_scale * src
        conv = assemble_convection(space, state.velocities[k])
        a_uu = (a_lin - conv.transport + conv.transposed_gradient).tocsr()
        A_s, b_s = build_saddle(space, a_uu, rhs)
        A_s, b_s = apply_dirichlet(A_s, b_s, dofs, vals)
        x = solve_saddle(A_s, b_s)
        v[k] = x[:space.n_u]
        q[k] = x[space.n_u:space.n_u + space.n_p]
    return AdjointTrajectory(space, state.times.copy(), v, q, cost)
