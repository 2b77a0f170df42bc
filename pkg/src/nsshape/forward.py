"""Implicit time stepping for the incompressible flow problem.

Backward Euler in time; each level solves the fully implicit nonlinear
system by Newton's method (default) or Picard iteration. Boundary data and
the body force are evaluated at the implicit level t_k. The velocity is
pinned to the wall data on the outer loop and to zero on the obstacle loop;
the pressure is normalized to zero mean through the saddle multiplier.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, NonlinearDivergenceError
from .fem import (TaylorHoodSpace, apply_dirichlet, assemble_convection,
                  assemble_velocity_load, boundary_flux, build_saddle,
                  solve_saddle)
from .mesh import BoundaryTag


def _zero_field(points, t=None):
    return np.zeros((len(points), 2))


@dataclass
class ProblemConfig:
    """Physical and discretization parameters of one flow problem.

    alpha is the reciprocal Reynolds number. body_force, outer_bc and
    initial_velocity map (points, t) to (n, 2) arrays; obstacle velocity is
    identically zero. linearization "picard" with max_nonlinear_iter == 0
    drops the convective term entirely (Stokes stepping).
    """

    alpha: float
    dt: float
    t_final: float
    body_force: Callable = field(default=_zero_field)
    outer_bc: Callable = field(default=_zero_field)
    initial_velocity: Callable = field(default=_zero_field)
    linearization: str = "newton"
    max_nonlinear_iter: int = 25
    nonlinear_tol: float = 1e-10

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.dt <= 0.0 or self.t_final <= 0.0:
            raise ConfigError("dt and t_final must be positive")
        steps = self.t_final / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigError(
                f"t_final={self.t_final} is not an integer number of steps "
                f"of dt={self.dt}")
        if self.linearization not in ("newton", "picard"):
            raise ConfigError(
                f"linearization must be newton or picard, got "
                f"{self.linearization!r}")
        if self.max_nonlinear_iter < 0:
            raise ConfigError("max_nonlinear_iter must be >= 0")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)


class StateTrajectory:
    """Velocity/pressure coefficients at every time level 0..M.

    Level 0 is the interpolated initial data (its pressure slot is zero and
    it is not a solution of the scheme); levels 1..M satisfy the implicit
    equations to the nonlinear tolerance.
    """

    def __init__(self, space: TaylorHoodSpace, times: np.ndarray,
                 velocities: np.ndarray, pressures: np.ndarray):
        self.space = space
        self.times = times
        self.velocities = velocities
        self.pressures = pressures

    @property
    def n_levels(self) -> int:
        return len(self.times)


def evaluate_state(traj: StateTrajectory, k: int):
    if not 0 <= k < traj.n_levels:
        raise IndexError(f"time level {k} outside 0..{traj.n_levels - 1}")
    return traj.velocities[k], traj.pressures[k]


def kinetic_energy(traj: StateTrajectory, k: int) -> float:
    u, _ = evaluate_state(traj, k)
    return 0.5 * float(u @ (traj.space.mass @ u))


def _boundary_values(space: TaylorHoodSpace, config: ProblemConfig,
                     t: float):
    """Constrained velocity DOFs and their values at time t."""
    dofs, vals = [], []
    tags = space.all_boundary_tags()
    for tag in tags:
        nodes = space.boundary_p2_nodes(tag)
        d = np.concatenate([nodes, space.n_p2 + nodes])
        if tag == BoundaryTag.OUTER:
            v = np.asarray(config.outer_bc(space.p2_coords[nodes], t),
                           dtype=float)
        else:
            v = np.zeros((len(nodes), 2))
        dofs.append(d)
        vals.append(np.concatenate([v[:, 0], v[:, 1]]))
    return np.concatenate(dofs), np.concatenate(vals)


def _check_compatibility(space, config, dofs, vals, t):
    u_bc = np.zeros(space.n_u)
    u_bc[dofs] = vals
    flux = boundary_flux(space, u_bc)
    scale = max(1.0, float(np.max(np.abs(vals))) if len(vals) else 1.0)
    if abs(flux) > 1e-10 * scale:
        raise ConfigError(
            f"boundary data is not flux free at t={t:.6g}: net outflow "
            f"{flux:.3e}")


def solve_forward(space: TaylorHoodSpace,
                  config: ProblemConfig) -> StateTrajectory:
    """March the implicit scheme over all time levels."""
    n_steps = config.n_steps
    times = config.times()
    M_vec = space.mass
    stokes_only = (config.linearization == "picard"
                   and config.max_nonlinear_iter == 0)
    a_lin = (M_vec / config.dt + config.alpha * space.stiffness).tocsr()
    B = space.divergence
    BT = B.T.tocsr()
    mp = space.pressure_load

    u0 = space.interpolate_velocity(config.initial_velocity, times[0])
    dofs0, vals0 = _boundary_values(space, config, times[0])
    _check_compatibility(space, config, dofs0, vals0, times[0])
    u0[dofs0] = vals0

    velocities = np.zeros((n_steps + 1, space.n_u))
    pressures = np.zeros((n_steps + 1, space.n_p))
    velocities[0] = u0

    u_prev = u0
    p_prev = np.zeros(space.n_p)
    for k in range(1, n_steps + 1):
        t = times[k]
        dofs, vals = _boundary_values(space, config, t)
        _check_compatibility(space, config, dofs, vals, t)
        load = assemble_velocity_load(space, config.body_force, t)
        load += M_vec @ (u_prev / config.dt)

        u = u_prev.copy()
        u[dofs] = vals
        p = p_prev.copy()

        if stokes_only:
            A_s, b_s = build_saddle(space, a_lin, load)
            A_s, b_s = apply_dirichlet(A_s, b_s, dofs, vals)
            x = solve_saddle(A_s, b_s)
            u, p = x[:space.n_u], x[space.n_u:space.n_u + space.n_p]
        else:
            u, p = _nonlinear_step(space, config, a_lin, BT, B, mp, load,
                                   dofs, vals, u, p, k)

        velocities[k] = u
        pressures[k] = p
        u_prev, p_prev = u, p
    return StateTrajectory(space, times, velocities, pressures)


def _nonlinear_step(space, config, a_lin, BT, B, mp, load, dofs, vals,
                    u, p, level):
    newton = config.linearization == "newton"
    free = np.ones(space.n_u, dtype=bool)
    free[dofs] = False
    res0 = None
    for it in range(config.max_nonlinear_iter + 1):
        conv = assemble_convection(space, u)
        r_u = load - a_lin @ u - conv.transport @ u - BT @ p
        r_u[~free] = 0.0
        r_p = -(B @ u)
        r_m = -float(mp @ p)
        res = float(np.sqrt(r_u @ r_u + r_p @ r_p + r_m * r_m))
        if res0 is None:
            res0 = res
        atol = 1e-14 * max(1.0, float(np.linalg.norm(load)))
        if res <= config.nonlinear_tol * res0 + atol:
            return u, p
        if it == config.max_nonlinear_iter:
            raise NonlinearDivergenceError(level, res, it)

        a_uu = a_lin + conv.transport
        rhs = load
        if newton:
            a_uu = a_uu + conv.gradient_coupling
            rhs = load + conv.gradient_coupling @ u
        A_s, b_s = build_saddle(space, a_uu.tocsr(), rhs)
        A_s, b_s = apply_dirichlet(A_s, b_s, dofs, vals)
        x = solve_saddle(A_s, b_s)
        u = x[:space.n_u]
        p = x[space.n_u:space.n_u + space.n_p]
    raise NonlinearDivergenceError(level, res, config.max_nonlinear_iter)
