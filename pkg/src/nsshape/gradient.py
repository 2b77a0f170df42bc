"""Cost functionals and the boundary density of their shape derivative.

Both costs integrate over the fluid region and over time with the
right-endpoint rule (levels 1..M). The shape derivative with respect to
normal motion of the obstacle concentrates in a scalar density g on the
obstacle nodes; dJ for a boundary velocity V is the loop integral of
g (V . n) by the trapezoid rule on the boundary polygon.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .adjoint import (COST_KINDS, TRACKING, VORTICITY, AdjointTrajectory,
                      TargetField)
from .errors import ConfigError
from .fem import TaylorHoodSpace, p2_ref_grads
from .forward import ProblemConfig, StateTrajectory
from .mesh import BoundaryNormalField, BoundaryTag, compute_normals


def evaluate_J1(space: TaylorHoodSpace, state: StateTrajectory,
                target: TargetField, config: ProblemConfig) -> float:
    """Time-integrated half squared misfit against the target velocity."""
    target.check_times(state.times)
    handle = target.locate(space.qpoints.reshape(-1, 2))
    total = 0.0
    for k in range(1, state.n_levels):
        yq = space.velocity_at_qpoints(state.velocities[k])
        yd = target.eval(handle, k, state.times[k]).reshape(yq.shape)
        diff = yq - yd
        total += config.dt * 0.5 * space.integrate(
            np.sum(diff * diff, axis=-1))
    return total


def evaluate_J2(space: TaylorHoodSpace, state: StateTrajectory,
                config: ProblemConfig) -> float:
    """Time-integrated enstrophy cost, alpha/2 times squared scalar curl."""
    total = 0.0
    for k in range(1, state.n_levels):
        D = space.velocity_grad_at_qpoints(state.velocities[k])
        omega = D[:, :, 1, 0] - D[:, :, 0, 1]
        total += config.dt * 0.5 * config.alpha * space.integrate(
            omega * omega)
    return total


_DN_CORNER = p2_ref_grads(np.eye(3))


def node_velocity_gradients(space: TaylorHoodSpace, u: np.ndarray,
                            node_ids: np.ndarray) -> np.ndarray:
    """Velocity gradient tensors at mesh vertices, area-averaged.

    Each adjacent triangle contributes its one-sided P2 gradient evaluated
    at the vertex itself; contributions are averaged with area weights.
    Evaluating at the vertex rather than at element centroids avoids the
    O(h) inward offset that systematically underestimates wall-normal
    derivatives on boundary nodes.
    Returns (len(node_ids), 2, 2) with D[a, b] = du_a / dx_b.
    """
    G = np.einsum("pib,tba->tpia", _DN_CORNER, space.inv_jac)
    uL = np.stack([u[space.tri_p2], u[space.n_p2 + space.tri_p2]], axis=-1)
    D = np.einsum("tpib,tic->tpcb", G, uL)
    areas = 0.5 * space.detJ

    mesh = space.mesh
    pos = np.full(mesh.n_nodes, -1, dtype=np.int64)
    pos[node_ids] = np.arange(len(node_ids))
    acc = np.zeros((len(node_ids), 2, 2))
    wsum = np.zeros(len(node_ids))
    for col in range(3):
        idx = pos[mesh.triangles[:, col]]
        sel = idx >= 0
        np.add.at(acc, idx[sel], areas[sel, None, None] * D[sel, col])
        np.add.at(wsum, idx[sel], areas[sel])
    return acc / wsum[:, None, None]


@dataclass
class BoundaryGradient:
    """Shape-derivative density on the obstacle loop."""

    normals: BoundaryNormalField
    coords: np.ndarray          # (n, 2) node positions, aligned to node_ids
    values: np.ndarray          # (n,) density g
    cost: str

    @property
    def node_ids(self) -> np.ndarray:
        return self.normals.node_ids

    def node_weights(self) -> np.ndarray:
        """Trapezoid weight per node: half the adjacent edge lengths."""
        w = np.zeros(len(self.node_ids))
        pos = {int(n): i for i, n in enumerate(self.node_ids)}
        for (a, b), length in zip(self.normals.edges,
                                  self.normals.edge_lengths):
            w[pos[int(a)]] += 0.5 * length
            w[pos[int(b)]] += 0.5 * length
        return w


def assemble_gradient(space: TaylorHoodSpace, state: StateTrajectory,
                      adjoint: AdjointTrajectory, config: ProblemConfig,
                      cost: str,
                      target: TargetField | None = None) -> BoundaryGradient:
    """Accumulate the boundary density over levels 1..M."""
    if cost not in COST_KINDS:
        raise ConfigError(f"cost must be one of {COST_KINDS}, got {cost!r}")
    if cost == TRACKING and target is None:
        raise ConfigError("tracking cost requires a target field")
    if adjoint.cost != cost:
        raise ConfigError(
            f"adjoint was solved for {adjoint.cost!r}, not {cost!r}")

    nf = compute_normals(space.mesh, BoundaryTag.OBSTACLE)
    ids = nf.node_ids
    n = nf.node_normals
    coords = space.mesh.nodes[ids]

    handle = None
    if cost == TRACKING:
        target.check_times(state.times)
        handle = target.locate(coords)

    alpha = config.alpha
    g = np.zeros(len(ids))
    for k in range(1, state.n_levels):
        Dy = node_velocity_gradients(space, state.velocities[k], ids)
        Dv = node_velocity_gradients(space, adjoint.velocities[k], ids)
        dyn = np.einsum("nab,nb->na", Dy, n)
        dvn = np.einsum("nab,nb->na", Dv, n)
        if cost == TRACKING:
            y_nodes = np.stack([state.velocities[k][ids],
                                state.velocities[k][space.n_p2 + ids]],
                               axis=1)
            yd = target.eval(handle, k, state.times[k])
            diff = y_nodes - yd
            g += config.dt * (0.5 * np.sum(diff * diff, axis=1)
                              + alpha * np.sum(dyn * dvn, axis=1))
        else:
            omega = Dy[:, 1, 0] - Dy[:, 0, 1]
            nperp = np.stack([-n[:, 1], n[:, 0]], axis=1)
            paired = dvn - omega[:, None] * nperp
            g += config.dt * alpha * (0.5 * omega * omega
                                      + np.sum(dyn * paired, axis=1))
    return BoundaryGradient(normals=nf, coords=coords, values=g, cost=cost)


def eulerian_derivative(grad: BoundaryGradient, V: np.ndarray) -> float:
    """dJ for boundary velocity V, trapezoid rule over the obstacle loop.

    V rows align with grad.node_ids. A field tangential at every node
    yields exactly zero because V . n is formed nodewise first.
    """
    V = np.asarray(V, dtype=float)
    vn = np.sum(V * grad.normals.node_normals, axis=1)
    return float(np.sum(grad.values * vn * grad.node_weights()))


def write_gradient_csv(grad: BoundaryGradient, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "x", "y", "nx", "ny", "g"])
        for i, nid in enumerate(grad.node_ids):
            w.writerow([int(nid),
                        f"{grad.coords[i, 0]:.17g}",
                        f"{grad.coords[i, 1]:.17g}",
                        f"{grad.normals.node_normals[i, 0]:.17g}",
                        f"{grad.normals.node_normals[i, 1]:.17g}",
                        f"{grad.values[i]:.17g}"])
