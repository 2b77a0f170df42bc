"""Tests for the descent loop: smoothing, step control, morphing, logging."""

import csv

import numpy as np
import pytest
import scipy.sparse as sps

from nsshape import circle_boundary, compute_normals, generate_annulus_mesh
from nsshape.adjoint import TRACKING, VORTICITY, TargetField
from nsshape.errors import (ConfigError, MorphExhaustedError,
                            NonlinearDivergenceError)
from nsshape.fem import TaylorHoodSpace
from nsshape.forward import ProblemConfig, solve_forward
from nsshape.gradient import BoundaryGradient
from nsshape.mesh import BoundaryTag
from nsshape.optimize import (DescentField, HISTORY_HEADER, IterationRecord,
                              StepController, adapt_step, run,
                              smooth_gradient)


def rotation_bc(points, t):
    return 0.15 * np.stack([points[:, 1], -points[:, 0]], axis=1)


def swirl_force(points, t):
    return 3.0 * np.stack([-points[:, 1], points[:, 0]], axis=1)


def developed_start(points, t=None):
    x, y = points[:, 0], points[:, 1]
    r = np.hypot(x, y)
    s = 0.12 * ((r - 0.2) / 0.6) ** 2
    return s[:, None] * np.stack([y / r, -x / r], axis=1)


def quick_config():
    return ProblemConfig(alpha=0.1, dt=0.1, t_final=0.3, outer_bc=rotation_bc,
                         body_force=swirl_force,
                         initial_velocity=developed_start)


@pytest.fixture(scope="module")
def space():
    mesh = generate_annulus_mesh(0.8, circle_boundary(0.25), 0.085)
    return TaylorHoodSpace(mesh)


def unit_gradient(space, scale=1.0):
    nf = compute_normals(space.mesh, BoundaryTag.OBSTACLE)
    coords = space.mesh.nodes[nf.node_ids]
    return BoundaryGradient(nf, coords, scale * np.ones(len(nf.node_ids)),
                            TRACKING)


def test_smooth_zero_gradient_is_zero(space):
    g = unit_gradient(space, scale=0.0)
    d = smooth_gradient(space, g)
    assert np.all(d.coeffs == 0.0)
    assert d.h1_norm() == 0.0


def test_smooth_uniform_gradient_is_radial(space):
    # concentric circles: a constant density must produce a radial field
    d = smooth_gradient(space, unit_gradient(space))
    disp = d.vertex_displacement()
    obs = space.mesh.obstacle_nodes()
    mags = np.linalg.norm(disp[obs], axis=1)
    assert np.std(mags) <= 0.05 * np.mean(mags)
    rad = space.mesh.nodes[obs] / np.linalg.norm(space.mesh.nodes[obs],
                                                 axis=1, keepdims=True)
    radial = np.einsum("na,na->n", disp[obs], rad)
    assert np.max(np.abs(np.abs(radial) - mags)) <= 0.05 * np.mean(mags)


def test_smooth_is_linear(space):
    d1 = smooth_gradient(space, unit_gradient(space))
    d2 = smooth_gradient(space, unit_gradient(space, scale=2.0))
    assert np.max(np.abs(d2.coeffs - 2.0 * d1.coeffs)) \
        <= 1e-8 * np.max(np.abs(d1.coeffs))


def test_smooth_outer_boundary_pinned(space):
    d = smooth_gradient(space, unit_gradient(space))
    outer = space.velocity_dofs(BoundaryTag.OUTER)
    assert np.all(d.coeffs[outer] == 0.0)
    assert np.max(np.abs(d.coeffs)) > 0.0


def field_from(vec):
    v = np.asarray(vec, dtype=float)
    return DescentField(v, sps.identity(len(v), format="csr"), None)


def test_adapt_step_opposite_fields_shrink():
    ctrl = StepController(step=1.0)
    d = field_from([1.0, 0.0])
    adapt_step(ctrl, d, field_from([-1.0, 0.0]))
    assert ctrl.step == 0.5


def test_adapt_step_aligned_fields_grow():
    ctrl = StepController(step=1.0)
    d = field_from([1.0, 0.0])
    adapt_step(ctrl, d, field_from([1.0, 0.0]))
    assert ctrl.step == 1.2


def test_adapt_step_orthogonal_fields_hold():
    ctrl = StepController(step=1.0)
    adapt_step(ctrl, field_from([1.0, 0.0]), field_from([0.0, 1.0]))
    assert ctrl.step == 1.0


def test_adapt_step_failure_takes_precedence():
    ctrl = StepController(step=1.0)
    d = field_from([1.0, 0.0])
    adapt_step(ctrl, d, field_from([1.0, 0.0]), morph_failed=True)
    assert ctrl.step == 0.5


def test_adapt_step_first_iteration_holds():
    ctrl = StepController(step=2.0)
    adapt_step(ctrl, field_from([1.0, 0.0]), None)
    assert ctrl.step == 2.0


def test_step_controller_validation():
    with pytest.raises(ConfigError):
        StepController(shrink=1.5)
    with pytest.raises(ConfigError):
        StepController(growth=0.9)
    with pytest.raises(ConfigError):
        StepController(step=-1.0)
    with pytest.raises(ConfigError):
        StepController(max_retries=-1)


@pytest.fixture(scope="module")
def donor_target():
    mesh = generate_annulus_mesh(0.8, circle_boundary(0.2), 0.07)
    state = solve_forward(TaylorHoodSpace(mesh), quick_config())
    return TargetField.from_trajectory(state)


def test_run_single_iteration(tmp_path, donor_target):
    mesh = generate_annulus_mesh(0.8, circle_boundary(0.25), 0.085)
    final, records = run(mesh, quick_config(), TRACKING, 1, tmp_path,
                         target=donor_target)
    assert len(records) == 1
    rec = records[0]
    assert rec.iteration == 1 and rec.J > 0.0 and rec.grad_norm > 0.0
    assert rec.step > 0.0 and rec.area > 0.0 and rec.min_quality > 0.0
    assert (tmp_path / "mesh_0001.txt").exists()
    with open(tmp_path / "history.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == HISTORY_HEADER
    assert len(rows) == 2 and rows[1][0] == "1"
    # outer boundary pinned exactly, obstacle moved
    outer = mesh.nodes_of(BoundaryTag.OUTER)
    assert np.array_equal(final.nodes[outer], mesh.nodes[outer])
    obs = mesh.obstacle_nodes()
    assert np.max(np.abs(final.nodes[obs] - mesh.nodes[obs])) > 0.0


def test_run_first_wall_move_is_five_percent_of_diameter(tmp_path,
                                                         donor_target):
    mesh = generate_annulus_mesh(0.8, circle_boundary(0.25), 0.085)
    final, _ = run(mesh, quick_config(), TRACKING, 1, tmp_path,
                   target=donor_target)
    obs = mesh.obstacle_nodes()
    moved = np.linalg.norm(final.nodes[obs] - mesh.nodes[obs], axis=1).max()
    assert abs(moved - 0.05 * 0.5) <= 0.2 * 0.05 * 0.5


def test_run_replay_is_deterministic(tmp_path, donor_target):
    mesh = generate_annulus_mesh(0.8, circle_boundary(0.25), 0.085)
    _, rec1 = run(mesh, quick_config(), TRACKING, 3, tmp_path / "a",
                  target=donor_target)
    _, rec2 = run(mesh, quick_config(), TRACKING, 3, tmp_path / "b",
                  target=donor_target)
    for a, b in zip(rec1, rec2):
        assert (a.iteration, a.J, a.grad_norm, a.step, a.area,
                a.min_quality) == (b.iteration, b.J, b.grad_norm, b.step,
                                   b.area, b.min_quality)


def test_run_from_target_mesh_is_a_fixed_point(tmp_path):
    mesh = generate_annulus_mesh(0.8, circle_boundary(0.2), 0.07)
    state = solve_forward(TaylorHoodSpace(mesh), quick_config())
    target = TargetField.from_trajectory(state)
    final, records = run(mesh, quick_config(), TRACKING, 5, tmp_path,
                         target=target)
    assert len(records) == 5
    obs = mesh.obstacle_nodes()
    drift = np.linalg.norm(final.nodes[obs] - mesh.nodes[obs], axis=1).max()
    assert drift <= 1e-6
    assert all(r.J <= 1e-20 for r in records)


def test_run_vorticity_cost(tmp_path):
    mesh = generate_annulus_mesh(0.8, circle_boundary(0.25), 0.085)
    final, records = run(mesh, quick_config(), VORTICITY, 2, tmp_path)
    assert len(records) == 2
    assert records[0].J > 0.0


def test_run_exhausts_retries_on_absurd_step(tmp_path, donor_target):
    mesh = generate_annulus_mesh(0.8, circle_boundary(0.25), 0.085)
    ctrl = StepController(step=1e9, max_retries=3)
    with pytest.raises(MorphExhaustedError) as err:
        run(mesh, quick_config(), TRACKING, 1, tmp_path, target=donor_target,
            controller=ctrl)
    assert err.value.iteration == 1


def test_run_no_two_consecutive_increases(tmp_path, donor_target):
    mesh = generate_annulus_mesh(0.8, circle_boundary(0.25), 0.085)
    _, records = run(mesh, quick_config(), TRACKING, 6, tmp_path,
                     target=donor_target)
    J = [r.J for r in records]
    for k in range(2, len(J)):
        assert not (J[k] > J[k - 1] and J[k - 1] > J[k - 2])


def test_run_validates_inputs(tmp_path, donor_target):
    mesh = generate_annulus_mesh(0.8, circle_boundary(0.25), 0.085)
    with pytest.raises(ConfigError):
        run(mesh, quick_config(), "energy", 1, tmp_path)
    with pytest.raises(ConfigError):
        run(mesh, quick_config(), TRACKING, 1, tmp_path)
    with pytest.raises(ConfigError):
        run(mesh, quick_config(), TRACKING, 0, tmp_path, target=donor_target)


def test_run_propagates_divergence_with_iteration(tmp_path, donor_target):
    mesh = generate_annulus_mesh(0.8, circle_boundary(0.25), 0.085)
    cfg = ProblemConfig(alpha=0.1, dt=0.1, t_final=0.3, outer_bc=rotation_bc,
                        body_force=swirl_force, max_nonlinear_iter=0)
    with pytest.raises(NonlinearDivergenceError) as err:
        run(mesh, cfg, TRACKING, 1, tmp_path, target=donor_target)
    assert err.value.iteration == 0
