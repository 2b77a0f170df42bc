"""Tests for the implicit flow solver."""

import numpy as np
import pytest

from nsshape import (BoundaryTag, ConfigError, NonlinearDivergenceError,
                     circle_boundary, generate_annulus_mesh,
                     generate_square_mesh)
from nsshape.fem import TaylorHoodSpace
from nsshape.forward import (ProblemConfig, evaluate_state, kinetic_energy,
                             solve_forward)


@pytest.fixture(scope="module")
def annulus_space():
    mesh = generate_annulus_mesh(0.8, circle_boundary(0.2), 0.075)
    return TaylorHoodSpace(mesh)


@pytest.fixture(scope="module")
def square_space():
    return TaylorHoodSpace(generate_square_mesh(8))


def rotation_bc(points, t):
    out = np.empty_like(points)
    out[:, 0] = 0.15 * points[:, 1]
    out[:, 1] = -0.15 * points[:, 0]
    return out


def test_config_validation():
    with pytest.raises(ConfigError):
        ProblemConfig(alpha=0.0, dt=0.1, t_final=1.0)
    with pytest.raises(ConfigError):
        ProblemConfig(alpha=0.1, dt=-0.1, t_final=1.0)
    with pytest.raises(ConfigError):
        ProblemConfig(alpha=0.1, dt=0.3, t_final=1.0)
    with pytest.raises(ConfigError):
        ProblemConfig(alpha=0.1, dt=0.1, t_final=1.0, linearization="exact")
    cfg = ProblemConfig(alpha=0.1, dt=0.05, t_final=1.0)
    assert cfg.n_steps == 20
    assert np.allclose(cfg.times(), 0.05 * np.arange(21))


def test_zero_data_gives_zero_trajectory(annulus_space):
    cfg = ProblemConfig(alpha=0.1, dt=0.1, t_final=0.5)
    traj = solve_forward(annulus_space, cfg)
    assert traj.n_levels == 6
    assert np.all(traj.velocities == 0.0)
    assert np.all(traj.pressures == 0.0)


def test_deterministic_rerun(annulus_space):
    cfg = ProblemConfig(alpha=0.1, dt=0.1, t_final=0.3, outer_bc=rotation_bc)
    a = solve_forward(annulus_space, cfg)
    b = solve_forward(annulus_space, cfg)
    assert np.array_equal(a.velocities, b.velocities)
    assert np.array_equal(a.pressures, b.pressures)


def test_solved_levels_discretely_divergence_free(annulus_space):
    cfg = ProblemConfig(alpha=0.1, dt=0.1, t_final=0.5, outer_bc=rotation_bc)
    traj = solve_forward(annulus_space, cfg)
    B = annulus_space.divergence
    m = annulus_space.pressure_load
    for k in range(1, traj.n_levels):
        u, p = evaluate_state(traj, k)
        assert np.linalg.norm(B @ u) <= 1e-9 * max(1.0, np.linalg.norm(u))
        assert abs(m @ p) <= 1e-10


def test_picard_matches_newton(annulus_space):
    base = dict(alpha=0.1, dt=0.1, t_final=0.2, outer_bc=rotation_bc)
    a = solve_forward(annulus_space, ProblemConfig(**base))
    b = solve_forward(annulus_space,
                      ProblemConfig(linearization="picard", **base))
    err = np.max(np.abs(a.velocities - b.velocities))
    assert err <= 1e-7 * max(1.0, np.max(np.abs(a.velocities)))


def test_iteration_cap_raises(annulus_space):
    cfg = ProblemConfig(alpha=0.1, dt=0.1, t_final=0.2, outer_bc=rotation_bc,
                        max_nonlinear_iter=0)
    with pytest.raises(NonlinearDivergenceError):
        solve_forward(annulus_space, cfg)


def test_incompatible_boundary_flux_raises(annulus_space):
    def radial(points, t):
        r = np.hypot(points[:, 0], points[:, 1])
        return 0.1 * points / r[:, None]

    cfg = ProblemConfig(alpha=0.1, dt=0.1, t_final=0.1, outer_bc=radial)
    with pytest.raises(ConfigError):
        solve_forward(annulus_space, cfg)


def _rigid_rotation_error(space, dt):
    # y = t^2 (-y, x) with the convective term moved into the forcing; the
    # velocity is linear in space so the error left is the time error.
    def exact(points, t):
        return t * t * np.stack([-points[:, 1], points[:, 0]], axis=1)

    def force(points, t):
        x, y = points[:, 0], points[:, 1]
        return np.stack([2.0 * t * (-y) + t ** 4 * (-x),
                         2.0 * t * x + t ** 4 * (-y)], axis=1)

    cfg = ProblemConfig(alpha=0.1, dt=dt, t_final=1.0, body_force=force,
                        outer_bc=exact)
    traj = solve_forward(space, cfg)
    u_end = traj.velocities[-1]
    diff = u_end - space.interpolate_velocity(exact, 1.0)
    return float(np.sqrt(diff @ (space.mass @ diff)))


def test_rigid_rotation_first_order_in_dt(square_space):
    errs = [_rigid_rotation_error(square_space, dt)
            for dt in (0.2, 0.1, 0.05)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.array(errs) > 0.0)
    assert np.all(orders >= 0.8), (errs, orders)


def test_stokes_mode_energy_monotone(square_space):
    def initial(points, t=None):
        x, y = points[:, 0], points[:, 1]
        gx = x * (1.0 - x)
        gy = y * (1.0 - y)
        dgx = 1.0 - 2.0 * x
        dgy = 1.0 - 2.0 * y
        # curl of the stream function (gx * gy)^2
        return np.stack([2.0 * gx * gx * gy * dgy,
                         -2.0 * gx * dgx * gy * gy], axis=1)

    cfg = ProblemConfig(alpha=0.05, dt=0.05, t_final=0.5,
                        initial_velocity=initial, linearization="picard",
                        max_nonlinear_iter=0)
    traj = solve_forward(square_space, cfg)
    energies = [kinetic_energy(traj, k) for k in range(traj.n_levels)]
    assert energies[0] > 0.0
    for a, b in zip(energies, energies[1:]):
        assert b <= a + 1e-14
    assert energies[-1] < 0.5 * energies[0]


def test_evaluate_state_bounds(annulus_space):
    cfg = ProblemConfig(alpha=0.1, dt=0.1, t_final=0.2)
    traj = solve_forward(annulus_space, cfg)
    with pytest.raises(IndexError):
        evaluate_state(traj, 3)
    with pytest.raises(IndexError):
        evaluate_state(traj, -1)
    u, p = evaluate_state(traj, 2)
    assert u.shape == (annulus_space.n_u,)
    assert p.shape == (annulus_space.n_p,)
