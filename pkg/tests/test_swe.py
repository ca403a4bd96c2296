import numpy as np
import pytest

from obs_impact import swe
from obs_impact.config import ScenarioConfig
from obs_impact.errors import NonFiniteState, NonPositiveDepth
from tests.conftest import small_scenario


def rk4_central_reference(state, n_steps, cfg):
    """Independent re-implementation of the scheme with explicit loops:
    pointwise fluxes, ghost reflection, central differences, RK4.  Slow
    but written from the equations, not from the library code."""
    g = cfg.g
    q = cfg.q
    dx = cfg.dx

    def fluxes(u):
        fx = np.zeros_like(u)
        fy = np.zeros_like(u)
        for i in range(q):
            for j in range(q):
                h, uh, vh = u[0, i, j], u[1, i, j], u[2, i, j]
                fx[0, i, j] = uh
                fx[1, i, j] = uh * uh / h + 0.5 * g * h * h
                fx[2, i, j] = uh * vh / h
                fy[0, i, j] = vh
                fy[1, i, j] = uh * vh / h
                fy[2, i, j] = vh * vh / h + 0.5 * g * h * h
        return fx, fy

    sign_x = {0: -1.0, 1: 1.0, 2: -1.0}
    sign_y = {0: -1.0, 1: -1.0, 2: 1.0}

    def tendency(u):
        fx, fy = fluxes(u)
        out = np.zeros_like(u)
        for c in range(3):
            for i in range(q):
                for j in range(q):
                    right = fx[c, i, j + 1] if j + 1 < q else sign_x[c] * fx[c, i, q - 1]
                    left = fx[c, i, j - 1] if j - 1 >= 0 else sign_x[c] * fx[c, i, 0]
                    north = fy[c, i + 1, j] if i + 1 < q else sign_y[c] * fy[c, q - 1, j]
                    south = fy[c, i - 1, j] if i - 1 >= 0 else sign_y[c] * fy[c, 0, j]
                    out[c, i, j] = -((right - left) + (north - south)) / (2.0 * dx)
        return out

    u = state.copy()
    dt = cfg.dt
    for _ in range(n_steps):
        k1 = tendency(u)
        k2 = tendency(u + 0.5 * dt * k1)
        k3 = tendency(u + 0.5 * dt * k2)
        k4 = tendency(u + dt * k3)
        u = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return u


def test_lake_at_rest_is_fixed_point():
    cfg = small_scenario()
    rest = np.zeros((3, cfg.q, cfg.q))
    rest[0] = 7.3
    out = swe.step(rest, cfg)
    assert np.max(np.abs(out - rest)) <= 1e-13 * 7.3


def test_mass_conserved_single_step():
    cfg = ScenarioConfig(q=40)
    x0 = swe.make_reference_initial_state(cfg)
    m0 = swe.mass(x0, cfg)
    m1 = swe.mass(swe.step(x0, cfg), cfg)
    assert abs(m1 - m0) <= 1e-12 * abs(m0)


def test_mass_conserved_along_trajectory():
    cfg = small_scenario()
    traj = swe.propagate(swe.make_reference_initial_state(cfg), 50, cfg)
    masses = [swe.mass(s, cfg) for s in traj.states]
    assert (max(masses) - min(masses)) <= 1e-12 * masses[0]


def test_step_matches_independent_reference():
    cfg = ScenarioConfig(
        q=12, n_steps_window=20, obs_every=10, n_steps_verify=20, corr_length=1.5
    )
    x0 = swe.make_reference_initial_state(cfg)
    ours = swe.propagate(x0, 100, cfg).states[-1]
    ref = rk4_central_reference(x0, 100, cfg)
    assert np.max(np.abs(ours - ref)) <= 1e-10 * np.max(np.abs(ref))


def test_propagate_zero_steps_returns_input():
    cfg = small_scenario()
    x0 = swe.make_reference_initial_state(cfg)
    traj = swe.propagate(x0, 0, cfg)
    assert traj.states.shape[0] == 1
    assert np.array_equal(traj.states[0], x0)


def test_propagate_composition_is_bitwise():
    cfg = small_scenario()
    x0 = swe.make_reference_initial_state(cfg)
    whole = swe.propagate(x0, 15, cfg)
    first = swe.propagate(x0, 7, cfg)
    second = swe.propagate(first.states[-1], 8, cfg)
    assert np.array_equal(whole.states[-1], second.states[-1])
    again = swe.propagate(x0, 15, cfg)
    assert np.array_equal(whole.states, again.states)


def test_reference_state_moves_in_window():
    cfg = ScenarioConfig()
    traj = swe.propagate(swe.make_reference_initial_state(cfg), 100, cfg)
    assert np.all(np.isfinite(traj.states))
    assert np.max(np.abs(traj.states[-1][0] - traj.states[0][0])) > 0.0


def test_reference_state_construction():
    cfg = ScenarioConfig()
    x0 = swe.make_reference_initial_state(cfg)
    # center cells carry the bell maximum
    imax = np.unravel_index(np.argmax(x0[0]), x0[0].shape)
    assert imax in {(19, 19), (19, 20), (20, 19), (20, 20)}
    eps = cfg.dx / 2.0
    expected = cfg.h_base + cfg.bell_amplitude * np.exp(
        -2.0 * eps**2 / (2.0 * cfg.bell_sigma**2)
    )
    assert abs(x0[0][imax] - expected) <= 1e-12 * expected
    # symmetric under x <-> y reflection
    assert np.max(np.abs(x0[0] - x0[0].T)) <= 1e-15 * np.max(x0[0])


def test_reference_bell_volume_matches_gaussian_integral():
    cfg = ScenarioConfig()
    x0 = swe.make_reference_initial_state(cfg)
    vol = np.sum(x0[0] - cfg.h_base) * cfg.dx * cfg.dx
    exact = 2.0 * np.pi * cfg.bell_sigma**2 * cfg.bell_amplitude
    assert abs(vol - exact) <= 0.02 * exact


def test_spatial_convergence_toward_fine_grid():
    # halving dx (with dt fixed well below both CFL limits) must shrink the
    # error vs a fine-grid reference; the measured rate should be second
    # order-ish for this smooth flow
    def run(q, steps):
        cfg = ScenarioConfig(
            q=q, dt=0.0005, n_steps_window=steps, obs_every=steps,
            n_steps_verify=steps, corr_length=q / 8.0,
        )
        x0 = swe.make_reference_initial_state(cfg)
        end = swe.propagate(x0, steps, cfg).states[-1]
        return end[0]

    steps = 40
    coarse = run(10, steps)
    mid = run(20, steps)
    fine = run(40, steps)

    def restrict(h):  # 2x block mean onto the q=10 grid
        q = h.shape[0]
        f = q // 10
        return h.reshape(10, f, 10, f).mean(axis=(1, 3))

    err_coarse = np.max(np.abs(coarse - restrict(fine)))
    err_mid = np.max(np.abs(restrict(mid) - restrict(fine)))
    assert err_mid < err_coarse
    rate = np.log2(err_coarse / err_mid)
    assert rate > 1.2  # second-order stencil, first-order-ish near walls


def test_nonfinite_input_raises():
    cfg = small_scenario()
    x0 = swe.make_reference_initial_state(cfg)
    x0[1, 3, 3] = np.nan
    with pytest.raises(NonFiniteState):
        swe.step(x0, cfg)


def test_nonpositive_depth_raises_with_step_index():
    cfg = small_scenario()
    x0 = swe.make_reference_initial_state(cfg)
    x0[0] -= x0[0].min() - 1e-9  # nearly dry layer collapses quickly
    with pytest.raises((NonPositiveDepth, NonFiniteState)):
        swe.propagate(x0, 200, cfg)


def test_fast_kernel_matches_reference_rhs(rng):
    cfg = small_scenario()
    x0 = swe.make_reference_initial_state(cfg)
    x0 += 0.01 * rng.standard_normal(x0.shape) * x0
    fast = swe.rhs(x0, cfg)
    ref = swe.rhs_reference(x0, cfg)
    assert np.max(np.abs(fast - ref)) <= 1e-13 * max(np.max(np.abs(ref)), 1.0)
