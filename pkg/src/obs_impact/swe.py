"""Discrete 2D shallow-water forward model.

Array conventions, used everywhere in the package:

* a state is a float64 array of shape (3, q, q): channel 0 is the fluid
  thickness h, channel 1 the x-momentum uh, channel 2 the y-momentum vh;
* index order is [var, i, j] with i the row (south-north) and j the
  column (west-east);
* the flat form is ``state.reshape(3*q*q)``, i.e. the h block first,
  then uh, then vh, each row-major.  Block offsets 0, q^2 and 2*q^2 are
  part of the external contract.

Space discretization: conservative flux form with second-order central
differences of the pointwise fluxes on a cell-centered grid, closed by
reflective solid walls (ghost cells mirror h and the tangential momentum
and negate the normal momentum).  Time discretization: classical 4-stage
Runge-Kutta.  Total mass sum(h) is conserved to roundoff because the
ghost closure makes the h-flux differences telescope to zero.
"""

from dataclasses import dataclass

import numpy as np

from . import _fastkernels as _fast
from .config import ScenarioConfig
from .errors import NonFiniteState, NonPositiveDepth, TrajectoryMismatch

H, UH, VH = 0, 1, 2


def flatten(state: np.ndarray) -> np.ndarray:
    """State (3, q, q) -> flat vector (3*q*q,)."""
    return np.ascontiguousarray(state).reshape(-1)


def unflatten(vec: np.ndarray, q: int) -> np.ndarray:
    """Flat vector -> state (3, q, q); raises on wrong length."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != 3 * q * q:
        from .errors import DimensionMismatch

        raise DimensionMismatch(
            f"expected {3 * q * q} entries for q={q}, got {vec.size}"
        )
    return vec.reshape(3, q, q)


def make_reference_initial_state(cfg: ScenarioConfig) -> np.ndarray:
    """Gaussian bell in h centered on the grid over a flat base depth;
    momenta set from constant velocities u_const, v_const."""
    c = cfg.cell_centers()
    r2 = c[:, None] ** 2 + c[None, :] ** 2
    h = cfg.h_base + cfg.bell_amplitude * np.exp(-r2 / (2.0 * cfg.bell_sigma**2))
    state = np.empty((3, cfg.q, cfg.q))
    state[H] = h
    state[UH] = cfg.u_const * h
    state[VH] = cfg.v_const * h
    return state


def mass(state: np.ndarray, cfg: ScenarioConfig) -> float:
    """Total fluid volume sum(h)*dx*dy."""
    return float(state[H].sum()) * cfg.dx * cfg.dx


# Ghost signs for the flux fields.  Reflecting a wall state mirrors h and
# the tangential momentum and negates the normal momentum, so the x-flux
# components (uh, u^2 h + g h^2/2, u v h) pick up signs (-, +, -) in the
# x ghost cells, and the y-flux components (vh, u v h, v^2 h + g h^2/2)
# pick up (-, -, +) in the y ghost cells.
_SIGN_X = np.array([-1.0, 1.0, -1.0]).reshape(3, 1, 1)
_SIGN_Y = np.array([-1.0, -1.0, 1.0]).reshape(3, 1, 1)


def _flux_x(state, g):
    h, uh, vh = state[H], state[UH], state[VH]
    u = uh / h
    f = np.empty_like(state)
    f[0] = uh
    f[1] = uh * u + 0.5 * g * h * h
    f[2] = vh * u
    return f


def _flux_y(state, g):
    h, uh, vh = state[H], state[UH], state[VH]
    v = vh / h
    f = np.empty_like(state)
    f[0] = vh
    f[1] = uh * v
    f[2] = vh * v + 0.5 * g * h * h
    return f


def _ddx(f, sign, dx, axis):
    """Central difference of the ghost-padded flux stack along axis
    (1 = rows/y, 2 = columns/x, counted from the channel axis).

    The ghost slice equals the edge slice times the per-variable sign,
    which realizes the reflective-wall closure on the flux level.
    """
    pad = [(0, 0)] * f.ndim
    pad[axis - 3] = (1, 1)  # negative axis: works for leading batch dims too
    fp = np.pad(f, pad, mode="edge")
    if axis == 1:
        fp[..., 0, :] *= sign[:, 0, :]
        fp[..., -1, :] *= sign[:, 0, :]
        out = fp[..., 2:, :] - fp[..., :-2, :]
    else:
        fp[..., :, 0] *= sign[:, :, 0]
        fp[..., :, -1] *= sign[:, :, 0]
        out = fp[..., :, 2:] - fp[..., :, :-2]
    out *= 1.0 / (2.0 * dx)
    return out


def rhs(state: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    """Semi-discrete tendency d(state)/dt of the flux-form equations."""
    if _fast.AVAILABLE and state.ndim == 3:
        return _fast.rhs_kernel(
            np.ascontiguousarray(state), cfg.g, 1.0 / (2.0 * cfg.dx)
        )
    return rhs_reference(state, cfg)


def rhs_reference(state: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    """Pure-numpy tendency; the compiled kernel must match it to roundoff."""
    g = cfg.g
    out = _ddx(_flux_x(state, g), _SIGN_X, cfg.dx, axis=2)
    out += _ddx(_flux_y(state, g), _SIGN_Y, cfg.dx, axis=1)
    out *= -1.0
    return out


def step_with_stages(state: np.ndarray, cfg: ScenarioConfig):
    """One RK4 step; returns (next_state, stage_states).

    stage_states is a (4, 3, q, q) array holding the four states the
    right-hand side was evaluated at; the linearized sweeps re-linearize
    around exactly these values.
    """
    dt = cfg.dt
    stages = np.empty((4,) + state.shape)
    stages[0] = state
    k1 = rhs(state, cfg)
    stages[1] = state + (0.5 * dt) * k1
    k2 = rhs(stages[1], cfg)
    stages[2] = state + (0.5 * dt) * k2
    k3 = rhs(stages[2], cfg)
    stages[3] = state + dt * k3
    k4 = rhs(stages[3], cfg)
    nxt = state + (dt / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
    return nxt, stages


def _check_state(state, step_index=None):
    if not np.all(np.isfinite(state)):
        raise NonFiniteState(
            "state contains NaN/Inf; timestep likely violates CFL",
            step_index=step_index,
        )
    if np.any(state[H] <= 0.0):
        raise NonPositiveDepth("fluid thickness h <= 0")


def step(state: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    """Advance one timestep dt.  Raises NonFiniteState/NonPositiveDepth on
    invalid output."""
    _check_state(state)
    nxt, _ = step_with_stages(state, cfg)
    _check_state(nxt)
    return nxt


@dataclass
class Trajectory:
    """States at steps 0..n_steps plus the matching physical times."""

    states: np.ndarray  # (n_steps+1, 3, q, q)
    times: np.ndarray  # (n_steps+1,)

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    def state(self, k: int) -> np.ndarray:
        return self.states[k]


@dataclass
class CheckpointStore:
    """RK4 stage states for every step of a trajectory, for reverse sweeps.

    stages[k] holds the four stage states of the step x_k -> x_{k+1}.
    """

    x0: np.ndarray  # (3, q, q), the trajectory start, identity check
    stages: np.ndarray  # (n_steps, 4, 3, q, q)

    @property
    def n_steps(self) -> int:
        return self.stages.shape[0]

    def check_matches(self, x0: np.ndarray):
        if self.x0.shape != x0.shape or not np.array_equal(self.x0, x0):
            raise TrajectoryMismatch(
                "checkpoint store was built for a different initial state"
            )


def propagate(
    x0: np.ndarray, n_steps: int, cfg: ScenarioConfig, record_stages=False
):
    """Integrate n_steps timesteps from x0.

    Returns a Trajectory, or (Trajectory, CheckpointStore) when
    record_stages is set.  Step failures re-raise with the failing step
    index attached.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    q = x0.shape[-1]
    states = np.empty((n_steps + 1, 3, q, q))
    states[0] = x0
    all_stages = np.empty((n_steps, 4, 3, q, q)) if record_stages else None
    _check_state(x0, step_index=0)
    x = x0
    for k in range(n_steps):
        x, stages = step_with_stages(x, cfg)
        try:
            _check_state(x, step_index=k + 1)
        except NonPositiveDepth:
            raise NonPositiveDepth(f"h <= 0 produced at step {k + 1}") from None
        states[k + 1] = x
        if record_stages:
            all_stages[k] = stages
    times = np.arange(n_steps + 1) * cfg.dt
    traj = Trajectory(states=states, times=times)
    if record_stages:
        return traj, CheckpointStore(x0=np.array(x0), stages=all_stages)
    return traj
