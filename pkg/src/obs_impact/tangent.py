"""Tangent-linear, first-order adjoint, and second-order adjoint models.

All three are derived line-by-line from the discrete step in swe.py, so
the adjoint is the exact transpose of the tangent propagator and the
Hessian products assembled from these sweeps are exact for the discrete
cost (not approximations of the continuous equations).

Perturbations carry an optional leading batch axis: shape (3, q, q) for a
single direction or (m, 3, q, q) for m directions propagated together.
The stencil/ghost operators below are linear with fixed coefficients, so
their adjoints are explicit scatter versions of the gathers.
"""

import numpy as np

from . import _fastkernels as _fast
from .config import ScenarioConfig
from .errors import NonFiniteState
from .swe import _SIGN_X, _SIGN_Y, _ddx, CheckpointStore, propagate

H, UH, VH = 0, 1, 2


def _ddx_T(w, sign, dx, axis):
    """Adjoint of _ddx: scatter the central-difference weights back onto
    the un-padded flux array, folding the ghost contributions onto their
    source cells with the ghost sign."""
    scale = 1.0 / (2.0 * dx)
    fbar = np.zeros(w.shape, dtype=w.dtype)
    if axis == 1:
        # out[..., i, :] = (fp[..., i+2, :] - fp[..., i, :]) * scale with
        # fp rows 0 and q+1 being signed copies of rows 0 and q-1.
        fbar[..., 1:, :] += w[..., :-1, :] * scale
        fbar[..., :-1, :] -= w[..., 1:, :] * scale
        fbar[..., -1, :] += sign[:, 0, :] * (w[..., -1, :] * scale)
        fbar[..., 0, :] -= sign[:, 0, :] * (w[..., 0, :] * scale)
    else:
        fbar[..., :, 1:] += w[..., :, :-1] * scale
        fbar[..., :, :-1] -= w[..., :, 1:] * scale
        fbar[..., :, -1] += sign[:, :, 0] * (w[..., :, -1] * scale)
        fbar[..., :, 0] -= sign[:, :, 0] * (w[..., :, 0] * scale)
    return fbar


class _StageCoeffs:
    """Pointwise flux-Jacobian coefficient fields at one linearization
    state.  Computing them once per stage makes batched sweeps cheap.

    x-flux F = (uh, uh*u + g h^2/2, vh*u) with u = uh/h has Jacobian rows
      F1: ( 0,          1,    0 )
      F2: ( g h - u^2,  2 u,  0 )
      F3: ( -u v,       v,    u )
    and the y-flux is the mirror image with u <-> v and rows 2/3 swapped.
    """

    __slots__ = ("u", "v", "gh_m_u2", "gh_m_v2", "uv", "inv_h")

    def __init__(self, state, g):
        h = state[H]
        inv_h = 1.0 / h
        u = state[UH] * inv_h
        v = state[VH] * inv_h
        self.u = u
        self.v = v
        self.inv_h = inv_h
        self.gh_m_u2 = g * h - u * u
        self.gh_m_v2 = g * h - v * v
        self.uv = u * v


def _flux_x_jvp(c: _StageCoeffs, dv):
    da, db, dc = dv[..., H, :, :], dv[..., UH, :, :], dv[..., VH, :, :]
    out = np.empty_like(dv)
    out[..., 0, :, :] = db
    out[..., 1, :, :] = c.gh_m_u2 * da + (2.0 * c.u) * db
    out[..., 2, :, :] = (-c.uv) * da + c.v * db + c.u * dc
    return out


def _flux_y_jvp(c: _StageCoeffs, dv):
    da, db, dc = dv[..., H, :, :], dv[..., UH, :, :], dv[..., VH, :, :]
    out = np.empty_like(dv)
    out[..., 0, :, :] = dc
    out[..., 1, :, :] = (-c.uv) * da + c.v * db + c.u * dc
    out[..., 2, :, :] = c.gh_m_v2 * da + (2.0 * c.v) * dc
    return out


def _flux_x_vjp(c: _StageCoeffs, w):
    w1, w2, w3 = w[..., 0, :, :], w[..., 1, :, :], w[..., 2, :, :]
    out = np.empty_like(w)
    out[..., H, :, :] = c.gh_m_u2 * w2 + (-c.uv) * w3
    out[..., UH, :, :] = w1 + (2.0 * c.u) * w2 + c.v * w3
    out[..., VH, :, :] = c.u * w3
    return out


def _flux_y_vjp(c: _StageCoeffs, w):
    w1, w2, w3 = w[..., 0, :, :], w[..., 1, :, :], w[..., 2, :, :]
    out = np.empty_like(w)
    out[..., H, :, :] = (-c.uv) * w2 + c.gh_m_v2 * w3
    out[..., UH, :, :] = c.v * w2
    out[..., VH, :, :] = w1 + c.u * w2 + (2.0 * c.v) * w3
    return out


def _flux_x_dvjp(c: _StageCoeffs, g, dv, w):
    """Directional derivative of _flux_x_vjp in state direction dv:
    d/de [F'(s + e*dv)^T w].  Only the Jacobian coefficients depend on the
    state; their directional derivatives are assembled from

      d(u)      = (db - u da) / h
      d(gh-u^2) = g da - 2 u d(u)
      d(uv)     = u d(v) + v d(u)
    """
    da, db, dc = dv[..., H, :, :], dv[..., UH, :, :], dv[..., VH, :, :]
    du = (db - c.u * da) * c.inv_h
    dW = (dc - c.v * da) * c.inv_h
    d_gh_m_u2 = g * da - 2.0 * c.u * du
    d_uv = c.u * dW + c.v * du
    w2, w3 = w[..., 1, :, :], w[..., 2, :, :]
    out = np.empty_like(w)
    out[..., H, :, :] = d_gh_m_u2 * w2 + (-d_uv) * w3
    out[..., UH, :, :] = (2.0 * du) * w2 + dW * w3
    out[..., VH, :, :] = du * w3
    return out


def _flux_y_dvjp(c: _StageCoeffs, g, dv, w):
    da, db, dc = dv[..., H, :, :], dv[..., UH, :, :], dv[..., VH, :, :]
    du = (db - c.u * da) * c.inv_h
    dW = (dc - c.v * da) * c.inv_h
    d_gh_m_v2 = g * da - 2.0 * c.v * dW
    d_uv = c.u * dW + c.v * du
    w2, w3 = w[..., 1, :, :], w[..., 2, :, :]
    out = np.empty_like(w)
    out[..., H, :, :] = (-d_uv) * w2 + d_gh_m_v2 * w3
    out[..., UH, :, :] = dW * w2
    out[..., VH, :, :] = du * w2 + (2.0 * dW) * w3
    return out


def _rhs_jvp(c, cfg, dv):
    if _fast.AVAILABLE and dv.ndim == 4:
        return _fast.jvp_kernel(
            c.u, c.v, c.gh_m_u2, c.gh_m_v2, c.uv,
            np.ascontiguousarray(dv), 1.0 / (2.0 * cfg.dx),
        )
    return _rhs_jvp_reference(c, cfg, dv)


def _rhs_jvp_reference(c, cfg, dv):
    out = _ddx(_flux_x_jvp(c, dv), _SIGN_X, cfg.dx, axis=2)
    out += _ddx(_flux_y_jvp(c, dv), _SIGN_Y, cfg.dx, axis=1)
    out *= -1.0
    return out


def _rhs_vjp(c, cfg, w):
    if _fast.AVAILABLE and w.ndim == 4:
        return _fast.vjp_kernel(
            c.u, c.v, c.gh_m_u2, c.gh_m_v2, c.uv,
            np.ascontiguousarray(w), 1.0 / (2.0 * cfg.dx),
        )
    return _rhs_vjp_reference(c, cfg, w)


def _rhs_vjp_reference(c, cfg, w):
    out = _flux_x_vjp(c, _ddx_T(w, _SIGN_X, cfg.dx, axis=2))
    out += _flux_y_vjp(c, _ddx_T(w, _SIGN_Y, cfg.dx, axis=1))
    out *= -1.0
    return out


def _rhs_dvjp(c, cfg, dv, w):
    out = _flux_x_dvjp(c, cfg.g, dv, _ddx_T(w, _SIGN_X, cfg.dx, axis=2))
    out += _flux_y_dvjp(c, cfg.g, dv, _ddx_T(w, _SIGN_Y, cfg.dx, axis=1))
    out *= -1.0
    return out


def _stage_coeffs(stages, cfg):
    return [_StageCoeffs(stages[i], cfg.g) for i in range(4)]


def precompute_coeffs(ckpt: "CheckpointStore", cfg, n_steps=None):
    """Flux-Jacobian coefficients for every stage of every step.

    Hessian operators apply many sweeps around one linearization point;
    computing these once saves a third of the sweep cost.
    """
    n_steps = ckpt.n_steps if n_steps is None else n_steps
    return [_stage_coeffs(ckpt.stages[k], cfg) for k in range(n_steps)]


def step_tlm(coeffs, cfg, dv, want_stage_dirs=False):
    """Tangent of one RK4 step at the checkpointed stage states."""
    dt = cfg.dt
    dk1 = _rhs_jvp(coeffs[0], cfg, dv)
    s2 = dv + (0.5 * dt) * dk1
    dk2 = _rhs_jvp(coeffs[1], cfg, s2)
    s3 = dv + (0.5 * dt) * dk2
    dk3 = _rhs_jvp(coeffs[2], cfg, s3)
    s4 = dv + dt * dk3
    dk4 = _rhs_jvp(coeffs[3], cfg, s4)
    out = dv + (dt / 6.0) * (dk1 + 2.0 * (dk2 + dk3) + dk4)
    if want_stage_dirs:
        return out, (dv, s2, s3, s4)
    return out


def step_adjoint(coeffs, cfg, w):
    """Exact transpose of step_tlm at the same stage states."""
    dt = cfg.dt
    # bar variables of dk1..dk4 from the output combination
    bk1 = (dt / 6.0) * w
    bk2 = (dt / 3.0) * w
    bk3 = (dt / 3.0) * w
    bk4 = (dt / 6.0) * w
    out = w.copy()
    s4b = _rhs_vjp(coeffs[3], cfg, bk4)
    out += s4b
    bk3 += dt * s4b
    s3b = _rhs_vjp(coeffs[2], cfg, bk3)
    out += s3b
    bk2 += (0.5 * dt) * s3b
    s2b = _rhs_vjp(coeffs[1], cfg, bk2)
    out += s2b
    bk1 += (0.5 * dt) * s2b
    out += _rhs_vjp(coeffs[0], cfg, bk1)
    return out


def step_soa(coeffs, cfg, stage_dirs, w, dw):
    """Fused adjoint/second-order step.

    Runs step_adjoint on the dual pair (w, dw) where the linearization
    state is itself perturbed in the direction recorded by stage_dirs
    (the TLM stage inputs of the same step).  Returns

      (step'^T w,  step'^T dw + d/de[step'(x+e*u)^T w])

    which is exactly what the backward recursion of a Hessian-vector
    product needs.
    """
    dt = cfg.dt
    d1, d2, d3, d4 = stage_dirs

    bk1, dbk1 = (dt / 6.0) * w, (dt / 6.0) * dw
    bk2, dbk2 = (dt / 3.0) * w, (dt / 3.0) * dw
    bk3, dbk3 = (dt / 3.0) * w, (dt / 3.0) * dw
    bk4, dbk4 = (dt / 6.0) * w, (dt / 6.0) * dw
    out = w.copy()
    dout = dw.copy()

    s4b = _rhs_vjp(coeffs[3], cfg, bk4)
    ds4b = _rhs_vjp(coeffs[3], cfg, dbk4) + _rhs_dvjp(coeffs[3], cfg, d4, bk4)
    out += s4b
    dout += ds4b
    bk3 += dt * s4b
    dbk3 += dt * ds4b

    s3b = _rhs_vjp(coeffs[2], cfg, bk3)
    ds3b = _rhs_vjp(coeffs[2], cfg, dbk3) + _rhs_dvjp(coeffs[2], cfg, d3, bk3)
    out += s3b
    dout += ds3b
    bk2 += (0.5 * dt) * s3b
    dbk2 += (0.5 * dt) * ds3b

    s2b = _rhs_vjp(coeffs[1], cfg, bk2)
    ds2b = _rhs_vjp(coeffs[1], cfg, dbk2) + _rhs_dvjp(coeffs[1], cfg, d2, bk2)
    out += s2b
    dout += ds2b
    bk1 += (0.5 * dt) * s2b
    dbk1 += (0.5 * dt) * ds2b

    out += _rhs_vjp(coeffs[0], cfg, bk1)
    dout += _rhs_vjp(coeffs[0], cfg, dbk1) + _rhs_dvjp(coeffs[0], cfg, d1, bk1)
    return out, dout


def _as_batch(v):
    """(3,q,q) -> ((1,3,q,q), squeeze_flag)."""
    if v.ndim == 3:
        return v[None], True
    return v, False


def _checkpoints_for(x0, n_steps, cfg, ckpt):
    if ckpt is None:
        _, ckpt = propagate(x0, n_steps, cfg, record_stages=True)
    else:
        ckpt.check_matches(x0)
        if ckpt.n_steps < n_steps:
            from .errors import TrajectoryMismatch

            raise TrajectoryMismatch(
                f"checkpoint store has {ckpt.n_steps} steps, need {n_steps}"
            )
    return ckpt


def tlm_sweep(
    ckpt: CheckpointStore, cfg, dv, n_steps=None, record_steps=(), coeffs_seq=None
):
    """Propagate perturbation(s) dv forward n_steps with the tangent model.

    record_steps: step indices whose perturbation should be returned in a
    dict (used to gather observation-time perturbations in one sweep).
    """
    n_steps = ckpt.n_steps if n_steps is None else n_steps
    dv, squeeze = _as_batch(dv)
    recorded = {}
    if 0 in record_steps:
        recorded[0] = dv.copy()
    for k in range(n_steps):
        coeffs = (
            coeffs_seq[k] if coeffs_seq else _stage_coeffs(ckpt.stages[k], cfg)
        )
        dv = step_tlm(coeffs, cfg, dv)
        if (k + 1) in record_steps:
            recorded[k + 1] = dv.copy()
    out = dv[0] if squeeze else dv
    if record_steps:
        if squeeze:
            recorded = {k: v[0] for k, v in recorded.items()}
        return out, recorded
    return out


def adjoint_sweep(
    ckpt: CheckpointStore, cfg, w_end, n_steps=None, forcings=None, coeffs_seq=None
):
    """Backward sweep computing M^T w_end plus accumulated forcings.

    forcings maps step index k -> array added to the adjoint variable when
    the sweep passes time t_k (before stepping further back).  The result
    is sum_k M_{0,k}^T f_k + M_{0,n}^T w_end.
    """
    n_steps = ckpt.n_steps if n_steps is None else n_steps
    w, squeeze = _as_batch(w_end)
    w = w.copy()
    forcings = forcings or {}
    if n_steps in forcings:
        w += forcings[n_steps]
    for k in range(n_steps - 1, -1, -1):
        coeffs = (
            coeffs_seq[k] if coeffs_seq else _stage_coeffs(ckpt.stages[k], cfg)
        )
        w = step_adjoint(coeffs, cfg, w)
        if k in forcings:
            w = w + forcings[k]
    return w[0] if squeeze else w


def soa_sweep(
    ckpt: CheckpointStore,
    cfg,
    u,
    w_end,
    dw_end,
    n_steps=None,
    forcings=None,
    dforcing_times=(),
    dforcing_fn=None,
    coeffs_seq=None,
):
    """Second-order adjoint sweep.

    Forward: tangent-propagates u, keeping the per-step stage directions.
    Backward: carries the dual pair (w, dw); at each step index k listed
    in dforcing_times, dforcing_fn(k, du_k) is added to dw (du_k is the
    tangent perturbation at step k), and forcings[k] is added to w as in
    adjoint_sweep.  Returns (w_0, dw_0).

    Memory: stage directions for all steps are stored (4 states/step),
    which is the all-checkpoint policy used throughout.
    """
    n_steps = ckpt.n_steps if n_steps is None else n_steps
    u, squeeze = _as_batch(u)
    w, _ = _as_batch(w_end)
    dw, _ = _as_batch(dw_end)
    w = w.copy()
    dw = dw.copy()
    forcings = forcings or {}

    coeffs_all = []
    dirs_all = []
    du = {}
    dv = u
    if 0 in dforcing_times:
        du[0] = dv.copy()
    for k in range(n_steps):
        coeffs = (
            coeffs_seq[k] if coeffs_seq else _stage_coeffs(ckpt.stages[k], cfg)
        )
        dv, dirs = step_tlm(coeffs, cfg, dv, want_stage_dirs=True)
        coeffs_all.append(coeffs)
        dirs_all.append(dirs)
        if (k + 1) in dforcing_times:
            du[k + 1] = dv.copy()

    if n_steps in forcings:
        w += forcings[n_steps]
    if n_steps in du:
        dw += dforcing_fn(n_steps, du[n_steps])
    for k in range(n_steps - 1, -1, -1):
        w, dw = step_soa(coeffs_all[k], cfg, dirs_all[k], w, dw)
        if k in forcings:
            w = w + forcings[k]
        if k in du:
            dw = dw + dforcing_fn(k, du[k])
    if squeeze:
        return w[0], dw[0], dv[0]
    return w, dw, dv


def _check_finite(v, what):
    if not np.all(np.isfinite(v)):
        raise NonFiniteState(f"{what} produced non-finite values")


def tlm(x0, dx0, n_steps: int, cfg: ScenarioConfig, ckpt=None):
    """M_{0,n} dx0: exact Jacobian-vector product of propagate."""
    ckpt = _checkpoints_for(x0, n_steps, cfg, ckpt)
    out = tlm_sweep(ckpt, cfg, np.asarray(dx0, dtype=np.float64), n_steps)
    _check_finite(out, "tangent-linear sweep")
    return out


def foa(x0, lam_f, n_steps: int, cfg: ScenarioConfig, ckpt=None):
    """M_{0,n}^T lam_f: exact transposed Jacobian-vector product."""
    ckpt = _checkpoints_for(x0, n_steps, cfg, ckpt)
    out = adjoint_sweep(ckpt, cfg, np.asarray(lam_f, dtype=np.float64), n_steps)
    _check_finite(out, "adjoint sweep")
    return out


def soa(x0, u, lam_f, n_steps: int, cfg: ScenarioConfig, ckpt=None, sigma_f=None):
    """Second-order adjoint sweep for a terminal functional.

    With the default sigma_f (the tangent image of u at the final time)
    the returned vector is the Hessian-vector product of the functional
    phi(x_n) whose gradient at the trajectory end is lam_f and whose
    final-space Hessian is the identity:

        M^T M u  +  d/de [ M(x0 + e u)^T lam_f ].

    For a linear model the second term vanishes and this reduces to
    foa(tlm(u)).  Pass sigma_f explicitly for other terminal Hessians.
    """
    ckpt = _checkpoints_for(x0, n_steps, cfg, ckpt)
    u = np.asarray(u, dtype=np.float64)
    lam_f = np.asarray(lam_f, dtype=np.float64)
    if sigma_f is None:
        du_end = tlm_sweep(ckpt, cfg, u, n_steps)
        sigma_f = du_end
    _, dw0, _ = soa_sweep(ckpt, cfg, u, lam_f, sigma_f, n_steps)
    _check_finite(dw0, "second-order adjoint sweep")
    return dw0
