"""4D-Var cost function, gradient, Hessian-vector products, and minimizer.

The cost is

    J(x0) = 1/2 (x0 - xb)^T B^{-1} (x0 - xb)
          + 1/2 sum_k (H_k x_k - y_k)^T R_k^{-1} (H_k x_k - y_k)

with x_k the model state at observation step k.  The gradient comes from
one adjoint sweep forced by the weighted innovations at observation
times.  Three Hessian-vector products are provided:

* ``soa``: the exact discrete Hessian via a second-order adjoint sweep;
* ``gauss_newton``: B^{-1} u + sum_k M_k^T H_k^T R_k^{-1} H_k M_k u
  (one tangent sweep plus one adjoint sweep; drops the term in which the
  adjoint variable multiplies model curvature);
* ``fd``: one-sided finite difference of adjoint gradients.
"""

import threading
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tangent
from .config import ScenarioConfig
from .covariance import BackgroundCovariance
from .errors import (
    DimensionMismatch,
    NonFiniteState,
    NonPositiveDepth,
    SizeGuard,
    StepTooSmallWarning,
)
from .observations import ObservationSet
from .swe import flatten, propagate


@dataclass
class CostEvaluation:
    j_total: float
    j_background: float
    j_observation: float
    gradient: np.ndarray = None


@dataclass
class MinimizerReport:
    """Outcome of an L-BFGS run.

    pairs holds the last stored (s, y) curvature pairs, newest last; they
    satisfy <s, y> > 0 and feed the limited-memory preconditioner.
    """

    iterations: int
    cost_history: np.ndarray
    grad_norm_history: np.ndarray
    pairs: list
    x_final: np.ndarray
    converged: bool
    line_search_failed: bool = False
    n_evals: int = 0

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("iter,cost,grad_norm\n")
            for i, (j, gn) in enumerate(
                zip(self.cost_history, self.grad_norm_history)
            ):
                fh.write(f"{i},{float(j)!r},{float(gn)!r}\n")


class HessianOperator:
    """Matrix-free Hessian of the 4D-Var cost at a fixed linearization
    point.  apply() accepts a flat (n,) vector or an (n, m) block of
    columns; the thread-safe matvec counter advances by the number of
    columns applied.
    """

    def __init__(self, problem, x_lin, variant="gauss_newton", fd_eps=None):
        if variant not in ("soa", "gauss_newton", "fd"):
            raise ValueError(f"unknown Hessian variant {variant!r}")
        self.problem = problem
        self.variant = variant
        self.fd_eps = fd_eps
        self.x_lin = np.array(x_lin)
        self.n = problem.cfg.n
        self._count = 0
        self._lock = threading.Lock()

        cfg = problem.cfg
        self._traj, self._ckpt = propagate(
            self.x_lin, cfg.n_steps_window, cfg, record_stages=True
        )
        self._coeffs = tangent.precompute_coeffs(self._ckpt, cfg)
        if variant == "soa":
            self._lam_forcings = problem.innovation_forcings(self._traj)
        if variant == "fd":
            self._base_grad = problem.cost_grad(self.x_lin).gradient
            self._x_lin_norm = np.linalg.norm(flatten(self.x_lin))

    @property
    def matvecs(self) -> int:
        return self._count

    def _bump(self, m):
        with self._lock:
            self._count += m

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.n:
            raise DimensionMismatch(f"expected length {self.n}, got {v.shape[0]}")
        batched = v.ndim == 2
        m = v.shape[1] if batched else 1
        self._bump(m)
        if self.variant == "gauss_newton":
            out = self._apply_gauss_newton(v, batched)
        elif self.variant == "soa":
            out = self._apply_soa(v, batched)
        else:
            out = self._apply_fd(v, batched)
        return out

    # -- variants ---------------------------------------------------------------
    def _apply_gauss_newton(self, v, batched):
        pb, cfg = self.problem, self.problem.cfg
        q = cfg.q
        dv = v.T.reshape(-1, 3, q, q) if batched else v.reshape(3, q, q)
        if not batched:
            dv = dv[None]
        _, rec = tangent.tlm_sweep(
            self._ckpt,
            cfg,
            dv,
            cfg.n_steps_window,
            record_steps=pb.obs.times,
            coeffs_seq=self._coeffs,
        )
        forcings = {
            k: pb.obs.h_transpose(
                k, pb.obs.r_apply_inverse(k, pb.obs.h_apply(k, rec[k]))
            )
            for k in pb.obs.times
        }
        adj = tangent.adjoint_sweep(
            self._ckpt,
            cfg,
            np.zeros_like(dv),
            cfg.n_steps_window,
            forcings=forcings,
            coeffs_seq=self._coeffs,
        )
        out = adj.reshape(adj.shape[0], -1).T + pb.bcov.apply_inverse(
            v if batched else v[:, None]
        ).reshape(self.n, -1)
        return out if batched else out[:, 0]

    def _apply_soa(self, v, batched):
        pb, cfg = self.problem, self.problem.cfg
        q = cfg.q
        dv = v.T.reshape(-1, 3, q, q) if batched else v.reshape(3, q, q)
        if not batched:
            dv = dv[None]
        zeros = np.zeros_like(dv)

        def dforce(k, du):
            return pb.obs.h_transpose(
                k, pb.obs.r_apply_inverse(k, pb.obs.h_apply(k, du))
            )

        _, dw0, _ = tangent.soa_sweep(
            self._ckpt,
            cfg,
            dv,
            zeros,
            zeros,
            cfg.n_steps_window,
            forcings=self._lam_forcings,
            dforcing_times=pb.obs.times,
            dforcing_fn=dforce,
            coeffs_seq=self._coeffs,
        )
        out = dw0.reshape(dw0.shape[0], -1).T + pb.bcov.apply_inverse(
            v if batched else v[:, None]
        ).reshape(self.n, -1)
        return out if batched else out[:, 0]

    def _apply_fd(self, v, batched):
        cols = v.T if batched else v[None]
        outs = np.empty((cols.shape[0], self.n))
        q = self.problem.cfg.q
        for idx, u in enumerate(cols):
            unorm = np.linalg.norm(u)
            if unorm == 0.0:
                outs[idx] = 0.0
                continue
            eps = self.fd_eps or 1e-6 * self._x_lin_norm / unorm
            x_pert = self.x_lin + eps * u.reshape(3, q, q)
            g_pert = self.problem.cost_grad(x_pert).gradient
            outs[idx] = (g_pert - self._base_grad) / eps
            if np.linalg.norm(outs[idx]) < 1e-13:
                warnings.warn(
                    "finite-difference Hessian product is numerically zero; "
                    "the step may be too small",
                    StepTooSmallWarning,
                )
        return outs.T if batched else outs[0]


class FourDVar:
    """The assimilation problem: window, background, covariances, data."""

    def __init__(
        self,
        cfg: ScenarioConfig,
        background: np.ndarray,
        bcov: BackgroundCovariance,
        obs: ObservationSet,
    ):
        self.cfg = cfg
        self.background = np.array(background)
        self.bcov = bcov
        self.obs = obs

    # -- pieces -------------------------------------------------------------
    def innovations(self, traj):
        """H_k x_k - y_k per observation step."""
        return {
            k: self.obs.h_apply(k, traj.states[k]) - self.obs.values[k]
            for k in self.obs.times
        }

    def innovation_forcings(self, traj):
        """Adjoint forcings H_k^T R_k^{-1} (H_k x_k - y_k)."""
        return {
            k: self.obs.h_transpose(k, self.obs.r_apply_inverse(k, d))
            for k, d in self.innovations(traj).items()
        }

    # -- cost and gradient ----------------------------------------------------
    def cost(self, x0: np.ndarray) -> CostEvaluation:
        traj = propagate(x0, self.cfg.n_steps_window, self.cfg)
        return self._cost_from(x0, traj)

    def _cost_from(self, x0, traj):
        db = flatten(x0 - self.background)
        jb = 0.5 * float(db @ self.bcov.apply_inverse(db))
        jo = 0.0
        for k, d in self.innovations(traj).items():
            jo += 0.5 * float(d @ self.obs.r_apply_inverse(k, d))
        return CostEvaluation(
            j_total=jb + jo, j_background=jb, j_observation=jo
        )

    def cost_grad(self, x0: np.ndarray) -> CostEvaluation:
        """Cost plus its exact gradient from a single adjoint sweep."""
        cfg = self.cfg
        traj, ckpt = propagate(x0, cfg.n_steps_window, cfg, record_stages=True)
        ev = self._cost_from(x0, traj)
        forcings = self.innovation_forcings(traj)
        adj = tangent.adjoint_sweep(
            ckpt,
            cfg,
            np.zeros_like(x0),
            cfg.n_steps_window,
            forcings=forcings,
        )
        grad = self.bcov.apply_inverse(flatten(x0 - self.background))
        grad = grad + flatten(adj)
        ev.gradient = grad
        return ev

    # -- Hessian ----------------------------------------------------------------
    def hessian_operator(
        self, x_lin, variant="gauss_newton", fd_eps=None
    ) -> HessianOperator:
        return HessianOperator(self, x_lin, variant=variant, fd_eps=fd_eps)

    def minimize(
        self, x_start=None, max_iters=400, grad_tol=None, memory=10
    ) -> MinimizerReport:
        """L-BFGS with a strong-Wolfe line search, started from the
        background unless told otherwise.  grad_tol defaults to 1e-10
        times the starting gradient norm."""
        x0 = self.background if x_start is None else x_start
        q = self.cfg.q

        def fun_grad(xflat):
            # off-manifold trial points (negative depth, CFL blowup) are
            # treated as infinitely bad so the line search backs off
            try:
                ev = self.cost_grad(xflat.reshape(3, q, q))
            except (NonFiniteState, NonPositiveDepth):
                return np.inf, np.zeros_like(xflat)
            return ev.j_total, ev.gradient

        report = lbfgs_minimize(
            fun_grad,
            flatten(x0).copy(),
            max_iters=max_iters,
            grad_tol=grad_tol,
            grad_tol_rel=1e-10 if grad_tol is None else None,
            memory=memory,
        )
        report.x_final = report.x_final.reshape(3, q, q)
        return report


def assemble_dense_hessian(hop: HessianOperator, chunk: int = 512) -> np.ndarray:
    """Dense n x n matrix from matvecs with unit vectors (column chunks).

    Guarded to n <= 6000; intended for oracles, spectra and reference
    supersensitivity solves.
    """
    n = hop.n
    if n > 6000:
        raise SizeGuard(f"dense assembly refused for n={n} > 6000")
    a = np.empty((n, n))
    eye = np.eye(n)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        a[:, start:stop] = hop.apply(eye[:, start:stop])
    return a


# -- generic L-BFGS ------------------------------------------------------------
def _two_loop(pairs, g):
    """Standard two-loop recursion for the inverse-Hessian image of g."""
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def _wolfe_line_search(
    fun_grad, x, j0, g0, d, c1=1e-4, c2=0.9, max_evals=30, a_init=1.0
):
    """Strong-Wolfe search along d.  Returns (alpha, j, g, evals) or
    (None, best_j, best_g_or_None, evals) on failure."""
    dphi0 = float(g0 @ d)
    if dphi0 >= 0:
        return None, j0, None, 0

    def phi(a):
        j, g = fun_grad(x + a * d)
        return j, g, float(g @ d)

    evals = 0
    a_prev, phi_prev, dphi_prev = 0.0, j0, dphi0
    a = a_init
    best = (None, j0, None)
    for i in range(max_evals):
        j, g, dphi = phi(a)
        evals += 1
        if j < best[1]:
            best = (a, j, g)
        if j > j0 + c1 * a * dphi0 or (i > 0 and j >= phi_prev):
            return _zoom(
                phi, j0, dphi0, a_prev, phi_prev, dphi_prev, a, j, dphi,
                c1, c2, evals, max_evals,
            )
        if abs(dphi) <= -c2 * dphi0:
            return a, j, g, evals
        if dphi >= 0:
            return _zoom(
                phi, j0, dphi0, a, j, dphi, a_prev, phi_prev, dphi_prev,
                c1, c2, evals, max_evals,
            )
        a_prev, phi_prev, dphi_prev = a, j, dphi
        a *= 2.0
    return None, best[1], best[2], evals


def _zoom(
    phi, j0, dphi0, a_lo, j_lo, dphi_lo, a_hi, j_hi, dphi_hi,
    c1, c2, evals, max_evals,
):
    g_lo = None
    for _ in range(max_evals):
        # cubic-ish interpolation with bisection safeguard
        denom = dphi_lo + dphi_hi - 3.0 * (j_lo - j_hi) / (a_lo - a_hi + 1e-300)
        mid = 0.5 * (a_lo + a_hi)
        a = mid
        if abs(denom) > 1e-300:
            w = denom * denom - dphi_lo * dphi_hi
            if w >= 0:
                w = np.sqrt(w)
                cand = a_hi - (a_hi - a_lo) * (dphi_hi + w - denom) / (
                    dphi_hi - dphi_lo + 2.0 * w + 1e-300
                )
                lo, hi = min(a_lo, a_hi), max(a_lo, a_hi)
                if lo + 0.05 * (hi - lo) < cand < hi - 0.05 * (hi - lo):
                    a = cand
        j, g, dphi = phi(a)
        evals += 1
        if j > j0 + c1 * a * dphi0 or j >= j_lo:
            a_hi, j_hi, dphi_hi = a, j, dphi
        else:
            if abs(dphi) <= -c2 * dphi0:
                return a, j, g, evals
            if dphi * (a_hi - a_lo) >= 0:
                a_hi, j_hi, dphi_hi = a_lo, j_lo, dphi_lo
            a_lo, j_lo, dphi_lo, g_lo = a, j, dphi, g
        if abs(a_hi - a_lo) < 1e-14:
            break
    if g_lo is not None:
        return a_lo, j_lo, g_lo, evals
    return None, j_lo, None, evals


def lbfgs_minimize(
    fun_grad,
    x0: np.ndarray,
    max_iters: int = 400,
    grad_tol: float = None,
    grad_tol_rel: float = None,
    memory: int = 10,
) -> MinimizerReport:
    """Limited-memory BFGS over a generic (value, gradient) callable."""
    x = np.array(x0, dtype=np.float64)
    j, g = fun_grad(x)
    n_evals = 1
    gnorm = float(np.linalg.norm(g))
    if grad_tol is None:
        grad_tol = (grad_tol_rel or 1e-10) * gnorm
    pairs = deque(maxlen=memory)
    cost_history = [j]
    gnorm_history = [gnorm]
    converged = gnorm <= grad_tol
    failed = False
    it = 0
    while it < max_iters and not converged:
        d = -_two_loop(list(pairs), g)
        if float(d @ g) >= 0.0:
            d = -g
        # unscaled steepest-descent start: keep the first trial step at a
        # unit displacement rather than a unit multiplier
        a_init = min(1.0, 1.0 / gnorm) if not pairs else 1.0
        alpha, j_new, g_new, ev = _wolfe_line_search(
            fun_grad, x, j, g, d, a_init=a_init
        )
        n_evals += ev
        if alpha is None:
            failed = True
            break
        s = alpha * d
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        x = x + s
        j, g = j_new, g_new
        gnorm = float(np.linalg.norm(g))
        cost_history.append(j)
        gnorm_history.append(gnorm)
        it += 1
        converged = gnorm <= grad_tol
    return MinimizerReport(
        iterations=it,
        cost_history=np.array(cost_history),
        grad_norm_history=np.array(gnorm_history),
        pairs=[(s, y) for s, y, _ in pairs],
        x_final=x,
        converged=converged,
        line_search_failed=failed,
        n_evals=n_evals,
    )
