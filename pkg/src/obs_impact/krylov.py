"""Matrix-free Krylov solvers under a matrix-vector product budget.

All solvers start from the zero vector, stop at the budget or at a
relative residual tolerance, and record a full convergence trace
(residual norm, matvec count, optional RMSE against a reference
solution, wall time per iteration).  Breakdown never raises: the report
carries the best iterate and a flag, so a caller always gets the best
solution available within its budget.

Operators are duck-typed: anything with ``n`` and ``apply(v)``.
Preconditioners expose ``apply_inverse(v)``.  CG and MINRES use the
standard symmetric preconditioned forms (SPD preconditioner via its
inner product); GMRES, QMR, BiCGSTAB and CGS precondition from the left,
and their traces then show the preconditioned residual.  QMR is the
symmetric variant (two-sided Lanczos collapsed onto one sequence), which
is what keeps it at one product per iteration; LSQR uses two products
per iteration (A and A^T, identical here since the operators served by
this package are symmetric).
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch

_EPS = np.finfo(np.float64).eps


@dataclass
class SolveBudget:
    max_matvecs: int = 100
    residual_tol: float = 0.0  # relative to ||b||; 0 disables
    reference: np.ndarray = None  # enables RMSE tracking

    def __post_init__(self):
        if self.max_matvecs < 1:
            raise ValueError("max_matvecs must be >= 1")


@dataclass
class SolverReport:
    solver: str
    iterations: list = field(default_factory=list)
    matvec_counts: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    rmses: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    x: np.ndarray = None
    converged: bool = False
    breakdown: bool = False
    breakdown_reason: str = ""
    preconditioned: bool = False
    final_residual_vector: np.ndarray = None

    @property
    def n_matvecs(self) -> int:
        return self.matvec_counts[-1] if self.matvec_counts else 0

    def to_csv(self, path, mode="w"):
        with open(path, mode, encoding="utf-8") as fh:
            if mode == "w":
                fh.write("solver,iter,matvecs,residual,rmse,seconds\n")
            for i, mv, r, e, t in zip(
                self.iterations,
                self.matvec_counts,
                self.residuals,
                self.rmses,
                self.seconds,
            ):
                rm = "" if e is None else repr(float(e))
                fh.write(f"{self.solver},{i},{mv},{float(r)!r},{rm},{t:.6f}\n")


class _Trace:
    """Per-iteration bookkeeping shared by the solvers."""

    def __init__(self, report, budget, n):
        self.report = report
        self.budget = budget
        self.n = n
        self.t0 = time.perf_counter()
        self.matvecs = 0
        self.base_resid = None

    def can_spend(self, k) -> bool:
        return self.matvecs + k <= self.budget.max_matvecs

    def spend(self, k):
        self.matvecs += k

    def record(self, it, resid, x):
        """x may be the iterate or a zero-argument callable producing it
        (so solvers that only materialize iterates on demand skip the
        work when no reference solution is tracked)."""
        rmse = None
        if self.budget.reference is not None:
            xv = x() if callable(x) else x
            rmse = float(
                np.linalg.norm(xv - self.budget.reference) / np.sqrt(self.n)
            )
        if self.base_resid is None:
            self.base_resid = float(resid)
        r = self.report
        r.iterations.append(it)
        r.matvec_counts.append(self.matvecs)
        r.residuals.append(float(resid))
        r.rmses.append(rmse)
        r.seconds.append(time.perf_counter() - self.t0)

    def done(self, resid):
        """Relative tolerance against this solver's own initial residual
        norm (which is the preconditioned one for left-preconditioned
        methods)."""
        tol = self.budget.residual_tol
        return tol > 0.0 and resid <= tol * (self.base_resid or 1.0)


def _identity_minv(v):
    return v


def solve(method, a_op, b, m_inv=None, budget=None) -> SolverReport:
    """Run one matrix-free solver on A x = b from the zero initial guess.

    method: one of cg, minres, gmres, qmr, bicgstab, cgs, lsqr.
    m_inv: optional preconditioner handle (object with apply_inverse) or
    a bare callable.
    """
    if budget is None:
        budget = SolveBudget()
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1 or b.size != a_op.n:
        raise DimensionMismatch(
            f"rhs length {b.size} does not match operator n={a_op.n}"
        )
    try:
        fn = _METHODS[method]
    except KeyError:
        raise ValueError(f"unknown solver {method!r}") from None
    minv_fn = None
    if m_inv is not None:
        minv_fn = m_inv if callable(m_inv) else m_inv.apply_inverse
    report = SolverReport(solver=method, preconditioned=minv_fn is not None)
    trace = _Trace(report, budget, b.size)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        report.x = np.zeros_like(b)
        report.converged = True
        trace.record(0, 0.0, report.x)
        return report
    fn(a_op, b, minv_fn or _identity_minv, trace, report)
    return report


# -- individual methods --------------------------------------------------------
def _cg(a_op, b, minv, trace, report):
    x = np.zeros_like(b)
    r = b.copy()
    z = minv(r)
    p = z.copy()
    rz = float(r @ z)
    pr_norm = float(np.linalg.norm(r))
    trace.record(0, pr_norm, x)
    it = 0
    while trace.can_spend(1):
        ap = a_op.apply(p)
        trace.spend(1)
        pap = float(p @ ap)
        if pap <= 0.0:
            report.breakdown = True
            report.breakdown_reason = "non-positive curvature <p, Ap>"
            break
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        it += 1
        resid = float(np.linalg.norm(r))
        trace.record(it, resid, x)
        if trace.done(resid):
            report.converged = True
            break
        z = minv(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    report.x = x
    report.final_residual_vector = r


def _minres(a_op, b, minv, trace, report):
    # Paige & Saunders recurrences with an SPD preconditioner through its
    # inner product; phibar tracks the (preconditioned) residual norm.
    x = np.zeros_like(b)
    r1 = b.copy()
    y = minv(b)
    beta1 = float(b @ y)
    if beta1 <= 0.0:
        report.breakdown = beta1 < 0.0
        report.breakdown_reason = "preconditioner not positive definite" if beta1 < 0 else ""
        report.x = x
        return
    beta1 = np.sqrt(beta1)
    oldb, beta = 0.0, beta1
    dbar, epsln, phibar = 0.0, 0.0, beta1
    cs, sn = -1.0, 0.0
    w = np.zeros_like(b)
    w2 = np.zeros_like(b)
    r2 = r1.copy()
    trace.record(0, phibar, x)
    it = 0
    while trace.can_spend(1):
        v = y / beta
        y = a_op.apply(v)
        trace.spend(1)
        if it >= 1:
            y -= (beta / oldb) * r1
        alfa = float(v @ y)
        y -= (alfa / beta) * r2
        r1 = r2
        r2 = y
        y = minv(r2)
        oldb = beta
        beta = float(r2 @ y)
        if beta < 0.0:
            report.breakdown = True
            report.breakdown_reason = "indefinite preconditioner inner product"
            break
        beta = np.sqrt(beta)
        oldeps = epsln
        delta = cs * dbar + sn * alfa
        gbar = sn * dbar - cs * alfa
        epsln = sn * beta
        dbar = -cs * beta
        gamma = max(np.sqrt(gbar * gbar + beta * beta), _EPS)
        cs = gbar / gamma
        sn = beta / gamma
        phi = cs * phibar
        phibar = sn * phibar
        w1 = w2
        w2 = w
        w = (v - oldeps * w1 - delta * w2) / gamma
        x = x + phi * w
        it += 1
        trace.record(it, phibar, x)
        if trace.done(phibar):
            report.converged = True
            break
    report.x = x


def _gmres(a_op, b, minv, trace, report):
    # Full GMRES (no restart), modified Gram-Schmidt, Givens rotations,
    # left preconditioning.
    r0 = minv(b)
    beta = float(np.linalg.norm(r0))
    m = trace.budget.max_matvecs
    n = b.size
    v = np.empty((m + 1, n))
    h = np.zeros((m + 1, m))
    cs = np.zeros(m)
    sn = np.zeros(m)
    g = np.zeros(m + 1)
    v[0] = r0 / beta
    g[0] = beta
    trace.record(0, beta, np.zeros_like(b))

    def assemble(j):
        if j == 0:
            return np.zeros_like(b)
        yk = np.linalg.solve(np.triu(h[:j, :j]), g[:j])
        return v[:j].T @ yk

    j = 0
    while trace.can_spend(1) and j < m:
        w = minv(a_op.apply(v[j]))
        trace.spend(1)
        for i in range(j + 1):
            h[i, j] = float(v[i] @ w)
            w -= h[i, j] * v[i]
        h[j + 1, j] = float(np.linalg.norm(w))
        lucky = h[j + 1, j] < 1e-14 * max(1.0, beta)
        if not lucky:
            v[j + 1] = w / h[j + 1, j]
        for i in range(j):
            t = cs[i] * h[i, j] + sn[i] * h[i + 1, j]
            h[i + 1, j] = -sn[i] * h[i, j] + cs[i] * h[i + 1, j]
            h[i, j] = t
        denom = np.hypot(h[j, j], h[j + 1, j])
        cs[j] = h[j, j] / denom
        sn[j] = h[j + 1, j] / denom
        h[j, j] = denom
        h[j + 1, j] = 0.0
        g[j + 1] = -sn[j] * g[j]
        g[j] = cs[j] * g[j]
        j += 1
        resid = abs(g[j])
        trace.record(j, resid, (lambda jj=j: assemble(jj)))
        if lucky or trace.done(resid):
            report.converged = True
            break
    x = assemble(j)
    report.x = x
    # residual vector in the preconditioned space, no extra matvec
    res = g[: j + 1].copy()
    report.final_residual_vector = v[: j + 1].T @ _unrotate(res, cs, sn, j)


def _unrotate(g_rot, cs, sn, j):
    """Undo the Givens rotations on the residual coordinates so that
    V_{j+1} @ result is the actual residual vector."""
    out = np.zeros(j + 1)
    out[j] = g_rot[j]
    for i in range(j - 1, -1, -1):
        # inverse rotation on the (i, i+1) plane
        gi = out[i]
        gi1 = out[i + 1]
        out[i] = cs[i] * gi - sn[i] * gi1
        out[i + 1] = sn[i] * gi + cs[i] * gi1
    return out


def _qmr(a_op, b, minv, trace, report):
    # Symmetric QMR: the two-sided Lanczos process collapses onto one
    # sequence for a symmetric operator, leaving the conjugate-direction
    # base below (valid for indefinite A up to pivot breakdown), followed
    # by QMR smoothing of the iterates and residuals.  One product per
    # iteration; left preconditioning through the M-weighted pairing.
    x = np.zeros_like(b)
    r = b.copy()
    z = minv(r)
    p = z.copy()
    rz = float(r @ z)
    x_s = x.copy()  # smoothed iterate (the QMR solution)
    s = z.copy()  # its residual, preconditioned space
    tau = float(np.linalg.norm(z))
    trace.record(0, tau, x_s)
    it = 0
    while trace.can_spend(1):
        ap = a_op.apply(p)
        trace.spend(1)
        pap = float(p @ ap)
        if pap == 0.0:
            report.breakdown = True
            report.breakdown_reason = "pivot breakdown <p, Ap> = 0"
            break
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        z = minv(r)
        # QMR smoothing weights
        theta = float(np.linalg.norm(z)) / tau
        c2 = 1.0 / (1.0 + theta * theta)
        tau = tau * theta * np.sqrt(c2)
        x_s = x_s + c2 * (x - x_s)
        s = s + c2 * (z - s)
        it += 1
        resid = float(np.linalg.norm(s))
        trace.record(it, resid, x_s)
        if trace.done(resid):
            report.converged = True
            break
        rz_new = float(r @ z)
        if rz == 0.0:
            report.breakdown = True
            report.breakdown_reason = "lanczos breakdown rho = 0"
            break
        p = z + (rz_new / rz) * p
        rz = rz_new
    report.x = x_s
    report.final_residual_vector = s


def _bicgstab(a_op, b, minv, trace, report):
    x = np.zeros_like(b)
    r = minv(b)
    rtilde = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    trace.record(0, float(np.linalg.norm(r)), x)
    it = 0
    while trace.can_spend(2):
        rho_new = float(rtilde @ r)
        if rho_new == 0.0 or omega == 0.0:
            report.breakdown = True
            report.breakdown_reason = "rho or omega vanished"
            break
        if it == 0:
            p = r.copy()
        else:
            beta = (rho_new / rho) * (alpha / omega)
            p = r + beta * (p - omega * v)
        v = minv(a_op.apply(p))
        trace.spend(1)
        rtv = float(rtilde @ v)
        if rtv == 0.0:
            report.breakdown = True
            report.breakdown_reason = "<rtilde, v> = 0"
            break
        alpha = rho_new / rtv
        s = r - alpha * v
        t = minv(a_op.apply(s))
        trace.spend(1)
        tt = float(t @ t)
        omega = float(t @ s) / tt if tt > 0.0 else 0.0
        x += alpha * p + omega * s
        r = s - omega * t
        rho = rho_new
        it += 1
        resid = float(np.linalg.norm(r))
        trace.record(it, resid, x)
        if trace.done(resid):
            report.converged = True
            break
    report.x = x
    report.final_residual_vector = r


def _cgs(a_op, b, minv, trace, report):
    x = np.zeros_like(b)
    r = minv(b)
    rtilde = r.copy()
    rho = 1.0
    u = np.zeros_like(b)
    p = np.zeros_like(b)
    qv = np.zeros_like(b)
    trace.record(0, float(np.linalg.norm(r)), x)
    it = 0
    while trace.can_spend(2):
        rho_new = float(rtilde @ r)
        if rho_new == 0.0:
            report.breakdown = True
            report.breakdown_reason = "rho = 0"
            break
        if it == 0:
            u = r.copy()
            p = u.copy()
        else:
            beta = rho_new / rho
            u = r + beta * qv
            p = u + beta * (qv + beta * p)
        vhat = minv(a_op.apply(p))
        trace.spend(1)
        sigma = float(rtilde @ vhat)
        if sigma == 0.0:
            report.breakdown = True
            report.breakdown_reason = "<rtilde, A p> = 0"
            break
        alpha = rho_new / sigma
        qv = u - alpha * vhat
        uq = u + qv
        x += alpha * uq
        qhat = minv(a_op.apply(uq))
        trace.spend(1)
        r = r - alpha * qhat
        rho = rho_new
        it += 1
        resid = float(np.linalg.norm(r))
        trace.record(it, resid, x)
        if trace.done(resid):
            report.converged = True
            break
    report.x = x
    report.final_residual_vector = r


def _lsqr(a_op, b, minv, trace, report):
    # Golub-Kahan bidiagonalization (Paige & Saunders); A^T products use
    # the same operator (symmetric).  No preconditioning.
    x = np.zeros_like(b)
    u = b.copy()
    beta = float(np.linalg.norm(u))
    u /= beta
    v = a_op.apply(u)
    trace.spend(1)
    alpha = float(np.linalg.norm(v))
    v /= alpha
    w = v.copy()
    phibar = beta
    rhobar = alpha
    trace.record(0, phibar, x)
    it = 0
    while trace.can_spend(2):
        u = a_op.apply(v) - alpha * u
        trace.spend(1)
        beta = float(np.linalg.norm(u))
        if beta > 0.0:
            u /= beta
            v_new = a_op.apply(u) - beta * v
            trace.spend(1)
            alpha = float(np.linalg.norm(v_new))
            if alpha > 0.0:
                v = v_new / alpha
        rho = np.hypot(rhobar, beta)
        c = rhobar / rho
        s = beta / rho
        theta = s * alpha
        rhobar = -c * alpha
        phi = c * phibar
        phibar = s * phibar
        x += (phi / rho) * w
        w = v - (theta / rho) * w
        it += 1
        trace.record(it, phibar, x)
        if trace.done(phibar):
            report.converged = True
            break
    report.x = x


_METHODS = {
    "cg": _cg,
    "minres": _minres,
    "gmres": _gmres,
    "qmr": _qmr,
    "bicgstab": _bicgstab,
    "cgs": _cgs,
    "lsqr": _lsqr,
}


# -- Lanczos eigenpairs --------------------------------------------------------
@dataclass
class LanczosResult:
    values: np.ndarray  # leading Ritz values, descending
    vectors: np.ndarray  # (n, k)
    residuals: np.ndarray  # ||A v - lambda v|| estimates per pair
    converged: bool
    matvecs: int


def lanczos_eigenpairs(
    a_op, k, max_matvecs=None, tol=1e-6, v0=None, rng=None
) -> LanczosResult:
    """k leading eigenpairs of a symmetric operator by Lanczos with full
    reorthogonalization.

    Convergence: residual estimate |beta_m s_mi| <= tol * lambda_max for
    every returned pair; otherwise the best available pairs are returned
    with converged=False.
    """
    n = a_op.n
    m = max_matvecs if max_matvecs is not None else min(n, max(2 * k + 10, 30))
    m = min(m, n)
    if k > m:
        raise ValueError(f"k={k} exceeds the Lanczos space size m={m}")
    if v0 is None:
        rng = rng or np.random.default_rng(0)
        v0 = rng.standard_normal(n)
    v = v0 / np.linalg.norm(v0)
    basis = np.empty((m + 1, n))
    basis[0] = v
    alphas = np.empty(m)
    betas = np.empty(m)
    used = 0
    j = 0
    while j < m:
        w = a_op.apply(basis[j])
        used += 1
        alphas[j] = float(basis[j] @ w)
        w -= alphas[j] * basis[j]
        if j > 0:
            w -= betas[j - 1] * basis[j - 1]
        # full reorthogonalization, twice for safety
        w -= basis[: j + 1].T @ (basis[: j + 1] @ w)
        w -= basis[: j + 1].T @ (basis[: j + 1] @ w)
        betas[j] = float(np.linalg.norm(w))
        j += 1
        if betas[j - 1] < 1e-12:
            break  # invariant subspace
        basis[j] = w / betas[j - 1]
    mm = j
    t = np.diag(alphas[:mm])
    if mm > 1:
        off = betas[: mm - 1]
        t += np.diag(off, 1) + np.diag(off, -1)
    evals, evecs = np.linalg.eigh(t)
    order = np.argsort(evals)[::-1][: min(k, mm)]
    vals = evals[order]
    s = evecs[:, order]
    vectors = basis[:mm].T @ s
    res = np.abs(betas[mm - 1] * s[-1, :]) if mm >= 1 else np.zeros(0)
    lam_max = float(np.abs(evals).max()) if mm else 0.0
    converged = bool(np.all(res <= tol * max(lam_max, 1e-300))) and len(vals) == k
    return LanczosResult(
        values=vals,
        vectors=vectors,
        residuals=res,
        converged=converged,
        matvecs=used,
    )
