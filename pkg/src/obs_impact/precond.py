"""Preconditioners for the supersensitivity system.

Each builder returns a PreconditionerHandle whose ``apply_inverse`` maps
a residual to a preconditioned residual (the M^{-1} v of a left- or
symmetrically-preconditioned Krylov method).  Build costs are recorded
as the number of operator products consumed.

Diagonal estimates take absolute values and a positive floor uniformly,
so every diagonal kind is SPD by construction.  The two spectral kinds
share the limited-memory form

    M^{-1} = I + sum_i (1/lambda_i - 1) v_i v_i^T,

which maps the captured eigendirections to unit curvature and leaves the
rest of the space untouched.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    NonPositiveRitzValue,
    NoValidPairs,
    RankDeficientSketch,
    SizeGuard,
)

_FLOOR = 1e-12


@dataclass
class PreconditionerHandle:
    kind: str
    apply_inverse: callable
    build_matvecs: int = 0
    build_seconds: float = 0.0
    data: dict = field(default_factory=dict)


def _diag_handle(kind, diag_inv, matvecs, seconds, **data):
    diag_inv = np.asarray(diag_inv, dtype=np.float64)

    def apply_inverse(v):
        return diag_inv * v if v.ndim == 1 else diag_inv[:, None] * v

    return PreconditionerHandle(
        kind=kind,
        apply_inverse=apply_inverse,
        build_matvecs=matvecs,
        build_seconds=seconds,
        data={"diag_inv": diag_inv, **data},
    )


def build_exact_diagonal(a_op, dense=None) -> PreconditionerHandle:
    """M^{-1} = 1/|diag(A)|, from a dense assembly when provided or from
    n unit-vector products otherwise (oracle/reference use only)."""
    t0 = time.perf_counter()
    if dense is not None:
        d = np.abs(np.diag(dense)).copy()
        used = 0
    else:
        n = a_op.n
        if n > 6000:
            raise SizeGuard(f"exact diagonal by probing refused for n={n}")
        d = np.empty(n)
        eye = np.eye(n)
        chunk = 512
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            cols = a_op.apply(eye[:, start:stop])
            d[start:stop] = np.abs(np.diagonal(cols[start:stop, :]))
        used = n
    d = np.maximum(d, _FLOOR)
    return _diag_handle(
        "exact_diagonal", 1.0 / d, used, time.perf_counter() - t0
    )


def build_b0_diagonal(bcov) -> PreconditionerHandle:
    """M^{-1} v = diag(B0) * v: the covariance diagonal approximates the
    inverse-Hessian diagonal, and costs nothing to obtain."""
    t0 = time.perf_counter()
    d = np.maximum(bcov.diagonal(), _FLOOR)
    return _diag_handle("b0_diagonal", d, 0, time.perf_counter() - t0)


def build_row_sum(a_op) -> PreconditionerHandle:
    """Row sums |A 1| as a diagonal estimate: one operator product."""
    t0 = time.perf_counter()
    ones = np.ones(a_op.n)
    d = np.maximum(np.abs(a_op.apply(ones)), _FLOOR)
    return _diag_handle("row_sum", 1.0 / d, 1, time.perf_counter() - t0)


def build_probed_block(a_op, q: int) -> PreconditionerHandle:
    """Probe one column per variable block (offsets 0, q^2, 2 q^2) and
    spread each probed diagonal value across its whole block."""
    t0 = time.perf_counter()
    n = a_op.n
    q2 = q * q
    probes = np.zeros((n, 3))
    offsets = (0, q2, 2 * q2)
    for col, off in enumerate(offsets):
        probes[off, col] = 1.0
    cols = a_op.apply(probes)
    d = np.empty(n)
    block_values = []
    for col, off in enumerate(offsets):
        val = max(abs(float(cols[off, col])), _FLOOR)
        block_values.append(val)
        d[col * q2 : (col + 1) * q2] = val
    return _diag_handle(
        "probed_block",
        1.0 / d,
        3,
        time.perf_counter() - t0,
        block_values=block_values,
    )


def build_lbfgs_lmp(pairs) -> PreconditionerHandle:
    """Two-loop-recursion inverse-Hessian approximation from quasi-Newton
    (s, y) pairs collected during the 4D-Var minimization; SPD by
    construction, zero extra operator products."""
    t0 = time.perf_counter()
    good = []
    for s, y in pairs:
        sy = float(s @ y)
        if sy > 0.0:
            good.append((s, y, 1.0 / sy))
    if not good:
        raise NoValidPairs("no curvature pairs with positive <s, y>")
    s_last, y_last, _ = good[-1]
    gamma = float(s_last @ y_last) / float(y_last @ y_last)

    def apply_one(v):
        q = v.copy()
        alphas = []
        for s, y, rho in reversed(good):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        q *= gamma
        for (s, y, rho), a in zip(good, reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return q

    def apply_inverse(v):
        if v.ndim == 1:
            return apply_one(v)
        out = np.empty_like(v)
        for j in range(v.shape[1]):
            out[:, j] = apply_one(v[:, j])
        return out

    return PreconditionerHandle(
        kind="lbfgs_lmp",
        apply_inverse=apply_inverse,
        build_matvecs=0,
        build_seconds=time.perf_counter() - t0,
        data={"n_pairs": len(good)},
    )


def _spectral_lmp(kind, values, vectors, matvecs, seconds, extra=None):
    """Spectral limited-memory preconditioner.

    Captured directions are mapped by their inverse Ritz values; the
    orthogonal complement is scaled by the inverse of the weakest
    captured value, so the flattened top lands on the scale of the
    remaining spectrum instead of on 1 (the raw Hessian is not
    unit-scaled here).  With all eigenpairs captured this reduces to the
    exact inverse up to the immaterial global factor, and with none it
    is the identity.
    """
    values = np.asarray(values, dtype=np.float64)
    if np.any(values <= 0.0):
        raise NonPositiveRitzValue(
            f"{kind} preconditioner needs positive approximate eigenvalues"
        )
    theta = float(values.min()) if len(values) else 1.0
    scale = theta / values - 1.0

    def apply_inverse(v):
        coeff = vectors.T @ v
        if v.ndim == 1:
            out = v + vectors @ (scale * coeff)
        else:
            out = v + vectors @ (scale[:, None] * coeff)
        out *= 1.0 / theta
        return out

    return PreconditionerHandle(
        kind=kind,
        apply_inverse=apply_inverse,
        build_matvecs=matvecs,
        build_seconds=seconds,
        data={"values": values, "theta": theta, **(extra or {})},
    )


def build_eigenpair_lmp(lanczos_result) -> PreconditionerHandle:
    """Spectral limited-memory preconditioner from leading Ritz pairs."""
    t0 = time.perf_counter()
    return _spectral_lmp(
        "eigenpair_lmp",
        lanczos_result.values,
        lanczos_result.vectors,
        lanczos_result.matvecs,
        time.perf_counter() - t0,
    )


def build_randomized_svd(a_op, ell=50, rng=None) -> PreconditionerHandle:
    """Randomized range sketch of a symmetric PSD operator.

    Y = A Omega with a Gaussian ensemble Omega (ell columns), Q = qr(Y),
    T = Q^T A Q, then the eigenpairs of T give the same spectral form as
    the Lanczos-based preconditioner.  The 2*ell products are independent
    and issued as two blocked applications.
    """
    t0 = time.perf_counter()
    rng = rng or np.random.default_rng(0)
    n = a_op.n
    omega = rng.standard_normal((n, ell))
    y = a_op.apply(omega)
    q, _ = np.linalg.qr(y)
    t = q.T @ a_op.apply(q)
    t = 0.5 * (t + t.T)
    vals, vecs = np.linalg.eigh(t)
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = q @ vecs[:, order]
    # a rank-deficient operator yields null sketch directions; keep only
    # the genuinely captured part
    keep = vals > 1e-12 * max(vals[0], 0.0)
    if not np.any(keep):
        raise RankDeficientSketch(
            "sketch captured no positive curvature; reduce the ensemble size"
        )
    return _spectral_lmp(
        "randomized_svd",
        vals[keep],
        vecs[:, keep],
        2 * ell,
        time.perf_counter() - t0,
        extra={"ell": ell},
    )
