"""Numba-compiled inner kernels for the forward/tangent/adjoint sweeps.

These fuse the pointwise flux work with the ghost-closed central
difference, removing the per-call overhead that dominates the pure-numpy
versions at production grid sizes.  The numpy implementations in swe.py
and tangent.py remain the reference; the test suite checks agreement to
roundoff.  Set OBS_IMPACT_NO_NUMBA=1 to disable this path.
"""

import os

AVAILABLE = False
if not os.environ.get("OBS_IMPACT_NO_NUMBA"):
    try:
        import numpy as np
        from numba import njit

        AVAILABLE = True
    except ImportError:  # pragma: no cover - numba is normally installed
        AVAILABLE = False

if AVAILABLE:
    # ghost signs of the x-flux in x and the y-flux in y
    _SX = (-1.0, 1.0, -1.0)
    _SY = (-1.0, -1.0, 1.0)

    @njit(cache=True, fastmath=False)
    def rhs_kernel(state, g, inv2dx):
        q = state.shape[1]
        fx = np.empty((3, q, q))
        fy = np.empty((3, q, q))
        for i in range(q):
            for j in range(q):
                h = state[0, i, j]
                uh = state[1, i, j]
                vh = state[2, i, j]
                u = uh / h
                v = vh / h
                p = 0.5 * g * h * h
                fx[0, i, j] = uh
                fx[1, i, j] = uh * u + p
                fx[2, i, j] = vh * u
                fy[0, i, j] = vh
                fy[1, i, j] = uh * v
                fy[2, i, j] = vh * v + p
        out = np.empty((3, q, q))
        for c in range(3):
            sx = _SX[c]
            sy = _SY[c]
            for i in range(q):
                for j in range(q):
                    fr = sx * fx[c, i, q - 1] if j == q - 1 else fx[c, i, j + 1]
                    fl = sx * fx[c, i, 0] if j == 0 else fx[c, i, j - 1]
                    gr = sy * fy[c, q - 1, j] if i == q - 1 else fy[c, i + 1, j]
                    gl = sy * fy[c, 0, j] if i == 0 else fy[c, i - 1, j]
                    out[c, i, j] = -inv2dx * ((fr - fl) + (gr - gl))
        return out

    @njit(cache=True, fastmath=False)
    def jvp_kernel(u, v, gh_m_u2, gh_m_v2, uv, dv, inv2dx):
        m = dv.shape[0]
        q = dv.shape[2]
        out = np.empty_like(dv)
        fx = np.empty((3, q, q))
        fy = np.empty((3, q, q))
        for b in range(m):
            for i in range(q):
                for j in range(q):
                    da = dv[b, 0, i, j]
                    db = dv[b, 1, i, j]
                    dc = dv[b, 2, i, j]
                    uij = u[i, j]
                    vij = v[i, j]
                    fx[0, i, j] = db
                    fx[1, i, j] = gh_m_u2[i, j] * da + 2.0 * uij * db
                    fx[2, i, j] = -uv[i, j] * da + vij * db + uij * dc
                    fy[0, i, j] = dc
                    fy[1, i, j] = -uv[i, j] * da + vij * db + uij * dc
                    fy[2, i, j] = gh_m_v2[i, j] * da + 2.0 * vij * dc
            for c in range(3):
                sx = _SX[c]
                sy = _SY[c]
                for i in range(q):
                    for j in range(q):
                        fr = sx * fx[c, i, q - 1] if j == q - 1 else fx[c, i, j + 1]
                        fl = sx * fx[c, i, 0] if j == 0 else fx[c, i, j - 1]
                        gr = sy * fy[c, q - 1, j] if i == q - 1 else fy[c, i + 1, j]
                        gl = sy * fy[c, 0, j] if i == 0 else fy[c, i - 1, j]
                        out[b, c, i, j] = -inv2dx * ((fr - fl) + (gr - gl))
        return out

    @njit(cache=True, fastmath=False)
    def vjp_kernel(u, v, gh_m_u2, gh_m_v2, uv, w, inv2dx):
        m = w.shape[0]
        q = w.shape[2]
        out = np.empty_like(w)
        wx = np.empty((3, q, q))
        wy = np.empty((3, q, q))
        for b in range(m):
            # transposed ghost-closed central differences
            for c in range(3):
                sx = _SX[c]
                sy = _SY[c]
                for i in range(q):
                    for j in range(q):
                        acc = 0.0
                        if j >= 1:
                            acc += w[b, c, i, j - 1]
                        if j + 1 < q:
                            acc -= w[b, c, i, j + 1]
                        if j == 0:
                            acc -= sx * w[b, c, i, 0]
                        if j == q - 1:
                            acc += sx * w[b, c, i, q - 1]
                        wx[c, i, j] = -inv2dx * acc
                        acc = 0.0
                        if i >= 1:
                            acc += w[b, c, i - 1, j]
                        if i + 1 < q:
                            acc -= w[b, c, i + 1, j]
                        if i == 0:
                            acc -= sy * w[b, c, 0, j]
                        if i == q - 1:
                            acc += sy * w[b, c, q - 1, j]
                        wy[c, i, j] = -inv2dx * acc
            # pointwise transposed flux Jacobians
            for i in range(q):
                for j in range(q):
                    uij = u[i, j]
                    vij = v[i, j]
                    x1 = wx[0, i, j]
                    x2 = wx[1, i, j]
                    x3 = wx[2, i, j]
                    y1 = wy[0, i, j]
                    y2 = wy[1, i, j]
                    y3 = wy[2, i, j]
                    out[b, 0, i, j] = (
                        gh_m_u2[i, j] * x2
                        - uv[i, j] * x3
                        - uv[i, j] * y2
                        + gh_m_v2[i, j] * y3
                    )
                    out[b, 1, i, j] = x1 + 2.0 * uij * x2 + vij * x3 + vij * y2
                    out[b, 2, i, j] = (
                        uij * x3 + y1 + uij * y2 + 2.0 * vij * y3
                    )
        return out
