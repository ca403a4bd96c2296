"""Background-error covariance B0 and observation-error model.

B0 is block-diagonal across the three state variables: no cross-variable
correlation.  Each block is D^{1/2} C D^{1/2} where D holds pointwise
variances and C is the Gaussian grid-point correlation

    C[(i1,j1),(i2,j2)] = exp(-((i1-i2)^2 + (j1-j2)^2) / (2 L^2)),

i.e. the Kronecker product of two 1D Gaussian correlation matrices.  The
same C serves all three variables (same grid, same correlation length).

The raw Gaussian correlation is numerically singular for realistic L
(its spectrum decays superexponentially), so a white-noise fraction is
blended in: (1 - corr_jitter) C + corr_jitter I.  That keeps inverse
applications well-defined and the 4D-Var Hessian conditioning in a
workable range; the fraction is configurable per scenario.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .config import ScenarioConfig
from .errors import DimensionMismatch, FactorizationFailure


def gaussian_correlation_1d(q: int, corr_length: float) -> np.ndarray:
    idx = np.arange(q, dtype=np.float64)
    d = idx[:, None] - idx[None, :]
    return np.exp(-(d * d) / (2.0 * corr_length**2))


def _regularized_correlation(q, corr_length, jitter):
    """Dense q^2 x q^2 grid-point correlation.

    The raw Gaussian kernel is numerically singular, so a white-noise
    fraction is blended in: (1 - jitter) * C + jitter * I.  This keeps a
    unit diagonal and bounds the smallest eigenvalue by jitter exactly.
    """
    c1 = gaussian_correlation_1d(q, corr_length)
    c = np.kron(c1, c1)
    c *= 1.0 - jitter
    c[np.diag_indices_from(c)] += jitter
    return c


@dataclass
class BackgroundCovariance:
    """B0 = D^{1/2} (C (+) C (+) C) D^{1/2} with a shared correlation factor.

    std: (3, q, q) pointwise standard deviations.
    chol: lower Cholesky factor of the regularized correlation matrix.
    """

    q: int
    std: np.ndarray
    corr: np.ndarray
    chol: np.ndarray

    @classmethod
    def build(cls, cfg: ScenarioConfig, std: np.ndarray) -> "BackgroundCovariance":
        corr = _regularized_correlation(cfg.q, cfg.corr_length, cfg.corr_jitter)
        try:
            chol = np.linalg.cholesky(corr)
        except np.linalg.LinAlgError as exc:
            raise FactorizationFailure(
                "correlation matrix is not SPD; increase corr_jitter"
            ) from exc
        return cls(q=cfg.q, std=np.asarray(std, dtype=np.float64), corr=corr, chol=chol)

    @classmethod
    def from_reference(
        cls, cfg: ScenarioConfig, ref_traj_states: np.ndarray, floor_frac: float = 0.5
    ) -> "BackgroundCovariance":
        """Standard deviations as bg_std_frac of the pointwise initial
        reference values, floored per variable at floor_frac times the
        trajectory-wide maximum magnitude.

        The floor gives variables whose initial field vanishes (momenta of
        a state starting at rest) a variance on the scale their dynamics
        actually reach, instead of a degenerate near-zero one.
        """
        ref0 = ref_traj_states[0]
        dyn_scale = np.abs(ref_traj_states).max(axis=(0, 2, 3))  # per variable
        dyn_scale = np.maximum(dyn_scale, 1e-6)
        base = np.maximum(
            np.abs(ref0), floor_frac * dyn_scale[:, None, None]
        )
        return cls.build(cfg, cfg.bg_std_frac * base)

    # -- vector layout helpers ------------------------------------------------
    @property
    def n(self) -> int:
        return 3 * self.q * self.q

    def _blocks(self, v):
        v = np.asarray(v, dtype=np.float64)
        batched = v.ndim == 2
        if v.shape[0] != self.n:
            raise DimensionMismatch(f"expected length {self.n}, got {v.shape[0]}")
        m = v.shape[1] if batched else 1
        return v.reshape(3, self.q * self.q, m), batched

    def _flat_std(self):
        return self.std.reshape(3, self.q * self.q, 1)

    # -- operations -----------------------------------------------------------
    def apply(self, v):
        """B0 v (accepts (n,) or (n, m))."""
        blocks, batched = self._blocks(v)
        d = self._flat_std()
        out = d * (self.corr @ (d * blocks))
        return out.reshape(self.n, -1) if batched else out.reshape(self.n)

    def apply_inverse(self, v):
        """B0^{-1} v via triangular solves with the correlation factor."""
        blocks, batched = self._blocks(v)
        d = self._flat_std()
        scaled = blocks / d
        sol = np.empty_like(scaled)
        for b in range(3):
            sol[b] = scipy.linalg.cho_solve((self.chol, True), scaled[b])
        out = sol / d
        return out.reshape(self.n, -1) if batched else out.reshape(self.n)

    def diagonal(self):
        """diag(B0) as a flat vector."""
        cd = np.diag(self.corr)
        d2 = self.std.reshape(3, -1) ** 2
        return (d2 * cd).reshape(self.n)

    def sample(self, rng: np.random.Generator):
        """One draw L_B z with z ~ N(0, I); returns a (3, q, q) field."""
        return self.sample_many(rng, 1)[..., 0]

    def sample_many(self, rng: np.random.Generator, m: int):
        """(3, q, q, m) array of independent draws."""
        z = rng.standard_normal((3, self.q * self.q, m))
        d = self._flat_std()
        out = d * (self.chol @ z)
        return out.reshape(3, self.q, self.q, m)


@dataclass(frozen=True)
class ObservationErrorModel:
    """Diagonal observation-error covariance: one standard deviation per
    variable, obs_std_frac of the largest absolute observed value."""

    sigma_by_var: tuple

    @classmethod
    def from_values(cls, values_by_var, frac: float) -> "ObservationErrorModel":
        sigmas = []
        for vals in values_by_var:
            scale = float(np.max(np.abs(vals))) if len(vals) else 0.0
            if scale == 0.0:
                scale = 1.0  # degenerate all-zero observations: neutral scale
            sigmas.append(frac * scale)
        return cls(sigma_by_var=tuple(sigmas))

    def sigma_for(self, var_indices: np.ndarray) -> np.ndarray:
        return np.asarray(self.sigma_by_var, dtype=np.float64)[var_indices]
