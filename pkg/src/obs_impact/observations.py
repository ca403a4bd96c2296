"""Synthetic observations, the selection operator H, and fault injection.

An observation network is a list of (variable, i, j) selections per
observation time.  H gathers those entries from a state; its transpose
scatters observation-space values back onto the grid.  Both are exact
integer gather/scatter operations, so the adjoint pair identity holds
bitwise.
"""

from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioConfig
from .covariance import ObservationErrorModel
from .errors import DimensionMismatch, IndexOutOfRange, SiteNotObserved
from .swe import Trajectory

VAR_NAMES = ("h", "uh", "vh")


def full_network(q: int) -> np.ndarray:
    """Selector observing every variable at every grid point, in state
    flattening order (so H is the identity reordering)."""
    v, i, j = np.meshgrid(np.arange(3), np.arange(q), np.arange(q), indexing="ij")
    return np.column_stack([v.ravel(), i.ravel(), j.ravel()]).astype(np.int64)


def strided_network(q: int, stride: int) -> np.ndarray:
    """All three variables at every stride-th grid point per direction."""
    if stride <= 1:
        return full_network(q)
    pts = np.arange(0, q, stride)
    v, i, j = np.meshgrid(np.arange(3), pts, pts, indexing="ij")
    return np.column_stack([v.ravel(), i.ravel(), j.ravel()]).astype(np.int64)


@dataclass
class ObservationSet:
    """Observation times (step indices), per-time selectors and values,
    and the shared diagonal error model."""

    q: int
    times: tuple  # step indices, increasing
    selectors: dict  # step -> (m_k, 3) int array of (var, i, j)
    values: dict  # step -> (m_k,) float array
    error_model: ObservationErrorModel
    _full_at: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        full = full_network(self.q)
        for t in self.times:
            sel = self.selectors[t]
            if sel.ndim != 2 or sel.shape[1] != 3:
                raise DimensionMismatch("selectors must be (m, 3) arrays")
            if (
                sel[:, 0].min(initial=0) < 0
                or sel[:, 0].max(initial=0) > 2
                or sel[:, 1:].min(initial=0) < 0
                or sel[:, 1:].max(initial=0) >= self.q
            ):
                raise IndexOutOfRange(f"selector out of range at step {t}")
            if len(self.values[t]) != len(sel):
                raise DimensionMismatch(f"values/selector length mismatch at {t}")
            self._full_at[t] = sel.shape == full.shape and np.array_equal(sel, full)

    # -- H and R ----------------------------------------------------------------
    def _sel(self, k):
        if k not in self.selectors:
            raise IndexOutOfRange(f"no observations at step {k}")
        return self.selectors[k]

    def h_apply(self, k: int, state: np.ndarray) -> np.ndarray:
        """Gather observed entries of a (3, q, q) state (or a batch
        (m, 3, q, q) -> (m, m_k))."""
        sel = self._sel(k)
        if self._full_at[k]:
            return state.reshape(*state.shape[:-3], -1).copy()
        return state[..., sel[:, 0], sel[:, 1], sel[:, 2]]

    def h_transpose(self, k: int, w: np.ndarray) -> np.ndarray:
        """Scatter observation-space values onto a zero state; exact
        adjoint of h_apply.  Batched input (m, m_k) -> (m, 3, q, q)."""
        sel = self._sel(k)
        w = np.asarray(w, dtype=np.float64)
        batched = w.ndim == 2
        lead = (w.shape[0],) if batched else ()
        if self._full_at[k]:
            return w.reshape(lead + (3, self.q, self.q)).copy()
        out = np.zeros(lead + (3, self.q, self.q))
        # duplicate selector rows accumulate, keeping the adjoint exact
        idx = (slice(None),) if batched else ()
        np.add.at(out, idx + (sel[:, 0], sel[:, 1], sel[:, 2]), w)
        return out

    def sigma(self, k: int) -> np.ndarray:
        return self.error_model.sigma_for(self._sel(k)[:, 0])

    def r_apply_inverse(self, k: int, w: np.ndarray) -> np.ndarray:
        """R_k^{-1} w: elementwise division by the error variances."""
        w = np.asarray(w, dtype=np.float64)
        var = self.sigma(k) ** 2
        if w.shape[-1] != var.shape[0]:
            raise DimensionMismatch(
                f"expected {var.shape[0]} observations at step {k}, got {w.shape[-1]}"
            )
        return w / var

    def n_obs(self, k: int) -> int:
        return len(self._sel(k))

    # -- serialization ------------------------------------------------------------
    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,var,i,j,value,sigma\n")
            for t in self.times:
                sel = self.selectors[t]
                vals = self.values[t]
                sig = self.sigma(t)
                for (v, i, j), y, s in zip(sel, vals, sig):
                    fh.write(
                        f"{t},{VAR_NAMES[v]},{i},{j},{float(y)!r},{float(s)!r}\n"
                    )


def synthesize_observations(
    reference: Trajectory,
    cfg: ScenarioConfig,
    rng: np.random.Generator,
    selectors=None,
    noise: bool = True,
) -> ObservationSet:
    """Observations from the reference trajectory: y_k = H x_ref(t_k) + eta,
    eta ~ N(0, R), with the error model fitted to the clean values."""
    times = cfg.obs_steps
    if reference.n_steps < times[-1]:
        raise IndexOutOfRange(
            f"reference trajectory has {reference.n_steps} steps, "
            f"need {times[-1]}"
        )
    if selectors is None:
        net = strided_network(cfg.q, cfg.obs_stride)
        sel_all = {t: net for t in times}
    else:
        sel_all = {t: np.asarray(selectors[t], dtype=np.int64) for t in times}

    clean = {}
    for t in times:
        sel = sel_all[t]
        clean[t] = reference.states[t][sel[:, 0], sel[:, 1], sel[:, 2]]

    values_by_var = [
        np.concatenate(
            [clean[t][sel_all[t][:, 0] == v] for t in times]
        )
        for v in range(3)
    ]
    model = ObservationErrorModel.from_values(values_by_var, cfg.obs_std_frac)

    values = {}
    for t in times:
        y = clean[t].copy()
        if noise:
            sig = model.sigma_for(sel_all[t][:, 0])
            y += sig * rng.standard_normal(y.shape)
        values[t] = y
    return ObservationSet(
        q=cfg.q, times=times, selectors=sel_all, values=values, error_model=model
    )


def inject_faults(
    obs: ObservationSet, sites, factor: float = 1.5
) -> ObservationSet:
    """Return a copy with h, uh, vh observations at the given (i, j) sites
    multiplied by ``factor`` at the final observation time only."""
    final = obs.times[-1]
    sel = obs.selectors[final]
    values = {t: v.copy() for t, v in obs.values.items()}
    for (i, j) in sites:
        for v in range(3):
            match = np.flatnonzero(
                (sel[:, 0] == v) & (sel[:, 1] == i) & (sel[:, 2] == j)
            )
            if match.size == 0:
                raise SiteNotObserved(
                    f"site ({i}, {j}) variable {VAR_NAMES[v]} is not observed "
                    "at the final time"
                )
            values[final][match] *= factor
    return ObservationSet(
        q=obs.q,
        times=obs.times,
        selectors={t: s.copy() for t, s in obs.selectors.items()},
        values=values,
        error_model=obs.error_model,
    )
