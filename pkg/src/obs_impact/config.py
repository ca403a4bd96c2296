"""Scenario and experiment configuration.

Configuration files are flat ``key = value`` text, one entry per line,
``#`` starts a comment.  Keys map 1:1 onto the dataclass fields below;
unknown keys are rejected.
"""

from dataclasses import dataclass, fields, replace
import math

from .errors import ConfigError

SOLVER_NAMES = ("cg", "minres", "gmres", "qmr", "bicgstab", "cgs", "lsqr")
PRECOND_NAMES = (
    "none",
    "exact_diagonal",
    "b0_diagonal",
    "row_sum",
    "probed_block",
    "lbfgs_lmp",
    "eigenpair_lmp",
    "randomized_svd",
)
HESSIAN_VARIANTS = ("soa", "gauss_newton", "fd")


@dataclass(frozen=True)
class ScenarioConfig:
    """Grid, timestep, window, and error-statistics parameters.

    The spatial domain is the square [-domain_half_width, domain_half_width]^2
    discretized with q cells per direction (cell centers, dx = dy).  The model
    state holds three q x q fields (thickness h, momenta uh and vh), flattened
    h-block first, then uh, then vh, each row-major.
    """

    q: int = 40
    domain_half_width: float = 3.0
    g: float = 9.8
    dt: float = 0.001
    n_steps_window: int = 100
    obs_every: int = 20
    n_steps_verify: int = 200
    seed: int = 20130217

    # Reference initial condition: Gaussian bell in h over a flat base depth
    # (thin layer), momenta proportional to h through constant velocities.
    h_base: float = 10.0
    bell_amplitude: float = 3.0
    bell_sigma: float = 0.75
    u_const: float = 0.0
    v_const: float = 0.0

    # Background-error statistics: pointwise std fraction of the reference
    # fields, Gaussian spatial correlation over corr_length grid points.
    # corr_jitter is the white-noise fraction blended into the correlation
    # matrix ((1-jitter) C + jitter I) to keep it numerically SPD.
    bg_std_frac: float = 0.05
    corr_length: float = 5.0
    corr_jitter: float = 0.01

    # Observation-error std fraction of the largest absolute observed value
    # per variable; obs_stride thins the network to every obs_stride-th
    # grid point per direction (1 = observe everywhere).
    obs_std_frac: float = 0.01
    obs_stride: int = 2

    def __post_init__(self):
        if self.q < 4:
            raise ConfigError(f"q must be >= 4, got {self.q}")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.n_steps_window % self.obs_every != 0:
            raise ConfigError(
                f"obs_every={self.obs_every} must divide "
                f"n_steps_window={self.n_steps_window}"
            )
        if self.n_steps_verify < self.n_steps_window:
            raise ConfigError("verification time precedes the window end")

    @property
    def n(self) -> int:
        """State dimension 3*q**2."""
        return 3 * self.q * self.q

    @property
    def dx(self) -> float:
        return 2.0 * self.domain_half_width / self.q

    @property
    def obs_steps(self) -> tuple:
        """Observation step indices, obs_every..n_steps_window inclusive."""
        return tuple(
            range(self.obs_every, self.n_steps_window + 1, self.obs_every)
        )

    def cell_centers(self):
        """1D coordinates of cell centers (shared by both directions)."""
        import numpy as np

        half = self.domain_half_width
        return -half + (np.arange(self.q) + 0.5) * self.dx

    def coarsened(self) -> "ScenarioConfig":
        """Scenario on the q/2 grid: same physical domain and window,
        correlation length halved in grid-point units."""
        if self.q % 2 != 0:
            from .errors import OddGrid

            raise OddGrid(f"cannot coarsen odd grid q={self.q}")
        return replace(self, q=self.q // 2, corr_length=self.corr_length / 2.0)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a CLI run needs on top of the scenario."""

    scenario: ScenarioConfig
    solver: str = "cg"
    precond: str = "none"
    hessian: str = "gauss_newton"
    budget: int = 100
    residual_tol: float = 0.0
    max_minimize_iters: int = 400
    grad_tol_factor: float = 1e-10
    mg_cycles: int = 1
    fault_sites: tuple = ((10, 20), (30, 20))
    fault_factor: float = 1.5
    detect_dominance: float = 1.8
    snapshot_stride: int = 1
    out_dir: str = "out"
    # bench-solvers: comma-separated preconditioner list, and how the
    # reference solution for error norms is produced
    bench_preconds: str = "none"
    reference_mode: str = "auto"  # auto | dense | cg | none

    def __post_init__(self):
        if self.solver not in SOLVER_NAMES:
            raise ConfigError(
                f"unknown solver {self.solver!r}; choose from {SOLVER_NAMES}"
            )
        if self.precond not in PRECOND_NAMES:
            raise ConfigError(
                f"unknown preconditioner {self.precond!r}; "
                f"choose from {PRECOND_NAMES}"
            )
        if self.hessian not in HESSIAN_VARIANTS:
            raise ConfigError(
                f"unknown hessian variant {self.hessian!r}; "
                f"choose from {HESSIAN_VARIANTS}"
            )
        if self.budget < 1:
            raise ConfigError("budget must be >= 1")
        if self.mg_cycles not in (1, 2, 3):
            raise ConfigError("mg_cycles must be 1, 2 or 3")
        for name in self.bench_precond_list:
            if name not in PRECOND_NAMES:
                raise ConfigError(
                    f"unknown preconditioner {name!r} in bench_preconds"
                )
        if self.reference_mode not in ("auto", "dense", "cg", "none"):
            raise ConfigError(
                f"reference_mode must be auto/dense/cg/none, "
                f"got {self.reference_mode!r}"
            )

    @property
    def bench_precond_list(self) -> tuple:
        return tuple(
            s.strip() for s in self.bench_preconds.split(",") if s.strip()
        )


def _type_name(tp):
    return tp if isinstance(tp, str) else tp.__name__


_SCENARIO_FIELDS = {f.name: _type_name(f.type) for f in fields(ScenarioConfig)}
_EXPERIMENT_FIELDS = {
    f.name: _type_name(f.type)
    for f in fields(ExperimentConfig)
    if f.name != "scenario"
}


def _parse_scalar(key, text, type_name):
    text = text.strip()
    try:
        if type_name == "int":
            v = int(text)
        elif type_name == "float":
            v = float(text)
            if not math.isfinite(v):
                raise ValueError("non-finite")
        elif type_name == "str":
            v = text
        elif type_name == "tuple":  # fault sites: "i,j;i,j"
            v = tuple(
                tuple(int(c) for c in pair.split(","))
                for pair in text.split(";")
                if pair.strip()
            )
        else:
            raise ConfigError(f"unsupported config field type {type_name}")
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from exc
    return v


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse flat key=value text into an ExperimentConfig."""
    scenario_kv = {}
    experiment_kv = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value': {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in _SCENARIO_FIELDS:
            scenario_kv[key] = _parse_scalar(key, value, _SCENARIO_FIELDS[key])
        elif key in _EXPERIMENT_FIELDS:
            experiment_kv[key] = _parse_scalar(
                key, value, _EXPERIMENT_FIELDS[key]
            )
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    scenario = ScenarioConfig(**scenario_kv)
    return ExperimentConfig(scenario=scenario, **experiment_kv)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())
