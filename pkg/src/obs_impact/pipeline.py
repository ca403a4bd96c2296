"""Twin-experiment construction shared by the CLI commands and tests.

All randomness flows from the scenario seed through named child streams,
so every command is reproducible from its config alone.
"""

from dataclasses import dataclass

import numpy as np

from .assimilation import FourDVar, MinimizerReport
from .config import ScenarioConfig
from .covariance import BackgroundCovariance
from .impact import ForecastScoreSpec
from .observations import ObservationSet, inject_faults, synthesize_observations
from .swe import Trajectory, make_reference_initial_state, propagate

_STREAMS = ("background", "obs_noise", "sketch", "probe")


def spawn_rngs(seed: int) -> dict:
    """Named, independent random streams derived from one seed."""
    seqs = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(_STREAMS, seqs)}


@dataclass
class TwinSetup:
    cfg: ScenarioConfig
    reference: Trajectory  # truth, out to the verification time
    problem: FourDVar
    score_spec: ForecastScoreSpec
    rngs: dict

    @property
    def truth0(self) -> np.ndarray:
        return self.reference.states[0]


def build_twin(
    cfg: ScenarioConfig,
    fault_sites=None,
    fault_factor: float = 1.5,
    obs_noise: bool = True,
) -> TwinSetup:
    """Reference trajectory, synthetic observations, perturbed background,
    and the assembled assimilation problem."""
    rngs = spawn_rngs(cfg.seed)
    x_true = make_reference_initial_state(cfg)
    horizon = max(cfg.n_steps_verify, cfg.n_steps_window)
    reference = propagate(x_true, horizon, cfg)

    obs = synthesize_observations(
        reference, cfg, rngs["obs_noise"], noise=obs_noise
    )
    if fault_sites:
        obs = inject_faults(obs, fault_sites, factor=fault_factor)

    window_states = reference.states[: cfg.n_steps_window + 1]
    bcov = BackgroundCovariance.from_reference(cfg, window_states)
    background = x_true + bcov.sample(rngs["background"])

    problem = FourDVar(cfg, background, bcov, obs)
    score_spec = ForecastScoreSpec(
        x_verify=reference.states[cfg.n_steps_verify],
        n_steps=cfg.n_steps_verify,
    )
    return TwinSetup(
        cfg=cfg,
        reference=reference,
        problem=problem,
        score_spec=score_spec,
        rngs=rngs,
    )


def run_assimilation(
    setup: TwinSetup, max_iters: int = 400, grad_tol: float = None
) -> MinimizerReport:
    return setup.problem.minimize(max_iters=max_iters, grad_tol=grad_tol)
