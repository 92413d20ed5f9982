"""Simulation and estimation workbench for learning-driven friendship formation.

Closed forms live in :mod:`.model`, the randomization-list design in
:mod:`.randomization`, populations and breakthrough draws in
:mod:`.population`, fixed-effect regressions in :mod:`.estimator` and the
end-to-end pipeline in :mod:`.experiment`.
"""
from ._version import __version__
from .config import ConfigValidationError, RunConfig
from .model import (
    ClosedFormOutputs,
    Distance,
    DyadModelInputs,
    HomophilyMode,
    ModelInputError,
    ModelParams,
    ModelRestrictionError,
    closed_form,
    cutoff_belief,
    dyad_link_prob,
    exploration_time,
    extended_dyad_link_prob,
    link_rates,
    posterior_no_signal,
    side_maintain_prob,
)
from .population import SimConfig, generate_population, monte_carlo_link_prob, simulate_network
from .randomization import allocate, build_list, verify_alternation

__all__ = [
    "__version__",
    "ClosedFormOutputs",
    "ConfigValidationError",
    "Distance",
    "DyadModelInputs",
    "HomophilyMode",
    "ModelInputError",
    "ModelParams",
    "ModelRestrictionError",
    "RunConfig",
    "SimConfig",
    "allocate",
    "build_list",
    "closed_form",
    "cutoff_belief",
    "dyad_link_prob",
    "exploration_time",
    "extended_dyad_link_prob",
    "generate_population",
    "link_rates",
    "monte_carlo_link_prob",
    "posterior_no_signal",
    "side_maintain_prob",
    "simulate_network",
    "verify_alternation",
]
