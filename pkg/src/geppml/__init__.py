"""Structural gravity estimation and general-equilibrium FTA counterfactuals.

The pipeline has three steps: estimate the baseline panel gravity model
with three-way fixed effects (PPML), recover and complete the bilateral
trade-cost matrix, then solve conditional and full-endowment
counterfactuals by constrained re-estimation.
"""

__version__ = "0.1.0"

from .baseline import fit_baseline, stage1_fe_specs
from .costs import CostMatrix, complete_costs, costs_from_pair_fe, fit_stage2
from .demean import BACKEND, HAVE_COMPILED
from .ge import (
    EconomyState,
    GeConfig,
    GeOutcome,
    conditional_ge,
    full_endowment_ge,
    prepare_baseline,
    recover_mr,
)
from .hdfe import (
    FeSpec,
    PpmlFit,
    cluster_se,
    fit_constrained,
    fit_ppml,
    percent_effect,
)
from .panel import (
    GravityCovariates,
    IntervalPanel,
    TradeObservation,
    build_interval_panel,
    load_panel,
    write_panel,
)
from .scenario import Scenario, accession_scenario, apply_scenario, load_scenario
from .synth import SynthTruth, synth_world

__all__ = [
    "__version__",
    "BACKEND",
    "HAVE_COMPILED",
    "CostMatrix",
    "EconomyState",
    "FeSpec",
    "GeConfig",
    "GeOutcome",
    "GravityCovariates",
    "IntervalPanel",
    "PpmlFit",
    "Scenario",
    "SynthTruth",
    "TradeObservation",
    "accession_scenario",
    "apply_scenario",
    "build_interval_panel",
    "cluster_se",
    "complete_costs",
    "conditional_ge",
    "costs_from_pair_fe",
    "fit_baseline",
    "fit_constrained",
    "fit_ppml",
    "fit_stage2",
    "full_endowment_ge",
    "load_panel",
    "load_scenario",
    "percent_effect",
    "prepare_baseline",
    "recover_mr",
    "stage1_fe_specs",
    "synth_world",
    "write_panel",
]
