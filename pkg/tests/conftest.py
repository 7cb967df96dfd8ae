import numpy as np
import pytest

from geppml import stage1_fe_specs, synth_world
from geppml.costs import CostMatrix


@pytest.fixture(scope="session")
def small_world():
    """10 countries x 3 years, noiseless, planted beta 0.5 and sigma 7."""
    panel, truth = synth_world(10, [1990, 1994, 1998], 0.5, 7.0, seed=1)
    return panel, truth


@pytest.fixture(scope="session")
def ge_world():
    """6 countries x 2 years with two planted agreements switching on."""
    panel, truth = synth_world(
        6,
        [1994, 1998],
        0.5,
        7.0,
        seed=7,
        fta_schedule={("AAA", "AAB"): 1998, ("AAC", "AAE"): 1998},
    )
    return panel, truth


def stage1_fes(panel, reference):
    return stage1_fe_specs(panel, reference)


def truth_cost_matrix(truth):
    return CostMatrix(
        countries=tuple(sorted(truth.countries)),
        values=dict(truth.pair_costs),
        source={p: "estimated" for p in truth.pair_costs},
        sigma=truth.sigma,
        has_diagonal=any(a == b for a, b in truth.pair_costs),
    )


def tau_matrices(baseline, log_tau_cfl=None):
    """Dense (n, n) cost matrices aligned with a GeBaseline's registry."""
    n = len(baseline.countries)
    tau_bsl = np.zeros((n, n))
    tau_cfl = np.zeros((n, n))
    for k, (e, i) in enumerate(zip(baseline.exporter_idx, baseline.importer_idx)):
        tau_bsl[e, i] = np.exp(baseline.cost_offset[k] + baseline.beta * baseline.fta[k])
        if log_tau_cfl is not None:
            tau_cfl[e, i] = np.exp(log_tau_cfl[k])
    return tau_bsl, tau_cfl
