"""Baseline panel estimation: the three-way gravity fit on a panel.

Thin wiring between the panel container and the estimator: builds the
exporter-year, importer-year and pair fixed-effect dimensions, picks the
reference levels (reference country at the latest year for the
time-interacted dimensions), and clusters on the directed pair.
"""

from __future__ import annotations

from .hdfe import FeSpec, PpmlFit, fit_ppml
from .panel import IntervalPanel

__all__ = ["stage1_fe_specs", "fit_baseline"]


def stage1_fe_specs(panel: IntervalPanel, reference: str):
    """Fixed-effect dimensions for the baseline panel specification."""
    latest = max(panel.years)
    return [
        FeSpec(
            "exporter-year",
            list(zip(panel.exporter, panel.year)),
            reference=(reference, latest),
        ),
        FeSpec(
            "importer-year",
            list(zip(panel.importer, panel.year)),
            reference=(reference, latest),
        ),
        FeSpec(
            "pair",
            panel.pair_labels(),
            reference=(reference, reference) if panel.has_intra else None,
        ),
    ]


def fit_baseline(panel: IntervalPanel, reference: str, **kwargs) -> PpmlFit:
    """Fit flows on the agreement indicator with three-way fixed effects.

    Returns the fit with the ``FTA`` coefficient, pair-clustered standard
    errors, and the pair fixed effects that feed cost recovery.
    """
    if reference not in panel.countries:
        raise ValueError(f"reference country {reference} not in panel registry")
    return fit_ppml(
        panel.flow,
        covariates={"FTA": panel.fta.astype(float)},
        fes=stage1_fe_specs(panel, reference),
        cluster=panel.pair_labels(),
        **kwargs,
    )
