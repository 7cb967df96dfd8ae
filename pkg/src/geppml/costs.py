"""Bilateral trade-cost recovery and completion.

Stage 1 identifies pair fixed effects only where trade is observed; the
second-stage gravity regression of ``exp(pair FE)`` on the standard
covariates (with exporter and importer fixed effects) predicts the rest,
yielding a complete matrix of power-transformed costs t^(1-sigma).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hdfe import FeSpec, PpmlFit, fit_ppml
from .panel import COVARIATE_NAMES

__all__ = [
    "CostMatrix",
    "costs_from_pair_fe",
    "fit_stage2",
    "complete_costs",
    "write_cost_matrix",
    "read_cost_matrix",
]

ESTIMATED = "estimated"
PREDICTED = "predicted"


class CostError(Exception):
    """Cost recovery or completion failed."""


@dataclass
class CostMatrix:
    """Complete bilateral matrix of t^(1-sigma) levels.

    ``values`` covers every ordered pair of registry countries (the
    diagonal only when ``has_diagonal``); entries are strictly positive
    and tagged ``estimated`` or ``predicted`` in ``source``.
    """

    countries: tuple
    values: dict
    source: dict
    sigma: float
    has_diagonal: bool = False

    def __post_init__(self):
        if self.sigma <= 1:
            raise CostError(f"sigma must exceed 1, got {self.sigma}")
        for pair in self._required_pairs():
            v = self.values.get(pair)
            if v is None:
                raise CostError(f"cost matrix incomplete: missing pair {pair}")
            if not np.isfinite(v) or v <= 0:
                raise CostError(f"cost for pair {pair} must be strictly positive, got {v!r}")

    def _required_pairs(self):
        for a in self.countries:
            for b in self.countries:
                if a != b or self.has_diagonal:
                    yield (a, b)

    def offset_for(self, exporters, importers):
        """Log-cost offset aligned with observation arrays."""
        out = np.empty(len(exporters))
        for ix, pair in enumerate(zip(exporters, importers)):
            try:
                out[ix] = np.log(self.values[pair])
            except KeyError:
                raise CostError(f"cost matrix has no entry for pair {pair}") from None
        return out


def costs_from_pair_fe(fit: PpmlFit, dim: str = "pair") -> dict:
    """Power-transformed cost levels from identified pair fixed effects.

    Levels of the ``dim`` dimension must be ordered (exporter, importer)
    tuples; pairs dropped for all-zero trade are simply absent.

    With country-time effects in the model, pair effects carry a gauge:
    they are identified up to exporter- and importer-specific shifts.
    Every downstream consumer (the stage-2 regression and the constrained
    counterfactual fits) includes exporter and importer effects that
    absorb the gauge, so results do not depend on it.
    """
    if dim not in fit.fe_values:
        raise CostError(f"fit has no {dim!r} fixed-effect dimension")
    return {pair: float(np.exp(v)) for pair, v in fit.fe_values[dim].items()}


def fit_stage2(pair_fes: dict, covariates: dict, weights: dict | None = None) -> PpmlFit:
    """Gravity regression of estimated cost levels on pair covariates.

    ``pair_fes`` maps ordered pairs to t^(1-sigma) levels; ``covariates``
    maps ordered pairs to GravityCovariates. Weights default to uniform;
    pass observed pair trade totals to weight by volume.
    """
    pairs = sorted(pair_fes)
    missing = [p for p in pairs if p not in covariates]
    if missing:
        raise CostError(f"no gravity covariates for pair(s) {missing[:5]}")
    y = np.array([pair_fes[p] for p in pairs], dtype=float)
    cols = {
        name: np.array([getattr(covariates[p], name) for p in pairs], dtype=float)
        for name in COVARIATE_NAMES
    }
    fes = [
        FeSpec("exporter", [p[0] for p in pairs]),
        FeSpec("importer", [p[1] for p in pairs]),
    ]
    w = None if weights is None else np.array([weights[p] for p in pairs], dtype=float)
    # one observation per pair: pair clustering degenerates to
    # heteroskedasticity-robust errors, which is what the summaries report
    return fit_ppml(y, covariates=cols, fes=fes, weights=w, cluster=pairs)


def predict_stage2(stage2: PpmlFit, pair, covariates) -> float:
    """Out-of-sample cost prediction exp(x'beta + exporter FE + importer FE)."""
    cov = covariates.get(pair)
    if cov is None:
        raise CostError(f"no gravity covariates for pair {pair}; cannot predict its cost")
    e, i = pair
    for dim, country in (("exporter", e), ("importer", i)):
        if country not in stage2.fe_values[dim]:
            raise CostError(f"country {country} absent from stage-2 {dim} fixed effects")
    xb = sum(stage2.beta[name] * getattr(cov, name) for name in COVARIATE_NAMES)
    return float(
        np.exp(
            stage2.constant
            + xb
            + stage2.fe_values["exporter"][e]
            + stage2.fe_values["importer"][i]
        )
    )


def complete_costs(
    pair_fes: dict,
    stage2: PpmlFit,
    countries,
    covariates: dict,
    sigma: float,
    include_diagonal: bool = False,
) -> CostMatrix:
    """Fill missing cells with stage-2 predictions; estimated cells kept verbatim."""
    countries = tuple(sorted(countries))
    values, source = {}, {}
    for a in countries:
        for b in countries:
            if a == b and not include_diagonal:
                continue
            pair = (a, b)
            if pair in pair_fes:
                values[pair] = float(pair_fes[pair])
                source[pair] = ESTIMATED
            else:
                values[pair] = predict_stage2(stage2, pair, covariates)
                source[pair] = PREDICTED
    return CostMatrix(
        countries=countries,
        values=values,
        source=source,
        sigma=sigma,
        has_diagonal=include_diagonal,
    )


def write_cost_matrix(matrix: CostMatrix, path, manifest_id=None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if manifest_id:
            fh.write(f"# manifest: {manifest_id}\n")
        fh.write("exporter,importer,cost,source\n")
        for pair in sorted(matrix.values):
            fh.write(f"{pair[0]},{pair[1]},{matrix.values[pair]!r},{matrix.source[pair]}\n")


def read_cost_matrix(path, sigma: float) -> CostMatrix:
    """Load an exported (or externally calibrated) cost vector."""
    values, source = {}, {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        while header.startswith("#"):
            header = fh.readline().strip()
        if header != "exporter,importer,cost,source":
            raise CostError(f"unexpected cost-matrix header {header!r} in {path}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise CostError(f"malformed cost row at {path}:{lineno}")
            pair = (parts[0], parts[1])
            values[pair] = float(parts[2])
            source[pair] = parts[3]
    countries = tuple(sorted({p[0] for p in values} | {p[1] for p in values}))
    has_diag = any(a == b for a, b in values)
    return CostMatrix(
        countries=countries, values=values, source=source, sigma=sigma, has_diagonal=has_diag
    )
