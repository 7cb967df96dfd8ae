"""Conditional and full-endowment general-equilibrium counterfactuals.

The engine re-estimates the constrained gravity model with exporter and
importer fixed effects and a fixed trade-cost offset, recovers the
multilateral resistances from the fixed effects, and (for the full
endowment solution) iterates factory-gate prices, income, expenditure and
trade until the price-change criteria d and sd(s) are met.

Reported levels use a world-output numeraire (counterfactual prices are
scaled so world nominal output matches the baseline), which makes every
reported percentage change invariant to the choice of reference country.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .costs import CostMatrix
from .hdfe import FeSpec, PpmlFit, fit_constrained

__all__ = [
    "GeConfig",
    "EconomyState",
    "GeOutcome",
    "GeBaseline",
    "GeError",
    "GeDivergenceError",
    "TraceRow",
    "recover_mr",
    "prepare_baseline",
    "conditional_ge",
    "full_endowment_ge",
    "write_trace",
    "read_trace",
]


class GeError(Exception):
    pass


# the GE invariants (no-shock identity at 1e-10, decomposition identity at
# 1e-8 relative) need the inner fits converged well past the estimator's
# reporting defaults
_GE_FIT_KWARGS = {"foc_tol": 1e-13, "demean_tol": 1e-14}


class GeDivergenceError(GeError):
    def __init__(self, message, trace):
        self.trace = trace
        super().__init__(message)


@dataclass(frozen=True)
class GeConfig:
    """Solver configuration for the counterfactual solvers."""

    sigma: float = 7.0
    price_tol: float = 1e-3
    sd_tol: float = 1e-3
    max_outer_iter: int = 100
    damping: float = 0.5
    expenditure_share_mode: str = "fixed_phi"

    def __post_init__(self):
        if self.sigma <= 1:
            raise GeError("sigma must exceed 1")
        if self.price_tol <= 0 or self.sd_tol <= 0:
            raise GeError("tolerances must be strictly positive")
        if not (0 < self.damping <= 1):
            raise GeError("damping must lie in (0, 1]")
        if self.expenditure_share_mode != "fixed_phi":
            raise GeError(f"unknown expenditure share mode {self.expenditure_share_mode!r}")


@dataclass
class EconomyState:
    """Per-country levels; prices are indexes with baseline 1."""

    countries: tuple
    output: np.ndarray
    expenditure: np.ndarray
    price: np.ndarray
    imr: np.ndarray
    omr: np.ndarray

    @property
    def world_output(self) -> float:
        return float(np.sum(self.output))

    def __post_init__(self):
        for name in ("output", "expenditure", "price", "imr", "omr"):
            arr = getattr(self, name)
            if np.any(~np.isfinite(arr)) or np.any(arr <= 0):
                raise GeError(f"economy state field {name} must be strictly positive")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    d: float
    sd: float
    max_price_change: float


@dataclass
class GeOutcome:
    """Per-country percentage changes plus the convergence trace."""

    countries: tuple
    pct_trade_conditional: np.ndarray
    pct_trade_full: np.ndarray
    pct_rgdp: np.ndarray
    pct_imr: np.ndarray
    pct_omr: np.ndarray
    pct_prices: np.ndarray
    iterations: int
    final_d: float
    final_sd: float
    trace: list = field(default_factory=list)
    market_clearing: list = field(default_factory=list)
    sigma: float = 7.0
    reference: str = ""


@dataclass
class GeBaseline:
    """Baseline constrained solution for one evaluation year."""

    countries: tuple
    reference: str
    sigma: float
    exporter_idx: np.ndarray
    importer_idx: np.ndarray
    flows: np.ndarray
    cost_offset: np.ndarray  # log t^(1-sigma) per observation
    beta: float
    fta: np.ndarray
    fit: PpmlFit
    output: np.ndarray
    expenditure: np.ndarray
    imr: np.ndarray
    omr: np.ndarray

    @property
    def world_output(self) -> float:
        return float(np.sum(self.output))

    def economy(self) -> EconomyState:
        return EconomyState(
            countries=self.countries,
            output=self.output.copy(),
            expenditure=self.expenditure.copy(),
            price=np.ones(len(self.countries)),
            imr=self.imr.copy(),
            omr=self.omr.copy(),
        )


def _fe_specs(countries, exporter_idx, importer_idx, reference):
    exp_labels = [countries[i] for i in exporter_idx]
    imp_labels = [countries[i] for i in importer_idx]
    return [
        FeSpec("exporter", exp_labels, reference=reference),
        FeSpec("importer", imp_labels, reference=reference),
    ]


def recover_mr(fit: PpmlFit, output, expenditure, countries, reference, sigma):
    """Multilateral resistance indexes from a constrained fit.

    With a = exporter values (constant folded in) and b = importer values,
    the mapping

        P_j^(sigma-1)  = exp(b_j) E_R / (exp(b_R) E_j)
        Pi_i^(sigma-1) = exp(a_i) Y / (Y_i k),   k = E_R / exp(b_R)

    reproduces the fitted flows exactly through the structural
    decomposition X_ij = (Y_i E_j / Y) t_ij^(1-sigma) Pi_i^(sigma-1)
    P_j^(sigma-1), and normalizes P at the reference country to 1.
    """
    countries = tuple(countries)
    try:
        r = countries.index(reference)
    except ValueError:
        raise GeError(f"reference country {reference} not in registry") from None
    a = fit.fe_array("exporter", countries, include_constant=True)
    b = fit.fe_array("importer", countries)
    output = np.asarray(output, dtype=float)
    expenditure = np.asarray(expenditure, dtype=float)
    world = float(np.sum(output))
    p_pow = np.exp(b - b[r]) * expenditure[r] / expenditure
    k = expenditure[r] / np.exp(b[r])
    pi_pow = np.exp(a) * world / (output * k)
    inv = 1.0 / (sigma - 1.0)
    return p_pow**inv, pi_pow**inv


def recompose_flows(exporter_idx, importer_idx, log_tau, economy: EconomyState, sigma):
    """Structural flows implied by an economy state and cost offsets."""
    y, e = economy.output, economy.expenditure
    world = economy.world_output
    pw = economy.imr ** (sigma - 1.0)
    iw = economy.omr ** (sigma - 1.0)
    return (
        y[exporter_idx]
        * e[importer_idx]
        / world
        * np.exp(log_tau)
        * iw[exporter_idx]
        * pw[importer_idx]
    )


def _margins(exporter_idx, importer_idx, values, n):
    return (
        np.bincount(exporter_idx, weights=values, minlength=n),
        np.bincount(importer_idx, weights=values, minlength=n),
    )


def prepare_baseline(
    exporters,
    importers,
    flows,
    costs: CostMatrix,
    beta: float,
    fta,
    reference: str,
    sigma: float | None = None,
) -> GeBaseline:
    """Solve the constrained baseline for one evaluation-year slice.

    Flows must be a single cross-section; output and expenditure are its
    row and column margins. The constrained fit holds the full cost term
    (completed costs plus the agreement effect) in the offset and
    estimates exporter and importer fixed effects only.
    """
    sigma = costs.sigma if sigma is None else sigma
    flows = np.asarray(flows, dtype=float)
    fta = np.asarray(fta, dtype=np.int8)
    exporters = list(exporters)
    importers = list(importers)
    countries = tuple(sorted(set(exporters) | set(importers)))
    if reference not in countries:
        raise GeError(f"reference country {reference} not present in the slice")
    e_idx = np.array([countries.index(c) for c in exporters], dtype=np.int64)
    i_idx = np.array([countries.index(c) for c in importers], dtype=np.int64)
    cost_offset = costs.offset_for(exporters, importers)

    fit = fit_constrained(
        flows,
        cost_offset,
        beta,
        fta,
        _fe_specs(countries, e_idx, i_idx, reference),
        **_GE_FIT_KWARGS,
    )
    if fit.diagnostics.n_dropped_obs:
        # countries separated out of the fit cannot appear in the GE economy
        kept = fit.kept
        return prepare_baseline(
            [exporters[i] for i in np.flatnonzero(kept)],
            [importers[i] for i in np.flatnonzero(kept)],
            flows[kept],
            costs,
            beta,
            fta[kept],
            reference,
            sigma,
        )
    n = len(countries)
    output, expenditure = _margins(e_idx, i_idx, flows, n)
    if np.any(output <= 0) or np.any(expenditure <= 0):
        bad = [countries[i] for i in np.flatnonzero((output <= 0) | (expenditure <= 0))]
        raise GeError(f"zero output or expenditure for {bad}; cannot anchor the economy")
    imr, omr = recover_mr(fit, output, expenditure, countries, reference, sigma)
    return GeBaseline(
        countries=countries,
        reference=reference,
        sigma=sigma,
        exporter_idx=e_idx,
        importer_idx=i_idx,
        flows=flows,
        cost_offset=cost_offset,
        beta=beta,
        fta=fta,
        fit=fit,
        output=output,
        expenditure=expenditure,
        imr=imr,
        omr=omr,
    )


def _counterfactual_fta(baseline: GeBaseline, indicator: dict) -> np.ndarray:
    out = np.empty(len(baseline.flows))
    for ix, (e, i) in enumerate(zip(baseline.exporter_idx, baseline.importer_idx)):
        pair = (baseline.countries[e], baseline.countries[i])
        out[ix] = indicator.get(pair, baseline.fta[ix])
    return out


def _intl_exports(baseline: GeBaseline, values, n):
    intl = baseline.exporter_idx != baseline.importer_idx
    return np.bincount(baseline.exporter_idx[intl], weights=values[intl], minlength=n)


@dataclass
class ConditionalResult:
    economy: EconomyState
    pct_exports: np.ndarray
    fit: PpmlFit
    fitted_baseline: np.ndarray
    fitted: np.ndarray


def conditional_ge(baseline: GeBaseline, cf_indicator: dict, cfg: GeConfig) -> ConditionalResult:
    """Counterfactual with output and expenditure held at baseline.

    Runs the constrained estimation once under the counterfactual
    indicator and recovers the conditional resistances; only trade and
    the resistance indexes adjust.
    """
    fta_cfl = _counterfactual_fta(baseline, cf_indicator)
    fit = fit_constrained(
        baseline.flows,
        baseline.cost_offset,
        baseline.beta,
        fta_cfl,
        _fe_specs(baseline.countries, baseline.exporter_idx, baseline.importer_idx, baseline.reference),
        **_GE_FIT_KWARGS,
    )
    n = len(baseline.countries)
    imr, omr = recover_mr(
        fit, baseline.output, baseline.expenditure, baseline.countries, baseline.reference, cfg.sigma
    )
    base = _intl_exports(baseline, baseline.fit.fitted, n)
    cfl = _intl_exports(baseline, fit.fitted, n)
    economy = EconomyState(
        countries=baseline.countries,
        output=baseline.output.copy(),
        expenditure=baseline.expenditure.copy(),
        price=np.ones(n),
        imr=imr,
        omr=omr,
    )
    return ConditionalResult(
        economy=economy,
        pct_exports=100.0 * (cfl - base) / base,
        fit=fit,
        fitted_baseline=baseline.fit.fitted,
        fitted=fit.fitted,
    )


@dataclass
class FullResult:
    outcome: GeOutcome
    economy: EconomyState
    conditional: ConditionalResult
    fit: PpmlFit
    flows_full: np.ndarray
    log_tau_cfl: np.ndarray


def _structural_response(baseline, log_tau, supply_pow, output_new, expenditure_new):
    """Trade matrix consistent with the updated state, rows summing to output.

    ``supply_pow`` carries the supply side, exp(a0) * p^(1-sigma); the
    demand index P^(1-sigma) is rebuilt by direct summation so both
    resistances re-equilibrate as prices, income and expenditure move.
    """
    n = len(output_new)
    tau = np.exp(log_tau)
    p_tilde = np.bincount(
        baseline.importer_idx, weights=supply_pow[baseline.exporter_idx] * tau, minlength=n
    )
    raw = tau * (expenditure_new / p_tilde)[baseline.importer_idx]
    rows = np.bincount(baseline.exporter_idx, weights=raw, minlength=n)
    return raw * (output_new / rows)[baseline.exporter_idx]


def full_endowment_ge(baseline: GeBaseline, cf_indicator: dict, cfg: GeConfig) -> FullResult:
    """Iterate prices, income, expenditure and trade to the full GE solution.

    Stops when both d = max |Delta p^m - Delta p^(m-1)| <= price_tol and
    sd of the same difference vector <= sd_tol; raises on divergence or
    when max_outer_iter is exhausted.
    """
    n = len(baseline.countries)
    sigma = cfg.sigma
    fta_cfl = _counterfactual_fta(baseline, cf_indicator)
    log_tau_cfl = baseline.cost_offset + baseline.beta * fta_cfl
    fe_specs = _fe_specs(
        baseline.countries, baseline.exporter_idx, baseline.importer_idx, baseline.reference
    )
    a0 = baseline.fit.fe_array("exporter", baseline.countries, include_constant=True)
    q = baseline.output  # endowments at baseline prices of one
    phi = baseline.expenditure / baseline.output

    conditional = None
    fit = fit_constrained(
        baseline.flows, baseline.cost_offset, baseline.beta, fta_cfl, fe_specs, **_GE_FIT_KWARGS
    )
    p_prev = np.ones(n)
    y_state, e_state = baseline.output.copy(), baseline.expenditure.copy()
    trace: list[TraceRow] = []
    clearing: list[float] = []
    d = sd = np.inf
    grow = 0
    converged = False

    for m in range(1, cfg.max_outer_iter + 1):
        a_m = fit.fe_array("exporter", baseline.countries, include_constant=True)
        p_raw = np.exp((a_m - a0) / (1.0 - sigma))
        p_new = cfg.damping * p_raw + (1.0 - cfg.damping) * p_prev
        y_new = p_new * q
        e_new = phi * y_new
        # market clearing against the state the fit conditioned on
        rows = np.bincount(baseline.exporter_idx, weights=fit.fitted, minlength=n)
        clearing.append(float(np.max(np.abs(rows - y_state) / y_state)))
        s = p_new - p_prev
        d_prev = d
        d = float(np.max(np.abs(s)))
        sd = float(np.std(s, ddof=1)) if n > 1 else 0.0
        trace.append(TraceRow(m, d, sd, float(np.max(np.abs(p_new - 1.0)))))
        if m == 1:
            imr_c, omr_c = recover_mr(
                fit, y_state, e_state, baseline.countries, baseline.reference, sigma
            )
            base_intl = _intl_exports(baseline, baseline.fit.fitted, n)
            conditional = ConditionalResult(
                economy=EconomyState(
                    countries=baseline.countries,
                    output=baseline.output.copy(),
                    expenditure=baseline.expenditure.copy(),
                    price=np.ones(n),
                    imr=imr_c,
                    omr=omr_c,
                ),
                pct_exports=100.0 * (_intl_exports(baseline, fit.fitted, n) - base_intl) / base_intl,
                fit=fit,
                fitted_baseline=baseline.fit.fitted,
                fitted=fit.fitted,
            )
        p_prev, y_state, e_state = p_new, y_new, e_new
        if d <= cfg.price_tol and sd <= cfg.sd_tol:
            converged = True
            iterations = m
            break
        grow = grow + 1 if d > d_prev else 0
        if grow >= 5:
            raise GeDivergenceError(
                f"price step grew for 5 consecutive iterations (d={d:.3e})", trace
            )
        supply_pow = np.exp(a0) * p_new ** (1.0 - sigma)
        response = _structural_response(baseline, log_tau_cfl, supply_pow, y_new, e_new)
        fit = fit_constrained(
            response, baseline.cost_offset, baseline.beta, fta_cfl, fe_specs, **_GE_FIT_KWARGS
        )

    if not converged:
        raise GeDivergenceError(
            f"full endowment loop did not converge in {cfg.max_outer_iter} iterations "
            f"(d={d:.3e}, sd={sd:.3e})",
            trace,
        )

    # finalization fit at the converged state so stored artifacts satisfy
    # the adding-up conditions exactly
    supply_pow = np.exp(a0) * p_prev ** (1.0 - sigma)
    response = _structural_response(baseline, log_tau_cfl, supply_pow, y_state, e_state)
    fit_final = fit_constrained(
        response, baseline.cost_offset, baseline.beta, fta_cfl, fe_specs, **_GE_FIT_KWARGS
    )
    imr_f, omr_f = recover_mr(
        fit_final, y_state, e_state, baseline.countries, baseline.reference, sigma
    )

    # The recovery pins the reference inward index to one, which steals a
    # constant from the buyer price index. Re-anchor the (P, Pi) pair so P
    # matches its supply-side definition sum_i u_i tau_ij; splitting a
    # constant between P and Pi leaves the decomposition identity intact.
    b0 = baseline.fit.fe_array("importer", baseline.countries)
    r = baseline.countries.index(baseline.reference)
    k0 = baseline.expenditure[r] / np.exp(b0[r])
    p_til_def = np.bincount(
        baseline.importer_idx,
        weights=(supply_pow / k0)[baseline.exporter_idx] * np.exp(log_tau_cfl),
        minlength=n,
    )
    c = float(np.exp(np.mean(np.log(p_til_def) - (1.0 - sigma) * np.log(imr_f))))
    anchor = c ** (1.0 / (1.0 - sigma))
    imr_f = imr_f * anchor
    omr_f = omr_f / anchor

    # world-output numeraire for all reported levels; output is price * q
    # exactly so world adding-up survives the rescale bit-for-bit
    lam = float(np.sum(q) / np.sum(p_prev * q))
    price_rep = lam * p_prev
    output_rep = price_rep * q
    economy = EconomyState(
        countries=baseline.countries,
        output=output_rep,
        expenditure=phi * output_rep,
        price=price_rep,
        imr=lam * imr_f,
        omr=omr_f / lam,
    )
    flows_full = lam * fit_final.fitted

    base_exports = _intl_exports(baseline, baseline.fit.fitted, n)
    full_exports = _intl_exports(baseline, flows_full, n)
    rgdp_base = baseline.output / baseline.imr
    rgdp_full = economy.output / economy.imr
    outcome = GeOutcome(
        countries=baseline.countries,
        pct_trade_conditional=conditional.pct_exports,
        pct_trade_full=100.0 * (full_exports - base_exports) / base_exports,
        pct_rgdp=100.0 * (rgdp_full / rgdp_base - 1.0),
        pct_imr=100.0 * (economy.imr / baseline.imr - 1.0),
        pct_omr=100.0 * (economy.omr / baseline.omr - 1.0),
        pct_prices=100.0 * (economy.price - 1.0),
        iterations=iterations,
        final_d=d,
        final_sd=sd,
        trace=trace,
        market_clearing=clearing,
        sigma=sigma,
        reference=baseline.reference,
    )
    return FullResult(
        outcome=outcome,
        economy=economy,
        conditional=conditional,
        fit=fit_final,
        flows_full=flows_full,
        log_tau_cfl=log_tau_cfl,
    )


def write_trace(trace, path, manifest_id=None) -> None:
    """Trace export: one row per outer step, for auditing the stopping rule."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if manifest_id:
            fh.write(f"# manifest: {manifest_id}\n")
        fh.write("iteration,d,sd,max_price_change\n")
        for row in trace:
            fh.write(f"{row.iteration},{row.d!r},{row.sd!r},{row.max_price_change!r}\n")


def read_trace(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        while header.startswith("#"):
            header = fh.readline().strip()
        if header != "iteration,d,sd,max_price_change":
            raise GeError(f"unexpected trace header {header!r}")
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            it, d, sd, mpc = line.split(",")
            rows.append(TraceRow(int(it), float(d), float(sd), float(mpc)))
    return rows
