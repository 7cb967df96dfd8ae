"""Poisson pseudo-maximum-likelihood with high-dimensional fixed effects.

The estimator supports an arbitrary number of categorical fixed-effect
dimensions, an optional log-scale offset held at coefficient one, optional
observation weights, and pair-clustered sandwich standard errors. The
weighted least-squares step inside IRLS is solved by alternating
within-group demeaning (Frisch-Waugh) instead of explicit dummies, which
keeps three-way designs with ~1e5 observations tractable.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.special
import scipy.stats

from .demean import demean_columns

__all__ = [
    "FeSpec",
    "FitDiagnostics",
    "PpmlFit",
    "EstimationError",
    "CollinearityError",
    "ConvergenceError",
    "SeparationWarning",
    "fit_ppml",
    "fit_constrained",
    "cluster_se",
    "percent_effect",
    "significance_stars",
    "write_fit_summary",
    "format_fit_display",
]

DEMEAN_TOL = 1e-10
FOC_TOL = 1e-8
_FOC_TOL_STRICT = 1e-12


class EstimationError(Exception):
    """Base class for estimation failures."""


class CollinearityError(EstimationError):
    """A covariate is collinear after fixed-effect projection."""

    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"collinear covariate column(s) dropped from identification: {self.columns}")


class ConvergenceError(EstimationError):
    """IRLS failed to converge; carries the final gradient norm."""

    def __init__(self, message, gradient_norm=None, trace=None):
        self.gradient_norm = gradient_norm
        self.trace = trace
        super().__init__(message)


class SeparationWarning(UserWarning):
    """Fixed-effect levels with all-zero outcomes were dropped."""


@dataclass(frozen=True)
class FeSpec:
    """One categorical fixed-effect dimension.

    Parameters
    ----------
    name : str
        Dimension label, e.g. ``"exporter-year"`` or ``"pair"``.
    levels : sequence
        Per-observation level label (hashable); ``levels[i]`` is the group
        observation ``i`` belongs to.
    reference : hashable, optional
        Level whose estimated value is pinned to zero. Defaults to the
        first level in observation order.
    """

    name: str
    levels: tuple
    reference: object = None

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))

    def __len__(self):
        return len(self.levels)


@dataclass
class FitDiagnostics:
    n_obs: int
    deviance: float
    null_deviance: float
    pseudo_r2: float
    squared_corr: float
    bic: float
    iterations: int
    max_rel_foc: float
    dropped_levels: dict = field(default_factory=dict)
    n_dropped_obs: int = 0


@dataclass
class PpmlFit:
    """Converged PPML fit.

    ``fe_values`` maps each dimension name to ``{level: value}`` with the
    reference level pinned at zero; ``constant`` completes the additive
    decomposition so that, per retained observation,
    ``log(fitted) = offset + X @ beta + constant + sum of FE values``.
    """

    beta: dict
    se_clustered: dict
    fe_values: dict
    constant: float
    fitted: np.ndarray
    kept: np.ndarray
    diagnostics: FitDiagnostics
    _y: np.ndarray = field(repr=False, default=None)
    _weights: np.ndarray = field(repr=False, default=None)
    _x_demeaned: np.ndarray = field(repr=False, default=None)
    _cov_names: tuple = field(repr=False, default=())

    def fe_array(self, name, labels, *, include_constant=False):
        """Values of dimension ``name`` for ``labels``, as an array.

        Raises KeyError naming the first label with no estimated level.
        """
        values = self.fe_values[name]
        out = np.empty(len(labels))
        for i, lab in enumerate(labels):
            if lab not in values:
                raise KeyError(f"no estimated {name} fixed effect for level {lab!r}")
            out[i] = values[lab]
        if include_constant:
            out += self.constant
        return out


def _factorize(labels):
    """Map hashable labels to contiguous int64 codes (first-seen order)."""
    table = {}
    codes = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        codes[i] = table.setdefault(lab, len(table))
    return codes, list(table)


def _drop_separated(y, fes, weights):
    """Iteratively drop observations in FE levels whose outcome is all zero.

    Pair (and other) effects are unidentifiable when a level never sees
    positive trade; those observations cannot inform the fit.
    """
    n = y.shape[0]
    kept = np.ones(n, dtype=bool)
    dropped = {fe.name: [] for fe in fes}
    changed = True
    while changed:
        changed = False
        for fe in fes:
            labs = fe.levels
            sums = {}
            for i in np.flatnonzero(kept):
                sums[labs[i]] = sums.get(labs[i], 0.0) + y[i] * weights[i]
            bad = {lab for lab, s in sums.items() if s == 0.0}
            if bad:
                changed = True
                dropped[fe.name].extend(sorted(bad, key=repr))
                for i in np.flatnonzero(kept):
                    if labs[i] in bad:
                        kept[i] = False
    dropped = {k: v for k, v in dropped.items() if v}
    return kept, dropped


def _poisson_deviance(y, mu, weights):
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(y / mu), 0.0)
    return 2.0 * float(np.sum(weights * (term - (y - mu))))


def _rel_foc(y, mu, weights, x, codes_list, n_levels):
    """Max relative first-order-condition violation over covariates and FE levels."""
    resid = weights * (y - mu)
    wmu = weights * mu
    total_mu = float(np.sum(wmu))
    worst = 0.0
    if x is not None and x.shape[1]:
        grad = x.T @ resid
        worst = float(np.max(np.abs(grad))) / total_mu if total_mu > 0 else np.inf
    for codes, nl in zip(codes_list, n_levels):
        g_resid = np.bincount(codes, weights=resid, minlength=nl)
        g_mu = np.bincount(codes, weights=wmu, minlength=nl)
        worst = max(worst, float(np.max(np.abs(g_resid) / g_mu)))
    return worst


def _solve_wls(xd, zd, w, names):
    """Weighted LS on demeaned data with collinearity detection."""
    sw = np.sqrt(w)
    xw = xd * sw[:, None]
    # a covariate absorbed by the fixed effects has (numerically) zero
    # residual variation left
    norms = np.linalg.norm(xw, axis=0)
    absorbed = [names[c] for c in range(xd.shape[1]) if norms[c] <= 1e-10 * math.sqrt(len(zd))]
    if absorbed:
        raise CollinearityError(absorbed)
    q, r, piv = scipy.linalg.qr(xw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    bad = diag <= diag[0] * 1e-12
    if np.any(bad):
        raise CollinearityError([names[piv[c]] for c in np.flatnonzero(bad)])
    beta = np.empty(xd.shape[1])
    beta[piv] = scipy.linalg.solve_triangular(r, q.T @ (zd * sw))
    return beta


def _extract_fe_values(f, w, codes_list, n_levels, tol=1e-15, max_sweeps=100_000):
    """Decompose an additive per-observation total into per-level values."""
    rem = f.copy()
    scale = max(1.0, float(np.max(np.abs(f)))) if len(f) else 1.0
    values = [np.zeros(nl) for nl in n_levels]
    wsums = [np.bincount(c, weights=w, minlength=nl) for c, nl in zip(codes_list, n_levels)]
    for _ in range(max_sweeps):
        delta = 0.0
        for d, (codes, nl) in enumerate(zip(codes_list, n_levels)):
            means = np.bincount(codes, weights=w * rem, minlength=nl) / wsums[d]
            values[d] += means
            rem -= means[codes]
            delta = max(delta, float(np.max(np.abs(means))) / scale)
        if delta <= tol:
            break
    return values, float(np.max(np.abs(rem))) if len(f) else 0.0


def fit_ppml(
    y,
    covariates: Optional[dict] = None,
    fes: Sequence[FeSpec] = (),
    offset=None,
    cluster=None,
    weights=None,
    *,
    foc_tol: float = FOC_TOL,
    max_iter: int = 100,
    demean_tol: float = DEMEAN_TOL,
) -> PpmlFit:
    """Fit ``E[y] = exp(offset + X beta + fixed effects)`` by IRLS.

    Parameters
    ----------
    y : array
        Non-negative responses.
    covariates : dict, optional
        Ordered mapping of column name to real-valued array.
    fes : sequence of FeSpec
        Fixed-effect dimensions, each covering every observation.
    offset : array, optional
        Log-scale additive term held at coefficient one.
    cluster : sequence, optional
        Per-observation cluster labels; when given, clustered standard
        errors are stored on the fit.
    weights : array, optional
        Observation weights (default uniform).

    Returns
    -------
    PpmlFit
        Deterministic for fixed inputs. Fitted means are strictly
        positive and satisfy the adding-up first-order conditions within
        ``foc_tol`` relative per FE level.

    Raises
    ------
    ConvergenceError
        If IRLS does not converge within ``max_iter`` steps.
    CollinearityError
        If a covariate has no residual variation after projection.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if n == 0:
        raise EstimationError("no observations")
    if np.any(~np.isfinite(y)) or np.any(y < 0):
        raise EstimationError("responses must be finite and non-negative")
    covariates = dict(covariates or {})
    cov_names = tuple(covariates)
    for name, col in covariates.items():
        col = np.asarray(col, dtype=np.float64)
        if col.shape != y.shape or np.any(~np.isfinite(col)):
            raise EstimationError(f"covariate {name!r} must be finite with {n} rows")
        covariates[name] = col
    offset_full = np.zeros(n) if offset is None else np.asarray(offset, dtype=np.float64)
    if offset_full.shape != y.shape or np.any(~np.isfinite(offset_full)):
        raise EstimationError("offset must be finite with the same length as y")
    w_full = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(~np.isfinite(w_full)) or np.any(w_full <= 0):
        raise EstimationError("weights must be finite and strictly positive")
    for fe in fes:
        if len(fe) != n:
            raise EstimationError(f"fixed effect {fe.name!r} does not cover every observation")

    kept, dropped_levels = _drop_separated(y, fes, w_full)
    n_dropped = int(n - kept.sum())
    if n_dropped:
        warnings.warn(
            f"dropped {n_dropped} observation(s) in all-zero fixed-effect levels: "
            + "; ".join(f"{k}: {len(v)} level(s)" for k, v in dropped_levels.items()),
            SeparationWarning,
            stacklevel=2,
        )
    if not kept.any():
        raise EstimationError("all observations dropped by separation handling")

    yk = y[kept]
    wk = w_full[kept]
    off = offset_full[kept]
    xk = (
        np.column_stack([covariates[name][kept] for name in cov_names])
        if cov_names
        else np.empty((int(kept.sum()), 0))
    )
    codes_list, uniques = [], []
    for fe in fes:
        labs = [fe.levels[i] for i in np.flatnonzero(kept)]
        codes, uniq = _factorize(labs)
        codes_list.append(codes)
        uniques.append(uniq)
    n_levels = [len(u) for u in uniques]
    codes_mat = (
        np.column_stack(codes_list).astype(np.int64)
        if codes_list
        else np.empty((len(yk), 0), dtype=np.int64)
    )
    nl_arr = np.asarray(n_levels, dtype=np.int64)

    ybar = float(np.average(yk, weights=wk))
    if ybar <= 0:
        raise EstimationError("response is identically zero")
    mu = (yk + ybar) / 2.0  # keeps logs finite at zero flows
    eta = np.log(mu)
    beta = np.zeros(len(cov_names))
    deviance = _poisson_deviance(yk, mu, wk)
    rel_foc = np.inf
    foc_history = []
    converged = False
    iterations = 0
    xd = np.empty((len(yk), 0))

    for iterations in range(1, max_iter + 1):
        z = eta + (yk - mu) / mu - off
        v = np.column_stack([z, xk])
        if codes_mat.shape[1]:
            vd, _ = demean_columns(v, mu * wk, codes_mat, nl_arr, tol=demean_tol)
        else:
            vd = v.copy()
        zd, xd = vd[:, 0], vd[:, 1:]
        if cov_names:
            beta = _solve_wls(xd, zd, mu * wk, cov_names)
            resid = zd - xd @ beta
        else:
            resid = zd
        eta = np.clip(off + (z - resid), -500.0, 500.0)  # overflow guard
        mu = np.exp(eta)
        new_dev = _poisson_deviance(yk, mu, wk)
        rel_foc = _rel_foc(yk, mu, wk, xk if cov_names else None, codes_list, n_levels)
        dev_change = abs(new_dev - deviance) / (abs(deviance) + 0.1)
        deviance = new_dev
        foc_history.append(rel_foc)
        strict = min(_FOC_TOL_STRICT, foc_tol)
        # once the gradient hits its float floor nothing more can be
        # extracted; accept a plateau provided the fit is far past any
        # statistically meaningful tolerance
        stalled = (
            len(foc_history) >= 4
            and rel_foc >= 0.5 * min(foc_history[-4:-1])
            and rel_foc <= max(foc_tol, 1e-10)
        )
        if rel_foc <= strict or (rel_foc <= foc_tol and dev_change <= 1e-9) or stalled:
            converged = True
            break

    if not converged:
        raise ConvergenceError(
            f"IRLS did not converge in {max_iter} iterations "
            f"(relative gradient norm {rel_foc:.3e})",
            gradient_norm=rel_foc,
        )

    fe_totals = eta - off - (xk @ beta if cov_names else 0.0)
    values, fe_resid = _extract_fe_values(fe_totals, mu * wk, codes_list, n_levels)
    constant = 0.0
    fe_values = {}
    for d, fe in enumerate(fes):
        ref = fe.reference
        if ref is None or ref not in uniques[d]:
            if ref is not None:
                warnings.warn(
                    f"reference level {ref!r} absent from retained {fe.name!r} levels; "
                    "pinning the first level instead",
                    SeparationWarning,
                    stacklevel=2,
                )
            ref = uniques[d][0]
        shift = values[d][uniques[d].index(ref)]
        values[d] -= shift
        constant += shift
        fe_values[fe.name] = dict(zip(uniques[d], values[d]))
    if not fes:
        # intercept-only decomposition
        constant = float(np.average(fe_totals, weights=mu * wk)) if len(fe_totals) else 0.0

    null_mu = np.full_like(yk, ybar)
    if offset is not None:
        # null model keeps the offset and fits one free constant
        s = float(np.sum(wk * yk) / np.sum(wk * np.exp(off)))
        null_mu = s * np.exp(off)
    null_dev = _poisson_deviance(yk, null_mu, wk)
    with np.errstate(invalid="ignore"):
        corr = np.corrcoef(yk, mu)[0, 1] if len(yk) > 1 else np.nan
    loglik = float(np.sum(wk * (yk * eta - mu - scipy.special.gammaln(yk + 1.0))))
    n_params = len(cov_names) + sum(n_levels)
    diagnostics = FitDiagnostics(
        n_obs=int(len(yk)),
        deviance=deviance,
        null_deviance=null_dev,
        pseudo_r2=1.0 - deviance / null_dev if null_dev > 0 else np.nan,
        squared_corr=float(corr**2) if np.isfinite(corr) else np.nan,
        bic=-2.0 * loglik + n_params * math.log(len(yk)),
        iterations=iterations,
        max_rel_foc=rel_foc,
        dropped_levels=dropped_levels,
        n_dropped_obs=n_dropped,
    )
    if fe_resid > 1e-8 * max(1.0, float(np.max(np.abs(fe_totals)))):
        warnings.warn(
            f"fixed-effect decomposition residual {fe_resid:.2e}; values may be imprecise",
            SeparationWarning,
            stacklevel=2,
        )

    fit = PpmlFit(
        beta=dict(zip(cov_names, beta)),
        se_clustered={},
        fe_values=fe_values,
        constant=float(constant),
        fitted=mu,
        kept=kept,
        diagnostics=diagnostics,
        _y=yk,
        _weights=wk,
        _x_demeaned=xd,
        _cov_names=cov_names,
    )
    if cluster is not None and cov_names:
        fit.se_clustered = cluster_se(fit, [cluster[i] for i in np.flatnonzero(kept)])
    return fit


def fit_constrained(
    y,
    offset_costs,
    beta_fixed: float,
    fta,
    fes: Sequence[FeSpec],
    weights=None,
    **kwargs,
) -> PpmlFit:
    """Estimate only fixed effects, with trade costs held in the offset.

    The offset is ``log t^(1-sigma) + beta_fixed * fta`` per observation:
    the trade-cost vector and the agreement coefficient stay at their
    baseline values while the counterfactual indicator reshapes them.
    """
    offset_costs = np.asarray(offset_costs, dtype=np.float64)
    fta = np.asarray(fta, dtype=np.float64)
    if offset_costs.shape != fta.shape:
        raise EstimationError("offset_costs and fta must align")
    offset = offset_costs + beta_fixed * fta
    return fit_ppml(y, covariates=None, fes=fes, offset=offset, weights=weights, **kwargs)


def cluster_se(fit: PpmlFit, cluster) -> dict:
    """Cluster-robust sandwich standard errors for the fit's covariates.

    Scores are aggregated within clusters before the outer product, so the
    result is invariant to observation order. The finite-sample multiplier
    is (N-1)/(N-K) * G/(G-1) with K counting covariates plus identified
    fixed-effect levels. Requires at least two clusters.
    """
    if not fit._cov_names:
        return {}
    xd = fit._x_demeaned
    if xd is None or len(cluster) != len(fit._y):
        raise EstimationError("cluster labels must align with retained observations")
    codes, uniq = _factorize(list(cluster))
    g = len(uniq)
    if g < 2:
        raise EstimationError("clustered errors require at least 2 clusters")
    w = fit._weights
    scores = xd * (w * (fit._y - fit.fitted))[:, None]
    k = xd.shape[1]
    grouped = np.zeros((g, k))
    for c in range(k):
        grouped[:, c] = np.bincount(codes, weights=scores[:, c], minlength=g)
    bread = np.linalg.inv(xd.T @ (xd * (w * fit.fitted)[:, None]))
    meat = grouped.T @ grouped
    n = len(fit._y)
    n_fe = sum(len(v) for v in fit.fe_values.values())
    n_params = min(k + max(n_fe - max(len(fit.fe_values) - 1, 0), 0), n - 1)
    adj = (n - 1.0) / (n - n_params) * (g / (g - 1.0))
    cov = bread @ meat @ bread * adj
    return dict(zip(fit._cov_names, np.sqrt(np.diag(cov))))


def percent_effect(beta: float) -> float:
    """Convert a membership coefficient into a percentage trade effect."""
    if not math.isfinite(beta):
        raise ValueError("beta must be finite")
    return (math.exp(beta) - 1.0) * 100.0


def significance_stars(coef: float, se: float) -> str:
    """Two-sided normal stars at the 0.01 / 0.05 / 0.1 levels."""
    if se <= 0 or not math.isfinite(se):
        return ""
    z = abs(coef / se)
    p = 2.0 * (1.0 - scipy.stats.norm.cdf(z))
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.1:
        return "*"
    return ""


def write_fit_summary(fit: PpmlFit, path, dep_label: str = "trade", manifest_id=None) -> None:
    """Write the delimited fit summary (coefficients, stars, fit statistics)."""
    d = fit.diagnostics
    lines = []
    if manifest_id:
        lines.append(f"# manifest: {manifest_id}")
    lines.append("section,field,value")
    lines.append(f"model,dependent,{dep_label}")
    for name, b in fit.beta.items():
        lines.append(f"coefficient,{name},{b!r}")
        se = fit.se_clustered.get(name)
        if se is not None:
            lines.append(f"clustered_se,{name},{se!r}")
            lines.append(f"stars,{name},{significance_stars(b, se)}")
    for fe_name in fit.fe_values:
        lines.append(f"fixed_effects,{fe_name},yes")
    lines.append(f"stat,observations,{d.n_obs}")
    lines.append(f"stat,squared_correlation,{d.squared_corr!r}")
    lines.append(f"stat,pseudo_r2,{d.pseudo_r2!r}")
    lines.append(f"stat,bic,{d.bic!r}")
    lines.append("note,se,Clustered standard-errors in parentheses")
    lines.append("note,signif_codes,***: 0.01; **: 0.05; *: 0.1")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def format_fit_display(fit: PpmlFit, dep_label: str = "trade") -> str:
    """Human-readable summary in the journal-table layout."""
    d = fit.diagnostics
    out = [f"Dependent Variable: {dep_label}", "Variables:"]
    for name, b in fit.beta.items():
        se = fit.se_clustered.get(name)
        if se is None:
            out.append(f"  {name} {b:.4f}")
        else:
            out.append(f"  {name} {b:.4f}{significance_stars(b, se)} ({se:.4f})")
    if fit.fe_values:
        out.append("Fixed-effects:")
        out.extend(f"  {fe_name}: Yes" for fe_name in fit.fe_values)
    out.append("Fit statistics:")
    out.append(f"  Observations: {d.n_obs:,}")
    out.append(f"  Squared Correlation: {d.squared_corr:.5f}")
    out.append(f"  Pseudo R2: {d.pseudo_r2:.5f}")
    out.append(f"  BIC: {d.bic:,.1f}")
    out.append("Clustered standard-errors in parentheses")
    out.append("Signif. Codes: ***: 0.01, **: 0.05, *: 0.1")
    return "\n".join(out) + "\n"
