"""Synthetic-world generator with known structural parameters.

Flows are produced from the structural gravity equation: per year the two
multilateral-resistance systems are solved for the planted costs, outputs,
and agreement schedule, so that market clearing holds exactly before
noise. The generator doubles as its own test oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .panel import COVARIATE_NAMES, GravityCovariates, IntervalPanel

__all__ = ["SynthTruth", "synth_world", "write_truth_sidecar"]

DEFAULT_COST_COEFS = {"log_dist": -1.1, "cntg": 0.3, "lang": 0.2, "clny": 0.4}


@dataclass(frozen=True)
class SynthTruth:
    """Ground-truth record emitted alongside a generated panel."""

    beta_fta: float
    sigma: float
    seed: int
    noise_cv: float
    cost_coefs: dict
    pair_costs: dict  # ordered pair -> time-invariant t^(1-sigma) level
    fta_start: dict  # unordered pair (frozenset) -> first year in force
    outputs: dict  # year -> {country: output}
    countries: tuple = ()
    reference: str = ""


def country_codes(n: int):
    """Deterministic 3-letter codes: AAA, AAB, AAC, ..."""
    if n > 26**3:
        raise ValueError("too many countries")
    codes = []
    for i in range(n):
        codes.append(
            chr(65 + i // 676) + chr(65 + (i // 26) % 26) + chr(65 + i % 26)
        )
    return codes


def solve_resistances(tau, y_out, e_exp, mask=None, tol=1e-14, max_iter=50_000):
    """Solve the two multilateral-resistance systems by fixed point.

    Returns (P_pow, Pi_pow) where ``P_pow[j] = P_j^(1-sigma)`` and
    ``Pi_pow[i] = Pi_i^(1-sigma)``, normalized to P_pow[0] = 1. ``mask``
    restricts the sums to present cells (defaults to all).
    """
    n = len(y_out)
    world = float(np.sum(y_out))
    m = np.ones((n, n), dtype=bool) if mask is None else mask
    t = np.where(m, tau, 0.0)
    p_pow = np.ones(n)
    pi_pow = np.ones(n)
    for _ in range(max_iter):
        pi_new = t @ (e_exp / (world * p_pow))
        p_new = t.T @ (y_out / (world * pi_new))
        scale = p_new[0]
        p_new /= scale
        pi_new *= scale
        delta = max(
            float(np.max(np.abs(p_new / p_pow - 1.0))),
            float(np.max(np.abs(pi_new / pi_pow - 1.0))),
        )
        p_pow, pi_pow = p_new, pi_new
        if delta <= tol:
            return p_pow, pi_pow
    raise RuntimeError("resistance fixed point did not converge")


def structural_flows(tau, y_out, e_exp, mask=None):
    """Equilibrium flow matrix; rows rescaled to sum exactly to output."""
    n = len(y_out)
    world = float(np.sum(y_out))
    p_pow, pi_pow = solve_resistances(tau, y_out, e_exp, mask=mask)
    m = np.ones((n, n), dtype=bool) if mask is None else mask
    x = np.where(m, (np.outer(y_out, e_exp) / world) * tau / np.outer(pi_pow, p_pow), 0.0)
    x *= (y_out / x.sum(axis=1))[:, None]
    return x


def synth_world(
    n_countries: int,
    years,
    beta_fta: float,
    sigma: float,
    seed: int,
    *,
    noise_cv: float = 0.0,
    include_intra: bool = True,
    cost_coefs: dict | None = None,
    fta_schedule: dict | None = None,
    output_scale=None,
    fta_share: float = 0.15,
):
    """Generate a panel from the structural gravity equation.

    Parameters
    ----------
    n_countries : int
        At least 3.
    years : sequence of int
        Panel years, ascending.
    beta_fta : float
        Planted agreement coefficient on the power-transformed cost.
    sigma : float
        Trade elasticity, > 1.
    seed : int
        All randomness flows from this seed; identical seeds give
        identical panels.
    noise_cv : float
        Coefficient of variation of multiplicative lognormal noise with
        unit mean (0 = noiseless).
    include_intra : bool
        Include intra-national cells (exporter == importer).
    fta_schedule : dict, optional
        ``{(code_a, code_b): first_year_in_force}`` overriding the random
        agreement draw; pairs are unordered.
    output_scale : array, optional
        Relative country sizes overriding the random size draw.

    Returns
    -------
    (IntervalPanel, SynthTruth)
    """
    if n_countries < 3:
        raise ValueError("n_countries must be >= 3")
    if sigma <= 1:
        raise ValueError("sigma must exceed 1")
    years = sorted(int(t) for t in years)
    if not years:
        raise ValueError("years must be non-empty")
    rng = np.random.default_rng(seed)
    codes = country_codes(n_countries)
    coefs = dict(DEFAULT_COST_COEFS if cost_coefs is None else cost_coefs)

    # geography on a plane; distances floored at 10 km so log_dist > 0
    pos = rng.uniform(0.0, 30.0, size=(n_countries, 2))
    dist = np.hypot(*(pos[:, None, :] - pos[None, :, :]).transpose(2, 0, 1)) * 111.0
    dist = np.maximum(dist, 10.0)
    off = dist[~np.eye(n_countries, dtype=bool)]
    cntg = (dist <= np.quantile(off, 0.12)) & ~np.eye(n_countries, dtype=bool)
    cntg = cntg | cntg.T
    sym_draw = rng.uniform(size=(n_countries, n_countries))
    sym_draw = np.triu(sym_draw, 1) + np.triu(sym_draw, 1).T
    lang = (sym_draw > 0) & (sym_draw < 0.2)
    clny = (sym_draw > 0.2) & (sym_draw < 0.25)
    internal = 50.0 + rng.uniform(0.0, 100.0, size=n_countries)

    covariates = {}
    for a in range(n_countries):
        for b in range(n_countries):
            if a == b:
                cov = GravityCovariates(codes[a], codes[b], math.log(internal[a]), 0, 1, 0)
            else:
                cov = GravityCovariates(
                    codes[a],
                    codes[b],
                    math.log(dist[a, b]),
                    int(cntg[a, b]),
                    int(lang[a, b]),
                    int(clny[a, b]),
                )
            covariates[(codes[a], codes[b])] = cov

    # time-invariant power-transformed costs, log-linear in the covariates
    cost = np.empty((n_countries, n_countries))
    for a in range(n_countries):
        for b in range(n_countries):
            v = covariates[(codes[a], codes[b])].vector()
            cost[a, b] = math.exp(sum(coefs[k] * v[ix] for ix, k in enumerate(COVARIATE_NAMES)))

    # agreement schedule: symmetric, switching on within the panel window
    fta_start = {}
    if fta_schedule is not None:
        for (a, b), t0 in fta_schedule.items():
            if a not in codes or b not in codes:
                raise ValueError(f"unknown country in fta_schedule: {(a, b)}")
            fta_start[frozenset((a, b))] = int(t0)
    elif len(years) > 1:
        for a in range(n_countries):
            for b in range(a + 1, n_countries):
                if rng.uniform() < fta_share:
                    fta_start[frozenset((codes[a], codes[b]))] = int(rng.choice(years[1:]))

    if output_scale is None:
        base = rng.lognormal(math.log(100.0), 1.0, size=n_countries)
    else:
        base = np.asarray(output_scale, dtype=float) * 100.0
        if base.shape != (n_countries,) or np.any(base <= 0):
            raise ValueError("output_scale must be positive with one entry per country")
    growth = rng.normal(0.04, 0.02, size=n_countries)

    mask = np.ones((n_countries, n_countries), dtype=bool)
    if not include_intra:
        np.fill_diagonal(mask, False)

    s = math.sqrt(math.log(1.0 + noise_cv**2)) if noise_cv > 0 else 0.0
    exporters, importers, yrs, flows, ftas = [], [], [], [], []
    outputs = {}
    for step, t in enumerate(years):
        y_t = base * np.exp(growth * step)
        outputs[t] = dict(zip(codes, y_t))
        fta_t = np.zeros((n_countries, n_countries), dtype=np.int8)
        for pair, t0 in fta_start.items():
            a, b = (codes.index(c) for c in sorted(pair))
            if t >= t0:
                fta_t[a, b] = fta_t[b, a] = 1
        tau = cost * np.exp(beta_fta * fta_t)
        x = structural_flows(tau, y_t, y_t, mask=mask)
        if s > 0:
            x = x * rng.lognormal(-0.5 * s**2, s, size=x.shape)
        for a in range(n_countries):
            for b in range(n_countries):
                if mask[a, b]:
                    exporters.append(codes[a])
                    importers.append(codes[b])
                    yrs.append(t)
                    flows.append(x[a, b])
                    ftas.append(int(fta_t[a, b]))

    order = sorted(range(len(flows)), key=lambda ix: (exporters[ix], importers[ix], yrs[ix]))
    panel = IntervalPanel(
        countries=tuple(sorted(codes)),
        years=tuple(years),
        exporter=np.array([exporters[ix] for ix in order]),
        importer=np.array([importers[ix] for ix in order]),
        year=np.array([yrs[ix] for ix in order], dtype=np.int64),
        flow=np.array([flows[ix] for ix in order], dtype=np.float64),
        fta=np.array([ftas[ix] for ix in order], dtype=np.int8),
        covariates=covariates,
    )
    truth = SynthTruth(
        beta_fta=float(beta_fta),
        sigma=float(sigma),
        seed=int(seed),
        noise_cv=float(noise_cv),
        cost_coefs=coefs,
        pair_costs={
            (codes[a], codes[b]): float(cost[a, b])
            for a in range(n_countries)
            for b in range(n_countries)
            if mask[a, b]
        },
        fta_start={pair: t0 for pair, t0 in fta_start.items()},
        outputs=outputs,
        countries=tuple(codes),
        reference=codes[0],
    )
    return panel, truth


def write_truth_sidecar(truth: SynthTruth, path, manifest_id=None) -> None:
    """Write the ``param,value`` ground-truth sidecar."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if manifest_id:
            fh.write(f"# manifest: {manifest_id}\n")
        fh.write("param,value\n")
        fh.write(f"beta_fta,{truth.beta_fta!r}\n")
        fh.write(f"sigma,{truth.sigma!r}\n")
        fh.write(f"seed,{truth.seed}\n")
