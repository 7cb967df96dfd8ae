"""Command-line driver: load -> estimate -> costs -> scenario -> GE -> report.

Subcommands
-----------
synth      generate a synthetic world with known parameters
estimate   fit the baseline gravity model and complete the cost matrix
costs      export or replace the cost matrix of an estimated state
simulate   run a scenario through the conditional and full GE solvers
verify     re-check invariants on a finished simulation directory

Exit status: 0 on success, 1 for estimation/convergence failures,
2 for usage and input errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .costs import (
    CostError,
    complete_costs,
    costs_from_pair_fe,
    fit_stage2,
    read_cost_matrix,
    write_cost_matrix,
)
from .ge import (
    GeConfig,
    GeError,
    full_endowment_ge,
    prepare_baseline,
    read_trace,
    write_trace,
)
from .baseline import fit_baseline
from .hdfe import (
    EstimationError,
    format_fit_display,
    percent_effect,
    write_fit_summary,
)
from .panel import PanelFormatError, build_interval_panel, load_panel, write_panel
from .scenario import ScenarioError, apply_scenario, load_scenario
from .synth import synth_world, write_truth_sidecar

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

OUTCOME_HEADER = "exporter,pct_trade_cond,pct_trade_full,pct_rgdp,pct_imr,pct_omr,pct_prices"


class UsageError(Exception):
    pass


def _manifest_id(parts) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()[:16]


def _hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(outdir: Path, inputs: dict, config: dict, seed=None) -> str:
    digests = {name: _hash_file(p) for name, p in inputs.items()}
    manifest_id = _manifest_id(
        [__version__] + [f"{k}={v}" for k, v in sorted(digests.items())]
        + [f"{k}={v}" for k, v in sorted(config.items())] + [seed]
    )
    manifest = {
        "manifest_id": manifest_id,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": sys.version.split()[0],
        "inputs": {name: {"path": str(p), "sha256": digests[name]} for name, p in inputs.items()},
        "config": config,
        "seed": seed,
    }
    with open(outdir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_id


def _write_table(path, header, rows, manifest_id, sigma=None):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# manifest: {manifest_id}\n")
        if sigma is not None:
            fh.write(f"# sigma: {sigma!r}\n")
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")


def _read_table(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    header, rows = lines[0], [ln.split(",") for ln in lines[1:] if ln]
    return header, rows


def cmd_synth(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    years = [int(t) for t in args.years.split(",")]
    schedule = None
    if args.fta_pairs:
        schedule = {}
        for item in args.fta_pairs.split(","):
            pair, _, year = item.partition(":")
            a, _, b = pair.partition("-")
            if not year or not b:
                raise UsageError(f"bad --fta-pairs item {item!r} (expected AAA-AAB:1998)")
            schedule[(a, b)] = int(year)
    panel, truth = synth_world(
        args.countries, years, args.beta, args.sigma, args.seed, noise_cv=args.noise_cv,
        include_intra=not args.no_intra, fta_schedule=schedule,
    )
    manifest_id = _write_manifest(
        outdir,
        {},
        {
            "countries": args.countries,
            "years": args.years,
            "beta": args.beta,
            "sigma": args.sigma,
            "noise_cv": args.noise_cv,
            "intra": not args.no_intra,
            "fta_pairs": args.fta_pairs,
        },
        seed=args.seed,
    )
    write_panel(
        panel,
        outdir / "flows.csv",
        outdir / "covariates.csv",
        outdir / "fta.csv",
        manifest_id=manifest_id,
    )
    write_truth_sidecar(truth, outdir / "truth.csv", manifest_id=manifest_id)
    print(f"wrote synthetic world ({panel.n_obs} observations) to {outdir}")
    return EXIT_OK


def _load_window(args):
    panel = load_panel(args.flows, args.covariates, args.fta)
    if args.start_year is not None:
        end = args.end_year if args.end_year is not None else max(panel.years)
        panel = build_interval_panel(panel, args.start_year, end, args.interval)
    return panel


def cmd_estimate(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    panel = _load_window(args)
    if panel.n_obs == 0:
        raise UsageError("panel is empty after windowing")
    reference = args.reference
    if reference not in panel.countries:
        raise UsageError(f"reference country {reference} not in panel registry")

    pairs = panel.pair_labels()
    fit = fit_baseline(panel, reference)
    beta = fit.beta["FTA"]
    print(format_fit_display(fit, dep_label="trade"))
    print(f"FTA partial effect: {percent_effect(beta):.2f}% ({beta:.4f})")

    cost_levels = costs_from_pair_fe(fit, dim="pair")
    weights = None
    if args.stage2_weights == "volume":
        totals = {}
        for (e, i), x in zip(pairs, panel.flow):
            totals[(e, i)] = totals.get((e, i), 0.0) + float(x)
        weights = {p: totals[p] for p in cost_levels}
    missing = [p for p in cost_levels if p not in panel.covariates]
    if missing:
        raise UsageError(f"covariates missing for estimated pair(s), e.g. {missing[:3]}")
    stage2 = fit_stage2(cost_levels, panel.covariates, weights)
    print(format_fit_display(stage2, dep_label="trade costs"))

    include_diag = panel.has_intra and all(
        (c, c) in panel.covariates or (c, c) in cost_levels for c in panel.countries
    )
    costs = complete_costs(
        cost_levels, stage2, panel.countries, panel.covariates, args.sigma,
        include_diagonal=include_diag,
    )

    manifest_id = _write_manifest(
        outdir,
        {"flows": args.flows, "covariates": args.covariates, "fta": args.fta},
        {
            "reference": reference,
            "sigma": args.sigma,
            "start_year": args.start_year,
            "end_year": args.end_year,
            "interval": args.interval,
            "stage2_weights": args.stage2_weights,
        },
    )
    write_fit_summary(fit, outdir / "stage1_summary.csv", dep_label="trade", manifest_id=manifest_id)
    with open(outdir / "stage1_summary.txt", "w", encoding="utf-8") as fh:
        fh.write(format_fit_display(fit, dep_label="trade"))
    write_fit_summary(
        stage2, outdir / "stage2_summary.csv", dep_label="trade costs", manifest_id=manifest_id
    )
    with open(outdir / "stage2_summary.txt", "w", encoding="utf-8") as fh:
        fh.write(format_fit_display(stage2, dep_label="trade costs"))
    write_cost_matrix(costs, outdir / "costs.csv", manifest_id=manifest_id)
    write_panel(
        panel,
        outdir / "panel_flows.csv",
        outdir / "panel_covariates.csv",
        outdir / "panel_fta.csv",
        manifest_id=manifest_id,
    )
    state = {
        "manifest_id": manifest_id,
        "beta": beta,
        "se": fit.se_clustered.get("FTA"),
        "sigma": args.sigma,
        "reference": reference,
        "years": list(panel.years),
        "has_intra_costs": include_diag,
    }
    with open(outdir / "state.json", "w", encoding="utf-8") as fh:
        json.dump(state, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"estimated state written to {outdir}")
    return EXIT_OK


def _load_state(state_dir: Path):
    try:
        with open(state_dir / "state.json", "r", encoding="utf-8") as fh:
            state = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"no estimated state at {state_dir} (run `geppml estimate` first)") from None
    panel = load_panel(
        state_dir / "panel_flows.csv",
        state_dir / "panel_covariates.csv",
        state_dir / "panel_fta.csv",
    )
    costs = read_cost_matrix(state_dir / "costs.csv", sigma=state["sigma"])
    return state, panel, costs


def cmd_costs(args) -> int:
    state_dir = Path(args.state)
    state, panel, costs = _load_state(state_dir)
    if args.set:
        new = read_cost_matrix(args.set, sigma=state["sigma"])
        missing = [p for p in costs.values if p not in new.values]
        if missing:
            raise UsageError(
                f"external cost vector is incomplete for this registry, e.g. {missing[:3]}"
            )
        write_cost_matrix(new, state_dir / "costs.csv", manifest_id=state["manifest_id"])
        print(f"replaced cost matrix in {state_dir} with {args.set}")
    if args.export:
        write_cost_matrix(costs, args.export, manifest_id=state["manifest_id"])
        print(f"exported cost matrix to {args.export}")
    if not args.set and not args.export:
        est = sum(1 for s in costs.source.values() if s == "estimated")
        print(
            f"cost matrix: {len(costs.values)} cells ({est} estimated, "
            f"{len(costs.values) - est} predicted), sigma={costs.sigma}"
        )
    return EXIT_OK


def _display_cell(v) -> str:
    # .2f rounds half-even on the binary value; canonicalize -0.00
    cell = f"{v:.2f}"
    return "0.00" if cell == "-0.00" else cell


def _outcome_rows(outcome, fmt):
    rows = []
    for ix, c in enumerate(outcome.countries):
        cells = [
            outcome.pct_trade_conditional[ix],
            outcome.pct_trade_full[ix],
            outcome.pct_rgdp[ix],
            outcome.pct_imr[ix],
            outcome.pct_omr[ix],
            outcome.pct_prices[ix],
        ]
        rows.append(c + "," + ",".join(fmt(v) for v in cells))
    return rows


def cmd_simulate(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    state_dir = Path(args.state)
    state, panel, costs = _load_state(state_dir)
    scenario, overrides = load_scenario(args.scenario)
    cfg_kwargs = {"sigma": overrides.get("sigma", state["sigma"])}
    for key in ("price_tol", "sd_tol", "max_outer_iter", "damping"):
        if key in overrides:
            cfg_kwargs[key] = overrides[key]
    if args.sigma is not None:
        cfg_kwargs["sigma"] = args.sigma
    if args.price_tol is not None:
        cfg_kwargs["price_tol"] = args.price_tol
    if args.sd_tol is not None:
        cfg_kwargs["sd_tol"] = args.sd_tol
    if args.max_outer_iter is not None:
        cfg_kwargs["max_outer_iter"] = args.max_outer_iter
    if args.damping is not None:
        cfg_kwargs["damping"] = args.damping
    cfg = GeConfig(**cfg_kwargs)

    indicator = apply_scenario(panel, scenario)
    mask = panel.year_slice(scenario.evaluation_year)
    baseline = prepare_baseline(
        list(panel.exporter[mask]),
        list(panel.importer[mask]),
        panel.flow[mask],
        costs,
        state["beta"],
        panel.fta[mask],
        scenario.reference_country,
        sigma=cfg.sigma,
    )
    manifest_id = _write_manifest(
        outdir,
        {
            "scenario": args.scenario,
            "state_flows": state_dir / "panel_flows.csv",
            "state_costs": state_dir / "costs.csv",
        },
        {
            "scenario_name": scenario.name,
            "evaluation_year": scenario.evaluation_year,
            "reference": scenario.reference_country,
            "sigma": cfg.sigma,
            "price_tol": cfg.price_tol,
            "sd_tol": cfg.sd_tol,
            "max_outer_iter": cfg.max_outer_iter,
            "damping": cfg.damping,
            "beta": state["beta"],
        },
    )

    try:
        result = full_endowment_ge(baseline, indicator, cfg)
    except GeError as exc:
        trace = getattr(exc, "trace", None)
        if trace:
            write_trace(trace, outdir / "trace.csv", manifest_id=manifest_id)
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    outcome = result.outcome
    write_trace(outcome.trace, outdir / "trace.csv", manifest_id=manifest_id)
    _write_table(
        outdir / "outcome.csv",
        OUTCOME_HEADER,
        _outcome_rows(outcome, _display_cell),
        manifest_id,
        sigma=cfg.sigma,
    )
    _write_table(
        outdir / "outcome_machine.csv",
        OUTCOME_HEADER,
        _outcome_rows(outcome, lambda v: repr(float(v))),
        manifest_id,
        sigma=cfg.sigma,
    )
    econ_rows = []
    for ix, c in enumerate(baseline.countries):
        econ_rows.append(
            ",".join(
                [
                    c,
                    repr(float(baseline.output[ix])),
                    repr(float(baseline.expenditure[ix])),
                    repr(float(baseline.imr[ix])),
                    repr(float(baseline.omr[ix])),
                    repr(float(result.economy.output[ix])),
                    repr(float(result.economy.expenditure[ix])),
                    repr(float(result.economy.price[ix])),
                    repr(float(result.economy.imr[ix])),
                    repr(float(result.economy.omr[ix])),
                ]
            )
        )
    _write_table(
        outdir / "economy.csv",
        "country,Y0,E0,P0,Pi0,Y,E,p,P,Pi",
        econ_rows,
        manifest_id,
        sigma=cfg.sigma,
    )
    flow_rows = []
    for ix in range(len(baseline.flows)):
        e = baseline.countries[baseline.exporter_idx[ix]]
        i = baseline.countries[baseline.importer_idx[ix]]
        flow_rows.append(
            ",".join(
                [
                    e,
                    i,
                    repr(float(baseline.cost_offset[ix])),
                    repr(float(baseline.cost_offset[ix] + baseline.beta * baseline.fta[ix])),
                    repr(float(result.log_tau_cfl[ix])),
                    repr(float(baseline.fit.fitted[ix])),
                    repr(float(result.conditional.fitted[ix])),
                    repr(float(result.flows_full[ix])),
                ]
            )
        )
    _write_table(
        outdir / "flows.csv",
        "exporter,importer,log_cost,log_tau_bsl,log_tau_cfl,x_baseline,x_conditional,x_full",
        flow_rows,
        manifest_id,
        sigma=cfg.sigma,
    )
    print(
        f"converged in {outcome.iterations} iteration(s): d={outcome.final_d:.3e}, "
        f"sd={outcome.final_sd:.3e}; sigma={outcome.sigma}"
    )
    print(f"outcome table written to {outdir / 'outcome.csv'}")
    return EXIT_OK


def _check(report, name, ok, detail):
    report.append((name, ok, detail))
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


def cmd_verify(args) -> int:
    rundir = Path(args.run)
    with open(rundir / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    sigma = manifest["config"]["sigma"]
    price_tol = args.price_tol if args.price_tol is not None else manifest["config"]["price_tol"]
    sd_tol = args.sd_tol if args.sd_tol is not None else manifest["config"]["sd_tol"]
    tol = args.tol

    _, econ_rows = _read_table(rundir / "economy.csv")
    countries = [r[0] for r in econ_rows]
    cols = np.array([[float(v) for v in r[1:]] for r in econ_rows])
    y0, e0, p0_imr, pi0, y_f, e_f, p_f, imr_f, omr_f = cols.T
    _, flow_rows = _read_table(rundir / "flows.csv")
    idx = {c: i for i, c in enumerate(countries)}
    e_idx = np.array([idx[r[0]] for r in flow_rows])
    i_idx = np.array([idx[r[1]] for r in flow_rows])
    tau_bsl = np.array([float(r[3]) for r in flow_rows])
    tau_cfl = np.array([float(r[4]) for r in flow_rows])
    x0 = np.array([float(r[5]) for r in flow_rows])
    x_full = np.array([float(r[7]) for r in flow_rows])

    report = []
    print(f"verifying {rundir} (manifest {manifest['manifest_id']}, tol={tol:g})")

    def decomposition(x, tau, y, e, imr, omr):
        world = y.sum()
        recomposed = (
            y[e_idx] * e[i_idx] / world
            * np.exp(tau)
            * (omr[e_idx] ** (sigma - 1.0))
            * (imr[i_idx] ** (sigma - 1.0))
        )
        return float(np.max(np.abs(recomposed - x) / np.maximum(np.abs(x), 1e-300)))

    dev0 = decomposition(x0, tau_bsl, y0, e0, p0_imr, pi0)
    _check(report, "decomposition identity (baseline)", dev0 <= tol, f"max rel dev {dev0:.3e}")
    devf = decomposition(x_full, tau_cfl, y_f, e_f, imr_f, omr_f)
    _check(report, "decomposition identity (full)", devf <= tol, f"max rel dev {devf:.3e}")

    rows0 = np.bincount(e_idx, weights=x0, minlength=len(countries))
    cols0 = np.bincount(i_idx, weights=x0, minlength=len(countries))
    foc = max(
        float(np.max(np.abs(rows0 - y0) / y0)), float(np.max(np.abs(cols0 - e0) / e0))
    )
    _check(report, "adding-up conditions (baseline)", foc <= tol, f"max rel violation {foc:.3e}")

    # market clearing: exports add up to output, and output is the
    # endowment valued at the counterfactual factory-gate price
    rows_f = np.bincount(e_idx, weights=x_full, minlength=len(countries))
    mc = np.maximum(np.abs(rows_f - y_f) / y_f, np.abs(p_f * y0 - y_f) / y_f)
    worst = int(np.argmax(mc))
    _check(
        report,
        "market clearing (full)",
        float(mc[worst]) <= tol,
        f"max rel residual {float(mc[worst]):.3e} ({countries[worst]})",
    )

    trace = read_trace(rundir / "trace.csv")
    ok_stop = bool(trace) and trace[-1].d <= price_tol and trace[-1].sd <= sd_tol
    ok_before = all(row.d > price_tol or row.sd > sd_tol for row in trace[:-1])
    _check(
        report,
        "convergence stopping rule",
        ok_stop and ok_before,
        f"{len(trace)} iteration(s), final d={trace[-1].d:.3e}, sd={trace[-1].sd:.3e}, "
        f"tolerances d<={price_tol:g}, sd<={sd_tol:g}",
    )

    failed = [name for name, ok, _ in report if not ok]
    with open(rundir / "verify_report.txt", "w", encoding="utf-8") as fh:
        for name, ok, detail in report:
            fh.write(f"{'PASS' if ok else 'FAIL'},{name},{detail}\n")
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILURE
    print("all checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geppml",
        description="Structural gravity estimation and FTA counterfactual simulation",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world")
    p.add_argument("--countries", type=int, required=True)
    p.add_argument("--years", required=True, help="comma-separated list, e.g. 1990,1994,1998")
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=7.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--noise-cv", type=float, default=0.0)
    p.add_argument("--no-intra", action="store_true", help="omit intra-national cells")
    p.add_argument(
        "--fta-pairs",
        default=None,
        help="explicit agreement schedule, e.g. AAA-AAB:1998,AAC-AAE:1998 (default: random)",
    )
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("estimate", help="fit the baseline model and complete costs")
    p.add_argument("--flows", required=True)
    p.add_argument("--covariates", required=True)
    p.add_argument("--fta", required=True)
    p.add_argument("--reference", required=True, help="reference country (normalization)")
    p.add_argument("--sigma", type=float, default=7.0)
    p.add_argument("--start-year", type=int, default=None)
    p.add_argument("--end-year", type=int, default=None)
    p.add_argument("--interval", type=int, default=4)
    p.add_argument("--stage2-weights", choices=["uniform", "volume"], default="uniform")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("costs", help="export or replace the cost matrix")
    p.add_argument("--state", required=True)
    p.add_argument("--export", default=None)
    p.add_argument("--set", default=None, help="replace with an externally calibrated vector")
    p.set_defaults(func=cmd_costs)

    p = sub.add_parser("simulate", help="run a counterfactual scenario")
    p.add_argument("--state", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--price-tol", type=float, default=None)
    p.add_argument("--sd-tol", type=float, default=None)
    p.add_argument("--max-outer-iter", type=int, default=None)
    p.add_argument("--damping", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="re-check invariants on a simulation directory")
    p.add_argument("--run", required=True)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--price-tol", type=float, default=None)
    p.add_argument("--sd-tol", type=float, default=None)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, PanelFormatError, ScenarioError, CostError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EstimationError, GeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
