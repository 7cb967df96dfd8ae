"""Counterfactual agreement edits: removals and accessions.

A scenario file is TOML, e.g.::

    name = "drop-chile-usa"
    evaluation_year = 2006
    reference_country = "DEU"
    sigma = 7.0
    drop = [["CHL", "USA"]]
    add = []

    [tolerances]
    price_tol = 1e-3
    sd_tol = 1e-3
    max_outer_iter = 100
    damping = 0.5

One file fully determines a simulation run.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass

from .panel import IntervalPanel, validate_country_code

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["Scenario", "ScenarioError", "apply_scenario", "accession_scenario", "load_scenario"]

DROP = "drop"
ADD = "add"


class ScenarioError(Exception):
    pass


@dataclass(frozen=True)
class Scenario:
    """A named set of symmetric FTA edits evaluated in one year."""

    name: str
    edits: tuple  # of (country_a, country_b, action)
    evaluation_year: int
    reference_country: str

    def __post_init__(self):
        validate_country_code(self.reference_country)
        seen = set()
        for a, b, action in self.edits:
            validate_country_code(a)
            validate_country_code(b)
            if a == b:
                raise ScenarioError(f"edit pairs a country with itself: {a}")
            if action not in (DROP, ADD):
                raise ScenarioError(f"unknown action {action!r} (expected 'drop' or 'add')")
            key = frozenset((a, b))
            if key in seen:
                raise ScenarioError(f"duplicate edit for pair {tuple(sorted(key))}")
            seen.add(key)


def apply_scenario(panel: IntervalPanel, scenario: Scenario) -> dict:
    """Counterfactual FTA indicator per ordered pair at the evaluation year.

    Equal to the baseline indicator except on edited pairs: ``drop``
    zeroes both directions, ``add`` sets both to one. The baseline panel
    is untouched.
    """
    year = scenario.evaluation_year
    if year not in panel.years:
        raise ScenarioError(f"evaluation year {year} not in panel years {panel.years}")
    registry = set(panel.countries)
    if scenario.reference_country not in registry:
        raise ScenarioError(f"reference country {scenario.reference_country} not in panel")
    mask = panel.year == year
    indicator = {
        (e, i): int(f)
        for e, i, f in zip(panel.exporter[mask], panel.importer[mask], panel.fta[mask])
    }
    for a, b, action in scenario.edits:
        for c in (a, b):
            if c not in registry:
                raise ScenarioError(f"edit references unknown country {c}")
        value = 0 if action == DROP else 1
        indicator[(a, b)] = value
        indicator[(b, a)] = value
    return indicator


def accession_scenario(
    member_list,
    acceding: str,
    evaluation_year: int,
    reference_country: str,
    name: str | None = None,
) -> Scenario:
    """Scenario in which ``acceding`` joins an existing agreement bloc.

    One ``add`` edit per (acceding, member) pair; the members' mutual
    agreements are untouched.
    """
    members = list(member_list)
    if not members:
        raise ScenarioError("member list is empty")
    validate_country_code(acceding)
    if acceding in members:
        raise ScenarioError(f"{acceding} is already a member")
    edits = tuple((acceding, m, ADD) for m in members)
    return Scenario(
        name=name or f"{acceding}-accession",
        edits=edits,
        evaluation_year=evaluation_year,
        reference_country=reference_country,
    )


def load_scenario(path):
    """Parse a scenario file; returns (Scenario, config overrides dict).

    Overrides may contain ``sigma`` plus any of the tolerance keys
    (``price_tol``, ``sd_tol``, ``max_outer_iter``, ``damping``).
    """
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    try:
        edits = [(a, b, DROP) for a, b in data.get("drop", [])]
        edits += [(a, b, ADD) for a, b in data.get("add", [])]
        scenario = Scenario(
            name=str(data["name"]),
            edits=tuple(edits),
            evaluation_year=int(data["evaluation_year"]),
            reference_country=str(data["reference_country"]),
        )
    except KeyError as exc:
        raise ScenarioError(f"scenario file {path} is missing key {exc}") from None
    overrides = {}
    if "sigma" in data:
        overrides["sigma"] = float(data["sigma"])
    for key in ("price_tol", "sd_tol", "max_outer_iter", "damping"):
        if key in data.get("tolerances", {}):
            overrides[key] = data["tolerances"][key]
    return scenario, overrides
