"""Bilateral trade panels: loading, validation, interval selection.

File formats (all UTF-8, comma-delimited, header row, ``.`` decimal
separator, LF line endings):

* flows:       ``exporter,importer,year,flow``
* covariates:  ``exporter,importer,log_dist,cntg,lang,clny``
* FTA:         ``exporter,importer,year,fta`` listing only fta=1 rows;
  both directions of a pair must be listed explicitly.

A pair-year absent from the flows file is *missing* (excluded from
estimation); an explicit ``0`` is a zero flow and is kept, since zeros
carry information under PPML. Intra-national rows (exporter == importer)
are accepted and flagged.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from typing import Iterable

import numpy as np

__all__ = [
    "PanelFormatError",
    "TradeObservation",
    "GravityCovariates",
    "IntervalPanel",
    "validate_country_code",
    "load_panel",
    "write_panel",
    "build_interval_panel",
]

_CODE_RE = re.compile(r"^[A-Z]{3}$")

FLOWS_HEADER = ["exporter", "importer", "year", "flow"]
COVARIATES_HEADER = ["exporter", "importer", "log_dist", "cntg", "lang", "clny"]
FTA_HEADER = ["exporter", "importer", "year", "fta"]


class PanelFormatError(Exception):
    """Malformed or inconsistent input file; carries path and line number."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(message + where)


def validate_country_code(code: str) -> str:
    """Return ``code`` if it is a 3-letter uppercase identifier, else raise."""
    if not isinstance(code, str) or not _CODE_RE.match(code):
        raise ValueError(f"invalid country code {code!r}: expected exactly 3 characters A-Z")
    return code


@dataclass(frozen=True)
class TradeObservation:
    """One exporter -> importer flow in one year."""

    exporter: str
    importer: str
    year: int
    flow: float
    fta: int = 0

    def __post_init__(self):
        validate_country_code(self.exporter)
        validate_country_code(self.importer)
        if not np.isfinite(self.flow) or self.flow < 0:
            raise ValueError(f"flow must be non-negative and finite, got {self.flow!r}")
        if self.fta not in (0, 1):
            raise ValueError(f"fta must be 0 or 1, got {self.fta!r}")

    @property
    def intra_national(self) -> bool:
        return self.exporter == self.importer

    @property
    def key(self):
        return (self.exporter, self.importer, self.year)


@dataclass(frozen=True)
class GravityCovariates:
    """Time-invariant gravity covariates for one ordered pair."""

    exporter: str
    importer: str
    log_dist: float
    cntg: int
    lang: int
    clny: int

    def __post_init__(self):
        validate_country_code(self.exporter)
        validate_country_code(self.importer)
        if not np.isfinite(self.log_dist):
            raise ValueError("log_dist must be finite")
        if self.exporter != self.importer and self.log_dist <= 0:
            raise ValueError("log_dist must be positive for distinct countries")
        for name in ("cntg", "lang", "clny"):
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1")

    @property
    def pair(self):
        return (self.exporter, self.importer)

    def vector(self):
        return np.array([self.log_dist, self.cntg, self.lang, self.clny], dtype=float)


COVARIATE_NAMES = ("log_dist", "cntg", "lang", "clny")


@dataclass(frozen=True)
class IntervalPanel:
    """An immutable, validated bilateral panel.

    Observations are stored column-wise in canonical
    (exporter, importer, year) order; arrays are marked read-only so a
    loaded panel can be shared across concurrent fits. A freshly loaded
    panel may hold any set of years; ``build_interval_panel`` restricts it
    to an equally spaced window for estimation.
    """

    countries: tuple
    years: tuple
    exporter: np.ndarray
    importer: np.ndarray
    year: np.ndarray
    flow: np.ndarray
    fta: np.ndarray
    covariates: dict

    def __post_init__(self):
        for arr in (self.exporter, self.importer, self.year, self.flow, self.fta):
            arr.setflags(write=False)
        keys = set()
        for e, i, t in zip(self.exporter, self.importer, self.year):
            k = (e, i, int(t))
            if k in keys:
                raise PanelFormatError(f"duplicate (exporter, importer, year) key {k}")
            keys.add(k)

    @property
    def n_obs(self) -> int:
        return len(self.flow)

    @property
    def has_intra(self) -> bool:
        return bool(np.any(self.exporter == self.importer))

    def observations(self) -> Iterable[TradeObservation]:
        for e, i, t, x, f in zip(self.exporter, self.importer, self.year, self.flow, self.fta):
            yield TradeObservation(str(e), str(i), int(t), float(x), int(f))

    def year_slice(self, year: int):
        """Boolean mask selecting one cross-section."""
        if year not in self.years:
            raise ValueError(f"year {year} not in panel years {self.years}")
        return self.year == year

    def pair_labels(self):
        return list(zip(self.exporter, self.importer))


def _read_rows(path, header):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = []
        lineno = 0
        first = None
        for line in fh:
            lineno += 1
            if line.startswith("#"):  # provenance comments allowed before data
                continue
            first = next(csv.reader([line]))
            break
        if first is None:
            raise PanelFormatError("empty file", path=path, line=lineno or 1)
        if first != header:
            raise PanelFormatError(
                f"expected header {','.join(header)!r}, got {','.join(first)!r}",
                path=path,
                line=lineno,
            )
        for row in csv.reader(fh):
            lineno += 1
            if not row or (row[0] or "").startswith("#"):
                continue
            if len(row) != len(header):
                raise PanelFormatError(
                    f"expected {len(header)} fields, got {len(row)}", path=path, line=lineno
                )
            rows.append((lineno, row))
    return rows


def _parse_code(raw, path, lineno):
    try:
        return validate_country_code(raw)
    except ValueError as exc:
        raise PanelFormatError(str(exc), path=path, line=lineno) from None


def _parse_int(raw, what, path, lineno):
    try:
        return int(raw)
    except ValueError:
        raise PanelFormatError(f"invalid {what} {raw!r}", path=path, line=lineno) from None


def _parse_float(raw, what, path, lineno):
    try:
        value = float(raw)
    except ValueError:
        raise PanelFormatError(f"invalid {what} {raw!r}", path=path, line=lineno) from None
    if not np.isfinite(value):
        raise PanelFormatError(f"{what} must be finite, got {raw!r}", path=path, line=lineno)
    return value


def load_panel(flows_file, covariates_file, fta_file) -> IntervalPanel:
    """Load and cross-validate the three input files into a panel.

    The flows file defines the country registry; covariate and FTA rows
    naming countries outside it are rejected. The FTA indicator defaults
    to zero for pair-years not listed.
    """
    records = []
    seen = set()
    for lineno, row in _read_rows(flows_file, FLOWS_HEADER):
        e = _parse_code(row[0], flows_file, lineno)
        i = _parse_code(row[1], flows_file, lineno)
        t = _parse_int(row[2], "year", flows_file, lineno)
        x = _parse_float(row[3], "flow", flows_file, lineno)
        if x < 0:
            raise PanelFormatError(f"negative flow {row[3]}", path=flows_file, line=lineno)
        key = (e, i, t)
        if key in seen:
            raise PanelFormatError(f"duplicate key {key}", path=flows_file, line=lineno)
        seen.add(key)
        records.append((e, i, t, x))
    if not records:
        raise PanelFormatError("flows file contains no observations", path=flows_file)
    countries = tuple(sorted({r[0] for r in records} | {r[1] for r in records}))
    registry = set(countries)

    covariates = {}
    for lineno, row in _read_rows(covariates_file, COVARIATES_HEADER):
        e = _parse_code(row[0], covariates_file, lineno)
        i = _parse_code(row[1], covariates_file, lineno)
        for c in (e, i):
            if c not in registry:
                raise PanelFormatError(
                    f"unknown country code {c!r} (not in flows registry)",
                    path=covariates_file,
                    line=lineno,
                )
        if (e, i) in covariates:
            raise PanelFormatError(f"duplicate pair ({e}, {i})", path=covariates_file, line=lineno)
        try:
            cov = GravityCovariates(
                e,
                i,
                _parse_float(row[2], "log_dist", covariates_file, lineno),
                _parse_int(row[3], "cntg", covariates_file, lineno),
                _parse_int(row[4], "lang", covariates_file, lineno),
                _parse_int(row[5], "clny", covariates_file, lineno),
            )
        except ValueError as exc:
            raise PanelFormatError(str(exc), path=covariates_file, line=lineno) from None
        covariates[(e, i)] = cov
    missing = sorted(
        {(r[0], r[1]) for r in records if r[0] != r[1]} - set(covariates)
    )
    if missing:
        shown = ", ".join(f"({a}, {b})" for a, b in missing[:5])
        raise PanelFormatError(
            f"{len(missing)} ordered pair(s) in flows lack covariates, e.g. {shown}",
            path=covariates_file,
        )

    fta_on = {}
    for lineno, row in _read_rows(fta_file, FTA_HEADER):
        e = _parse_code(row[0], fta_file, lineno)
        i = _parse_code(row[1], fta_file, lineno)
        for c in (e, i):
            if c not in registry:
                raise PanelFormatError(
                    f"unknown country code {c!r} (not in flows registry)",
                    path=fta_file,
                    line=lineno,
                )
        t = _parse_int(row[2], "year", fta_file, lineno)
        value = _parse_int(row[3], "fta", fta_file, lineno)
        if value != 1:
            raise PanelFormatError(
                "FTA file lists only fta=1 rows; absence means zero", path=fta_file, line=lineno
            )
        fta_on[(e, i, t)] = 1

    records.sort()
    return IntervalPanel(
        countries=countries,
        years=tuple(sorted({r[2] for r in records})),
        exporter=np.array([r[0] for r in records]),
        importer=np.array([r[1] for r in records]),
        year=np.array([r[2] for r in records], dtype=np.int64),
        flow=np.array([r[3] for r in records], dtype=np.float64),
        fta=np.array([fta_on.get((r[0], r[1], r[2]), 0) for r in records], dtype=np.int8),
        covariates=covariates,
    )


def write_panel(
    panel: IntervalPanel, flows_file, covariates_file, fta_file, manifest_id=None
) -> None:
    """Write a panel back to the three-file format, losslessly.

    Floats are written with ``repr`` so a write-then-load round trip is
    bit-identical. ``manifest_id``, when given, is recorded as a leading
    comment line (the loader skips comments).
    """
    stamp = f"# manifest: {manifest_id}\n" if manifest_id else ""
    with open(flows_file, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(stamp + ",".join(FLOWS_HEADER) + "\n")
        for e, i, t, x in zip(panel.exporter, panel.importer, panel.year, panel.flow):
            fh.write(f"{e},{i},{t},{float(x)!r}\n")
    with open(covariates_file, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(stamp + ",".join(COVARIATES_HEADER) + "\n")
        for (e, i), cov in sorted(panel.covariates.items()):
            fh.write(f"{e},{i},{float(cov.log_dist)!r},{cov.cntg},{cov.lang},{cov.clny}\n")
    with open(fta_file, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(stamp + ",".join(FTA_HEADER) + "\n")
        for e, i, t, f in zip(panel.exporter, panel.importer, panel.year, panel.fta):
            if f:
                fh.write(f"{e},{i},{t},1\n")


def build_interval_panel(
    panel: IntervalPanel, start_year: int, end_year: int, interval: int
) -> IntervalPanel:
    """Restrict the panel to ``{start, start+interval, ..., end}``.

    Idempotent; every requested year must be present in the source panel.
    """
    if interval < 1:
        raise ValueError(f"interval must be >= 1, got {interval}")
    if start_year > end_year:
        raise ValueError(f"start_year {start_year} exceeds end_year {end_year}")
    if (end_year - start_year) % interval != 0:
        raise ValueError(
            f"end_year {end_year} is not reachable from {start_year} in steps of {interval}"
        )
    wanted = list(range(start_year, end_year + 1, interval))
    missing = sorted(set(wanted) - set(panel.years))
    if missing:
        raise ValueError(f"requested year(s) absent from source panel: {missing}")
    mask = np.isin(panel.year, wanted)
    countries = tuple(sorted(set(panel.exporter[mask]) | set(panel.importer[mask])))
    return IntervalPanel(
        countries=countries,
        years=tuple(wanted),
        exporter=panel.exporter[mask].copy(),
        importer=panel.importer[mask].copy(),
        year=panel.year[mask].copy(),
        flow=panel.flow[mask].copy(),
        fta=panel.fta[mask].copy(),
        covariates=panel.covariates,
    )
