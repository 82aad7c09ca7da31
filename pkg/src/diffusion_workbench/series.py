"""Yearly cumulative adoption series and national target tables, plus their CSV readers."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SERIES_HEADER = ("country", "year", "cumulative_mw")
TARGETS_HEADER = ("country", "min_target_mw", "long_target_mw")


class SeriesError(ValueError):
    """An adoption series violates its invariants."""


class InputFormatError(ValueError):
    """A CSV input could not be parsed; the message carries the line number."""


@dataclass(frozen=True)
class AdoptionSeries:
    """One country's yearly cumulative installed capacity.

    ``base_year`` is the calendar year of t = 0, so an observation in year ``y``
    sits at ``t = y - base_year``.
    """

    country: str
    base_year: int
    observations: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        obs = tuple((int(y), float(v)) for y, v in self.observations)
        object.__setattr__(self, "observations", obs)
        if not obs:
            raise SeriesError(f"{self.country}: empty series")
        for (y_prev, v_prev), (y, v) in zip(obs, obs[1:]):
            if y != y_prev + 1:
                kind = "duplicate" if y == y_prev else "non-consecutive"
                raise SeriesError(f"{self.country}: {kind} year {y} after {y_prev}")
            if v < v_prev:
                raise SeriesError(f"{self.country}: cumulative capacity decreases in {y} ({v_prev} -> {v})")
        for y, v in obs:
            if not math.isfinite(v) or v < 0:
                raise SeriesError(f"{self.country}: invalid cumulative value {v} in {y}")
        if obs[0][0] < self.base_year:
            raise SeriesError(f"{self.country}: observation {obs[0][0]} precedes base year {self.base_year}")

    @classmethod
    def from_values(cls, country: str, first_year: int, values: Sequence[float], base_year: int | None = None):
        obs = tuple((first_year + k, float(v)) for k, v in enumerate(values))
        return cls(country, first_year if base_year is None else base_year, obs)

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def years(self) -> np.ndarray:
        return np.array([y for y, _ in self.observations], dtype=int)

    @property
    def t(self) -> np.ndarray:
        return (self.years - self.base_year).astype(float)

    @property
    def z(self) -> np.ndarray:
        return np.array([v for _, v in self.observations], dtype=float)

    @property
    def last_year(self) -> int:
        return self.observations[-1][0]

    def scaled(self, factor: float) -> "AdoptionSeries":
        return AdoptionSeries(self.country, self.base_year, tuple((y, v * factor) for y, v in self.observations))

    def trimmed(self) -> "AdoptionSeries":
        """Drop leading zero observations; the base year moves to the last zero year."""
        obs = self.observations
        k = 0
        while k < len(obs) and obs[k][1] == 0.0:
            k += 1
        if k == 0:
            return self
        if k == len(obs):
            raise SeriesError(f"{self.country}: series is identically zero")
        return AdoptionSeries(self.country, obs[k - 1][0], obs[k:])


@dataclass(frozen=True)
class Target:
    country: str
    min_target_mw: float
    long_target_mw: float | None = None

    def __post_init__(self) -> None:
        if not (self.min_target_mw > 0):
            raise SeriesError(f"{self.country}: minimum target must be positive")
        if self.long_target_mw is not None and self.long_target_mw < self.min_target_mw:
            raise SeriesError(f"{self.country}: long-term target below minimum target")

    def for_scenario(self, scenario: str) -> float | None:
        if scenario == "minimum":
            return self.min_target_mw
        if scenario == "long":
            return self.long_target_mw
        raise ValueError(f"unknown scenario {scenario!r}")


class TargetsTable(dict):
    """Mapping country -> Target."""

    @classmethod
    def from_rows(cls, rows: Iterable[Target]) -> "TargetsTable":
        table = cls()
        for row in rows:
            if row.country in table:
                raise SeriesError(f"duplicate target row for {row.country}")
            table[row.country] = row
        return table


def _rows(path: Path, header: tuple[str, ...], required: int):
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(text.splitlines())
    try:
        head = next(reader)
    except StopIteration:
        raise InputFormatError(f"{path}: empty file") from None
    head = [h.strip() for h in head]
    if tuple(head[: len(header)]) != header[: len(head)] or len(head) < required:
        raise InputFormatError(f"{path}:1: expected header {','.join(header)}, got {','.join(head)}")
    n = 0
    for row in reader:
        n += 1
        lineno = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(head):
            raise InputFormatError(f"{path}:{lineno}: expected {len(head)} fields, got {len(row)}")
        yield lineno, [c.strip() for c in row]
    if n == 0:
        raise InputFormatError(f"{path}: no data rows")


def _number(path, lineno, text, what):
    try:
        value = float(text)
    except ValueError:
        raise InputFormatError(f"{path}:{lineno}: cannot parse {what} {text!r}") from None
    if not math.isfinite(value):
        raise InputFormatError(f"{path}:{lineno}: non-finite {what}")
    return value


def _grouped(path) -> tuple[dict[str, dict[int, float]], dict[str, str]]:
    grouped: dict[str, dict[int, float]] = defaultdict(dict)
    problems: dict[str, str] = {}
    for lineno, (country, year_text, value_text) in _rows(path, SERIES_HEADER, 3):
        if not country:
            raise InputFormatError(f"{path}:{lineno}: missing country code")
        try:
            year = int(year_text)
        except ValueError:
            raise InputFormatError(f"{path}:{lineno}: cannot parse year {year_text!r}") from None
        value = _number(path, lineno, value_text, "cumulative_mw")
        if year in grouped[country]:
            problems.setdefault(country, f"{country}: duplicate year {year} (line {lineno})")
        grouped[country][year] = value
    return grouped, problems


def ingest_series_partial(path: str | Path) -> tuple[list[AdoptionSeries], dict[str, str]]:
    """Like :func:`ingest_series`, but invalid countries are returned as ``{country: message}`` instead of raising.

    Malformed CSV is still fatal.
    """
    grouped, problems = _grouped(path)
    out = []
    for country in sorted(grouped):
        if country in problems:
            continue
        rows = sorted(grouped[country].items())
        try:
            out.append(AdoptionSeries(country, rows[0][0], tuple(rows)))
        except SeriesError as exc:
            problems[country] = str(exc)
    return out, dict(sorted(problems.items()))


def ingest_series(path: str | Path) -> list[AdoptionSeries]:
    """Read a ``country,year,cumulative_mw`` CSV into one series per country (sorted by code)."""
    series, problems = ingest_series_partial(path)
    if problems:
        raise SeriesError(next(iter(problems.values())))
    return series


def read_targets(path: str | Path) -> TargetsTable:
    """Read a ``country,min_target_mw[,long_target_mw]`` CSV."""
    rows = []
    for lineno, fields in _rows(path, TARGETS_HEADER, 2):
        country = fields[0]
        lo = _number(path, lineno, fields[1], "min_target_mw")
        hi = None
        if len(fields) > 2 and fields[2]:
            hi = _number(path, lineno, fields[2], "long_target_mw")
        try:
            rows.append(Target(country, lo, hi))
        except SeriesError as exc:
            raise SeriesError(f"{exc} (line {lineno})") from None
    return TargetsTable.from_rows(rows)


def write_series(path: str | Path, series: Iterable[AdoptionSeries]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SERIES_HEADER)
        for s in series:
            for year, value in s.observations:
                writer.writerow([s.country, year, repr(value)])
