"""Ingest raw source reports and district metadata into observation grids."""

from __future__ import annotations

import csv
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from .hmm import ObservationSequence
from .params import MISSING, PUBLISHED_SOURCES, STATE_LABELS, InputError

log = logging.getLogger(__name__)

ELIGIBLE_AGENCY_TYPES = frozenset({1, 2, 7})
ELIGIBLE_STATUSES = frozenset({1, 3, 4, 5, 8})
EXCLUDE_KEYWORDS = ("online", "cyber", "distance", "remote", "virtual", "digital")
HYBRID = 1

DEFAULT_CATEGORIES = {
    "remote": 0,
    "full remote": 0,
    "fully remote": 0,
    "full time remote": 0,
    "all remote": 0,
    "closed": 0,
    "hybrid": 1,
    "partial": 1,
    "blended": 1,
    "partial in person": 1,
    "in person": 2,
    "full in person": 2,
    "fully in person": 2,
    "full time in person": 2,
    "all in person": 2,
    "open": 2,
}

REPORT_COLUMNS = ("source", "leaid", "report_date", "modality")
DISTRICT_COLUMNS = (
    "leaid",
    "name",
    "state",
    "agency_type",
    "operating_status",
    "county_fips",
    "urban_rural",
    "enrollment",
    "school_count",
)


def normalize_label(text: str) -> str:
    return " ".join(re.split(r"[\s_\-]+", text.strip().lower())).strip()


# ------------------------------------------------------------------ types


@dataclass(frozen=True)
class DistrictRecord:
    leaid: str
    name: str | None
    state: str | None = None
    agency_type: int | None = None
    operating_status: int | None = None
    county_fips: str | None = None
    urban_rural: int | None = None
    enrollment: int | None = None
    school_count: int | None = None

    @property
    def parseable(self) -> bool:
        return (
            bool(self.leaid)
            and bool(self.name)
            and self.agency_type is not None
            and self.operating_status is not None
            and (self.urban_rural is None or 1 <= self.urban_rural <= 6)
        )


@dataclass(frozen=True)
class RawReport:
    source: str
    leaid: str
    report_date: date
    modality: int


@dataclass(frozen=True)
class Exclusion:
    leaid: str
    name: str | None
    reason: str


@dataclass(frozen=True)
class StudyWindow:
    """Inclusive date range cut into weeks starting on ``week_start_day`` (0 = Monday)."""

    start: date
    end: date
    week_start_day: int = 0

    def __post_init__(self):
        if self.end < self.start:
            raise InputError("window: end precedes start")
        if self.week_start_day not in range(7):
            raise InputError("window.week_start_day: must be 0 (Monday) .. 6 (Sunday)")

    def week_of(self, d: date) -> date:
        return d - timedelta(days=(d.weekday() - self.week_start_day) % 7)

    @property
    def first_week(self) -> date:
        return self.week_of(self.start)

    @property
    def n_weeks(self) -> int:
        return (self.week_of(self.end) - self.first_week).days // 7 + 1

    @property
    def weeks(self) -> list[date]:
        return [self.first_week + timedelta(weeks=i) for i in range(self.n_weeks)]

    def index_of(self, d: date) -> int:
        return (self.week_of(d) - self.first_week).days // 7

    def contains(self, d: date) -> bool:
        return self.start <= d <= self.end

    def truncated(self, cutoff: date | None) -> StudyWindow:
        if cutoff is None or cutoff >= self.end:
            return self
        return StudyWindow(self.start, cutoff, self.week_start_day)

    @classmethod
    def from_weeks(cls, first_week: date, n_weeks: int, week_start_day: int = 0) -> StudyWindow:
        return cls(first_week, first_week + timedelta(weeks=n_weeks - 1, days=6), week_start_day)


DEFAULT_WINDOW = StudyWindow(date(2020, 9, 1), date(2021, 6, 25))


@dataclass
class PipelineConfig:
    window: StudyWindow = DEFAULT_WINDOW
    sources: tuple[str, ...] = PUBLISHED_SOURCES
    categories: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_CATEGORIES))
    exclude_keywords: tuple[str, ...] = EXCLUDE_KEYWORDS

    def __post_init__(self):
        self.sources = tuple(self.sources)
        if not self.sources:
            raise InputError("pipeline.sources: at least one source required")
        if len(set(self.sources)) != len(self.sources):
            raise InputError("pipeline.sources: duplicate source names")
        cats = {}
        for k, v in self.categories.items():
            if isinstance(v, str):
                v = _label_index(v, "pipeline.categories")
            if v not in (0, 1, 2):
                raise InputError(f"pipeline.categories.{k}: must map to 0, 1, 2 or a modality label")
            cats[normalize_label(k)] = int(v)
        for i, lab in enumerate(STATE_LABELS):
            cats.setdefault(normalize_label(lab), i)
        self.categories = cats
        self.exclude_keywords = tuple(k.lower() for k in self.exclude_keywords)

    def normalize_modality(self, text: str) -> int | None:
        return self.categories.get(normalize_label(text))

    @classmethod
    def from_dict(cls, d: dict | None) -> PipelineConfig:
        d = dict(d or {})
        known = {"window", "sources", "categories", "exclude_keywords"}
        extra = set(d) - known
        if extra:
            raise InputError(f"pipeline: unknown key(s) {sorted(extra)}")
        kwargs = {}
        if "window" in d:
            w = d["window"]
            try:
                kwargs["window"] = StudyWindow(
                    _as_date(w.get("start", DEFAULT_WINDOW.start)),
                    _as_date(w.get("end", DEFAULT_WINDOW.end)),
                    int(w.get("week_start_day", 0)),
                )
            except (TypeError, ValueError, AttributeError) as exc:
                if isinstance(exc, InputError):
                    raise
                raise InputError(f"pipeline.window: {exc}") from None
        if "sources" in d:
            kwargs["sources"] = tuple(d["sources"])
        if "categories" in d:
            cats = dict(DEFAULT_CATEGORIES)
            cats.update(d["categories"])
            kwargs["categories"] = cats
        if "exclude_keywords" in d:
            kwargs["exclude_keywords"] = tuple(d["exclude_keywords"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "window": {
                "start": self.window.start.isoformat(),
                "end": self.window.end.isoformat(),
                "week_start_day": self.window.week_start_day,
            },
            "sources": list(self.sources),
            "categories": dict(sorted(self.categories.items())),
            "exclude_keywords": list(self.exclude_keywords),
        }


def _label_index(label: str, where: str) -> int:
    norm = normalize_label(label)
    for i, lab in enumerate(STATE_LABELS):
        if normalize_label(lab) == norm:
            return i
    raise InputError(f"{where}: unknown modality label {label!r}")


def _as_date(v) -> date:
    if isinstance(v, date):
        return v
    return date.fromisoformat(str(v))


# ------------------------------------------------------------------ eligibility


def filter_eligible(districts, keywords=EXCLUDE_KEYWORDS):
    """Keep open traditional and charter districts without online-school keywords.

    Returns ``(eligible, exclusions)``.  Rules are checked in order:
    unparseable record, agency type, operating status, name keyword.
    """
    pattern = re.compile(r"\b(" + "|".join(map(re.escape, keywords)) + r")\b", re.IGNORECASE)
    eligible, excluded = [], []
    for d in districts:
        if not d.parseable:
            reason = "unparseable"
        elif d.agency_type not in ELIGIBLE_AGENCY_TYPES:
            reason = "agency_type"
        elif d.operating_status not in ELIGIBLE_STATUSES:
            reason = "operating_status"
        else:
            m = pattern.search(d.name)
            reason = f"keyword:{m.group(1).lower()}" if m else None
        if reason is None:
            eligible.append(d)
        else:
            excluded.append(Exclusion(d.leaid, d.name, reason))
    return eligible, excluded


# ------------------------------------------------------------------ weekly cells


def _resolve_week(reports) -> int:
    latest = max(r.report_date for r in reports)
    votes = Counter(r.modality for r in reports if r.report_date == latest)
    ranked = votes.most_common()
    if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
        return HYBRID
    return ranked[0][0]


def aggregate_to_weeks(reports, window: StudyWindow) -> dict[tuple[str, str, date], int]:
    """Collapse reports to one modality per (source, leaid, week start).

    Within a cell the latest report wins; disagreeing reports on that date go
    to a majority vote and an unresolved tie becomes hybrid.  Reports outside
    the window are dropped.
    """
    groups = defaultdict(list)
    for r in reports:
        if window.contains(r.report_date):
            groups[(r.source, r.leaid, window.week_of(r.report_date))].append(r)
    return {key: _resolve_week(rs) for key, rs in sorted(groups.items())}


@dataclass
class CoverageSummary:
    sources: tuple[str, ...]
    districts: dict[str, int]
    district_weeks: dict[str, int]
    union_districts: int
    union_district_weeks: int
    decodable_district_weeks: int

    def rows(self):
        for s in self.sources:
            yield s, self.districts[s], self.district_weeks[s]
        yield "total_unique", self.union_districts, self.union_district_weeks
        yield "decodable", self.union_districts, self.decodable_district_weeks

    def to_dict(self) -> dict:
        return {name: {"districts": d, "district_weeks": w} for name, d, w in self.rows()}


def build_sequences(cells, districts, sources, window: StudyWindow):
    """One grid per eligible district with at least one observation.

    Returns ``(sequences, warnings)``; cells for districts absent from
    ``districts`` are dropped and listed in ``warnings``.
    """
    sources = tuple(sources)
    src_index = {s: i for i, s in enumerate(sources)}
    known = {d.leaid for d in districts}
    T = window.n_weeks
    grids: dict[str, np.ndarray] = {}
    unknown = set()
    for (source, leaid, week), cat in cells.items():
        if source not in src_index:
            raise InputError(f"reports: source {source!r} not in configured sources {list(sources)}")
        if leaid not in known:
            unknown.add(leaid)
            continue
        t = window.index_of(week)
        if not 0 <= t < T:
            continue
        g = grids.get(leaid)
        if g is None:
            g = grids[leaid] = np.full((T, len(sources)), MISSING, dtype=np.int8)
        g[t, src_index[source]] = cat
    warnings = [f"district {x!r} has reports but no metadata; excluded" for x in sorted(unknown)]
    for w in warnings[:20]:
        log.warning(w)
    start = window.first_week
    seqs = [ObservationSequence(leaid, grids[leaid], start) for leaid in sorted(grids)]
    return seqs, warnings


def coverage_summary(sequences, sources) -> CoverageSummary:
    sources = tuple(sources)
    S = len(sources)
    per_dw = np.zeros(S, dtype=np.int64)
    per_d = np.zeros(S, dtype=np.int64)
    union_dw = 0
    union_d = 0
    decodable = 0
    for seq in sequences:
        observed = seq.grid != MISSING
        per_dw += observed.sum(axis=0)
        per_d += observed.any(axis=0)
        any_week = observed.any(axis=1)
        union_dw += int(any_week.sum())
        if any_week.any():
            union_d += 1
            decodable += seq.n_weeks
    return CoverageSummary(
        sources,
        {s: int(per_d[i]) for i, s in enumerate(sources)},
        {s: int(per_dw[i]) for i, s in enumerate(sources)},
        union_d,
        union_dw,
        decodable,
    )


# ------------------------------------------------------------------ file IO


def _open_csv(path):
    f = open(path, newline="", encoding="utf-8")  # noqa: SIM115 (caller closes)
    return f, csv.DictReader(f)


def _require_columns(reader, columns, path):
    header = reader.fieldnames or []
    missing = [c for c in columns if c not in header]
    if missing:
        raise InputError(f"{path}:1: missing column(s) {missing}")


def read_reports(path, config: PipelineConfig, cutoff: date | None = None) -> list[RawReport]:
    """Parse ``source,leaid,report_date,modality`` rows; later-than-cutoff rows are skipped."""
    f, reader = _open_csv(path)
    with f:
        _require_columns(reader, REPORT_COLUMNS, path)
        out = []
        for lineno, row in enumerate(reader, start=2):
            source = row["source"].strip()
            if source not in config.sources:
                raise InputError(
                    f"{path}:{lineno}: source {source!r} not in configured sources {list(config.sources)}"
                )
            try:
                day = date.fromisoformat(row["report_date"].strip())
            except ValueError:
                raise InputError(f"{path}:{lineno}: bad report_date {row['report_date']!r}") from None
            cat = config.normalize_modality(row["modality"])
            if cat is None:
                raise InputError(
                    f"{path}:{lineno}: modality {row['modality']!r} not in category map "
                    "(add it under pipeline.categories)"
                )
            leaid = row["leaid"].strip()
            if not leaid:
                raise InputError(f"{path}:{lineno}: empty leaid")
            if cutoff is not None and day > cutoff:
                continue
            out.append(RawReport(source, leaid, day, cat))
    return out


def _opt_int(v):
    v = (v or "").strip()
    if not v:
        return None
    try:
        return int(float(v))
    except ValueError:
        return None


def read_districts(path) -> list[DistrictRecord]:
    """Parse district metadata; unparseable fields become ``None``."""
    f, reader = _open_csv(path)
    with f:
        _require_columns(reader, ("leaid", "name", "agency_type", "operating_status"), path)
        out, seen = [], {}
        for lineno, row in enumerate(reader, start=2):
            leaid = (row.get("leaid") or "").strip()
            if leaid in seen:
                raise InputError(f"{path}:{lineno}: duplicate leaid {leaid!r} (first at line {seen[leaid]})")
            seen[leaid] = lineno
            out.append(
                DistrictRecord(
                    leaid=leaid,
                    name=(row.get("name") or "").strip() or None,
                    state=(row.get("state") or "").strip().upper() or None,
                    agency_type=_opt_int(row.get("agency_type")),
                    operating_status=_opt_int(row.get("operating_status")),
                    county_fips=(row.get("county_fips") or "").strip() or None,
                    urban_rural=_opt_int(row.get("urban_rural")),
                    enrollment=_opt_int(row.get("enrollment")),
                    school_count=_opt_int(row.get("school_count")),
                )
            )
    return out


def write_districts(path, districts) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(DISTRICT_COLUMNS)
        for d in districts:
            w.writerow(["" if getattr(d, c) is None else getattr(d, c) for c in DISTRICT_COLUMNS])


def write_reports(path, reports) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([r.source, r.leaid, r.report_date.isoformat(), STATE_LABELS[r.modality]])


def write_coverage(path, summary: CoverageSummary) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["source", "districts", "district_weeks"])
        w.writerows(summary.rows())


def write_exclusions(path, exclusions) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["leaid", "name", "reason"])
        for e in exclusions:
            w.writerow([e.leaid, e.name or "", e.reason])


def load_sequences(reports_path, districts_path, config: PipelineConfig, cutoff: date | None = None):
    """Reports + metadata -> eligible observation grids plus bookkeeping."""
    window = config.window.truncated(cutoff)
    districts = read_districts(districts_path)
    eligible, exclusions = filter_eligible(districts, config.exclude_keywords)
    reports = read_reports(reports_path, config, cutoff)
    cells = aggregate_to_weeks(reports, window)
    sequences, warnings = build_sequences(cells, eligible, config.sources, window)
    return {
        "window": window,
        "districts": districts,
        "eligible": eligible,
        "exclusions": exclusions,
        "sequences": sequences,
        "warnings": warnings,
        "coverage": coverage_summary(sequences, config.sources),
        "cells": cells,
    }


def source_grids(cells, leaids, sources, window: StudyWindow) -> dict[str, np.ndarray]:
    """Grids for arbitrary ``leaids`` straight from weekly cells, no eligibility checks."""
    src_index = {s: i for i, s in enumerate(sources)}
    wanted = set(leaids)
    grids = {x: np.full((window.n_weeks, len(sources)), MISSING, dtype=np.int8) for x in wanted}
    for (source, leaid, week), cat in cells.items():
        if leaid in wanted and source in src_index:
            t = window.index_of(week)
            if 0 <= t < window.n_weeks:
                grids[leaid][t, src_index[source]] = cat
    return grids
