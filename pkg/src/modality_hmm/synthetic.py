"""Synthetic corpora sampled from known parameters, for recovery and end-to-end checks.

Each district draws from its own PCG64 stream seeded by
``SeedSequence(seed, spawn_key=(district_index,))``, so output does not
depend on how districts are sharded or ordered during generation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from .hmm import ObservationSequence
from .params import (
    MISSING,
    PUBLISHED_SOURCES,
    STATE_LABELS,
    InputError,
    ModelParameters,
    published_parameters,
)
from .pipeline import DEFAULT_WINDOW, DistrictRecord, RawReport

# district-weeks covered per source out of 14,688 districts x 42 weeks
PUBLISHED_COVERAGE = {"burbio": 37_589, "mch": 58_137, "r2lt": 343_596, "sd": 24_732}
PUBLISHED_DISTRICT_WEEKS = 616_896
PUBLISHED_MISSINGNESS = {s: 1.0 - n / PUBLISHED_DISTRICT_WEEKS for s, n in PUBLISHED_COVERAGE.items()}

US_STATES = ["AK", "AL", "AR", "AZ", "CA", "CO", "CT", "DC", "DE", "FL", "GA", "HI", "IA", "ID", "IL", "IN", "KS", "KY", "LA", "MA", "MD", "ME", "MI", "MN", "MO", "MS", "MT", "NC", "ND", "NE", "NH", "NJ", "NM", "NV", "NY", "OH", "OK", "OR", "PA", "RI", "SC", "SD", "TN", "TX", "UT", "VA", "VT", "WA", "WI", "WV", "WY"]


@dataclass
class GeneratorConfig:
    """What to sample.

    ``missingness`` is either one probability per channel, shape (S,), or a
    schedule of shape (n_weeks, S).
    """

    parameters: ModelParameters = field(default_factory=published_parameters)
    n_districts: int = 2000
    n_weeks: int = 42
    missingness: np.ndarray | None = None
    seed: int = 0
    first_week: date = DEFAULT_WINDOW.first_week

    def __post_init__(self):
        if int(self.n_districts) < 1:
            raise InputError("simulate.n_districts: must be a positive integer")
        if int(self.n_weeks) < 1:
            raise InputError("simulate.n_weeks: must be a positive integer")
        S = self.parameters.n_sources
        if self.missingness is None:
            if self.parameters.sources == PUBLISHED_SOURCES:
                self.missingness = np.array([PUBLISHED_MISSINGNESS[s] for s in PUBLISHED_SOURCES])
            else:
                self.missingness = np.zeros(S)
        m = np.asarray(self.missingness, dtype=float)
        if m.shape not in ((S,), (int(self.n_weeks), S)):
            raise InputError(
                f"simulate.missingness: expected shape ({S},) or ({self.n_weeks}, {S}), got {m.shape}"
            )
        if np.any((m < 0) | (m > 1)) or not np.all(np.isfinite(m)):
            raise InputError("simulate.missingness: probabilities must lie in [0, 1]")
        self.missingness = m

    def schedule(self) -> np.ndarray:
        m = self.missingness
        return np.broadcast_to(m, (self.n_weeks, m.shape[-1])) if m.ndim == 1 else m


@dataclass
class SyntheticCorpus:
    truth: np.ndarray  # (N, T) hidden states
    sequences: list[ObservationSequence]
    districts: list[DistrictRecord]
    report_offsets: np.ndarray  # (N, T, S) weekday of each report within its week
    config: GeneratorConfig

    @property
    def weeks(self) -> list[date]:
        return [self.config.first_week + timedelta(weeks=t) for t in range(self.config.n_weeks)]

    def reports(self):
        sources = self.config.parameters.sources
        for n, seq in enumerate(self.sequences):
            for t, s in zip(*np.nonzero(seq.grid != MISSING)):
                day = self.config.first_week + timedelta(weeks=int(t), days=int(self.report_offsets[n, t, s]))
                yield RawReport(sources[s], seq.entity_id, day, int(seq.grid[t, s]))


def _sample_categorical(cdf, u):
    # cdf (..., K) cumulative; drop the last column so rounding never yields K
    return (u[..., None] >= cdf[..., :-1]).sum(axis=-1)


def district_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def sample_path(rng, initial_cdf, transition_cdf, n_weeks) -> np.ndarray:
    u = rng.random(n_weeks)
    path = np.empty(n_weeks, dtype=np.int8)
    path[0] = _sample_categorical(initial_cdf, u[0])
    for t in range(1, n_weeks):
        path[t] = _sample_categorical(transition_cdf[path[t - 1]], u[t])
    return path


def generate(config: GeneratorConfig) -> SyntheticCorpus:
    p = config.parameters
    N, T, S = int(config.n_districts), int(config.n_weeks), p.n_sources
    init_cdf = np.cumsum(p.initial)
    trans_cdf = np.cumsum(p.transition, axis=1)
    emis_cdf = np.cumsum(p.emissions, axis=2)
    miss = config.schedule()
    truth = np.empty((N, T), dtype=np.int8)
    offsets = np.empty((N, T, S), dtype=np.int8)
    sequences, districts = [], []
    width = max(7, len(str(N - 1)))
    for n in range(N):
        rng = district_rng(config.seed, n)
        path = sample_path(rng, init_cdf, trans_cdf, T)
        u = rng.random((T, S))
        cdf = emis_cdf[np.arange(S)[None, :], path[:, None]]  # (T, S, C)
        grid = _sample_categorical(cdf, u).astype(np.int8)
        grid[rng.random((T, S)) < miss] = MISSING
        offsets[n] = rng.integers(0, 5, size=(T, S))
        leaid = f"SYN{n:0{width}d}"
        truth[n] = path
        sequences.append(ObservationSequence(leaid, grid, config.first_week))
        districts.append(
            DistrictRecord(
                leaid=leaid,
                name=f"Synthetic District {n}",
                state=US_STATES[int(rng.integers(len(US_STATES)))],
                agency_type=2,
                operating_status=1,
                county_fips=f"{int(rng.integers(1000, 57000)):05d}",
                urban_rural=int(rng.integers(1, 7)),
                enrollment=int(rng.lognormal(7.0, 1.2)),
                school_count=int(rng.integers(1, 30)),
            )
        )
    return SyntheticCorpus(truth, sequences, districts, offsets, config)


def write_truth(path, corpus: SyntheticCorpus) -> None:
    weeks = [w.isoformat() for w in corpus.weeks]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["leaid", "week_start", "true_modality"])
        for seq, path_ in zip(corpus.sequences, corpus.truth):
            for t, s in enumerate(path_.tolist()):
                w.writerow([seq.entity_id, weeks[t], STATE_LABELS[s]])


def read_truth(path) -> dict[tuple[str, str], int]:
    with open(path, newline="", encoding="utf-8") as f:
        return {
            (r["leaid"], r["week_start"]): STATE_LABELS.index(r["true_modality"])
            for r in csv.DictReader(f)
        }


@dataclass
class RecoveryErrors:
    transition: float
    emissions: np.ndarray  # per channel
    initial: float

    @property
    def emission(self) -> float:
        return float(self.emissions.max())


def score_recovery(truth: ModelParameters, fitted: ModelParameters, assignment=None) -> RecoveryErrors:
    """Max absolute entrywise errors once fitted clusters are mapped onto truth labels."""
    if assignment is not None:
        fitted = assignment.apply(fitted)
    return RecoveryErrors(
        transition=float(np.abs(fitted.transition - truth.transition).max()),
        emissions=np.abs(fitted.emissions - truth.emissions).max(axis=(1, 2)),
        initial=float(np.abs(fitted.initial - truth.initial).max()),
    )
