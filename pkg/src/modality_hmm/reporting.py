"""Cluster labelling, decoding, source agreement and trend summaries."""

from __future__ import annotations

import csv
import itertools
import math
from collections import defaultdict
from dataclasses import dataclass
from datetime import date, timedelta
from typing import NamedTuple

import numpy as np
from scipy import stats

from . import hmm
from .params import MISSING, N_STATES, STATE_LABELS, InputError, ModelParameters
from .synthetic import US_STATES

MODEL_NAME = "hmm"
UNKNOWN = "unknown"
KNOWN_STATES = frozenset(US_STATES) | {"PR", "GU", "VI", "AS", "MP"}


# ------------------------------------------------------------------ labels


@dataclass(frozen=True)
class LabelAssignment:
    """``mapping[c]`` is the modality index given to hidden cluster ``c``."""

    mapping: tuple[int, ...]
    counts: np.ndarray  # (cluster, reported modality)

    def apply(self, params: ModelParameters) -> ModelParameters:
        return params.permuted(self.mapping)

    def relabel(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(self.mapping)[states]

    @property
    def matches(self) -> int:
        return int(sum(self.counts[c, m] for c, m in enumerate(self.mapping)))


def assign_labels(decodes, sequences) -> LabelAssignment:
    """Choose the cluster-to-modality bijection that agrees with the most reports.

    Counts every non-missing report against the cluster decoded for its week
    and scores all six bijections; ties go to the lexicographically smallest.
    """
    counts = np.zeros((N_STATES, N_STATES), dtype=np.int64)
    for dec, seq in zip(decodes, sequences, strict=True):
        if dec.entity_id != seq.entity_id:
            raise InputError(f"decode {dec.entity_id!r} does not line up with sequence {seq.entity_id!r}")
        for s in range(seq.n_sources):
            col = seq.grid[:, s]
            obs = col != MISSING
            np.add.at(counts, (dec.states[obs], col[obs]), 1)
    if counts.sum() == 0:
        raise InputError("assign_labels: no observations to label clusters with")
    best, best_score = None, -1
    for perm in itertools.permutations(range(N_STATES)):
        score = sum(counts[c, perm[c]] for c in range(N_STATES))
        if score > best_score:
            best, best_score = perm, score
    return LabelAssignment(best, counts)


# ------------------------------------------------------------------ decoding


@dataclass(frozen=True, eq=False)
class PosteriorDecode:
    entity_id: str
    start_week: date | None
    posterior: np.ndarray  # (T, 3)
    states: np.ndarray  # (T,)
    threshold: float = 0.75

    @property
    def confidence(self) -> np.ndarray:
        return self.posterior[np.arange(len(self.states)), self.states]

    @property
    def high_confidence(self) -> np.ndarray:
        return self.confidence >= self.threshold

    @property
    def n_weeks(self) -> int:
        return len(self.states)

    def week_start(self, t: int) -> date | None:
        return None if self.start_week is None else self.start_week + timedelta(weeks=t)

    def per_week(self):
        """Yield ``(t, posterior, state, confidence, high_confidence)``."""
        conf, high = self.confidence, self.high_confidence
        for t in range(self.n_weeks):
            yield t, self.posterior[t], int(self.states[t]), float(conf[t]), bool(high[t])


def decode_all(params: ModelParameters, sequences, mode: str = "posterior", threshold: float = 0.75,
               batch_size: int = 8192):
    """Per-week decodes for every sequence.

    ``mode='posterior'`` takes the argmax of the smoothed marginals (ties to
    the lower state); ``mode='viterbi'`` takes the jointly most probable path.
    Confidence is always the posterior mass of the chosen state.
    """
    if mode not in ("posterior", "viterbi"):
        raise InputError(f"decode mode must be 'posterior' or 'viterbi', got {mode!r}")
    sequences = list(sequences)
    out = []
    for i in range(0, len(sequences), batch_size):
        block = sequences[i : i + batch_size]
        posts = hmm.posterior_batch(params, block)
        for seq, post in zip(block, posts):
            if mode == "posterior":
                states = np.argmax(post, axis=1)
            else:
                states, _ = hmm.viterbi(params, seq)
            out.append(PosteriorDecode(seq.entity_id, seq.start_week, post, states, threshold))
    return out


# ------------------------------------------------------------------ agreement


@dataclass(frozen=True, eq=False)
class AgreementMatrix:
    providers: tuple[str, ...]
    overlap: np.ndarray  # (P, P) district-weeks where both report
    matches: np.ndarray  # (P, P) of which identical

    @property
    def agreement(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.overlap > 0, self.matches / np.maximum(self.overlap, 1), np.nan)

    def get(self, a: str, b: str) -> float:
        i, j = self.providers.index(a), self.providers.index(b)
        return float(self.agreement[i, j])

    def long_rows(self):
        """``(pair, overlap, agreement)`` for each unordered pair, including self-pairs."""
        P = len(self.providers)
        agr = self.agreement
        for i in range(P):
            for j in range(i, P):
                yield (f"{self.providers[i]}:{self.providers[j]}", int(self.overlap[i, j]),
                       None if np.isnan(agr[i, j]) else float(agr[i, j]))


def provider_grid(decode, grid: np.ndarray) -> np.ndarray:
    """Stack source reports with the model's decoded labels as an extra column."""
    model = np.full((grid.shape[0], 1), MISSING, dtype=np.int64)
    if decode is not None:
        model[: decode.n_weeks, 0] = decode.states
    return np.hstack([grid.astype(np.int64), model])


def agreement_from_grids(grids, providers) -> AgreementMatrix:
    providers = tuple(providers)
    P = len(providers)
    overlap = np.zeros((P, P), dtype=np.int64)
    matches = np.zeros((P, P), dtype=np.int64)
    for g in grids:
        obs = g != MISSING
        o = obs.astype(np.int64)
        overlap += o.T @ o
        for i in range(P):
            same = (g == g[:, [i]]) & obs & obs[:, [i]]
            matches[i] += same.sum(axis=0)
    return AgreementMatrix(providers, overlap, matches)


def agreement_matrix(decodes, sequences, sources, model_name: str = MODEL_NAME) -> AgreementMatrix:
    """Pairwise agreement among the sources and the decoded model labels."""
    by_id = {d.entity_id: d for d in decodes}
    grids = (provider_grid(by_id.get(s.entity_id), s.grid) for s in sequences)
    return agreement_from_grids(grids, tuple(sources) + (model_name,))


def agreement_samples(grids, i: int, j: int, unit: str = "district") -> np.ndarray:
    """Per-district (or per-week) agreement proportions between providers ``i`` and ``j``.

    Units with no overlap are left out.
    """
    if unit not in ("district", "week"):
        raise InputError(f"agreement unit must be 'district' or 'week', got {unit!r}")
    if unit == "district":
        vals = []
        for g in grids:
            both = (g[:, i] != MISSING) & (g[:, j] != MISSING)
            n = int(both.sum())
            if n:
                vals.append(float((g[both, i] == g[both, j]).sum()) / n)
        return np.array(vals)
    num = defaultdict(int)
    den = defaultdict(int)
    for g in grids:
        both = (g[:, i] != MISSING) & (g[:, j] != MISSING)
        for t in np.flatnonzero(both):
            den[t] += 1
            num[t] += int(g[t, i] == g[t, j])
    return np.array([num[t] / den[t] for t in sorted(den)])


class TTestResult(NamedTuple):
    t: float
    p: float
    df: int
    degenerate: bool


def agreement_ttest(sample_a, sample_b) -> TTestResult:
    """Pooled-variance two-sample Student t-test of mean(a) > mean(b).

    Returns the t statistic and the one-sided p-value ``P(T >= t)`` with
    ``n_a + n_b - 2`` degrees of freedom.  If neither sample varies the test
    is flagged degenerate: equal means give ``t = 0, p = 0.5``, otherwise
    ``t = +-inf`` and ``p`` is 0 or 1.
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise InputError("agreement_ttest: each sample needs at least 2 values")
    na, nb = a.size, b.size
    df = na + nb - 2
    diff = a.mean() - b.mean()
    pooled = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / df
    if pooled == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, 0.5, df, True)
        return TTestResult(math.copysign(math.inf, diff), 0.0 if diff > 0 else 1.0, df, True)
    t = diff / math.sqrt(pooled * (1.0 / na + 1.0 / nb))
    return TTestResult(float(t), float(stats.t.sf(t, df)), df, False)


# ------------------------------------------------------------------ trends


@dataclass(frozen=True)
class TrendRow:
    week_start: date
    stratum: str
    pct_remote: float | None
    pct_hybrid: float | None
    pct_inperson: float | None
    n_districts: int


def _stratum_of(record, stratifier: str) -> str:
    if stratifier == "none":
        return "national"
    if record is None:
        return UNKNOWN
    if stratifier == "state":
        return record.state if record.state in KNOWN_STATES else UNKNOWN
    if stratifier == "urban_rural":
        return str(record.urban_rural) if record.urban_rural in range(1, 7) else UNKNOWN
    raise InputError(f"stratify must be none, state or urban_rural, got {stratifier!r}")


def _strata_axis(districts, stratifier: str, seen) -> list[str]:
    if stratifier == "none":
        return ["national"]
    if stratifier == "urban_rural":
        axis = [str(k) for k in range(1, 7)]
    else:
        axis = sorted({d.state for d in districts if d.state in KNOWN_STATES})
    if UNKNOWN in seen:
        axis.append(UNKNOWN)
    return axis


def _decode_weeks(decodes):
    weeks = set()
    for d in decodes:
        weeks.update(d.week_start(t) for t in range(d.n_weeks))
    return sorted(weeks)


def trend_report(decodes, districts, stratifier: str = "none") -> list[TrendRow]:
    """Share of decoded districts in each modality per week and stratum.

    Strata with no decoded district in a week get ``None`` percentages so the
    output has a complete axis.
    """
    by_id = {d.leaid: d for d in districts}
    counts = defaultdict(lambda: np.zeros(N_STATES, dtype=np.int64))
    seen = set()
    for dec in decodes:
        stratum = _stratum_of(by_id.get(dec.entity_id), stratifier)
        seen.add(stratum)
        for t, s in enumerate(dec.states.tolist()):
            counts[(dec.week_start(t), stratum)][s] += 1
    rows = []
    axis = _strata_axis(districts, stratifier, seen)
    for week in _decode_weeks(decodes):
        for stratum in axis:
            c = counts.get((week, stratum))
            n = 0 if c is None else int(c.sum())
            if n == 0:
                rows.append(TrendRow(week, stratum, None, None, None, 0))
            else:
                pct = 100.0 * c / n
                rows.append(TrendRow(week, stratum, float(pct[0]), float(pct[1]), float(pct[2]), n))
    return rows


def state_snapshot(decodes, districts, weeks) -> list[tuple[date, str, float | None, int]]:
    """Percentage of each state's decoded districts in-person at the given weeks.

    ``weeks`` are any dates; each is matched to the decode week containing it.
    """
    rows = trend_report(decodes, districts, "state")
    by_key = {(r.week_start, r.stratum): r for r in rows}
    strata = sorted({r.stratum for r in rows}, key=lambda s: (s == UNKNOWN, s))
    all_weeks = _decode_weeks(decodes)
    out = []
    for w in weeks:
        match = max((x for x in all_weeks if x <= w), default=None)
        if match is None or (w - match).days >= 7:
            raise InputError(f"snapshot week {w.isoformat()} is outside the decoded window")
        for s in strata:
            r = by_key[(match, s)]
            out.append((match, s, r.pct_inperson, r.n_districts))
    return out


# ------------------------------------------------------------------ file IO


def _fmt(x, nd=6):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.{nd}f}"


DECODE_COLUMNS = ("leaid", "week_start", "modality", "p_remote", "p_hybrid", "p_inperson", "high_confidence")


def write_decodes(path, decodes) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(DECODE_COLUMNS)
        for d in decodes:
            for t, post, s, _, high in d.per_week():
                w.writerow([
                    d.entity_id,
                    d.week_start(t).isoformat(),
                    STATE_LABELS[s],
                    *(f"{p:.6f}" for p in post),
                    int(high),
                ])


def read_decodes(path, threshold: float = 0.75) -> list[PosteriorDecode]:
    """Rebuild decodes from a decode file (posteriors at the file's precision)."""
    rows = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = [c for c in DECODE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise InputError(f"{path}:1: missing column(s) {missing}")
        for lineno, r in enumerate(reader, start=2):
            try:
                week = date.fromisoformat(r["week_start"])
                state = STATE_LABELS.index(r["modality"])
                post = [float(r["p_remote"]), float(r["p_hybrid"]), float(r["p_inperson"])]
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
            rows[r["leaid"]].append((week, state, post))
    out = []
    for leaid in sorted(rows):
        rs = sorted(rows[leaid])
        start = rs[0][0]
        for k, (w, _, _) in enumerate(rs):
            if w != start + timedelta(weeks=k):
                raise InputError(f"{path}: weeks for {leaid!r} are not contiguous")
        out.append(
            PosteriorDecode(
                leaid, start, np.array([r[2] for r in rs]), np.array([r[1] for r in rs]), threshold
            )
        )
    return out


def write_agreement(matrix_path, long_path, m: AgreementMatrix) -> None:
    agr = m.agreement
    with open(matrix_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["provider", *m.providers])
        for i, p in enumerate(m.providers):
            w.writerow([p, *(_fmt(None if np.isnan(x) else float(x)) for x in agr[i])])
    with open(long_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["pair", "overlap", "agreement"])
        for pair, n, a in m.long_rows():
            w.writerow([pair, n, _fmt(a)])


def write_trend(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["week_start", "stratum", "pct_remote", "pct_hybrid", "pct_inperson"])
        for r in rows:
            w.writerow([r.week_start.isoformat(), r.stratum, _fmt(r.pct_remote),
                        _fmt(r.pct_hybrid), _fmt(r.pct_inperson)])


def write_snapshot(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["week_start", "state", "pct_inperson", "n_districts"])
        for week, state, pct, n in rows:
            w.writerow([week.isoformat(), state, _fmt(pct), n])


def decode_accuracy(decodes, truth_paths) -> tuple[float, float]:
    """Overall and high-confidence accuracy of decodes against true paths."""
    hits = total = hi_hits = hi_total = 0
    for d, truth in zip(decodes, truth_paths, strict=True):
        ok = d.states == np.asarray(truth)
        high = d.high_confidence
        hits += int(ok.sum())
        total += ok.size
        hi_hits += int(ok[high].sum())
        hi_total += int(high.sum())
    return hits / total, (hi_hits / hi_total if hi_total else math.nan)


__all__ = [
    "AgreementMatrix",
    "LabelAssignment",
    "PosteriorDecode",
    "TTestResult",
    "TrendRow",
    "agreement_matrix",
    "agreement_samples",
    "agreement_ttest",
    "assign_labels",
    "decode_all",
    "state_snapshot",
    "trend_report",
]
