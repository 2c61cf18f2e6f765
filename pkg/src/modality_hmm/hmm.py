"""Inference and Baum-Welch estimation for a shared HMM with several noisy channels.

Every operation works in log space.  Missing reports (``MISSING``) are
marginalized: they contribute a factor of one to the emission likelihood and
nothing to the emission counts.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from . import _kernels
from .params import MISSING, N_CATEGORIES, N_STATES, InputError, ModelParameters

log = logging.getLogger(__name__)


class ImpossibleObservationError(ArithmeticError):
    """The observations have probability zero under the given parameters."""

    def __init__(self, entity_id, week, week_start=None, hint=""):
        self.entity_id = entity_id
        self.week = week
        self.week_start = week_start
        when = f"week {week}" + (f" ({week_start.isoformat()})" if week_start else "")
        msg = f"impossible observation: sequence {entity_id!r} has zero probability at {when}"
        if hint:
            msg += f"; {hint}"
        super().__init__(msg)


@dataclass(frozen=True, eq=False)
class ObservationSequence:
    """One entity's week-by-source grid of reported categories."""

    entity_id: str
    grid: np.ndarray
    start_week: date | None = None

    def __post_init__(self):
        g = np.array(self.grid, dtype=np.int8, copy=True)
        if g.ndim == 1:
            g = g[:, None]
        if g.ndim != 2 or g.shape[0] < 1 or g.shape[1] < 1:
            raise InputError(f"{self.entity_id}: grid must be a non-empty (T, S) array")
        if np.any((g < MISSING) | (g >= N_CATEGORIES)):
            raise InputError(f"{self.entity_id}: grid cells must be 0, 1, 2 or MISSING")
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)

    @property
    def n_weeks(self) -> int:
        return self.grid.shape[0]

    @property
    def n_sources(self) -> int:
        return self.grid.shape[1]

    def week_start(self, t: int) -> date | None:
        if self.start_week is None:
            return None
        return self.start_week + timedelta(weeks=t)


@dataclass
class SufficientStatistics:
    """Expected counts from one or more sequences; ``+`` merges them."""

    start: np.ndarray
    transition: np.ndarray
    emissions: np.ndarray
    log_likelihood: float = 0.0
    n_sequences: int = 0

    @classmethod
    def zeros(cls, n_sources: int) -> SufficientStatistics:
        return cls(
            np.zeros(N_STATES),
            np.zeros((N_STATES, N_STATES)),
            np.zeros((n_sources, N_STATES, N_CATEGORIES)),
        )

    def __add__(self, other: SufficientStatistics) -> SufficientStatistics:
        return SufficientStatistics(
            self.start + other.start,
            self.transition + other.transition,
            self.emissions + other.emissions,
            self.log_likelihood + other.log_likelihood,
            self.n_sequences + other.n_sequences,
        )


@dataclass
class BaumWelchConfig:
    max_iters: int = 200
    tol: float = 1e-4
    pseudocount: float = 1e-6
    n_jobs: int = 1
    chunk_size: int = 4096

    def __post_init__(self):
        if self.max_iters < 0:
            raise InputError("max_iters must be >= 0")
        if self.pseudocount < 0:
            raise InputError("pseudocount must be >= 0")
        if self.tol < 0:
            raise InputError("tol must be >= 0")


@dataclass
class FitResult:
    params: ModelParameters
    trace: list[float] = field(default_factory=list)

    @property
    def log_likelihood(self) -> float:
        return self.trace[-1]

    @property
    def n_iter(self) -> int:
        return len(self.trace) - 1


# ------------------------------------------------------------ helpers


def _check_channels(params: ModelParameters, seq: ObservationSequence) -> None:
    if seq.n_sources != params.n_sources:
        raise InputError(
            f"{seq.entity_id}: grid has {seq.n_sources} sources, parameters have {params.n_sources}"
        )


def stack_grids(sequences) -> tuple[np.ndarray, np.ndarray]:
    """Pad grids to a common length with MISSING rows; returns ``(obs, lengths)``."""
    lengths = np.array([s.n_weeks for s in sequences], dtype=np.int64)
    n_src = sequences[0].n_sources
    obs = np.full((len(sequences), int(lengths.max()), n_src), MISSING, dtype=np.int64)
    for n, s in enumerate(sequences):
        obs[n, : s.n_weeks] = s.grid
    return obs, lengths


def log_emission_table(params: ModelParameters, obs: np.ndarray) -> np.ndarray:
    """Sum of log emission factors over channels for every cell of ``obs`` (..., S)."""
    ext = params.log_emissions_ext  # (S, K, C+1); column -1 is the MISSING zero
    out = np.zeros(obs.shape[:-1] + (N_STATES,))
    for s in range(params.n_sources):
        out += ext[s].T[obs[..., s]]
    return out


def _first_impossible_week(params, seq) -> int:
    le = log_emission_table(params, seq.grid.astype(np.int64))
    alpha = params.log_initial + le[0]
    if not np.any(np.isfinite(alpha)):
        return 0
    for t in range(1, seq.n_weeks):
        m = alpha.max()
        with np.errstate(divide="ignore"):
            alpha = np.log(np.exp(alpha - m) @ params.transition) + m + le[t]
        if not np.any(np.isfinite(alpha)):
            return t
    return seq.n_weeks - 1  # pragma: no cover


def _raise_impossible(params, seq, hint=""):
    t = _first_impossible_week(params, seq)
    raise ImpossibleObservationError(seq.entity_id, t, seq.week_start(t), hint)


# ------------------------------------------------------------ operations


def emission_log_factor(params: ModelParameters, row, state: int) -> float:
    """Log-probability of one week's reports given the hidden state."""
    row = np.asarray(row)
    if row.shape != (params.n_sources,):
        raise InputError(f"row must have {params.n_sources} cells, got shape {row.shape}")
    if state not in range(N_STATES):
        raise InputError(f"state must be 0, 1 or 2, got {state}")
    total = 0.0
    for s, k in enumerate(row.tolist()):
        if k == MISSING:
            continue
        if k not in range(N_CATEGORIES):
            raise InputError(f"category {k} out of range for source {params.sources[s]!r}")
        p = params.emissions[s, state, k]
        if p == 0.0:
            return -math.inf
        total += math.log(p)
    return total


def forward_backward(params: ModelParameters, seq: ObservationSequence):
    """Smoothed marginals, pairwise transition posteriors and the log-likelihood.

    Returns
    -------
    posterior : array (T, 3)
    pairwise : array (T-1, 3, 3)
        ``pairwise[t, i, j] = P(z_t = i, z_{t+1} = j | observations)``.
    log_likelihood : float
    """
    _check_channels(params, seq)
    obs = seq.grid.astype(np.int64)[None]
    le = log_emission_table(params, obs)
    lengths = np.array([seq.n_weeks], dtype=np.int64)
    la, lb, ll = _kernels.forward_backward(params.log_initial, params.log_transition, le, lengths)
    total = float(ll[0])
    if total == -math.inf:
        _raise_impossible(params, seq)
    la, lb, le = la[0], lb[0], le[0]
    post = np.exp(la + lb - total)
    pair = np.exp(
        la[:-1, :, None] + params.log_transition[None] + (le[1:] + lb[1:])[:, None, :] - total
    )
    return post, pair, total


def sequence_log_likelihood(params: ModelParameters, seq: ObservationSequence) -> float:
    _check_channels(params, seq)
    le = log_emission_table(params, seq.grid.astype(np.int64)[None])
    lengths = np.array([seq.n_weeks], dtype=np.int64)
    _, _, ll = _kernels.forward_backward(params.log_initial, params.log_transition, le, lengths)
    if ll[0] == -math.inf:
        _raise_impossible(params, seq)
    return float(ll[0])


def viterbi(params: ModelParameters, seq: ObservationSequence) -> tuple[np.ndarray, float]:
    """Most probable state path and its joint log-probability.

    Ties resolve to the lower state index, both at the final week and at each
    backtracking step.
    """
    _check_channels(params, seq)
    le = log_emission_table(params, seq.grid.astype(np.int64))
    path, logp = _kernels.viterbi(params.log_initial, params.log_transition, le)
    if logp == -math.inf:
        _raise_impossible(params, seq)
    return path, logp


@dataclass
class _Block:
    sequences: list
    obs: np.ndarray
    lengths: np.ndarray


def _prepare_blocks(params, sequences, chunk_size):
    for seq in sequences:
        _check_channels(params, seq)
    blocks = []
    for i in range(0, len(sequences), chunk_size):
        chunk = sequences[i : i + chunk_size]
        blocks.append(_Block(chunk, *stack_grids(chunk)))
    return blocks


def _estep_block(params, block):
    le = log_emission_table(params, block.obs)
    start, trans, emis, ll = _kernels.estep(
        params.log_initial, params.log_transition, le, block.obs, block.lengths, N_CATEGORIES
    )
    bad = np.flatnonzero(ll == -np.inf)
    if bad.size:
        return None, block.sequences[bad[0]]
    stats = SufficientStatistics(start, trans, emis, float(ll.sum()), len(block.sequences))
    return stats, None


def _estep_blocks(params, blocks, n_jobs=1, hint=""):
    if n_jobs > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(lambda b: _estep_block(params, b), blocks))
    else:
        results = [_estep_block(params, b) for b in blocks]
    total = SufficientStatistics.zeros(params.n_sources)
    for stats, bad in results:
        if bad is not None:
            _raise_impossible(params, bad, hint)
        total = total + stats
    return total


def accumulate_batch(params, sequences, n_jobs: int = 1, chunk_size: int = 4096, hint=""):
    """E-step over many sequences; chunks are merged in input order."""
    blocks = _prepare_blocks(params, list(sequences), chunk_size)
    return _estep_blocks(params, blocks, n_jobs, hint)


def accumulate_statistics(params: ModelParameters, seq: ObservationSequence) -> SufficientStatistics:
    return accumulate_batch(params, [seq])


def _normalize_counts(counts, previous, pseudocount):
    totals = counts.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        smoothed = (counts + pseudocount) / (totals + pseudocount * counts.shape[-1])
    return np.where(totals > 0, smoothed, previous)


def m_step(stats: SufficientStatistics, previous: ModelParameters, pseudocount: float) -> ModelParameters:
    """Row-normalize (counts + pseudocount); unvisited rows keep their previous values."""
    return ModelParameters(
        initial=_normalize_counts(stats.start, previous.initial, pseudocount),
        transition=_normalize_counts(stats.transition, previous.transition, pseudocount),
        emissions=_normalize_counts(stats.emissions, previous.emissions, pseudocount),
        sources=previous.sources,
        states=previous.states,
    )


def baum_welch(sequences, init: ModelParameters, config: BaumWelchConfig | None = None) -> FitResult:
    """Fit one parameter set shared by all sequences.

    ``trace[i]`` is the total log-likelihood after ``i`` updates, so
    ``trace[0]`` scores ``init`` and ``trace[-1]`` scores the returned
    parameters.  Iteration stops once an update improves the log-likelihood
    by less than ``config.tol`` or after ``config.max_iters`` updates.
    """
    config = config or BaumWelchConfig()
    sequences = list(sequences)
    if not sequences:
        raise InputError("baum_welch needs at least one sequence")

    blocks = _prepare_blocks(init, sequences, config.chunk_size)

    def estep(p, hint=""):
        return _estep_blocks(p, blocks, config.n_jobs, hint)

    stats = estep(init, hint="use a smoothed initialization (e.g. --init smoothed-table)")
    params = init
    trace = [stats.log_likelihood]
    for it in range(config.max_iters):
        new_params = m_step(stats, params, config.pseudocount)
        new_stats = estep(new_params)
        trace.append(new_stats.log_likelihood)
        params, stats = new_params, new_stats
        log.debug("iteration %d: log-likelihood %.6f", it + 1, trace[-1])
        if trace[-1] - trace[-2] < config.tol:
            break
    return FitResult(params, trace)


def fit_restarts(sequences, inits, config: BaumWelchConfig | None = None) -> FitResult:
    """Run :func:`baum_welch` from each initialization and keep the best fit.

    The highest final log-likelihood wins; ties keep the earliest run.
    """
    sequences = list(sequences)
    best = None
    for r, init in enumerate(inits):
        fit = baum_welch(sequences, init, config)
        log.info("restart %d: %d iterations, log-likelihood %.6f", r, fit.n_iter, fit.log_likelihood)
        if best is None or fit.log_likelihood > best.log_likelihood:
            best = fit
    if best is None:
        raise InputError("fit_restarts needs at least one initialization")
    return best


def posterior_batch(params: ModelParameters, sequences) -> list[np.ndarray]:
    """Smoothed marginals for many sequences at once."""
    sequences = list(sequences)
    if not sequences:
        return []
    for seq in sequences:
        _check_channels(params, seq)
    obs, lengths = stack_grids(sequences)
    le = log_emission_table(params, obs)
    la, lb, ll = _kernels.forward_backward(params.log_initial, params.log_transition, le, lengths)
    bad = np.flatnonzero(ll == -np.inf)
    if bad.size:
        _raise_impossible(params, sequences[bad[0]])
    out = []
    for n, seq in enumerate(sequences):
        T = seq.n_weeks
        out.append(np.exp(la[n, :T] + lb[n, :T] - ll[n]))
    return out
