"""Model parameters for a three-state HMM observed through several categorical channels."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

N_STATES = 3
N_CATEGORIES = 3
MISSING = -1
STATE_LABELS = ("remote", "hybrid", "in-person")
ROW_TOL = 1e-9

PUBLISHED_SOURCES = ("burbio", "mch", "r2lt", "sd")

# Weekly transition probabilities, row = current modality, column = next.
PUBLISHED_TRANSITION = np.array(
    [
        [0.903, 0.079, 0.018],
        [0.014, 0.961, 0.025],
        [0.004, 0.013, 0.983],
    ]
)

# Per-source emission probabilities, row = true modality, column = reported.
# Several published rows sum to 0.999 or 1.001 due to rounding.
PUBLISHED_EMISSIONS = np.array(
    [
        [[0.805, 0.145, 0.050], [0.067, 0.617, 0.317], [0.016, 0.161, 0.823]],
        [[0.795, 0.178, 0.027], [0.090, 0.775, 0.135], [0.055, 0.347, 0.598]],
        [[0.992, 0.008, 0.001], [0.002, 0.997, 0.001], [0.001, 0.001, 0.997]],
        [[0.642, 0.330, 0.028], [0.003, 0.863, 0.134], [0.001, 0.042, 0.956]],
    ]
)

# 40.3% in-person at the start of the school year; remainder split evenly.
PUBLISHED_INITIAL = np.array([0.2985, 0.2985, 0.403])


class InputError(ValueError):
    """Raised for malformed or inconsistent user input."""


def normalize_rows(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a / a.sum(axis=-1, keepdims=True)


def _check_stochastic(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise InputError(f"{name}: non-finite entries")
    if np.any(a < 0):
        raise InputError(f"{name}: negative entries")
    sums = a.sum(axis=-1)
    bad = np.abs(sums - 1.0) > ROW_TOL
    if np.any(bad):
        raise InputError(f"{name}: rows must sum to 1 (got {sums[bad].ravel()[:3]})")


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ModelParameters:
    """Initial distribution, transition matrix and one emission matrix per source.

    Parameters
    ----------
    initial : array (3,)
        Start-state probabilities.
    transition : array (3, 3)
        ``transition[i, j]`` is the probability of moving from state i to j.
    emissions : array (S, 3, 3)
        ``emissions[s, i, k]`` is the probability that source s reports
        category k when the true state is i.
    sources : tuple of str
        Channel names, in the column order of observation grids.
    """

    initial: np.ndarray
    transition: np.ndarray
    emissions: np.ndarray
    sources: tuple[str, ...] = field(default=())
    states: tuple[str, ...] = field(default=STATE_LABELS)

    def __post_init__(self):
        initial = _frozen(self.initial)
        transition = _frozen(self.transition)
        emissions = _frozen(self.emissions)
        if initial.shape != (N_STATES,):
            raise InputError(f"initial: expected shape (3,), got {initial.shape}")
        if transition.shape != (N_STATES, N_STATES):
            raise InputError(f"transition: expected shape (3, 3), got {transition.shape}")
        if emissions.ndim != 3 or emissions.shape[1:] != (N_STATES, N_CATEGORIES) or emissions.shape[0] < 1:
            raise InputError(f"emissions: expected shape (S, 3, 3), got {emissions.shape}")
        _check_stochastic("initial", initial)
        _check_stochastic("transition", transition)
        _check_stochastic("emissions", emissions)
        sources = tuple(self.sources) or tuple(f"source{s}" for s in range(emissions.shape[0]))
        if len(sources) != emissions.shape[0]:
            raise InputError(
                f"sources: {len(sources)} names given for {emissions.shape[0]} emission matrices"
            )
        if len(set(sources)) != len(sources):
            raise InputError("sources: names must be unique")
        states = tuple(self.states)
        if len(states) != N_STATES:
            raise InputError("states: exactly 3 labels required")
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "emissions", emissions)
        object.__setattr__(self, "sources", sources)
        object.__setattr__(self, "states", states)

    @property
    def n_sources(self) -> int:
        return self.emissions.shape[0]

    @cached_property
    def log_initial(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.initial)

    @cached_property
    def log_transition(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.transition)

    @cached_property
    def log_emissions_ext(self) -> np.ndarray:
        """Log emissions with an extra trailing column of zeros for MISSING (index -1)."""
        with np.errstate(divide="ignore"):
            logb = np.log(self.emissions)
        ext = np.zeros((self.n_sources, N_STATES, N_CATEGORIES + 1))
        ext[:, :, :N_CATEGORIES] = logb
        return ext

    def permuted(self, mapping) -> ModelParameters:
        """Relabel hidden states: old state ``c`` becomes new state ``mapping[c]``.

        Emission columns are reported categories and are left alone.
        """
        mapping = np.asarray(mapping, dtype=int)
        if sorted(mapping.tolist()) != list(range(N_STATES)):
            raise InputError(f"mapping must be a permutation of 0..2, got {mapping.tolist()}")
        inv = np.argsort(mapping)
        return ModelParameters(
            initial=self.initial[inv],
            transition=self.transition[np.ix_(inv, inv)],
            emissions=self.emissions[:, inv, :],
            sources=self.sources,
            states=self.states,
        )

    def allclose(self, other: ModelParameters, atol: float = 1e-12) -> bool:
        return (
            self.emissions.shape == other.emissions.shape
            and np.allclose(self.initial, other.initial, rtol=0, atol=atol)
            and np.allclose(self.transition, other.transition, rtol=0, atol=atol)
            and np.allclose(self.emissions, other.emissions, rtol=0, atol=atol)
        )

    def to_dict(self) -> dict:
        return {
            "states": list(self.states),
            "initial": self.initial.tolist(),
            "transition": self.transition.tolist(),
            "sources": list(self.sources),
            "emissions": {s: self.emissions[i].tolist() for i, s in enumerate(self.sources)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelParameters:
        for key in ("initial", "transition", "sources", "emissions"):
            if key not in d:
                raise InputError(f"parameter file: missing key '{key}'")
        sources = list(d["sources"])
        em = d["emissions"]
        if isinstance(em, dict):
            missing = [s for s in sources if s not in em]
            if missing:
                raise InputError(f"parameter file: emissions missing for sources {missing}")
            em = [em[s] for s in sources]
        return cls(
            initial=d["initial"],
            transition=d["transition"],
            emissions=em,
            sources=tuple(sources),
            states=tuple(d.get("states", STATE_LABELS)),
        )

    def save(self, path) -> None:
        # json writes floats with repr(), which round-trips exactly
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> ModelParameters:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        return cls.from_dict(d)


def published_parameters(initial=None) -> ModelParameters:
    """Published transition and emission estimates, rows renormalized to sum to one."""
    return ModelParameters(
        initial=PUBLISHED_INITIAL if initial is None else initial,
        transition=normalize_rows(PUBLISHED_TRANSITION),
        emissions=normalize_rows(PUBLISHED_EMISSIONS),
        sources=PUBLISHED_SOURCES,
    )


def smoothed_table_parameters(sources=PUBLISHED_SOURCES, weight: float = 0.9) -> ModelParameters:
    """Blend the published tables with uniform rows (``weight`` on the tables)."""
    if len(sources) != len(PUBLISHED_SOURCES):
        raise InputError(
            f"smoothed-table init needs exactly {len(PUBLISHED_SOURCES)} sources, got {len(sources)}"
        )
    base = published_parameters()
    u = 1.0 / N_STATES
    return ModelParameters(
        initial=np.full(N_STATES, u),
        transition=normalize_rows(weight * base.transition + (1 - weight) * u),
        emissions=normalize_rows(weight * base.emissions + (1 - weight) * u),
        sources=tuple(sources),
    )


def random_parameters(rng: np.random.Generator, n_sources: int, sources=(), concentration: float = 1.0):
    """Draw every row from a symmetric Dirichlet."""
    alpha = np.full(N_STATES, concentration)
    return ModelParameters(
        initial=rng.dirichlet(alpha),
        transition=rng.dirichlet(alpha, size=N_STATES),
        emissions=rng.dirichlet(np.full(N_CATEGORIES, concentration), size=(n_sources, N_STATES)),
        sources=tuple(sources),
    )


def stationary_distribution(transition: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eig(np.asarray(transition).T)
    p = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    return p / p.sum()
