"""Multi-source categorical data fusion with a shared hidden Markov model."""

from .hmm import (
    BaumWelchConfig,
    FitResult,
    ImpossibleObservationError,
    ObservationSequence,
    SufficientStatistics,
    accumulate_statistics,
    baum_welch,
    emission_log_factor,
    fit_restarts,
    forward_backward,
    sequence_log_likelihood,
    viterbi,
)
from .params import (
    MISSING,
    STATE_LABELS,
    InputError,
    ModelParameters,
    published_parameters,
)

__version__ = "0.1.0"

__all__ = [
    "MISSING",
    "STATE_LABELS",
    "BaumWelchConfig",
    "FitResult",
    "ImpossibleObservationError",
    "InputError",
    "ModelParameters",
    "ObservationSequence",
    "SufficientStatistics",
    "accumulate_statistics",
    "baum_welch",
    "emission_log_factor",
    "fit_restarts",
    "forward_backward",
    "published_parameters",
    "sequence_log_likelihood",
    "viterbi",
]
