"""Online Bayesian linear regression with exponential forgetting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

SCORING_RULES = ("squared-error", "nlpd")


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    prior_precision: float = 1.0
    noise_precision: float = 1.0
    forgetting: float = 0.999
    include_intercept: bool = True

    def __post_init__(self):
        errors = self.problems()
        if errors:
            raise ValueError("; ".join(errors))

    def problems(self) -> list[str]:
        out = []
        if not self.prior_precision > 0:
            out.append("prior_precision must be positive")
        if not self.noise_precision > 0:
            out.append("noise_precision must be positive")
        if not 0 < self.forgetting <= 1:
            out.append("forgetting must lie in (0, 1]")
        return out

    def design(self, x) -> np.ndarray:
        """Prepend the intercept column when configured."""
        x = np.asarray(x, dtype=float)
        if not self.include_intercept:
            return x
        ones = np.ones(x.shape[:-1] + (1,))
        return np.concatenate([ones, x], axis=-1)


@dataclass(frozen=True)
class PosteriorState:
    """Gaussian belief over the regression coefficients.

    Stored in both moment (``mean``) and natural (``precision``) form; the
    arrays are read-only so states can be shared freely.
    """

    mean: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        for name in ("mean", "precision"):
            a = np.array(getattr(self, name), dtype=float, copy=True)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def dimension(self) -> int:
        return self.mean.shape[0]

    @property
    def covariance(self) -> np.ndarray:
        return cho_solve(cho_factor(self.precision), np.eye(self.dimension))


@dataclass(frozen=True)
class PredictiveDistribution:
    mean: float
    variance: float


def init_posterior(config: ModelConfig, dimension: int) -> PosteriorState:
    if dimension < 1:
        raise ValueError("posterior dimension must be at least 1")
    return PosteriorState(np.zeros(dimension), config.prior_precision * np.eye(dimension))


def update(state: PosteriorState, x, y: float, config: ModelConfig) -> PosteriorState:
    """Condition on one observation, then forget towards the prior.

    ``x`` is the full design row (intercept included if used). Forgetting
    interpolates the natural parameters: the updated posterior gets weight
    ``tau`` and the centred prior ``1 - tau``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (state.dimension,):
        raise ValueError(f"design row has shape {x.shape}, expected ({state.dimension},)")
    if not (np.all(np.isfinite(x)) and math.isfinite(y)):
        raise ValueError("non-finite observation")
    beta, tau = config.noise_precision, config.forgetting
    precision = state.precision + beta * np.outer(x, x)
    shift = state.precision @ state.mean + beta * y * x
    if tau < 1:
        precision = tau * precision + (1 - tau) * config.prior_precision * np.eye(state.dimension)
        shift = tau * shift
    precision = 0.5 * (precision + precision.T)
    try:
        mean = cho_solve(cho_factor(precision), shift)
    except LinAlgError as exc:
        raise NumericalError("posterior precision is not positive definite") from exc
    return PosteriorState(mean, precision)


def update_batch(state: PosteriorState, X, y, config: ModelConfig) -> PosteriorState:
    for row, target in zip(np.asarray(X, dtype=float), np.asarray(y, dtype=float)):
        state = update(state, row, float(target), config)
    return state


def predict(state: PosteriorState, x, config: ModelConfig) -> PredictiveDistribution:
    x = np.asarray(x, dtype=float)
    if x.shape != (state.dimension,):
        raise ValueError(f"design row has shape {x.shape}, expected ({state.dimension},)")
    spread = float(x @ cho_solve(cho_factor(state.precision), x))
    return PredictiveDistribution(float(state.mean @ x), 1.0 / config.noise_precision + spread)


def score(pred: PredictiveDistribution, y: float, rule: str = "squared-error") -> float:
    """Negatively oriented loss of a predictive distribution at outcome ``y``."""
    if rule == "squared-error":
        return (y - pred.mean) ** 2
    if rule == "nlpd":
        return 0.5 * math.log(2 * math.pi * pred.variance) + (y - pred.mean) ** 2 / (2 * pred.variance)
    raise ValueError(f"unknown scoring rule {rule!r}; expected one of {SCORING_RULES}")


def score_array(mean, variance, y, rule: str = "squared-error") -> np.ndarray:
    mean, variance, y = np.asarray(mean), np.asarray(variance), np.asarray(y)
    if rule == "squared-error":
        return (y - mean) ** 2
    if rule == "nlpd":
        return 0.5 * np.log(2 * np.pi * variance) + (y - mean) ** 2 / (2 * variance)
    raise ValueError(f"unknown scoring rule {rule!r}; expected one of {SCORING_RULES}")


@dataclass(frozen=True)
class LossTracker:
    """Exponentially weighted estimate of an expected loss.

    With ``value=None`` the first observed loss seeds the estimate.
    """

    forgetting: float
    value: float | None = None
    count: int = 0


def track_loss(tracker: LossTracker, step_loss: float) -> LossTracker:
    if not math.isfinite(step_loss):
        raise ValueError("step loss must be finite")
    if tracker.value is None:
        return LossTracker(tracker.forgetting, float(step_loss), 1)
    tau = tracker.forgetting
    return LossTracker(tau, (1 - tau) * step_loss + tau * tracker.value, tracker.count + 1)

