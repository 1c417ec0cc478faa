"""Coalition value functions for a fitted linear model.

A coalition keeps the central features and its own members at their observed
values and averages the loss over the remaining (out-of-coalition) features.
Observational conditioning draws those from their Gaussian conditional given
everything that is kept; interventional conditioning draws them from their
marginal, which severs every backdoor path through the kept features.

Two backends share one interface. ``closed-form-gaussian`` expands the
expected squared error of the plug-in predictor through first and second
moments. ``monte-carlo`` samples the fill-in (conditional Gaussian draws, or
background rows with the kept coordinates overwritten) and works for any
scoring rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .bayes import ModelConfig, PosteriorState, score_array, SCORING_RULES
from .dataset import MarketData

CONDITIONINGS = ("observational", "interventional")
BACKENDS = ("closed-form-gaussian", "monte-carlo")

Coalition = frozenset


class UnsupportedBackendError(ValueError):
    pass


@dataclass(frozen=True)
class LiftSpec:
    conditioning: str = "interventional"
    backend: str = "closed-form-gaussian"
    mc_samples: int = 1000
    rule: str = "squared-error"

    def __post_init__(self):
        errors = self.problems()
        if errors:
            raise ValueError("; ".join(errors))

    def problems(self) -> list[str]:
        out = []
        if self.conditioning not in CONDITIONINGS:
            out.append(f"conditioning must be one of {CONDITIONINGS}")
        if self.backend not in BACKENDS:
            out.append(f"backend must be one of {BACKENDS}")
        if self.rule not in SCORING_RULES:
            out.append(f"rule must be one of {SCORING_RULES}")
        if self.backend == "monte-carlo" and self.mc_samples < 1:
            out.append("mc_samples must be >= 1 for the monte-carlo backend")
        if self.backend == "closed-form-gaussian" and self.rule != "squared-error":
            out.append("the closed-form backend only supports the squared-error rule")
        return out


@dataclass(frozen=True)
class FeatureModel:
    """Joint Gaussian law of all feature columns plus background rows."""

    mean: np.ndarray
    covariance: np.ndarray
    central: tuple[int, ...] = ()
    background: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        cov = np.asarray(self.covariance, dtype=float).reshape(mean.size, mean.size)
        if not np.allclose(cov, cov.T, atol=1e-12 * max(1.0, np.abs(cov).max(initial=0))):
            raise ValueError("feature covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))
        object.__setattr__(self, "central", tuple(int(i) for i in self.central))
        bg = np.asarray(self.background, dtype=float)
        object.__setattr__(self, "background", bg.reshape(-1, mean.size) if bg.size else
                           np.empty((0, mean.size)))

    @property
    def n_features(self) -> int:
        return self.mean.size

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n_features) if i not in self.central)

    @property
    def jitter(self) -> float:
        tr = float(np.trace(self.covariance))
        return 1e-8 * tr / self.n_features if tr > 0 else 1e-12


def fit_feature_model(
    data: MarketData,
    window: tuple[int, int] | None = None,
    max_background: int | None = None,
    seed: int = 0,
) -> FeatureModel:
    start, stop = window if window is not None else (0, data.n_steps)
    X = data.features[start:stop]
    if X.shape[0] < 2:
        raise ValueError("feature model window needs at least 2 rows")
    background = X
    if max_background is not None and X.shape[0] > max_background:
        rows = np.random.default_rng(seed).choice(X.shape[0], max_background, replace=False)
        background = X[np.sort(rows)]
    cov = np.atleast_2d(np.cov(X, rowvar=False)) if X.shape[1] else np.empty((0, 0))
    return FeatureModel(X.mean(axis=0), cov, data.central, background)


def gaussian_fill(fm: FeatureModel, fixed: Iterable[int], given: Iterable[int]):
    """Affine law of the completed feature vector.

    Coordinates in ``fixed`` keep their observed value; the others are drawn
    from the Gaussian conditional given the observed values of ``given``
    (a subset of ``fixed``; empty means the marginal). Returns ``(A, b, C)``
    such that the completed vector is ``N(A @ x + b, C)``.
    """
    n = fm.n_features
    fixed = sorted(set(fixed))
    given = sorted(set(given))
    free = [i for i in range(n) if i not in set(fixed)]
    A = np.zeros((n, n))
    b = np.zeros(n)
    C = np.zeros((n, n))
    A[fixed, fixed] = 1.0
    if not free:
        return A, b, C
    S, m = fm.covariance, fm.mean
    S_ff = S[np.ix_(free, free)]
    if given:
        S_gg = S[np.ix_(given, given)] + fm.jitter * np.eye(len(given))
        S_gf = S[np.ix_(given, free)]
        gain = cho_solve(cho_factor(S_gg), S_gf).T
        A[np.ix_(free, given)] = gain
        b[free] = m[free] - gain @ m[given]
        cond = S_ff - gain @ S_gf
    else:
        b[free] = m[free]
        cond = S_ff
    C[np.ix_(free, free)] = 0.5 * (cond + cond.T)
    return A, b, C


def _split(posterior: PosteriorState, n_features: int) -> tuple[float, np.ndarray]:
    mu = posterior.mean
    if mu.size == n_features + 1:
        return float(mu[0]), mu[1:]
    if mu.size == n_features:
        return 0.0, mu
    raise ValueError(f"posterior of dimension {mu.size} does not cover {n_features} features")


def _kept(fm: FeatureModel, coalition: Iterable[int]) -> list[int]:
    members = set(int(i) for i in coalition)
    if members & set(fm.central):
        raise ValueError("central features are implicit and cannot be coalition members")
    if any(not 0 <= i < fm.n_features for i in members):
        raise ValueError("coalition member outside the feature range")
    return sorted(set(fm.central) | members)


def _fill_for(fm: FeatureModel, coalition, conditioning: str):
    kept = _kept(fm, coalition)
    if conditioning == "observational":
        return gaussian_fill(fm, kept, kept)
    if conditioning == "interventional":
        return gaussian_fill(fm, kept, ())
    raise ValueError(f"unknown conditioning {conditioning!r}")


def quadratic_score(mu0: float, mu: np.ndarray, A, b, C, x, y: float) -> float:
    """Expected squared error of ``mu0 + mu @ x~`` with ``x~ ~ N(Ax + b, C)``."""
    resid = mu0 + mu @ (A @ x + b) - y
    return float(resid ** 2 + mu @ C @ mu)


def closed_form_quadratic_score(
    posterior: PosteriorState,
    fm: FeatureModel,
    coalition: Iterable[int],
    x,
    y: float,
    conditioning: str,
) -> float:
    x = np.asarray(x, dtype=float)
    mu0, mu = _split(posterior, fm.n_features)
    A, b, C = _fill_for(fm, coalition, conditioning)
    return quadratic_score(mu0, mu, A, b, C, x, y)


def _psd_sqrt(C: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(C)
    return V * np.sqrt(np.clip(w, 0.0, None))


def _mc_fill(fm: FeatureModel, kept: list[int], conditioning: str, x, n: int, rng) -> np.ndarray:
    """``n`` completed feature vectors for one coalition."""
    if len(kept) == fm.n_features:
        return np.broadcast_to(x, (n, fm.n_features))
    if conditioning == "interventional":
        if fm.background.shape[0] == 0:
            raise ValueError("monte-carlo interventional lift needs background rows")
        rows = fm.background[rng.integers(0, fm.background.shape[0], n)].copy()
        rows[:, kept] = x[kept]
        return rows
    A, b, C = gaussian_fill(fm, kept, kept)
    z = rng.standard_normal((n, fm.n_features))
    return (A @ x + b) + z @ _psd_sqrt(C).T


def _mc_scores(posterior, fm, samples, y, rule, config):
    X = config.design(samples) if posterior.dimension == fm.n_features + 1 else samples
    pred = X @ posterior.mean
    if rule == "nlpd":
        cov = cho_solve(cho_factor(posterior.precision), np.eye(posterior.dimension))
        var = 1.0 / config.noise_precision + np.einsum("ij,jk,ik->i", X, cov, X)
    else:
        var = np.ones_like(pred)
    return score_array(pred, var, y, rule)


def mc_lift(
    spec: LiftSpec,
    posterior: PosteriorState,
    fm: FeatureModel,
    coalition: Iterable[int],
    x,
    y: float,
    config: ModelConfig | None = None,
    seed: int = 0,
) -> tuple[float, float]:
    """Monte-Carlo lift value and its standard error."""
    config = config or ModelConfig()
    x = np.asarray(x, dtype=float)
    kept = _kept(fm, coalition)
    rng = np.random.default_rng(seed)
    samples = _mc_fill(fm, kept, spec.conditioning, x, spec.mc_samples, rng)
    s = _mc_scores(posterior, fm, samples, y, spec.rule, config)
    se = float(s.std(ddof=1) / np.sqrt(s.size)) if s.size > 1 else 0.0
    return float(s.mean()), se


def eval_lift(
    spec: LiftSpec,
    posterior: PosteriorState,
    fm: FeatureModel,
    coalition: Iterable[int],
    x,
    y: float,
    config: ModelConfig | None = None,
    seed: int = 0,
) -> float:
    """Lifted score of ``coalition`` at one observation ``(x, y)``."""
    if spec.backend == "closed-form-gaussian":
        if spec.rule != "squared-error":
            raise UnsupportedBackendError("closed form requires the squared-error rule")
        return closed_form_quadratic_score(posterior, fm, coalition, x, y, spec.conditioning)
    return mc_lift(spec, posterior, fm, coalition, x, y, config, seed)[0]


# ---------------------------------------------------------------------------
# Whole-game evaluation


def mask_members(mask: int, players: Sequence[int]) -> list[int]:
    return [p for k, p in enumerate(players) if mask >> k & 1]


@dataclass(frozen=True)
class LiftGame:
    """A lift bound to one observation, viewed as a cooperative game.

    ``value_of`` maps a coalition of support columns to its lifted score.
    """

    spec: LiftSpec
    posterior: PosteriorState
    fm: FeatureModel
    x: np.ndarray
    y: float
    config: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0

    @property
    def players(self) -> tuple[int, ...]:
        return self.fm.support

    def value_of(self, coalition: Iterable[int]) -> float:
        return eval_lift(self.spec, self.posterior, self.fm, coalition,
                         self.x, self.y, self.config, self.seed)

    def hybrid_value(self, fixed: Iterable[int], given: Iterable[int]) -> float:
        """Score with ``fixed`` kept and the rest drawn given ``given`` only."""
        if self.spec.backend != "closed-form-gaussian":
            raise UnsupportedBackendError("hybrid values need the closed-form backend")
        mu0, mu = _split(self.posterior, self.fm.n_features)
        A, b, C = gaussian_fill(
            self.fm, _kept(self.fm, fixed), _kept(self.fm, given))
        return quadratic_score(mu0, mu, A, b, C, np.asarray(self.x, float), self.y)


class CoalitionTable:
    """Lift values of every coalition of ``players`` at once.

    The affine fill-in law of each coalition depends only on the feature
    model, so it is built once; evaluating a step is then a batched
    quadratic form in the current coefficient vector.
    """

    max_players = 16

    def __init__(self, fm: FeatureModel, spec: LiftSpec, players: Sequence[int] | None = None):
        self.fm, self.spec = fm, spec
        self.players = tuple(players if players is not None else fm.support)
        if len(self.players) > self.max_players:
            raise ValueError(f"{len(self.players)} players exceeds the enumeration limit")
        n_masks = 1 << len(self.players)
        n = fm.n_features
        self.kept = [_kept(fm, mask_members(m, self.players)) for m in range(n_masks)]
        if spec.backend == "closed-form-gaussian":
            self.A = np.empty((n_masks, n, n))
            self.b = np.empty((n_masks, n))
            self.C = np.empty((n_masks, n, n))
            for m in range(n_masks):
                given = self.kept[m] if spec.conditioning == "observational" else ()
                self.A[m], self.b[m], self.C[m] = gaussian_fill(fm, self.kept[m], given)
        elif spec.conditioning == "observational":
            self.A = np.empty((n_masks, n, n))
            self.b = np.empty((n_masks, n))
            self.L = np.empty((n_masks, n, n))
            for m in range(n_masks):
                A, b, C = gaussian_fill(fm, self.kept[m], self.kept[m])
                self.A[m], self.b[m], self.L[m] = A, b, _psd_sqrt(C)

    @property
    def n_masks(self) -> int:
        return 1 << len(self.players)

    def values(self, posterior: PosteriorState, x, y: float,
               config: ModelConfig | None = None, seed: int = 0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.spec.backend == "closed-form-gaussian":
            mu0, mu = _split(posterior, self.fm.n_features)
            resid = mu0 + (self.A @ x + self.b) @ mu - y
            return resid ** 2 + (self.C @ mu) @ mu
        return self._mc_values(posterior, x, y, config or ModelConfig(), seed)

    def _mc_values(self, posterior, x, y, config, seed):
        # common random numbers across coalitions within a step
        rng = np.random.default_rng(seed)
        n, fm = self.spec.mc_samples, self.fm
        out = np.empty(self.n_masks)
        if self.spec.conditioning == "interventional":
            if fm.background.shape[0] == 0:
                raise ValueError("monte-carlo interventional lift needs background rows")
            base = fm.background[rng.integers(0, fm.background.shape[0], n)]
            for m, kept in enumerate(self.kept):
                rows = base.copy()
                rows[:, kept] = x[kept]
                out[m] = _mc_scores(posterior, fm, rows, y, self.spec.rule, config).mean()
        else:
            z = rng.standard_normal((n, fm.n_features))
            for m in range(self.n_masks):
                rows = (self.A[m] @ x + self.b[m]) + z @ self.L[m].T
                out[m] = _mc_scores(posterior, fm, rows, y, self.spec.rule, config).mean()
        return out
