"""Semivalues over feature coalitions, effect decomposition and diagnostics.

Games are negatively oriented: a coalition's value is a loss, and the
marginal contribution of player ``i`` to coalition ``S`` is
``v(S) - v(S | {i})``, positive when adding ``i`` lowers the loss.
Coalitions are indexed by bitmask over the ordered player tuple.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .bayes import PosteriorState
from .dataset import MarketData
from .lift import FeatureModel, LiftGame, UnsupportedBackendError

METHODS = ("shapley-exact", "shapley-sampled", "banzhaf", "robust-shapley")
MAX_EXACT_PLAYERS = 20


class GameSizeError(ValueError):
    pass


@dataclass(frozen=True)
class GameOracle:
    value_of: Callable[[frozenset], float]
    players: tuple[int, ...]


def tabular_game(values: Sequence[float], players: Sequence[int] | None = None) -> GameOracle:
    """Game defined by a table indexed by coalition bitmask."""
    values = np.asarray(values, dtype=float)
    n = int(round(math.log2(values.size)))
    if 1 << n != values.size:
        raise ValueError("table length must be a power of two")
    players = tuple(players) if players is not None else tuple(range(n))
    bit = {p: k for k, p in enumerate(players)}

    def value_of(coalition) -> float:
        return float(values[sum(1 << bit[p] for p in coalition)])

    return GameOracle(value_of, players)


@dataclass(frozen=True)
class AllocationResult:
    """Per-feature values plus the fractions of revenue they translate to.

    ``normalized`` floors negative values at zero and rescales to sum to one
    (all zeros if nothing is positive). ``payout`` is the fraction of revenue
    actually paid to each feature: identical to ``normalized`` for Shapley
    methods, and scaled against the floored Shapley total for Banzhaf and
    Robust-Shapley, which do not distribute the whole budget.
    """

    values: Mapping[int, float]
    method: str
    normalized: Mapping[int, float]
    payout: Mapping[int, float]
    permutations_used: int | None = None
    std_errors: Mapping[int, float] | None = None

    def vector(self) -> np.ndarray:
        return np.array(list(self.values.values()))


def normalize(values: np.ndarray) -> np.ndarray:
    pos = np.clip(values, 0.0, None)
    total = pos.sum()
    return pos / total if total > 0 else np.zeros_like(pos)


def payout_fractions(values: np.ndarray, shapley: np.ndarray) -> np.ndarray:
    denom = np.clip(shapley, 0.0, None).sum()
    if denom <= 0:
        return np.zeros_like(values)
    out = np.clip(values, 0.0, None) / denom
    total = out.sum()
    return out / total if total > 1.0 else out


def _result(players, phi, method, shapley=None, **extra) -> AllocationResult:
    shapley = phi if shapley is None else shapley
    as_map = lambda a: {p: float(v) for p, v in zip(players, a)}
    return AllocationResult(
        values=as_map(phi), method=method, normalized=as_map(normalize(phi)),
        payout=as_map(payout_fractions(phi, shapley)), **extra,
    )


# ---------------------------------------------------------------------------
# Linear operators on coalition tables


def popcounts(n_players: int) -> np.ndarray:
    masks = np.arange(1 << n_players)
    return np.array([bin(m).count("1") for m in masks])


@dataclass(frozen=True)
class PairWeights:
    """A semivalue as weights on marginal contributions.

    Row ``i`` of ``without`` lists every coalition mask lacking player ``i``;
    the value of ``i`` is ``sum(weights[i] * (table[S] - table[S | i]))``.
    Summing differences (rather than signed table entries) keeps a null
    player's value exactly zero.
    """

    without: np.ndarray
    weights: np.ndarray

    @property
    def n_players(self) -> int:
        return self.without.shape[0]

    def __call__(self, table) -> np.ndarray:
        table = np.asarray(table, dtype=float)
        bits = (1 << np.arange(self.n_players))[:, None]
        diffs = table[self.without] - table[self.without | bits]
        return np.einsum("ij,ij->i", self.weights, diffs)


def _without(n_players: int) -> np.ndarray:
    masks = np.arange(1 << n_players)
    return np.array([masks[(masks >> i) & 1 == 0] for i in range(n_players)]).reshape(
        n_players, -1)


def shapley_weights(n_players: int) -> PairWeights:
    """Exact Shapley value: weight ``|S|! (D - |S| - 1)! / D!`` per coalition."""
    D = n_players
    w = np.array([math.factorial(s) * math.factorial(D - s - 1) / math.factorial(D)
                  for s in range(D)])
    without = _without(D)
    return PairWeights(without, w[popcounts(D)[without]])


def banzhaf_weights(n_players: int) -> PairWeights:
    without = _without(n_players)
    return PairWeights(without, np.full(without.shape, 2.0 ** -(n_players - 1)))


def sample_permutations(n_players: int, count: int, seed: int,
                        antithetic: bool = True) -> list[tuple[int, ...]]:
    """Uniform random orderings of ``range(n_players)``.

    When ``count`` equals ``n_players!`` every ordering is returned once;
    any other count draws orderings independently (with replacement). With
    ``antithetic`` each drawn ordering is followed by its reverse.
    """
    if count < 1:
        raise ValueError("need at least one permutation")
    if count == math.factorial(n_players):
        return list(itertools.permutations(range(n_players)))
    rng = np.random.default_rng(seed)
    perms: list[tuple[int, ...]] = []
    while len(perms) < count:
        p = tuple(int(v) for v in rng.permutation(n_players))
        perms.append(p)
        if antithetic:
            perms.append(p[::-1])
    return perms


def permutation_weights(perms: Sequence[Sequence[int]], n_players: int) -> PairWeights:
    """Empirical Shapley weights of a fixed set of orderings."""
    without = _without(n_players)
    W = np.zeros((n_players, 1 << n_players))
    for p in perms:
        mask = 0
        for i in p:
            W[i, mask] += 1.0
            mask |= 1 << i
    rows = np.arange(n_players)[:, None]
    return PairWeights(without, W[rows, without] / len(perms))


def game_table(game: GameOracle) -> np.ndarray:
    D = len(game.players)
    if D > MAX_EXACT_PLAYERS:
        raise GameSizeError(
            f"{D} players is beyond exact enumeration ({MAX_EXACT_PLAYERS}); "
            "use shapley_sampled instead")
    return np.array([
        game.value_of(frozenset(p for k, p in enumerate(game.players) if m >> k & 1))
        for m in range(1 << D)
    ])


# ---------------------------------------------------------------------------
# Solution concepts


def shapley_exact(game: GameOracle) -> AllocationResult:
    table = game_table(game)
    phi = shapley_weights(len(game.players))(table)
    return _result(game.players, phi, "shapley-exact")


def shapley_sampled(game: GameOracle, permutations: int, seed: int,
                    antithetic: bool = True) -> AllocationResult:
    """Permutation-sampling estimate with per-feature standard errors.

    Standard errors treat each antithetic pair (or each single ordering) as
    one independent draw.
    """
    D = len(game.players)
    perms = sample_permutations(D, permutations, seed, antithetic)
    exhaustive = permutations == math.factorial(D)
    cache: dict[int, float] = {}

    def v(mask: int) -> float:
        if mask not in cache:
            cache[mask] = game.value_of(
                frozenset(p for k, p in enumerate(game.players) if mask >> k & 1))
        return cache[mask]

    deltas = np.zeros((len(perms), D))
    for r, p in enumerate(perms):
        mask = 0
        for i in p:
            before = v(mask)
            mask |= 1 << i
            deltas[r, i] = before - v(mask)
    phi = deltas.mean(axis=0)
    if exhaustive:
        se = np.zeros(D)
    else:
        units = deltas.reshape(-1, 2, D).mean(axis=1) if antithetic else deltas
        se = units.std(axis=0, ddof=1) / math.sqrt(units.shape[0]) if units.shape[0] > 1 \
            else np.full(D, np.inf)
    return _result(
        game.players, phi, "shapley-sampled", permutations_used=len(perms),
        std_errors={p: float(s) for p, s in zip(game.players, se)},
    )


def banzhaf(game: GameOracle) -> AllocationResult:
    table = game_table(game)
    D = len(game.players)
    phi = banzhaf_weights(D)(table)
    return _result(game.players, phi, "banzhaf", shapley=shapley_weights(D)(table))


def similarity_matrix(X: np.ndarray, kind: str = "pearson") -> np.ndarray:
    """Absolute pairwise similarity between the columns of ``X``."""
    X = np.asarray(X, dtype=float)
    if kind == "pearson":
        Xc = X - X.mean(axis=0)
    elif kind == "cosine":
        Xc = X
    else:
        raise ValueError(f"unknown similarity {kind!r}")
    norms = np.linalg.norm(Xc, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    S = (Xc.T @ Xc) / np.outer(safe, safe)
    S[norms == 0, :] = 0.0
    S[:, norms == 0] = 0.0
    return np.abs(S)


def similarity_penalty(X: np.ndarray, gamma: float, kind: str = "pearson") -> np.ndarray:
    """``exp(-gamma * sum_{j != i} sim(i, j))`` for every column ``i``."""
    if not math.isfinite(gamma) or gamma < 0:
        raise ValueError("gamma must be finite and non-negative")
    S = similarity_matrix(X, kind)
    np.fill_diagonal(S, 0.0)
    return np.exp(-gamma * S.sum(axis=1))


def robust_shapley(game: GameOracle, data: MarketData, gamma: float,
                   similarity: str = "pearson",
                   window: tuple[int, int] | None = None) -> AllocationResult:
    start, stop = window if window is not None else (0, data.n_steps)
    X = data.features[start:stop][:, list(game.players)]
    penalty = similarity_penalty(X, gamma, similarity)
    table = game_table(game)
    shap = shapley_weights(len(game.players))(table)
    return _result(game.players, shap * penalty, "robust-shapley", shapley=shap)


# ---------------------------------------------------------------------------
# Direct and indirect effects


@dataclass(frozen=True)
class EffectDecomposition:
    total: float
    direct: float
    indirect: float


def decompose_effects(game: LiftGame, permutation: Sequence[int], feature: int) -> EffectDecomposition:
    """Split one marginal contribution into direct and indirect parts.

    With ``P`` the features preceding ``feature`` in ``permutation``: the
    direct part adds ``feature`` while the remaining features keep their
    law given ``P``; the indirect part is the change in that law once
    ``feature`` is also conditioned on.
    """
    if game.spec.backend != "closed-form-gaussian":
        raise UnsupportedBackendError("effect decomposition needs the closed-form backend")
    order = list(permutation)
    if feature not in order:
        raise ValueError("feature must appear in the permutation")
    prefix = order[:order.index(feature)]
    with_i = prefix + [feature]
    given = prefix if game.spec.conditioning == "observational" else []
    before = game.value_of(prefix)
    after = game.value_of(with_i)
    held = game.hybrid_value(with_i, given)
    return EffectDecomposition(before - after, before - held, held - after)


def average_effects(game: LiftGame, feature: int) -> EffectDecomposition:
    """Decomposition averaged over all orderings (Shapley weighting)."""
    others = [p for p in game.players if p != feature]
    D = len(game.players)
    total = direct = indirect = 0.0
    for size in range(D):
        w = math.factorial(size) * math.factorial(D - size - 1) / math.factorial(D)
        for prefix in itertools.combinations(others, size):
            e = decompose_effects(game, list(prefix) + [feature], feature)
            total += w * e.total
            direct += w * e.direct
            indirect += w * e.indirect
    return EffectDecomposition(total, direct, indirect)


# ---------------------------------------------------------------------------
# Diagnostics


@dataclass(frozen=True)
class ShapleyDiagnostics:
    kappa: Mapping[int, float]
    phi_variance: Mapping[int, float]
    noncentrality: Mapping[int, float]
    expected_phi: Mapping[int, float]


def variance_inflation(design: np.ndarray, cond_limit: float = 1e12) -> np.ndarray:
    """Diagonal of the inverse Gram matrix of the standardized design.

    Returns ``inf`` for every column when the Gram matrix is singular.
    """
    X = np.asarray(design, dtype=float)
    sd = X.std(axis=0)
    if np.any(sd == 0):
        return np.full(X.shape[1], np.inf)
    Z = (X - X.mean(axis=0)) / sd
    R = Z.T @ Z / Z.shape[0]
    eig = np.linalg.eigvalsh(R)
    if eig.min() <= eig.max() / cond_limit:
        return np.full(X.shape[1], np.inf)
    return np.diag(np.linalg.inv(R)).copy()


def shapley_variance(mean_w, var_w, var_x):
    """Variance of ``w**2 * var_x`` for ``w ~ N(mean_w, var_w)``."""
    return 2.0 * var_w * (2.0 * mean_w ** 2 + var_w) * var_x ** 2


def shapley_density(phi, mean_w: float, var_w: float, var_x: float, tol: float = 1e-14):
    """Density of ``w**2 * var_x`` as a Poisson mixture of central chi-squares."""
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    scale = var_w * var_x
    u = phi / scale
    half = 0.5 * mean_w ** 2 / var_w
    out = np.zeros_like(u)
    pos = u > 0
    n_max = int(half + 12 * math.sqrt(half + 1) + 40)
    with np.errstate(divide="ignore"):
        logu = np.log(u[pos])
    for n in range(n_max + 1):
        k = 1 + 2 * n
        log_pois = -half + (n * math.log(half) if half > 0 else (0.0 if n == 0 else -np.inf)) \
            - math.lgamma(n + 1)
        if not np.isfinite(log_pois):
            continue
        log_chi = (k / 2 - 1) * logu - u[pos] / 2 - (k / 2) * math.log(2) - math.lgamma(k / 2)
        out[pos] += np.exp(log_pois + log_chi)
        if n > half and math.exp(log_pois) < tol:
            break
    return out / scale


def diagnostics(posterior: PosteriorState, fm: FeatureModel, design: np.ndarray) -> ShapleyDiagnostics:
    """Collinearity and posterior-uncertainty diagnostics per feature.

    ``design`` is a window of the feature matrix (rows are time steps).
    """
    design = np.asarray(design, dtype=float)
    if design.shape[0] == 0:
        raise ValueError("design window is empty")
    n = fm.n_features
    offset = posterior.dimension - n
    cov_w = posterior.covariance
    mean_w = posterior.mean[offset:]
    var_w = np.diag(cov_w)[offset:]
    var_x = np.diag(fm.covariance)
    kappa = variance_inflation(design)
    cols = range(n)
    return ShapleyDiagnostics(
        kappa={i: float(kappa[i]) for i in cols},
        phi_variance={i: float(shapley_variance(mean_w[i], var_w[i], var_x[i])) for i in cols},
        noncentrality={i: float(mean_w[i] ** 2 / var_w[i]) for i in cols},
        expected_phi={i: float(mean_w[i] ** 2 * var_x[i]) for i in cols},
    )
