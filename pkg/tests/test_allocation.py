import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from oracles import banzhaf_by_subsets, phi_moments_mc, shapley_by_permutations
from regmarket.allocation import (
    GameOracle, GameSizeError, banzhaf, decompose_effects, diagnostics, average_effects,
    normalize, payout_fractions, robust_shapley, sample_permutations,
    shapley_density, shapley_exact, shapley_sampled, shapley_variance, tabular_game,
    variance_inflation,
)
from regmarket.bayes import PosteriorState
from regmarket.dataset import MarketData
from regmarket.lift import FeatureModel, LiftGame, LiftSpec


def games(max_players=6):
    return st.integers(1, max_players).flatmap(
        lambda n: st.lists(st.floats(-10, 10, allow_nan=False), min_size=1 << n, max_size=1 << n))


def table_value(table):
    def v(s):
        return table[sum(1 << i for i in s)]
    return v


@settings(max_examples=60, deadline=None)
@given(games())
def test_exact_matches_permutation_oracle(table):
    n = int(math.log2(len(table)))
    phi = shapley_exact(tabular_game(table)).vector()
    np.testing.assert_allclose(phi, shapley_by_permutations(table_value(table), n), atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(games())
def test_efficiency(table):
    phi = shapley_exact(tabular_game(table)).vector()
    assert phi.sum() == pytest.approx(table[0] - table[-1], abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(games(5), games(5))
def test_linearity(t1, t2):
    n = min(len(t1), len(t2))
    a, b = np.array(t1[:n]), np.array(t2[:n])
    lhs = shapley_exact(tabular_game(a + b)).vector()
    rhs = shapley_exact(tabular_game(a)).vector() + shapley_exact(tabular_game(b)).vector()
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_symmetry_and_null_player(n, seed):
    rng = np.random.default_rng(seed)
    # players 0 and 1 interchangeable, player n-1 null
    base = {}
    table = np.empty(1 << n)
    for m in range(1 << n):
        key = (bin(m & 3).count("1"), (m >> 2) & ((1 << max(n - 3, 0)) - 1) if n > 2 else 0)
        if key not in base:
            base[key] = rng.standard_normal()
        table[m] = base[key]
    phi = shapley_exact(tabular_game(table)).vector()
    assert phi[0] == pytest.approx(phi[1], abs=1e-9)
    if n > 2:
        assert phi[n - 1] == 0.0


@settings(max_examples=40, deadline=None)
@given(games(5))
def test_banzhaf_matches_subset_oracle(table):
    n = int(math.log2(len(table)))
    phi = banzhaf(tabular_game(table)).vector()
    np.testing.assert_allclose(phi, banzhaf_by_subsets(table_value(table), n), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_banzhaf_equals_shapley_for_two_players(table):
    g = tabular_game(table)
    np.testing.assert_allclose(banzhaf(g).vector(), shapley_exact(g).vector(), atol=1e-12)


def test_exhaustive_sampling_is_exact():
    rng = np.random.default_rng(0)
    g = tabular_game(rng.standard_normal(16))
    res = shapley_sampled(g, permutations=24, seed=0)
    np.testing.assert_allclose(res.vector(), shapley_exact(g).vector(), atol=1e-12)
    assert res.permutations_used == 24 and all(v == 0 for v in res.std_errors.values())


def test_sampling_is_deterministic_and_antithetic():
    g = tabular_game(np.random.default_rng(1).standard_normal(64))
    a = shapley_sampled(g, 100, seed=5)
    b = shapley_sampled(g, 100, seed=5)
    assert a.values == b.values
    perms = sample_permutations(6, 10, 3)
    assert perms[1] == perms[0][::-1]


def test_size_guard():
    g = GameOracle(lambda s: 0.0, tuple(range(21)))
    with pytest.raises(GameSizeError):
        shapley_exact(g)


def test_normalization_floors_and_rescales():
    np.testing.assert_allclose(normalize(np.array([2.0, -1.0, 2.0])), [0.5, 0, 0.5])
    assert normalize(np.array([-1.0, 0.0])).tolist() == [0.0, 0.0]
    # fractions never exceed the budget
    assert payout_fractions(np.array([3.0, 3.0]), np.array([1.0, 1.0])).sum() == pytest.approx(1.0)
    assert payout_fractions(np.array([0.2, 0.2]), np.array([1.0, 1.0])).sum() == pytest.approx(0.2)


def _dup_market(rng):
    a = rng.standard_normal(200)
    X = np.column_stack([a, a, rng.standard_normal(200)])
    return MarketData(np.arange(200), a, X, ("x1", "x1b", "x2"), "c", (),
                      {"s1": (0,), "s2": (1,), "s3": (2,)})


def test_robust_shapley():
    rng = np.random.default_rng(2)
    data = _dup_market(rng)
    g = tabular_game(rng.uniform(0, 1, 8) + np.array([3, 2, 2, 1, 2, 1, 1, 0]))
    shap = shapley_exact(g)
    same = robust_shapley(g, data, 0.0)
    np.testing.assert_allclose(same.vector(), shap.vector())
    rob = robust_shapley(g, data, 1.0)
    assert rob.values[0] < shap.values[0] and rob.values[1] < shap.values[1]
    assert sum(rob.payout.values()) < 1.0


def test_robust_shapley_orthogonal_features_unchanged():
    X = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    data = MarketData(np.arange(4), X[:, 0], X, ("a", "b"), "c", (), {"a": (0,), "b": (1,)})
    g = tabular_game([2.0, 1.0, 1.5, 0.0])
    np.testing.assert_allclose(robust_shapley(g, data, 3.0).vector(), shapley_exact(g).vector())


def _gaussian_game(rng, cov, conditioning="observational"):
    n = cov.shape[0]
    fm = FeatureModel(rng.standard_normal(n), cov)
    post = PosteriorState(rng.standard_normal(n + 1), np.eye(n + 1))
    return LiftGame(LiftSpec(conditioning=conditioning), post, fm,
                    rng.standard_normal(n), float(rng.standard_normal()))


def test_decomposition_confounded_null_weight():
    # w2 = 0 but x2 is confounded with x1: observational total > 0, direct = 0
    cov = np.array([[1.0, 0.9], [0.9, 1.0]])
    fm = FeatureModel(np.zeros(2), cov)
    post = PosteriorState(np.array([0.0, 1.0, 0.0]), np.eye(3))
    game = LiftGame(LiftSpec(conditioning="observational"), post, fm, np.array([1.5, 1.4]), 1.5)
    e = decompose_effects(game, [1, 0], 1)
    assert e.total > 0 and e.direct == pytest.approx(0.0, abs=1e-12)
    avg = average_effects(game, 1)
    assert avg.total == pytest.approx(shapley_exact(GameOracle(game.value_of, (0, 1))).values[1])


def test_diagnostics_kappa():
    H = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], float)
    assert variance_inflation(H[:, 1:]).tolist() == [1.0, 1.0, 1.0]
    X = np.random.default_rng(0).standard_normal((50, 2))
    assert np.all(np.isinf(variance_inflation(np.column_stack([X, X[:, 0]]))))


def test_diagnostics_report():
    rng = np.random.default_rng(3)
    fm = FeatureModel(np.zeros(2), np.diag([2.0, 0.5]))
    post = PosteriorState(np.array([0.1, 1.0, -0.5]), np.diag([10.0, 4.0, 8.0]))
    d = diagnostics(post, fm, rng.standard_normal((100, 2)))
    assert d.noncentrality[0] == pytest.approx(1.0 / 0.25)
    assert d.expected_phi[1] == pytest.approx(0.25 * 0.5)
    assert d.phi_variance[0] == pytest.approx(shapley_variance(1.0, 0.25, 2.0))


@pytest.mark.parametrize("mean_w,var_w,var_x", [(1.0, 0.2, 2.0), (0.0, 1.0, 0.5), (3.0, 0.5, 1.0)])
def test_density_matches_scipy_noncentral_chi2(mean_w, var_w, var_x):
    scale = var_w * var_x
    phi = np.linspace(0.01, 20, 50) * scale
    ref = stats.ncx2.pdf(phi / scale, df=1, nc=mean_w ** 2 / var_w) / scale \
        if mean_w else stats.chi2.pdf(phi / scale, df=1) / scale
    np.testing.assert_allclose(shapley_density(phi, mean_w, var_w, var_x), ref, rtol=1e-8)


def test_variance_formula_against_sampling():
    m, v = phi_moments_mc(0.8, 0.3, 1.5, 200_000, seed=0)
    assert v == pytest.approx(shapley_variance(0.8, 0.3, 1.5), rel=0.05)
    assert m == pytest.approx((0.8 ** 2 + 0.3) * 1.5, rel=0.02)
