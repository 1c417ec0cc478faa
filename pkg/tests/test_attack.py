import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regmarket.allocation import shapley_weights
from regmarket.attack import (
    AttackError, AttackScenario, apply_attack, attack_known, classify, curve_series,
    evaluate_robustness, replication_curve, write_curve, write_curve_wide,
)
from regmarket.bayes import ModelConfig
from regmarket.dataset import SyntheticSpec, generate_confounded
from regmarket.lift import CoalitionTable, LiftSpec
from regmarket.market import MarketTask, known_model_from_spec

CFG = ModelConfig()


def instance(length=400, n_central=0, weights=(1.0, 1.0)):
    spec = SyntheticSpec(true_weights=(0.0,) * n_central + tuple(weights), n_central=n_central,
                         feature_noise_std=0.1, length=length)
    return spec, generate_confounded(spec, 0), known_model_from_spec(spec, CFG)


def test_apply_attack_shapes():
    _, data, _ = instance(50, n_central=1)
    assert apply_attack(data, AttackScenario("a1", {"x1": 0}), 0) is data
    out = apply_attack(data, AttackScenario("a1", {"x1": 4}), 0)
    assert out.n_features == data.n_features + 4
    pseudo = [a for a, o in out.aliases.items() if o == "a1"]
    assert len(pseudo) == 4
    assert {out.true_agent(a) for a in pseudo} == {"a1"}


def test_zero_noise_gives_exact_duplicates():
    _, data, _ = instance(50)
    out = apply_attack(data, AttackScenario("a2", {"x2": 2}, replicate_noise_std=0.0), 0)
    np.testing.assert_array_equal(out.features[:, 2], out.features[:, 1])
    np.testing.assert_array_equal(out.features[:, 3], out.features[:, 1])


def test_invalid_scenarios():
    _, data, _ = instance(50, n_central=1)
    with pytest.raises(AttackError):
        apply_attack(data, AttackScenario("a1", {"c1": 1}), 0)
    with pytest.raises(AttackError):
        apply_attack(data, AttackScenario("a1", {"x2": 1}), 0)
    with pytest.raises(AttackError):
        AttackScenario("a1", {"x1": -1})


def test_classification_rules():
    assert classify({"a": 0.0, "b": 1e-9}, "a", 1e-6) == "strict"
    assert classify({"a": -0.1, "b": 0.05}, "a", 1e-6) == "weak"
    assert classify({"a": 0.1, "b": -0.1}, "a", 1e-6) == "not-robust"


@pytest.mark.parametrize("K", [1, 3])
def test_observational_attack_pays(K):
    _, data, known = instance(2000)
    task = MarketTask(lift=LiftSpec(conditioning="observational"))
    v = evaluate_robustness(task, data, AttackScenario("a2", {"x2": K}), known=known)
    assert v.classification == "not-robust"
    share = v.attacked_rewards["a2"] / v.attacked_revenue
    assert share == pytest.approx((1 + K) / (2 + K), abs=0.02)


def test_interventional_attack_is_strict():
    _, data, known = instance(500, n_central=1)
    task = MarketTask(lift=LiftSpec(conditioning="interventional"))
    v = evaluate_robustness(task, data, AttackScenario("a1", {"x1": 3}), known=known)
    assert v.classification == "strict" and v.max_abs_delta <= 1e-6


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_replicates_get_no_interventional_value(D, K, seed):
    rng = np.random.default_rng(seed)
    spec = SyntheticSpec(true_weights=tuple(rng.uniform(-2, 2, D)),
                         latent_confounder_strength=tuple(rng.uniform(0, 2, D)),
                         replicate_plan={"x1": (K, float(rng.uniform(0.01, 1)))}, length=50)
    data = generate_confounded(spec, seed)
    known = known_model_from_spec(spec, CFG)
    table = CoalitionTable(known.features, LiftSpec(conditioning="interventional"))
    W = shapley_weights(len(table.players))
    for t in range(5):
        phi = W(table.values(known.full, data.features[t], data.target[t]))
        assert np.all(np.abs(phi[D:]) <= 1e-8)


def test_curve_and_exports(tmp_path):
    _, data, known = instance(300)
    task = MarketTask()
    points = replication_curve(task, data, "a2", 2, known=known,
                               methods=("observational-shapley", "interventional-shapley"))
    series = curve_series(points, "a2")
    obs, inter = series["observational-shapley"], series["interventional-shapley"]
    assert obs[0] < obs[1] < obs[2]
    assert max(inter) - min(inter) <= 1e-9
    write_curve(points, tmp_path / "c.csv")
    rows = list(csv.reader((tmp_path / "c.csv").open()))
    assert rows[0] == ["method", "K", "agent", "reward_share", "classification"]
    assert len(rows) == 1 + 2 * 3 * 2
    write_curve_wide(points, "a2", tmp_path / "w.csv")
    wide = list(csv.reader((tmp_path / "w.csv").open()))
    assert wide[0] == ["K", "observational-shapley", "interventional-shapley"] and len(wide) == 4


def test_attack_known_matches_data_layout():
    spec, data, known = instance(50)
    sc = AttackScenario("a1", {"x1": 2}, replicate_noise_std=0.5)
    kn = attack_known(known, data, sc)
    assert kn.features.n_features == apply_attack(data, sc, 0).n_features
    assert kn.features.covariance[2, 2] == pytest.approx(known.features.covariance[0, 0] * 1.25)
    assert kn.full.mean[-2:].tolist() == [0.0, 0.0]
