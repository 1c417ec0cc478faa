"""Regression markets with replication-robust revenue allocation."""

from .attack import AttackScenario, apply_attack, evaluate_robustness, replication_curve
from .bayes import ModelConfig, PosteriorState, init_posterior, predict, score, update
from .dataset import MarketData, SyntheticSpec, generate_confounded, ingest_csv
from .lift import FeatureModel, LiftSpec, eval_lift
from .market import MarketTask, known_model_from_spec, run_market

__version__ = "0.1.0"

__all__ = [
    "AttackScenario", "FeatureModel", "LiftSpec", "MarketData", "MarketTask",
    "ModelConfig", "PosteriorState", "SyntheticSpec", "apply_attack", "eval_lift",
    "evaluate_robustness", "generate_confounded", "ingest_csv", "init_posterior",
    "known_model_from_spec", "predict", "replication_curve", "run_market", "score",
    "update",
]
