"""Online two-stage market clearing.

Each time step scores a central-only model and a model with every support
feature, turns the tracked loss improvement into revenue, values every
support feature through the configured lift and semivalue, and pays each
agent the revenue share of the features it owns.

In the in-sample stage the posteriors absorb the observation before it is
scored. In the out-of-sample stage the step is scored with the forecast
made before the observation arrived, and only then absorbed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .allocation import (
    METHODS, banzhaf_weights, payout_fractions, permutation_weights,
    sample_permutations, shapley_weights, similarity_penalty,
)
from .bayes import (
    LossTracker, ModelConfig, PosteriorState, init_posterior, predict, score,
    track_loss, update,
)
from .dataset import MarketData, SyntheticSpec, population_moments
from .lift import CoalitionTable, FeatureModel, LiftSpec, fit_feature_model, mask_members

STAGES = ("in-sample", "out-of-sample")
BUDGET_BALANCED = ("shapley-exact", "shapley-sampled")


class StepRejected(ArithmeticError):
    pass


class BudgetError(AssertionError):
    pass


@dataclass(frozen=True)
class MarketTask:
    """Everything needed to clear one buyer's market.

    ``coalition_values`` selects how coalitions are scored: ``"lift"``
    evaluates the full model with absent features integrated out, and
    ``"retrain"`` keeps one online model per coalition. Windows are
    ``(start, stop)`` row ranges; ``None`` splits the data in half. The
    first ``warmup`` training rows only update the online posteriors, so
    clearing starts from a model that has seen some data.
    """

    valuation: float = 0.5
    model: ModelConfig = field(default_factory=ModelConfig)
    lift: LiftSpec = field(default_factory=LiftSpec)
    allocation_method: str = "shapley-exact"
    train_window: tuple[int, int] | None = None
    test_window: tuple[int, int] | None = None
    permutations: int = 200
    gamma: float = 1.0
    similarity: str = "pearson"
    coalition_values: str = "lift"
    update_in_test: bool = True
    warmup: int = 0
    seed: int = 0

    def __post_init__(self):
        errors = self.problems()
        if errors:
            raise ValueError("; ".join(errors))

    def problems(self) -> list[str]:
        out = []
        if not (self.valuation >= 0 and math.isfinite(self.valuation)):
            out.append("valuation must be a finite non-negative number")
        if self.allocation_method not in METHODS:
            out.append(f"allocation_method must be one of {METHODS}")
        if self.coalition_values not in ("lift", "retrain"):
            out.append("coalition_values must be 'lift' or 'retrain'")
        if self.warmup < 0:
            out.append("warmup must be >= 0")
        if self.permutations < 1:
            out.append("permutations must be >= 1")
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            out.append("gamma must be finite and non-negative")
        if self.similarity not in ("pearson", "cosine"):
            out.append("similarity must be 'pearson' or 'cosine'")
        for name in ("train_window", "test_window"):
            w = getattr(self, name)
            if w is not None and not (len(w) == 2 and 0 <= w[0] < w[1]):
                out.append(f"{name} must be an increasing (start, stop) pair")
        tw, sw = self.train_window, self.test_window
        if tw is not None and sw is not None and tw[1] > sw[0]:
            out.append("train_window must end before test_window starts")
        return out

    def windows(self, n_steps: int) -> tuple[tuple[int, int], tuple[int, int]]:
        half = n_steps // 2
        train = self.train_window or (0, half)
        test = self.test_window or (train[1], n_steps)
        if train[0] + self.warmup >= train[1]:
            raise ValueError(f"warmup of {self.warmup} rows leaves no training steps to clear")
        if train[1] > n_steps or test[1] > n_steps or train[1] <= train[0] or test[1] <= test[0]:
            raise ValueError(f"windows {train}, {test} do not fit {n_steps} rows")
        return tuple(train), tuple(test)


@dataclass(frozen=True)
class KnownModel:
    """Fixed coefficients and feature law, bypassing online estimation."""

    full: PosteriorState
    central: PosteriorState
    features: FeatureModel

    def with_replicates(self, sources: Sequence[tuple[int, float]]) -> "KnownModel":
        """Append replicate columns ``source + noise`` with zero coefficient.

        ``sources`` lists ``(source column, noise variance)`` in the order
        the replicate columns were appended to the data.
        """
        fm = self.features
        n = fm.n_features
        m = n + len(sources)
        lift = np.zeros((m, n))
        lift[:n, :n] = np.eye(n)
        for r, (src, _) in enumerate(sources):
            lift[n + r, src] = 1.0
        cov = lift @ fm.covariance @ lift.T
        for r, (_, var) in enumerate(sources):
            cov[n + r, n + r] += var
        mean = lift @ fm.mean
        bg = fm.background @ lift.T if fm.background.size else fm.background
        features = FeatureModel(mean, cov, fm.central, bg)
        extra = len(sources)
        full_mean = np.concatenate([self.full.mean, np.zeros(extra)])
        prec = np.eye(self.full.dimension + extra)
        prec[:self.full.dimension, :self.full.dimension] = self.full.precision
        return KnownModel(PosteriorState(full_mean, prec), self.central, features)


def known_model_from_spec(spec: SyntheticSpec, config: ModelConfig) -> KnownModel:
    """Population coefficients and feature law of a synthetic generator."""
    mean, cov, coef = population_moments(spec)
    central = list(range(spec.n_central))
    if not central and not config.include_intercept:
        raise ValueError("the central-only model needs an intercept or central features")
    if central:
        S_cc = cov[np.ix_(central, central)]
        central_coef = np.linalg.solve(S_cc, cov[central] @ coef)
    else:
        central_coef = np.zeros(0)

    def posterior(c, cols):
        second = cov[np.ix_(cols, cols)] + np.outer(mean[cols], mean[cols])
        if config.include_intercept:
            c = np.concatenate([[0.0], c])
            k = len(cols) + 1
            second_aug = np.eye(k)
            second_aug[1:, 1:] = second
            second_aug[0, 1:] = second_aug[1:, 0] = mean[cols]
            second = second_aug
        prec = config.noise_precision * spec.length * second + \
            config.prior_precision * np.eye(len(c))
        return PosteriorState(c, prec)

    full = posterior(coef, list(range(len(coef))))
    cen = posterior(central_coef, central)
    return KnownModel(full, cen, FeatureModel(mean, cov, tuple(central)))


@dataclass(frozen=True)
class LedgerEntry:
    t: int
    stage: str
    revenue: float
    rewards: Mapping[str, float]
    loss_base: float
    loss_full: float
    payout: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class StageSummary:
    steps: int
    mean_loss_base: float
    mean_loss_full: float
    improvement_pct: float
    revenue: float
    rewards: Mapping[str, float]
    allocation: Mapping[str, float]


@dataclass(frozen=True)
class MarketSummary:
    stages: Mapping[str, StageSummary]
    aliases: Mapping[str, str]

    @property
    def revenue(self) -> float:
        return sum(s.revenue for s in self.stages.values())

    def rewards(self, fold: bool = True) -> dict[str, float]:
        out: dict[str, float] = {}
        for s in self.stages.values():
            for a, r in s.rewards.items():
                key = _fold(a, self.aliases) if fold else a
                out[key] = out.get(key, 0.0) + r
        return out

    def shares(self, fold: bool = True) -> dict[str, float]:
        """Cumulative reward of each agent as a fraction of cumulative revenue."""
        total = self.revenue
        return {a: (r / total if total > 0 else 0.0) for a, r in self.rewards(fold).items()}


def _fold(agent: str, aliases: Mapping[str, str]) -> str:
    while agent in aliases:
        agent = aliases[agent]
    return agent


@dataclass(frozen=True)
class MarketRun:
    ledger: list[LedgerEntry]
    summary: MarketSummary
    task: MarketTask


class MarketEngine:
    """Mutable clearing state for one market; single writer."""

    def __init__(self, task: MarketTask, data: MarketData, known: KnownModel | None = None):
        self.task, self.data, self.known = task, data, known
        self.train, self.test = task.windows(data.n_steps)
        cfg = task.model
        self.players = data.support
        self.central = list(data.central)
        self.owner = {i: data.owner_of(i) for i in self.players}
        D = len(self.players)

        if known is not None:
            self.fm = known.features
            self.full, self.base = known.full, known.central
        else:
            if not self.central and not cfg.include_intercept:
                raise ValueError("the central-only model needs an intercept or central features")
            self.fm = fit_feature_model(data, self.train, seed=task.seed)
            self.full = init_posterior(cfg, data.n_features + cfg.include_intercept)
            self.base = init_posterior(cfg, len(self.central) + cfg.include_intercept)

        if task.coalition_values == "lift":
            self.table = CoalitionTable(self.fm, task.lift, self.players)
        else:
            if known is not None:
                raise ValueError("retrained coalitions need online estimation")
            self.table = None
            self.coalition_cols = [
                sorted(self.central + mask_members(m, self.players)) for m in range(1 << D)]
            self.coalition_post = [
                init_posterior(cfg, len(c) + cfg.include_intercept) for c in self.coalition_cols]

        self.W_shapley = shapley_weights(D)
        method = task.allocation_method
        if method == "shapley-exact" or method == "robust-shapley":
            self.W = self.W_shapley
        elif method == "banzhaf":
            self.W = banzhaf_weights(D)
        else:
            perms = sample_permutations(D, task.permutations, task.seed)
            self.W = permutation_weights(perms, D)
            self.W_shapley = self.W
        self.penalty = np.ones(D)
        if method == "robust-shapley":
            X = data.features[self.train[0]:self.train[1]][:, list(self.players)]
            self.penalty = similarity_penalty(X, task.gamma, task.similarity)
        self.reset_stage()

    def reset_stage(self) -> None:
        tau = self.task.model.forgetting
        self.loss_base = LossTracker(tau)
        self.loss_full = LossTracker(tau)
        self.phi = None
        self.phi_ref = None

    def warm_up(self) -> int:
        """Absorb the warm-up rows; returns the first row to clear."""
        start = self.train[0]
        if self.known is None:
            for t in range(start, start + self.task.warmup):
                self._absorb(self.data.features[t], float(self.data.target[t]))
        return start + self.task.warmup

    def _absorb(self, x, y) -> None:
        cfg = self.task.model
        self.full = update(self.full, cfg.design(x), y, cfg)
        self.base = update(self.base, cfg.design(x[self.central]), y, cfg)
        if self.table is None:
            self.coalition_post = [
                update(p, cfg.design(x[c]), y, cfg)
                for p, c in zip(self.coalition_post, self.coalition_cols)]

    def _game(self, x, y, t) -> np.ndarray:
        cfg, rule = self.task.model, self.task.lift.rule
        if self.table is not None:
            return self.table.values(self.full, x, y, cfg, seed=(self.task.seed, t))
        return np.array([
            score(predict(p, cfg.design(x[c]), cfg), y, rule)
            for p, c in zip(self.coalition_post, self.coalition_cols)])

    def clear_step(self, x, y: float, stage: str, t: int) -> LedgerEntry:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        x = np.asarray(x, dtype=float)
        cfg, task = self.task.model, self.task
        online = self.known is None
        if online and stage == "in-sample":
            self._absorb(x, y)

        rule = task.lift.rule
        step_full = score(predict(self.full, cfg.design(x), cfg), y, rule)
        step_base = score(predict(self.base, cfg.design(x[self.central]), cfg), y, rule)
        values = self._game(x, y, t)
        if not (math.isfinite(step_full) and math.isfinite(step_base)
                and np.all(np.isfinite(values))):
            raise StepRejected(f"t={t}: non-finite loss (base={step_base}, full={step_full})")

        self.loss_base = track_loss(self.loss_base, step_base)
        self.loss_full = track_loss(self.loss_full, step_full)
        ref = self.W_shapley(values)
        phi = ref * self.penalty if task.allocation_method == "robust-shapley" else self.W(values)
        tau = cfg.forgetting
        if self.phi is None:
            self.phi, self.phi_ref = phi, ref
        else:
            self.phi = (1 - tau) * phi + tau * self.phi
            self.phi_ref = (1 - tau) * ref + tau * self.phi_ref

        gain = self.loss_base.value - self.loss_full.value
        revenue = task.valuation * max(0.0, gain)
        fractions = payout_fractions(self.phi, self.phi_ref)
        if not np.any(fractions > 0):
            revenue = 0.0
        rewards = {a: 0.0 for a in self.data.ownership}
        payout = {}
        for i, frac in zip(self.players, fractions):
            rewards[self.owner[i]] += revenue * frac
            payout[self.data.columns[i]] = float(frac)
        entry = LedgerEntry(t, stage, revenue, rewards, self.loss_base.value,
                            self.loss_full.value, payout)
        check_budget(entry, task.allocation_method)

        if online and stage == "out-of-sample" and task.update_in_test:
            self._absorb(x, y)
        return (entry, step_base, step_full)


def check_budget(entry: LedgerEntry, method: str, tol: float = 1e-9) -> None:
    paid = sum(entry.rewards.values())
    slack = tol * max(1.0, abs(entry.revenue))
    if any(r < -slack for r in entry.rewards.values()):
        raise BudgetError(f"t={entry.t}: negative reward")
    if method in BUDGET_BALANCED and entry.revenue > 0 and abs(paid - entry.revenue) > slack:
        raise BudgetError(f"t={entry.t}: rewards {paid} != revenue {entry.revenue}")
    if paid > entry.revenue + slack:
        raise BudgetError(f"t={entry.t}: rewards {paid} exceed revenue {entry.revenue}")


def clear_step(engine: MarketEngine, x, y: float, stage: str, t: int) -> LedgerEntry:
    return engine.clear_step(x, y, stage, t)[0]


def run_market(task: MarketTask, data: MarketData, known: KnownModel | None = None) -> MarketRun:
    """Clear the training window in-sample, then the test window out-of-sample."""
    engine = MarketEngine(task, data, known)
    ledger: list[LedgerEntry] = []
    stages = {}
    first_row = engine.warm_up()
    windows = ((first_row, engine.train[1]), engine.test)
    for stage, (start, stop) in zip(STAGES, windows):
        if stop <= start:
            raise ValueError(f"empty {stage} window")
        engine.reset_stage()
        base, full = [], []
        first = len(ledger)
        for t in range(start, stop):
            entry, b, f = engine.clear_step(data.features[t], float(data.target[t]), stage, t)
            ledger.append(entry)
            base.append(b)
            full.append(f)
        entries = ledger[first:]
        mb, mf = float(np.mean(base)), float(np.mean(full))
        rewards = {a: sum(e.rewards[a] for e in entries) for a in data.ownership}
        last = entries[-1].payout
        allocation = {a: sum(last[data.columns[i]] for i in idx)
                      for a, idx in data.ownership.items()}
        stages[stage] = StageSummary(
            steps=stop - start, mean_loss_base=mb, mean_loss_full=mf,
            improvement_pct=100.0 * (mb - mf) / mb if mb > 0 else 0.0,
            revenue=sum(e.revenue for e in entries), rewards=rewards, allocation=allocation,
        )
    return MarketRun(ledger, MarketSummary(stages, dict(data.aliases)), task)


def write_ledger(ledger: Sequence[LedgerEntry], path: str | Path,
                 agents: Sequence[str] | None = None) -> None:
    """CSV with ``t, stage, revenue, loss_base, loss_full, reward_<agent>...``."""
    if agents is None:
        agents = list(ledger[0].rewards) if ledger else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "stage", "revenue", "loss_base", "loss_full",
                    *(f"reward_{a}" for a in agents)])
        for e in ledger:
            w.writerow([e.t, e.stage, repr(e.revenue), repr(e.loss_base), repr(e.loss_full),
                        *(repr(float(e.rewards.get(a, 0.0))) for a in agents)])
