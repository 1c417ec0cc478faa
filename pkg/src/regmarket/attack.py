"""Replication attacks and robustness verdicts.

An attacker appends noisy copies of its own features, each submitted under
a fresh pseudo-identity. Rewards paid to a pseudo-identity are folded back
into the attacker when comparing honest and attacked markets.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import MarketData
from .market import KnownModel, MarketTask, run_market

CLASSIFICATIONS = ("strict", "weak", "not-robust")
CURVE_METHODS = ("observational-shapley", "interventional-shapley", "robust-shapley", "banzhaf")


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackScenario:
    """Replicate plan of one attacker.

    ``replicate_plan`` maps a column (name or position) to the number of
    copies K. Each copy is the source column plus centred Gaussian noise
    whose std is ``replicate_noise_std`` times the source column's std.
    """

    attacker: str
    replicate_plan: Mapping[str | int, int]
    replicate_noise_std: float = 0.05
    spiteful: bool = False

    def __post_init__(self):
        object.__setattr__(self, "replicate_plan", {k: int(v) for k, v in dict(self.replicate_plan).items()})
        if not (self.replicate_noise_std >= 0 and math.isfinite(self.replicate_noise_std)):
            raise AttackError("replicate_noise_std must be finite and non-negative")
        if any(k < 0 for k in self.replicate_plan.values()):
            raise AttackError("replicate counts must be >= 0")

    @property
    def total_replicates(self) -> int:
        return sum(self.replicate_plan.values())

    def problems(self, data: MarketData) -> list[str]:
        out = []
        if self.attacker not in data.ownership:
            out.append(f"attacker {self.attacker!r} is not a support agent")
        for col in self.replicate_plan:
            try:
                i = data.column_index(col)
            except KeyError:
                out.append(f"unknown column {col!r}")
                continue
            if not 0 <= i < data.n_features:
                out.append(f"column {col!r} out of range")
            elif i in data.central:
                out.append(f"column {col!r} belongs to the central agent and cannot be replicated")
            elif self.attacker in data.ownership and i not in data.ownership[self.attacker]:
                out.append(f"column {col!r} is not owned by {self.attacker!r}")
        return out


def _replicate_sources(data: MarketData, scenario: AttackScenario) -> list[int]:
    errors = scenario.problems(data)
    if errors:
        raise AttackError("; ".join(errors))
    out = []
    for col, k in scenario.replicate_plan.items():
        out.extend([data.column_index(col)] * k)
    return out


def apply_attack(data: MarketData, scenario: AttackScenario, seed: int) -> MarketData:
    """Append the scenario's replicates as pseudo-agents of the attacker."""
    sources = _replicate_sources(data, scenario)
    if not sources:
        return data
    rng = np.random.default_rng(seed)
    X = data.features
    std = X.std(axis=0)
    cols, names = [], list(data.columns)
    ownership = {a: tuple(idx) for a, idx in data.ownership.items()}
    aliases = dict(data.aliases)
    counter: dict[int, int] = {}
    for src in sources:
        counter[src] = counter.get(src, 0) + 1
        noise = scenario.replicate_noise_std * std[src] * rng.standard_normal(data.n_steps)
        cols.append(X[:, src] + noise)
        name = f"{data.columns[src]}_r{counter[src]}"
        while name in names:
            name += "'"
        names.append(name)
        pseudo = f"{scenario.attacker}~{name}"
        ownership[pseudo] = (len(names) - 1,)
        aliases[pseudo] = scenario.attacker
    return replace(
        data, features=np.column_stack([X, *cols]), columns=tuple(names),
        ownership=ownership, aliases=aliases,
    )


def attack_known(known: KnownModel, data: MarketData, scenario: AttackScenario) -> KnownModel:
    """Extend a known model with the scenario's replicate columns."""
    sources = _replicate_sources(data, scenario)
    var = np.diag(known.features.covariance)
    return known.with_replicates([(s, scenario.replicate_noise_std ** 2 * var[s]) for s in sources])


@dataclass(frozen=True)
class RobustnessVerdict:
    """Reward deltas (attacked minus honest, relative to honest revenue)."""

    deltas: Mapping[str, float]
    attacker: str
    classification: str
    honest_rewards: Mapping[str, float] = field(default_factory=dict)
    attacked_rewards: Mapping[str, float] = field(default_factory=dict)
    honest_revenue: float = 0.0
    attacked_revenue: float = 0.0

    @property
    def max_abs_delta(self) -> float:
        return max((abs(d) for d in self.deltas.values()), default=0.0)


def classify(deltas: Mapping[str, float], attacker: str, tolerance: float) -> str:
    if all(abs(d) <= tolerance for d in deltas.values()):
        return "strict"
    if deltas.get(attacker, 0.0) > tolerance:
        return "not-robust"
    return "weak"


def compare_rewards(honest: Mapping[str, float], attacked: Mapping[str, float],
                    honest_revenue: float, attacker: str, tolerance: float,
                    attacked_revenue: float = 0.0) -> RobustnessVerdict:
    scale = honest_revenue if honest_revenue > 0 else 1.0
    agents = sorted(set(honest) | set(attacked))
    deltas = {a: (attacked.get(a, 0.0) - honest.get(a, 0.0)) / scale for a in agents}
    return RobustnessVerdict(deltas, attacker, classify(deltas, attacker, tolerance),
                             dict(honest), dict(attacked), honest_revenue, attacked_revenue)


def evaluate_robustness(
    task: MarketTask,
    data: MarketData,
    scenario: AttackScenario,
    tolerance: float = 1e-6,
    known: KnownModel | None = None,
) -> RobustnessVerdict:
    """Clear an honest and an attacked market and classify the difference."""
    attacked = apply_attack(data, scenario, task.seed)
    known_attacked = attack_known(known, data, scenario) if known is not None else None
    honest_run = run_market(task, data, known)
    attacked_run = run_market(task, attacked, known_attacked)
    return compare_rewards(
        honest_run.summary.rewards(), attacked_run.summary.rewards(),
        honest_run.summary.revenue, scenario.attacker, tolerance,
        attacked_run.summary.revenue,
    )


# ---------------------------------------------------------------------------
# Replication sweep


@dataclass(frozen=True)
class CurvePoint:
    method: str
    K: int
    agent: str
    reward_share: float
    classification: str


def method_task(task: MarketTask, method: str) -> MarketTask:
    """Task variant for one curve method; the baselines use the observational lift."""
    if method not in CURVE_METHODS:
        raise ValueError(f"unknown curve method {method!r}; expected one of {CURVE_METHODS}")
    conditioning = "interventional" if method == "interventional-shapley" else "observational"
    allocation = {"robust-shapley": "robust-shapley", "banzhaf": "banzhaf"}.get(method, "shapley-exact")
    return replace(task, lift=replace(task.lift, conditioning=conditioning),
                   allocation_method=allocation)


def replication_curve(
    task: MarketTask,
    data: MarketData,
    attacker: str,
    k_max: int,
    column: str | int | None = None,
    noise_std: float = 0.05,
    methods: Sequence[str] = CURVE_METHODS,
    known: KnownModel | None = None,
    tolerance: float = 1e-3,
) -> list[CurvePoint]:
    """Reward share of every true agent for K = 0..k_max replicates per method.

    Shares are cumulative rewards over cumulative revenue of the honest-size
    market for ``K = 0``. Classification compares each K against ``K = 0``.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if attacker not in data.ownership:
        raise AttackError(f"attacker {attacker!r} is not a support agent")
    if column is None:
        column = data.ownership[attacker][0]
    points: list[CurvePoint] = []
    for method in methods:
        mtask = method_task(task, method)
        honest = None
        for K in range(k_max + 1):
            scenario = AttackScenario(attacker, {column: K}, noise_std)
            attacked = apply_attack(data, scenario, task.seed)
            kn = attack_known(known, data, scenario) if known is not None else None
            summary = run_market(mtask, attacked, kn).summary
            rewards, revenue = summary.rewards(), summary.revenue
            if honest is None:
                honest = (rewards, revenue)
            verdict = compare_rewards(honest[0], rewards, honest[1], attacker, tolerance)
            for agent in sorted(rewards):
                share = rewards[agent] / revenue if revenue > 0 else 0.0
                points.append(CurvePoint(method, K, agent, share, verdict.classification))
    return points


def curve_series(points: Sequence[CurvePoint], agent: str) -> dict[str, list[float]]:
    """``method -> [share at K=0, K=1, ...]`` for one agent."""
    out: dict[str, list[float]] = {}
    for p in sorted(points, key=lambda p: (p.method, p.K)):
        if p.agent == agent:
            out.setdefault(p.method, []).append(p.reward_share)
    return out


def write_curve(points: Sequence[CurvePoint], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "K", "agent", "reward_share", "classification"])
        for p in points:
            w.writerow([p.method, p.K, p.agent, repr(float(p.reward_share)), p.classification])


def write_curve_wide(points: Sequence[CurvePoint], agent: str, path: str | Path) -> None:
    """One row per K, one column per method, for the given agent."""
    series = curve_series(points, agent)
    methods = [m for m in CURVE_METHODS if m in series] + sorted(set(series) - set(CURVE_METHODS))
    n = max((len(v) for v in series.values()), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["K", *methods])
        for K in range(n):
            w.writerow([K, *(repr(float(series[m][K])) for m in methods)])


def write_verdict(verdict: RobustnessVerdict, method: str, K: int, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "K", "agent", "reward_share", "delta", "classification"])
        total = verdict.attacked_revenue
        for agent in sorted(verdict.deltas):
            share = verdict.attacked_rewards.get(agent, 0.0) / total if total > 0 else 0.0
            w.writerow([method, K, agent, repr(float(share)), repr(float(verdict.deltas[agent])),
                        verdict.classification])
