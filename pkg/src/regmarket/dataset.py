"""Market data containers, CSV ingestion and synthetic generators.

A :class:`MarketData` holds one aligned time series: the central agent's
target, a feature matrix and the ownership of every feature column. Columns
owned by the central agent are always available to the model; every other
column belongs to exactly one support agent.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml


class DataError(ValueError):
    """Base class for ingestion and construction failures."""


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class EmptyDataError(DataError):
    pass


class DegenerateRangeError(DataError):
    pass


class InsufficientHistoryError(DataError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MarketData:
    """Aligned target and features with agent ownership.

    ``central`` lists the column positions owned by the central agent, and
    ``ownership`` maps each support agent to the positions it owns. Together
    they partition ``range(n_features)``. ``aliases`` maps pseudo-identities
    (created by replication attacks) back to the agent that controls them.
    """

    timestamps: np.ndarray
    target: np.ndarray
    features: np.ndarray
    columns: tuple[str, ...]
    central_agent: str
    central: tuple[int, ...]
    ownership: Mapping[str, tuple[int, ...]]
    aliases: Mapping[str, str] = field(default_factory=dict)
    scaling: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        target = np.asarray(self.target, dtype=float).ravel()
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "target", _frozen(target))
        object.__setattr__(self, "timestamps", _frozen(self.timestamps))
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "central", tuple(int(i) for i in self.central))
        object.__setattr__(
            self, "ownership",
            {a: tuple(int(i) for i in idx) for a, idx in self.ownership.items()},
        )
        object.__setattr__(self, "aliases", dict(self.aliases))
        object.__setattr__(self, "scaling", dict(self.scaling))
        self.validate()

    def validate(self) -> None:
        T, N = self.features.shape
        if len(self.target) != T or len(self.timestamps) != T:
            raise SchemaError("target, timestamps and features must have equal length")
        if len(self.columns) != N:
            raise SchemaError(f"{len(self.columns)} column names for {N} feature columns")
        if not np.all(np.isfinite(self.features)) or not np.all(np.isfinite(self.target)):
            raise ParseError("non-finite values present")
        seen: list[int] = list(self.central)
        for idx in self.ownership.values():
            seen.extend(idx)
        if sorted(seen) != list(range(N)):
            raise SchemaError("central and support ownership must partition the feature columns")
        if self.central_agent in self.ownership:
            raise SchemaError("central agent cannot also be a support agent")
        for pseudo, owner in self.aliases.items():
            if pseudo not in self.ownership or owner not in self.ownership:
                raise SchemaError(f"alias {pseudo!r} -> {owner!r} refers to unknown agents")

    @property
    def n_steps(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def support(self) -> tuple[int, ...]:
        """Support column positions in ascending order (the player set)."""
        return tuple(sorted(i for idx in self.ownership.values() for i in idx))

    @property
    def agents(self) -> tuple[str, ...]:
        return tuple(self.ownership)

    def owner_of(self, column: int | str) -> str:
        i = self.column_index(column)
        if i in self.central:
            return self.central_agent
        for agent, idx in self.ownership.items():
            if i in idx:
                return agent
        raise KeyError(column)  # unreachable for valid data

    def true_agent(self, agent: str) -> str:
        """Follow pseudo-identity aliases back to the controlling agent."""
        while agent in self.aliases:
            agent = self.aliases[agent]
        return agent

    def column_index(self, column: int | str) -> int:
        if isinstance(column, str):
            try:
                return self.columns.index(column)
            except ValueError:
                raise KeyError(f"unknown column {column!r}") from None
        return int(column)

    def rows(self, start: int, stop: int) -> "MarketData":
        sl = slice(start, stop)
        return replace(
            self, timestamps=self.timestamps[sl], target=self.target[sl],
            features=self.features[sl],
        )

    def select(self, keep: Sequence[int]) -> "MarketData":
        """Keep only the given feature positions; agents left empty are dropped."""
        keep = sorted(set(int(i) for i in keep))
        remap = {old: new for new, old in enumerate(keep)}
        ownership = {
            a: tuple(remap[i] for i in idx if i in remap)
            for a, idx in self.ownership.items()
        }
        ownership = {a: idx for a, idx in ownership.items() if idx}
        aliases = {p: o for p, o in self.aliases.items() if p in ownership and o in ownership}
        return replace(
            self,
            features=self.features[:, keep],
            columns=tuple(self.columns[i] for i in keep),
            central=tuple(remap[i] for i in self.central if i in remap),
            ownership=ownership,
            aliases=aliases,
        )


# ---------------------------------------------------------------------------
# CSV ingestion


def load_manifest(path: str | Path) -> tuple[str, dict[str, list[str]]]:
    """Read an ownership manifest.

    The file is YAML with a ``central`` key naming the central agent and an
    ``agents`` mapping from agent id to a list of column names::

        central: a1
        agents:
          a1: [a1]
          a4: [a4]
    """
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or "agents" not in doc or "central" not in doc:
        raise SchemaError(f"{path}: manifest needs 'central' and 'agents' keys")
    agents = doc["agents"] or {}
    if not isinstance(agents, dict):
        raise SchemaError(f"{path}: 'agents' must be a mapping")
    central = str(doc["central"])
    out = {str(a): [str(c) for c in (cols or [])] for a, cols in agents.items()}
    out.setdefault(central, [])
    return central, out


def _parse_timestamps(raw: list[str]) -> np.ndarray:
    try:
        return np.array([int(v) for v in raw], dtype=np.int64)
    except ValueError:
        pass
    out = []
    for row, v in enumerate(raw, start=2):
        try:
            out.append(np.datetime64(v.strip().replace("Z", "")))
        except ValueError:
            raise ParseError(f"unparseable timestamp {v!r}", row) from None
    return np.array(out)


def ingest_csv(
    path: str | Path,
    target_column: str,
    normalize: bool = False,
    manifest: str | Path | Mapping | None = None,
) -> MarketData:
    """Load a CSV with a header row into :class:`MarketData`.

    ``manifest`` is a path to an ownership manifest or an already parsed
    ``(central_agent, {agent: [columns]})`` pair. Without one, every
    non-target column becomes its own support agent and the central agent
    owns no features.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise EmptyDataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        body = [r for r in reader if r and any(c.strip() for c in r)]
    if not body:
        raise EmptyDataError(f"{path}: no data rows")
    if target_column not in header:
        raise SchemaError(f"{path}: missing target column {target_column!r}")

    has_ts = "timestamp" in header
    value_cols = [h for h in header if h != "timestamp"]
    pos = {h: i for i, h in enumerate(header)}
    values = np.empty((len(body), len(value_cols)))
    for r, line in enumerate(body):
        if len(line) != len(header):
            raise ParseError(f"expected {len(header)} cells, got {len(line)}", r + 2)
        for c, name in enumerate(value_cols):
            cell = line[pos[name]].strip()
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"column {name!r}: not a number {cell!r}", r + 2) from None
            if not math.isfinite(v):
                raise ParseError(f"column {name!r}: non-finite value {cell!r}", r + 2)
            values[r, c] = v
    timestamps = (
        _parse_timestamps([line[pos["timestamp"]] for line in body])
        if has_ts else np.arange(len(body))
    )

    scaling: dict[str, tuple[float, float]] = {}
    if normalize:
        lo, hi = values.min(axis=0), values.max(axis=0)
        for c, name in enumerate(value_cols):
            if hi[c] == lo[c]:
                raise DegenerateRangeError(
                    f"column {name!r} is constant ({lo[c]!r}); cannot map to [0, 1]"
                )
            scaling[name] = (float(lo[c]), float(hi[c]))
        values = (values - lo) / (hi - lo)

    if manifest is None:
        central_agent = "central"
        owners = {central_agent: []}
        owners.update({name: [name] for name in value_cols if name != target_column})
    elif isinstance(manifest, (str, Path)):
        central_agent, owners = load_manifest(manifest)
    else:
        central_agent, owners = manifest
        owners = {a: list(c) for a, c in owners.items()}
        owners.setdefault(central_agent, [])

    assigned: dict[str, str] = {}
    for agent, cols in owners.items():
        for col in cols:
            if col not in value_cols:
                raise SchemaError(f"manifest column {col!r} (agent {agent!r}) not in {path}")
            if col in assigned:
                raise SchemaError(f"column {col!r} owned by both {assigned[col]!r} and {agent!r}")
            assigned[col] = agent
    stray = [c for c in value_cols if c not in assigned and c != target_column]
    if stray:
        raise SchemaError(f"columns without an owner in the manifest: {stray}")

    feature_names = list(owners[central_agent]) + [
        col for agent, cols in owners.items() if agent != central_agent for col in cols
    ]
    index = {name: i for i, name in enumerate(feature_names)}
    features = values[:, [value_cols.index(n) for n in feature_names]] if feature_names \
        else np.empty((len(body), 0))
    return MarketData(
        timestamps=timestamps,
        target=values[:, value_cols.index(target_column)],
        features=features,
        columns=tuple(feature_names),
        central_agent=central_agent,
        central=tuple(index[c] for c in owners[central_agent]),
        ownership={
            a: tuple(index[c] for c in cols)
            for a, cols in owners.items() if a != central_agent and cols
        },
        scaling=scaling,
    )


def write_csv(data: MarketData, path: str | Path, target_column: str = "target") -> None:
    """Write ``data`` in the ingestion format (``timestamp`` first)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        names = [c for c in data.columns if c != target_column]
        w.writerow(["timestamp", target_column, *names])
        cols = [data.columns.index(c) for c in names]
        for t in range(data.n_steps):
            w.writerow([data.timestamps[t], repr(float(data.target[t])),
                        *(repr(float(data.features[t, c])) for c in cols)])


# ---------------------------------------------------------------------------
# Transformations


def build_lags(data: MarketData, lag: int) -> MarketData:
    """Replace every feature by its value ``lag`` steps earlier."""
    if lag < 0:
        raise ValueError("lag must be non-negative")
    if lag >= data.n_steps:
        raise InsufficientHistoryError(f"lag {lag} needs more than {data.n_steps} rows")
    if lag == 0:
        return data
    return replace(
        data,
        timestamps=data.timestamps[lag:],
        target=data.target[lag:],
        features=data.features[:-lag],
    )


@dataclass(frozen=True)
class Removal:
    column: str
    partner: str
    correlation: float


def prescreen_redundant(
    data: MarketData, threshold: float
) -> tuple[MarketData, list[Removal]]:
    """Drop support columns nearly collinear with a central feature.

    A support column is removed when its absolute Pearson correlation with
    any central column reaches ``threshold``. Columns are visited in
    ascending position; agents left without columns leave the market.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    X = data.features
    log: list[Removal] = []
    drop: set[int] = set()
    for j in data.support:
        for c in data.central:
            r = abs(_pearson(X[:, j], X[:, c]))
            if r >= threshold - 1e-12:
                log.append(Removal(data.columns[j], data.columns[c], float(r)))
                drop.add(j)
                break
    keep = [i for i in range(data.n_features) if i not in drop]
    return data.select(keep), log


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else 0.0


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Linear-Gaussian generator with one latent confounder.

    Every original feature is ``loading * Z + e`` with ``Z`` and ``e``
    independent standard Gaussians scaled by ``latent_confounder_strength``
    and ``feature_noise_std``. The first ``n_central`` features belong to
    the central agent, the rest to agents ``a1, a2, ...`` owning columns
    ``x1, x2, ...``. The target is ``true_weights @ features + noise``.

    ``replicate_plan`` maps a support column name to ``(K, noise_std)``.
    """

    true_weights: tuple[float, ...]
    latent_confounder_strength: float | tuple[float, ...] = 1.0
    noise_std: float = 0.1
    feature_noise_std: float = 1.0
    replicate_plan: Mapping[str, tuple[int, float]] = field(default_factory=dict)
    length: int = 1000
    n_central: int = 0

    def __post_init__(self):
        object.__setattr__(self, "true_weights", tuple(float(w) for w in self.true_weights))
        s = self.latent_confounder_strength
        if not np.isscalar(s):
            object.__setattr__(self, "latent_confounder_strength", tuple(float(v) for v in s))
        object.__setattr__(
            self, "replicate_plan",
            {str(k): (int(v[0]), float(v[1])) for k, v in dict(self.replicate_plan).items()},
        )
        errors = self.problems()
        if errors:
            raise ValueError("; ".join(errors))

    def problems(self) -> list[str]:
        out = []
        n = len(self.true_weights)
        if n == 0:
            out.append("true_weights must be non-empty")
        if not 0 <= self.n_central <= n:
            out.append("n_central must lie in [0, len(true_weights)]")
        if not np.isscalar(self.latent_confounder_strength) and \
                len(self.latent_confounder_strength) != n:
            out.append("latent_confounder_strength must be scalar or one per feature")
        if not self.noise_std > 0:
            out.append("noise_std must be positive")
        if not self.feature_noise_std >= 0:
            out.append("feature_noise_std must be non-negative")
        if self.length < 2:
            out.append("length must be at least 2")
        names = self.support_names
        for col, (k, std) in self.replicate_plan.items():
            if col not in names:
                out.append(f"replicate_plan: {col!r} is not a support column")
            if k < 0:
                out.append(f"replicate_plan[{col!r}]: K must be >= 0")
            if not std > 0:
                out.append(f"replicate_plan[{col!r}]: replicate noise std must be positive")
        return out

    @property
    def n_support(self) -> int:
        return len(self.true_weights) - self.n_central

    @property
    def support_names(self) -> list[str]:
        return [f"x{j + 1}" for j in range(self.n_support)]

    @property
    def loadings(self) -> np.ndarray:
        return np.broadcast_to(
            np.asarray(self.latent_confounder_strength, dtype=float),
            (len(self.true_weights),),
        ).copy()


def _layout(spec: SyntheticSpec):
    names = [f"c{i + 1}" for i in range(spec.n_central)] + spec.support_names
    ownership = {f"a{j + 1}": [spec.n_central + j] for j in range(spec.n_support)}
    sources = []  # (column position of replicate, source position, noise std)
    for col, (k, std) in spec.replicate_plan.items():
        src = names.index(col)
        agent = f"a{src - spec.n_central + 1}"
        for r in range(k):
            names.append(f"{col}_r{r + 1}")
            ownership[agent].append(len(names) - 1)
            sources.append((len(names) - 1, src, std))
    return names, ownership, sources


def generate_confounded(spec: SyntheticSpec, seed: int) -> MarketData:
    """Draw a confounded dataset; bit-reproducible for a fixed seed."""
    rng = np.random.default_rng(seed)
    T, n = spec.length, len(spec.true_weights)
    z = rng.standard_normal(T)
    base = np.outer(z, spec.loadings) + spec.feature_noise_std * rng.standard_normal((T, n))
    y = base @ np.asarray(spec.true_weights) + spec.noise_std * rng.standard_normal(T)
    names, ownership, sources = _layout(spec)
    cols = [base[:, i] for i in range(n)]
    for _, src, std in sources:
        cols.append(base[:, src] + std * rng.standard_normal(T))
    return MarketData(
        timestamps=np.arange(T),
        target=y,
        features=np.column_stack(cols),
        columns=tuple(names),
        central_agent="c",
        central=tuple(range(spec.n_central)),
        ownership=ownership,
    )


def population_moments(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact feature mean, covariance and regression coefficients.

    Columns follow :func:`generate_confounded`. The coefficient of every
    replicate is zero: given the originals, replicate noise carries no
    information about the target.
    """
    n = len(spec.true_weights)
    L = spec.loadings
    cov = np.outer(L, L) + spec.feature_noise_std ** 2 * np.eye(n)
    _, _, sources = _layout(spec)
    src = [s for _, s, _ in sources]
    m = n + len(sources)
    lift = np.zeros((m, n))
    lift[:n, :n] = np.eye(n)
    for r, s in enumerate(src):
        lift[n + r, s] = 1.0
    full = lift @ cov @ lift.T
    for r, (_, _, std) in enumerate(sources):
        full[n + r, n + r] += std ** 2
    coef = np.zeros(m)
    coef[:n] = spec.true_weights
    return np.zeros(m), full, coef


# ---------------------------------------------------------------------------
# Wind sites


@dataclass(frozen=True)
class Site:
    agent: str
    site_id: int
    capacity_factor: float  # percent
    capacity_mw: float


WIND_SITES: tuple[Site, ...] = (
    Site("a1", 4456, 34.11, 1.75),
    Site("a2", 4754, 35.75, 2.96),
    Site("a3", 4934, 36.21, 3.38),
    Site("a4", 4090, 26.60, 16.11),
    Site("a5", 4341, 28.47, 37.98),
    Site("a6", 4715, 27.37, 30.06),
    Site("a7", 5730, 34.23, 2.53),
    Site("a8", 5733, 34.41, 2.60),
    Site("a9", 5947, 34.67, 1.24),
)


def generate_wind_standin(length: int = 4000, seed: int = 0) -> MarketData:
    """Nine-site hourly power stand-in for the wind case study.

    A shared weather state drifts as an AR(1) process and reaches each site
    with a site-specific delay; sites a2 and a3 sit next to a1 and are
    near-copies of it. Power passes through a logistic power curve whose
    offset matches each site's capacity factor, then each column is min/max
    normalized. The central agent a1 owns its own series, which is also the
    target.
    """
    rng = np.random.default_rng(seed)
    burn = 50
    n = length + burn
    weather = np.zeros(n)
    for t in range(1, n):
        weather[t] = 0.97 * weather[t - 1] + 0.25 * rng.standard_normal()
    # hours behind a1 (negative: upstream of a1), local noise std
    delays = {"a1": 0, "a2": 0, "a3": 0, "a4": -3, "a5": -2, "a6": 2,
              "a7": -1, "a8": -1, "a9": 1}
    local = {"a1": 0.25, "a2": 0.03, "a3": 0.04, "a4": 0.35, "a5": 0.3,
             "a6": 0.3, "a7": 0.25, "a8": 0.22, "a9": 0.3}
    own = np.zeros(n)
    for t in range(1, n):
        own[t] = 0.9 * own[t - 1] + 0.1 * rng.standard_normal()
    cols = []
    for site in WIND_SITES:
        d = delays[site.agent]
        shifted = np.roll(weather, d)
        wind = shifted + (own if site.agent in ("a1", "a2", "a3") else 0.0)
        wind = wind + local[site.agent] * rng.standard_normal(n) * 0.3
        offset = math.log(site.capacity_factor / (100 - site.capacity_factor))
        power = 1.0 / (1.0 + np.exp(-(2.5 * wind + offset)))
        cols.append(power[burn:])
    X = np.column_stack(cols)
    X = (X - X.min(axis=0)) / (X.max(axis=0) - X.min(axis=0))
    names = tuple(s.agent for s in WIND_SITES)
    return MarketData(
        timestamps=np.arange(length),
        target=X[:, 0],
        features=X,
        columns=names,
        central_agent="a1",
        central=(0,),
        ownership={s.agent: (i,) for i, s in enumerate(WIND_SITES) if i > 0},
    )
