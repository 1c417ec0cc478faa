"""Config-driven experiment runner.

Verbs::

    regmarket run configs/replication_demo.yaml --out-dir out/
    regmarket validate configs/wind_standin.yaml
    regmarket curve configs/replication_sweep.yaml

Exit codes are 0 on success, 2 for an invalid config and 3 for a failure
while running. Without ``--out-dir`` the output directory comes from the
config, then from ``$REGMARKET_OUT_DIR``, then defaults to ``./out``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import yaml

from .attack import (
    CURVE_METHODS, AttackError, AttackScenario, apply_attack, attack_known,
    compare_rewards, replication_curve, write_curve, write_curve_wide, write_verdict,
)
from .bayes import ModelConfig
from .dataset import (
    DataError, MarketData, SyntheticSpec, build_lags, generate_confounded,
    generate_wind_standin, ingest_csv, prescreen_redundant,
)
from .lift import LiftSpec
from .market import KnownModel, MarketTask, check_budget, known_model_from_spec, run_market, write_ledger

SCHEMA_VERSION = 1
OUT_DIR_ENV = "REGMARKET_OUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("regmarket")


class ConfigError(ValueError):
    """Invalid configuration; ``issues`` lists ``(field path, message)``."""

    def __init__(self, issues: list[tuple[str, str]]):
        self.issues = issues
        super().__init__("; ".join(f"{p}: {m}" for p, m in issues))


@dataclass
class ExperimentConfig:
    seed: int
    data: dict
    model: ModelConfig
    lift: LiftSpec
    task: MarketTask
    attack: dict | None = None
    curve: dict | None = None
    out_dir: str | None = None
    base_dir: Path = field(default_factory=Path.cwd)


# ---------------------------------------------------------------------------
# Parsing and validation

DATA_SOURCES = ("synthetic", "csv", "wind_standin")
TOP_KEYS = {"schema_version", "seed", "data", "model", "lift", "market", "attack", "curve", "output"}


def _section(raw: dict, key: str, issues) -> dict:
    sec = raw.get(key) or {}
    if not isinstance(sec, dict):
        issues.append((key, "must be a mapping"))
        return {}
    return sec


def _known_fields(sec: dict, cls, path: str, issues, extra=()) -> dict:
    names = {f.name for f in fields(cls)} - set(extra)
    for k in sec:
        if k not in names:
            issues.append((f"{path}.{k}", "unknown field"))
    return {k: v for k, v in sec.items() if k in names}


def _check(cls, kwargs: dict, path: str, issues):
    """Build ``cls(**kwargs)``, mapping each reported problem to a field path."""
    try:
        return cls(**kwargs)
    except TypeError as exc:
        issues.append((path, str(exc)))
    except ValueError as exc:
        names = {f.name for f in fields(cls)}
        for msg in str(exc).split("; "):
            head = msg.split(" ", 1)[0].split(":", 1)[0].split("[", 1)[0]
            issues.append((f"{path}.{head}" if head in names else path, msg))
    return None


def _number(sec: dict, key: str, path: str, issues, kind=float):
    if key not in sec:
        return
    v = sec[key]
    ok = isinstance(v, (int, float)) and not isinstance(v, bool)
    if kind is int:
        ok = isinstance(v, int) and not isinstance(v, bool)
    if not ok:
        issues.append((f"{path}.{key}", f"must be {'an integer' if kind is int else 'a number'}"))
        sec.pop(key)


def parse_config(raw: Any, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a parsed YAML document; raise :class:`ConfigError` listing every issue."""
    base_dir = Path(base_dir or Path.cwd())
    issues: list[tuple[str, str]] = []
    if not isinstance(raw, dict):
        raise ConfigError([("<root>", "config must be a mapping")])
    for k in raw:
        if k not in TOP_KEYS:
            issues.append((str(k), "unknown section"))
    if raw.get("schema_version") != SCHEMA_VERSION:
        issues.append(("schema_version", f"must be {SCHEMA_VERSION}"))
    seed = raw.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        issues.append(("seed", "is required and must be a non-negative integer"))
        seed = 0

    data = _section(raw, "data", issues)
    sources = [s for s in DATA_SOURCES if s in data]
    if len(sources) != 1:
        issues.append(("data", f"exactly one of {DATA_SOURCES} is required"))
    for k in data:
        if k not in DATA_SOURCES + ("lag", "prescreen_threshold", "known_model"):
            issues.append((f"data.{k}", "unknown field"))
    _number(data, "lag", "data", issues, int)
    if data.get("lag", 0) < 0:
        issues.append(("data.lag", "must be >= 0"))
    if "prescreen_threshold" in data:
        _number(data, "prescreen_threshold", "data", issues)
        th = data.get("prescreen_threshold")
        if th is not None and not 0 < th <= 1:
            issues.append(("data.prescreen_threshold", "must lie in (0, 1]"))
    if not isinstance(data.get("known_model", False), bool):
        issues.append(("data.known_model", "must be true or false"))
    elif data.get("known_model") and "synthetic" not in data:
        issues.append(("data.known_model", "only available for synthetic data"))
    if "synthetic" in data:
        syn = data["synthetic"]
        if not isinstance(syn, dict):
            issues.append(("data.synthetic", "must be a mapping"))
        else:
            kw = _known_fields(syn, SyntheticSpec, "data.synthetic", issues)
            _check(SyntheticSpec, kw, "data.synthetic", issues)
    if "csv" in data:
        c = data["csv"]
        if not isinstance(c, dict) or "path" not in c or "target" not in c:
            issues.append(("data.csv", "needs 'path' and 'target'"))
        else:
            for k in c:
                if k not in ("path", "target", "manifest", "normalize"):
                    issues.append((f"data.csv.{k}", "unknown field"))
            for key in ("path", "manifest"):
                if c.get(key) is not None and not (base_dir / c[key]).is_file():
                    issues.append((f"data.csv.{key}", f"file not found: {c[key]}"))
    if "wind_standin" in data:
        w = data["wind_standin"] or {}
        if not isinstance(w, dict):
            issues.append(("data.wind_standin", "must be a mapping"))
        else:
            for k in w:
                if k not in ("length",):
                    issues.append((f"data.wind_standin.{k}", "unknown field"))
            _number(w, "length", "data.wind_standin", issues, int)
            if w.get("length", 4000) < 10:
                issues.append(("data.wind_standin.length", "must be >= 10"))

    msec = _section(raw, "model", issues)
    mkw = _known_fields(msec, ModelConfig, "model", issues)
    for k in ("prior_precision", "noise_precision", "forgetting"):
        _number(mkw, k, "model", issues)
    model = _check(ModelConfig, mkw, "model", issues)

    lsec = _section(raw, "lift", issues)
    lkw = _known_fields(lsec, LiftSpec, "lift", issues)
    _number(lkw, "mc_samples", "lift", issues, int)
    lift = _check(LiftSpec, lkw, "lift", issues)

    ksec = _section(raw, "market", issues)
    kkw = _known_fields(ksec, MarketTask, "market", issues, extra=("model", "lift", "seed"))
    for k in ("valuation", "gamma"):
        _number(kkw, k, "market", issues)
    _number(kkw, "permutations", "market", issues, int)
    for k in ("train_window", "test_window"):
        if kkw.get(k) is not None:
            w = kkw[k]
            if not (isinstance(w, list) and len(w) == 2 and all(isinstance(v, int) for v in w)):
                issues.append((f"market.{k}", "must be a [start, stop] pair of integers"))
                kkw.pop(k)
            else:
                kkw[k] = tuple(w)
    task = None
    if model is not None and lift is not None:
        task = _check(MarketTask, dict(kkw, model=model, lift=lift, seed=seed), "market", issues)

    attack = raw.get("attack")
    if attack is not None:
        if not isinstance(attack, dict) or "attacker" not in attack or "replicate_plan" not in attack:
            issues.append(("attack", "needs 'attacker' and 'replicate_plan'"))
        else:
            for k in attack:
                if k not in ("attacker", "replicate_plan", "replicate_noise_std", "spiteful", "tolerance"):
                    issues.append((f"attack.{k}", "unknown field"))
            plan = attack["replicate_plan"]
            if not isinstance(plan, dict) or not all(
                    isinstance(v, int) and v >= 1 for v in plan.values()):
                issues.append(("attack.replicate_plan", "must map columns to K >= 1"))
            _number(attack, "replicate_noise_std", "attack", issues)
            if attack.get("replicate_noise_std", 0.05) < 0:
                issues.append(("attack.replicate_noise_std", "must be >= 0"))
            _number(attack, "tolerance", "attack", issues)

    curve = raw.get("curve")
    if curve is not None:
        if not isinstance(curve, dict) or "attacker" not in curve:
            issues.append(("curve", "needs 'attacker'"))
        else:
            for k in curve:
                if k not in ("attacker", "k_max", "column", "methods", "noise_std", "tolerance"):
                    issues.append((f"curve.{k}", "unknown field"))
            _number(curve, "k_max", "curve", issues, int)
            if curve.get("k_max", 8) < 1:
                issues.append(("curve.k_max", "must be >= 1"))
            methods = curve.get("methods", list(CURVE_METHODS))
            if not isinstance(methods, list) or not methods or any(m not in CURVE_METHODS for m in methods):
                issues.append(("curve.methods", f"must be a non-empty list drawn from {CURVE_METHODS}"))

    out = _section(raw, "output", issues)
    for k in out:
        if k != "dir":
            issues.append((f"output.{k}", "unknown field"))

    if issues:
        raise ConfigError(issues)
    return ExperimentConfig(seed, data, model, lift, task, attack, curve, out.get("dir"), base_dir)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([("<file>", f"cannot read {path}: {exc.strerror}")]) from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([("<file>", f"not valid YAML: {exc}")]) from None
    return parse_config(raw, path.parent)


def resolved(cfg: ExperimentConfig) -> dict:
    """The config with every default filled in, for provenance."""
    task = asdict(cfg.task)
    task.pop("model"), task.pop("lift"), task.pop("seed")
    for k in ("train_window", "test_window"):
        if task[k] is not None:
            task[k] = list(task[k])
    out = {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "data": cfg.data,
        "model": asdict(cfg.model),
        "lift": asdict(cfg.lift),
        "market": task,
    }
    if cfg.attack is not None:
        out["attack"] = dict({"replicate_noise_std": 0.05, "spiteful": False, "tolerance": 1e-6},
                             **cfg.attack)
    if cfg.curve is not None:
        out["curve"] = dict({"k_max": 8, "methods": list(CURVE_METHODS), "noise_std": 0.05,
                             "tolerance": 1e-3}, **cfg.curve)
    return out


# ---------------------------------------------------------------------------
# Execution


def load_data(cfg: ExperimentConfig) -> tuple[MarketData, KnownModel | None, list]:
    d = cfg.data
    known = None
    if "synthetic" in d:
        spec = SyntheticSpec(**{k: (tuple(v) if isinstance(v, list) else v)
                                for k, v in d["synthetic"].items()})
        data = generate_confounded(spec, cfg.seed)
        if d.get("known_model"):
            known = known_model_from_spec(spec, cfg.model)
    elif "csv" in d:
        c = d["csv"]
        manifest = cfg.base_dir / c["manifest"] if c.get("manifest") else None
        data = ingest_csv(cfg.base_dir / c["path"], c["target"], bool(c.get("normalize", False)),
                          manifest)
    else:
        data = generate_wind_standin(int((d["wind_standin"] or {}).get("length", 4000)), cfg.seed)
    removed = []
    if d.get("prescreen_threshold") is not None:
        data, removed = prescreen_redundant(data, float(d["prescreen_threshold"]))
    lag = int(d.get("lag", 0))
    if lag and known is not None:
        raise DataError("known_model cannot be combined with lagged features")
    return build_lags(data, lag), known, removed


def _atomic_write(path: Path, writer: Callable[[Path], None]) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        writer(Path(tmp))
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _summary_lines(label: str, run, agents) -> list[str]:
    lines = [f"[{label}]"]
    for stage, s in run.summary.stages.items():
        lines.append(f"{stage}: steps={s.steps} loss_base={s.mean_loss_base:.6g} "
                     f"loss_full={s.mean_loss_full:.6g} improvement={s.improvement_pct:.3f}% "
                     f"revenue={s.revenue:.6g}")
        for a in agents:
            lines.append(f"  {a}: reward={s.rewards.get(a, 0.0):.6g} "
                         f"allocation={s.allocation.get(a, 0.0):.6f}")
    shares = run.summary.shares()
    lines.append("cumulative shares: " + ", ".join(f"{a}={v:.6f}" for a, v in sorted(shares.items())))
    return lines


def execute(cfg: ExperimentConfig, out_dir: Path, curve_only: bool = False) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    data, known, removed = load_data(cfg)
    written: list[Path] = []

    def emit(name, writer):
        path = out_dir / name
        _atomic_write(path, writer)
        written.append(path)

    lines = [f"seed={cfg.seed} rows={data.n_steps} features={data.n_features} "
             f"agents={len(data.ownership)}"]
    for r in removed:
        lines.append(f"prescreen removed {r.column} (|rho|={r.correlation:.6f} with {r.partner})")

    if not curve_only:
        honest = run_market(cfg.task, data, known)
        for e in honest.ledger:
            check_budget(e, cfg.task.allocation_method)
        emit("ledger_honest.csv", lambda p: write_ledger(honest.ledger, p, list(data.ownership)))
        lines += _summary_lines("honest", honest, list(data.ownership))
        if cfg.attack is not None:
            a = cfg.attack
            scenario = AttackScenario(str(a["attacker"]), a["replicate_plan"],
                                      float(a.get("replicate_noise_std", 0.05)),
                                      bool(a.get("spiteful", False)))
            attacked_data = apply_attack(data, scenario, cfg.seed)
            kn = attack_known(known, data, scenario) if known is not None else None
            attacked = run_market(cfg.task, attacked_data, kn)
            for e in attacked.ledger:
                check_budget(e, cfg.task.allocation_method)
            emit("ledger_attacked.csv",
                 lambda p: write_ledger(attacked.ledger, p, list(attacked_data.ownership)))
            verdict = compare_rewards(
                honest.summary.rewards(), attacked.summary.rewards(), honest.summary.revenue,
                scenario.attacker, float(a.get("tolerance", 1e-6)), attacked.summary.revenue)
            emit("verdict.csv", lambda p: write_verdict(
                verdict, f"{cfg.lift.conditioning}/{cfg.task.allocation_method}",
                scenario.total_replicates, p))
            lines += _summary_lines("attacked", attacked, list(attacked_data.ownership))
            lines.append(f"verdict: {verdict.classification} "
                         f"(max |delta| = {verdict.max_abs_delta:.3e})")

    if cfg.curve is not None:
        c = cfg.curve
        points = replication_curve(
            cfg.task, data, str(c["attacker"]), int(c.get("k_max", 8)), c.get("column"),
            float(c.get("noise_std", 0.05)), tuple(c.get("methods", CURVE_METHODS)), known,
            float(c.get("tolerance", 1e-3)))
        emit("curve.csv", lambda p: write_curve(points, p))
        emit("curve_wide.csv", lambda p: write_curve_wide(points, str(c["attacker"]), p))
        lines.append(f"replication curve for {c['attacker']}: {len(points)} rows")

    emit("summary.txt", lambda p: p.write_text("\n".join(lines) + "\n"))
    emit("config.resolved.yaml",
         lambda p: p.write_text(yaml.safe_dump(resolved(cfg), sort_keys=True)))
    return written


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regmarket", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="verb", required=True)
    for verb, help_ in (("run", "clear honest (and attacked) markets"),
                        ("validate", "check a config without running it"),
                        ("curve", "run only the replication sweep")):
        s = sub.add_parser(verb, help=help_)
        s.add_argument("config", type=Path)
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--out-dir", type=Path, default=None)
        s.add_argument("--threads", type=int, default=None,
                       help="cap BLAS threads (set before numerical work starts)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _apply_threads(n: int | None) -> None:
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    _apply_threads(args.threads)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        raw_path = args.config
        cfg = load_config(raw_path)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError([("seed", "must be a non-negative integer")])
            cfg.seed = args.seed
            cfg.task = MarketTask(**{**{f.name: getattr(cfg.task, f.name) for f in fields(MarketTask)},
                                     "seed": args.seed})
        if args.verb == "curve" and cfg.curve is None:
            raise ConfigError([("curve", "the curve verb needs a 'curve' section")])
    except ConfigError as exc:
        for path, msg in exc.issues:
            print(f"invalid: {path}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    if args.verb == "validate":
        print(f"valid: {args.config}")
        return EXIT_OK
    out_dir = args.out_dir or (Path(cfg.out_dir) if cfg.out_dir else None) \
        or Path(os.environ.get(OUT_DIR_ENV, "out"))
    try:
        written = execute(cfg, out_dir, curve_only=args.verb == "curve")
    except (DataError, AttackError, ArithmeticError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for path in written:
        log.info("wrote %s", path)
    print(f"wrote {len(written)} files to {out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
