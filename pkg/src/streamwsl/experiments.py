"""Experiment runners: budget sweeps over AL policies and the shift study for SSL.

Each trial gets one world, derived from the master seed, and every policy and
budget inside the trial runs on that same world so curves are paired. Trials
are the unit of work handed to the worker pool. Per-trial CSVs contain only
seeded quantities; wall-clock timings go to a separate JSON file so the CSVs
are byte-identical across reruns.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from .active import VARIANTS as AL_VARIANTS, AlPolicyConfig
from .detector import MinibootstrapParams
from .errors import ConfigError
from .harness import WorldConfig, World, generate_world, subsample
from .pipeline import (
    GroundTruthOracle,
    ScoringConfig,
    TrainConfig,
    evaluate,
    supervised_phase,
    weakly_supervised_phase,
)
from .semisup import SSL_VARIANTS, SslConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SEED_POLICY = "seed"
AUTO = "auto"


# ---------------------------------------------------------------- shift calibration

def calibrate_shift(
    cfg: WorldConfig,
    band: Tuple[float, float] = (0.62, 0.70),
    upper: float = 48.0,
    max_steps: int = 12,
    train: TrainConfig = TrainConfig(),
) -> Tuple[float, float]:
    """Bisect ``shift_magnitude`` until the seed model's target mAP lies in ``band``.

    Returns ``(shift, seed_map)``. Seed mAP decreases with the shift on
    average, so bisection is a reasonable search even though single worlds
    are noisy. If the band is never hit the last probe is returned; callers
    that need the band should check the returned mAP.
    """
    lo_band, hi_band = band
    if not 0.0 <= lo_band < hi_band <= 1.0:
        raise ConfigError(f"bad calibration band {band}")
    lo, hi = 0.0, upper
    shift, value = 0.0, float("nan")
    for _ in range(max_steps):
        shift = 0.5 * (lo + hi)
        world = generate_world(replace(cfg, shift_magnitude=shift))
        model = supervised_phase(world.source, cfg.num_classes, train)
        value = evaluate(model, world.target_test).mean_ap
        if value > hi_band:
            lo = shift
        elif value < lo_band:
            hi = shift
        else:
            break
    return shift, value


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class PolicySpec:
    """One entry of the policy grid. ``name`` defaults to the variant."""

    variant: str
    name: str = ""
    params: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in AL_VARIANTS:
            raise ConfigError(f"unknown AL variant {self.variant!r}")
        if not self.name:
            object.__setattr__(self, "name", self.variant)

    def config(self, budget: int) -> AlPolicyConfig:
        return AlPolicyConfig(variant=self.variant, budget=budget, **self.params)


@dataclass(frozen=True)
class ShiftLevel:
    name: str
    shift: Union[float, str] = AUTO
    source_subsample: Optional[int] = None


def _default_policies() -> Tuple[PolicySpec, ...]:
    return tuple(PolicySpec(v) for v in AL_VARIANTS)


def _default_levels() -> Tuple[ShiftLevel, ...]:
    return (ShiftLevel("large", AUTO), ShiftLevel("small", 0.0, source_subsample=100))


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = WorldConfig()
    policies: Tuple[PolicySpec, ...] = field(default_factory=_default_policies)
    budgets: Tuple[int, ...] = (25, 50, 100, 200)
    ssl: Tuple[SslConfig, ...] = (SslConfig("ss_baseline"), SslConfig("ss_pos_only"))
    shift_levels: Tuple[ShiftLevel, ...] = field(default_factory=_default_levels)
    auto_shift: bool = True                  # calibrate the sweep world's shift per trial
    shift_band: Tuple[float, float] = (0.62, 0.70)
    n_trials: int = 3
    seed: int = 0
    out_dir: str = "results"
    workers: int = 1
    train: TrainConfig = TrainConfig()
    scoring: ScoringConfig = ScoringConfig()

    def __post_init__(self):
        if self.n_trials < 1:
            raise ConfigError("n_trials must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        names = [p.name for p in self.policies]
        if len(set(names)) != len(names):
            raise ConfigError(f"policy names must be unique, got {names}")
        if SEED_POLICY in names:
            raise ConfigError(f"{SEED_POLICY!r} is reserved for the no-query row")
        for k in self.budgets:
            if not 0 < k <= self.world.n_unlabeled:
                raise ConfigError(f"budget {k} outside (0, n_U={self.world.n_unlabeled}]")
        for p in self.policies:
            for k in self.budgets:
                p.config(k)  # validates alpha < k and friends

    def trial_seed(self, trial: int) -> int:
        return int(np.random.SeedSequence([self.seed, trial]).generate_state(1)[0])

    def to_dict(self) -> Dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "n_trials": self.n_trials,
            "out_dir": self.out_dir,
            "workers": self.workers,
            "budgets": list(self.budgets),
            "auto_shift": self.auto_shift,
            "shift_band": list(self.shift_band),
            "world": _plain(self.world.to_dict()),
            "policies": [{"variant": p.variant, "name": p.name, **({"params": p.params} if p.params else {})}
                         for p in self.policies],
            "ssl": [_plain(asdict(s)) for s in self.ssl],
            "shift_levels": [_plain(asdict(s)) for s in self.shift_levels],
            "train": _plain(asdict(self.train)),
            "scoring": _plain(asdict(self.scoring)),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ExperimentConfig":
        data = dict(data or {})
        version = data.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}; expected {SCHEMA_VERSION}")
        kw: Dict = {}
        if "world" in data:
            kw["world"] = WorldConfig.from_dict(data.pop("world"))
        if "policies" in data:
            kw["policies"] = tuple(
                PolicySpec(p) if isinstance(p, str) else PolicySpec(**p) for p in data.pop("policies")
            )
        if "budgets" in data:
            budgets = data.pop("budgets")
            if not budgets:
                raise ConfigError("budget list is empty")
            kw["budgets"] = tuple(int(k) for k in budgets)
        if "ssl" in data:
            kw["ssl"] = tuple(SslConfig(s) if isinstance(s, str) else SslConfig(**s) for s in data.pop("ssl"))
        if "shift_levels" in data:
            kw["shift_levels"] = tuple(ShiftLevel(**s) for s in data.pop("shift_levels"))
        if "shift_band" in data:
            kw["shift_band"] = tuple(data.pop("shift_band"))
        if "train" in data:
            t = dict(data.pop("train"))
            mb = MinibootstrapParams(**t.pop("minibootstrap", {}))
            kw["train"] = TrainConfig(minibootstrap=mb, **t)
        if "scoring" in data:
            kw["scoring"] = ScoringConfig(**data.pop("scoring"))
        known = {"auto_shift", "n_trials", "seed", "out_dir", "workers"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown experiment config fields: {sorted(unknown)}")
        kw.update(data)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


def _plain(obj):
    """Tuples to lists, recursively, so YAML output stays free of python tags."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def apply_overrides(data: Dict, overrides: Sequence[str]) -> Dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars."""
    data = json.loads(json.dumps(data or {}))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} goes through a non-mapping field")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


# ---------------------------------------------------------------- results

@dataclass(frozen=True)
class TrialRow:
    study: str         # "sweep" or a shift level name
    policy: str
    budget: int
    trial: int
    world_seed: int
    shift: float
    mean_ap: float
    ss_fraction: float = 0.0
    queries_used: int = 0
    pseudo_precision: float = float("nan")
    aborted: str = ""


@dataclass(frozen=True)
class TrialResult:
    """Aggregate over trials for one (study, policy, budget) cell."""

    study: str
    policy: str
    budget: int
    maps: Tuple[float, ...]
    mean: float
    std: float
    ss_fraction: float
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def table_cell(self) -> str:
        return f"{100 * self.mean:.1f} ± {100 * self.std:.1f}"


ROW_FIELDS = [f for f in TrialRow.__dataclass_fields__]
AGG_FIELDS = ["study", "policy", "budget", "n_trials", "mean_map", "std_map", "ss_fraction", "table_cell"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def aggregate(rows: Sequence[TrialRow], timings: Optional[Dict] = None) -> List[TrialResult]:
    """Group rows by (study, policy, budget). Population std, so one trial gives 0.

    A cell with an aborted trial gets NaN mean and std: its statistics would
    otherwise silently cover fewer trials than configured.
    """
    groups: Dict[Tuple[str, str, int], List[TrialRow]] = {}
    for r in rows:
        groups.setdefault((r.study, r.policy, r.budget), []).append(r)
    out = []
    for (study, policy, budget), rs in groups.items():
        rs = sorted(rs, key=lambda r: r.trial)
        maps = tuple(r.mean_ap for r in rs)
        if any(r.aborted for r in rs):
            mean = std = float("nan")
        else:
            mean, std = float(np.mean(maps)), float(np.std(maps))
        t = (timings or {}).get(f"{study}/{policy}/{budget}", {})
        out.append(TrialResult(study, policy, budget, maps, mean, std,
                               float(np.mean([r.ss_fraction for r in rs])), t))
    return out


def write_rows(path, rows: Sequence[TrialRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROW_FIELDS)
        for r in rows:
            w.writerow([_fmt(getattr(r, f)) for f in ROW_FIELDS])


def read_rows(path) -> List[TrialRow]:
    types = {"budget": int, "trial": int, "world_seed": int, "queries_used": int,
             "shift": float, "mean_ap": float, "ss_fraction": float, "pseudo_precision": float}
    with open(path, newline="") as fh:
        return [TrialRow(**{k: types.get(k, str)(v) for k, v in rec.items()}) for rec in csv.DictReader(fh)]


def write_aggregate(path, results: Sequence[TrialResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGG_FIELDS)
        for r in results:
            w.writerow([r.study, r.policy, r.budget, len(r.maps), _fmt(r.mean), _fmt(r.std),
                        _fmt(r.ss_fraction), r.table_cell])


def emit_plots_data(results: Sequence[TrialResult], out_dir) -> List[Path]:
    """One CSV per policy with columns ``k, mean_map, std_map``, sorted by k."""
    if not results:
        raise ConfigError("no results to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_policy: Dict[Tuple[str, str], List[TrialResult]] = {}
    for r in results:
        by_policy.setdefault((r.study, r.policy), []).append(r)
    paths = []
    for (study, policy), rs in sorted(by_policy.items()):
        name = f"{policy}.csv" if study == "sweep" else f"{study}_{policy}.csv"
        path = out / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "mean_map", "std_map"])
            for r in sorted(rs, key=lambda r: r.budget):
                w.writerow([r.budget, _fmt(r.mean), _fmt(r.std)])
        paths.append(path)
    return paths


# ---------------------------------------------------------------- trials

def _trial_world(cfg: ExperimentConfig, trial: int, shift: Union[float, str, None]) -> Tuple[World, float]:
    wcfg = replace(cfg.world, seed=cfg.trial_seed(trial))
    if shift == AUTO:
        s, _ = calibrate_shift(wcfg, cfg.shift_band, train=cfg.train)
        wcfg = replace(wcfg, shift_magnitude=s)
    elif shift is not None:
        wcfg = replace(wcfg, shift_magnitude=float(shift))
    return generate_world(wcfg), wcfg.shift_magnitude


def _aborted_row(study, policy, budget, trial, world_seed, shift, exc) -> TrialRow:
    logger.error("cell %s/%s/k=%d/trial=%d aborted: %s", study, policy, budget, trial, exc)
    return TrialRow(study, policy, budget, trial, world_seed, shift, float("nan"), aborted=f"{type(exc).__name__}: {exc}")


def _sweep_trial(cfg: ExperimentConfig, trial: int) -> Tuple[List[TrialRow], Dict]:
    ws = cfg.trial_seed(trial)
    timings: Dict[str, Dict[str, float]] = {}
    try:
        t0 = time.perf_counter()
        world, shift = _trial_world(cfg, trial, AUTO if cfg.auto_shift else None)
        seed_model = supervised_phase(world.source, cfg.world.num_classes, cfg.train)
        seed_map = evaluate(seed_model, world.target_test).mean_ap
        setup = time.perf_counter() - t0
    except Exception as exc:  # the whole trial is lost; every cell reports it
        rows = [_aborted_row("sweep", p.name, k, trial, ws, float("nan"), exc)
                for p in cfg.policies for k in (0,) + cfg.budgets]
        return rows, timings
    rows = [TrialRow("sweep", p.name, 0, trial, ws, shift, seed_map) for p in cfg.policies]
    oracle = GroundTruthOracle(world.target_frames)
    cache: Dict = {}
    for p in cfg.policies:
        for k in cfg.budgets:
            t0 = time.perf_counter()
            try:
                model, rep = weakly_supervised_phase(
                    seed_model, world.stream(), oracle, world.source, p.config(k), None,
                    cfg.train, cfg.scoring, seed=ws, cache=cache,
                )
                rows.append(TrialRow("sweep", p.name, k, trial, ws, shift,
                                     evaluate(model, world.target_test).mean_ap,
                                     rep.ss_fraction, rep.queries_used))
            except Exception as exc:
                rows.append(_aborted_row("sweep", p.name, k, trial, ws, shift, exc))
            timings[f"sweep/{p.name}/{k}/{trial}"] = {"cell": time.perf_counter() - t0, "setup": setup}
    return rows, timings


def _shift_trial(cfg: ExperimentConfig, trial: int) -> Tuple[List[TrialRow], Dict]:
    ws = cfg.trial_seed(trial)
    rows: List[TrialRow] = []
    timings: Dict[str, Dict[str, float]] = {}
    for level in cfg.shift_levels:
        t0 = time.perf_counter()
        try:
            world, shift = _trial_world(cfg, trial, level.shift)
            source = world.source
            if level.source_subsample is not None:
                source = subsample(source, level.source_subsample, ws)
            seed_model = supervised_phase(source, cfg.world.num_classes, cfg.train)
            rows.append(TrialRow(level.name, SEED_POLICY, 0, trial, ws, shift,
                                 evaluate(seed_model, world.target_test).mean_ap))
        except Exception as exc:
            rows.extend(_aborted_row(level.name, p, 0, trial, ws, float("nan"), exc)
                        for p in (SEED_POLICY,) + tuple(s.variant for s in cfg.ssl))
            continue
        oracle = GroundTruthOracle(world.target_frames)
        cache: Dict = {}
        for ss in cfg.ssl:
            t1 = time.perf_counter()
            try:
                model, rep = weakly_supervised_phase(
                    seed_model, world.stream(), oracle, source, None, ss,
                    cfg.train, cfg.scoring, seed=ws, cache=cache,
                )
                prec = rep.pseudo_precision
                rows.append(TrialRow(level.name, ss.variant, 0, trial, ws, shift,
                                     evaluate(model, world.target_test).mean_ap, rep.ss_fraction, 0,
                                     float("nan") if prec is None else prec))
            except Exception as exc:
                rows.append(_aborted_row(level.name, ss.variant, 0, trial, ws, shift, exc))
            timings[f"{level.name}/{ss.variant}/0/{trial}"] = {"cell": time.perf_counter() - t1}
        timings[f"{level.name}/{SEED_POLICY}/0/{trial}"] = {"level": time.perf_counter() - t0}
    return rows, timings


def _run_trials(fn, cfg: ExperimentConfig) -> Tuple[List[TrialRow], Dict]:
    trials = range(cfg.n_trials)
    if cfg.workers > 1 and cfg.n_trials > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, cfg.n_trials)) as pool:
            parts = list(pool.map(fn, [cfg] * cfg.n_trials, trials))
    else:
        parts = [fn(cfg, t) for t in trials]
    rows: List[TrialRow] = []
    timings: Dict = {}
    for r, t in parts:  # results come back in trial order regardless of completion order
        rows.extend(r)
        timings.update(t)
    order = {p.name: i for i, p in enumerate(cfg.policies)}
    order.update({SEED_POLICY: -1})
    order.update({s.variant: i for i, s in enumerate(cfg.ssl)})
    rows.sort(key=lambda r: (r.study, order.get(r.policy, 0), r.policy, r.budget, r.trial))
    return rows, timings


def _cell_timings(timings: Dict) -> Dict[str, Dict[str, float]]:
    """Collapse per-trial timings to per-cell means."""
    acc: Dict[str, List[float]] = {}
    for key, t in timings.items():
        cell = key.rsplit("/", 1)[0]
        acc.setdefault(cell, []).append(sum(t.values()))
    return {k: {"mean_seconds": float(np.mean(v))} for k, v in acc.items()}


def _write_outputs(cfg: ExperimentConfig, prefix: str, rows, timings, out_dir) -> List[TrialResult]:
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = aggregate(rows, _cell_timings(timings))
    write_rows(out / f"{prefix}_trials.csv", rows)
    write_aggregate(out / f"{prefix}_summary.csv", results)
    with open(out / f"{prefix}_timings.json", "w") as fh:
        json.dump(timings, fh, indent=1, sort_keys=True)
    cfg.dump(out / f"{prefix}_config.yaml")
    return results


def run_budget_sweep(cfg: ExperimentConfig, out_dir=None) -> Tuple[List[TrialResult], List[TrialRow]]:
    """AL policies x budgets x trials, SSL disabled. Writes ``sweep_*`` files."""
    if not cfg.budgets:
        raise ConfigError("budget list is empty")
    if not cfg.policies:
        raise ConfigError("policy grid is empty")
    rows, timings = _run_trials(_sweep_trial, cfg)
    return _write_outputs(cfg, "sweep", rows, timings, out_dir), rows


def run_shift_study(cfg: ExperimentConfig, out_dir=None) -> Tuple[List[TrialResult], List[TrialRow]]:
    """Seed vs each SSL variant at every shift level. Writes ``shift_*`` files."""
    if not cfg.shift_levels:
        raise ConfigError("no shift levels configured")
    rows, timings = _run_trials(_shift_trial, cfg)
    return _write_outputs(cfg, "shift", rows, timings, out_dir), rows


def any_aborted(rows: Sequence[TrialRow]) -> bool:
    return any(r.aborted for r in rows)
