"""Experiment configuration: strict schema-validated loading with defaults
recorded for the reproducibility manifest.

Unknown keys are rejected with their field path; every field the loader
fills from a default is listed in the manifest so a run directory fully
reconstructs the run.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TemplateConfig:
    tables: tuple[str, ...]
    sel_ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    frequency: float = 1.0
    has_subquery: bool = False
    has_aggregation: bool = False
    has_group_by: bool = False
    has_order_by: bool = False


@dataclass(frozen=True)
class WorkloadConfig:
    id: str
    templates: tuple[TemplateConfig, ...]
    train_queries: int = 10
    test_queries: int = 4


@dataclass(frozen=True)
class ScheduleEntry:
    start: int
    end: int
    workload: str
    volume_factor: float = 1.0


@dataclass(frozen=True)
class DriftConfig:
    mode: str = "static"  # static | workload_switch | volume_switch | both_switch | non_periodic | explicit
    iterations: int = 10
    period: int = 5
    workload_sequence: tuple[str, ...] = ()
    volume_factors: tuple[float, ...] = (1.0, 0.1)
    non_periodic_seed: int | None = None
    min_run: int = 2
    max_run: int = 8
    schedule: tuple[ScheduleEntry, ...] = ()


@dataclass(frozen=True)
class HubSection:
    sizes: dict[str, int] = field(default_factory=lambda: {"HJ": 2, "NL": 3, "OTH": 1})
    gamma: float = 0.5
    theta_new: float | None = None
    theta_percentile: float = 95.0
    m_min: int = 2
    init: str = "farthest_point"  # or "random"
    b_as_numeric: bool = False
    warm_start_clone: bool = True
    max_prototypes: int = 8


@dataclass(frozen=True)
class TrainerSection:
    episode_size: int = 10
    online_epochs: int = 3
    offline_epochs: int = 30
    learning_rate: float = 3e-3
    drift_detector: str = "oracle"  # or "loss_shift"
    replay_on_drift: bool = True
    online_seconds_cap: float = 3.0
    b_all_cap: int | None = None
    checkpoint_every: int = 0


@dataclass(frozen=True)
class NetworkSection:
    a_widths: tuple[int, ...] = (32, 16, 8)
    module_hidden: int = 32
    rep_dim: int = 32
    att_dim: int = 16
    out_hidden: int = 16
    node_onehot: bool = False
    c_max: int = 64


@dataclass(frozen=True)
class OracleSection:
    noise: float = 0.05
    timeout_factor: float = 50.0
    constants_seed: int | None = None
    latency_scale: float = 1e-4
    latency_floor: float = 1e-6


@dataclass(frozen=True)
class CandidateSection:
    count: int = 4
    join_ops: tuple[str, ...] = ("HJ", "NL")
    include_optimal_prob: float = 1.0


def _default_tables() -> tuple[tuple[str, int], ...]:
    return (("t1", 2000), ("t2", 3000), ("t3", 4000),
            ("t4", 40000), ("t5", 60000), ("t6", 80000))


def _default_workloads() -> tuple[WorkloadConfig, ...]:
    # Two disjoint-table workloads: A joins the small tables (nested loops
    # competitive), B joins the large ones (hash joins dominate).
    a = WorkloadConfig("A", (
        TemplateConfig(("t1", "t2"), {"t1": (0.02, 0.2), "t2": (0.02, 0.2)}),
        TemplateConfig(("t1", "t2", "t3"),
                       {"t1": (0.05, 0.3), "t2": (0.05, 0.3), "t3": (0.05, 0.3)},
                       has_aggregation=True),
    ))
    b = WorkloadConfig("B", (
        TemplateConfig(("t4", "t5"), {"t4": (0.1, 0.6), "t5": (0.1, 0.6)},
                       has_order_by=True),
        TemplateConfig(("t4", "t5", "t6"),
                       {"t4": (0.2, 0.7), "t5": (0.2, 0.7), "t6": (0.2, 0.7)},
                       has_aggregation=True, has_group_by=True),
    ))
    return (a, b)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    systems: tuple[str, ...] = ("limao", "baseline")
    breaks: tuple[str, ...] = ("HJ", "NL")
    tables: tuple[tuple[str, int], ...] = field(default_factory=_default_tables)
    workloads: tuple[WorkloadConfig, ...] = field(default_factory=_default_workloads)
    drift: DriftConfig = field(default_factory=DriftConfig)
    hubs: HubSection = field(default_factory=HubSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    candidates: CandidateSection = field(default_factory=CandidateSection)


# ---------------------------------------------------------------------------
# Strict construction from plain dicts
# ---------------------------------------------------------------------------

_MISSING = dataclasses.MISSING


def _coerce(hint, value, path: str, defaulted: list[str]):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:  # Optional[...]
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{path}: null is not allowed")
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path, defaulted)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path, defaulted)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        item_hint = args[0] if args else typing.Any
        items = [_coerce(item_hint, v, f"{path}[{i}]", defaulted)
                 for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return {str(k): _coerce(args[1], v, f"{path}.{k}", defaulted)
                for k, v in value.items()}
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    # Unparameterized tuples (schema tables, sel ranges) pass through below.
    if isinstance(value, (list, tuple)):
        return tuple(_coerce(typing.Any, v, f"{path}[{i}]", defaulted)
                     for i, v in enumerate(value))
    return value


def _build(cls, data, path: str, defaulted: list[str]):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {data!r}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"{where}: unknown field")
    kwargs = {}
    for name, f in fields.items():
        sub = f"{path}.{name}" if path else name
        if name in data:
            kwargs[name] = _coerce(hints[name], data[name], sub, defaulted)
        else:
            if f.default is _MISSING and f.default_factory is _MISSING:
                raise ConfigError(f"{sub}: required field missing")
            defaulted.append(sub)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def _as_plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _as_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_as_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _as_plain(v) for k, v in obj.items()}
    return obj


def config_from_dict(data: dict) -> tuple[ExperimentConfig, list[str]]:
    defaulted: list[str] = []
    cfg = _build(ExperimentConfig, data, "", defaulted)
    validate_config(cfg)
    return cfg, defaulted


def load_config(path: str | Path) -> tuple[ExperimentConfig, list[str]]:
    """Load, validate, and default-fill a JSON config file."""
    raw = Path(path).read_text()
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> dict:
    """Fully-resolved plain form; reloading it reproduces ``cfg`` exactly."""
    return _as_plain(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(dump_config(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Cross-field validation
# ---------------------------------------------------------------------------

_JOIN_NAMES = ("HJ", "MJ", "NL")


def validate_config(cfg: ExperimentConfig) -> None:
    table_names = [t[0] for t in cfg.tables]
    if len(set(table_names)) != len(table_names):
        raise ConfigError("tables: duplicate table names")
    for i, t in enumerate(cfg.tables):
        if len(t) != 2 or not isinstance(t[0], str):
            raise ConfigError(f"tables[{i}]: expected [name, rows]")
        if not isinstance(t[1], int) or isinstance(t[1], bool) or t[1] <= 0:
            raise ConfigError(f"tables[{i}]: row count must be a positive integer")
    for sys_name in cfg.systems:
        if sys_name not in ("limao", "baseline"):
            raise ConfigError(f"systems: unknown system {sys_name!r}")
    if not cfg.breaks:
        raise ConfigError("breaks: must name at least one join operator")
    for b in cfg.breaks:
        if b not in _JOIN_NAMES:
            raise ConfigError(f"breaks: {b!r} is not a join operator (HJ, MJ, NL)")
    for op in cfg.candidates.join_ops:
        if op not in _JOIN_NAMES:
            raise ConfigError(f"candidates.join_ops: {op!r} is not a join operator")
    if cfg.candidates.count < 2:
        raise ConfigError("candidates.count: need at least 2 candidate plans")
    if not 0.0 <= cfg.candidates.include_optimal_prob <= 1.0:
        raise ConfigError("candidates.include_optimal_prob: must be in [0, 1]")
    for kind in cfg.hubs.sizes:
        if kind != "OTH" and kind not in _JOIN_NAMES:
            raise ConfigError(f"hubs.sizes.{kind}: unknown hub kind")
    if any(v < 1 for v in cfg.hubs.sizes.values()):
        raise ConfigError("hubs.sizes: every hub needs at least one module")

    ids = [w.id for w in cfg.workloads]
    if not ids:
        raise ConfigError("workloads: at least one workload is required")
    if len(set(ids)) != len(ids):
        raise ConfigError("workloads: duplicate workload ids")
    for w in cfg.workloads:
        wpath = f"workloads[{w.id}]"
        if not w.templates:
            raise ConfigError(f"{wpath}.templates: must not be empty")
        if w.train_queries < 1:
            raise ConfigError(f"{wpath}.train_queries: must be >= 1")
        for j, tpl in enumerate(w.templates):
            tpath = f"{wpath}.templates[{j}]"
            if not tpl.tables:
                raise ConfigError(f"{tpath}.tables: must not be empty")
            for t in tpl.tables:
                if t not in table_names:
                    raise ConfigError(f"{tpath}.tables: unknown table {t!r}")
            if len(set(tpl.tables)) != len(tpl.tables):
                raise ConfigError(f"{tpath}.tables: duplicate table")
            if tpl.frequency <= 0:
                raise ConfigError(f"{tpath}.frequency: must be positive")
            for t, rng in tpl.sel_ranges.items():
                if t not in tpl.tables:
                    raise ConfigError(f"{tpath}.sel_ranges.{t}: table not in template")
                lo, hi = (float(rng[0]), float(rng[1])) if len(rng) == 2 else (-1, -1)
                if not (0.0 <= lo <= hi <= 1.0):
                    raise ConfigError(f"{tpath}.sel_ranges.{t}: expected 0 <= lo <= hi <= 1")

    _validate_drift(cfg.drift, set(ids))
    if cfg.trainer.episode_size < 1:
        raise ConfigError("trainer.episode_size: must be >= 1")
    if cfg.trainer.drift_detector not in ("oracle", "loss_shift"):
        raise ConfigError(f"trainer.drift_detector: unknown detector "
                          f"{cfg.trainer.drift_detector!r}")
    widths = cfg.network.a_widths
    if len(widths) < 1 or any(a <= b for a, b in zip(widths, widths[1:])):
        raise ConfigError("network.a_widths: widths must strictly decrease")
    if cfg.oracle.noise < 0 or cfg.oracle.noise >= 1:
        raise ConfigError("oracle.noise: must be in [0, 1)")
    if cfg.oracle.timeout_factor <= 1:
        raise ConfigError("oracle.timeout_factor: must exceed 1")


def _validate_drift(drift: DriftConfig, workload_ids: set[str]) -> None:
    modes = ("static", "workload_switch", "volume_switch", "both_switch",
             "non_periodic", "explicit")
    if drift.mode not in modes:
        raise ConfigError(f"drift.mode: unknown mode {drift.mode!r}")
    if drift.iterations < 1:
        raise ConfigError("drift.iterations: must be >= 1")
    for w in drift.workload_sequence:
        if w not in workload_ids:
            raise ConfigError(f"drift.workload_sequence: unknown workload {w!r}")
    if drift.mode == "explicit":
        if not drift.schedule:
            raise ConfigError("drift.schedule: explicit mode requires a schedule")
        entries = sorted(drift.schedule, key=lambda e: e.start)
        expected = 1
        for e in entries:
            name = f"drift.schedule[{e.start}..{e.end}]"
            if e.workload not in workload_ids:
                raise ConfigError(f"{name}: unknown workload {e.workload!r}")
            if e.start > e.end:
                raise ConfigError(f"{name}: start exceeds end")
            if e.start < expected:
                raise ConfigError(f"{name}: overlaps the previous range "
                                  f"(iteration {e.start} already covered)")
            if e.start > expected:
                raise ConfigError(f"drift.schedule: gap at iteration {expected}")
            expected = e.end + 1
        if expected != drift.iterations + 1:
            raise ConfigError(f"drift.schedule: covers 1..{expected - 1}, "
                              f"expected 1..{drift.iterations}")
    else:
        if drift.mode != "static" and not drift.workload_sequence:
            raise ConfigError(f"drift.workload_sequence: required for mode {drift.mode!r}")
        if drift.mode in ("workload_switch", "both_switch") and len(drift.workload_sequence) < 2:
            raise ConfigError("drift.workload_sequence: switching modes need >= 2 workloads")
        if drift.period < 1:
            raise ConfigError("drift.period: must be >= 1")
        if not (1 <= drift.min_run <= drift.max_run):
            raise ConfigError("drift: need 1 <= min_run <= max_run")
    if not drift.volume_factors or any(v < 0 for v in drift.volume_factors):
        raise ConfigError("drift.volume_factors: need nonnegative factors")
