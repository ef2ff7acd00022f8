"""JSON run configuration: the unit of reproducibility.

Every random choice is driven by an explicit seed in the file; command-line
flags only select the command and output paths. Validation errors name the
offending key path; JSON syntax errors carry line and column.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .caching import LOCATIONS
from .dit import BackboneConfig
from .schedule import ORIENTATIONS, PRESETS, TPOST_MODES
from .training import BackboneTrainConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "procedural"
    seed: int = 1
    n_per_class: int = 64
    idx_images: str | None = None
    idx_labels: str | None = None


@dataclass
class IlfConfig:
    loop_start: int = 2
    loop_end: int = 4
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class PlanConfig:
    steps: int = 8
    tpost_mode: str = "rescaled"
    preset: str = "skip_inner"
    orientation: str = "n_over_m"


@dataclass
class CacheSection:
    location: str = "inner"
    count: int = 4
    refresh_period: int = 2


@dataclass
class SampleConfig:
    n_samples: int = 16
    class_id: int | None = None
    seed: int = 4
    guidance_scale: float = 1.0


@dataclass
class BenchConfig:
    mock_n: int | None = None
    repeats: int = 2
    n_samples: int = 1
    entries: list = field(default_factory=list)


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/toy"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    backbone_checkpoint: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    backbone_train: BackboneTrainConfig = field(default_factory=BackboneTrainConfig)
    ilf: IlfConfig = field(default_factory=IlfConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    cache: CacheSection = field(default_factory=CacheSection)
    sample: SampleConfig = field(default_factory=SampleConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)


def _section(raw: dict, key: str) -> dict:
    val = raw.pop(key, {})
    if not isinstance(val, dict):
        raise ConfigError(f"config key {key!r} must be an object")
    return val


def _build(cls, raw: dict, path: str):
    """Instantiate a dataclass from a dict, rejecting unknown keys."""
    known = cls.__dataclass_fields__
    kwargs = {}
    for key, val in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {path}.{key!r}")
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config section {path!r}: {exc}") from exc


def _expect(types, val, path):
    if not isinstance(val, types) or isinstance(val, bool):
        raise ConfigError(f"config key {path!r} has wrong type {type(val).__name__}")
    return val


def parse_run_config(raw: dict, source: str = "<config>") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    raw = dict(raw)

    backbone = _build(BackboneConfig, _section(raw, "backbone"), "backbone")
    data = _build(DataConfig, _section(raw, "data"), "data")
    backbone_train = _build(BackboneTrainConfig, _section(raw, "backbone_train"),
                            "backbone_train")

    ilf_raw = _section(raw, "ilf")
    train = _build(TrainConfig, _section(ilf_raw, "train"), "ilf.train")
    ilf = _build(IlfConfig, ilf_raw, "ilf")
    ilf.train = train

    plan = _build(PlanConfig, _section(raw, "plan"), "plan")
    cache = _build(CacheSection, _section(raw, "cache"), "cache")
    sample = _build(SampleConfig, _section(raw, "sample"), "sample")

    bench_raw = _section(raw, "bench")
    entries = bench_raw.pop("entries", [])
    bench = _build(BenchConfig, bench_raw, "bench")
    bench.entries = entries if isinstance(entries, list) else _bad("bench.entries")

    cfg = RunConfig(
        seed=_expect(int, raw.pop("seed", 0), "seed"),
        out_dir=str(raw.pop("out_dir", "runs/toy")),
        backbone=backbone,
        backbone_checkpoint=raw.pop("backbone_checkpoint", None),
        data=data,
        backbone_train=backbone_train,
        ilf=ilf,
        plan=plan,
        cache=cache,
        sample=sample,
        bench=bench,
    )
    if raw:
        raise ConfigError(f"{source}: unknown top-level config keys {sorted(raw)}")
    _validate(cfg, source)
    return cfg


def _bad(path):
    raise ConfigError(f"config key {path!r} must be a list")


def _validate(cfg: RunConfig, source: str):
    n = cfg.backbone.n_blocks
    if not (0 <= cfg.ilf.loop_start <= cfg.ilf.loop_end < n):
        raise ConfigError(
            f"{source}: ilf loop ({cfg.ilf.loop_start}, {cfg.ilf.loop_end}) "
            f"invalid for {n} blocks")
    if cfg.plan.tpost_mode not in TPOST_MODES:
        raise ConfigError(f"{source}: plan.tpost_mode must be one of {TPOST_MODES}")
    if cfg.plan.preset not in PRESETS:
        raise ConfigError(f"{source}: plan.preset must be one of {PRESETS}")
    if cfg.plan.orientation not in ORIENTATIONS:
        raise ConfigError(f"{source}: plan.orientation must be one of {ORIENTATIONS}")
    if not (1 <= cfg.plan.steps <= cfg.backbone.T):
        raise ConfigError(f"{source}: plan.steps must lie in [1, T]")
    if cfg.cache.location not in LOCATIONS:
        raise ConfigError(f"{source}: cache.location must be one of {LOCATIONS}")
    if not (0 <= cfg.cache.count <= n):
        raise ConfigError(f"{source}: cache.count must lie in [0, {n}]")
    if cfg.cache.refresh_period < 1:
        raise ConfigError(f"{source}: cache.refresh_period must be >= 1")
    if cfg.data.source not in ("procedural", "idx"):
        raise ConfigError(f"{source}: data.source must be 'procedural' or 'idx'")
    if cfg.data.source == "idx" and not (cfg.data.idx_images and cfg.data.idx_labels):
        raise ConfigError(f"{source}: data.source='idx' needs idx_images and idx_labels")
    if cfg.data.source == "procedural" and cfg.data.n_per_class < 1:
        raise ConfigError(f"{source}: data.n_per_class must be >= 1")
    if cfg.sample.class_id is not None and not (
            0 <= cfg.sample.class_id < cfg.backbone.n_classes):
        raise ConfigError(f"{source}: sample.class_id out of range")
    if cfg.sample.guidance_scale < 1.0:
        raise ConfigError(f"{source}: sample.guidance_scale must be >= 1")


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    return parse_run_config(raw, source=path)
