"""Experiment configuration: one YAML file drives every CLI subcommand."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .adaptation import Hyperparams
from .errors import ConfigurationError
from .nn_core import ArchSpec
from .stream import StreamConfig

OUTPUT_ROOT_ENV = "PAFTTA_OUTPUT_ROOT"

# Named method variants: hyperparameter overrides on top of the base ``hp`` section.
VARIANT_PRESETS: dict[str, dict] = {
    "source": {"method": "source", "kip_enabled": False},
    "tent": {"method": "tent", "kip_enabled": False},
    "adapt_filter": {"method": "adapt_filter", "kip_enabled": False},
    "ema_filter": {"method": "ema_filter", "kip_enabled": False},
    "paf": {"method": "paf", "kip_enabled": False},
    "paf_kip": {"method": "paf", "kip_enabled": True},
    # filter ablation
    "pr_only": {"method": "paf", "filters": "pr_only", "kip_enabled": False},
    "aux_only": {"method": "paf", "filters": "aux_only", "kip_enabled": False},
    # soft/hard grid; softmin_hardmax is the default PAF loss
    "softmin_hardmax": {"method": "paf", "soft_min": True, "hard_max": True, "kip_enabled": False},
    "hardmin_hardmax": {"method": "paf", "soft_min": False, "hard_max": True, "kip_enabled": False},
    "softmin_softmax": {"method": "paf", "soft_min": True, "hard_max": False, "kip_enabled": False},
    "hardmin_softmax": {"method": "paf", "soft_min": False, "hard_max": False, "kip_enabled": False},
}

DEFAULT_VARIANTS = ("source", "tent", "adapt_filter", "ema_filter", "paf_kip")

HP_AXES = ("alpha", "tau", "tau_factor", "beta", "gamma")
STREAM_AXES = ("batch_size", "open_ratio")
SWEEP_AXES = HP_AXES + STREAM_AXES


@dataclass(frozen=True)
class Variant:
    name: str
    overrides: dict = field(default_factory=dict)

    def hyperparams(self, base: Hyperparams) -> Hyperparams:
        try:
            return base.with_(**self.overrides)
        except TypeError as exc:
            raise ConfigurationError(f"variant {self.name!r}: {exc}") from exc

    def to_dict(self) -> dict:
        return {"name": self.name, "overrides": dict(sorted(self.overrides.items()))}

    @classmethod
    def parse(cls, item) -> "Variant":
        """Accept a preset name, or a mapping with ``name`` plus optional
        ``preset`` and ``overrides`` (or inline override keys)."""
        if isinstance(item, str):
            if item not in VARIANT_PRESETS:
                raise ConfigurationError(f"unknown variant preset {item!r}; known: {sorted(VARIANT_PRESETS)}")
            return cls(item, dict(VARIANT_PRESETS[item]))
        if not isinstance(item, dict) or "name" not in item:
            raise ConfigurationError(f"variant entry needs a name: {item!r}")
        item = dict(item)
        name = str(item.pop("name"))
        preset = item.pop("preset", None)
        if preset is not None and preset not in VARIANT_PRESETS:
            raise ConfigurationError(f"unknown variant preset {preset!r}")
        overrides = dict(VARIANT_PRESETS[preset]) if preset is not None else {}
        overrides.update(item.pop("overrides", {}) or {})
        overrides.update(item)
        unknown = set(overrides) - set(Hyperparams.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"variant {name!r}: unknown hyperparameters {sorted(unknown)}")
        return cls(name, overrides)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    lr: float = 1e-3
    batch_size: int = 128
    bn_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr", float(self.lr))
        object.__setattr__(self, "bn_momentum", float(self.bn_momentum))
        if self.epochs < 0:
            raise ConfigurationError("train.epochs must be >= 0")


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigurationError(f"sweep axis must be one of {SWEEP_AXES}, got {self.axis!r}")
        if not self.values:
            raise ConfigurationError("sweep needs at least one value")


@dataclass(frozen=True)
class ExperimentConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    hidden: tuple[int, ...] = (64, 64)
    bn_eps: float = 1e-5
    train: TrainConfig = field(default_factory=TrainConfig)
    hp: Hyperparams = field(default_factory=Hyperparams)
    variants: tuple[Variant, ...] = tuple(Variant.parse(v) for v in DEFAULT_VARIANTS)
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs/reference"
    sweep: SweepSpec | None = None
    pooling: str = "domain"
    log_samples: bool = True

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")
        if not self.variants:
            raise ConfigurationError("at least one method variant is required")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate variant names: {names}")
        if self.pooling not in ("domain", "global"):
            raise ConfigurationError("pooling must be 'domain' or 'global'")
        for v in self.variants:
            v.hyperparams(self.hp)  # fail early on bad overrides

    @property
    def arch(self) -> ArchSpec:
        return ArchSpec(self.stream.dim, self.stream.num_classes, tuple(self.hidden), self.bn_eps)

    def to_dict(self) -> dict:
        return {
            "stream": self.stream.to_dict(),
            "arch": {"hidden": list(self.hidden), "eps": self.bn_eps},
            "train": asdict(self.train),
            "hp": self.hp.to_dict(),
            "variants": [v.to_dict() for v in self.variants],
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "sweep": None if self.sweep is None else {"axis": self.sweep.axis, "values": list(self.sweep.values)},
            "pooling": self.pooling,
            "log_samples": self.log_samples,
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        d = dict(d or {})
        known = {"stream", "arch", "train", "hp", "variants", "seeds", "output_dir", "sweep", "pooling", "log_samples"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        kw: dict = {}
        if d.get("stream") is not None:
            kw["stream"] = StreamConfig.from_dict(d["stream"])
        arch = d.get("arch") or {}
        if set(arch) - {"hidden", "eps"}:
            raise ConfigurationError(f"unknown arch fields: {sorted(set(arch) - {'hidden', 'eps'})}")
        if "hidden" in arch:
            kw["hidden"] = tuple(int(h) for h in arch["hidden"])
        if "eps" in arch:
            kw["bn_eps"] = float(arch["eps"])
        if d.get("train") is not None:
            extra = set(d["train"]) - set(TrainConfig.__dataclass_fields__)
            if extra:
                raise ConfigurationError(f"unknown train fields: {sorted(extra)}")
            kw["train"] = TrainConfig(**d["train"])
        if d.get("hp") is not None:
            kw["hp"] = Hyperparams.from_dict(d["hp"])
        if d.get("variants") is not None:
            kw["variants"] = tuple(Variant.parse(v) for v in d["variants"])
        if d.get("seeds") is not None:
            seeds = d["seeds"]
            kw["seeds"] = tuple(int(s) for s in (seeds if isinstance(seeds, (list, tuple)) else [seeds]))
        if d.get("output_dir") is not None:
            kw["output_dir"] = str(d["output_dir"])
        if d.get("sweep") is not None:
            kw["sweep"] = SweepSpec(str(d["sweep"]["axis"]), tuple(d["sweep"]["values"]))
        for key in ("pooling", "log_samples"):
            if d.get(key) is not None:
                kw[key] = d[key]
        return cls(**kw)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def hash(self) -> str:
        """Digest of every field that can change a run's output (not ``output_dir``)."""
        d = self.to_dict()
        d.pop("output_dir")
        return _digest(d)

    def scenario_hash(self) -> str:
        """Digest of the task and source-model settings only."""
        d = self.to_dict()
        return _digest({"stream": d["stream"], "arch": d["arch"], "train": d["train"]})

    def with_sweep_value(self, value) -> "ExperimentConfig":
        """Copy with the sweep axis set to ``value`` and no sweep section."""
        if self.sweep is None:
            raise ConfigurationError("config has no sweep section")
        axis = self.sweep.axis
        if axis in HP_AXES:
            return replace(self, hp=self.hp.with_(**{axis: float(value)}), sweep=None)
        cast = int if axis == "batch_size" else float
        return replace(self, stream=replace(self.stream, **{axis: cast(value)}), sweep=None)


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML: {exc}") from exc
    if doc is not None and not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(doc)


def apply_overrides(cfg: ExperimentConfig, assignments: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    if not assignments:
        return cfg
    d = cfg.to_dict()
    for item in assignments:
        if "=" not in item:
            raise ConfigurationError(f"override must look like key=value: {item!r}")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
            if not isinstance(node, dict):
                raise ConfigurationError(f"cannot set {key}: {p} is not a section")
        node[parts[-1]] = value
    return ExperimentConfig.from_dict(d)


def resolve_output_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out
