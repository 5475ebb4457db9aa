"""Run configuration: one JSON document with a section per pipeline stage.

Resolution order is defaults, then the ``--toy`` preset, then the config
file, then command-line overrides. Unknown keys and every invariant
violation are collected and reported together.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .augment import AugmentConfig
from .losses import LossConfig
from .network import NetworkSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class PreprocessSection:
    lo_percentile: float = 0.5
    hi_percentile: float = 99.5

    def violations(self) -> List[str]:
        if not 0 <= self.lo_percentile < self.hi_percentile <= 100:
            return ["need 0 <= lo_percentile < hi_percentile <= 100"]
        return []


@dataclass
class InferenceSection:
    window: Optional[Tuple[int, int, int]] = None  # defaults to trainer.patch_size
    overlap: float = 0.5
    mirror_axes: Tuple[int, ...] = (0, 1, 2)
    save_probabilities: bool = False
    write_nifti: bool = False
    checkpoint: str = "best.pt"

    def violations(self) -> List[str]:
        errs = []
        if not 0 <= self.overlap < 1:
            errs.append(f"overlap must be in [0, 1), got {self.overlap}")
        if any(a not in (0, 1, 2) for a in self.mirror_axes):
            errs.append("mirror_axes must be a subset of (0, 1, 2)")
        return errs


@dataclass
class PostprocessSection:
    enabled: bool = True
    connectivity: int = 26

    def violations(self) -> List[str]:
        if self.connectivity not in (6, 26):
            return [f"connectivity must be 6 or 26, got {self.connectivity}"]
        return []


@dataclass
class PhantomSection:
    n_cases: int = 12
    jitter_spacing: bool = True
    noise_sigma: float = 15.0

    def violations(self) -> List[str]:
        return [] if self.n_cases >= 1 else ["n_cases must be >= 1"]


@dataclass
class SplitSection:
    val_cases: int = 1
    test_fraction: float = 0.25

    def violations(self) -> List[str]:
        errs = []
        if self.val_cases < 1:
            errs.append("val_cases must be >= 1")
        if not 0 < self.test_fraction < 1:
            errs.append("test_fraction must be in (0, 1)")
        return errs


@dataclass
class PathsSection:
    data: Optional[str] = None
    out: str = "runs/default"


@dataclass
class SeedsSection:
    seed: int = 0


@dataclass
class RunConfig:
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceSection = field(default_factory=InferenceSection)
    postprocess: PostprocessSection = field(default_factory=PostprocessSection)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    split: SplitSection = field(default_factory=SplitSection)
    paths: PathsSection = field(default_factory=PathsSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)

    @property
    def window(self) -> Tuple[int, int, int]:
        return tuple(self.inference.window or self.trainer.patch_size)

    def to_dict(self) -> Dict[str, Any]:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def save(self, path) -> Path:
        """Write the resolved config; the file reloads into an equal config."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(to_json_dict(self), indent=2, sort_keys=True))
        return path


TOY_PRESET: Dict[str, Any] = {
    "network": {"levels": 4, "base_features": 8, "supervised_levels": 3},
    # a network this small tolerates, and at desk scale needs, a 10x larger step
    "trainer": {"patch_size": [64, 64, 32], "batch_size": 2, "iterations_per_epoch": 25,
                "max_epochs": 4, "val_patches": 2, "initial_lr": 3e-3},
    "phantom": {"n_cases": 4},
}


# seeds.seed is the single source of randomness; the trainer copy is derived
_DERIVED = {"trainer": ("seed",)}


def _defaults_dict() -> Dict[str, Any]:
    return {f.name: {g.name: g.default for g in dataclasses.fields(f.default_factory)
                     if g.name not in _DERIVED.get(f.name, ())}
            for f in dataclasses.fields(RunConfig)}


def deep_merge(base: Dict[str, Any], override: Dict[str, Any], problems: List[str],
               prefix: str = "") -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in override.items():
        name = f"{prefix}{key}"
        if key not in out:
            problems.append(f"unknown config key '{name}'")
            continue
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                problems.append(f"'{name}' must be an object")
                continue
            out[key] = deep_merge(out[key], value, problems, name + ".")
        else:
            out[key] = value
    return out


def _section(name: str, cls, raw: Dict[str, Any], problems: List[str]):
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        obj = cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.extend(f"{name}: {msg}" for msg in str(exc).split("; "))
        return None
    check = getattr(obj, "violations", None)
    if check is not None and cls is not TrainConfig:
        problems.extend(m if m.startswith(name) else f"{name}: {m}" for m in check())
    return obj


def build_config(overrides: Sequence[Optional[Dict[str, Any]]] = ()) -> RunConfig:
    """Merge override dicts onto the defaults, in order, and validate the result."""
    problems: List[str] = []
    merged = _defaults_dict()
    for o in overrides:
        if o:
            merged = deep_merge(merged, o, problems)
    seed = merged["seeds"]["seed"]
    merged["trainer"]["seed"] = seed
    sections = {f.name: _section(f.name, f.default_factory, merged[f.name], problems)
                for f in dataclasses.fields(RunConfig)}
    net, trainer, loss = sections["network"], sections["trainer"], sections["loss"]
    if trainer is not None:
        problems.extend(f"trainer: {e}" for e in trainer.violations(net))
    if net is not None and loss is not None and loss.level_weights is not None \
            and len(loss.level_weights) != net.supervised_levels:
        problems.append("loss: level_weights length must equal network.supervised_levels")
    window = merged["inference"]["window"]
    if net is not None and window is not None and any(int(w) % net.divisor for w in window):
        problems.append(f"inference: window not divisible by {net.divisor}")
    if problems:
        raise ConfigError(problems)
    return RunConfig(**sections)


def to_json_dict(cfg: RunConfig) -> Dict[str, Any]:
    d = cfg.to_dict()
    for section, keys in _DERIVED.items():
        for k in keys:
            d[section].pop(k, None)
    return d


def load_config_file(path) -> Dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be an object"])
    return data
