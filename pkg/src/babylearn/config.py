"""Run configuration and the ``key = value`` config file format."""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .detector import TrainConfig
from .features import DescriptorConfig
from .graphshift import AffinityParams
from .mining import (DEFAULT_EXEMPLAR_SEED_THRESHOLD, DEFAULT_GIST_THRESHOLD, DEFAULT_SEED_THRESHOLD,
                     MiningParams)
from .simulator import WorldConfig


@dataclass(frozen=True)
class RunConfig:
    # affinity graph and mining
    alpha: float = 0.3
    detect_floor: float = -3.0
    seed_threshold: float = DEFAULT_SEED_THRESHOLD
    exemplar_seed_threshold: float = DEFAULT_EXEMPLAR_SEED_THRESHOLD
    gist_threshold: float = DEFAULT_GIST_THRESHOLD
    graph_cap: int = 200
    instances_per_video: int = 2
    # detector training
    nms_threshold: float = 0.3
    c_positive: float = 0.5
    c_negative: float = 0.01
    hn_rounds: int = 3
    hn_batch: int = 2000
    convergence_tol: float = 1e-6
    max_epochs: int = 2000  # loop budget; standalone TrainConfig defaults to 20000
    feature_scale: float = 10.0
    bias_scale: float = 10.0
    ridge_lambda: float = 0.03
    # loop schedule
    n_iterations: int = 15
    extra_iterations: int = 2
    seed_count: int = 2
    kmeans_k: int = 10
    videos_per_iteration: int = 0  # 0: whole corpus
    mined_as_negatives: bool = True
    # bounding-box regression stage
    regression_top_k: int = 2000
    regression_fraction: float = 0.3
    regression_iou: float = 0.8
    # evaluation
    match_iou: float = 0.5
    eval_top_k: int = 200
    # region descriptor
    descriptor_grid: int = 6
    orientation_bins: int = 8
    context_pad_fraction: float = 16.0 / 227.0
    rng_seed: int = 0
    workers: int = 1
    # paths
    corpus: str = ""
    state: str = ""
    report: str = ""
    world: WorldConfig = field(default_factory=WorldConfig)

    def __post_init__(self):
        positive = ("seed_count", "kmeans_k", "graph_cap", "hn_batch", "max_epochs")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_iterations < 0 or self.videos_per_iteration < 0:
            raise ValueError("iteration and batch counts must be non-negative")

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.c_positive, self.c_negative, self.hn_rounds, self.hn_batch,
                           self.convergence_tol, self.max_epochs, self.ridge_lambda,
                           self.feature_scale, self.bias_scale)

    def descriptor(self) -> DescriptorConfig:
        return DescriptorConfig(grid=self.descriptor_grid, orientation_bins=self.orientation_bins,
                                context_pad_fraction=self.context_pad_fraction)

    def mining_params(self) -> MiningParams:
        return MiningParams(self.gist_threshold, self.seed_threshold, self.graph_cap,
                            self.instances_per_video, AffinityParams(self.alpha, self.detect_floor),
                            exemplar_seed_threshold=self.exemplar_seed_threshold)

    def with_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        return apply_overrides(self, overrides)


def _coerce(value: str, current):
    text = value.strip()
    if isinstance(current, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(current, str):
        return text
    parsed = ast.literal_eval(text)
    if isinstance(current, float) and isinstance(parsed, int):
        parsed = float(parsed)
    if isinstance(current, tuple) and isinstance(parsed, list):
        parsed = tuple(parsed)
    if isinstance(current, tuple) and not isinstance(parsed, tuple):
        raise ValueError(f"expected a tuple, got {value!r}")
    if isinstance(current, (int, float)) and not isinstance(parsed, (int, float)):
        raise ValueError(f"expected a number, got {value!r}")
    return parsed


def apply_overrides(cfg: RunConfig, overrides: dict[str, object]) -> RunConfig:
    """Apply ``key -> value`` pairs; ``world.<key>`` addresses the simulator config."""
    top: dict[str, object] = {}
    world: dict[str, object] = {}
    run_fields = {f.name for f in dataclasses.fields(RunConfig)}
    world_fields = {f.name for f in dataclasses.fields(WorldConfig)}
    for key, value in overrides.items():
        if key.startswith("world."):
            name = key[len("world."):]
            if name not in world_fields:
                raise KeyError(f"unknown world config key {name!r}")
            current = getattr(cfg.world, name)
            world[name] = _coerce(value, current) if isinstance(value, str) else value
        else:
            if key not in run_fields or key == "world":
                raise KeyError(f"unknown config key {key!r}")
            current = getattr(cfg, key)
            top[key] = _coerce(value, current) if isinstance(value, str) else value
    if world:
        top["world"] = dataclasses.replace(cfg.world, **world)
    return dataclasses.replace(cfg, **top)


def parse_config_text(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = apply_overrides(cfg, parse_config_text(Path(path).read_text()))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        if f.name == "world":
            continue
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    for f in dataclasses.fields(WorldConfig):
        lines.append(f"world.{f.name} = {getattr(cfg.world, f.name)}")
    return "\n".join(lines) + "\n"
