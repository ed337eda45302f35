"""Training configuration: every feature flag, schedule and hyperparameter in one place."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from . import antialias, binning
from .densify import DensifySchedule
from .optim import OPTIMIZER_MODES, LRSchedule
from .raster_forward import RenderSettings


class ConfigError(ValueError):
    """Invalid configuration or dataset; the CLI maps it to exit code 1."""


@dataclass
class TrainConfig:
    total_iterations: int = 30000
    seed: int = 0
    dtype: str = "float32"
    # rendering features
    bounding: str = "exact"
    sort: str = "two_stage"
    truncation: str = "classic"
    sigma_cut: float = 3.33
    early_stop: str = "blend_then_stop"
    backward: str = "per_gaussian"
    aa: str = "off"
    mip_detach: bool = True
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    # training features
    optimizer: str = "fused"
    morton: bool = True
    gauss4d: bool = False
    batch_size: int = 1
    # densification schedule
    densify_warmup: int = 600
    densify_interval: int = 100
    densify_end: int = 14900
    opacity_reset_interval: int = 3000
    grad_threshold: float = 2e-4
    prune_opacity: float = 0.05
    morton_interval: int = 5000
    sh_ramp: int = 1000
    aa_recompute_interval: int = antialias.RECOMPUTE_INTERVAL
    # learning rates
    lr_scales: float = 0.005
    lr_rotations: float = 0.001
    lr_opacity: float = 0.025
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 1.25e-4
    lr_means_init: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_means_steps: int = 30000
    # io
    dataset: str = ""
    output: str = ""
    checkpoint_interval: int = 5000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        choices = {"bounding": binning.BOUNDING_MODES, "sort": ("combined", "two_stage"),
                   "truncation": ("classic", "response"),
                   "early_stop": ("blend_then_stop", "skip_before_blend"),
                   "backward": ("per_pixel", "per_gaussian"), "aa": antialias.AA_MODES,
                   "optimizer": OPTIMIZER_MODES, "dtype": ("float32", "float64")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name}={getattr(self, name)!r}; expected one of {allowed}")
        for name in ("total_iterations", "densify_warmup", "densify_end", "morton_interval"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("batch_size", "densify_interval", "opacity_reset_interval", "sh_ramp",
                     "aa_recompute_interval", "checkpoint_interval", "lr_means_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if len(self.background) != 3:
            raise ConfigError("background needs three channels")
        if self.optimizer.startswith("fused_backward") and self.backward != "per_gaussian":
            raise ConfigError("fused_backward optimizers need the per_gaussian backward")

    @classmethod
    def toy(cls, iterations: int = 2000, **overrides) -> "TrainConfig":
        """Schedule compressed to ``iterations`` steps for the small synthetic scene.

        Densification runs from iteration 100 every 100 steps and stops at 75%;
        Morton reordering every 500 steps; the position decay spans the run.
        The opacity reset interval keeps its default, so short runs never reset.
        """
        base = dict(total_iterations=iterations, densify_warmup=100, densify_interval=100,
                    densify_end=int(0.75 * iterations), morton_interval=500,
                    lr_means_steps=max(iterations, 1))
        base.update(overrides)
        return cls(**base)

    # derived objects ------------------------------------------------------

    def render_settings(self) -> RenderSettings:
        aa = "off" if self.gauss4d else self.aa
        return RenderSettings(bounding=self.bounding, sort=self.sort, truncation=self.truncation,
                              sigma_cut=self.sigma_cut, early_stop=self.early_stop,
                              backward=self.backward, aa=aa, mip_detach=self.mip_detach)

    def densify_schedule(self) -> DensifySchedule:
        return DensifySchedule(self.densify_warmup, self.densify_interval, self.densify_end,
                               self.opacity_reset_interval, self.grad_threshold, self.prune_opacity,
                               self.morton_interval if self.morton else 0, self.sh_ramp)

    def lr_schedule(self) -> LRSchedule:
        return LRSchedule(self.lr_scales, self.lr_rotations, self.lr_opacity, self.lr_sh_dc,
                          self.lr_sh_rest, self.lr_means_init, self.lr_means_final, self.lr_means_steps)

    # serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            with open(path) as f:
                return cls.from_json(f.read())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None

    def with_overrides(self, pairs) -> "TrainConfig":
        """Apply ``key=value`` strings; values are parsed as JSON, falling back to strings."""
        data = self.to_dict()
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, raw = pair.split("=", 1)
            key = key.strip()
            if key not in data:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            if isinstance(data[key], float) and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if type(value) is not type(data[key]):
                raise ConfigError(f"{key} expects {type(data[key]).__name__}, got {raw!r}")
            data[key] = value
        return TrainConfig.from_dict(data)
