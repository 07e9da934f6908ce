"""Run configuration: JSON sections validated into dataclasses.

Schema (every key optional, unknown keys rejected)::

    {
      "model":   {"dim", "depth", "heads", "g", "k", "mlp_ratio", "dropout",
                  "pe_every_layer", "predictor_depth"},
      "mae":     {"alpha", "ema_m0", "ema_schedule", "mask_token_init",
                  "target_norm", "expose_mask_orientation"},
      "optim":   {"base_lr", "weight_decay", "warmup_epochs", "epochs", "steps",
                  "batch", "beta1", "beta2", "eps", "seg_lr"},
      "ablation": {"ri_oe", "ri_pe", "dual_branch_vs_ae", "ori_embedding", "baseline"},
      "probe":   {"epochs", "lr", "weight_decay", "hidden"},
      "scenario": "zz" | "zso3" | "so3so3",
      "seed": int
    }
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

SCENARIOS = {
    "zz": ("z", "z"),
    "zso3": ("z", "so3"),
    "so3so3": ("so3", "so3"),
}


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 96
    depth: int = 4
    heads: int = 2
    g: int = 16
    k: int = 16
    mlp_ratio: float = 4.0
    dropout: float = 0.0
    pe_every_layer: bool = True
    predictor_depth: int = 1

    def validate(self):
        _positive(self, "dim", "heads", "g", "k", "predictor_depth")
        if self.depth < 0:
            raise ValueError("model.depth must be >= 0")
        if self.dim % self.heads:
            raise ValueError(f"model.dim={self.dim} is not divisible by heads={self.heads}")
        if self.mlp_ratio <= 0:
            raise ValueError("model.mlp_ratio must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("model.dropout must lie in [0, 1)")


@dataclass(frozen=True)
class MAEConfig:
    alpha: float = 0.6
    ema_m0: float = 0.996
    ema_schedule: str = "cosine"
    mask_token_init: float = 0.02
    target_norm: bool = False
    expose_mask_orientation: bool = True

    def validate(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("mae.alpha must lie in (0, 1)")
        if not 0.0 <= self.ema_m0 <= 1.0:
            raise ValueError("mae.ema_m0 must lie in [0, 1]")
        if self.ema_schedule not in ("cosine", "constant"):
            raise ValueError("mae.ema_schedule must be 'cosine' or 'constant'")
        if self.mask_token_init < 0:
            raise ValueError("mae.mask_token_init must be >= 0")


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 5e-4
    weight_decay: float = 0.05
    warmup_epochs: float = 10.0
    epochs: int = 300
    steps: int = 0
    batch: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seg_lr: float = 2e-4

    def validate(self):
        _positive(self, "base_lr", "batch", "epochs")
        if self.weight_decay < 0 or self.warmup_epochs < 0 or self.steps < 0:
            raise ValueError("optim.weight_decay, warmup_epochs and steps must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError("optim betas must lie in [0, 1) and eps must be positive")


@dataclass(frozen=True)
class AblationConfig:
    ri_oe: bool = True
    ri_pe: bool = True
    dual_branch_vs_ae: str = "dual_branch"
    ori_embedding: bool = False
    baseline: bool = False

    def validate(self):
        if self.dual_branch_vs_ae not in ("dual_branch", "ae"):
            raise ValueError("ablation.dual_branch_vs_ae must be 'dual_branch' or 'ae'")


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 300
    lr: float = 1e-2
    weight_decay: float = 1e-4
    hidden: int = 256

    def validate(self):
        _positive(self, "epochs", "lr")
        if self.hidden < 0 or self.weight_decay < 0:
            raise ValueError("probe.hidden and probe.weight_decay must be >= 0")


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    mae: MAEConfig = field(default_factory=MAEConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    scenario: str = "zso3"
    seed: int = 0

    def validate(self):
        for sec in (self.model, self.mae, self.optim, self.ablation, self.probe):
            sec.validate()
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {sorted(SCENARIOS)}")
        return self

    @property
    def invariant(self):
        return not (self.ablation.baseline or self.ablation.ori_embedding)

    def with_updates(self, **sections):
        """Copy with per-section overrides, e.g. ``model={"depth": 2}``."""
        kw = {}
        for name, value in sections.items():
            cur = getattr(self, name)
            kw[name] = replace(cur, **value) if isinstance(value, dict) else value
        return replace(self, **kw).validate()

    def to_dict(self):
        return asdict(self)


_SECTIONS = {
    "model": ModelConfig,
    "mae": MAEConfig,
    "optim": OptimConfig,
    "ablation": AblationConfig,
    "probe": ProbeConfig,
}


def _positive(obj, *names):
    for n in names:
        if getattr(obj, n) <= 0:
            raise ValueError(f"{n} must be positive, got {getattr(obj, n)!r}")


def _coerce(cls, name, raw):
    if not isinstance(raw, dict):
        raise ValueError(f"section {name!r} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ValueError(f"unknown keys in {name!r}: {sorted(unknown)}")
    vals = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValueError(f"{name}.{key} must be a boolean")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ValueError(f"{name}.{key} must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f"{name}.{key} must be a number")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ValueError(f"{name}.{key} must be a string")
        vals[key] = value
    return cls(**vals)


def config_from_dict(raw):
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    unknown = set(raw) - set(_SECTIONS) - {"scenario", "seed"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kw = {name: _coerce(cls, name, raw[name]) for name, cls in _SECTIONS.items() if name in raw}
    if "scenario" in raw:
        kw["scenario"] = raw["scenario"]
    if "seed" in raw:
        if isinstance(raw["seed"], bool) or not isinstance(raw["seed"], int):
            raise ValueError("seed must be an integer")
        kw["seed"] = raw["seed"]
    return Config(**kw).validate()


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def dump_config(cfg, path=None):
    text = json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return text


def full_config():
    """Full-size settings: G=64, K=32, D=384, 12 layers, 6 heads."""
    return Config(model=ModelConfig(dim=384, depth=12, heads=6, g=64, k=32)).validate()


def desk_config(**sections):
    """Small settings used by tests and the CLI defaults."""
    base = Config(
        model=ModelConfig(dim=96, depth=4, heads=2, g=16, k=16),
        optim=OptimConfig(epochs=24, batch=16, warmup_epochs=2.0),
    )
    return base.with_updates(**sections) if sections else base.validate()
