"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict, fields, replace

from .competition import CompetitionConfig
from .model import ModelConfig

STRATEGIES = (
    "pure_il", "pure_rl", "loss_merging", "il_rl_interval",
    "two_stage", "decoupled_nocomp", "decoupled_comp",
)
RL_METHODS = ("naive_pggs", "adcgs_step_aware")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "decoupled_comp"
    rl_method: str = "adcgs_step_aware"
    total_iters: int = 2000
    seed: int = 0
    # optimizer
    lr: float = 1e-3
    lr_warmup: int = 200
    lr_floor: float = 1e-5
    weight_decay: float = 1e-4
    # loss weights and sampling
    alpha: float = 1.0
    beta: float = 0.005
    gamma: float = 0.9
    group_size: int = 8
    # competition
    comp_k: int = 500
    comp_p: float = 0.9
    comp_theta_mod: float = 0.05
    comp_theta_sig: float = 0.20
    comp_eval_batch: int = 64
    # strategy-specific
    interval_period: int = 100
    stage_split: float = 0.5
    pure_rl_world_model: bool = True
    # data split: fraction of training scenes held out for contests
    val_fraction: float = 0.05
    # model
    d_s: int = 64
    d_w: int = 64
    hidden: int = 64
    kv_slots: int = 4
    mask_mode: str = "inverse_causal"
    sigma_init: float = 0.3
    ema_decay: float = 0.99
    # artifacts
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; valid: {', '.join(STRATEGIES)}")
        if self.rl_method not in RL_METHODS:
            raise ConfigError(f"unknown rl_method {self.rl_method!r}; valid: {', '.join(RL_METHODS)}")
        if self.total_iters < 1:
            raise ConfigError("total_iters must be >= 1")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.interval_period < 1:
            raise ConfigError("interval_period must be >= 1")
        if not 0.0 < self.stage_split < 1.0:
            raise ConfigError("stage_split must lie in (0, 1)")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.mask_mode not in ("none", "causal", "inverse_causal"):
            raise ConfigError(f"unknown mask_mode {self.mask_mode!r}")
        try:
            self.competition
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def competition(self):
        return CompetitionConfig(self.comp_k, self.comp_p, self.comp_theta_mod, self.comp_theta_sig,
                                 self.comp_eval_batch)

    @property
    def decoupled(self):
        return self.strategy.startswith("decoupled")

    @property
    def uses_contests(self):
        # an infinite moderate threshold makes every contest a no-op, so none are run
        return self.strategy == "decoupled_comp" and math.isfinite(self.comp_theta_mod)

    def model_config(self, obs_dim, n_steps):
        return ModelConfig(obs_dim=obs_dim, n_steps=n_steps, d_s=self.d_s, d_w=self.d_w, hidden=self.hidden,
                           kv_slots=self.kv_slots, sigma_init=self.sigma_init, mask_mode=self.mask_mode,
                           ema_decay=self.ema_decay)

    def to_dict(self):
        return asdict(self)

    def hash(self):
        payload = json.dumps(_jsonable(self.to_dict()), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def with_overrides(self, **kw):
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **kw)


def _jsonable(d):
    return {k: (repr(v) if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


def _coerce(name, text, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {text!r}") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {text!r}") from None
    return text


def parse_config(text, base=None):
    """Parse ``key = value`` lines (``#`` comments allowed) into a TrainConfig."""
    base = base or TrainConfig()
    defaults = base.to_dict()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, val, defaults[key])
    return base.with_overrides(**values)


def load_config(path, base=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base)


def format_config(cfg):
    lines = []
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
