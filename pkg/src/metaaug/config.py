"""Run configuration: a flat ``key = value`` text file mapped onto ``RunConfig``."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    dataset: str = "synth"          # "synth" or a path to a MAUG container
    synth_n: int = 2000
    synth_noise: float = 0.05
    synth_shift: int = 1
    split_train: float = 0.7
    split_val: float = 0.1
    split_test: float = 0.2
    seed: int = 0
    # networks
    hidden: str = "256,64"          # task-network hidden sizes; the last is the feature layer
    policy_hidden: int = 100
    policy_features: str = "shared"  # shared | own (frozen copy of the initial extractor)
    # iterations and batches
    T: int = 5000
    n_tr: int = 32
    n_val: int = 32
    mt_factor: int = 1
    # task-network optimizer (real step)
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"        # constant | cosine | theorem1
    c: float = 1.0
    c_prime: float = 1.0
    c_double_prime: float = 1.0
    # policy optimizer (meta step)
    beta: float = 1e-3
    policy_momentum: float = 0.9
    policy_weight_decay: float = 5e-4
    alpha0: float = 0.1
    learn_alpha: bool = True
    alpha_exempt: bool = False      # update log-alpha by plain SGD, outside the policy momentum
    normalize: bool = True
    # sampler
    epsilon: float = 0.1
    sampler_s: int = 0              # refresh period in iterations; 0 = one epoch
    sampler_r: int = 0              # window in iterations; 0 = 50 epochs
    # catalog
    rotate_max_deg: float = 30.0
    # optional pretrain -> joint -> frozen phases
    pretrain_iters: int = 0
    frozen_iters: int = 0
    # outputs
    log_path: str = ""
    checkpoint_path: str = ""
    dist_path: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("gamma", "alpha0", "c", "c_prime", "c_double_prime"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.T < 0 or self.n_tr < 1 or self.n_val < 1 or self.mt_factor < 1:
            raise ConfigError("T >= 0, batch sizes >= 1 and mt_factor >= 1 required")
        fr = (self.split_train, self.split_val, self.split_test)
        if min(fr) < 0 or sum(fr) > 1 + 1e-12:
            raise ConfigError("split fractions must be non-negative and sum to at most 1")
        if self.schedule not in ("constant", "cosine", "theorem1"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.schedule == "theorem1" and self.T < 3:
            raise ConfigError("theorem1 schedule needs T >= 3")
        if self.policy_features not in ("shared", "own"):
            raise ConfigError(f"unknown policy_features {self.policy_features!r}")
        if not 0 <= self.epsilon <= 1:
            raise ConfigError("epsilon must lie in [0, 1]")
        if self.pretrain_iters < 0 or self.frozen_iters < 0 or self.pretrain_iters + self.frozen_iters > self.T:
            raise ConfigError("pretrain_iters + frozen_iters must fit inside T")
        self.hidden_sizes()

    def hidden_sizes(self):
        try:
            sizes = [int(s) for s in str(self.hidden).split(",") if s.strip()]
        except ValueError as e:
            raise ConfigError(f"bad hidden sizes {self.hidden!r}") from e
        if not sizes or min(sizes) < 1:
            raise ConfigError("need at least one positive hidden size")
        return sizes

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = [f"{f.name} = {_fmt(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(name, typ, raw):
    try:
        if typ in ("bool", bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {raw!r}") from e


def parse_config(text: str, **overrides) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    values.update(overrides)
    return RunConfig(**values)


def load_config(path, **overrides) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(p.read_text(encoding="utf-8"), **overrides)
