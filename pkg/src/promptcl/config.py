"""Run configuration: JSON file + CLI overrides + PCL_SEED env override."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

POLICY_NAMES = ("pcl", "sasrec-per-task", "sinmo", "fineall", "adapter-only")


@dataclass
class RunConfig:
    # data: either a directory of dataset files or an inline synthetic spec
    data_dir: str | None = None
    synthetic: dict | None = None

    # backbone
    d: int = 64
    n: int = 50
    blocks: int = 2
    heads: int = 2
    dropout: float = 0.2
    # nominal catalog size used only by the parameter-budget selftest
    nominal_items: int = 10000
    nominal_tasks: int = 4

    # prompts
    t: int = 10
    lam: float = 0.1
    init: str = "chain"            # chain | random
    ctx_enabled: bool = True
    ctx_scope: str = "visible"     # visible | all
    ctx_shared: bool = False
    desc_provider: str = "hash"    # hash | zero | file | random
    desc_file: str | None = None

    # optimization
    lr: float = 1e-3               # pretraining
    tune_lr: float = 1e-2          # downstream prompt/adapter tuning
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 50
    patience: int = 5
    min_epochs: int = 0
    batch: int = 128
    split_fractions: tuple = (0.8, 0.1, 0.1)
    pretrain_negatives: int = 1
    tune_negatives: int = 1

    # heads / features
    adapter: str = "linear"        # linear | mlp
    adapter_hidden: int = 64
    attr_tasks: list[int] = field(default_factory=list)

    # evaluation
    protocol: str = "all"          # all | batch
    eval_negatives: int = 100

    # run
    seed: int = 7
    policy: str = "pcl"
    cold_fraction: float = 0.0

    def __post_init__(self):
        if self.policy not in POLICY_NAMES:
            raise ConfigError(f"unknown policy {self.policy!r}; choose from {POLICY_NAMES}")
        if self.init not in ("chain", "random"):
            raise ConfigError(f"unknown init mode {self.init!r}")
        if self.ctx_scope not in ("visible", "all"):
            raise ConfigError(f"unknown ctx scope {self.ctx_scope!r}")
        if self.protocol not in ("all", "batch"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.adapter not in ("linear", "mlp"):
            raise ConfigError(f"unknown adapter {self.adapter!r}")
        if not 1 <= self.t <= self.n:
            raise ConfigError(f"fusion window t={self.t} must lie in [1, n={self.n}]")
        self.split_fractions = tuple(self.split_fractions)
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split_fractions must be 3 values summing to 1, "
                              f"got {self.split_fractions}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def load_config(path=None, overrides: dict | None = None,
                base: dict | None = None) -> RunConfig:
    """Build a config from base dict and/or JSON file, overrides, PCL_SEED."""
    values: dict = dict(base) if base else {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            values.update(json.loads(path.read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    env_seed = os.environ.get("PCL_SEED")
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"PCL_SEED must be an integer, got {env_seed!r}") from None
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from None
