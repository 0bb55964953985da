"""Experiment configuration and its ``key = value`` text format.

Grammar, one item per line::

    # comment                 (also ';')
    [section]                 optional grouping, must be a known section
    key = value               key is a field name or one of ALIASES

Every key not given keeps its default.  Defaults reproduce the reference
federated setting (50 clients, 10% sampling, 300 local steps, C = 10,
sigma = 1.4, ...) on a synthetic dataset.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Tuple

from .errors import ConfigError

SCHEMES = ("fed-one-shot", "fed-iterative", "dp-fed-baseline")
SCHEME_ALIASES = {
    "one-shot": "fed-one-shot",
    "iterative": "fed-iterative",
    "dp-fed": "dp-fed-baseline",
    "baseline": "dp-fed-baseline",
}


@dataclass
class ExperimentConfig:
    # experiment
    scheme: str = "fed-iterative"
    seed: int = 0
    rounds: int = 100
    # federated
    clients: int = 50
    sample_ratio: float = 0.1
    local_steps: int = 300
    batch_size: int = 15
    lr: float = 0.01
    lr_decay: float = 0.99
    momentum: float = 0.5
    comm_direction_factor: int = 2
    # privacy
    clip: float = 10.0
    sigma: float = 1.4
    lambda_val: float = 20.0
    delta: float = 1e-3
    epsilon_budget: float = math.inf
    composition_mode: str = "per-step"
    validation_accounting: str = "paper"
    # lth / pruning
    tickets: int = 3
    lth_iterations: int = 200
    lth_lr: float = 1.2e-3
    lth_batch_size: int = 64
    prune_degree: float = 0.5
    prune_mode: str = "percentile"
    further_prune: float = 0.1
    softmax_temperature: float = 1.0
    tickets_file: str = ""
    recompute_masks: bool = False
    # model
    hidden: Tuple[int, ...] = (32,)
    # data
    dataset: str = "blobs"
    images: str = ""
    labels: str = ""
    public: str = "carve"
    public_fraction: float = 0.2
    public_images: str = ""
    public_labels: str = ""
    blob_classes: int = 10
    blob_dim: int = 20
    blob_separation: float = 4.0
    blob_size: int = 6000
    alpha_dir: float = 1.0
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    # diagnostics
    debug_scores: bool = False
    snapshot_dir: str = ""

    @property
    def sampled_clients(self) -> int:
        """K = ceil(q * U), at least one."""
        return max(1, min(self.clients, math.ceil(self.sample_ratio * self.clients - 1e-9)))

    @property
    def train_fraction(self) -> float:
        return 1.0 - self.val_fraction - self.test_fraction

    def validate(self) -> "ExperimentConfig":
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}", key="scheme")
        positive = ("clients", "local_steps", "batch_size", "lr", "clip", "lambda_val",
                    "epsilon_budget", "tickets", "lth_lr", "lth_batch_size", "alpha_dir",
                    "blob_classes", "blob_dim", "blob_size")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError("must be positive", key=name)
        nonneg = ("rounds", "sigma", "lth_iterations", "momentum")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError("must be non-negative", key=name)
        if not 0 < self.sample_ratio <= 1:
            raise ConfigError("must lie in (0, 1]", key="sample_ratio")
        if not 0 < self.delta < 1:
            raise ConfigError("must lie in (0, 1)", key="delta")
        if not 0 <= self.prune_degree < 1:
            raise ConfigError("must lie in [0, 1)", key="prune_degree")
        if self.scheme == "fed-iterative" and not 0 < self.further_prune < 1:
            raise ConfigError("must lie in (0, 1)", key="further_prune")
        if self.momentum >= 1:
            raise ConfigError("must be below 1", key="momentum")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("must lie in (0, 1]", key="lr_decay")
        if self.val_fraction < 0 or self.test_fraction < 0 or self.train_fraction <= 0:
            raise ConfigError("validation and test fractions must leave room for training",
                              key="val_fraction")
        if self.composition_mode not in ("per-step", "per-round"):
            raise ConfigError("must be per-step or per-round", key="composition_mode")
        if self.validation_accounting not in ("paper", "zcdp"):
            raise ConfigError("must be paper or zcdp", key="validation_accounting")
        if self.prune_mode not in ("percentile", "threshold"):
            raise ConfigError("must be percentile or threshold", key="prune_mode")
        if self.comm_direction_factor not in (1, 2):
            raise ConfigError("must be 1 or 2", key="comm_direction_factor")
        if self.dataset not in ("blobs", "idx"):
            raise ConfigError("must be blobs or idx", key="dataset")
        if self.public not in ("carve", "idx"):
            raise ConfigError("must be carve or idx", key="public")
        return self

    def to_dict(self) -> Dict[str, object]:
        out = dataclasses.asdict(self)
        out["hidden"] = list(self.hidden)
        out["sampled_clients"] = self.sampled_clients
        return out


SECTIONS = ("experiment", "federated", "privacy", "lth", "model", "data", "diagnostics")

ALIASES = {
    "T": "rounds",
    "U": "clients",
    "q": "sample_ratio",
    "tau": "local_steps",
    "B": "batch_size",
    "C": "clip",
    "eta": "lr",
    "M": "tickets",
    "k": "lth_iterations",
    "Pr": "prune_degree",
    "P2": "further_prune",
    "epsilon": "epsilon_budget",
}

_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_DEFAULTS = ExperimentConfig()

PRESETS = {
    # small end-to-end run on synthetic blobs
    "demo": """
[experiment]
scheme = fed-iterative
seed = 0
rounds = 10

[federated]
clients = 10
sample_ratio = 0.2
local_steps = 100
batch_size = 15
lr = 0.05

[privacy]
clip = 1.0
sigma = 1.4

[lth]
tickets = 3
lth_iterations = 200
lth_lr = 0.05
prune_degree = 0.3

[model]
hidden = 32

[data]
blob_classes = 5
blob_dim = 20
blob_separation = 4.0
blob_size = 3000
""",
}


def _convert(name: str, text: str, line: int):
    default = getattr(_DEFAULTS, name)
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p for p in text.replace(",", " ").split() if p]
            return tuple(int(p) for p in parts)
    except ValueError:
        kind = type(default).__name__
        if isinstance(default, tuple):
            kind = "list of integers"
        raise ConfigError(f"expected {kind}, got {text!r}", line=line, key=name) from None
    if name == "scheme":
        return SCHEME_ALIASES.get(text, text)
    return text


def parse_config_text(text: str) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", line=lineno)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", line=lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.split("#", 1)[0].strip()
        name = ALIASES.get(key, key)
        if name not in _FIELDS:
            raise ConfigError("unknown key", line=lineno, key=key)
        if not value and not isinstance(getattr(_DEFAULTS, name), (str, tuple)):
            raise ConfigError("missing value", line=lineno, key=key)
        values[name] = _convert(name, value, lineno)
    config = ExperimentConfig(**values)
    try:
        return config.validate()
    except ConfigError as exc:
        if exc.key is not None:
            for lineno, raw in enumerate(text.splitlines(), start=1):
                k = raw.split("=", 1)[0].strip()
                if ALIASES.get(k, k) == exc.key:
                    raise ConfigError(str(exc).split(": ", 1)[-1], line=lineno, key=exc.key) from None
        raise


def parse_config(path) -> ExperimentConfig:
    """Read a config file, or a built-in preset name such as ``demo``."""
    p = Path(path)
    if p.is_file():
        return parse_config_text(p.read_text())
    if str(path) in PRESETS:
        return parse_config_text(PRESETS[str(path)])
    raise ConfigError(f"config file not found: {path}")


def with_overrides(config: ExperimentConfig, **changes) -> ExperimentConfig:
    changes = {k: v for k, v in changes.items() if v is not None}
    if "scheme" in changes:
        changes["scheme"] = SCHEME_ALIASES.get(changes["scheme"], changes["scheme"])
    return dataclasses.replace(config, **changes).validate()
