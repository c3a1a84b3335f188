"""Run configuration: a single INI file drives the whole pipeline.

Every stage command reads the same file, so one hash over its parsed
content identifies the experiment; artifacts carry that hash and
downstream stages refuse mismatched inputs.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .trainer import LossWeights, TrainConfig


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


@dataclass
class RunConfig:
    case: str = "case118s"
    n_samples: int = 10000
    split: tuple = (0.7, 0.1, 0.2)
    labeled: int = 100
    scale_lo: float = 0.8
    scale_hi: float = 1.2
    alpha_p: float = 0.01
    alpha_v: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios {self.split} must sum to 1")
        if any(r < 0 for r in self.split):
            raise ConfigError("split ratios must be non-negative")
        if self.n_samples < 0 or self.labeled < 0:
            raise ConfigError("sample counts must be non-negative")
        if not self.scale_lo <= self.scale_hi:
            raise ConfigError("scale range is inverted")
        if self.labeled > int(self.split[0] * self.n_samples) and self.n_samples:
            self.labeled = int(self.split[0] * self.n_samples)

    @property
    def counts(self):
        """(train, validation, test) sample counts; remainder goes to train."""
        n_val = int(self.split[1] * self.n_samples)
        n_test = int(self.split[2] * self.n_samples)
        return self.n_samples - n_val - n_test, n_val, n_test

    def digest(self) -> str:
        """Short stable hash of the result-determining content.

        The output directory is excluded: the same experiment written to
        a different location keeps its identity.
        """
        doc = asdict(self)
        del doc["out_dir"]
        doc["split"] = list(self.split)
        doc["train"]["hidden"] = list(self.train.hidden)
        doc["train"]["milestones"] = list(self.train.milestones)
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


DEFAULT_CONFIG = """\
## pipeline configuration; every value below is the default
[case]
## bundled case name (case9, case118s, case2s) or a path to a MATPOWER file
name = case118s

[samples]
count = 10000
## train/validation/test ratios, must sum to 1
split = 0.7 0.1 0.2
labeled = 100
scale_lo = 0.8
scale_hi = 1.2

[ridge]
alpha_p = 0.01
alpha_v = 0.1

[loss]
w_o = 0.1
w_s = 0.1
w_v = 10.0
w_wp = 10.0

[train]
mode = M4
hidden = 50
batch_size = 32
n_warmup = 1
n_total = 100
lr = 0.0005
milestones = 90
gamma = 0.2
beta = 0.7

[output]
dir = runs

[run]
seed = 0
"""


def _ints(raw: str) -> tuple:
    return tuple(int(v) for v in raw.split())


def _floats(raw: str) -> tuple:
    return tuple(float(v) for v in raw.split())


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse configuration: {exc}") from exc
    base = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    base.read_string(DEFAULT_CONFIG)
    for section in cp.sections():
        if section not in base:
            raise ConfigError(f"unknown section [{section}]")
        for key in cp[section]:
            if key not in base[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            base[section][key] = cp[section][key]
    g = base
    try:
        weights = LossWeights(w_o=g.getfloat("loss", "w_o"),
                              w_s=g.getfloat("loss", "w_s"),
                              w_v=g.getfloat("loss", "w_v"),
                              w_wp=g.getfloat("loss", "w_wp"))
        train = TrainConfig(mode=g.get("train", "mode"),
                            hidden=_ints(g.get("train", "hidden")),
                            batch_size=g.getint("train", "batch_size"),
                            n_warmup=g.getint("train", "n_warmup"),
                            n_total=g.getint("train", "n_total"),
                            lr=g.getfloat("train", "lr"),
                            milestones=_ints(g.get("train", "milestones")),
                            gamma=g.getfloat("train", "gamma"),
                            seed=g.getint("run", "seed"),
                            beta=g.getfloat("train", "beta"))
        return RunConfig(case=g.get("case", "name"),
                         n_samples=g.getint("samples", "count"),
                         split=_floats(g.get("samples", "split")),
                         labeled=g.getint("samples", "labeled"),
                         scale_lo=g.getfloat("samples", "scale_lo"),
                         scale_hi=g.getfloat("samples", "scale_hi"),
                         alpha_p=g.getfloat("ridge", "alpha_p"),
                         alpha_v=g.getfloat("ridge", "alpha_v"),
                         weights=weights, train=train,
                         out_dir=g.get("output", "dir"),
                         seed=g.getint("run", "seed"))
    except (ValueError, ConfigError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"configuration file not found: {path}")
    return parse_config(path.read_text())


def write_default(path) -> None:
    Path(path).write_text(DEFAULT_CONFIG)
