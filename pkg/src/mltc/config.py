"""Experiment configuration files (INI key-value format).

Two sections: [model] selects the diffusion coefficient, [run] the schedule
and reporting knobs.  See configs/ for bundled examples.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .cross import DEFAULT_EVAL_BUDGET, DEFAULT_RANK_CAP
from .errors import ConfigError
from .fields import DECAY_LAWS, KINDS


@dataclass
class ExperimentConfig:
    kind: str = "affine"
    decay: str = "exponential"
    terms: int = 5
    mean: float = 2.0
    max_level: int = 4
    ref_level: int | None = None
    eps0: float = 0.25
    samples: int = 100
    seed: int = 2024
    tree: str = "balanced"
    threads: int = 1
    rank_cap: int = DEFAULT_RANK_CAP
    eval_budget: int = DEFAULT_EVAL_BUDGET
    out_dir: str = "out"
    source: str = field(default="", repr=False)

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"model kind must be one of {KINDS}, got {self.kind!r}")
        if self.decay not in DECAY_LAWS:
            raise ConfigError(f"decay must be one of {DECAY_LAWS}, got {self.decay!r}")
        if self.terms < 1:
            raise ConfigError("terms must be at least 1")
        if self.max_level < 0:
            raise ConfigError("max_level must be nonnegative")
        if self.ref_level is not None and self.ref_level < self.max_level:
            raise ConfigError("ref_level must be at least max_level")
        if self.eps0 <= 0:
            raise ConfigError("eps0 must be positive")
        if self.samples < 1:
            raise ConfigError("samples must be at least 1")
        if self.tree not in ("balanced", "linear"):
            raise ConfigError("tree must be 'balanced' or 'linear'")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        return self


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err

    cfg = ExperimentConfig(source=str(path))
    try:
        if parser.has_section("model"):
            m = parser["model"]
            cfg.kind = m.get("kind", cfg.kind).strip()
            cfg.decay = m.get("decay", cfg.decay).strip()
            cfg.terms = m.getint("terms", cfg.terms)
            cfg.mean = m.getfloat("mean", cfg.mean)
        if parser.has_section("run"):
            r = parser["run"]
            cfg.max_level = r.getint("max_level", cfg.max_level)
            if "ref_level" in r:
                cfg.ref_level = r.getint("ref_level")
            cfg.eps0 = r.getfloat("eps0", cfg.eps0)
            cfg.samples = r.getint("samples", cfg.samples)
            cfg.seed = r.getint("seed", cfg.seed)
            cfg.tree = r.get("tree", cfg.tree).strip()
            cfg.threads = r.getint("threads", cfg.threads)
            cfg.rank_cap = r.getint("rank_cap", cfg.rank_cap)
            cfg.eval_budget = r.getint("eval_budget", cfg.eval_budget)
            cfg.out_dir = r.get("out_dir", cfg.out_dir).strip()
    except ValueError as err:
        raise ConfigError(f"bad value in {path}: {err}") from err
    return cfg.validate()
