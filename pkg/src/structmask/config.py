"""Experiment configuration: a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. The ``experiment`` key selects the
defaults every other key overrides; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .data import AMPLITUDES, SPARSITY_MODES
from .errors import ConfigError
from .solvers import SOLVER_KINDS
from .transforms import KINDS as TRANSFORM_KINDS

EXPERIMENTS = ("single_pixel", "single_pixel_circulant", "single_pixel_superpixel", "expander", "group_testing")
IMAGE_EXPERIMENTS = EXPERIMENTS[:3]


@dataclass
class ExperimentConfig:
    experiment: str = "single_pixel"
    m: int = 50
    n: int = 784
    d: int = 32
    s: int = 50
    height: int = 28
    width: int = 28
    iterations: int = 20
    eval_iterations: int = 0  # 0: same as iterations
    solver: str = "iht"
    transform: str = "bior2.2-level1"
    loss: str = "squared_l2"
    average_loss: bool = False
    noise_family: str = "gaussian"
    snr_db: float = 40.0
    lr: float = 0.0002
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 512
    epochs: int = 100
    samples_per_epoch: int = 50000
    test_size: int = 10000
    gumbel_tau: float = 1.0
    noise_scale: float = 1.0
    init_scale: float = 1.0
    learn_mask: bool = True
    scale: float = 0.0  # 0: grid search
    scale_grid_min: float = 1e-3
    scale_grid_max: float = 10.0
    scale_grid_points: int = 16
    step: float = 1.0
    lista_threshold: float = 0.1
    sparsity_mode: str = "bernoulli"
    amplitude: str = "gaussian"
    nnlad_sigma: float = 0.1
    nnlad_tau: float = 0.6
    positive_threshold: float = 0.01
    superpixel: int = 3
    images: str = ""
    train_count: int = 0  # 0: all but the last test_size images
    fixed_mask: str = ""
    baseline: str = "siman"
    sa_tau0: float = 0.0012
    sa_decay: float = 0.9997
    sa_rule: str = "metropolis"
    seed: int = 0

    @property
    def image_mode(self) -> bool:
        return self.experiment in IMAGE_EXPERIMENTS

    @property
    def test_iterations(self) -> int:
        return self.eval_iterations or self.iterations

    def validate(self) -> "ExperimentConfig":
        def fail(key, msg):
            raise ConfigError(f"{key}: {msg}")

        if self.experiment not in EXPERIMENTS:
            fail("experiment", f"must be one of {EXPERIMENTS}")
        for key in ("m", "n", "d", "s", "iterations", "batch_size", "samples_per_epoch", "test_size"):
            if getattr(self, key) < 1:
                fail(key, "must be >= 1")
        if self.epochs < 0:
            fail("epochs", "must be >= 0")
        if self.eval_iterations < 0:
            fail("eval_iterations", "must be >= 0")
        if self.solver not in SOLVER_KINDS:
            fail("solver", f"must be one of {SOLVER_KINDS}")
        if self.transform not in TRANSFORM_KINDS:
            fail("transform", f"must be one of {TRANSFORM_KINDS}")
        if self.loss not in ("squared_l2", "l1"):
            fail("loss", "must be squared_l2 or l1")
        if self.noise_family not in ("gaussian", "student_t_df1"):
            fail("noise_family", "must be gaussian or student_t_df1")
        if self.snr_db != self.snr_db or self.snr_db == float("-inf"):
            fail("snr_db", "must be a number or inf")
        if self.sparsity_mode not in SPARSITY_MODES:
            fail("sparsity_mode", f"must be one of {SPARSITY_MODES}")
        if self.amplitude not in AMPLITUDES:
            fail("amplitude", f"must be one of {AMPLITUDES}")
        if not self.gumbel_tau > 0:
            fail("gumbel_tau", "must be > 0")
        if self.noise_scale < 0 or self.init_scale < 0:
            fail("noise_scale", "Gumbel scales must be >= 0")
        if self.lr < 0:
            fail("lr", "must be >= 0")
        if self.scale < 0:
            fail("scale", "must be >= 0 (0 selects grid search)")
        if not 0 < self.scale_grid_min <= self.scale_grid_max or self.scale_grid_points < 1:
            fail("scale_grid_min", "grid needs 0 < min <= max and at least one point")
        if self.s > self.n:
            fail("s", f"must be <= n={self.n}")
        if self.nnlad_sigma <= 0 or self.nnlad_tau <= 0:
            fail("nnlad_sigma", "NNLAD step parameters must be > 0")
        if self.baseline not in ("greedy", "siman", "random"):
            fail("baseline", "must be greedy, siman or random")
        if not self.sa_tau0 > 0:
            fail("sa_tau0", "must be > 0")
        if not 0 < self.sa_decay <= 1:
            fail("sa_decay", "must lie in (0, 1]")
        if self.sa_rule not in ("metropolis", "literal"):
            fail("sa_rule", "must be metropolis or literal")
        if self.experiment == "expander":
            if self.d > self.m:
                fail("d", f"ones per column must be <= m={self.m}")
        elif self.experiment == "single_pixel_circulant":
            if self.d > self.n or self.m > self.n:
                fail("d", "generator ones and selected rows must be <= n")
        elif self.d > self.n:
            fail("d", f"ones per row must be <= n={self.n}")
        if self.image_mode:
            if self.height * self.width != self.n:
                fail("n", f"must equal height*width={self.height * self.width}")
            if not self.images:
                fail("images", "image experiments need an IDX image file")
        if self.experiment == "single_pixel_superpixel" and (self.superpixel < 1 or self.superpixel % 2 == 0):
            fail("superpixel", "super-pixel side must be a positive odd integer")
        if self.solver in ("e_iht", "e_lista_scalar") and self.experiment != "expander":
            fail("solver", "median-based solvers need the expander experiment")
        if self.experiment == "expander" and self.solver not in ("e_iht", "e_lista_scalar"):
            fail("solver", "expander experiments use e_iht or e_lista_scalar")
        if self.experiment == "group_testing" and self.solver != "nnlad":
            fail("solver", "group testing uses nnlad")
        return self

    # text form ------------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_value(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"{key}: unknown key")
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def defaults(experiment: str) -> ExperimentConfig:
    """Full-scale defaults for each experiment family."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment: must be one of {EXPERIMENTS}")
    base = ExperimentConfig(experiment=experiment)
    if experiment == "single_pixel_circulant":
        return base.replace(iterations=15)
    if experiment == "single_pixel_superpixel":
        return base.replace(iterations=15)
    if experiment == "expander":
        return base.replace(m=250, n=784, d=7, s=40, solver="e_iht", transform="identity", loss="l1",
                            noise_family="student_t_df1", sparsity_mode="bernoulli", amplitude="gaussian",
                            sa_tau0=0.003, sa_decay=0.9998)
    if experiment == "group_testing":
        return base.replace(m=248, n=961, d=31, s=80, solver="nnlad", transform="identity", loss="l1",
                            average_loss=True, iterations=200, eval_iterations=1000,
                            noise_family="student_t_df1", sparsity_mode="exact", amplitude="beta28",
                            nnlad_sigma=0.1, nnlad_tau=0.6, positive_threshold=0.01)
    return base


def parse_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"{key}: given twice")
        pairs[key] = raw
    pairs.update(overrides or {})
    experiment = pairs.get("experiment", "single_pixel").strip()
    cfg = defaults(experiment)
    values = {k: parse_value(k, v) for k, v in pairs.items()}
    return cfg.replace(**values).validate()


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    cfg = parse_config(Path(path).read_text(), overrides)
    if cfg.images and not Path(cfg.images).is_absolute():
        cfg = cfg.replace(images=str((Path(path).parent / cfg.images).resolve()))
    return cfg
