"""Discrete local-search baselines over structured masks.

A step proposes a neighbour by swapping one 1 with one 0 inside a randomly
chosen subset of the partition, evaluates the current and the proposed
mask on the same mini-batch and noise, and keeps the proposal according to
the acceptance rule. ``greedy`` keeps strict improvements only; ``siman``
also accepts uphill moves with a temperature that decays every step.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffgraph as dg
from .config import ExperimentConfig
from .errors import ConfigError, NonFiniteError
from .gumbel import MaskLogits, Partition, freeze_mask, init_logits
from .problems import Problem, make_data
from .training import (_freeze_rng, _history_rows, _streams, evaluate, measure, measurement_rows,
                       problem_loss, problem_noise, search_scale)

log = logging.getLogger(__name__)

RULES = ("greedy", "metropolis", "literal")


def propose_neighbor(mask: np.ndarray, partition: Partition, rng: np.random.Generator) -> np.ndarray:
    """Swap a random 1 with a random 0 inside one random subset.

    Subsets that are all ones (or all zeros) have no neighbour and are skipped.
    """
    flat = np.asarray(mask, dtype=np.float64).ravel().copy()
    movable = [i for i, s in enumerate(partition.subsets) if 0 < partition.counts[i] < s.size]
    if not movable:
        raise ConfigError("mask has no neighbours: every subset is full")
    sub = partition.subsets[movable[rng.integers(len(movable))]]
    vals = flat[sub]
    one = sub[np.flatnonzero(vals > 0.5)[rng.integers(int(np.sum(vals > 0.5)))]]
    zero = sub[np.flatnonzero(vals < 0.5)[rng.integers(int(np.sum(vals < 0.5)))]]
    flat[one], flat[zero] = 0.0, 1.0
    return flat.reshape(partition.shape)


@dataclass
class AnnealSchedule:
    """Temperature ``tau0 * decay**k`` after ``k`` steps; :meth:`advance` moves one step."""

    tau0: float
    decay: float
    steps: int = 0

    def __post_init__(self):
        if not self.tau0 > 0 or not 0 < self.decay <= 1:
            raise ConfigError("anneal schedule needs tau0 > 0 and 0 < decay <= 1")

    @property
    def tau(self) -> float:
        return self.tau0 * self.decay ** self.steps

    def advance(self) -> None:
        self.steps += 1


def accept(rule: str, current: float, proposed: float, tau: float = 1.0, u: float = 0.5) -> bool:
    """Acceptance decision for a proposed move.

    ``metropolis`` accepts uphill moves when ``u < exp(-(proposed - current) / tau)``;
    ``literal`` uses ``exp((current - proposed) / tau) < u``.
    """
    if proposed < current:
        return True
    if rule == "greedy":
        return False
    if not tau > 0:
        raise ConfigError("temperature must be positive")
    delta = (proposed - current) / tau
    if rule == "metropolis":
        return u < math.exp(-delta) if delta < 700 else False
    if rule == "literal":
        return (math.exp(-delta) if delta < 700 else 0.0) < u
    raise ConfigError(f"unknown acceptance rule {rule!r}")


def greedy_step(mask: np.ndarray, partition: Partition, loss_fn: Callable[[np.ndarray], float],
                rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Propose a neighbour and keep it only if ``loss_fn`` strictly decreases."""
    proposal = propose_neighbor(mask, partition, rng)
    if accept("greedy", loss_fn(mask), loss_fn(proposal)):
        return proposal, True
    return mask, False


def siman_step(mask: np.ndarray, partition: Partition, loss_fn: Callable[[np.ndarray], float],
               schedule: AnnealSchedule, rng: np.random.Generator,
               rule: str = "metropolis") -> tuple[np.ndarray, bool]:
    """One annealing step at the schedule's current temperature, then decay it."""
    proposal = propose_neighbor(mask, partition, rng)
    cur, new = loss_fn(mask), loss_fn(proposal)
    ok = accept(rule, cur, new, schedule.tau, float(rng.random()))
    schedule.advance()
    return (proposal, True) if ok else (mask, False)


@dataclass
class BaselineResult:
    masks: dict[str, np.ndarray]
    initial_masks: dict[str, np.ndarray]
    scale: float
    history: list[dict] = field(default_factory=list)
    steps: int = 0

    def metric(self, name: str, epoch: int = -1, split: str = "test") -> float:
        rows = [r for r in self.history if r["metric"] == name and r["split"] == split]
        if epoch == -1:
            return rows[-1]["value"]
        return next(r["value"] for r in rows if r["epoch"] == epoch)


def run_baseline(cfg: ExperimentConfig, kind: str | None = None) -> BaselineResult:
    """Search masks with ``greedy``, ``siman`` or ``random`` (no search).

    Starts from the same frozen random mask and operator scale as
    :func:`structmask.training.train` with the same seed, and takes one step
    per training mini-batch, so the data budget matches.
    """
    cfg.validate()
    kind = kind or cfg.baseline
    if kind not in ("greedy", "siman", "random"):
        raise ConfigError("baseline: must be greedy, siman or random")
    problem = Problem(cfg)
    if problem.solver.learnable:
        raise ConfigError("baselines search masks for solvers without learned parameters")
    rng = _streams(cfg.seed)
    source, X_test = make_data(cfg, rng["test_data"])
    noise = problem_noise(problem)
    rows = measurement_rows(problem)
    Z_test = noise.standard((rows, X_test.shape[0]), rng["test_noise"])
    logits = {k: init_logits(p.shape, rng["init"], cfg.init_scale) for k, p in problem.partitions.items()}
    frng = _freeze_rng(cfg.seed)
    masks = {k: freeze_mask(MaskLogits(logits[k], cfg.noise_scale, cfg.gumbel_tau), p, frng)
             for k, p in problem.partitions.items()}
    initial = {k: v.copy() for k, v in masks.items()}
    if cfg.scale > 0:
        scale = cfg.scale
    else:
        probe = source.sample(min(cfg.batch_size, 512), rng["probe"])
        Zp = noise.standard((rows, probe.shape[0]), rng["probe"])
        scale = search_scale(problem, masks, probe, Zp)

    history = _history_rows(0, "test", evaluate(problem, masks, scale, X_test, Z_test), cfg.seed)
    if kind == "random":
        return BaselineResult(masks, initial, scale, history, 0)

    schedule = AnnealSchedule(cfg.sa_tau0, cfg.sa_decay)
    loss_fn = problem_loss(problem)
    names = problem.names
    search_rng = rng["gumbel"]  # the Gumbel stream is unused here, so it drives proposals

    def batch_loss(candidate, X, Z):
        try:
            _, trace = measure(problem, candidate, scale, X, Z)
        except NonFiniteError:
            return math.inf
        return float(loss_fn(trace, dg.constant(X)).value)

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        accepted = proposals = 0
        for batch in source.epoch(cfg.batch_size, rng["train_data"]):
            X = batch.T
            Z = noise.standard((rows, X.shape[1]), rng["measurement"])
            key = names[search_rng.integers(len(names))]

            def on_batch(mask, key=key):
                return batch_loss({**masks, key: mask}, X, Z)

            if kind == "greedy":
                masks[key], ok = greedy_step(masks[key], problem.partitions[key], on_batch, search_rng)
            else:
                masks[key], ok = siman_step(masks[key], problem.partitions[key], on_batch, schedule,
                                            search_rng, cfg.sa_rule)
            accepted += ok
            proposals += 1
            step += 1
        history += _history_rows(epoch, "train", {"acceptance_rate": accepted / max(proposals, 1)}, cfg.seed)
        history += _history_rows(epoch, "test", evaluate(problem, masks, scale, X_test, Z_test), cfg.seed)
        log.info("%s epoch %d: acceptance %.3f", kind, epoch, accepted / max(proposals, 1))
    return BaselineResult(masks, initial, scale, history, step)
