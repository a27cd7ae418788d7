"""Joint learning of mask logits and solver parameters through the unrolled solver.

Each mini-batch samples a fresh structured mask from the logits, measures
the batch, adds noise, reconstructs, and takes an Adam step on both the
logits and the solver parameters. After every epoch a single mask is frozen
and evaluated on a fixed held-out set.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffgraph as dg
from . import fileio
from .config import ExperimentConfig
from .errors import MetricError, NonFiniteError, TrainingError
from .gumbel import MaskLogits, freeze_mask, init_logits, sample_mask
from .operators import grid_search_scale
from .problems import Problem, make_data

log = logging.getLogger(__name__)

NMSE_FLOOR_DB = -150.0
EVAL_CHUNK = 2000
STREAMS = ("init", "train_data", "gumbel", "measurement", "test_data", "test_noise", "freeze", "probe")


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction; parameters live in a name -> array dict."""

    def __init__(self, lr: float = 0.0002, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                bad = int(np.sum(~np.isfinite(g)))
                raise TrainingError(f"non-finite gradient for {k!r} ({bad} entries) at step {self.t + 1}")
            if g.shape != params[k].shape:
                raise TrainingError(f"gradient shape {g.shape} does not match parameter {k!r} {params[k].shape}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = dict(params)
        for k, g in grads.items():
            m = b1 * self.m.get(k, np.zeros_like(g)) + (1 - b1) * g
            v = b2 * self.v.get(k, np.zeros_like(g)) + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            out[k] = params[k] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def adam_step(state: Adam, params, grads):
    return state.step(params, grads)


# ---------------------------------------------------------------- noise, loss, metrics


@dataclass(frozen=True)
class NoiseModel:
    """Additive noise at a per-sample SNR.

    Heavy-tailed ``student_t_df1`` noise has no variance, so its standard
    Cauchy draws get the scale that would give ``snr_db`` for unit-variance
    noise.
    """

    family: str = "gaussian"
    snr_db: float = 40.0

    def standard(self, shape, rng: np.random.Generator) -> np.ndarray:
        if self.family == "gaussian":
            return rng.standard_normal(shape)
        if self.family == "student_t_df1":
            return rng.standard_cauchy(shape)
        raise ValueError(f"unknown noise family {self.family!r}")

    def scaled(self, y: np.ndarray, z: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
        """Noise ``z`` scaled column-wise to the power of ``y`` (restricted to ``rows``)."""
        if math.isinf(self.snr_db) and self.snr_db > 0:
            return np.zeros_like(y)
        yy = y if rows is None else y[rows]
        power = np.mean(np.square(yy), axis=0)
        sigma = np.sqrt(power * 10.0 ** (-self.snr_db / 10.0))
        noise = z * sigma
        if rows is not None:
            noise = noise * rows.reshape((-1,) + (1,) * (noise.ndim - 1))
        return noise


def add_noise(y: np.ndarray, model: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y + model.scaled(y, model.standard(y.shape, rng))


@dataclass(frozen=True)
class LossSpec:
    """Reconstruction loss, averaged over all entries of the batch.

    With ``average_over_iterations`` the loss of every iterate is averaged
    instead of using only the final one.
    """

    kind: str = "squared_l2"
    average_over_iterations: bool = False

    def __call__(self, trace, x) -> dg.Tensor:
        iterates = trace.iterates if self.average_over_iterations else [trace.output]
        count = dg._raw(x).size * len(iterates)
        reduce = dg.sq_sum if self.kind == "squared_l2" else dg.abs_sum
        total = None
        for it in iterates:
            term = reduce(dg.sub(it, x))
            total = term if total is None else dg.add(total, term)
        return dg.scalar_mul(total, 1.0 / count)


def _db_ratio(num: float, den: float) -> float:
    if not den > 0:
        raise MetricError("reference signals have zero energy")
    if num <= 0:
        return NMSE_FLOOR_DB
    return max(10.0 * math.log10(num / den), NMSE_FLOOR_DB)


def nmse(x_true, x_hat) -> float:
    """``10 log10(E||x_hat - x||^2 / E||x||^2)`` over the whole batch, floored at -150 dB."""
    x_true, x_hat = np.asarray(x_true, float), np.asarray(x_hat, float)
    return _db_ratio(float(np.sum((x_hat - x_true) ** 2)), float(np.sum(x_true ** 2)))


def nmae(x_true, x_hat) -> float:
    x_true, x_hat = np.asarray(x_true, float), np.asarray(x_hat, float)
    return _db_ratio(float(np.sum(np.abs(x_hat - x_true))), float(np.sum(np.abs(x_true))))


def detection_counts(x_true, x_hat, threshold: float) -> tuple[float, float]:
    """Mean false negatives and false positives per signal."""
    truth = np.asarray(x_true) > 0
    pred = np.asarray(x_hat) > threshold
    axis = 0 if truth.ndim == 2 else None
    fn = np.sum(truth & ~pred, axis=axis)
    fp = np.sum(~truth & pred, axis=axis)
    return float(np.mean(fn)), float(np.mean(fp))


# ---------------------------------------------------------------- helpers


def _streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(STREAMS, children)}


def _freeze_rng(seed: int) -> np.random.Generator:
    return _streams(seed)["freeze"]


def measure(problem: Problem, masks: dict, scale: float, X: np.ndarray, Z: np.ndarray, params=None,
            iterations: int | None = None):
    """Measure column-signals ``X``, add noise built from standard draws ``Z``, reconstruct."""
    op = problem.build_operator(masks, scale)
    y = op.apply(dg.constant(X) if not isinstance(X, dg.Tensor) else X)
    noise = problem_noise(problem).scaled(y.value, Z, problem.measured_rows(op))
    trace = problem.solve(op, dg.add(y, noise), params, iterations)
    return op, trace


def problem_noise(problem: Problem) -> NoiseModel:
    return NoiseModel(problem.cfg.noise_family, problem.cfg.snr_db)


def problem_loss(problem: Problem) -> LossSpec:
    return LossSpec(problem.cfg.loss, problem.cfg.average_loss)


def measurement_rows(problem: Problem) -> int:
    return problem.cfg.n if problem.kind == "single_pixel_circulant" else problem.cfg.m


def evaluate(problem: Problem, masks: dict, scale: float, X_test: np.ndarray, Z_test: np.ndarray,
             params=None, iterations: int | None = None) -> dict[str, float]:
    """Test metrics for a fixed mask. ``X_test`` rows are signals, ``Z_test`` is ``(rows, count)``."""
    cfg = problem.cfg
    T = iterations or cfg.test_iterations
    if problem.solver.learnable:
        T = min(T, cfg.iterations)
    recon = np.empty_like(X_test)
    loss_total = 0.0
    for i in range(0, X_test.shape[0], EVAL_CHUNK):
        X = X_test[i:i + EVAL_CHUNK].T
        _, trace = measure(problem, masks, scale, X, Z_test[:, i:i + EVAL_CHUNK], params, T)
        recon[i:i + EVAL_CHUNK] = trace.output.value.T
        loss_total += float(problem_loss(problem)(trace, dg.constant(X)).value) * X.shape[1]
    out = {"nmse": nmse(X_test, recon), "nmae": nmae(X_test, recon), "loss": loss_total / X_test.shape[0]}
    if cfg.experiment == "group_testing":
        out["false_negatives"], out["false_positives"] = detection_counts(X_test.T, recon.T, cfg.positive_threshold)
    return out


def search_scale(problem: Problem, masks: dict, probe: np.ndarray, Z: np.ndarray, params=None) -> float:
    cfg = problem.cfg
    loss = problem_loss(problem)

    def loss_at(s):
        _, trace = measure(problem, masks, s, probe.T, Z, params)
        return float(loss(trace, dg.constant(probe.T)).value)

    grid = np.logspace(math.log10(cfg.scale_grid_min), math.log10(cfg.scale_grid_max), cfg.scale_grid_points)
    return grid_search_scale(loss_at, grid, image_mode=cfg.image_mode)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    logits: dict[str, np.ndarray]
    params: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    initial_masks: dict[str, np.ndarray]
    scale: float
    history: list[dict] = field(default_factory=list)
    aborted: bool = False
    epochs_completed: int = 0

    def metric(self, name: str, epoch: int = -1, split: str = "test") -> float:
        rows = [r for r in self.history if r["metric"] == name and r["split"] == split]
        if epoch == -1:
            return rows[-1]["value"]
        return next(r["value"] for r in rows if r["epoch"] == epoch)


def _history_rows(epoch: int, split: str, metrics: dict, seed: int) -> list[dict]:
    return [{"epoch": epoch, "split": split, "metric": k, "value": float(v), "seed": seed}
            for k, v in metrics.items()]


def load_fixed_masks(problem: Problem, path) -> dict:
    return problem.unpack_masks(fileio.read_matrix(path))


def train(cfg: ExperimentConfig, out_dir=None, resume: bool = False, fixed_masks: dict | None = None) -> TrainResult:
    """Run the full training loop described by ``cfg``.

    With ``out_dir`` a checkpoint is written after every epoch; ``resume``
    continues from it bit-exactly. ``fixed_masks`` (or ``cfg.fixed_mask``)
    keeps the operator fixed and learns only the solver parameters.
    """
    cfg.validate()
    problem = Problem(cfg)
    rng = _streams(cfg.seed)
    source, X_test = make_data(cfg, rng["test_data"])
    noise = problem_noise(problem)
    Z_test = noise.standard((measurement_rows(problem), X_test.shape[0]), rng["test_noise"])
    if fixed_masks is None and cfg.fixed_mask:
        fixed_masks = load_fixed_masks(problem, cfg.fixed_mask)
    learn_mask = cfg.learn_mask and fixed_masks is None

    init_scale = cfg.init_scale
    logits = {k: init_logits(p.shape, rng["init"], init_scale) for k, p in problem.partitions.items()}
    params = problem.solver.init_params()

    def frozen(lg):
        if fixed_masks is not None:
            return {k: np.asarray(v, float) for k, v in fixed_masks.items()}
        frng = _freeze_rng(cfg.seed)
        return {k: freeze_mask(MaskLogits(lg[k], cfg.noise_scale, cfg.gumbel_tau), p, frng)
                for k, p in problem.partitions.items()}

    initial_masks = frozen(logits)
    if cfg.scale > 0:
        scale = cfg.scale
    else:
        probe = source.sample(min(cfg.batch_size, 512), rng["probe"])
        Zp = noise.standard((measurement_rows(problem), probe.shape[0]), rng["probe"])
        scale = search_scale(problem, initial_masks, probe, Zp, params or None)
        log.info("grid-searched operator scale %.6g", scale)

    adam = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history: list[dict] = []
    start_epoch = 1
    ckpt = Path(out_dir) / "checkpoint.gldm" if out_dir is not None else None
    if resume:
        if ckpt is None or not ckpt.exists():
            raise TrainingError("resume requested but no checkpoint found")
        state = load_checkpoint(ckpt)
        logits, params, scale, history = state["logits"], state["params"], state["scale"], state["history"]
        adam.t, adam.m, adam.v = state["adam_t"], state["adam_m"], state["adam_v"]
        for k, st in state["rng"].items():
            rng[k].bit_generator.state = st
        start_epoch = state["epoch"] + 1
    else:
        history += _history_rows(0, "test", evaluate(problem, initial_masks, scale, X_test, Z_test, params or None),
                                 cfg.seed)

    aborted = False
    epoch = start_epoch - 1
    for epoch in range(start_epoch, cfg.epochs + 1):
        good = ({k: v.copy() for k, v in logits.items()}, {k: v.copy() for k, v in params.items()})
        losses = []
        try:
            for batch in source.epoch(cfg.batch_size, rng["train_data"]):
                loss, logits, params = _train_step(problem, cfg, adam, logits, params, fixed_masks,
                                                   learn_mask, scale, batch, rng)
                losses.append(loss)
        except (NonFiniteError, TrainingError) as e:
            log.error("epoch %d aborted: %s; keeping parameters from epoch %d", epoch, e, epoch - 1)
            logits, params = good
            aborted = True
            epoch -= 1
            break
        history += _history_rows(epoch, "train", {"loss": float(np.mean(losses))}, cfg.seed)
        history += _history_rows(epoch, "test",
                                 evaluate(problem, frozen(logits), scale, X_test, Z_test, params or None),
                                 cfg.seed)
        if ckpt is not None:
            save_checkpoint(ckpt, cfg, epoch, logits, params, scale, adam, rng, history)

    return TrainResult(logits=logits, params=params, masks=frozen(logits), initial_masks=initial_masks,
                       scale=scale, history=history, aborted=aborted, epochs_completed=epoch)


def _train_step(problem, cfg, adam, logits, params, fixed_masks, learn_mask, scale, batch, rng):
    tape = dg.Tape()
    if learn_mask:
        phis = {k: tape.variable(v) for k, v in logits.items()}
        masks = {k: sample_mask(MaskLogits(phis[k], cfg.noise_scale, cfg.gumbel_tau), p, rng["gumbel"])
                 for k, p in problem.partitions.items()}
    elif fixed_masks is not None:
        phis, masks = {}, {k: dg.constant(v) for k, v in fixed_masks.items()}
    else:
        phis = {}
        masks = {k: sample_mask(MaskLogits(logits[k], cfg.noise_scale, cfg.gumbel_tau), p, rng["gumbel"])
                 for k, p in problem.partitions.items()}
    theta = {k: tape.variable(v) for k, v in params.items()}
    X = batch.T
    Z = problem_noise(problem).standard((measurement_rows(problem), X.shape[1]), rng["measurement"])
    _, trace = measure(problem, masks, scale, X, Z, theta or None)
    loss = problem_loss(problem)(trace, dg.constant(X))
    if loss.tape is None:  # nothing to learn
        return float(loss.value), logits, params
    grads = tape.backward(loss)
    current = {f"phi:{k}": v for k, v in logits.items() if k in phis}
    current.update({f"theta:{k}": v for k, v in params.items()})
    g = {f"phi:{k}": grads[t] for k, t in phis.items()}
    g.update({f"theta:{k}": grads[t] for k, t in theta.items()})
    new = adam.step(current, g)
    logits = {k: new.get(f"phi:{k}", v) for k, v in logits.items()}
    params = {k: new[f"theta:{k}"] for k in params}
    return float(loss.value), logits, params


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, cfg, epoch, logits, params, scale, adam: Adam, rng, history) -> None:
    names, arrays = [], []
    for k, v in logits.items():
        names.append(f"phi:{k}"), arrays.append(v)
    for k, v in params.items():
        names.append(f"theta:{k}"), arrays.append(v)
    for k in adam.m:
        names.append(f"adam_m:{k}"), arrays.append(adam.m[k])
        names.append(f"adam_v:{k}"), arrays.append(adam.v[k])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fileio.write_matrices(path, arrays)
    header = {
        "config_sha256": cfg.sha256(),
        "epoch": epoch,
        "scale": scale,
        "adam_t": adam.t,
        "records": names,
        "rng": {k: g.bit_generator.state for k, g in rng.items()},
        "history": history,
    }
    path.with_suffix(".json").write_text(json.dumps(header, indent=1))


def load_checkpoint(path) -> dict:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    arrays = dict(zip(header["records"], fileio.read_matrices(path)))
    out = {"epoch": header["epoch"], "scale": header["scale"], "adam_t": header["adam_t"],
           "rng": header["rng"], "history": header["history"],
           "logits": {}, "params": {}, "adam_m": {}, "adam_v": {}}
    for name, arr in arrays.items():
        kind, key = name.split(":", 1)
        target = {"phi": "logits", "theta": "params"}.get(kind, kind)
        out[target][key if kind in ("phi", "theta") else name.split(":", 1)[1]] = arr
    return out
