"""Unrolled reconstruction algorithms.

Each ``*_run`` function unrolls a fixed number of iterations on the tape and
returns an :class:`IterateTrace`. Measurements ``y`` are ``(m,)`` or batched
``(m, B)``; iterates follow the same layout with ``n`` rows.

The learnable variants use one step size ``gamma_t`` and one log-threshold
``rho_t`` per iteration (threshold ``exp(rho_t)``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg
from .errors import DivergenceError, NonFiniteError, ParameterError, StructureError
from .transforms import Transform

SOLVER_KINDS = ("iht", "lista_scalar", "e_iht", "e_lista_scalar", "nnlad")


@dataclass
class SolverConfig:
    kind: str
    iterations: int
    sparsity: int | None = None
    step: float = 1.0
    threshold: float = 0.1
    nnlad_sigma: float = 0.1
    nnlad_tau: float = 0.6

    def __post_init__(self):
        if self.kind not in SOLVER_KINDS:
            raise ParameterError(f"unknown solver {self.kind!r}")
        if self.iterations < 1:
            raise ParameterError("solver needs at least one iteration")
        if self.kind in ("iht", "e_iht") and (self.sparsity is None or self.sparsity < 1):
            raise ParameterError(f"{self.kind} needs sparsity >= 1")
        if self.kind == "nnlad" and not (self.nnlad_sigma > 0 and self.nnlad_tau > 0):
            raise ParameterError("nnlad step parameters must be positive")

    @property
    def learnable(self) -> bool:
        return self.kind in ("lista_scalar", "e_lista_scalar")

    def init_params(self) -> dict[str, np.ndarray]:
        """Initial ``gamma`` / ``rho`` arrays for the learnable kinds (empty otherwise)."""
        if not self.learnable:
            return {}
        T = self.iterations
        return {"gamma": np.full(T, float(self.step)),
                "rho": np.full(T, float(np.log(self.threshold)))}


@dataclass
class IterateTrace:
    iterates: list = field(default_factory=list)

    def __len__(self):
        return len(self.iterates)

    @property
    def output(self) -> dg.Tensor:
        return self.iterates[-1]


class MatrixModel:
    """Forward model given by an explicit (possibly tracked) matrix."""

    def __init__(self, A):
        self.A = dg._as_tensor(A)
        self.At = dg.transpose(self.A)

    def apply(self, x):
        return dg.matmul(self.A, x)

    def adjoint(self, r):
        return dg.matmul(self.At, r)


class SynthesisModel:
    """``Phi Psi*`` for operators without an explicit matrix."""

    def __init__(self, op, transform: Transform):
        self.op, self.transform = op, transform

    def apply(self, c):
        return self.op.apply(self.transform.synthesis(c))

    def adjoint(self, r):
        return self.transform.synthesis_adjoint(self.op.adjoint(r))


def coefficient_model(op, transform: Transform | None):
    """Forward model acting on transform coefficients."""
    if hasattr(op, "matrix"):
        A = op.matrix()
        if transform is not None and transform.kind != "identity":
            A = dg.matmul(A, dg.constant(transform.synthesis_matrix))
        return MatrixModel(A)
    if transform is None or transform.kind == "identity":
        return op
    return SynthesisModel(op, transform)


def _zeros_like_signal(n: int, y) -> dg.Tensor:
    Y = dg._raw(y)
    return dg.constant(np.zeros((n,) + Y.shape[1:]))


def _signal_dim(op) -> int:
    return op.shape[1]


def _unrolled(fn):
    """Report non-finite values inside a solver as divergence."""

    def wrapper(*args, **kwargs):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                return fn(*args, **kwargs)
        except DivergenceError:
            raise
        except NonFiniteError as e:
            raise DivergenceError(f"{fn.__name__} diverged ({e}); the operator scale is likely too large") from e

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_unrolled
def iht_run(op, transform: Transform | None, y, cfg: SolverConfig, iterations: int | None = None) -> IterateTrace:
    """Iterative hard thresholding in the coefficient domain.

    ``c <- H_s(c + step * A^T (y - A c))`` with ``A = Phi Psi*``; the trace
    holds the synthesised images.
    """
    T = iterations or cfg.iterations
    model = coefficient_model(op, transform)
    synth = transform.synthesis if transform is not None else (lambda c: c)
    c = _zeros_like_signal(_signal_dim(op), y)
    trace = IterateTrace()
    for _ in range(T):
        r = dg.sub(y, model.apply(c))
        c = dg.hard_threshold(dg.add(c, dg.scalar_mul(model.adjoint(r), cfg.step)), cfg.sparsity)
        trace.iterates.append(synth(c))
    return trace


def _lista_params(params, T):
    gamma, rho = params["gamma"], params["rho"]
    if dg._raw(gamma).shape[0] < T or dg._raw(rho).shape[0] < T:
        raise ParameterError(f"need {T} step sizes and thresholds")
    return ([dg.take(gamma, t) if isinstance(gamma, dg.Tensor) else float(gamma[t]) for t in range(T)],
            [dg.exp(dg.take(rho, t)) if isinstance(rho, dg.Tensor) else float(np.exp(rho[t])) for t in range(T)])


@_unrolled
def lista_scalar_run(op, transform: Transform | None, y, cfg: SolverConfig, params,
                     iterations: int | None = None) -> IterateTrace:
    """Soft-thresholding iterations with learnable per-iteration scalars.

    ``c <- soft(c + gamma_t A^T (y - A c), exp(rho_t))``. ``params`` maps
    ``gamma`` and ``rho`` to arrays or tensors of length at least ``T``.
    """
    T = iterations or cfg.iterations
    gammas, lams = _lista_params(params, T)
    model = coefficient_model(op, transform)
    synth = transform.synthesis if transform is not None else (lambda c: c)
    c = _zeros_like_signal(_signal_dim(op), y)
    trace = IterateTrace()
    for t in range(T):
        r = dg.sub(y, model.apply(c))
        c = dg.soft_threshold(dg.add(c, dg.scalar_mul(model.adjoint(r), gammas[t])), lams[t])
        trace.iterates.append(synth(c))
    return trace


def column_groups(mask: np.ndarray) -> np.ndarray | list[np.ndarray]:
    """Rows connected to each column of a binary mask (the right neighbours of each left vertex)."""
    mask = np.asarray(mask)
    groups = [np.flatnonzero(mask[:, j] > 0.5) for j in range(mask.shape[1])]
    if any(g.size == 0 for g in groups):
        raise StructureError("every column of an expander mask needs at least one 1")
    return dg.normalize_groups(groups)


def _mask_of(op) -> np.ndarray:
    m = getattr(op, "mask", None)
    if m is None:
        raise StructureError("median-based solvers need a dense binary operator")
    return dg._raw(m)


@_unrolled
def eiht_run(op, y, cfg: SolverConfig, iterations: int | None = None) -> IterateTrace:
    """Expander IHT: ``x <- H_s(x + M(y - Phi x))`` with the median operator ``M``."""
    T = iterations or cfg.iterations
    groups = column_groups(_mask_of(op))
    x = _zeros_like_signal(_signal_dim(op), y)
    trace = IterateTrace()
    for _ in range(T):
        r = dg.sub(y, op.apply(x))
        x = dg.hard_threshold(dg.add(x, dg.median_select(r, groups)), cfg.sparsity)
        trace.iterates.append(x)
    return trace


@_unrolled
def e_lista_scalar_run(op, y, cfg: SolverConfig, params, iterations: int | None = None) -> IterateTrace:
    """Learnable soft-thresholding with the median operator in place of ``Phi^T``."""
    T = iterations or cfg.iterations
    gammas, lams = _lista_params(params, T)
    groups = column_groups(_mask_of(op))
    x = _zeros_like_signal(_signal_dim(op), y)
    trace = IterateTrace()
    for t in range(T):
        r = dg.sub(y, op.apply(x))
        x = dg.soft_threshold(dg.add(x, dg.scalar_mul(dg.median_select(r, groups), gammas[t])), lams[t])
        trace.iterates.append(x)
    return trace


@_unrolled
def nnlad_run(op, y, cfg: SolverConfig, iterations: int | None = None) -> IterateTrace:
    """Primal-dual iterations for ``min_{x >= 0} ||Phi x - y||_1``.

    Dual ascent on ``z`` with the box projection onto ``[-1, 1]`` (the
    conjugate of the l1 norm), then a projected primal step and
    extrapolation::

        z    <- clip(z + sigma (Phi xbar - y), -1, 1)
        x'   <- max(x - tau Phi^T z, 0)
        xbar <- 2 x' - x

    Converges when ``sigma * tau * ||Phi||^2 < 1``.
    """
    T = iterations or cfg.iterations
    sigma, tau = cfg.nnlad_sigma, cfg.nnlad_tau
    model = MatrixModel(op.matrix()) if hasattr(op, "matrix") else op
    x = _zeros_like_signal(_signal_dim(op), y)
    xbar = x
    z = dg.constant(np.zeros(dg._raw(y).shape))
    trace = IterateTrace()
    for _ in range(T):
        z = dg.clip(dg.add(z, dg.scalar_mul(dg.sub(model.apply(xbar), y), sigma)), -1.0, 1.0)
        x_new = dg.relu_nonneg(dg.sub(x, dg.scalar_mul(model.adjoint(z), tau)))
        xbar = dg.sub(dg.scalar_mul(x_new, 2.0), x)
        x = x_new
        trace.iterates.append(x)
    return trace


def run_solver(cfg: SolverConfig, op, y, transform: Transform | None = None, params=None,
               iterations: int | None = None) -> IterateTrace:
    """Dispatch on ``cfg.kind``."""
    if cfg.kind == "iht":
        return iht_run(op, transform, y, cfg, iterations)
    if cfg.kind == "lista_scalar":
        return lista_scalar_run(op, transform, y, cfg, params if params is not None else cfg.init_params(), iterations)
    if cfg.kind == "e_iht":
        return eiht_run(op, y, cfg, iterations)
    if cfg.kind == "e_lista_scalar":
        return e_lista_scalar_run(op, y, cfg, params if params is not None else cfg.init_params(), iterations)
    return nnlad_run(op, y, cfg, iterations)


def l1_objective(op, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``||Phi x - y||_1`` per column."""
    return np.abs(op.dense() @ x - y).sum(axis=0)
