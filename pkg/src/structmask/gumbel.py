"""Structured binary masks sampled with the straight-through Gumbel top-K trick.

A :class:`Partition` splits the ``m x n`` index grid into disjoint subsets and
fixes how many ones each subset receives. Sampling perturbs the logits with
Gumbel noise, keeps the top ``d_i`` entries of every subset in the forward
pass, and routes gradients through a temperature softmax in the backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffgraph as dg
from .errors import ParameterError, StructureError

UNIFORM_EPS = 1e-12


class Partition:
    """Disjoint cover of a grid by index subsets, each with a keep count.

    Subsets are stored as flat (row-major) indices. Use :meth:`rows`,
    :meth:`columns` or :meth:`whole` for the common layouts.
    """

    def __init__(self, shape: Sequence[int], subsets: Sequence, counts: Sequence[int]):
        self.shape = tuple(int(s) for s in shape)
        size = int(np.prod(self.shape))
        self.subsets = [np.asarray(s, dtype=np.intp).ravel() for s in subsets]
        self.counts = np.asarray(counts, dtype=np.intp).ravel()
        if len(self.subsets) != self.counts.size:
            raise StructureError("one keep count is needed per subset")
        if any(s.size == 0 for s in self.subsets):
            raise StructureError("partition subsets must be non-empty")
        order = np.concatenate(self.subsets)
        if order.size != size or not np.array_equal(np.sort(order), np.arange(size)):
            raise StructureError("subsets must be pairwise disjoint and cover the whole grid")
        sizes = np.array([s.size for s in self.subsets])
        if np.any(self.counts < 1) or np.any(self.counts > sizes):
            raise StructureError("keep counts must satisfy 1 <= d_i <= |I_i|")
        self.order = order
        self.inverse = np.empty(size, dtype=np.intp)
        self.inverse[order] = np.arange(size)
        # equal-size subsets can be processed as one 2-D block
        self.grid = np.stack(self.subsets) if len(set(sizes.tolist())) == 1 else None

    @classmethod
    def from_pairs(cls, shape, subsets, counts) -> "Partition":
        """Build from lists of ``(row, col)`` pairs."""
        n = shape[1]
        flat = [[r * n + c for r, c in s] for s in subsets]
        return cls(shape, flat, counts)

    @classmethod
    def rows(cls, m: int, n: int, d: int) -> "Partition":
        """One subset per row with ``d`` ones each (single-pixel masks, pooling)."""
        return cls((m, n), np.arange(m * n).reshape(m, n), [d] * m)

    @classmethod
    def columns(cls, m: int, n: int, d: int) -> "Partition":
        """One subset per column with ``d`` ones each (left-d-regular graphs)."""
        return cls((m, n), np.arange(m * n).reshape(m, n).T, [d] * n)

    @classmethod
    def whole(cls, shape, d: int) -> "Partition":
        """A single subset covering everything."""
        size = int(np.prod(shape))
        return cls(shape, [np.arange(size)], [d])

    def __len__(self):
        return len(self.subsets)

    def __repr__(self):
        return f"Partition(shape={self.shape}, subsets={len(self)})"

    def check(self, mask: np.ndarray) -> bool:
        """True when ``mask`` is binary with exactly ``d_i`` ones in every subset."""
        flat = np.asarray(mask).ravel()
        if flat.size != self.order.size or not np.all((flat == 0) | (flat == 1)):
            return False
        return all(flat[s].sum() == d for s, d in zip(self.subsets, self.counts))


@dataclass
class MaskLogits:
    """Learnable logits plus the sampling settings used with them."""

    phi: "np.ndarray | dg.Tensor"
    noise_scale: float = 1.0
    tau: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError(f"temperature must be positive, got {self.tau}")
        if self.noise_scale < 0:
            raise ParameterError("noise_scale must be nonnegative")

    @property
    def shape(self):
        return tuple(self.phi.shape)


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. standard Gumbel samples ``-log(-log(u))``."""
    u = rng.random(shape)
    return gumbel_from_uniform(u)


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return -np.log(-np.log(u))


def init_logits(shape, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Standard Gumbel initialisation, optionally shrunk by ``scale``."""
    return scale * gumbel_noise(shape, rng)


def topk_indicator(logits: np.ndarray, d) -> np.ndarray:
    """0/1 indicator of the ``d`` largest entries along the last axis.

    ``d`` may be a scalar or one count per leading index. Ties go to the
    lowest index.
    """
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[-1]
    order = np.argsort(-logits, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(k), order.shape), axis=-1)
    d = np.asarray(d)
    if d.ndim:
        d = d.reshape(d.shape + (1,))
    return (ranks < d).astype(np.float64)


def straight_through_topk(logits, d, tau: float = 1.0) -> dg.Tensor:
    """Hard top-``d`` indicator forward, temperature-softmax gradient backward.

    Operates along the last axis. The forward value is exactly binary; the
    adjoint equals the softmax Jacobian applied to the upstream gradient.
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = dg._raw(logits)
    k = z.shape[-1]
    d_arr = np.asarray(d)
    if np.any(d_arr < 1) or np.any(d_arr > k):
        raise ParameterError(f"keep count {d} outside [1, {k}]")
    hard = topk_indicator(z, d)
    p = dg.softmax_value(z, tau)
    return dg.custom_op("st_topk", (logits,), hard, lambda g: (dg.softmax_vjp(p, g, tau),))


def sample_mask(logits: MaskLogits, partition: Partition, rng: np.random.Generator) -> dg.Tensor:
    """Draw a binary mask satisfying ``partition``; differentiable w.r.t. ``logits.phi``."""
    if logits.shape != partition.shape:
        raise StructureError(f"logits shape {logits.shape} does not match partition {partition.shape}")
    noise = logits.noise_scale * gumbel_noise(partition.shape, rng)
    z = dg.reshape(dg.add(logits.phi, noise), (-1,))
    if partition.grid is not None:
        block = dg.scalar_mul(dg.take(z, partition.grid), 1.0 / logits.tau)
        hard = dg.reshape(straight_through_topk(block, partition.counts), (-1,))
    else:
        hard = dg.concat([
            straight_through_topk(dg.scalar_mul(dg.take(z, s), 1.0 / logits.tau), int(d))
            for s, d in zip(partition.subsets, partition.counts)
        ])
    return dg.reshape(dg.take(hard, partition.inverse), partition.shape)


def freeze_mask(logits: MaskLogits, partition: Partition, rng: np.random.Generator) -> np.ndarray:
    """Sample once outside any tape; the result is a plain 0/1 array."""
    phi = logits.phi.value if isinstance(logits.phi, dg.Tensor) else logits.phi
    detached = MaskLogits(np.asarray(phi), logits.noise_scale, logits.tau)
    return sample_mask(detached, partition, rng).value.copy()
