"""Measurement operators built from binary masks.

Every operator exposes differentiable ``apply`` (signal -> measurements) and
``adjoint`` (measurements -> signal) on tensors, plus ``dense()`` returning
the realised matrix as a numpy array for inspection and oracle checks.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np

from . import diffgraph as dg
from .errors import ConfigError, DimensionError, NonFiniteError, ParameterError

IMAG_TOL = 1e-9
IMAGE_SCALE_FACTOR = 0.9


class DenseOperator:
    """``Phi = scale * mask`` applied by plain matrix products."""

    def __init__(self, mask, scale: float = 1.0):
        if not scale > 0:
            raise ParameterError("operator scale must be positive")
        self.mask = dg._as_tensor(mask)
        if self.mask.ndim != 2:
            raise DimensionError("mask must be a matrix")
        self.scale = float(scale)

    @property
    def shape(self):
        return self.mask.shape

    def matrix(self) -> dg.Tensor:
        return dg.scalar_mul(self.mask, self.scale)

    def apply(self, x) -> dg.Tensor:
        return dg.scalar_mul(dg.matmul(self.mask, x), self.scale)

    def adjoint(self, y) -> dg.Tensor:
        return dg.scalar_mul(dg.matmul(dg.transpose(self.mask), y), self.scale)

    def dense(self) -> np.ndarray:
        return self.scale * self.mask.value


def dense_apply(op: DenseOperator, x) -> dg.Tensor:
    return op.apply(x)


# ---------------------------------------------------------------- circulant


def _fft_conv(c: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Circular convolution of ``c`` with each column of ``x``."""
    fc = np.fft.fft(c)
    if x.ndim == 2:
        fc = fc[:, None]
    full = np.fft.ifft(fc * np.fft.fft(x, axis=0), axis=0)
    resid = np.max(np.abs(full.imag), initial=0.0)
    if resid > IMAG_TOL * max(1.0, np.max(np.abs(full.real), initial=0.0)):
        raise NonFiniteError(f"circulant product left imaginary residue {resid:.3e}")
    return full.real


def _fft_corr(c: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``C^T g`` for the circulant ``C`` generated by ``c``."""
    fc = np.conj(np.fft.fft(c))
    if g.ndim == 2:
        fc = fc[:, None]
    return np.fft.ifft(fc * np.fft.fft(g, axis=0), axis=0).real


def circular_convolve(c, x) -> dg.Tensor:
    """Differentiable ``C x`` where ``C[i, j] = c[(i - j) mod n]``."""
    C, X = dg._raw(c), dg._raw(x)
    if C.ndim != 1 or X.shape[0] != C.size:
        raise DimensionError(f"circular_convolve: generator {C.shape} vs signal {X.shape}")

    def vjp(g):
        gx = _fft_corr(C, g)
        if X.ndim == 1:
            gc = _fft_corr(X, g)
        else:
            gc = np.fft.ifft(np.sum(np.conj(np.fft.fft(X, axis=0)) * np.fft.fft(g, axis=0), axis=1)).real
        return gc, gx

    return dg.custom_op("circular_convolve", (c, x), _fft_conv(C, X), vjp)


def circulant_matrix(c: np.ndarray) -> np.ndarray:
    """Dense circulant with first column ``c``."""
    c = np.asarray(c, dtype=np.float64)
    n = c.size
    i = np.arange(n)
    return c[(i[:, None] - i[None, :]) % n]


class MaskedCirculantOperator:
    """``Phi = scale * P_Omega C`` with binary generator ``c`` and row selector ``rows``.

    With ``full_rows=True`` measurements keep length ``n`` and unselected rows
    read zero, which leaves the recovery problem unchanged but lets gradients
    reach every row-selection logit.
    """

    def __init__(self, generator, rows, scale: float = 1.0, full_rows: bool = False):
        if not scale > 0:
            raise ParameterError("operator scale must be positive")
        self.generator = dg._as_tensor(generator)
        self.rows = dg._as_tensor(rows)
        if self.generator.ndim != 1 or self.rows.shape != self.generator.shape:
            raise DimensionError("generator and row mask must be vectors of equal length")
        self.scale = float(scale)
        self.full_rows = full_rows
        self.selected = np.flatnonzero(self.rows.value > 0.5)

    @property
    def n(self) -> int:
        return self.generator.shape[0]

    @property
    def shape(self):
        return (self.n if self.full_rows else self.selected.size, self.n)

    def _row_weights(self, like):
        r = self.rows
        if dg._raw(like).ndim == 2:
            B = dg._raw(like).shape[1]
            r = dg.matmul(dg.reshape(r, (-1, 1)), dg.constant(np.ones((1, B))))
        return r

    def apply(self, x) -> dg.Tensor:
        full = dg.mul(self._row_weights(x), dg.scalar_mul(circular_convolve(self.generator, x), self.scale))
        if self.full_rows:
            return full
        X = dg._raw(x)
        if X.ndim == 1:
            return dg.take(full, self.selected)
        B = X.shape[1]
        return dg.take(full, self.selected[:, None] * B + np.arange(B))

    def adjoint(self, y) -> dg.Tensor:
        Y = dg._raw(y)
        if self.full_rows:
            masked = dg.mul(self._row_weights(y), y)
        else:
            expand = np.zeros((self.n, self.selected.size))
            expand[self.selected, np.arange(self.selected.size)] = 1.0
            masked = dg.matmul(dg.constant(expand), y)
        return dg.scalar_mul(_circular_correlate(self.generator, masked), self.scale)

    def dense(self) -> np.ndarray:
        C = self.scale * circulant_matrix(self.generator.value)
        if self.full_rows:
            return C * self.rows.value[:, None]
        return C[self.selected]


def _circular_correlate(c, g) -> dg.Tensor:
    """Differentiable ``C^T g``."""
    C, G = dg._raw(c), dg._raw(g)

    def vjp(h):
        # C^T g is the convolution of g with reversed c; both adjoints follow
        gg = _fft_conv(C, h)
        if G.ndim == 1:
            gc = _fft_corr(h, G)
        else:
            gc = np.fft.ifft(np.sum(np.fft.fft(G, axis=0) * np.conj(np.fft.fft(h, axis=0)), axis=1)).real
        return gc, gg

    return dg.custom_op("circular_correlate", (c, g), _fft_corr(C, G), vjp)


def circulant_apply(op: MaskedCirculantOperator, x) -> dg.Tensor:
    return op.apply(x)


# ---------------------------------------------------------------- super-pixels


def _box_sum(img: np.ndarray, delta: int) -> np.ndarray:
    """Sum over the centred ``delta x delta`` window, zero-padded, on the last two axes."""
    r = delta // 2
    pad = [(0, 0)] * (img.ndim - 2) + [(r, r), (r, r)]
    p = np.pad(img, pad)
    c = np.cumsum(np.cumsum(p, axis=-2), axis=-1)
    c = np.pad(c, [(0, 0)] * (img.ndim - 2) + [(1, 0), (1, 0)])
    h, w = img.shape[-2:]
    return (c[..., delta:delta + h, delta:delta + w] - c[..., :h, delta:delta + w]
            - c[..., delta:delta + h, :w] + c[..., :h, :w])


def superpixel_expand(centers, delta: int) -> dg.Tensor:
    """Dilate center indicators by a ``delta x delta`` block and clip at 1.

    Works on the last two axes, so a stack of masks ``(m, h, w)`` is expanded
    row by row. The clip passes gradient where the unclipped value is at most
    1 and blocks it where overlapping blocks pushed it above 1.
    """
    if delta < 1 or delta % 2 == 0:
        raise ParameterError(f"super-pixel side must be a positive odd integer, got {delta}")
    Cn = dg._raw(centers)
    if Cn.ndim < 2:
        raise DimensionError("superpixel_expand needs at least two axes")
    pre = _box_sum(Cn, delta)
    # box sum of integer indicators is integral; snap away cumulative-sum round-off
    pre = np.where(np.abs(pre - np.round(pre)) < 1e-9, np.round(pre), pre)
    keep = pre <= 1.0
    out = np.minimum(pre, 1.0)
    return dg.custom_op("superpixel_expand", (centers,), out,
                        lambda g: (_box_sum(g * keep, delta),))


class SuperPixelOperator:
    """Dense operator whose rows are dilated center masks of an ``h x w`` image."""

    def __init__(self, centers, delta: int, height: int, width: int, scale: float = 1.0):
        self.centers = dg._as_tensor(centers)
        m, n = self.centers.shape
        if n != height * width:
            raise DimensionError(f"row length {n} is not {height}x{width}")
        self.delta, self.height, self.width = delta, height, width
        stack = dg.reshape(self.centers, (m, height, width))
        mask = dg.reshape(superpixel_expand(stack, delta), (m, n))
        self._dense = DenseOperator(mask, scale)
        self.scale = float(scale)

    @property
    def mask(self) -> dg.Tensor:
        return self._dense.mask

    @property
    def shape(self):
        return self._dense.shape

    def matrix(self) -> dg.Tensor:
        return self._dense.matrix()

    def apply(self, x) -> dg.Tensor:
        return self._dense.apply(x)

    def adjoint(self, y) -> dg.Tensor:
        return self._dense.adjoint(y)

    def dense(self) -> np.ndarray:
        return self._dense.dense()


# ---------------------------------------------------------------- scale search


def default_scale_grid() -> np.ndarray:
    return np.logspace(-3, 1, 16)


def grid_search_scale(loss_at: Callable[[float], float], grid: Iterable[float] | None = None,
                      image_mode: bool = False) -> float:
    """Grid point with the lowest probe loss, times 0.9 for image data.

    ``loss_at(scale)`` should build the operator at that scale, run the
    untrained solver on a probe batch and return the loss. Non-finite losses
    (including divergence errors) disqualify a grid point.
    """
    grid = list(default_scale_grid() if grid is None else grid)
    if not grid:
        raise ConfigError("scale grid is empty")
    best, best_loss = None, math.inf
    for s in grid:
        try:
            loss = float(loss_at(float(s)))
        except NonFiniteError:
            continue
        if math.isfinite(loss) and loss < best_loss:
            best, best_loss = float(s), loss
    if best is None:
        raise ConfigError("every scale on the grid produced a non-finite loss")
    return best * IMAGE_SCALE_FACTOR if image_mode else best
