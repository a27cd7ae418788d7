"""Single-level 2-D sparsifying transforms for vectorised images.

Coefficients are laid out as the four sub-bands ``LL, LH, HL, HH`` (each
``h/2 x w/2``, row-major) concatenated into one vector of length ``h*w``.
``LH`` is lowpass vertically and highpass horizontally; ``HL`` the converse.

The CDF 5/3 (``bior2.2``) transform is computed by lifting with whole-sample
symmetric extension and scaled so the lowpass analysis filter is
``sqrt(2) * [-1/8, 1/4, 3/4, 1/4, -1/8]``.
"""
from __future__ import annotations

from functools import cached_property

import numpy as np

from . import diffgraph as dg
from .errors import DimensionError, ParameterError

KINDS = ("identity", "haar1", "bior2.2-level1")
_SQRT2 = np.sqrt(2.0)


# ---------------------------------------------------------------- 1-D filter banks
# All 1-D helpers transform along axis 0 and leave trailing axes untouched.


def _haar_fwd(x):
    e, o = x[0::2], x[1::2]
    return (e + o) / _SQRT2, (e - o) / _SQRT2


def _haar_inv(a, d):
    out = np.empty((2 * a.shape[0],) + a.shape[1:])
    out[0::2] = (a + d) / _SQRT2
    out[1::2] = (a - d) / _SQRT2
    return out


def _cdf53_fwd(x):
    e, o = x[0::2], x[1::2]
    e_right = np.concatenate([e[1:], e[-1:]])  # x[N] mirrors to x[N-2]
    d = o - 0.5 * (e + e_right)
    d_left = np.concatenate([d[:1], d[:-1]])  # d[-1] mirrors to d[0]
    s = e + 0.25 * (d_left + d)
    return s * _SQRT2, d / _SQRT2


def _cdf53_inv(s, d):
    s = s / _SQRT2
    d = d * _SQRT2
    d_left = np.concatenate([d[:1], d[:-1]])
    e = s - 0.25 * (d_left + d)
    e_right = np.concatenate([e[1:], e[-1:]])
    o = d + 0.5 * (e + e_right)
    out = np.empty((2 * s.shape[0],) + s.shape[1:])
    out[0::2] = e
    out[1::2] = o
    return out


_FILTERS = {
    "haar1": (_haar_fwd, _haar_inv),
    "bior2.2-level1": (_cdf53_fwd, _cdf53_inv),
}


class Transform:
    """Sparsifying transform ``Psi`` acting on flattened ``h x w`` images.

    ``analysis`` maps pixels to coefficients and ``synthesis`` inverts it.
    Both accept a ``(n,)`` vector or an ``(n, B)`` batch, as numpy arrays or
    tensors; the tensor variants are differentiable.
    """

    def __init__(self, kind: str, height: int, width: int):
        if kind not in KINDS:
            raise ParameterError(f"unknown transform kind {kind!r}; expected one of {KINDS}")
        if height < 1 or width < 1:
            raise DimensionError("image dimensions must be positive")
        if kind != "identity" and (height % 2 or width % 2):
            raise DimensionError(f"{kind} needs even image dimensions, got {height}x{width}")
        self.kind = kind
        self.height = height
        self.width = width

    @property
    def n(self) -> int:
        return self.height * self.width

    def __repr__(self):
        return f"Transform({self.kind!r}, {self.height}, {self.width})"

    # numpy level -------------------------------------------------------

    def _check(self, x: np.ndarray):
        if x.shape[0] != self.n:
            raise DimensionError(f"expected leading dimension {self.n}, got {x.shape[0]}")

    def analyze(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        if self.kind == "identity":
            return x.copy()
        fwd, _ = _FILTERS[self.kind]
        h, w = self.height, self.width
        img = x.reshape((h, w) + x.shape[1:])
        lo, hi = fwd(img)  # along rows
        ll, lh = fwd(np.swapaxes(lo, 0, 1))
        hl, hh = fwd(np.swapaxes(hi, 0, 1))
        bands = [np.swapaxes(b, 0, 1).reshape((-1,) + x.shape[1:]) for b in (ll, lh, hl, hh)]
        return np.concatenate(bands, axis=0)

    def synthesize(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64)
        self._check(c)
        if self.kind == "identity":
            return c.copy()
        _, inv = _FILTERS[self.kind]
        h2, w2 = self.height // 2, self.width // 2
        tail = c.shape[1:]
        ll, lh, hl, hh = (np.swapaxes(b.reshape((h2, w2) + tail), 0, 1)
                          for b in np.split(c, 4, axis=0))
        lo = np.swapaxes(inv(ll, lh), 0, 1)
        hi = np.swapaxes(inv(hl, hh), 0, 1)
        return inv(lo, hi).reshape((self.n,) + tail)

    @cached_property
    def analysis_matrix(self) -> np.ndarray:
        return self.analyze(np.eye(self.n))

    @cached_property
    def synthesis_matrix(self) -> np.ndarray:
        return self.synthesize(np.eye(self.n))

    # tensor level --------------------------------------------------------

    def analysis(self, x) -> dg.Tensor:
        if self.kind == "identity":
            return dg._as_tensor(x)
        W = self.analysis_matrix
        return dg.custom_op("wavelet_analysis", (x,), self.analyze(dg._raw(x)),
                            lambda g: (W.T @ g,))

    def synthesis(self, c) -> dg.Tensor:
        if self.kind == "identity":
            return dg._as_tensor(c)
        S = self.synthesis_matrix
        return dg.custom_op("wavelet_synthesis", (c,), self.synthesize(dg._raw(c)),
                            lambda g: (S.T @ g,))

    def synthesis_adjoint(self, x) -> dg.Tensor:
        """``Psi*^T x``: the adjoint of :meth:`synthesis`, needed by gradient steps."""
        if self.kind == "identity":
            return dg._as_tensor(x)
        S = self.synthesis_matrix
        return dg.matmul(dg.constant(S.T), x)
