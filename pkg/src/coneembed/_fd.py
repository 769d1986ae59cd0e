"""Finite-difference and local-interpolation kernels on uniform 1D/2D grids.

All derivative operators act on the trailing axes of an array, so leading
axes (components, batches) broadcast for free.  Interior stencils are
6th-order centered; the three rows nearest each edge use 6th-order
one-sided stencils.  Weights are generated with Fornberg's algorithm, so
the same machinery also provides Lagrange interpolation weights (derivative
order zero).
"""

from __future__ import annotations

import numpy as np


def fd_weights(xi: float, x: np.ndarray, m: int) -> np.ndarray:
    """Fornberg weights for derivatives 0..m at point ``xi`` from nodes ``x``.

    Returns an array of shape (m+1, len(x)); row k holds the weights of the
    k-th derivative.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    C = np.zeros((m + 1, n))
    C[0, 0] = 1.0
    c1 = 1.0
    c4 = x[0] - xi
    for i in range(1, n):
        mn = min(i, m)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - xi
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    C[k, i] = c1 * (k * C[k - 1, i - 1] - c5 * C[k, i - 1]) / c2
                C[0, i] = -c1 * c5 * C[0, i - 1] / c2
            for k in range(mn, 0, -1):
                C[k, j] = (c4 * C[k, j] - k * C[k - 1, j]) / c3
            C[0, j] = c4 * C[0, j] / c3
        c1 = c2
    return C


class DiffOp:
    """First-derivative operator along one axis of a uniform grid.

    ``order`` is the interior accuracy order (even); the stencil half-width
    is order/2.  Edge rows are filled with one-sided stencils of the same
    order.
    """

    def __init__(self, order: int = 6):
        if order % 2 or order < 2:
            raise ValueError("order must be even and >= 2")
        self.order = order
        self.half = order // 2
        nodes = np.arange(-self.half, self.half + 1, dtype=float)
        self.center = fd_weights(0.0, nodes, 1)[1]
        # one-sided rows: derivative at position r from nodes 0..order
        side_nodes = np.arange(order + 1, dtype=float)
        self.edge = [fd_weights(float(r), side_nodes, 1)[1] for r in range(self.half)]

    def apply(self, f: np.ndarray, h: float, axis: int = -1) -> np.ndarray:
        f = np.asarray(f)
        f_ = np.moveaxis(f, axis, -1)
        n = f_.shape[-1]
        if n < self.order + 1:
            raise ValueError("grid too small for stencil")
        out = np.zeros_like(f_)
        hw = self.half
        # interior: sum over offsets
        core = out[..., hw:n - hw]
        for k, w in enumerate(self.center):
            if w == 0.0:
                continue
            off = k - hw
            core += w * f_[..., hw + off:n - hw + off]
        # edges
        m = self.order + 1
        for r, w in enumerate(self.edge):
            out[..., r] = np.tensordot(f_[..., :m], w, axes=(-1, 0))
            out[..., n - 1 - r] = -np.tensordot(f_[..., n - m:][..., ::-1], w, axes=(-1, 0))
        return np.moveaxis(out / h, -1, axis)


_DIFF_CACHE: dict[int, DiffOp] = {}


def diff(f: np.ndarray, h: float, axis: int, order: int = 6) -> np.ndarray:
    op = _DIFF_CACHE.get(order)
    if op is None:
        op = _DIFF_CACHE[order] = DiffOp(order)
    return op.apply(f, h, axis)


_STEP_P = 8  # smoothstep regularity class C^p


def smoothstep(t: np.ndarray) -> np.ndarray:
    """Polynomial C^p step: 0 for t <= 0, 1 for t >= 1.

    Normalized incomplete-beta step int_0^t u^p (1-u)^p du / B(p+1, p+1);
    moderate derivative constants up to order p keep interpolation and
    quadrature of partition-of-unity weights accurate at grid scale.
    """
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    p = _STEP_P
    # expand (1-u)^p and integrate term by term: S(t) = c * sum_k binom(p,k)(-1)^k t^(p+k+1)/(p+k+1)
    from math import comb, factorial
    c = factorial(2 * p + 1) / (factorial(p) ** 2)
    out = np.zeros_like(t)
    for k in range(p + 1):
        out += comb(p, k) * (-1.0) ** k * t ** (p + k + 1) / (p + k + 1)
    return c * out


def bump_profile(r: np.ndarray, r_in: float, r_out: float) -> np.ndarray:
    """1 for r <= r_in, 0 for r >= r_out, smooth monotone in between."""
    return 1.0 - smoothstep((np.asarray(r, float) - r_in) / (r_out - r_in))


class LagrangeInterp:
    """Tensor-product Lagrange interpolation on a uniform 2D grid.

    ``points`` selects a points-per-axis stencil (4 = bicubic, 6 = quintic).
    Exact on grid nodes.  Evaluates f at scattered (x1, x2); the grid spans
    [-L, L]^2 with n nodes per axis, trailing axes of f are (n, n).
    """

    def __init__(self, points: int = 6):
        self.p = points

    def _axis_weights(self, t: np.ndarray) -> np.ndarray:
        # t in [0,1): fractional position between center nodes of the stencil
        p = self.p
        base = np.arange(p, dtype=float) - (p // 2 - 1)
        w = np.ones((t.size, p))
        for j in range(p):
            for k in range(p):
                if k == j:
                    continue
                w[:, j] *= (t - base[k]) / (base[j] - base[k])
        return w

    def eval(self, f: np.ndarray, L: float, n: int, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        """f has shape (..., n, n); returns shape (..., K)."""
        p = self.p
        h = 2.0 * L / (n - 1)
        x1 = np.asarray(x1, float).ravel()
        x2 = np.asarray(x2, float).ravel()
        g1 = (x1 + L) / h
        g2 = (x2 + L) / h
        i1 = np.floor(g1).astype(int)
        i2 = np.floor(g2).astype(int)
        lo = p // 2 - 1
        # clamp stencil inside the grid
        s1 = np.clip(i1 - lo, 0, n - p)
        s2 = np.clip(i2 - lo, 0, n - p)
        t1 = g1 - s1 - lo
        t2 = g2 - s2 - lo
        w1 = self._axis_weights(t1)   # (K, p)
        w2 = self._axis_weights(t2)
        idx1 = s1[:, None] + np.arange(p)[None, :]   # (K, p)
        idx2 = s2[:, None] + np.arange(p)[None, :]
        # gather f at (idx1 x idx2) patches: result (..., K, p, p)
        patch = f[..., idx1[:, :, None], idx2[:, None, :]]
        return np.einsum("...kij,ki,kj->...k", patch, w1, w2)


_INTERP_CACHE: dict[int, LagrangeInterp] = {}


def interp2(f: np.ndarray, L: float, n: int, x1, x2, points: int = 6) -> np.ndarray:
    it = _INTERP_CACHE.get(points)
    if it is None:
        it = _INTERP_CACHE[points] = LagrangeInterp(points)
    return it.eval(f, L, n, x1, x2)


def aitken_limit(seq: np.ndarray) -> float:
    """Aitken delta-squared extrapolation of the last three terms."""
    a0, a1, a2 = seq[-3], seq[-2], seq[-1]
    denom = a2 - 2 * a1 + a0
    if abs(denom) < 1e-300:
        return float(a2)
    return float(a2 - (a2 - a1) ** 2 / denom)


def loglog_slope(x: np.ndarray, y: np.ndarray) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx = np.log(np.asarray(x, float))
    ly = np.log(np.maximum(np.asarray(y, float), 1e-300))
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    sol, *_ = np.linalg.lstsq(A, ly, rcond=None)
    return float(sol[0])
