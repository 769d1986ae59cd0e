"""Riemannian metrics on the sphere atlas with cached derived geometry.

A ``MetricField`` is immutable after construction: inverse components,
area element, Levi-Civita connection coefficients, and the volume 2-form
are computed once.  The constructor rejects tensors that are not pointwise
positive-definite.
"""

from __future__ import annotations

import numpy as np

from .atlas import ChartAtlas, build_atlas
from .errors import AtlasMismatchError, ConvexityError
from .fields import (CovectorField, ScalarField, SymTensorField, harmonize,
                     scalar_from_units, sym_to_mat)


class MetricField:
    """Positive symmetric 2-tensor with cached inverse, connection, area form.

    ``conformal`` optionally carries the potential u (per-chart grid data)
    of a e^{2u} ring representation; consumers that can exploit the
    structure (curvature evaluation) get much better accuracy from it.
    """

    def __init__(self, comp: SymTensorField, conformal: np.ndarray | None = None):
        self.atlas: ChartAtlas = comp.atlas
        self.comp = comp
        self.conformal = conformal
        g11, g12, g22 = comp.data[:, 0], comp.data[:, 1], comp.data[:, 2]
        det = g11 * g22 - g12 * g12
        if np.any(g11 <= 0.0) or np.any(det <= 0.0):
            bad = np.argwhere((g11 <= 0) | (det <= 0))
            raise ConvexityError("metric is not positive-definite", points=bad[:8])
        self.det = det
        self.sqrt_det = np.sqrt(det)
        inv = np.empty_like(comp.data)
        inv[:, 0] = g22 / det
        inv[:, 1] = -g12 / det
        inv[:, 2] = g11 / det
        self.inv = inv            # contravariant components (11, 12, 22)
        self._gamma_mat = sym_to_mat(comp.data)        # (2, 2, 2, N, N)
        self._inv_mat = sym_to_mat(inv)
        a = self.atlas
        dg = np.stack([a.d1(comp.data), a.d2(comp.data)], axis=1)  # (2, d, 3, N, N)
        dg_mat = sym_to_mat(dg)                                    # (2, d, 2, 2, N, N)
        self.dg_mat = dg_mat
        # Gamma^k_ij = 1/2 g^kl (d_i g_jl + d_j g_il - d_l g_ij)
        sym_part = (dg_mat                                  # [c,i,j,l] = d_i g_jl
                    + dg_mat.transpose(0, 2, 1, 3, 4, 5)    # d_j g_il
                    - dg_mat.transpose(0, 2, 3, 1, 4, 5))   # d_l g_ij
        Gamma = 0.5 * np.einsum("cklnm,cijlnm->ckijnm", self._inv_mat, sym_part)
        self.christoffels = Gamma                                  # (2, k, i, j, N, N)
        # volume form eps_ij = sqrt(det) * [[0,1],[-1,0]]
        eps = np.zeros((2, 2, 2) + det.shape[-2:])
        eps[:, 0, 1] = self.sqrt_det
        eps[:, 1, 0] = -self.sqrt_det
        self.eps_low = eps

    # ---- pointwise algebra -------------------------------------------------

    def _check(self, f):
        if f.atlas != self.atlas:
            raise AtlasMismatchError("field/metric atlas mismatch")

    def trace(self, a: SymTensorField) -> ScalarField:
        self._check(a)
        d = a.data
        val = self.inv[:, 0] * d[:, 0] + 2.0 * self.inv[:, 1] * d[:, 1] + self.inv[:, 2] * d[:, 2]
        return ScalarField(self.atlas, val)

    def inner_sym(self, a: SymTensorField, b: SymTensorField) -> ScalarField:
        self._check(a)
        self._check(b)
        am = sym_to_mat(a.data)
        bm = sym_to_mat(b.data)
        val = np.einsum("ciknm,cjlnm,cijnm,cklnm->cnm",
                        self._inv_mat, self._inv_mat, am, bm)
        return ScalarField(self.atlas, val)

    def inner_cov(self, t: CovectorField, e: CovectorField) -> ScalarField:
        self._check(t)
        self._check(e)
        val = np.einsum("cijnm,cinm,cjnm->cnm", self._inv_mat, t.data, e.data)
        return ScalarField(self.atlas, val)

    def sharp(self, t: CovectorField) -> np.ndarray:
        """Contravariant components of a covector, shape (2, 2, N, N)."""
        self._check(t)
        return np.einsum("cijnm,cjnm->cinm", self._inv_mat, t.data)

    def raise_sym(self, a: SymTensorField) -> np.ndarray:
        """a with both indices raised, matrix layout (2, 2, 2, N, N)."""
        return np.einsum("ciknm,cjlnm,cklnm->cijnm",
                         self._inv_mat, self._inv_mat, sym_to_mat(a.data))

    def scaled(self, c: float) -> "MetricField":
        return MetricField(SymTensorField(self.atlas, self.comp.data * float(c)))


def round_metric(atlas: ChartAtlas, radius: float = 1.0) -> MetricField:
    """Metric of the radius-r round sphere: r^2 * lambda^2 * identity."""
    lam2 = (radius * atlas.round_lambda) ** 2
    comp = np.stack([lam2, np.zeros_like(lam2), lam2], axis=1)
    u = np.full((2, atlas.n, atlas.n), np.log(radius))
    return MetricField(SymTensorField(atlas, comp), conformal=u)


def conformal_round(atlas: ChartAtlas, u, radius: float = 1.0) -> MetricField:
    """Metric e^{2u} r^2 ringgamma for u a ScalarField or a function of units."""
    if not isinstance(u, ScalarField):
        u = scalar_from_units(atlas, u)
    fac = np.exp(2.0 * u.data)
    lam2 = (radius * atlas.round_lambda) ** 2 * fac
    comp = np.stack([lam2, np.zeros_like(lam2), lam2], axis=1)
    return MetricField(SymTensorField(atlas, comp),
                       conformal=u.data + np.log(radius))


def conformal_scale(base: MetricField, u: ScalarField, t: float = 1.0) -> MetricField:
    """e^{2 t u} * base."""
    fac = np.exp(2.0 * t * u.data)[:, None]
    conf = base.conformal + t * u.data if base.conformal is not None else None
    return MetricField(SymTensorField(base.atlas, base.comp.data * fac), conformal=conf)
