"""Pointwise algebra of the trace bilinear form on symmetric 2-tensors.

For a metric g the form is P(a, b) = tr_g a tr_g b - <a, b>.  Minus P is a
fiberwise Lorentzian metric; tensors with P(h,h) > 0 split into two
connected components ("timelike cones") distinguished by the sign of tr h.
This module provides the projections, duals, inverse formula, component
classification, and the component-connecting path, both as field
operations (n = 2) and as single-point helpers for arbitrary n.
"""

from __future__ import annotations

import numpy as np

from .calculus import divergence, exterior_d
from .errors import ConvexityError, InconsistentSectionError
from .fields import CovectorField, ScalarField, SymTensorField, sym_to_mat
from .metric import MetricField

DEFAULT_MARGIN = 1e-8  # strictness knob for P(h,h) > 0 checks


class PFormContext:
    """Reference metric plus the convexity margin used by the checks."""

    def __init__(self, g: MetricField, margin: float = DEFAULT_MARGIN):
        self.g = g
        self.margin = margin


def p_form(a: SymTensorField, b: SymTensorField, g: MetricField) -> ScalarField:
    """P(a,b) = tr_g a tr_g b - <a,b>, pointwise."""
    ta = g.trace(a).data
    tb = g.trace(b).data
    ip = g.inner_sym(a, b).data
    return ScalarField(a.atlas, ta * tb - ip)


def _check_convex(h: SymTensorField, g: MetricField, margin: float,
                  require_positive_trace: bool = False):
    php = p_form(h, h, g).data
    scale = g.inner_sym(h, h).data + 1e-300
    bad = php <= margin * scale
    if bad.any():
        raise ConvexityError("P(h,h) <= 0 (tensor leaves the timelike cone)",
                             points=np.argwhere(bad)[:8])
    if require_positive_trace:
        tr = g.trace(h).data
        if (tr <= 0).any():
            raise ConvexityError("tr h <= 0 where positivity is required",
                                 points=np.argwhere(tr <= 0)[:8])
    return php


def xi_project(q: SymTensorField, h: SymTensorField, g: MetricField,
               margin: float = DEFAULT_MARGIN) -> SymTensorField:
    """h-orthogonal projection q - (P(q,h)/P(h,h)) h; output satisfies P(.,h)=0."""
    php = _check_convex(h, g, margin)
    pqh = p_form(q, h, g).data
    coef = pqh / php
    return SymTensorField(q.atlas, q.data - coef[:, None] * h.data)


def epsilon_dual(a: SymTensorField, g: MetricField) -> SymTensorField:
    """eps(a) = (tr_g a) g - a; an involution built from the volume form."""
    tr = g.trace(a).data
    return SymTensorField(a.atlas, tr[:, None] * g.comp.data - a.data)


def h_inverse(h: SymTensorField, g: MetricField,
              margin: float = DEFAULT_MARGIN) -> SymTensorField:
    """Contravariant inverse of h from the trace/traceless decomposition.

    Returned components are contravariant (indices up); h . h^{-1} = id.
    """
    _check_convex(h, g, margin)
    trh = g.trace(h).data
    hat = SymTensorField(h.atlas, h.data - 0.5 * trh[:, None] * g.comp.data)
    hat_up = g.raise_sym(hat)              # (2, 2, 2, N, N)
    hat2 = g.inner_sym(hat, hat).data
    denom = 0.25 * trh ** 2 - 0.5 * hat2
    num = 0.5 * trh[:, None, None] * g._inv_mat - hat_up
    comps = np.stack([num[:, 0, 0], num[:, 0, 1], num[:, 1, 1]], axis=1)
    return SymTensorField(h.atlas, comps / denom[:, None])


def trace_h(q: SymTensorField, h_inv: SymTensorField) -> ScalarField:
    """tr_h q = (h^{-1})^{ij} q_ij for a precomputed contravariant inverse."""
    val = (h_inv.data[:, 0] * q.data[:, 0] + 2.0 * h_inv.data[:, 1] * q.data[:, 1]
           + h_inv.data[:, 2] * q.data[:, 2])
    return ScalarField(q.atlas, val)


def classify_component(h: SymTensorField, h2: SymTensorField, g: MetricField,
                       margin: float = DEFAULT_MARGIN) -> str:
    """"same" iff P(h, h2) > 0 everywhere, "opposite" iff < 0 everywhere."""
    _check_convex(h, g, margin)
    _check_convex(h2, g, margin)
    s = p_form(h, h2, g).data
    if (s > 0).all():
        return "same"
    if (s < 0).all():
        return "opposite"
    raise InconsistentSectionError("sign of P(h, h2) is not constant over the sphere")


def connect_path(h: SymTensorField, t: float, g: MetricField,
                 margin: float = DEFAULT_MARGIN):
    """Point on the P-norm-preserving path from h (t=0) to a multiple of g (t=1).

    Requires P(h,h) > 0.  If tr_g h < 0 everywhere the input is negated
    first and the flip is reported: returns (field, flipped).
    """
    _check_convex(h, g, margin)
    tr = g.trace(h).data
    flipped = False
    if (tr < 0).all():
        h = SymTensorField(h.atlas, -h.data)
        tr = -tr
        flipped = True
    if (tr <= 0).any():
        raise ConvexityError("tr_g h changes sign; not a section of one component",
                             points=np.argwhere(tr <= 0)[:8])
    n = 2.0
    hat = SymTensorField(h.atlas, h.data - (tr / n)[:, None] * g.comp.data)
    b = np.sqrt(np.maximum(g.inner_sym(hat, hat).data, 0.0))
    a = np.sqrt((n - 1.0) / n) * tr
    c = np.arctanh(np.minimum(b / a, 1.0 - 1e-15))
    e0 = g.comp.data / np.sqrt(n * (n - 1.0))
    b_safe = np.maximum(b, 1e-30)
    coef0 = a * np.cosh(c * t) - b * np.sinh(c * t)
    coef1 = (b * np.cosh(c * t) - a * np.sinh(c * t)) / b_safe
    out = coef0[:, None] * e0 + coef1[:, None] * hat.data
    return SymTensorField(h.atlas, out), flipped


def ubar_residual(a: SymTensorField, g: MetricField) -> CovectorField:
    """div a - d tr_g a; vanishing characterizes the degenerate dual bundle."""
    div = divergence(a, g)
    dtr = exterior_d(g.trace(a))
    return div - dtr


# ---- single-point helpers for arbitrary dimension n ------------------------

def p_form_point(a: np.ndarray, b: np.ndarray, g: np.ndarray) -> float:
    """P(a,b) at one point for (n,n) symmetric arrays and metric g."""
    gi = np.linalg.inv(g)
    ta = float(np.sum(gi * a))
    tb = float(np.sum(gi * b))
    ip = float(np.einsum("ik,jl,ij,kl->", gi, gi, a, b))
    return ta * tb - ip


def xi_project_point(q: np.ndarray, h: np.ndarray, g: np.ndarray) -> np.ndarray:
    php = p_form_point(h, h, g)
    if php <= 0:
        raise ConvexityError("P(h,h) <= 0 at the requested point")
    return q - (p_form_point(q, h, g) / php) * h


def connect_path_point(h: np.ndarray, t: float, g: np.ndarray) -> np.ndarray:
    """The component-connecting path at a single point, any dimension n >= 2."""
    n = g.shape[0]
    gi = np.linalg.inv(g)
    tr = float(np.sum(gi * h))
    if p_form_point(h, h, g) <= 0:
        raise ConvexityError("P(h,h) <= 0 at the requested point")
    sign = 1.0
    if tr < 0:
        h, tr, sign = -h, -tr, -1.0
    hat = h - (tr / n) * g
    b = np.sqrt(max(np.einsum("ik,jl,ij,kl->", gi, gi, hat, hat), 0.0))
    a = np.sqrt((n - 1.0) / n) * tr
    c = float(np.arctanh(min(b / a, 1 - 1e-15)))
    e0 = g / np.sqrt(n * (n - 1.0))
    coef0 = a * np.cosh(c * t) - b * np.sinh(c * t)
    coef1 = (b * np.cosh(c * t) - a * np.sinh(c * t)) / max(b, 1e-30)
    return sign * (coef0 * e0 + coef1 * hat)
