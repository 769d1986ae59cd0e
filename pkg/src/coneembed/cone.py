"""Null-cone geometries over an annulus of R^3.

The ambient degenerate metric sigma lives on the annulus {s_min < |z| <
s_max}; the radial direction is its null direction; leaf data (gamma_s,
chi_s) on the sphere determines sigma off the reference leaf by radial
transport.  Two variants ship:

- "minkowski": the standard lightcone; sigma(z) = I - n n^T with n = z/|z|,
  chi(z) = sigma/|z|, all jets in closed form.
- "synthetic": a round or perturbed start leaf plus a prescribed curvature
  source alpha(s) with power-law decay; (gamma_s, chi_s) are integrated
  outward and splined in s together with enough chart derivatives to supply
  sigma, d sigma, d^2 sigma anywhere in the annulus.

Leaf propagation (transport of (gamma, chi) with the trace-consistency
monitor), convexity/energy reports, asymptotic sequences, and the graph
cross-section curvature live here as well.
"""

from __future__ import annotations

import json

import numpy as np
from scipy.interpolate import CubicSpline

from . import atlas as at
from ._fd import LagrangeInterp, aitken_limit, diff, loglog_slope
from .atlas import ChartAtlas, build_atlas
from .calculus import area, exterior_d, gauss_curvature, integrate
from .errors import AssumptionError, CausticError, ConfigError, DomainError
from .fields import ScalarField, SymTensorField, harmonize, scalar_from_units, sym_from_r3, sym_to_mat
from .metric import MetricField, round_metric
from .profiles import harmonic_sum

_TRW = np.array([1.0, 2.0, 1.0])[None, :, None, None]  # packed-trace weights


def _pack_trace(ginv: np.ndarray, a: np.ndarray) -> np.ndarray:
    """g^{ij} a_{ij} for packed components (c, 3, N, N)."""
    return np.sum(ginv * _TRW * a, axis=1)


def _inv2(comp: np.ndarray):
    g11, g12, g22 = comp[:, 0], comp[:, 1], comp[:, 2]
    det = g11 * g22 - g12 * g12
    inv = np.empty_like(comp)
    inv[:, 0] = g22 / det
    inv[:, 1] = -g12 / det
    inv[:, 2] = g11 / det
    return inv, det


def _chi_sq(chi: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    """(chi g^{-1} chi)_{ij} in packed components."""
    c11, c12, c22 = chi[:, 0], chi[:, 1], chi[:, 2]
    i11, i12, i22 = ginv[:, 0], ginv[:, 1], ginv[:, 2]
    m11 = c11 * i11 + c12 * i12
    m12 = c11 * i12 + c12 * i22
    m22 = c12 * i12 + c22 * i22
    out = np.empty_like(chi)
    out[:, 0] = m11 * c11 + m12 * c12
    out[:, 1] = m11 * c12 + m12 * c22
    out[:, 2] = m12 * c12 + m22 * c22
    return out


def _shear_sq(gam: np.ndarray, chi: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    """|traceless part of chi|^2 against gamma, packed components."""
    tr = _pack_trace(ginv, chi)
    hat = chi - 0.5 * tr[:, None] * gam
    hat_up = _chi_sq(hat, ginv)  # misuse: (hat ginv hat); trace against ginv below
    return _pack_trace(ginv, hat_up)


# ---- chart jets of x(z) -----------------------------------------------------

def _x_jets(z: np.ndarray, chart: np.ndarray, order: int = 2):
    """Jets of the chart-coordinate map x(z): x_i = c_i z_i / (s + q3 z_3).

    Returns (x, X, dX, d2X): values and first/second/third z-derivatives,
    shapes (K,2), (K,2,3), (K,2,3,3), (K,2,3,3,3); higher entries are None
    below the requested order.
    """
    z = np.asarray(z, float)
    K = z.shape[0]
    s = np.linalg.norm(z, axis=1)
    n = z / s[:, None]
    q3 = np.where(chart == 0, 1.0, -1.0)
    ci = np.stack([np.ones(K), q3], axis=1)                # (K, 2)
    Q = s + q3 * z[:, 2]
    Qm = n.copy()
    Qm[:, 2] += q3                                          # (K, 3)
    P = np.eye(3)[None] - n[:, :, None] * n[:, None, :]     # (K, 3, 3)
    zi = z[:, :2]                                           # (K, 2)
    dlt = np.zeros((K, 2, 3))
    dlt[:, 0, 0] = 1.0
    dlt[:, 1, 1] = 1.0
    QN = Q[:, None]
    x = ci * zi / QN
    X = ci[:, :, None] * (dlt / Q[:, None, None]
                          - np.einsum("ki,km->kim", zi, Qm) / Q[:, None, None] ** 2)
    if order < 1:
        return x, X, None, None
    Ps = P / s[:, None, None]
    Q2 = Q[:, None, None, None] ** 2
    dX = ci[:, :, None, None] * (
        -np.einsum("kim,kn->kimn", dlt, Qm)
        - np.einsum("kin,km->kimn", dlt, Qm)
        - np.einsum("ki,kmn->kimn", zi, Ps)
        + 2.0 * np.einsum("ki,km,kn->kimn", zi, Qm, Qm) / Q[:, None, None, None]
    ) / Q2
    if order < 2:
        return x, X, dX, None
    # dP[k, m, n, r] = d_r P_{mn} = -(P_{mr} n_n + n_m P_{nr}) / s
    dP = -(np.einsum("kmr,kn->kmnr", P, n) + np.einsum("km,knr->kmnr", n, P)) / s[:, None, None, None]
    QL = Q[:, None, None, None, None]
    t1 = (-np.einsum("kim,knr->kimnr", dlt, Ps)
          + 2.0 * np.einsum("kim,kn,kr->kimnr", dlt, Qm, Qm) / QL)
    t2 = (-np.einsum("kin,kmr->kimnr", dlt, Ps)
          + 2.0 * np.einsum("kin,km,kr->kimnr", dlt, Qm, Qm) / QL)
    t3 = (-np.einsum("kir,kmn->kimnr", dlt, Ps)
          - np.einsum("ki,kmnr->kimnr", zi, dP) / s[:, None, None, None, None]
          + np.einsum("ki,kmn,kr->kimnr", zi, Ps, n) / s[:, None, None, None, None]
          + 2.0 * np.einsum("ki,kmn,kr->kimnr", zi, Ps, Qm) / QL)
    t4 = 2.0 * (np.einsum("kir,km,kn->kimnr", dlt, Qm, Qm)
                + np.einsum("ki,kmr,kn->kimnr", zi, Ps, Qm)
                + np.einsum("ki,km,knr->kimnr", zi, Qm, Ps)
                - 3.0 * np.einsum("ki,km,kn,kr->kimnr", zi, Qm, Qm, Qm) / QL) / QL
    d2X = ci[:, :, None, None, None] * (t1 + t2 + t3 + t4) / Q2[..., None]
    return x, X, dX, d2X


def _round_jets(x: np.ndarray):
    """lambda^2(x) = 4/(1+|x|^2)^2 and its first/second chart derivatives.

    Returns (lam2 (K,), d (K,2), dd (K,2,2)) for the round conformal factor;
    the round metric components are lam2 * delta_ij in every chart.
    """
    x = np.asarray(x, float)
    D = 1.0 + np.sum(x * x, axis=-1)
    lam2 = 4.0 / D ** 2
    d = -16.0 * x / D[:, None] ** 3
    dd = (-16.0 * np.eye(2)[None] / D[:, None, None] ** 3
          + 96.0 * x[:, :, None] * x[:, None, :] / D[:, None, None] ** 4)
    return lam2, d, dd


def _units_chart(z: np.ndarray):
    s = np.linalg.norm(z, axis=1)
    n = z / s[:, None]
    return s, n, at.preferred_chart(n)


# ---- leaf splines -----------------------------------------------------------

class LeafSplines:
    """Cubic splines in s of per-chart grid fields with scatter evaluation."""

    def __init__(self, knots: np.ndarray, data: np.ndarray, atlas: ChartAtlas):
        self.knots = np.asarray(knots, float)
        self.atlas = atlas
        self.ncomp = data.shape[2]
        self.cs = CubicSpline(self.knots, data, axis=0)

    def _intervals(self, s: np.ndarray):
        idx = np.searchsorted(self.knots, s, side="right") - 1
        return np.clip(idx, 0, len(self.knots) - 2)

    @staticmethod
    def _horner(coef4, dt, deriv):
        """Evaluate the cubic piece (coefficient axis first) or a derivative."""
        out = None
        for k in range(4 - deriv):
            fac = 1.0
            for d in range(deriv):
                fac *= (3 - k - d)
            piece = fac * coef4[k]
            out = piece if out is None else out * dt + piece
        return out

    def eval_grid(self, svals: np.ndarray, deriv: int = 0) -> np.ndarray:
        """Evaluate at per-gridpoint radii svals (2, N, N) -> (2, C, N, N)."""
        a = self.atlas
        itv = self._intervals(svals)
        dt = (svals - self.knots[itv])[:, None]
        ch, ii, jj = np.indices((2, a.n, a.n))
        coef4 = [np.moveaxis(self.cs.c[k][itv, ch, :, ii, jj], -1, 1) for k in range(4)]
        return self._horner(coef4, dt, deriv)

    def eval_scatter(self, svals, chart, pts, derivs=(0,), interp_points: int = 6,
                     chunk: int = 4096):
        """Evaluate at scattered (s, chart, x); returns {deriv: (K, C)}."""
        a = self.atlas
        K = svals.shape[0]
        p = interp_points
        interp = LagrangeInterp(p)
        out = {d: np.empty((K, self.ncomp)) for d in derivs}
        n = a.n
        for start in range(0, K, chunk):
            sl = slice(start, min(start + chunk, K))
            s_, ch_, x_ = svals[sl], chart[sl], pts[sl]
            itv = self._intervals(s_)
            dt = s_ - self.knots[itv]
            hg = (x_ + at.CHART_L) / a.h
            base = np.clip(np.floor(hg).astype(int) - (p // 2 - 1), 0, n - p)
            t1 = hg[:, 0] - base[:, 0] - (p // 2 - 1)
            t2 = hg[:, 1] - base[:, 1] - (p // 2 - 1)
            w = interp._axis_weights(t1)[:, :, None] * interp._axis_weights(t2)[:, None, :]
            idx1 = base[:, 0][:, None] + np.arange(p)[None, :]
            idx2 = base[:, 1][:, None] + np.arange(p)[None, :]
            # advanced indices are separated by slices, so the broadcast
            # (k, p, p) block moves to the front: patch is (k, p, p, 4, C)
            patch = self.cs.c[:, itv[:, None, None], ch_[:, None, None], :,
                              idx1[:, :, None], idx2[:, None, :]]
            vals = np.einsum("kabqc,kab->qkc", patch, w)
            for d in derivs:
                out[d][sl] = self._horner([vals[k] for k in range(4)], dt[:, None], d)
        return out


# ---- leaf data and propagation -----------------------------------------------

class LeafData:
    """One cross-section: metric, second form, curvature source."""

    def __init__(self, s: float, gamma: MetricField, chi: SymTensorField,
                 alpha: SymTensorField | None = None):
        self.s = float(s)
        self.gamma = gamma
        self.chi = chi
        self.atlas = gamma.atlas
        if alpha is None:
            alpha = SymTensorField(self.atlas, np.zeros_like(chi.data))
        self.alpha = alpha
        tr = gamma.trace(chi).data
        if (tr <= 0).any():
            raise CausticError("null expansion not positive on the leaf", s=s,
                               points=np.argwhere(tr <= 0)[:8])

    @property
    def tr_chi(self) -> ScalarField:
        return self.gamma.trace(self.chi)

    @property
    def shear(self) -> SymTensorField:
        tr = self.tr_chi.data
        return SymTensorField(self.atlas,
                              self.chi.data - 0.5 * tr[:, None] * self.gamma.comp.data)

    @property
    def energy_density(self) -> ScalarField:
        """G(L, L) = tr_gamma alpha."""
        return self.gamma.trace(self.alpha)


def _propagate_arrays(s0: float, s1: float, gamma: np.ndarray, chi: np.ndarray,
                      alpha_fn, nsub: int, theta0: np.ndarray | None = None):
    """RK4 transport of packed (gamma, chi) plus the scalar expansion
    integrated from its own equation (trace-consistency monitor).

    alpha_fn may be None (vacuum), a callable s -> components, or a callable
    (s, gamma) -> components.
    """
    steps = max(1, nsub)
    ds = (s1 - s0) / steps
    g = gamma.copy()
    x = chi.copy()
    if theta0 is None:
        ginv, _ = _inv2(g)
        th = _pack_trace(ginv, x)
    else:
        th = theta0.copy()
    s = s0

    def rhs(s, g, x, th):
        ginv, _ = _inv2(g)
        if alpha_fn is None:
            al = np.zeros_like(x)
        else:
            try:
                al = alpha_fn(s, g)
            except TypeError:
                al = alpha_fn(s)
        dg = 2.0 * x
        dx = -al + _chi_sq(x, ginv)
        dth = -0.5 * th ** 2 - _shear_sq(g, x, ginv) - _pack_trace(ginv, al)
        return dg, dx, dth

    for _ in range(steps):
        k1 = rhs(s, g, x, th)
        k2 = rhs(s + ds / 2, g + ds / 2 * k1[0], x + ds / 2 * k1[1], th + ds / 2 * k1[2])
        k3 = rhs(s + ds / 2, g + ds / 2 * k2[0], x + ds / 2 * k2[1], th + ds / 2 * k2[2])
        k4 = rhs(s + ds, g + ds * k3[0], x + ds * k3[1], th + ds * k3[2])
        g = g + ds / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        x = x + ds / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        th = th + ds / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        s += ds
        ginv, det = _inv2(g)
        trc = _pack_trace(ginv, x)
        if (trc <= 0).any() or (det <= 0).any():
            raise CausticError("null expansion hit zero during propagation", s=s,
                               points=np.argwhere(trc <= 0)[:8])
    return g, x, th


def propagate_leaf(data: LeafData, s1: float, alpha_fn=None, nsub: int | None = None):
    """Transport leaf data to radius s1; returns (LeafData, report).

    The report carries the sup residual between the trace of the transported
    second form and the independently integrated expansion.
    """

    if nsub is None:
        nsub = max(16, int(abs(s1 - data.s) * 200))
    g, x, th = _propagate_arrays(data.s, s1, data.gamma.comp.data, data.chi.data,
                                 alpha_fn, nsub)
    gamma1 = MetricField(SymTensorField(data.atlas, g))
    chi1 = SymTensorField(data.atlas, x)
    out = LeafData(s1, gamma1, chi1, SymTensorField(data.atlas, alpha_fn(s1)))
    resid = float(np.max(np.abs(gamma1.trace(chi1).data - th)))
    return out, {"raychaudhuri_residual": resid, "steps": nsub}


# ---- models -------------------------------------------------------------------

class NullConeModel:
    """Base class; construct via ``minkowski_cone`` / ``synthetic_cone``."""

    variant = "base"

    def __init__(self, atlas: ChartAtlas, s0: float, s_min: float, s_max: float):
        self.atlas = atlas
        self.s0 = float(s0)
        self.s_min = float(s_min)
        self.s_max = float(s_max)
        self.kappa = 0.0          # geodesic gauge throughout

    def check_domain(self, s: np.ndarray):
        s = np.asarray(s)
        if (s <= self.s_min).any() or (s >= self.s_max).any():
            raise DomainError(
                f"radius outside the annulus ({self.s_min:.4g}, {self.s_max:.4g}): "
                f"range [{float(np.min(s)):.4g}, {float(np.max(s)):.4g}]")

    def sigma_eval(self, z: np.ndarray, order: int = 0):
        raise NotImplementedError

    def chi_eval(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def leaf(self, s: float) -> LeafData:
        raise NotImplementedError

    def leaf_jets_at_grid(self, svals: np.ndarray) -> dict:
        raise NotImplementedError

    def alpha_fn(self, s: float) -> np.ndarray:
        return np.zeros((2, 3, self.atlas.n, self.atlas.n))

    def to_config(self) -> dict:
        raise NotImplementedError


class MinkowskiCone(NullConeModel):
    """The standard lightcone: sigma(z) = I - n n^T, chi = sigma / |z|."""

    variant = "minkowski"

    def __init__(self, atlas: ChartAtlas, s0: float = 1.0, s_min: float = 1e-3,
                 s_max: float = np.inf):
        super().__init__(atlas, s0, s_min, s_max)

    def sigma_eval(self, z: np.ndarray, order: int = 0):
        z = np.asarray(z, float)
        s = np.linalg.norm(z, axis=1)
        self.check_domain(s)
        n = z / s[:, None]
        P = np.eye(3)[None] - n[:, :, None] * n[:, None, :]
        if order == 0:
            return (P,)
        sN = s[:, None, None, None]
        # d_e sigma_{mn} = -(P_{me} n_n + n_m P_{ne}) / s
        dsig = -(np.einsum("kme,kn->kmne", P, n) + np.einsum("km,kne->kmne", n, P)) / sN
        if order == 1:
            return P, dsig
        # dP[k, a, b, x] = d_x P_{ab} = -(P_{ax} n_b + n_a P_{bx}) / s
        dP = -(np.einsum("kax,kb->kabx", P, n) + np.einsum("ka,kbx->kabx", n, P)) / sN
        d2 = (-(np.einsum("kmex,kn->kmnex", dP, n)
                + np.einsum("kme,knx->kmnex", P, P) / sN[..., None]
                + np.einsum("kmx,kne->kmnex", P, P) / sN[..., None]
                + np.einsum("km,knex->kmnex", n, dP)) / sN[..., None]
              + (np.einsum("kme,kn->kmne", P, n)
                 + np.einsum("km,kne->kmne", n, P))[..., None]
              * n[:, None, None, None, :] / sN[..., None] ** 2)
        return P, dsig, d2

    def chi_eval(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, float)
        s = np.linalg.norm(z, axis=1)
        self.check_domain(s)
        n = z / s[:, None]
        return (np.eye(3)[None] - n[:, :, None] * n[:, None, :]) / s[:, None, None]

    def leaf(self, s: float) -> LeafData:
        g = round_metric(self.atlas, radius=s)
        chi = SymTensorField(self.atlas, g.comp.data / s)
        return LeafData(s, g, chi)

    def leaf_jets_at_grid(self, svals: np.ndarray) -> dict:
        a = self.atlas
        lam2 = a.round_lambda ** 2
        ring = np.stack([lam2, np.zeros_like(lam2), lam2], axis=1)
        s = svals
        return {"gamma": s[:, None] ** 2 * ring, "chi": s[:, None] * ring,
                "ds_gamma": 2.0 * s[:, None] * ring, "ds_chi": ring,
                "K": 1.0 / s ** 2, "ds_K": -2.0 / s ** 3}

    def leaf_scatter(self, svals: np.ndarray, chart: int, pts: np.ndarray) -> dict:
        """Leaf metric/second form and the fixed-s chart derivative of the
        metric at scattered points of one chart."""
        lam2, dl, _ = _round_jets(pts)
        eye = np.eye(2)[None]
        K = svals.shape[0]
        g = (svals ** 2 * lam2)[:, None, None] * eye
        dg = (svals ** 2)[:, None, None, None] * dl[:, :, None, None] * eye[:, None]
        chi = (svals * lam2)[:, None, None] * eye
        return {"gamma": g, "dgamma": dg, "chi": chi}

    def to_config(self) -> dict:
        return {"variant": "minkowski", "s0": self.s0,
                "annulus": [self.s_min, None if np.isinf(self.s_max) else self.s_max]}


class SyntheticCone(NullConeModel):
    """Cone integrated from start-leaf data and a prescribed curvature source.

    The curvature source has component decay
    alpha(s) = s^-(1+delta) A_hat(y) + s^-(2+delta) c(y) ring
    with A_hat traceless against the round metric and c >= 0 (null energy).
    """

    variant = "synthetic"

    def __init__(self, atlas: ChartAtlas, s0: float, s_max: float, delta: float,
                 start_gamma: MetricField, start_chi: SymTensorField,
                 alpha_hat: SymTensorField, alpha_trace: ScalarField,
                 knots_per_decade: int = 60, nsub: int = 4, config: dict | None = None):
        super().__init__(atlas, s0, s0, s_max)
        self.delta = float(delta)
        self._ahat = alpha_hat
        self._atr = alpha_trace
        if (alpha_trace.data < -1e-12).any():
            raise AssumptionError("alpha trace profile must be nonnegative (null energy)")
        self._config = config or {}
        lam2 = atlas.round_lambda ** 2
        self._ring = np.stack([lam2, np.zeros_like(lam2), lam2], axis=1)
        nk = max(8, int(np.ceil(np.log10(s_max / s0) * knots_per_decade)))
        self.knots = np.geomspace(s0, s_max, nk)
        self._gam_splines = None
        self._integrate(start_gamma, start_chi, nsub)

    def alpha_raw(self, s: float, gamma: np.ndarray) -> np.ndarray:
        """Curvature source at radius s, made traceless against the current
        leaf metric so the energy density stays the prescribed nonnegative
        trace seed (null energy by construction)."""
        s = float(s)
        hat = s ** (-(1.0 + self.delta)) * self._ahat.data
        ginv, _ = _inv2(gamma)
        tr = _pack_trace(ginv, hat)
        hat = hat - 0.5 * tr[:, None] * gamma
        return hat + s ** (-(2.0 + self.delta)) * self._atr.data[:, None] * self._ring

    def alpha_fn(self, s: float) -> np.ndarray:
        gamma = self._gam_splines.cs(float(np.clip(s, self.knots[0], self.knots[-1])))
        return self.alpha_raw(s, gamma)

    def _integrate(self, g0: MetricField, chi0: SymTensorField, nsub: int):
        a = self.atlas
        gam = g0.comp.data.copy()
        chi = chi0.data.copy()
        gam_knots, chi_knots = [gam.copy()], [chi.copy()]
        ray = []
        th = None
        for k in range(1, len(self.knots)):
            gam, chi, th = _propagate_arrays(self.knots[k - 1], self.knots[k],
                                             gam, chi, self.alpha_raw, nsub, th)
            ginv, _ = _inv2(gam)
            ray.append(float(np.max(np.abs(_pack_trace(ginv, chi) - th))))
            gam_knots.append(gam.copy())
            chi_knots.append(chi.copy())
        self.raychaudhuri_residuals = ray
        gam_arr = np.asarray(gam_knots)           # (M, 2, 3, N, N)
        chi_arr = np.asarray(chi_knots)
        sN = self.knots[:, None, None, None, None]
        # spline the deviation from the round family so an unperturbed cone
        # reproduces the lightcone evaluators to round-off
        gbar_dev = gam_arr / sN ** 2 - self._ring[None]
        d1 = diff(gbar_dev, a.h, axis=-2, order=6)
        d2_ = diff(gbar_dev, a.h, axis=-1, order=6)
        d11 = diff(d1, a.h, axis=-2, order=6)
        d12 = diff(d1, a.h, axis=-1, order=6)
        d22 = diff(d2_, a.h, axis=-1, order=6)
        stack = np.concatenate([gbar_dev, d1, d2_, d11, d12, d22], axis=2)
        self._gbar_splines = LeafSplines(self.knots, stack, a)
        self._chi_splines = LeafSplines(self.knots, chi_arr - sN * self._ring[None], a)
        self._gam_splines = LeafSplines(self.knots, gam_arr, a)
        self._K_splines = None

    def _ensure_K(self):
        if self._K_splines is not None:
            return
        Ks = []
        for sk in self.knots:
            g = MetricField(SymTensorField(self.atlas, self._gam_splines.cs(sk)))
            Ks.append(gauss_curvature(g).data[:, None])
        self._K_splines = LeafSplines(self.knots, np.asarray(Ks), self.atlas)

    def leaf(self, s: float) -> LeafData:
        if not (self.knots[0] <= s <= self.knots[-1]):
            raise DomainError(f"leaf radius {s} outside [{self.knots[0]}, {self.knots[-1]}]")
        g = MetricField(SymTensorField(self.atlas, self._gam_splines.cs(float(s))))
        chi = SymTensorField(self.atlas,
                             self._chi_splines.cs(float(s)) + float(s) * self._ring)
        return LeafData(s, g, chi, SymTensorField(self.atlas, self.alpha_fn(s)))

    def leaf_jets_at_grid(self, svals: np.ndarray) -> dict:
        self._ensure_K()
        return {"gamma": self._gam_splines.eval_grid(svals, 0),
                "chi": self._chi_splines.eval_grid(svals, 0)
                       + svals[:, None] * self._ring,
                "ds_gamma": self._gam_splines.eval_grid(svals, 1),
                "ds_chi": self._chi_splines.eval_grid(svals, 1) + self._ring,
                "K": self._K_splines.eval_grid(svals, 0)[:, 0],
                "ds_K": self._K_splines.eval_grid(svals, 1)[:, 0]}

    def _unpack22(self, flat: np.ndarray, nblk: int):
        K = flat.shape[0]
        out = []
        for blk in range(nblk):
            comp = flat[:, 3 * blk:3 * blk + 3]
            m = np.empty((K, 2, 2))
            m[:, 0, 0] = comp[:, 0]
            m[:, 0, 1] = m[:, 1, 0] = comp[:, 1]
            m[:, 1, 1] = comp[:, 2]
            out.append(m)
        return out

    def sigma_eval(self, z: np.ndarray, order: int = 0):
        z = np.asarray(z, float)
        s, n, chart = _units_chart(z)
        self.check_domain(s)
        x, X, dX, d2X = _x_jets(z, chart, order=order)
        derivs = tuple(range(order + 1))
        vals = self._gbar_splines.eval_scatter(s, chart, x, derivs=derivs)
        b, b1, b2, b11, b12, b22 = self._unpack22(vals[0], 6)
        lam2, dl, ddl = _round_jets(x)
        eye = np.eye(2)[None]
        b = b + lam2[:, None, None] * eye
        b1 = b1 + dl[:, 0, None, None] * eye
        b2 = b2 + dl[:, 1, None, None] * eye
        b11 = b11 + ddl[:, 0, 0, None, None] * eye
        b12 = b12 + ddl[:, 0, 1, None, None] * eye
        b22 = b22 + ddl[:, 1, 1, None, None] * eye
        W = np.einsum("kij,kim,kjn->kmn", b, X, X)
        A = s[:, None, None] ** 2
        sig = A * W
        if order == 0:
            return (sig,)
        bs, bs1, bs2, *_ = self._unpack22(vals[1], 3)
        bm = np.stack([b1, b2], axis=1)                       # (K, m, 2, 2)
        db = np.einsum("kij,ke->kije", bs, n) + np.einsum("kmij,kme->kije", bm, X)
        dW = (np.einsum("kije,kim,kjn->kmne", db, X, X)
              + np.einsum("kij,kime,kjn->kmne", b, dX, X)
              + np.einsum("kij,kim,kjne->kmne", b, X, dX))
        dA = 2.0 * s[:, None] * n                             # (K, 3)
        dsig = np.einsum("ke,kmn->kmne", dA, W) + A[..., None] * dW
        if order == 1:
            return sig, dsig
        bss = self._unpack22(vals[2], 1)[0]
        bsm = np.stack([bs1, bs2], axis=1)                    # (K, m, 2, 2)
        bmp = np.empty((z.shape[0], 2, 2, 2, 2))              # (K, m, p, 2, 2)
        bmp[:, 0, 0] = b11
        bmp[:, 0, 1] = bmp[:, 1, 0] = b12
        bmp[:, 1, 1] = b22
        P = np.eye(3)[None] - n[:, :, None] * n[:, None, :]
        Ps = P / s[:, None, None]
        ddb = (np.einsum("kij,ke,kx->kijex", bss, n, n)
               + np.einsum("kmij,kmx,ke->kijex", bsm, X, n)
               + np.einsum("kij,kex->kijex", bs, Ps)
               + np.einsum("kmij,ke,kmx->kijex", bsm, n, X)
               + np.einsum("kmpij,kme,kpx->kijex", bmp, X, X)
               + np.einsum("kmij,kmex->kijex", bm, dX))
        ddW = (np.einsum("kijex,kim,kjn->kmnex", ddb, X, X)
               + np.einsum("kije,kimx,kjn->kmnex", db, dX, X)
               + np.einsum("kije,kim,kjnx->kmnex", db, X, dX)
               + np.einsum("kijx,kime,kjn->kmnex", db, dX, X)
               + np.einsum("kijx,kim,kjne->kmnex", db, X, dX)
               + np.einsum("kij,kimex,kjn->kmnex", b, d2X, X)
               + np.einsum("kij,kime,kjnx->kmnex", b, dX, dX)
               + np.einsum("kij,kimx,kjne->kmnex", b, dX, dX)
               + np.einsum("kij,kim,kjnex->kmnex", b, X, d2X))
        d2sig = (2.0 * np.eye(3)[None, None, None] * W[..., None, None]
                 + np.einsum("ke,kmnx->kmnex", dA, dW)
                 + np.einsum("kx,kmne->kmnex", dA, dW)
                 + A[..., None, None] * ddW)
        return sig, dsig, d2sig

    def chi_eval(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, float)
        s, n, chart = _units_chart(z)
        self.check_domain(s)
        x, X, _, _ = _x_jets(z, chart, order=0)
        vals = self._chi_splines.eval_scatter(s, chart, x, derivs=(0,))[0]
        m = self._unpack22(vals, 1)[0]
        lam2, _, _ = _round_jets(x)
        m = m + (s * lam2)[:, None, None] * np.eye(2)[None]
        return np.einsum("kij,kim,kjn->kmn", m, X, X)

    def leaf_scatter(self, svals: np.ndarray, chart: int, pts: np.ndarray) -> dict:
        ch = np.full(svals.shape, chart, dtype=int)
        vals = self._gbar_splines.eval_scatter(svals, ch, pts, derivs=(0,))[0]
        dev = self._unpack22(vals, 6)
        cvals = self._chi_splines.eval_scatter(svals, ch, pts, derivs=(0,))[0]
        cdev = self._unpack22(cvals, 1)[0]
        lam2, dl, _ = _round_jets(pts)
        eye = np.eye(2)[None]
        s2 = (svals ** 2)[:, None, None]
        g = s2 * (lam2[:, None, None] * eye + dev[0])
        dg = np.stack([s2 * (dl[:, 0, None, None] * eye + dev[1]),
                       s2 * (dl[:, 1, None, None] * eye + dev[2])], axis=1)
        chi = (svals * lam2)[:, None, None] * eye + cdev
        return {"gamma": g, "dgamma": dg, "chi": chi}

    def to_config(self) -> dict:
        return dict(self._config, variant="synthetic")


# ---- constructors --------------------------------------------------------------

def minkowski_cone(atlas: ChartAtlas, s0: float = 1.0, s_min: float = 1e-3,
                   s_max: float = np.inf) -> MinkowskiCone:
    return MinkowskiCone(atlas, s0, s_min, s_max)


def traceless_round_profile(atlas: ChartAtlas, terms) -> SymTensorField:
    """Round-traceless symmetric profile: sum of traceless Hessians of
    harmonics (the classic transverse-traceless seeds, nonzero for l >= 2).
    """
    from .calculus import exterior_d, sym_grad
    from .profiles import harmonic_scalar
    ring = round_metric(atlas)
    total = np.zeros((2, 3, atlas.n, atlas.n))
    for t in terms:
        f = harmonic_scalar(atlas, int(t["l"]), int(t["m"]), 1.0)
        hess2 = sym_grad(exterior_d(f), ring)   # 2 * covariant Hessian of f
        part = SymTensorField(atlas, 0.5 * hess2.data)
        tr = ring.trace(part).data
        hat = part.data - 0.5 * tr[:, None] * ring.comp.data
        sup = np.sqrt(np.max(ring.inner_sym(SymTensorField(atlas, hat),
                                            SymTensorField(atlas, hat)).data))
        total = total + (float(t["amp"]) / max(sup, 1e-300)) * hat
    prof = SymTensorField(atlas, total)
    tr = ring.trace(prof).data
    return SymTensorField(atlas, prof.data - 0.5 * tr[:, None] * ring.comp.data)


def synthetic_cone(atlas: ChartAtlas, s0: float = 1.0, s_max: float = 64.0,
                   delta: float = 0.5, start_conformal=None, start_shear=None,
                   alpha_hat_terms=None, alpha_trace_const: float = 0.0,
                   alpha_trace_terms=None, knots_per_decade: int = 60,
                   nsub: int = 4, config: dict | None = None) -> SyntheticCone:
    """Build a synthetic cone from profile descriptions.

    start_conformal: harmonic term list for u in gamma_{s0} = s0^2 e^{2u} ring;
    start_shear: term list for the start shear (traceless, scaled by s0);
    alpha_hat_terms / alpha_trace_*: the curvature source profiles.
    """
    u = harmonic_sum(atlas, start_conformal or [])
    g0 = MetricField(SymTensorField(
        atlas, (s0 ** 2 * np.exp(2.0 * u.data))[:, None]
        * np.stack([atlas.round_lambda ** 2, np.zeros_like(atlas.round_lambda),
                    atlas.round_lambda ** 2], axis=1)))
    chi0_data = g0.comp.data / s0
    if start_shear:
        shear = traceless_round_profile(atlas, start_shear)
        chi0_data = chi0_data + s0 * shear.data
    chi0 = SymTensorField(atlas, chi0_data)
    ahat = traceless_round_profile(atlas, alpha_hat_terms or [])
    ctr = harmonic_sum(atlas, alpha_trace_terms or [])
    ctr = ScalarField(atlas, np.maximum(ctr.data + alpha_trace_const, 0.0))
    return SyntheticCone(atlas, s0, s_max, delta, g0, chi0, ahat, ctr,
                         knots_per_decade=knots_per_decade, nsub=nsub, config=config)


def load_model(path_or_config, atlas: ChartAtlas | None = None) -> NullConeModel:
    """Build a model from a JSON file path or an equivalent dict."""
    if isinstance(path_or_config, (str,)):
        with open(path_or_config) as f:
            cfg = json.load(f)
    else:
        cfg = dict(path_or_config)
    try:
        variant = cfg["variant"]
    except KeyError:
        raise ConfigError("model config: missing field 'variant'")
    if atlas is None:
        atlas = build_atlas(int(cfg.get("atlas_n", 32)))
    if variant == "minkowski":
        ann = cfg.get("annulus", [1e-3, None])
        smax = np.inf if ann[1] is None else float(ann[1])
        return MinkowskiCone(atlas, float(cfg.get("s0", 1.0)), float(ann[0]), smax)
    if variant == "synthetic":
        for key in ("s0", "s_max", "delta"):
            if key not in cfg:
                raise ConfigError(f"model config: missing field '{key}'")
        return synthetic_cone(
            atlas, s0=float(cfg["s0"]), s_max=float(cfg["s_max"]),
            delta=float(cfg["delta"]),
            start_conformal=cfg.get("start_conformal"),
            start_shear=cfg.get("start_shear"),
            alpha_hat_terms=cfg.get("alpha_hat_terms"),
            alpha_trace_const=float(cfg.get("alpha_trace_const", 0.0)),
            alpha_trace_terms=cfg.get("alpha_trace_terms"),
            knots_per_decade=int(cfg.get("knots_per_decade", 60)),
            nsub=int(cfg.get("nsub", 4)), config=cfg)
    raise ConfigError(f"model config: unknown variant '{variant}'")


def save_model(model: NullConeModel, path: str):
    with open(path, "w") as f:
        json.dump(model.to_config(), f, indent=1, sort_keys=True)


# ---- reports --------------------------------------------------------------------

def convexity_check(model: NullConeModel, s_samples) -> dict:
    """Pointwise margins for cone/convexity/energy conditions (report only)."""
    rows = []
    for s in s_samples:
        leaf = model.leaf(float(s))
        ginv, _ = _inv2(leaf.gamma.comp.data)
        tr = leaf.tr_chi.data
        sh2 = _shear_sq(leaf.gamma.comp.data, leaf.chi.data, ginv)
        margin = 0.5 * tr ** 2 - sh2
        G = leaf.energy_density.data
        rows.append({"s": float(s),
                     "min_tr_chi": float(tr.min()),
                     "min_convexity_margin": float(margin.min()),
                     "min_energy_density": float(G.min())})
        if margin.min() <= 0:
            rows[-1]["violation_at"] = [int(v) for v in
                                        np.unravel_index(int(np.argmin(margin)), margin.shape)]
    ok_cone = all(r["min_tr_chi"] > 0 for r in rows)
    ok_convex = all(r["min_convexity_margin"] > 0 for r in rows)
    ok_nec = all(r["min_energy_density"] >= -1e-12 for r in rows)
    return {"leaves": rows, "null_cone": ok_cone, "convex": ok_convex,
            "null_energy_condition": ok_nec}


def asymptotics(model: NullConeModel, s_samples) -> dict:
    """Asymptotic sequences along the foliation and extrapolated limits.

    Reports a_s = (s-s0)^2 tr chi - 2(s-s0), the rescaled metric drift,
    shear decay, the extrapolated expansion offset, and monitors for the
    expansion bound and the diameter/areal-radius ratio.
    """
    s_samples = np.asarray(sorted(float(s) for s in s_samples))
    s0 = model.s0
    a_sup, a_mean, shear4, gbar_drift, diam_ratio = [], [], [], [], []
    trchi_bound_ok = True
    gbar_prev = None
    for s in s_samples:
        leaf = model.leaf(s)
        ginv, det = _inv2(leaf.gamma.comp.data)
        tr = leaf.tr_chi.data
        a_field = (s - s0) ** 2 * tr - 2.0 * (s - s0)
        a_sup.append(float(np.max(np.abs(a_field))))
        a_mean.append(float(np.mean(a_field)))
        sh2 = _shear_sq(leaf.gamma.comp.data, leaf.chi.data, ginv)
        shear4.append(float(np.max(sh2)))
        if s > s0 and (tr >= 2.0 / (s - s0) + 1e-9).any():
            trchi_bound_ok = False
        gbar = leaf.gamma.comp.data / s ** 2
        if gbar_prev is not None:
            gbar_drift.append(float(np.max(np.abs(gbar - gbar_prev))))
        gbar_prev = gbar
        r_areal = np.sqrt(area(leaf.gamma) / (4.0 * np.pi))
        lam2 = model.atlas.round_lambda ** 2
        eigmax = np.sqrt(np.max((leaf.gamma.comp.data[:, 0] + leaf.gamma.comp.data[:, 2])
                                / lam2 / 2.0
                                + np.abs(leaf.gamma.comp.data[:, 1]) / lam2))
        diam_ratio.append(float(np.pi * eigmax / r_areal))
    mask = s_samples > s0 * 1.0 + 1e-12
    tail = s_samples[len(s_samples) // 2:]
    sh_tail = np.asarray(shear4)[len(s_samples) // 2:]
    slope = loglog_slope(tail, np.maximum(sh_tail, 1e-300)) if len(tail) >= 3 else None
    theta = aitken_limit(np.asarray(a_mean)) if len(a_mean) >= 3 else None
    out = {
        "s": [float(v) for v in s_samples],
        "a_sup": a_sup,
        "a_mean": a_mean,
        "theta_limit": theta,
        "shear_sq_sup": shear4,
        "shear_decay_slope": slope,
        "gbar_drift": gbar_drift,
        "expansion_bound_ok": bool(trchi_bound_ok),
        "diam_over_areal_radius": diam_ratio,
    }
    # decay sanity: a_s bounded and shear vanishing
    if len(shear4) >= 3 and shear4[-1] > max(shear4[0], 1e-14) * 10:
        out["decay_violation"] = True
    return out


def cross_section_curvature(model: NullConeModel, omega: ScalarField) -> ScalarField:
    """Gauss curvature of the graph section {s = omega(y)} from cone data.

    Assembled as  K = -div(tr_chi grad w - chi(grad w))
                      - (d_s tr_chi_s - div_s chi_s)(grad w) + K_leaf(w),
    with all leaf quantities evaluated at s = omega(y) and fixed-s
    derivatives obtained by removing the radial chain-rule part.
    """
    a = model.atlas
    w = omega.data
    model.check_domain(np.array([w.min(), w.max()]))
    jets = model.leaf_jets_at_grid(w)
    gam = MetricField(SymTensorField(a, jets["gamma"]))
    chi = jets["chi"]
    dw = np.stack([a.d1(w), a.d2(w)], axis=1)                  # (2, i, N, N)
    grad_w = np.einsum("cijnm,cjnm->cinm", gam._inv_mat, dw)   # indices up
    tr_chi = _pack_trace(gam.inv, chi)
    chi_mat = sym_to_mat(chi)
    # covector tr_chi dw_i - chi_ij grad_w^j
    flux = tr_chi[:, None] * dw - np.einsum("cijnm,cjnm->cinm", chi_mat, grad_w)
    from .fields import CovectorField
    from .calculus import divergence
    div_flux = divergence(harmonize(CovectorField(a, flux)), gam)
    # fixed-s leaf derivatives: total derivative minus radial part
    ds_chi = jets["ds_chi"]
    ds_gamma = jets["ds_gamma"]
    d_tr_total = np.stack([a.d1(tr_chi), a.d2(tr_chi)], axis=1)
    ds_tr = _ds_trace(gam, chi, ds_gamma, ds_chi)
    d_tr_fixed = d_tr_total - ds_tr[:, None] * dw
    # fixed-s divergence of chi on the leaf
    dchi_total = np.stack([a.d1(chi_mat), a.d2(chi_mat)], axis=1)   # (c,d,2,2,N,N)
    dchi_fixed = dchi_total - sym_to_mat(ds_chi)[:, None] * dw[:, :, None, None]
    dg_total = np.stack([a.d1(sym_to_mat(jets["gamma"])), a.d2(sym_to_mat(jets["gamma"]))],
                        axis=1)
    dg_fixed = dg_total - sym_to_mat(ds_gamma)[:, None] * dw[:, :, None, None]
    sym_part = (dg_fixed
                + dg_fixed.transpose(0, 2, 1, 3, 4, 5)
                - dg_fixed.transpose(0, 2, 3, 1, 4, 5))
    Gam_fixed = 0.5 * np.einsum("cklnm,cijlnm->ckijnm", gam._inv_mat, sym_part)
    covd = (dchi_fixed
            - np.einsum("cliknm,cljnm->cikjnm", Gam_fixed, chi_mat)
            - np.einsum("clijnm,cklnm->cikjnm", Gam_fixed, chi_mat))
    div_chi_fixed = np.einsum("ciknm,cikjnm->cjnm", gam._inv_mat, covd)
    middle = np.einsum("cinm,cinm->cnm", d_tr_fixed - div_chi_fixed, grad_w)
    val = -div_flux.data - middle + jets["K"]
    return harmonize(ScalarField(a, val))


def _ds_trace(gam: MetricField, chi: np.ndarray, ds_gamma: np.ndarray,
              ds_chi: np.ndarray) -> np.ndarray:
    """d/ds of tr_{gamma_s} chi_s at fixed y (radial derivative of the trace)."""
    gi = sym_to_mat(gam.inv)
    dsg = sym_to_mat(ds_gamma)
    chi_m = sym_to_mat(chi)
    dgi = -np.einsum("ciknm,cklnm,cljnm->cijnm", gi, dsg, gi)
    return (np.einsum("cijnm,cijnm->cnm", dgi, chi_m)
            + np.einsum("cijnm,cijnm->cnm", gi, sym_to_mat(ds_chi)))
