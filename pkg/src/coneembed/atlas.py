"""Two-chart stereographic atlas of the unit 2-sphere.

Each chart is a uniform Cartesian grid on the square [-L, L]^2 with L = 2
(chart radius 2R for equator radius R = 1).  Chart 0 ("north") projects
from the south pole, chart 1 ("south") from the north pole, with an axis
reflection so the transition map is the involution

    T(x) = (x1, -x2) / |x|^2

in both directions.  Every grid point is a genuine sphere point; the point
of the two charts is that each covers its own pole region with uniform
resolution.  A smooth partition of unity (weights equal to 1 inside radius
R_IN, 0 outside R_OUT) drives quadrature and blending.

Grid arrays are indexed [i, j] <-> (x1_i, x2_j); point sets are arrays of
shape (..., 2).
"""

from __future__ import annotations

import numpy as np

from ._fd import bump_profile, diff, interp2, smoothstep
from .errors import ResolutionError

CHART_L = 2.0          # half-width of the chart square
POU_IN = 0.87          # partition-of-unity weight == 1 inside this radius
POU_OUT = 1.0 / POU_IN  # ... == 0 outside this radius (symmetric under inversion)
BLEND_IN = 1.45        # chart-local data kept untouched inside this radius
BLEND_OUT = 1.80       # other-chart data used beyond this radius
QUAD_DEGREE_CAP = 28   # quadrature exactness degree (resolution-limited below)


def transition(x: np.ndarray) -> np.ndarray:
    """Chart transition map, its own inverse: (x1, -x2)/|x|^2."""
    x = np.asarray(x, float)
    r2 = np.sum(x * x, axis=-1, keepdims=True)
    out = x / r2
    out[..., 1] *= -1.0
    return out


def transition_jacobian(x: np.ndarray) -> np.ndarray:
    """d(transition)/dx, shape (..., 2, 2); det = 1/|x|^4 > 0."""
    x = np.asarray(x, float)
    x1, x2 = x[..., 0], x[..., 1]
    r4 = (x1 * x1 + x2 * x2) ** 2
    J = np.empty(x.shape[:-1] + (2, 2))
    J[..., 0, 0] = (x2 * x2 - x1 * x1) / r4
    J[..., 0, 1] = -2.0 * x1 * x2 / r4
    J[..., 1, 0] = 2.0 * x1 * x2 / r4
    J[..., 1, 1] = (x2 * x2 - x1 * x1) / r4
    return J


def unit_vector(chart: int, x: np.ndarray) -> np.ndarray:
    """Sphere point (unit vector in R^3) of chart coordinates x, shape (..., 3)."""
    x = np.asarray(x, float)
    x1, x2 = x[..., 0], x[..., 1]
    D = 1.0 + x1 * x1 + x2 * x2
    n = np.empty(x.shape[:-1] + (3,))
    if chart == 0:
        n[..., 0] = 2.0 * x1 / D
        n[..., 1] = 2.0 * x2 / D
        n[..., 2] = (2.0 - D) / D
    else:
        n[..., 0] = 2.0 * x1 / D
        n[..., 1] = -2.0 * x2 / D
        n[..., 2] = (D - 2.0) / D
    return n


def chart_coords(chart: int, n: np.ndarray) -> np.ndarray:
    """Coordinates of unit vectors n in the requested chart, shape (..., 2)."""
    n = np.asarray(n, float)
    out = np.empty(n.shape[:-1] + (2,))
    if chart == 0:
        q = 1.0 + n[..., 2]
        out[..., 0] = n[..., 0] / q
        out[..., 1] = n[..., 1] / q
    else:
        q = 1.0 - n[..., 2]
        out[..., 0] = n[..., 0] / q
        out[..., 1] = -n[..., 1] / q
    return out


def preferred_chart(n: np.ndarray) -> np.ndarray:
    """0 where n_3 >= 0 (north chart, |x| <= 1), else 1."""
    return np.where(np.asarray(n)[..., 2] >= 0.0, 0, 1)


def tangent_frame(chart: int, x: np.ndarray) -> np.ndarray:
    """Coordinate frame e_i = d(unit_vector)/dx^i, shape (..., 2, 3)."""
    x = np.asarray(x, float)
    x1, x2 = x[..., 0], x[..., 1]
    D = 1.0 + x1 * x1 + x2 * x2
    D2 = D * D
    e = np.empty(x.shape[:-1] + (2, 3))
    e[..., 0, 0] = (2.0 * D - 4.0 * x1 * x1) / D2
    e[..., 0, 1] = -4.0 * x1 * x2 / D2
    e[..., 0, 2] = -4.0 * x1 / D2
    e[..., 1, 0] = -4.0 * x1 * x2 / D2
    e[..., 1, 1] = (2.0 * D - 4.0 * x2 * x2) / D2
    e[..., 1, 2] = -4.0 * x2 / D2
    if chart == 1:
        e[..., 1] *= -1.0
        e[..., 2] *= -1.0
    return e


def round_conformal(x: np.ndarray) -> np.ndarray:
    """Conformal factor lambda = 2/(1+|x|^2) of the round metric (both charts)."""
    x = np.asarray(x, float)
    return 2.0 / (1.0 + np.sum(x * x, axis=-1))


class ChartAtlas:
    """Grids, transition tables, and partition-of-unity data for both charts.

    Attributes
    ----------
    n : points per axis per chart
    h : grid spacing
    x : (2, N, N, 2) chart coordinates of the grid points
    r : (2, N, N) chart radius |x|
    units : (2, N, N, 3) sphere points of the grid
    weights : (2, N, N) partition-of-unity weights (sum to 1 across charts)
    quad : (2, N, N) quadrature weights against the round area form; the
        partition-of-unity trapezoid weights carry a least-norm correction
        that makes them exactly integrate spherical harmonics to degree
        QUAD_DEGREE
    trans_x : (2, N, N, 2) transition image T(x) of each grid point
    trans_jac : (2, N, N, 2, 2) Jacobian of T at each grid point
    beta : (2, N, N) blending factor for cross-chart harmonization
    fd_order : interior stencil order used by the public calculus operators
    """

    def __init__(self, n: int):
        if n < 16 or n % 2:
            raise ResolutionError(f"grid size {n} unsupported: need even n >= 16")
        self.n = n
        self.L = CHART_L
        self.h = 2.0 * CHART_L / (n - 1)
        ax = np.linspace(-CHART_L, CHART_L, n)
        X1, X2 = np.meshgrid(ax, ax, indexing="ij")
        x = np.stack([X1, X2], axis=-1)
        self.x = np.stack([x, x], axis=0)
        self.r = np.sqrt(X1 * X1 + X2 * X2)[None].repeat(2, axis=0)
        self.units = np.stack([unit_vector(0, x), unit_vector(1, x)], axis=0)
        # grid center sits at r=0 exactly (n even -> no grid point at origin);
        # transition needs r > 0, which holds for every grid point here.
        rmin = self.r.min()
        assert rmin > 1e-9, "transition map needs r > 0 on grid points"
        b_here = bump_profile(self.r[0], POU_IN, POU_OUT)
        b_there = bump_profile(1.0 / self.r[0], POU_IN, POU_OUT)
        w = b_here / (b_here + b_there)
        self.weights = np.stack([w, w], axis=0)
        tx = transition(x)
        self.trans_x = np.stack([tx, tx], axis=0)
        tj = transition_jacobian(x)
        self.trans_jac = np.stack([tj, tj], axis=0)
        beta = 1.0 - smoothstep((self.r[0] - BLEND_IN) / (BLEND_OUT - BLEND_IN))
        self.beta = np.stack([beta, beta], axis=0)
        self.frames = np.stack([tangent_frame(0, x), tangent_frame(1, x)], axis=0)
        self.round_lambda = round_conformal(x)[None].repeat(2, axis=0)
        # interior stencil order for public calculus; limited by how close to
        # the square boundary centered stencils must remain valid
        self.fd_order = 8 if self.h <= 0.135 else (6 if self.h <= 0.21 else 4)
        self.interp_points = 8 if self.fd_order == 8 else 6
        self.quad_degree = min(QUAD_DEGREE_CAP, int(2.0 / self.h))
        self.quad = self._corrected_quadrature()

    def _corrected_quadrature(self) -> np.ndarray:
        """Trapezoid PoU weights + least-norm spectral correction.

        The correction is supported where the PoU weight is positive and
        enforces exact integration (against the round area form) of all real
        spherical harmonics with degree <= QUAD_DEGREE.
        """
        from scipy.special import sph_harm_y
        base = self.weights * self.h ** 2
        lam2 = self.round_lambda ** 2
        sel = self.weights > 1e-14
        units = self.units[sel]                       # (K, 3)
        theta = np.arccos(np.clip(units[:, 2], -1, 1))
        phi = np.arctan2(units[:, 1], units[:, 0])
        rows = [np.ones(units.shape[0])]
        for l in range(1, self.quad_degree + 1):
            for m in range(0, l + 1):
                Y = sph_harm_y(l, m, theta, phi)
                rows.append(np.sqrt(2.0) * Y.real if m else Y.real)
                if m:
                    rows.append(np.sqrt(2.0) * Y.imag)
        M = np.asarray(rows)                          # (K_modes, K_nodes)
        q0 = (base * lam2)[sel]                       # weights vs round area form
        target = np.zeros(M.shape[0])
        target[0] = 4.0 * np.pi
        resid = target - M @ q0
        D = q0                                         # weighted min-norm correction
        G = (M * D) @ M.T
        lam = np.linalg.solve(G + 1e-13 * np.trace(G) / G.shape[0] * np.eye(G.shape[0]), resid)
        q = q0 + D * (M.T @ lam)
        out = np.zeros_like(base)
        out[sel] = q / lam2[sel]                       # store vs coordinate measure
        return out

    # ---- grid operations -------------------------------------------------

    def d1(self, f: np.ndarray, order: int | None = None) -> np.ndarray:
        """d/dx1 along axis -2 of per-chart grid data."""
        return diff(f, self.h, axis=-2, order=order or self.fd_order)

    def d2(self, f: np.ndarray, order: int | None = None) -> np.ndarray:
        """d/dx2 along axis -1 of per-chart grid data."""
        return diff(f, self.h, axis=-1, order=order or self.fd_order)

    def grad(self, f: np.ndarray, order: int | None = None) -> np.ndarray:
        """Stack (d1 f, d2 f) on a new axis -3."""
        return np.stack([self.d1(f, order), self.d2(f, order)], axis=-3)

    def interp_chart(self, fc: np.ndarray, pts: np.ndarray, points: int = 6) -> np.ndarray:
        """Interpolate one chart's grid data (..., N, N) at pts (..., 2)."""
        shp = pts.shape[:-1]
        vals = interp2(fc, self.L, self.n, pts[..., 0].ravel(), pts[..., 1].ravel(),
                       points=points)
        return vals.reshape(fc.shape[:-2] + shp)

    def __eq__(self, other):
        return isinstance(other, ChartAtlas) and other.n == self.n

    def __hash__(self):
        return hash(("ChartAtlas", self.n))


_ATLAS_CACHE: dict[int, ChartAtlas] = {}


def build_atlas(n: int) -> ChartAtlas:
    """Build (or fetch from cache) the two-chart atlas with n points per axis."""
    at = _ATLAS_CACHE.get(n)
    if at is None:
        at = ChartAtlas(n)
        _ATLAS_CACHE[n] = at
    return at
