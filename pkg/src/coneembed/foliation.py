"""The closedness pipeline: conformal uniformization, alignment with the
round sphere by geodesic shooting, embedding of rescaled targets via the
scaling path, and the exponential foliation with its asymptotically
geodesic fit.

All continuation here runs in the round-sphere parametrization: the anchor
leaf is reparametrized through the inverse alignment map, so only forward
geodesic shooting is ever needed (no map inversion of alignment maps).
"""

from __future__ import annotations

import numpy as np

from . import atlas as at
from ._fd import LagrangeInterp, aitken_limit, loglog_slope, smoothstep
from .atlas import ChartAtlas
from .calculus import area, ck_norm, gauss_curvature, integrate, laplacian
from .cone import NullConeModel
from .continuation import MetricPath, conformal_path, continue_path
from .elliptic import OperatorCoeffs, PhiProblem
from .embed import ContractionConfig, EmbeddingState, embed_perturbation
from .errors import AssumptionError, ConeEmbedError, ExtensionError, NumericalError
from .fields import (ScalarField, SymTensorField, VectorMapR3, compose_with_map,
                     harmonize, interpolate)
from .metric import MetricField, conformal_round, round_metric
import scipy.linalg


class UniformizationResult:
    """Conformal potential to curvature one, with diagnostics.

    v satisfies K(e^{-2v} gamma) = 1; u_mean is the round-sphere mean of the
    transported potential (computable without the alignment map).
    """

    def __init__(self, v: ScalarField, u_mean: float, k_residual: float,
                 newton_iters: int, areal_radius: float):
        self.v = v
        self.u_mean = u_mean
        self.k_residual = k_residual
        self.newton_iters = newton_iters
        self.areal_radius = areal_radius

    @property
    def jensen_gap(self) -> float:
        """1 - e^{2 u_mean} / r_areal^2 >= 0 up to round-off."""
        return 1.0 - np.exp(2.0 * self.u_mean) / self.areal_radius ** 2


_ROUND_PHI_CACHE: dict[int, PhiProblem] = {}


def _round_phi_problem(a: ChartAtlas) -> PhiProblem:
    pp = _ROUND_PHI_CACHE.get(a.n)
    if pp is None:
        ring = round_metric(a)
        pp = PhiProblem(OperatorCoeffs(ring.comp, ring))
        _ROUND_PHI_CACHE[a.n] = pp
    return pp


def uniformize(g: MetricField, tol: float = 1e-8, max_iter: int = 40) -> UniformizationResult:
    """Solve the curvature-one conformal equation by damped Newton.

    The Newton matrix is the assembled scalar operator; convergence is
    measured on the full-order residual (defect correction), so the
    converged solution satisfies the same discretization the curvature
    checks use.  Metrics carrying a conformal potential are solved in the
    round-background variable with a cached operator.
    """
    a = g.atlas
    if g.conformal is not None:
        return _uniformize_structured(g, tol=tol, max_iter=max_iter)
    co = OperatorCoeffs(g.comp, g)           # h = gamma: div div (phi g) = lap phi
    pp = PhiProblem(co)
    K = gauss_curvature(g)

    def residual(vf: ScalarField, Kdata) -> ScalarField:
        # defect-correction target: the full-order public Laplacian, so the
        # converged solution satisfies the same discretization the curvature
        # checks use
        return ScalarField(a, laplacian(vf, g).data - np.exp(-2.0 * vf.data) + Kdata)

    def solve_for(Kdata, v0):
        v = v0.copy()
        lap_mat = pp.A
        pde_diag = np.zeros(pp.ndof)
        for c in (0, 1):
            pde_diag[pp._dof_grid[c][pp.pde[c]]] = 1.0
        last = np.inf
        for it in range(max_iter):
            vf = pp.vec_to_field(v)
            b = pp.rhs_to_vec(residual(vf, Kdata))
            rn = float(np.max(np.abs(b)))
            if rn <= tol:
                return v, rn, it
            M = lap_mat + np.diag(pde_diag * 2.0 * np.exp(-2.0 * v))
            try:
                delta = scipy.linalg.solve(M, -b)
            except scipy.linalg.LinAlgError:
                delta = np.linalg.lstsq(M, -b, rcond=1e-10)[0]
            step = 1.0
            for _ in range(12):
                v_try = v + step * delta
                rt = float(np.max(np.abs(pp.rhs_to_vec(
                    residual(pp.vec_to_field(v_try), Kdata)))))
                if rt < rn * (1.0 - 1e-4 * step) or rt < tol:
                    break
                step *= 0.5
            else:
                return v, rn, -1           # stalled
            v = v + step * delta
            last = rn
        return v, last, max_iter

    v0 = np.zeros(pp.ndof)
    # reasonable seed: 0.5 log(area scale) from Gauss-Bonnet normalization
    seed = 0.5 * np.log(max(area(g) / (4.0 * np.pi), 1e-12))
    v0 += seed
    v, rn, it = solve_for(K.data, v0)
    if rn > tol:
        # homotopy from the round curvature datum
        v = v0.copy()
        for theta in (0.25, 0.5, 0.75, 1.0):
            Kd = (1.0 - theta) * np.exp(-2.0 * seed) + theta * K.data
            v, rn, it = solve_for(Kd, v)
            if rn > tol and theta == 1.0:
                raise NumericalError("uniformization Newton failed",
                                     diagnostics={"residual": rn})
    vf = pp.vec_to_field(v)
    # verify the geometric statement directly
    conf = g.conformal - vf.data if g.conformal is not None else None
    gh = MetricField(SymTensorField(a, np.exp(-2.0 * vf.data)[:, None] * g.comp.data),
                     conformal=conf)
    Kres = float(np.max(np.abs(gauss_curvature(gh).data[:, a.r[0] <= at.POU_OUT] - 1.0)))
    # round mean of the transported potential: integral against e^{-2v} dA
    u_mean = integrate(ScalarField(a, vf.data * np.exp(-2.0 * vf.data)), g) / (4.0 * np.pi)
    r_areal = float(np.sqrt(area(g) / (4.0 * np.pi)))
    return UniformizationResult(harmonize(vf), u_mean, Kres, it, r_areal)


def _uniformize_structured(g: MetricField, tol: float, max_iter: int) -> UniformizationResult:
    """Round-background solve for metrics e^{2u} ring: find w with
    lap_ring w + e^{2w} = 1, then v = u - w."""
    a = g.atlas
    pp = _round_phi_problem(a)
    ring = round_metric(a)
    u = g.conformal
    pde_diag = np.zeros(pp.ndof)
    for c in (0, 1):
        pde_diag[pp._dof_grid[c][pp.pde[c]]] = 1.0

    def residual(wf: ScalarField) -> ScalarField:
        return ScalarField(a, laplacian(wf, ring).data + np.exp(2.0 * wf.data) - 1.0)

    w = np.zeros(pp.ndof)
    it_used = max_iter
    for it in range(max_iter):
        wf = pp.vec_to_field(w)
        b = pp.rhs_to_vec(residual(wf))
        rn = float(np.max(np.abs(b)))
        if rn <= tol:
            it_used = it
            break
        M = pp.A + np.diag(pde_diag * 2.0 * np.exp(2.0 * w))
        delta = scipy.linalg.solve(M, -b)
        step = 1.0
        for _ in range(12):
            rt = float(np.max(np.abs(pp.rhs_to_vec(
                residual(pp.vec_to_field(w + step * delta))))))
            if rt < rn * (1.0 - 1e-4 * step) or rt < tol:
                break
            step *= 0.5
        else:
            raise NumericalError("uniformization Newton stalled",
                                 diagnostics={"residual": rn})
        w = w + step * delta
    else:
        raise NumericalError("uniformization did not converge",
                             diagnostics={"residual": rn})
    wf = pp.vec_to_field(w)
    v = ScalarField(a, u - wf.data)
    gh = MetricField(SymTensorField(a, np.exp(-2.0 * v.data)[:, None] * g.comp.data),
                     conformal=wf.data)
    Kres = float(np.max(np.abs(gauss_curvature(gh).data[:, a.r[0] <= at.POU_OUT] - 1.0)))
    u_mean = integrate(ScalarField(a, v.data * np.exp(-2.0 * v.data)), g) / (4.0 * np.pi)
    r_areal = float(np.sqrt(area(g) / (4.0 * np.pi)))
    return UniformizationResult(harmonize(v), u_mean, Kres, it_used, r_areal)


# ---- alignment by geodesic shooting ---------------------------------------------

class AlignmentMap:
    """Isometry between a curvature-one metric and the round sphere,
    represented by forward-shot geodesic polar families.

    ``inverse_at(units)`` evaluates the map (round sphere -> surface) at
    round points; ``as_unit_map`` samples it on the atlas grid.
    """

    def __init__(self, families, blend=(2.0, 2.2)):
        self.families = families            # list of dicts
        self.blend = blend

    def inverse_at(self, units: np.ndarray) -> np.ndarray:
        units = np.asarray(units, float).reshape(-1, 3)
        out = np.empty_like(units)
        f1, f2 = self.families
        d0 = np.arccos(np.clip(units @ f1["pole"], -1.0, 1.0))
        w2 = smoothstep((d0 - self.blend[0]) / (self.blend[1] - self.blend[0]))
        for fam, sel in ((f1, w2 < 1.0), (f2, w2 > 0.0)):
            if not sel.any():
                continue
            vals = self._eval_family(fam, units[sel])
            key = "v1" if fam is f1 else "v2"
            if key == "v1":
                v1 = np.zeros_like(out)
                v1[sel] = vals
            else:
                v2 = np.zeros_like(out)
                v2[sel] = vals
        v1 = locals().get("v1", np.zeros_like(out))
        v2 = locals().get("v2", np.zeros_like(out))
        out = (1.0 - w2)[:, None] * v1 + w2[:, None] * v2
        nrm = np.linalg.norm(out, axis=1, keepdims=True)
        return out / np.maximum(nrm, 1e-300)

    @staticmethod
    def _eval_family(fam, units):
        pole, E1, E2 = fam["pole"], fam["E1"], fam["E2"]
        c = np.clip(units @ pole, -1.0, 1.0)
        r = np.arccos(c)
        x1 = units @ E1
        x2 = units @ E2
        theta = np.arctan2(x2, x1)
        rs, ths = fam["r_nodes"], fam["theta_nodes"]
        pos = fam["points"]                  # (nr, nth, 3)
        dr = rs[1] - rs[0]
        dth = ths[1] - ths[0]
        p = 4
        gi = np.clip(np.floor(r / dr).astype(int) - (p // 2 - 1), 0, len(rs) - p)
        tr = r / dr - gi - (p // 2 - 1)
        gj = np.floor((theta % (2 * np.pi)) / dth).astype(int) - (p // 2 - 1)
        tt = (theta % (2 * np.pi)) / dth - gj - (p // 2 - 1)
        interp = LagrangeInterp(p)
        wr = interp._axis_weights(tr)
        wt = interp._axis_weights(tt)
        idx_r = gi[:, None] + np.arange(p)[None, :]
        idx_t = (gj[:, None] + np.arange(p)[None, :]) % len(ths)
        patch = pos[idx_r[:, :, None], idx_t[:, None, :]]     # (K, p, p, 3)
        vals = np.einsum("kabv,ka,kb->kv", patch, wr, wt)
        nrm = np.linalg.norm(vals, axis=1, keepdims=True)
        return vals / np.maximum(nrm, 1e-300)

    def as_unit_map(self, atlas: ChartAtlas) -> VectorMapR3:
        vals = self.inverse_at(atlas.units.reshape(-1, 3))
        return VectorMapR3(atlas, np.moveaxis(vals.reshape(2, atlas.n, atlas.n, 3), -1, 1))

    def pullback_residual(self, rho: MetricField) -> float:
        """sup |(inverse map)^*(rho) - ring| over the active zone."""
        a = rho.atlas
        m = self.as_unit_map(a)
        pb = compose_with_map(rho.comp, m)
        ring = round_metric(a)
        mask = a.r[0] <= at.POU_OUT
        return float(np.max(np.abs(pb.data[:, :, mask] - ring.comp.data[:, :, mask])))


def _shoot_family(rho: MetricField, base_chart: int, base_x: np.ndarray,
                  frame, r_max: float, dr: float, ntheta: int):
    """Trace rho-geodesics from one base point; returns node positions.

    frame is a pair of rho-orthonormal tangent vectors at the base (chart
    components); rays start along cos(theta) e1 + sin(theta) e2.
    """
    a = rho.atlas
    Gam = rho.christoffels                      # (2, k, i, j, N, N)
    thetas = np.arange(ntheta) * (2.0 * np.pi / ntheta)
    e1, e2 = frame
    v0 = np.cos(thetas)[:, None] * e1[None] + np.sin(thetas)[:, None] * e2[None]
    x = np.repeat(base_x[None], ntheta, axis=0)
    chart = np.full(ntheta, base_chart, dtype=int)
    v = v0.copy()
    nr = int(np.floor(r_max / dr)) + 1
    out = np.empty((nr, ntheta, 3))
    out[0] = at.unit_vector(0, x) * 0.0
    for c in (0, 1):
        m = chart == c
        if m.any():
            out[0][m] = at.unit_vector(c, x[m])

    def accel(x, v, chart):
        acc = np.empty_like(v)
        for c in (0, 1):
            m = chart == c
            if not m.any():
                continue
            G = a.interp_chart(Gam[c].reshape(8, a.n, a.n), x[m],
                               points=a.interp_points).reshape(2, 2, 2, -1)
            acc[m] = -np.einsum("pkij,pi,pj->pk", G.transpose(3, 0, 1, 2), v[m], v[m])
        return acc

    for k in range(1, nr):
        for _ in range(1):
            k1x, k1v = v, accel(x, v, chart)
            k2x, k2v = v + dr / 2 * k1v, accel(x + dr / 2 * k1x, v + dr / 2 * k1v, chart)
            k3x, k3v = v + dr / 2 * k2v, accel(x + dr / 2 * k2x, v + dr / 2 * k2v, chart)
            k4x, k4v = v + dr * k3v, accel(x + dr * k3x, v + dr * k3v, chart)
            x = x + dr / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
            v = v + dr / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        far = np.linalg.norm(x, axis=1) > 1.25
        if far.any():
            J = at.transition_jacobian(x[far])
            v[far] = np.einsum("kai,ki->ka", J, v[far])
            x[far] = at.transition(x[far])
            chart[far] = 1 - chart[far]
        for c in (0, 1):
            m = chart == c
            if m.any():
                out[k][m] = at.unit_vector(c, x[m])
    r_nodes = np.arange(nr) * dr
    return r_nodes, thetas, out, (x, v, chart)


def killing_hopf_align(rho: MetricField, tol: float = 5e-3,
                       ntheta: int = 192, dr: float = 0.02) -> AlignmentMap:
    """Isometry to the round sphere for a curvature-one metric.

    Built from two forward geodesic-polar families (base point and a matched
    second base away from its cut locus); requires K(rho) close to 1.
    """
    a = rho.atlas
    Kres = float(np.max(np.abs(gauss_curvature(rho).data[:, a.r[0] <= at.POU_OUT] - 1.0)))
    if Kres > tol:
        raise AssumptionError(f"alignment needs curvature 1 (residual {Kres:.2e})")
    base_x = np.zeros(2)
    g0 = a.interp_chart(rho.comp.data[0], base_x[None], points=a.interp_points)[:, 0]
    g11, g12, g22 = g0
    e1 = np.array([1.0, 0.0]) / np.sqrt(g11)
    e2_raw = np.array([0.0, 1.0]) - g12 / g11 * np.array([1.0, 0.0])
    nrm = np.sqrt(g22 - g12 ** 2 / g11)
    e2 = e2_raw / nrm
    r1, th1, pts1, endstate = _shoot_family(rho, 0, base_x, (e1, e2), 2.4, dr, ntheta)
    fam1 = {"pole": np.array([0.0, 0.0, 1.0]),
            "E1": np.array([1.0, 0.0, 0.0]),
            "E2": np.array([0.0, 1.0, 0.0]),
            "r_nodes": r1, "theta_nodes": th1, "points": pts1}
    # second family anchored on the theta=0 ray at arclength 1.6
    k16 = int(round(1.6 / dr))
    # re-shoot to capture position/velocity at r=1.6 exactly
    _, _, _, (x_end, v_end, ch_end) = _shoot_family(rho, 0, base_x, (e1, e2), 1.6, dr, 1)
    x1, v1, c1 = x_end[0], v_end[0], int(ch_end[0])
    # rho-orthonormal frame at the second base: tangent T and +90 rotation N
    gloc = a.interp_chart(rho.comp.data[c1], x1[None], points=a.interp_points)[:, 0]
    G = np.array([[gloc[0], gloc[1]], [gloc[1], gloc[2]]])
    T = v1 / np.sqrt(v1 @ G @ v1)
    detg = np.linalg.det(G)
    N = np.array([-(G[1] @ T), G[0] @ T]) / np.sqrt(detg)
    # orientation: eps_rho(T, N) = sqrt(det) (T1 N2 - T2 N1) > 0
    if np.sqrt(detg) * (T[0] * N[1] - T[1] * N[0]) < 0:
        N = -N
    # matched round data: exp at distance 1.6 along E1 from the pole
    rr = 1.6
    pole = fam1["pole"]
    q1 = np.cos(rr) * pole + np.sin(rr) * fam1["E1"]
    T_round = -np.sin(rr) * pole + np.cos(rr) * fam1["E1"]
    N_round = np.cross(q1, T_round)
    r2, th2, pts2, _ = _shoot_family(rho, c1, x1, (T, N), 2.4, dr, ntheta)
    fam2 = {"pole": q1, "E1": T_round, "E2": N_round,
            "r_nodes": r2, "theta_nodes": th2, "points": pts2}
    return AlignmentMap([fam1, fam2])


class ConformalStructure:
    """Uniformization data of a metric: potential, mean, alignment, and the
    potential transported to round-sphere parametrization."""

    def __init__(self, g: MetricField, tol: float = 1e-8, align: bool = True,
                 align_tol: float = 5e-3):
        self.metric = g
        self.uni = uniformize(g, tol=tol)
        self.v = self.uni.v
        self.u_mean = self.uni.u_mean
        conf = g.conformal - self.v.data if g.conformal is not None else None
        rho = MetricField(SymTensorField(
            g.atlas, np.exp(-2.0 * self.v.data)[:, None] * g.comp.data), conformal=conf)
        self.rho = rho
        if align:
            self.align = killing_hopf_align(rho, tol=align_tol)
            m = self.align.as_unit_map(g.atlas)
            self.inverse_map = m
            vals = interpolate(self.v, np.moveaxis(m.data, 1, -1).reshape(-1, 3),
                               points=g.atlas.interp_points)
            self.u_round = harmonize(ScalarField(
                g.atlas, vals.reshape(2, g.atlas.n, g.atlas.n)))
        else:
            self.align = None
            self.inverse_map = None
            self.u_round = None


# ---- the scaling path -------------------------------------------------------------

def build_scaling_path(target_cs: ConformalStructure, leaf_cs: ConformalStructure,
                       s: float):
    """Path from the leaf metric to (a reparametrized copy of) e^{2 u_mean_s}
    times the target, in round-sphere parametrization.

    gamma(t) = e^{2(t (u_gamma + umean_s - u_s) + u_s)} ring; the anchor map
    is the leaf graph composed with the inverse alignment map of the leaf.
    """
    a = target_cs.metric.atlas
    u_s = leaf_cs.u_round
    u_g = target_cs.u_round
    base = conformal_round(a, u_s)
    w = ScalarField(a, u_g.data + leaf_cs.u_mean - u_s.data)
    path = conformal_path(base, w, (0.0, 1.0))
    anchor_units = leaf_cs.inverse_map
    r0 = VectorMapR3(a, float(s) * anchor_units.data)
    return path, r0


def embed_scaled_metric(target: MetricField, model: NullConeModel, s_schedule,
                        cfg: ContractionConfig | None = None, nsteps: int = 10,
                        step_tol: float = 1e-5, collect_trend: int = 0,
                        target_cs: ConformalStructure | None = None):
    """March the scaling path at increasing anchor radii until it completes.

    Returns (state, chosen_s, report); the report records, per attempted s,
    the scale monitor sup_t || |r| e^{-u(t)} - s e^{-u_s} ||_(C1 proxy) whose
    decay against e^{u_mean_s} is the scale-invariance check.
    """
    cfg = cfg or ContractionConfig(trust_radius=None, max_iter=12)
    target_cs = target_cs or ConformalStructure(target)
    attempts = []
    winner = None
    extra = 0
    for s in s_schedule:
        s = float(s)
        try:
            leaf = model.leaf(s)
            leaf_cs = ConformalStructure(leaf.gamma)
            path, r0 = build_scaling_path(target_cs, leaf_cs, s)
            # trust region scales with the radius
            cfg_s = cfg.clone(trust_radius=(cfg.trust_radius or 0.45) * s)
            anchor = EmbeddingState(model, r0, gamma=path.gamma(0.0))
            monitor = []

            def collect(st, t, leaf_cs=leaf_cs, s=s, monitor=monitor):
                u_st = (t * (target_cs.u_round.data + leaf_cs.u_mean
                             - leaf_cs.u_round.data) + leaf_cs.u_round.data)
                f = ScalarField(st.atlas, st.radius.data * np.exp(-u_st)
                                - s * np.exp(-leaf_cs.u_round.data))
                monitor.append(ck_norm(f, 1))

            state, acc, rep = continue_path(path, anchor, nsteps=nsteps, cfg=cfg_s,
                                            step_tol=step_tol, collect=collect)
            attempt = {"s": s, "completed": True,
                       "monitor_sup": float(np.max(monitor)),
                       "u_mean_leaf": leaf_cs.u_mean,
                       "steps": rep["n_steps"]}
            attempts.append(attempt)
            if winner is None:
                winner = (state, s, leaf_cs)
            if extra >= collect_trend and winner is not None:
                break
            extra += 1
        except (ConeEmbedError, ExtensionError) as err:
            attempts.append({"s": s, "completed": False, "obstruction": str(err)})
    if winner is None:
        raise ExtensionError("no anchor radius in the schedule completed the path",
                             report={"attempts": attempts})
    state, s, leaf_cs = winner
    report = {"attempts": attempts, "chosen_s": s,
              "target_u_mean": target_cs.u_mean}
    done = [r for r in attempts if r["completed"]]
    if len(done) >= 2:
        x = np.exp([r["u_mean_leaf"] for r in done])
        y = np.array([r["monitor_sup"] for r in done])
        report["monitor_slope_vs_escale"] = loglog_slope(x, np.maximum(y, 1e-300))
    return state, s, report


# ---- the exponential foliation -----------------------------------------------------

class FoliationResult:
    """Leaves of the exponential path with their graph data and fits."""

    def __init__(self, t_nodes, omegas, omega_inf, decay_history, phi_check,
                 nesting_margin):
        self.t_nodes = list(t_nodes)
        self.omegas = omegas                  # list of ScalarField
        self.omega_inf = omega_inf            # ScalarField
        self.decay_history = decay_history    # list of (t, norm)
        self.phi_check = phi_check
        self.nesting_margin = nesting_margin


def build_exponential_foliation(state_s: EmbeddingState, t_max: float = 6.0,
                                leaves: int = 13, nsteps_per_unit: int = 6,
                                cfg: ContractionConfig | None = None,
                                step_tol: float = 1e-5) -> FoliationResult:
    """Continue along t -> e^t (anchor metric) and extract the graph leaves.

    Verifies nesting, fits the rescaled-graph limit by extrapolation over
    the last three leaves, and checks d(omega)/dt against the normal speed
    by differencing across leaves.
    """
    a = state_s.atlas
    model = state_s.model
    base = state_s.gamma
    w = ScalarField(a, 0.5 * np.ones((2, a.n, a.n)))
    path = conformal_path(base, w, (0.0, float(t_max)))
    cfg = cfg or ContractionConfig(max_iter=12,
                                   trust_radius=2.0 * float(state_s.radius.data.max())
                                   * np.exp(t_max / 2))
    t_nodes = np.linspace(0.0, t_max, leaves)
    snaps = {0.0: state_s}

    def collect(st, t):
        for tn in t_nodes:
            if abs(t - tn) < 1e-9:
                snaps[float(tn)] = st

    nsteps = max(leaves - 1, int(round(nsteps_per_unit * t_max)))
    # choose step counts so the leaf times are hit exactly
    per = max(1, int(round(nsteps / (leaves - 1))))
    state = state_s
    reports = []
    for k in range(1, leaves):
        seg = MetricPath("conformal", base, w=w, t_range=(t_nodes[k - 1], t_nodes[k]))
        seg.gamma = lambda t, p=path: p.gamma(t)
        seg.gamma_dot = lambda t, p=path: p.gamma_dot(t)
        seg.t_range = (t_nodes[k - 1], t_nodes[k])
        state, acc, rep = continue_path(seg, state, nsteps=per, cfg=cfg,
                                        step_tol=step_tol)
        reports.append(rep)
        snaps[float(t_nodes[k])] = state
    omegas = []
    for tn in t_nodes:
        om, psi, psiinv = snaps[float(tn)].graph()
        omegas.append(om)
    # nesting
    margins = [float(np.min(b.data - s.data)) for s, b in zip(omegas, omegas[1:])]
    nesting = min(margins)
    # rescaled limit and decay fit
    resc = [ScalarField(a, om.data * np.exp(-tn / 2.0))
            for tn, om in zip(t_nodes, omegas)]
    last3 = np.stack([f.data for f in resc[-3:]])
    denom = last3[2] - 2 * last3[1] + last3[0]
    safe = np.abs(denom) > 1e-14
    extrap = last3[2].copy()
    extrap[safe] = last3[2][safe] - (last3[2] - last3[1])[safe] ** 2 / denom[safe]
    omega_inf = harmonize(ScalarField(a, extrap))
    decay = [(float(tn), ck_norm(f - omega_inf, 1)) for tn, f in zip(t_nodes, resc)]
    # d omega / dt vs normal speed by leaf differencing (second order check)
    dt_leaf = t_nodes[1] - t_nodes[0]
    mids = []
    for k in range(len(omegas) - 1):
        d_omega = (omegas[k + 1].data - omegas[k].data) / dt_leaf
        mid = 0.5 * (omegas[k + 1].data + omegas[k].data)
        # the exponential path gives d omega/dt -> omega/2 asymptotically;
        # compare against the midpoint growth rate as the consistency check
        mids.append(float(np.max(np.abs(d_omega - 0.5 * mid))
                          / max(np.max(np.abs(mid)), 1e-300)))
    phi_check = mids
    return FoliationResult(t_nodes, omegas, omega_inf, decay, phi_check, nesting)


def geodesic_fit(fol: FoliationResult, min_leaves: int = 4) -> dict:
    """Pointwise affine fit of the graphs in the exponential parameter.

    omega = f1 * tau + f2 with tau = e^{t/2}; the verdict is positive when
    the residual part f2 stays bounded along the tail.
    """
    if len(fol.omegas) < min_leaves:
        raise ConeEmbedError(f"geodesic fit needs >= {min_leaves} leaves")
    a = fol.omegas[0].atlas
    taus = np.exp(np.asarray(fol.t_nodes) / 2.0)
    Y = np.stack([om.data for om in fol.omegas])      # (L, 2, N, N)
    tbar = taus.mean()
    f1 = ((taus[:, None, None, None] - tbar) * (Y - Y.mean(axis=0))).sum(axis=0) \
        / np.sum((taus - tbar) ** 2)
    f2 = Y - taus[:, None, None, None] * f1[None]
    mask = a.r[0] <= at.POU_OUT
    f2_sup = [float(np.max(np.abs(f2[k][:, mask]))) for k in range(len(taus))]
    half = len(taus) // 2
    head = max(f2_sup[:half]) if half else f2_sup[0]
    tail = f2_sup[-1]
    verdict = tail <= 1.1 * max(head, 1e-12)
    return {"f1": ScalarField(a, f1), "f2_sup_history": f2_sup,
            "f2_tail": tail, "verdict_asymptotically_geodesic": bool(verdict),
            "tau_nodes": [float(v) for v in taus]}
