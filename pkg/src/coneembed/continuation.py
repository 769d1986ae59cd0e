"""Continuation of isometric embeddings along paths of metrics.

Two steppers: a fourth-order transport of the map driven by the linearized
velocity (with a projective re-isometrization sweep after every step), and
the re-anchored contraction stepper (a fresh perturbation solve per step),
kept as the reference construction.  The discrete operator is cached and
re-assembled only when the re-isometrization sweep can no longer reach the
per-step tolerance with the stale operator.

Flow utilities (forward/inverse flows of a covector path, the
characteristics formula, and the closed-form radial transport) live here as
well.
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import CubicSpline

from . import atlas as at
from .atlas import ChartAtlas
from .calculus import ck_norm, divergence, l2_inner
from .elliptic import assemble, phi_algebraic, solve_Lh_equation
from .embed import (ContractionConfig, EmbeddingState, _assemble_velocity,
                    _dgrid, embed_perturbation, leaf_state)
from .errors import ConeEmbedError, DomainError, ExtensionError
from .fields import (CovectorField, ScalarField, SymTensorField, VectorMapR3,
                     harmonize, interpolate)
from .metric import MetricField
from .pform import p_form, xi_project


class MetricPath:
    """A path t -> (gamma_t, dgamma_t/dt) of metrics on the sphere.

    Closed-form conformal families gamma_t = e^{2 t w} gamma_0 (w a scalar
    field) cover every shipped construction; sampled paths are splined.
    """

    def __init__(self, kind: str, base: MetricField, w: ScalarField | None = None,
                 t_range=(0.0, 1.0), samples=None):
        self.kind = kind
        self.base = base
        self.w = w
        self.t_range = (float(t_range[0]), float(t_range[1]))
        if kind == "conformal":
            if w is None:
                raise ConeEmbedError("conformal path needs the exponent field w")
            self._spline = None
        elif kind == "sampled":
            ts, mats = zip(*samples)
            self._ts = np.asarray(ts, float)
            data = np.asarray([m.comp.data for m in mats])
            self._spline = CubicSpline(self._ts, data, axis=0)
        else:
            raise ConeEmbedError(f"unknown path kind {kind}")

    def gamma(self, t: float) -> MetricField:
        if self.kind == "conformal":
            fac = np.exp(2.0 * t * self.w.data)[:, None]
            conf = (self.base.conformal + t * self.w.data
                    if self.base.conformal is not None else None)
            return MetricField(SymTensorField(self.base.atlas,
                                              fac * self.base.comp.data), conformal=conf)
        return MetricField(SymTensorField(self.base.atlas, self._spline(float(t))))

    def gamma_dot(self, t: float) -> SymTensorField:
        if self.kind == "conformal":
            fac = np.exp(2.0 * t * self.w.data)[:, None]
            return SymTensorField(self.base.atlas,
                                  2.0 * self.w.data[:, None] * fac * self.base.comp.data)
        return SymTensorField(self.base.atlas, self._spline(float(t), 1))


def conformal_path(base: MetricField, w: ScalarField, t_range=(0.0, 1.0)) -> MetricPath:
    return MetricPath("conformal", base, w=w, t_range=t_range)


def exponential_round_path(atlas: ChartAtlas, radius: float, t_range=(0.0, 1.0)):
    """gamma_t = e^{2t} radius^2 ringgamma (w identically 1)."""
    from .metric import round_metric
    base = round_metric(atlas, radius)
    w = ScalarField(atlas, np.ones((2, atlas.n, atlas.n)))
    return MetricPath("conformal", base, w=w, t_range=t_range)


# ---- the linearized velocity ---------------------------------------------------

class OperatorCache:
    """Holds the assembled problem for the current anchor; knows when stale."""

    def __init__(self):
        self.problem = None
        self.h_ref = None

    def hint(self):
        if self.problem is None:
            return None
        return (self.problem._kernel_right, self.problem._kernel_left)

    def get(self, h: SymTensorField, g: MetricField, force: bool = False):
        drift = None
        if self.problem is not None and not force:
            scale = float(np.max(np.abs(self.h_ref.data))) + 1e-300
            drift = float(np.max(np.abs(h.data - self.h_ref.data))) / scale
            if drift < 0.03:
                return self.problem
        self.problem = assemble(h, g, kernel_hint=self.hint())
        self.h_ref = h
        return self.problem


def linearized_velocity(state: EmbeddingState, gamma_t: MetricField,
                        gamma_dot: SymTensorField, cache: OperatorCache | None = None,
                        rhs_skip_rel: float = 1e-6):
    """(tau, phi) and the map velocity for the instantaneous metric motion.

    Solves the h-traceless part of the linearized isometry equation with
    tau orthogonal to the kernel, then reads the normal speed from the
    trace identity.  Pure normal motion (projected right side negligible)
    skips the elliptic solve.
    """
    g = state.gamma
    h = state.h
    q = xi_project(gamma_dot, h, g)
    scale = float(np.max(np.abs(gamma_dot.data))) + 1e-300
    info = {}
    if float(np.max(np.abs(q.data))) <= rhs_skip_rel * scale:
        tau = CovectorField(state.atlas, np.zeros((2, 2, state.atlas.n, state.atlas.n)))
        info["solve_skipped"] = True
    else:
        cache = cache if cache is not None else OperatorCache()
        prob = cache.get(h, g)
        tau, defect, sinfo = solve_Lh_equation(prob, q)
        info.update(sinfo)
    phi = phi_algebraic(gamma_dot, tau, h, g)
    vel = _assemble_velocity(tau, phi, state)
    return tau, phi, vel, info


# ---- steppers -------------------------------------------------------------------

def step_ode(state: EmbeddingState, path: MetricPath, t: float, dt: float,
             cache: OperatorCache, cfg: ContractionConfig | None = None,
             step_tol: float = 1e-6, sweep: bool = True):
    """Fourth-order transport over [t, t+dt] plus a re-isometrization sweep.

    Returns (state, report).  The velocity at each stage is recomputed from
    the stage state and stage metric; the elliptic operator is the cached
    one (re-assembled only when the sweep cannot reach step_tol).
    """
    cfg = cfg or ContractionConfig(max_iter=8)
    cfg_sweep = cfg.clone(tol=0.2 * step_tol, max_iter=max(cfg.max_iter, 8))
    model = state.model
    a = state.atlas

    def velocity(st, tt):
        _, _, vel, _ = linearized_velocity(st, path.gamma(tt), path.gamma_dot(tt),
                                           cache, rhs_skip_rel=cfg.rhs_skip_rel)
        return vel.data

    # stage states carry the declared stage metric: anchor noise from grid
    # differentiation of the map never enters the stage right sides
    r0 = state.rvec.data
    k1 = velocity(state, t)
    st2 = EmbeddingState(model, VectorMapR3(a, r0 + 0.5 * dt * k1),
                         gamma=path.gamma(t + 0.5 * dt))
    k2 = velocity(st2, t + 0.5 * dt)
    st3 = EmbeddingState(model, VectorMapR3(a, r0 + 0.5 * dt * k2),
                         gamma=path.gamma(t + 0.5 * dt))
    k3 = velocity(st3, t + 0.5 * dt)
    st4 = EmbeddingState(model, VectorMapR3(a, r0 + dt * k3),
                         gamma=path.gamma(t + dt))
    k4 = velocity(st4, t + dt)
    r1 = r0 + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    target = path.gamma(t + dt)
    pred = EmbeddingState(model, VectorMapR3(a, r1))   # measured anchor: honest sweep
    report = {"t": t + dt, "sweep_iterations": 0}
    if not sweep:
        return pred, report
    new_state, rep = embed_perturbation(target, pred, cfg, problem=cache.problem)
    if not rep["converged"] and not rep.get("solve_skipped", False):
        # stale operator: rebuild at the predicted state and sweep again
        cache.get(pred.h, pred.gamma, force=True)
        new_state, rep = embed_perturbation(target, pred, cfg_sweep, problem=cache.problem)
    # re-anchor the accepted state on the declared path metric
    new_state = EmbeddingState(model, new_state.rvec, gamma=target)
    report.update({"sweep_iterations": rep["iterations"],
                   "converged": rep["converged"],
                   "last_update": rep["update_norms"][-1] if rep["update_norms"] else 0.0,
                   "pullback_floor": rep["pullback_residual_sup"],
                   "solve_skipped": rep.get("solve_skipped", False)})
    return new_state, report


def step_contraction(state: EmbeddingState, path: MetricPath, t: float, dt: float,
                     cache: OperatorCache | None = None,
                     cfg: ContractionConfig | None = None):
    """The re-anchored construction: one perturbation solve to gamma_{t+dt}."""
    cfg = cfg or ContractionConfig()
    problem = cache.get(state.h, state.gamma) if cache is not None else None
    new_state, rep = embed_perturbation(path.gamma(t + dt), state, cfg, problem=problem)
    rep = dict(rep)
    rep["t"] = t + dt
    return new_state, rep


def continue_path(path: MetricPath, state0: EmbeddingState, t_end: float | None = None,
                  nsteps: int = 20, cfg: ContractionConfig | None = None,
                  step_tol: float = 1e-6, stepper: str = "ode",
                  margins: dict | None = None, collect=None):
    """March the embedding along the path with adaptive halving.

    Monitors (radius bounds against the annulus, radius gradient, convexity)
    are tracked each step; on violation or step-size underflow the partial
    path is returned inside an ExtensionError report.  ``collect`` is called
    on every accepted state.
    """
    t0, t1 = path.t_range
    t_end = t1 if t_end is None else float(t_end)
    cache = OperatorCache()
    margins = margins or {}
    # measured discretization floor of the anchor: the per-step sweeps must
    # not solve on right sides below this scale
    gamma0 = path.gamma(t0)
    floor0 = state0.pullback_residual(gamma0)
    scale0 = float(np.max(np.abs(gamma0.comp.data))) + 1e-300
    s_lo = margins.get("radius_min", state0.model.s_min)
    s_hi = margins.get("radius_max", state0.model.s_max)
    grad_cap = margins.get("radius_gradient_max", np.inf)
    state = state0
    t = t0
    dt = (t_end - t0) / max(1, nsteps)
    accepted = []
    reports = []
    if collect:
        collect(state, t)
    while t < t_end - 1e-12:
        dt_try = min(dt, t_end - t)
        ok = False
        for _ in range(12):
            try:
                scale_t = float(np.max(np.abs(path.gamma(t + dt_try).comp.data)))
                skip_abs = 2.5 * floor0 * scale_t / scale0
                step_cfg = (cfg or ContractionConfig()).clone(
                    rhs_skip_abs=max((cfg.rhs_skip_abs if cfg else 0.0), skip_abs))
                if stepper == "ode":
                    cand, rep = step_ode(state, path, t, dt_try, cache, step_cfg, step_tol)
                    if not rep.get("converged", True):
                        raise ConeEmbedError("re-isometrization sweep did not converge")
                    if rep.get("last_update", 0.0) > max(step_tol, 3.0 * skip_abs):
                        raise ConeEmbedError(
                            f"sweep update {rep['last_update']:.2e} above step tolerance")
                else:
                    cand, rep = step_contraction(state, path, t, dt_try, cache, step_cfg)
                    if not rep.get("converged", True):
                        raise ConeEmbedError("contraction step did not converge")
                    cand = EmbeddingState(state.model, cand.rvec,
                                          gamma=path.gamma(t + dt_try))
                radii = cand.radius.data
                dr = np.stack([cand.atlas.d1(radii), cand.atlas.d2(radii)], axis=1)
                sup_grad = float(np.max(np.abs(dr[:, :, cand.atlas.r[0] <= at.POU_OUT])))
                if radii.min() <= s_lo or radii.max() >= s_hi:
                    raise DomainError("radius monitor violated")
                if sup_grad > grad_cap:
                    raise ConeEmbedError("radius gradient monitor violated")
                ok = True
                break
            except ConeEmbedError as err:
                last_err = err
                dt_try *= 0.5
                if dt_try < 1e-8 * (t_end - t0):
                    break
        if not ok:
            report = {"completed": False, "t_reached": t,
                      "obstruction": str(last_err), "steps": reports}
            raise ExtensionError("path continuation obstructed", report=report)
        t += dt_try
        state = cand
        rep["dt"] = dt_try
        reports.append(rep)
        accepted.append((t, state))
        if collect:
            collect(state, t)

    report = {"completed": True, "t_reached": t, "steps": reports,
              "n_steps": len(reports)}
    return state, accepted, report


def uniqueness_probe(path: MetricPath, state0: EmbeddingState, partitions=(25, 50),
                     cfg: ContractionConfig | None = None, step_tol: float = 1e-6):
    """Run the continuation with two step counts and report the divergence.

    Returns the sup-over-time C^2-proxy distance between the two runs and
    the per-run endpoints; the distance must shrink with the step size.
    """
    runs = []
    for n in partitions:
        t0, t1 = path.t_range
        snapshots = {}

        def collect(st, t, snaps=snapshots):
            snaps[round(t, 12)] = st

        state, acc, rep = continue_path(path, state0, nsteps=n, cfg=cfg,
                                        step_tol=step_tol, collect=collect)
        runs.append((snapshots, state))
    c0, c1 = runs[0][0], runs[1][0]
    common = sorted(set(c0) & set(c1))
    worst = 0.0
    for t in common:
        d = VectorMapR3(state0.atlas, c0[t].rvec.data - c1[t].rvec.data)
        worst = max(worst, ck_norm(d, 2))
    return {"divergence": worst, "common_times": len(common),
            "end_difference": float(np.max(np.abs(runs[0][1].rvec.data
                                                  - runs[1][1].rvec.data)))}


# ---- flows and characteristics ---------------------------------------------------

class FlowMap:
    """Forward/inverse flows of the path t -> -tau_t at uniform time nodes."""

    def __init__(self, times, forward, inverse, tau_of_t, g_of_t, steps_per_node):
        self.times = np.asarray(times, float)
        self.forward = forward      # list of VectorMapR3 (unit-vector maps)
        self.inverse = inverse
        self.tau_of_t = tau_of_t
        self.g_of_t = g_of_t
        self.steps_per_node = steps_per_node

    def check_inversion(self) -> float:
        """sup_p dist(psi(t, psi^{-1}(t,p)), p) over the stored nodes."""
        worst = 0.0
        a = self.forward[0].atlas
        base = np.moveaxis(a.units, -1, 1)
        for f, inv in zip(self.forward, self.inverse):
            vals = interpolate(f, np.moveaxis(inv.data, 1, -1).reshape(-1, 3),
                               points=a.interp_points)
            units = np.moveaxis(vals.reshape(3, 2, a.n, a.n), 0, 1)
            nrm = np.linalg.norm(units, axis=1)
            units = units / nrm[:, None]
            worst = max(worst, float(np.max(np.abs(units - base))))
        return worst


def _trace(tau_of_t, g_of_t, t0: float, t1: float, nsteps: int,
           start_units: np.ndarray, sign: float = -1.0, phi_of_t=None):
    """RK4 tracing of dx/dt = sign * tau^sharp(t, x), optionally accumulating
    the line integral of a scalar source along each trajectory.

    Returns (units, acc) with acc = int phi(t, x(t)) dt (zeros when no phi).
    """
    a = g_of_t(t0).atlas
    pts = start_units.reshape(-1, 3).copy()
    chart = at.preferred_chart(pts)
    x = np.where((chart == 0)[:, None], at.chart_coords(0, pts),
                 at.chart_coords(1, pts))
    acc = np.zeros(pts.shape[0])
    dt = (t1 - t0) / max(1, nsteps)

    def rhs(t, x, chart):
        g = g_of_t(t)
        tau = tau_of_t(t)
        sharp = np.einsum("cijnm,cjnm->cinm", g._inv_mat, tau.data)
        vx = np.empty_like(x)
        va = np.zeros(x.shape[0])
        ph = phi_of_t(t) if phi_of_t is not None else None
        for c in (0, 1):
            m = chart == c
            if not m.any():
                continue
            vals = a.interp_chart(sharp[c], x[m], points=a.interp_points)
            vx[m] = sign * vals.T
            if ph is not None:
                va[m] = a.interp_chart(ph.data[c], x[m], points=a.interp_points)
        return vx, va

    t = t0
    for _ in range(max(1, nsteps)):
        k1x, k1a = rhs(t, x, chart)
        k2x, k2a = rhs(t + dt / 2, x + dt / 2 * k1x, chart)
        k3x, k3a = rhs(t + dt / 2, x + dt / 2 * k2x, chart)
        k4x, k4a = rhs(t + dt, x + dt * k3x, chart)
        x = x + dt / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        acc = acc + dt / 6 * (k1a + 2 * k2a + 2 * k3a + k4a)
        t += dt
        far = np.linalg.norm(x, axis=1) > 1.25
        if far.any():
            x[far] = at.transition(x[far])
            chart[far] = 1 - chart[far]
    units = np.where((chart == 0)[:, None], at.unit_vector(0, x),
                     at.unit_vector(1, x))
    return units, acc


def flow_integrate(tau_of_t, g_of_t, t_range, nodes: int = 16,
                   steps_per_node: int = 4) -> FlowMap:
    """Flow psi of the path t -> -tau_t with its inverse, at uniform nodes.

    The inverse flow is built by reverse-time tracing of the reversed path.
    """
    t0, t1 = float(t_range[0]), float(t_range[1])
    a = g_of_t(t0).atlas
    times = np.linspace(t0, t1, nodes + 1)
    ident = np.moveaxis(a.units, -1, 1)
    fw = [VectorMapR3(a, ident.copy())]
    bw = [VectorMapR3(a, ident.copy())]
    for k in range(1, len(times)):
        tk = times[k]
        n = max(1, k * steps_per_node)
        uf, _ = _trace(tau_of_t, g_of_t, t0, tk, n, a.units, sign=-1.0)
        fw.append(VectorMapR3(a, np.moveaxis(uf.reshape(2, a.n, a.n, 3), -1, 1)))
        ub, _ = _trace(lambda u, tk=tk: tau_of_t(t0 + tk - u),
                       lambda u, tk=tk: g_of_t(t0 + tk - u),
                       t0, tk, n, a.units, sign=+1.0)
        bw.append(VectorMapR3(a, np.moveaxis(ub.reshape(2, a.n, a.n, 3), -1, 1)))
    return FlowMap(times, fw, bw, tau_of_t, g_of_t, steps_per_node)


def characteristics_solve(f0: ScalarField, phi_of_t, flow: FlowMap):
    """Transport-with-source solution at the flow's time nodes.

    g(t, p) = f0(psi^{-1}(t, p)) + int_0^t phi(u, psi(u, psi^{-1}(t, p))) du.
    """
    a = f0.atlas
    t0 = flow.times[0]
    out = [ScalarField(a, f0.data.copy())]
    for k in range(1, len(flow.times)):
        tk = flow.times[k]
        feet = np.moveaxis(flow.inverse[k].data, 1, -1)
        f_vals = interpolate(f0, feet.reshape(-1, 3), points=a.interp_points)
        n = max(1, k * flow.steps_per_node)
        _, acc = _trace(flow.tau_of_t, flow.g_of_t, t0, tk, n,
                        feet, sign=-1.0, phi_of_t=phi_of_t)
        vals = (f_vals + acc).reshape(2, a.n, a.n)
        out.append(harmonize(ScalarField(a, vals)))
    return out


def radial_transport(r0: VectorMapR3, tau_of_t, phi_of_t, g_of_t, t_range,
                     nodes: int = 16, steps_per_node: int = 4):
    """Closed-form transport of a star-shaped map under (tau, phi).

    r(t, p) = (1 + int phi / (|r0| o psi^{-1})) (r0 o psi^{-1}); raises on
    radius collapse.  Returns (times, [VectorMapR3 at the nodes]).
    """
    a = r0.atlas
    t0, t1 = float(t_range[0]), float(t_range[1])
    times = np.linspace(t0, t1, nodes + 1)
    out = [VectorMapR3(a, r0.data.copy())]
    for k in range(1, len(times)):
        tk = times[k]
        n = max(1, k * steps_per_node)
        ub, _ = _trace(lambda u, tk=tk: tau_of_t(t0 + tk - u),
                       lambda u, tk=tk: g_of_t(t0 + tk - u),
                       t0, tk, n, a.units, sign=+1.0)
        feet = ub                                  # psi^{-1}(tk, grid)
        r_feet = interpolate(r0, feet.reshape(-1, 3), points=a.interp_points)
        r_feet = np.moveaxis(r_feet.reshape(3, 2, a.n, a.n), 0, 1)
        _, acc = _trace(flow_args_tau := tau_of_t, g_of_t, t0, tk, n,
                        feet, sign=-1.0, phi_of_t=phi_of_t)
        acc = acc.reshape(2, 1, a.n, a.n)
        norm0 = np.linalg.norm(r_feet, axis=1, keepdims=True)
        radii = norm0 + acc
        if (radii <= 0).any():
            raise DomainError("transported radius collapsed to zero")
        out.append(VectorMapR3(a, (1.0 + acc / norm0) * r_feet))
    return times, out
