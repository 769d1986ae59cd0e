"""The nonlinear perturbation solver: given a star-shaped map r into the
annulus whose pullback is gamma, and a nearby target metric, find the
correction y with (r + y)^*(sigma) = target by fixed-point iteration.

Each sweep solves the linearized problem: project the quadratic remainder
onto the h-orthogonal bundle, solve for the tangential displacement
(orthogonal to the six-dimensional kernel), read the normal speed from the
trace identity, and recombine.  The anchor metric is always the measured
pullback, so the sweep also repairs any anchor isometry defect.
"""

from __future__ import annotations

import numpy as np

from . import atlas as at
from .atlas import ChartAtlas
from .calculus import ck_norm, divergence, l2_norm
from .cone import NullConeModel
from .elliptic import (EllipticProblem, OperatorCoeffs, PhiProblem, _div_sym_raw,
                       apply_Lh, assemble, phi_algebraic, phi_elliptic_solve,
                       solve_Lh_equation)
from .errors import (ConvexityError, DivergenceError, StarShapeError,
                     TrustRegionError)
from .fields import (CovectorField, ScalarField, SymTensorField, VectorMapR3,
                     harmonize, interpolate, r3map_from_units, sym_to_mat)
from .metric import MetricField
from .pform import p_form, xi_project


class ContractionConfig:
    """Knobs of the fixed-point solver.

    trust_radius: ball for the correction (None -> 0.1 min |r0|);
    gl_nodes: Gauss-Legendre nodes of the segment remainder integrals;
    rhs_skip_rel: solve skipped when the projected remainder is this small
    relative to the full remainder (pure normal motion).
    """

    def __init__(self, trust_radius: float | None = None, max_iter: int = 40,
                 tol: float = 1e-9, gl_nodes: int = 8, damping: float = 1.0,
                 patience: int = 4, use_phi_elliptic: bool = False,
                 rhs_skip_rel: float = 1e-6, rhs_skip_abs: float = 0.0):
        if gl_nodes < 4:
            raise ValueError("gl_nodes must be >= 4")
        self.trust_radius = trust_radius
        self.max_iter = int(max_iter)
        self.tol = float(tol)
        self.gl_nodes = int(gl_nodes)
        self.damping = float(damping)
        self.patience = int(patience)
        self.use_phi_elliptic = bool(use_phi_elliptic)
        self.rhs_skip_rel = float(rhs_skip_rel)
        self.rhs_skip_abs = float(rhs_skip_abs)

    def clone(self, **over):
        import copy
        out = copy.copy(self)
        for k, v in over.items():
            setattr(out, k, v)
        return out


def _dgrid(atlas: ChartAtlas, data: np.ndarray) -> np.ndarray:
    """Chart gradient stack (2, i, *comp, N, N) at the atlas public order."""
    return np.stack([atlas.d1(data), atlas.d2(data)], axis=1)


def pullback_metric(rvec: VectorMapR3, model: NullConeModel) -> SymTensorField:
    """(r)^*(sigma): induced metric of the map; positive iff star-shaped."""
    a = rvec.atlas
    z = np.moveaxis(rvec.data, 1, -1).reshape(-1, 3)
    (sig,) = model.sigma_eval(z, order=0)
    sig = sig.reshape(2, a.n, a.n, 3, 3)
    dr = _dgrid(a, rvec.data)                   # (2, i, mu, N, N)
    g = np.einsum("cnmuv,ciunm,cjvnm->cijnm", sig, dr, dr)
    comps = np.stack([g[:, 0, 0], 0.5 * (g[:, 0, 1] + g[:, 1, 0]), g[:, 1, 1]], axis=1)
    out = harmonize(SymTensorField(a, comps))
    det = out.data[:, 0] * out.data[:, 2] - out.data[:, 1] ** 2
    if (out.data[:, 0] <= 0).any() or (det <= 0).any():
        raise StarShapeError("pullback metric lost positivity (map not star-shaped)")
    return out


def second_form_h(rvec: VectorMapR3, model: NullConeModel,
                  variant: str = "chi") -> SymTensorField:
    """h_ij(r) = 2 chi_{mu nu}(r) dr^mu_i dr^nu_j (variant "chi"), or the
    normal-derivative assembly from (sigma, d sigma) (variant "sigma")."""
    a = rvec.atlas
    z = np.moveaxis(rvec.data, 1, -1).reshape(-1, 3)
    dr = _dgrid(a, rvec.data)
    if variant == "chi":
        chi = model.chi_eval(z).reshape(2, a.n, a.n, 3, 3)
        hmat = 2.0 * np.einsum("cnmuv,ciunm,cjvnm->cijnm", chi, dr, dr)
    elif variant == "sigma":
        sig, dsig = model.sigma_eval(z, order=1)
        sig = sig.reshape(2, a.n, a.n, 3, 3)
        dsig = dsig.reshape(2, a.n, a.n, 3, 3, 3)
        ups = rvec.unit()
        dups = _dgrid(a, ups.data)
        hmat = (np.einsum("cnmuve,ciunm,cjvnm,cenm->cijnm", dsig, dr, dr, ups.data)
                + np.einsum("cnmuv,ciunm,cjvnm->cijnm", sig, dups, dr)
                + np.einsum("cnmuv,ciunm,cjvnm->cijnm", sig, dr, dups))
    else:
        raise ValueError(f"unknown second-form variant {variant}")
    comps = np.stack([hmat[:, 0, 0], 0.5 * (hmat[:, 0, 1] + hmat[:, 1, 0]),
                      hmat[:, 1, 1]], axis=1)
    return harmonize(SymTensorField(a, comps))


class EmbeddingState:
    """A star-shaped map into the annulus with its derived geometry.

    gamma/h may be supplied when known in closed form (e.g. a leaf state);
    the measured pullback then remains available as a diagnostic via
    ``pullback_residual``.
    """

    def __init__(self, model: NullConeModel, rvec: VectorMapR3,
                 gamma: MetricField | None = None, h: SymTensorField | None = None):
        self.model = model
        self.rvec = rvec
        self.atlas = rvec.atlas
        radii = rvec.norm().data
        model.check_domain(np.array([radii.min(), radii.max()]))
        if gamma is not None:
            self.gamma = gamma
        else:
            self.gamma = MetricField(pullback_metric(rvec, model))
        self.h = h if h is not None else second_form_h(rvec, model)
        php = p_form(self.h, self.h, self.gamma).data
        self.convexity_margin = float(php.min())
        if self.convexity_margin <= 0:
            raise ConvexityError("section second form is not convex",
                                 points=np.argwhere(php <= 0)[:8])
        self._graph = None

    @property
    def radius(self) -> ScalarField:
        return self.rvec.norm()

    def pullback_residual(self, target: MetricField | None = None) -> float:
        """Sup difference between the measured pullback and a target (or the
        stored anchor metric when target is None)."""
        ref = target.comp.data if target is not None else self.gamma.comp.data
        measured = pullback_metric(self.rvec, self.model).data
        return float(np.max(np.abs(measured - ref)))

    def graph(self):
        """Graph pair (omega, psi): psi = r/|r| as a sphere self-map and
        omega = |r| o psi^{-1} over the cone's reference sphere."""
        if self._graph is None:
            psi = self.rvec.unit()
            psi_inv = invert_unit_map(psi)
            vals = interpolate(self.radius, np.moveaxis(psi_inv.data, 1, -1),
                               points=self.atlas.interp_points)
            omega = harmonize(ScalarField(self.atlas, vals))
            self._graph = (omega, psi, psi_inv)
        return self._graph


def leaf_state(model: NullConeModel, s: float) -> EmbeddingState:
    """The identity graph at radius s; anchored on the model's leaf data so
    the anchor metric and second form are free of grid-differentiation noise."""
    rvec = VectorMapR3(model.atlas, float(s) * np.moveaxis(model.atlas.units, -1, 1))
    leaf = model.leaf(float(s))
    h = SymTensorField(model.atlas, 2.0 * leaf.chi.data)
    return EmbeddingState(model, rvec, gamma=leaf.gamma, h=h)


# ---- sphere map inversion ------------------------------------------------------

def invert_unit_map(m: VectorMapR3, tol: float = 1e-12, max_iter: int = 60) -> VectorMapR3:
    """Pointwise inverse of a sphere self-map given by unit vectors.

    Newton iteration on chart coordinates with an interpolated map Jacobian;
    adequate for the diffeomorphisms produced by the solvers here.
    """
    a = m.atlas
    units = np.moveaxis(m.data, 1, -1)         # (2, N, N, 3)
    # chart representations of the map for both target charts, plus gradients
    reps = np.empty((2, 2, a.n, a.n, 2))
    for tc in (0, 1):
        q = 1.0 + units[..., 2] if tc == 0 else 1.0 - units[..., 2]
        q = np.where(np.abs(q) < 1e-12, 1e-12, q)
        sgn = 1.0 if tc == 0 else -1.0
        reps[:, tc, ..., 0] = units[..., 0] / q
        reps[:, tc, ..., 1] = sgn * units[..., 1] / q
    dreps = np.stack([a.d1(np.moveaxis(reps, -1, 2)),
                      a.d2(np.moveaxis(reps, -1, 2))], axis=2)
    # dreps: (2src, 2tgt, d, comp, N, N)
    targets = a.units.reshape(-1, 3)
    tchart = at.preferred_chart(targets)
    # initial guess: the target point itself
    cur_chart = tchart.copy()
    cur = np.where((cur_chart == 0)[:, None], at.chart_coords(0, targets),
                   at.chart_coords(1, targets))
    K = targets.shape[0]
    active = np.ones(K, bool)
    for _ in range(max_iter):
        if not active.any():
            break
        for sc in (0, 1):
            sel = active & (cur_chart == sc)
            if not sel.any():
                continue
            pts = cur[sel]
            tc = tchart[sel]
            for t in (0, 1):
                ss = tc == t
                if not ss.any():
                    continue
                idx = np.where(sel)[0][ss]
                p = pts[ss]
                val = a.interp_chart(np.moveaxis(reps[sc, t], -1, 0), p,
                                     points=a.interp_points)       # (2, k)
                J = a.interp_chart(dreps[sc, t].reshape(4, a.n, a.n), p,
                                   points=a.interp_points).reshape(2, 2, -1)
                tgt = at.chart_coords(t, targets[idx])
                e = val.T - tgt
                det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
                d0 = (J[1, 1] * e[:, 0] - J[0, 1] * e[:, 1]) / det
                d1 = (-J[1, 0] * e[:, 0] + J[0, 0] * e[:, 1]) / det
                step = np.stack([d0, d1], axis=1)
                nrm = np.linalg.norm(step, axis=1)
                step[nrm > 0.5] *= (0.5 / nrm[nrm > 0.5])[:, None]
                cur[idx] = cur[idx] - step
                done = np.max(np.abs(e), axis=1) < tol
                active[idx[done]] = False
        # chart switching
        far = np.linalg.norm(cur, axis=1) > 1.25
        if far.any():
            cur[far] = at.transition(cur[far])
            cur_chart[far] = 1 - cur_chart[far]
    out_units = np.where((cur_chart == 0)[:, None], at.unit_vector(0, cur),
                         at.unit_vector(1, cur))
    data = np.moveaxis(out_units.reshape(2, a.n, a.n, 3), -1, 1)
    return VectorMapR3(a, data)


# ---- the quadratic remainder ---------------------------------------------------

def q_tilde(zvec: VectorMapR3, rvec: VectorMapR3, gamma: MetricField,
            target: MetricField, model: NullConeModel,
            cfg: ContractionConfig) -> SymTensorField:
    """Right side of the linearized embedding equation at displacement z.

    target - gamma - sigma(r)(dz, dz) - z z F(r,z) dr dr - G(r,z) z (dr dz +
    dz dr + dz dz), with the segment remainders F, G evaluated by
    Gauss-Legendre quadrature of the sigma jets along r + t z.
    """
    a = rvec.atlas
    r = np.moveaxis(rvec.data, 1, -1).reshape(-1, 3)
    zv = np.moveaxis(zvec.data, 1, -1).reshape(-1, 3)
    nodes, weights = np.polynomial.legendre.leggauss(cfg.gl_nodes)
    tk = 0.5 * (nodes + 1.0)
    wk = 0.5 * weights
    radii_ok = np.linalg.norm(r[None] + tk[:, None, None] * zv[None], axis=-1)
    if (radii_ok <= model.s_min).any() or (radii_ok >= model.s_max).any():
        raise TrustRegionError("segment r + t z leaves the annulus")
    K = r.shape[0]
    F = np.zeros((K, 3, 3, 3, 3))
    G = np.zeros((K, 3, 3, 3))
    for t, w in zip(tk, wk):
        _, ds, dds = model.sigma_eval(r + t * zv, order=2)
        G += w * ds
        F += w * (1.0 - t) * dds
    (sig_r,) = model.sigma_eval(r, order=0)
    dr = _dgrid(a, rvec.data)
    dz = _dgrid(a, zvec.data)
    sh = (2, a.n, a.n)
    sig_r = sig_r.reshape(sh + (3, 3))
    F = F.reshape(sh + (3, 3, 3, 3))
    G = G.reshape(sh + (3, 3, 3))
    zg = np.moveaxis(zvec.data, 1, -1).reshape(sh + (3,))
    t1 = np.einsum("cnmuv,ciunm,cjvnm->cijnm", sig_r, dz, dz)
    t2 = np.einsum("cnme,cnmx,cnmuvex,ciunm,cjvnm->cijnm", zg, zg, F, dr, dr)
    t3 = (np.einsum("cnmuve,cnme,ciunm,cjvnm->cijnm", G, zg, dr, dz)
          + np.einsum("cnmuve,cnme,ciunm,cjvnm->cijnm", G, zg, dz, dr)
          + np.einsum("cnmuve,cnme,ciunm,cjvnm->cijnm", G, zg, dz, dz))
    full = t1 + t2 + t3
    comps = np.stack([full[:, 0, 0], 0.5 * (full[:, 0, 1] + full[:, 1, 0]),
                      full[:, 1, 1]], axis=1)
    return SymTensorField(a, target.comp.data - gamma.comp.data - comps)


# ---- the contraction -----------------------------------------------------------

def _assemble_velocity(tau: CovectorField, phi: ScalarField, state: EmbeddingState):
    """y = dr(tau-sharp) + phi * r/|r| as an R^3-valued field."""
    a = state.atlas
    dr = _dgrid(a, state.rvec.data)
    sharp = state.gamma.sharp(tau)              # (2, i, N, N)
    ups = state.rvec.unit().data
    y = np.einsum("ciunm,cinm->cunm", dr, sharp) + phi.data[:, None] * ups
    return VectorMapR3(a, y)


def contraction_step(zvec: VectorMapR3, state: EmbeddingState, target: MetricField,
                     cfg: ContractionConfig, problem_box: dict):
    """One application of the fixed-point map; returns (z_next, info)."""
    g = state.gamma
    h = state.h
    qt = q_tilde(zvec, state.rvec, g, target, state.model, cfg)
    scale_q = float(np.max(np.abs(qt.data))) + 1e-300
    info = {}
    # a remainder below the measured discretization floor carries no
    # geometric information: correcting it would invert grid noise into the
    # map and re-amplify it through the next differentiation
    if scale_q <= cfg.rhs_skip_abs:
        info["below_floor"] = True
        info["solve_skipped"] = True
        return VectorMapR3(state.atlas, zvec.data.copy()), info
    q = xi_project(qt, h, g)
    # the solve alone is skipped for pure normal motion (projected remainder
    # negligible relative to the full one)
    if float(np.max(np.abs(q.data))) <= max(cfg.rhs_skip_rel * scale_q,
                                            cfg.rhs_skip_abs):
        tau = CovectorField(state.atlas, np.zeros((2, 2, state.atlas.n, state.atlas.n)))
        info["solve_skipped"] = True
        info["defect_sup"] = 0.0
        info["rhs_kernel_fraction"] = 0.0
    else:
        if problem_box.get("problem") is None:
            problem_box["problem"] = assemble(h, g,
                                              kernel_hint=problem_box.get("hint"))
        prob = problem_box["problem"]
        tau, defect, sinfo = solve_Lh_equation(prob, q)
        info["defect_sup"] = sinfo["defect_sup"]
        info["rhs_kernel_fraction"] = sinfo["rhs_kernel_fraction"]
    if cfg.use_phi_elliptic:
        if problem_box.get("phi_problem") is None:
            co = problem_box["problem"].co if problem_box.get("problem") is not None \
                else OperatorCoeffs(h, g)
            problem_box["phi_problem"] = PhiProblem(co)
        phi = phi_elliptic_solve(tau, qt, h, g, problem_box["phi_problem"])
    else:
        phi = phi_algebraic(qt, tau, h, g)
    z_next = _assemble_velocity(tau, phi, state)
    return z_next, info


def embed_perturbation(target: MetricField, state0: EmbeddingState,
                       cfg: ContractionConfig | None = None,
                       problem: EllipticProblem | None = None):
    """Iterate the contraction from z = 0; returns (state, report).

    The report carries per-iteration update norms, the empirical contraction
    factor, kernel discards, the final pullback residual and margins.
    """
    cfg = cfg or ContractionConfig()
    a = state0.atlas
    r0 = state0.rvec
    delta = cfg.trust_radius
    if delta is None:
        delta = 0.1 * float(r0.norm().data.min())
    problem_box = {"problem": problem}
    z = VectorMapR3(a, np.zeros_like(r0.data))
    prev_norm = None
    history = []
    factors = []
    info_last = {}
    converged = False
    grow = 0
    for it in range(cfg.max_iter):
        z_new, info = contraction_step(z, state0, target, cfg, problem_box)
        info_last = info
        step = VectorMapR3(a, z_new.data - z.data)
        damp = cfg.damping
        # trust region: shrink the step until the iterate stays in the ball
        for _ in range(20):
            cand = z.data + damp * step.data
            if np.max(np.linalg.norm(cand, axis=1)) <= delta:
                break
            damp *= 0.5
        else:
            raise TrustRegionError("correction cannot stay inside the trust ball")
        z = VectorMapR3(a, z.data + damp * step.data)
        move = ck_norm(step, 2) * damp
        history.append(move)
        if prev_norm is not None and prev_norm > 0:
            factors.append(move / prev_norm)
        if prev_norm is not None and move > prev_norm * 1.2:
            grow += 1
            if grow >= cfg.patience:
                raise DivergenceError(
                    "fixed-point iteration diverged; shrink the target step "
                    "or anchor at a larger radius")
        else:
            grow = 0
        prev_norm = move
        if move <= cfg.tol * max(1.0, float(np.max(np.abs(r0.data)))):
            converged = True
            break
    state1 = EmbeddingState(state0.model, VectorMapR3(a, r0.data + z.data))
    residual = state1.pullback_residual(target)
    report = {
        "iterations": len(history),
        "converged": bool(converged),
        "update_norms": history,
        "contraction_factor": float(np.median(factors)) if factors else 0.0,
        "pullback_residual_sup": residual,
        "defect_sup": info_last.get("defect_sup", 0.0),
        "rhs_kernel_fraction": info_last.get("rhs_kernel_fraction", 0.0),
        "convexity_margin": state1.convexity_margin,
        "trust_radius": delta,
        "solve_skipped": bool(info_last.get("solve_skipped", False)),
    }
    report["problem"] = problem_box.get("problem")
    return state1, report


# ---- graph-pair validation ------------------------------------------------------

def chart_consistency(state: EmbeddingState) -> float:
    """Sup residual of the second-derivative identity of the graph map.

    The chart Hessian of psi = r/|r| must match the combination of
    section/leaf connection coefficients and second-form terms determined by
    the isometry; large values flag a corrupted graph extraction.
    """
    a = state.atlas
    model = state.model
    psi = state.rvec.unit()
    phi = state.radius.data
    units = np.moveaxis(psi.data, 1, -1)
    tchart = at.preferred_chart(units)
    reps = np.empty((2, 2, a.n, a.n, 2))
    for tc in (0, 1):
        qq = 1.0 + units[..., 2] if tc == 0 else 1.0 - units[..., 2]
        qq = np.where(np.abs(qq) < 1e-12, 1e-12, qq)
        sgn = 1.0 if tc == 0 else -1.0
        reps[:, tc, ..., 0] = units[..., 0] / qq
        reps[:, tc, ..., 1] = sgn * units[..., 1] / qq
    comp = np.moveaxis(reps, -1, 2)                 # (2, tc, s, N, N)
    d1 = np.stack([a.d1(comp), a.d2(comp)], axis=3)            # (2,tc,s,i,N,N)
    d2 = np.stack([a.d1(d1), a.d2(d1)], axis=4)                # (2,tc,s,i,m,N,N)
    dphi = np.stack([a.d1(phi), a.d2(phi)], axis=1)            # (2,i,N,N)
    Gam_sec = state.gamma.christoffels                          # (2,n,i,m,N,N)
    ginv = state.gamma._inv_mat                                 # (2,2,2,N,N)
    mask = a.r[0] <= at.POU_OUT
    worst = 0.0
    for c in (0, 1):
        for tc in (0, 1):
            sel = mask & (tchart[c] == tc)
            if not sel.any():
                continue
            svals = phi[c][sel]
            pts = reps[c, tc][sel]                              # (K, 2)
            jets = model.leaf_scatter(svals, tc, pts)
            gl, dgl, chi = jets["gamma"], jets["dgamma"], jets["chi"]
            gl_inv = np.linalg.inv(gl)
            sym = dgl + dgl.transpose(0, 2, 1, 3) - dgl.transpose(0, 2, 3, 1)
            Gam_leaf = 0.5 * np.einsum("ksr,kijr->ksij", gl_inv, sym)
            Pk = np.moveaxis(d1[c, tc][:, :, sel], -1, 0)       # (K, a, n)
            P2 = np.moveaxis(d2[c, tc][:, :, :, sel], -1, 0)    # (K, s, i, m)
            Gs = np.moveaxis(Gam_sec[c][:, :, :, sel], -1, 0)   # (K, n, i, m)
            gin = np.moveaxis(ginv[c][:, :, sel], -1, 0)        # (K, n, j)
            dph = dphi[c][:, sel].T                             # (K, i)
            t1 = np.einsum("knim,ksn->ksim", Gs, Pk)
            t2 = -np.einsum("ksab,kam,kbi->ksim", Gam_leaf, Pk, Pk)
            t3 = np.einsum("kab,kj,knj,ksn,kai,kbm->ksim", chi, dph, gin, Pk, Pk, Pk)
            t4 = -np.einsum("kar,km,ksr,kai->ksim", chi, dph, gl_inv, Pk)
            t5 = -np.einsum("kar,ksr,ki,kam->ksim", chi, gl_inv, dph, Pk)
            resid = P2 - (t1 + t2 + t3 + t4 + t5)
            worst = max(worst, float(np.max(np.abs(resid))))
    return worst
