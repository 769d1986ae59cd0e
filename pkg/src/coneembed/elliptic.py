"""The covector operators attached to a convex datum h: the h-traceless
symmetrized gradient, its divergence companion, discrete assembly with
kernel extraction, Fredholm solves with kernel projection, and the two
evaluations of the normal speed.

The assembled matrix mirrors a fixed internal composition (6th-order
stencils, chart-local, no blending) applied to unknowns on the active
disks of both charts; points outside the PDE zone carry cross-chart
interpolation rows, which closes the system and ties the two charts
together.  Grid applications (`apply_Lh`, `apply_curlyLh`) share that
composition exactly, so matrix action and grid action agree to round-off
on PDE rows.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from . import atlas as at
from ._fd import LagrangeInterp, diff
from .calculus import divergence, exterior_d, gauss_curvature, integrate, l2_inner, l2_norm
from .errors import ConvexityError, DiscretizationError, NumericalError
from .fields import (CovectorField, ScalarField, SymTensorField, harmonize,
                     sym_to_mat)
from .metric import MetricField
from .pform import h_inverse, p_form, trace_h, xi_project

ELL_ORDER = 6       # stencil order of the assembled composition
ELL_INTERP = 8      # cross-chart interpolation points per axis in halo rows
RHO0 = 1.05         # PDE rows live at r <= RHO0; halo extends 6h further


# ---- shared raw composition -------------------------------------------------

class OperatorCoeffs:
    """Coefficient data shared by grid application and matrix assembly."""

    def __init__(self, h: SymTensorField, g: MetricField, margin: float = 1e-8):
        if h.atlas != g.atlas:
            raise ConvexityError("h and g on different atlases")
        self.atlas = h.atlas
        self.g = g
        self.h = h
        php = p_form(h, h, g).data
        if (php <= margin * (g.inner_sym(h, h).data + 1e-300)).any():
            raise ConvexityError("P(h,h) <= 0 somewhere",
                                 points=np.argwhere(php <= 0)[:8])
        self.hinv = h_inverse(h, g, margin)
        self.h_mat = sym_to_mat(h.data)
        self.hinv_mat = sym_to_mat(self.hinv.data)
        self.php = php


def _d(h_spacing, arr, axis):
    """Order-ELL_ORDER derivative along a grid axis."""
    return diff(arr, h_spacing, axis=axis, order=ELL_ORDER)


def _Lh_raw(co: OperatorCoeffs, tau: np.ndarray) -> np.ndarray:
    """L_h tau as matrix components (2, B, 2, 2, N, N) from tau (2, B, 2, N, N)."""
    a = co.atlas
    g = co.g
    dt = np.stack([_d(a.h, tau, -2), _d(a.h, tau, -1)], axis=2)  # (2,B,i,j,N,N)
    covd = dt - np.einsum("ckijnm,cbknm->cbijnm", g.christoffels, tau)
    S = covd + covd.transpose(0, 1, 3, 2, 4, 5)                  # 2 Sym(grad tau)
    trh = np.einsum("cijnm,cbijnm->cbnm", co.hinv_mat, S)
    return S - 0.5 * trh[:, :, None, None] * co.h_mat[:, None]


def _div_sym_raw(g: MetricField, M: np.ndarray) -> np.ndarray:
    """Raw divergence of symmetric matrix data (2, B, 2, 2, N, N) -> (2, B, 2, N, N)."""
    a = g.atlas
    dM = np.stack([_d(a.h, M, -2), _d(a.h, M, -1)], axis=2)      # (2,B,d,i,j,N,N)
    corr1 = np.einsum("cliknm,cbljnm->cbikjnm", g.christoffels, M)
    corr2 = np.einsum("clijnm,cbklnm->cbikjnm", g.christoffels, M)
    covd = dM - corr1 - corr2
    return np.einsum("ciknm,cbikjnm->cbjnm", g._inv_mat, covd)


def _curlyLh_raw(co: OperatorCoeffs, tau: np.ndarray) -> np.ndarray:
    """curly-L_h tau = div(L - (tr_g L) g), shape (2, B, 2, N, N)."""
    g = co.g
    L = _Lh_raw(co, tau)
    trL = np.einsum("cijnm,cbijnm->cbnm", g._inv_mat, L)
    M = L - trL[:, :, None, None] * g._gamma_mat[:, None]
    return _div_sym_raw(g, M)


def apply_Lh(tau: CovectorField, h: SymTensorField, g: MetricField) -> SymTensorField:
    """The h-traceless part of twice the symmetrized gradient of tau."""
    co = h if isinstance(h, OperatorCoeffs) else OperatorCoeffs(h, g)
    L = _Lh_raw(co, tau.data[:, None])[:, 0]
    comps = np.stack([L[:, 0, 0], 0.5 * (L[:, 0, 1] + L[:, 1, 0]), L[:, 1, 1]], axis=1)
    return harmonize(SymTensorField(tau.atlas, comps))


def apply_curlyLh(tau: CovectorField, h: SymTensorField, g: MetricField) -> CovectorField:
    """div(L_h tau - tr_g(L_h tau) g); self-adjoint in L^2(g)."""
    co = h if isinstance(h, OperatorCoeffs) else OperatorCoeffs(h, g)
    out = _curlyLh_raw(co, tau.data[:, None])[:, 0]
    return harmonize(CovectorField(tau.atlas, out))


# ---- discrete problem -------------------------------------------------------

class EllipticProblem:
    """Assembled operator with kernel basis and solve machinery.

    Attributes of interest: ``svals`` (all singular values, ascending),
    ``kernel_fields`` (6 L^2-orthonormal covector fields), ``diagnostics``
    (dict with the smallest 12 singular values, the gap ratio, sizes).
    """

    def __init__(self, co: OperatorCoeffs, kernel_hint=None):
        self.co = co
        self.atlas = co.atlas
        self.g = co.g
        self.h = co.h
        a = self.atlas
        if a.n < 32:
            raise DiscretizationError("operator assembly needs n >= 32")
        self.rho_act = RHO0 + (ELL_ORDER + 0.51) * a.h
        self.active = [a.r[c] <= self.rho_act for c in (0, 1)]
        self.pde = [a.r[c] <= RHO0 for c in (0, 1)]
        self.pts_idx = [np.argwhere(m) for m in self.active]
        self.npts = [len(p) for p in self.pts_idx]
        self.ndof = 2 * (self.npts[0] + self.npts[1])
        # dof layout: chart 0 comps (i=0 then i=1), then chart 1
        self._dof_grid = np.full((2, 2, a.n, a.n), -1, dtype=int)
        off = 0
        for c in (0, 1):
            for i in (0, 1):
                k = self.npts[c]
                self._dof_grid[c, i][self.active[c]] = off + np.arange(k)
                off += k
        self.A = self._assemble_matrix()
        self._svd = None
        self._lu = None
        if kernel_hint is not None:
            self._kernel_from_hint(kernel_hint)
        else:
            self._kernel_from_svd()
        self._orthonormal_kernel_fields()

    # -- vector <-> grid helpers ---------------------------------------------

    def field_to_vec(self, f: CovectorField) -> np.ndarray:
        v = np.empty(self.ndof)
        for c in (0, 1):
            for i in (0, 1):
                v[self._dof_grid[c, i][self.active[c]]] = f.data[c, i][self.active[c]]
        return v

    def vec_to_field(self, v: np.ndarray) -> CovectorField:
        a = self.atlas
        data = np.zeros((2, 2, a.n, a.n))
        for c in (0, 1):
            for i in (0, 1):
                data[c, i][self.active[c]] = v[self._dof_grid[c, i][self.active[c]]]
        f = CovectorField(a, data)
        # fill the far zone from the other chart, then blend
        from .fields import _transport_comps
        for c in (0, 1):
            far = ~self.active[c]
            vals = _transport_comps("covector", data[1 - c], a, c, a.x[c][far],
                                    points=ELL_INTERP)
            out = f.data[c]
            for i in (0, 1):
                out[i][far] = vals[i]
        return harmonize(f)

    def rhs_to_vec(self, rhs: CovectorField) -> np.ndarray:
        """PDE rows take the field values; halo (consistency) rows take zero."""
        v = np.zeros(self.ndof)
        for c in (0, 1):
            m = self.pde[c]
            for i in (0, 1):
                v[self._dof_grid[c, i][m]] = rhs.data[c, i][m]
        return v

    # -- assembly --------------------------------------------------------------

    def _assemble_matrix(self) -> np.ndarray:
        a = self.atlas
        n = a.n
        A = np.zeros((self.ndof, self.ndof))
        # PDE rows by batched application to basis vectors
        batch = 256
        for start in range(0, self.ndof, batch):
            cols = np.arange(start, min(start + batch, self.ndof))
            tau = np.zeros((2, len(cols), 2, n, n))
            for c in (0, 1):
                for i in (0, 1):
                    dg = self._dof_grid[c, i]
                    sel = (dg[..., None] == cols[None, None, :])
                    pos = np.argwhere(sel)
                    tau[c, pos[:, 2], i, pos[:, 0], pos[:, 1]] = 1.0
            out = _curlyLh_raw(self.co, tau)      # (2, B, 2, N, N)
            for c in (0, 1):
                m = self.pde[c]
                for i in (0, 1):
                    rows = self._dof_grid[c, i][m]
                    A[rows[:, None], cols[None, :]] = out[c, :, i][:, m].T
        # halo rows: u - interp(other chart) = 0
        interp = LagrangeInterp(ELL_INTERP)
        p = ELL_INTERP
        for c in (0, 1):
            halo = self.active[c] & ~self.pde[c]
            pts = a.x[c][halo]
            xi = at.transition(pts)
            J = at.transition_jacobian(pts)        # (K, 2, 2): tau_c = J^a_i tau_src
            hgrid = (xi + at.CHART_L) / a.h
            base = np.clip(np.floor(hgrid).astype(int) - (p // 2 - 1), 0, n - p)
            t1 = hgrid[:, 0] - base[:, 0] - (p // 2 - 1)
            t2 = hgrid[:, 1] - base[:, 1] - (p // 2 - 1)
            w1 = interp._axis_weights(t1)
            w2 = interp._axis_weights(t2)
            idx1 = base[:, 0][:, None] + np.arange(p)[None, :]
            idx2 = base[:, 1][:, None] + np.arange(p)[None, :]
            src_dof = self._dof_grid[1 - c][:, idx1[:, :, None], idx2[:, None, :]]
            if (src_dof < 0).any():
                raise DiscretizationError("halo interpolation stencil left the active set")
            w = w1[:, :, None] * w2[:, None, :]    # (K, p, p)
            for i in (0, 1):
                rows = self._dof_grid[c, i][halo]
                A[rows, rows] = 1.0
                for srccomp in (0, 1):
                    coeff = -J[:, srccomp, i][:, None, None] * w
                    A[rows[:, None, None], src_dof[srccomp]] += coeff
        return A

    # -- kernel ---------------------------------------------------------------

    @property
    def svd(self):
        if self._svd is None:
            U, s, Vt = np.linalg.svd(self.A)
            self._svd = (U, s, Vt)
        return self._svd

    @property
    def svals(self) -> np.ndarray:
        return self.svd[1][::-1].copy()   # ascending

    def _kernel_from_svd(self):
        U, s, Vt = self.svd
        scale = s[0]
        small = s <= 1e-6 * scale
        ksize = int(np.sum(small))
        s_asc = s[::-1]
        gap = s_asc[6] / max(s_asc[5], 1e-300)
        self.diagnostics = {
            "ndof": self.ndof,
            "scale": float(scale),
            "smallest_12": [float(v) for v in s_asc[:12]],
            "kernel_size_at_1e-6": ksize,
            "gap_sigma7_over_sigma6": float(gap),
        }
        if ksize != 6 or gap < 1e3:
            raise DiscretizationError(
                f"kernel dimension test failed (found {ksize}, gap {gap:.2e}); "
                "suggest a larger grid size")
        self._kernel_right = Vt[-6:].T.copy()      # (ndof, 6)
        self._kernel_left = U[:, -6:].copy()

    def _kernel_from_hint(self, hint):
        """Refine a kernel guess by deflated inverse iteration (no full SVD)."""
        V0, U0 = hint
        V = np.linalg.qr(V0)[0]
        U = np.linalg.qr(U0)[0]
        for _ in range(3):
            B = np.block([[self.A, U], [V.T, np.zeros((6, 6))]])
            lu = scipy.linalg.lu_factor(B)
            rhs = np.vstack([V, np.zeros((6, 6))])
            X = scipy.linalg.lu_solve(lu, rhs)[: self.ndof]
            V = np.linalg.qr(X)[0]
            rhsT = np.vstack([U, np.zeros((6, 6))])
            Y = scipy.linalg.lu_solve(scipy.linalg.lu_factor(B.T), rhsT)[: self.ndof]
            U = np.linalg.qr(Y)[0]
        resid = np.linalg.norm(self.A @ V) / max(np.linalg.norm(self.A, ord=1), 1e-300)
        if resid > 1e-7:
            self._kernel_from_svd()
            return
        self._kernel_right = V
        self._kernel_left = U
        self.diagnostics = {"ndof": self.ndof, "kernel_refined_from_hint": True,
                            "kernel_residual": float(resid)}

    def _orthonormal_kernel_fields(self):
        fields = [self.vec_to_field(self._kernel_right[:, k]) for k in range(6)]
        G = np.array([[l2_inner(fields[i], fields[j], self.g) for j in range(6)]
                      for i in range(6)])
        w, P = np.linalg.eigh(G)
        W = P @ np.diag(1.0 / np.sqrt(np.maximum(w, 1e-300))) @ P.T
        self.kernel_fields = []
        for k in range(6):
            data = sum(W[j, k] * fields[j].data for j in range(6))
            self.kernel_fields.append(CovectorField(self.atlas, data))

    # -- solves -----------------------------------------------------------------

    def _solve_vec(self, b: np.ndarray):
        if self._lu is not None:
            return self._lu_solve(b)
        U, s, Vt = self.svd
        sinv = np.where(s > s[0] * 1e-9, 1.0 / np.maximum(s, 1e-300), 0.0)
        sinv[-6:] = 0.0
        coef = U.T @ b
        discarded = float(np.linalg.norm(coef[-6:]) / max(np.linalg.norm(b), 1e-300))
        return Vt.T @ (sinv * coef), discarded

    def use_bordered_lu(self):
        """Switch to a bordered-LU solver (fast repeated solves, no SVD)."""
        B = np.block([[self.A, self._kernel_left],
                      [self._kernel_right.T, np.zeros((6, 6))]])
        self._lu = scipy.linalg.lu_factor(B)

    def _lu_solve(self, b: np.ndarray):
        rhs = np.concatenate([b, np.zeros(6)])
        sol = scipy.linalg.lu_solve(self._lu, rhs)
        lam = sol[self.ndof:]
        discarded = float(np.linalg.norm(lam) / max(np.linalg.norm(b), 1e-300))
        return sol[: self.ndof], discarded

    def project_out_kernel(self, tau: CovectorField) -> CovectorField:
        out = tau
        for _ in range(2):   # two sweeps of modified Gram-Schmidt
            for k in self.kernel_fields:
                c = l2_inner(out, k, self.g)
                out = out - c * k
        return out

    def kernel_component(self, f: CovectorField) -> float:
        c2 = sum(l2_inner(f, k, self.g) ** 2 for k in self.kernel_fields)
        n2 = max(l2_inner(f, f, self.g), 1e-300)
        return float(np.sqrt(c2 / n2))


def assemble(h: SymTensorField, g: MetricField, kernel_hint=None,
             margin: float = 1e-8) -> EllipticProblem:
    """Build the discrete operator for the pair (h, g) and extract its kernel."""
    co = OperatorCoeffs(h, g, margin)
    return EllipticProblem(co, kernel_hint=kernel_hint)


def fredholm_solve(problem: EllipticProblem, rhs: CovectorField):
    """Solve curly-L tau = rhs with the kernel component of rhs projected out.

    Returns (tau, info); tau is L^2-orthogonal to the kernel after
    re-orthogonalization; info reports the discarded rhs fraction and the
    residual of the projected system.
    """
    b = problem.rhs_to_vec(rhs)
    x, discarded = problem._solve_vec(b)
    resid_vec = problem.A @ x - b
    # measure the residual only against the projected rhs
    for k in range(6):
        u = problem._kernel_left[:, k]
        resid_vec -= (u @ resid_vec) * u
    tau = problem.vec_to_field(x)
    tau = problem.project_out_kernel(tau)
    info = {
        "rhs_kernel_fraction": discarded,
        "solver_residual": float(np.linalg.norm(resid_vec)
                                 / max(np.linalg.norm(b), 1e-300)),
    }
    return tau, info


def solve_Lh_equation(problem: EllipticProblem, q: SymTensorField):
    """Solve L_h tau = q for q with P(q,h) = 0; returns (tau, defect, info).

    The defect a := q - L_h tau satisfies the degenerate-dual conditions to
    discretization accuracy and shrinks under refinement.
    """
    q = xi_project(q, problem.h, problem.g)        # defensive projection
    g = problem.g
    trq = g.trace(q)
    # raw-order divergence of (q - tr q g): arithmetic-consistent with the matrix
    M = sym_to_mat(q.data - trq.data[:, None] * g.comp.data)[:, None]
    rhs_field = CovectorField(q.atlas, _div_sym_raw(g, M)[:, 0])
    tau, info = fredholm_solve(problem, rhs_field)
    L = apply_Lh(tau, problem.co, problem.g)
    defect = q - L
    info = dict(info)
    info["defect_sup"] = float(np.max(np.abs(defect.data)))
    info["defect_l2"] = l2_norm(defect, problem.g)
    return tau, defect, info


def phi_algebraic(qt: SymTensorField, tau: CovectorField, h: SymTensorField,
                  g: MetricField) -> ScalarField:
    """Normal speed phi = (tr_g qt - 2 div tau) / tr_g h."""
    trh = g.trace(h).data
    if (trh <= 0).any():
        raise ConvexityError("tr_g h <= 0 in phi evaluation",
                             points=np.argwhere(trh <= 0)[:8])
    val = (g.trace(qt).data - 2.0 * divergence(tau, g).data) / trh
    return ScalarField(qt.atlas, val)


# ---- the second-order scalar route for phi ---------------------------------

class PhiProblem:
    """Discrete operator phi -> div div (phi ((tr_g h) g - h))."""

    def __init__(self, co: OperatorCoeffs):
        self.co = co
        a = co.atlas
        g = co.g
        if a.n < 32:
            raise DiscretizationError("operator assembly needs n >= 32")
        trh = g.trace(co.h).data
        self.M = trh[:, None] * g.comp.data - co.h.data      # (tr h) g - h
        self.M_mat = sym_to_mat(self.M)
        self.rho_act = RHO0 + (ELL_ORDER + 0.51) * a.h
        self.active = [a.r[c] <= self.rho_act for c in (0, 1)]
        self.pde = [a.r[c] <= RHO0 for c in (0, 1)]
        self.ndof = int(np.sum(self.active[0]) + np.sum(self.active[1]))
        self._dof_grid = np.full((2, a.n, a.n), -1, dtype=int)
        off = 0
        for c in (0, 1):
            k = int(np.sum(self.active[c]))
            self._dof_grid[c][self.active[c]] = off + np.arange(k)
            off += k
        self.A = self._assemble()
        self._svd = None

    @property
    def svd(self):
        if self._svd is None:
            self._svd = np.linalg.svd(self.A)
        return self._svd

    @property
    def diagnostics(self):
        s = self.svd[1]
        return {"smallest_12": [float(v) for v in s[::-1][:12]], "scale": float(s[0])}

    def apply_raw(self, phi: np.ndarray) -> np.ndarray:
        """div div (phi M) on grid data phi (2, B, N, N)."""
        a = self.co.atlas
        g = self.co.g
        S = phi[:, :, None, None] * self.M_mat[:, None]
        dS = np.stack([_d(a.h, S, -2), _d(a.h, S, -1)], axis=2)
        corr1 = np.einsum("cliknm,cbljnm->cbikjnm", g.christoffels, S)
        corr2 = np.einsum("clijnm,cbklnm->cbikjnm", g.christoffels, S)
        divS = np.einsum("ciknm,cbikjnm->cbjnm", g._inv_mat, dS - corr1 - corr2)
        dd = np.stack([_d(a.h, divS, -2), _d(a.h, divS, -1)], axis=2)
        covd = dd - np.einsum("ckijnm,cbknm->cbijnm", g.christoffels, divS)
        return np.einsum("cijnm,cbijnm->cbnm", g._inv_mat, covd)

    def _assemble(self) -> np.ndarray:
        a = self.co.atlas
        n = a.n
        A = np.zeros((self.ndof, self.ndof))
        batch = 256
        for start in range(0, self.ndof, batch):
            cols = np.arange(start, min(start + batch, self.ndof))
            phi = np.zeros((2, len(cols), n, n))
            for c in (0, 1):
                dg = self._dof_grid[c]
                pos = np.argwhere(dg[..., None] == cols[None, None, :])
                phi[c, pos[:, 2], pos[:, 0], pos[:, 1]] = 1.0
            out = self.apply_raw(phi)
            for c in (0, 1):
                m = self.pde[c]
                rows = self._dof_grid[c][m]
                A[rows[:, None], cols[None, :]] = out[c][:, m].T
        interp = LagrangeInterp(ELL_INTERP)
        p = ELL_INTERP
        for c in (0, 1):
            halo = self.active[c] & ~self.pde[c]
            pts = a.x[c][halo]
            xi = at.transition(pts)
            hgrid = (xi + at.CHART_L) / a.h
            base = np.clip(np.floor(hgrid).astype(int) - (p // 2 - 1), 0, n - p)
            t1 = hgrid[:, 0] - base[:, 0] - (p // 2 - 1)
            t2 = hgrid[:, 1] - base[:, 1] - (p // 2 - 1)
            w = interp._axis_weights(t1)[:, :, None] * interp._axis_weights(t2)[:, None, :]
            idx1 = base[:, 0][:, None] + np.arange(p)[None, :]
            idx2 = base[:, 1][:, None] + np.arange(p)[None, :]
            src = self._dof_grid[1 - c][idx1[:, :, None], idx2[:, None, :]]
            if (src < 0).any():
                raise DiscretizationError("halo stencil left the active set")
            rows = self._dof_grid[c][halo]
            A[rows, rows] = 1.0
            A[rows[:, None, None], src] -= w
        return A

    def vec_to_field(self, v: np.ndarray) -> ScalarField:
        a = self.co.atlas
        data = np.zeros((2, a.n, a.n))
        for c in (0, 1):
            data[c][self.active[c]] = v[self._dof_grid[c][self.active[c]]]
        f = ScalarField(a, data)
        from .fields import _transport_comps
        for c in (0, 1):
            far = ~self.active[c]
            f.data[c][far] = _transport_comps("scalar", data[1 - c], a, c,
                                              a.x[c][far], points=ELL_INTERP)
        return harmonize(f)

    def rhs_to_vec(self, rhs: ScalarField) -> np.ndarray:
        v = np.zeros(self.ndof)
        for c in (0, 1):
            m = self.pde[c]
            v[self._dof_grid[c][m]] = rhs.data[c][m]
        return v


def phi_elliptic_solve(tau: CovectorField, qt: SymTensorField, h: SymTensorField,
                       g: MetricField, phi_problem: PhiProblem | None = None) -> ScalarField:
    """Solve div div (phi ((tr h) g - h)) = 2 div(K tau) + div div ((tr qt) g - qt).

    The discrete near-kernel ambiguity (constant-like mode) is fixed by
    matching the mean of the algebraic evaluation.
    """
    co = phi_problem.co if phi_problem is not None else OperatorCoeffs(h, g)
    pp = phi_problem if phi_problem is not None else PhiProblem(co)
    K = gauss_curvature(g)
    Ktau = CovectorField(tau.atlas, K.data[:, None] * tau.data)
    rhs1 = divergence(Ktau, g)
    Mq = SymTensorField(qt.atlas, g.trace(qt).data[:, None] * g.comp.data - qt.data)
    rhs2 = divergence(divergence(Mq, g), g)
    rhs = ScalarField(tau.atlas, 2.0 * rhs1.data + rhs2.data)
    b = pp.rhs_to_vec(rhs)
    U, s, Vt = pp.svd
    sinv = np.where(s > s[0] * 1e-10, 1.0 / np.maximum(s, 1e-300), 0.0)
    # drop the trailing near-kernel mode(s): anything below 1e-8 * scale
    ncut = int(np.sum(s < 1e-8 * s[0]))
    if ncut:
        sinv[-ncut:] = 0.0
    x = Vt.T @ (sinv * (U.T @ b))
    phi = pp.vec_to_field(x)
    alg = phi_algebraic(qt, tau, h, g)
    shift = (integrate(alg, g) - integrate(phi, g)) / integrate(
        ScalarField(phi.atlas, np.ones_like(phi.data)), g)
    return ScalarField(phi.atlas, phi.data + shift)
