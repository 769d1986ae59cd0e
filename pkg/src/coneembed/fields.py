"""Fields on the sphere stored as per-chart component grids.

A field holds one array of shape (2, *comp, N, N): chart index first,
component indices (if any) next, grid axes last.  Covector and symmetric
2-tensor components are chart covariant components; symmetric tensors store
the three independent entries in the order (11, 12, 22).  R^3-valued maps
store three chart-independent scalar components.

Fields produced by closed-form constructors are exactly consistent across
charts; fields produced by grid differentiation are made globally usable by
``harmonize`` which smoothly blends each chart's far zone with data pulled
from the other chart.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import atlas as at
from .atlas import ChartAtlas
from .errors import AtlasMismatchError, ConfigError, DomainError

SYM_IDX = ((0, 0), (0, 1), (1, 1))


def sym_to_mat(a3: np.ndarray) -> np.ndarray:
    """(..., 3, N, N) -> (..., 2, 2, N, N)."""
    m = np.empty(a3.shape[:-3] + (2, 2) + a3.shape[-2:])
    m[..., 0, 0, :, :] = a3[..., 0, :, :]
    m[..., 0, 1, :, :] = a3[..., 1, :, :]
    m[..., 1, 0, :, :] = a3[..., 1, :, :]
    m[..., 1, 1, :, :] = a3[..., 2, :, :]
    return m


def mat_to_sym(m: np.ndarray) -> np.ndarray:
    """(..., 2, 2, N, N) -> (..., 3, N, N); symmetrizes."""
    a3 = np.empty(m.shape[:-4] + (3,) + m.shape[-2:])
    a3[..., 0, :, :] = m[..., 0, 0, :, :]
    a3[..., 1, :, :] = 0.5 * (m[..., 0, 1, :, :] + m[..., 1, 0, :, :])
    a3[..., 2, :, :] = m[..., 1, 1, :, :]
    return a3


class Field:
    kind = "field"
    comp_shape: tuple = ()

    def __init__(self, atlas: ChartAtlas, data: np.ndarray):
        self.atlas = atlas
        self.data = np.asarray(data, float)
        want = (2,) + self.comp_shape + (atlas.n, atlas.n)
        if self.data.shape != want:
            raise ConfigError(f"{type(self).__name__}: data shape {self.data.shape} != {want}")

    def copy(self):
        return type(self)(self.atlas, self.data.copy())

    def _check(self, other):
        if self.atlas != other.atlas:
            raise AtlasMismatchError("fields live on different atlases")

    def __add__(self, other):
        self._check(other)
        return type(self)(self.atlas, self.data + other.data)

    def __sub__(self, other):
        self._check(other)
        return type(self)(self.atlas, self.data - other.data)

    def __mul__(self, c):
        if isinstance(c, ScalarField):
            shape = (2,) + (1,) * len(self.comp_shape) + (self.atlas.n, self.atlas.n)
            return type(self)(self.atlas, self.data * c.data.reshape(shape))
        return type(self)(self.atlas, self.data * float(c))

    __rmul__ = __mul__

    def __neg__(self):
        return type(self)(self.atlas, -self.data)


class ScalarField(Field):
    kind = "scalar"
    comp_shape = ()


class CovectorField(Field):
    kind = "covector"
    comp_shape = (2,)


class SymTensorField(Field):
    kind = "sym2"
    comp_shape = (3,)

    def mat(self) -> np.ndarray:
        return sym_to_mat(self.data)


class VectorMapR3(Field):
    kind = "r3map"
    comp_shape = (3,)

    def norm(self) -> ScalarField:
        return ScalarField(self.atlas, np.sqrt(np.sum(self.data ** 2, axis=1)))

    def unit(self) -> "VectorMapR3":
        n = np.sqrt(np.sum(self.data ** 2, axis=1, keepdims=True))
        return VectorMapR3(self.atlas, self.data / n)


KINDS = {c.kind: c for c in (ScalarField, CovectorField, SymTensorField, VectorMapR3)}


# ---- constructors ---------------------------------------------------------

def scalar_from_units(atlas: ChartAtlas, fn) -> ScalarField:
    """Scalar field from a function of unit vectors, fn(units(...,3)) -> (...)."""
    return ScalarField(atlas, np.asarray(fn(atlas.units), float))


def r3map_from_units(atlas: ChartAtlas, fn) -> VectorMapR3:
    """R^3-valued field from fn(units(...,3)) -> (...,3)."""
    vals = np.asarray(fn(atlas.units), float)
    return VectorMapR3(atlas, np.moveaxis(vals, -1, 1))


def covector_from_r3(atlas: ChartAtlas, fn) -> CovectorField:
    """Covector tau_i = V . e_i from an R^3-valued function V of unit vectors.

    For V tangent to the sphere this is the round-metric dual of V.
    """
    V = np.asarray(fn(atlas.units), float)
    # frames: (2, N, N, 2, 3); V: (2, N, N, 3) -> tau (2, N, N, 2)
    tau = np.einsum("cnmkv,cnmv->cnmk", atlas.frames, V)
    return CovectorField(atlas, np.moveaxis(tau, -1, 1))


def sym_from_r3(atlas: ChartAtlas, fn) -> SymTensorField:
    """Symmetric 2-tensor a_ij = e_i . S . e_j from S(units) -> (..., 3, 3)."""
    S = np.asarray(fn(atlas.units), float)
    a = np.einsum("cnmiv,cnmvw,cnmjw->cnmij", atlas.frames, S, atlas.frames)
    comps = np.stack([a[..., 0, 0], 0.5 * (a[..., 0, 1] + a[..., 1, 0]), a[..., 1, 1]], axis=1)
    return SymTensorField(atlas, comps)


def zero_field(atlas: ChartAtlas, cls):
    return cls(atlas, np.zeros((2,) + cls.comp_shape + (atlas.n, atlas.n)))


# ---- cross-chart transport -------------------------------------------------

def _transport_comps(field_kind: str, src: np.ndarray, atlas: ChartAtlas, dst_chart: int,
                     pts: np.ndarray, points: int | None = None) -> np.ndarray:
    """Interpolate the other chart's data at T(pts) and pull components back.

    src is the source chart's block (*comp, N, N); pts are coordinates in the
    destination chart, shape (K, 2).  Returns (*comp, K).
    """
    if points is None:
        points = atlas.interp_points
    xi = at.transition(pts)
    vals = atlas.interp_chart(src, xi, points=points)
    if field_kind in ("scalar", "r3map"):
        return vals
    J = at.transition_jacobian(pts)  # (K, 2, 2): d(xi)/dx at destination pts
    if field_kind == "covector":
        return np.einsum("kai,ak->ik", J, vals)
    if field_kind == "sym2":
        m = np.empty((2, 2, vals.shape[-1]))
        m[0, 0] = vals[0]
        m[0, 1] = m[1, 0] = vals[1]
        m[1, 1] = vals[2]
        out = np.einsum("kai,kbj,abk->ijk", J, J, m)
        return np.stack([out[0, 0], 0.5 * (out[0, 1] + out[1, 0]), out[1, 1]], axis=0)
    raise ConfigError(f"unknown field kind {field_kind}")


def harmonize(field: Field) -> Field:
    """Blend each chart's far zone (r > BLEND_IN) with other-chart data.

    Output equals the input where beta == 1 and is a smooth combination of
    the two representations elsewhere; far-field junk from one-sided
    stencils never survives.
    """
    a = field.atlas
    out = field.data.copy()
    for c in (0, 1):
        mask = a.beta[c] < 1.0
        if not mask.any():
            continue
        pts = a.x[c][mask]
        vals = _transport_comps(field.kind, field.data[1 - c], a, c, pts)
        b = a.beta[c][mask]
        out[(c,) + (slice(None),) * len(field.comp_shape)][..., mask] = (
            b * out[(c,) + (slice(None),) * len(field.comp_shape)][..., mask] + (1.0 - b) * vals)
    return type(field)(a, out)


def consistency_residual(field: Field, band=(0.8, 1.25)) -> float:
    """Sup over overlap grid points of |own - transported other-chart| components."""
    a = field.atlas
    worst = 0.0
    for c in (0, 1):
        mask = (a.r[c] >= band[0]) & (a.r[c] <= band[1])
        pts = a.x[c][mask]
        vals = _transport_comps(field.kind, field.data[1 - c], a, c, pts)
        own = field.data[(c,) + (slice(None),) * len(field.comp_shape)][..., mask]
        worst = max(worst, float(np.max(np.abs(own - vals))))
    return worst


# ---- evaluation at points ---------------------------------------------------

def interpolate(field: Field, points_or_units, chart: int | None = None,
                points: int = 4):
    """Evaluate a field at scattered sphere points (bicubic by default).

    ``points_or_units`` is either an array of unit vectors (..., 3) or a
    pair (chart_index, coords).  Tensor components are returned in the chart
    actually used per point; pass ``chart`` to force one chart for all
    points.  Returns (values, charts_used) for tensor kinds, plain values
    for scalars and R^3 maps.
    """
    a = field.atlas
    if isinstance(points_or_units, tuple):
        ch = np.full(points_or_units[1].shape[:-1], points_or_units[0], dtype=int)
        pts = np.asarray(points_or_units[1], float)
    else:
        units = np.asarray(points_or_units, float)
        if np.any(np.abs(np.sum(units ** 2, axis=-1) - 1.0) > 1e-6):
            raise DomainError("interpolation points must be unit vectors")
        ch = at.preferred_chart(units) if chart is None else np.full(units.shape[:-1], chart, int)
        pts = np.where((ch == 0)[..., None],
                       at.chart_coords(0, units), at.chart_coords(1, units))
    flat_ch = ch.ravel()
    flat_pts = pts.reshape(-1, 2)
    ncomp = int(np.prod(field.comp_shape)) if field.comp_shape else 1
    out = np.empty((ncomp, flat_ch.size))
    for c in (0, 1):
        m = flat_ch == c
        if not m.any():
            continue
        block = field.data[c].reshape((ncomp,) + field.data.shape[-2:])
        out[:, m] = a.interp_chart(block, flat_pts[m], points=points)
    out = out.reshape(field.comp_shape + ch.shape)
    if field.kind in ("scalar", "r3map"):
        return out
    return out, ch


def _map_chart_reps(m: VectorMapR3):
    """Chart representations psi_c(x) of a sphere self-map, for both targets.

    Returns array (2src, 2tgt, N, N, 2) with inf-guarded far-pole values.
    """
    a = m.atlas
    units = np.moveaxis(m.data, 1, -1)  # (2, N, N, 3)
    reps = np.empty((2, 2) + units.shape[:-1][1:] + (2,))
    for tc in (0, 1):
        q = 1.0 + units[..., 2] if tc == 0 else 1.0 - units[..., 2]
        q = np.where(np.abs(q) < 1e-9, 1e-9, q)
        s = 1.0 if tc == 0 else -1.0
        reps[:, tc, ..., 0] = units[..., 0] / q
        reps[:, tc, ..., 1] = s * units[..., 1] / q
    return reps


def compose_with_map(field: Field, m: VectorMapR3, points: int | None = None) -> Field:
    """Pullback of a field under a sphere self-map: (f o m) with tensor transport.

    Scalars and R^3 maps compose pointwise; covectors and symmetric tensors
    are pulled back with the grid Jacobian of the map's chart representation.
    """
    a = field.atlas
    if a != m.atlas:
        raise AtlasMismatchError("map and field on different atlases")
    if points is None:
        points = a.interp_points
    units = np.moveaxis(m.data, 1, -1)
    if field.kind in ("scalar", "r3map"):
        vals = interpolate(field, units.reshape(-1, 3), points=points)
        new = vals.reshape(field.comp_shape + (2, a.n, a.n))
        if field.comp_shape:
            new = np.moveaxis(new, 0, 1)
        return type(field)(a, new)
    # tensor pullback: choose a target chart per point, differentiate the map
    reps = _map_chart_reps(m)
    tgt = at.preferred_chart(units)  # (2, N, N)
    data = np.zeros_like(field.data) if field.kind == "covector" else np.zeros(
        (2, 3, a.n, a.n))
    for tc in (0, 1):
        psi = reps[:, tc]                   # (2, N, N, 2)
        dpsi = np.stack([a.d1(np.moveaxis(psi, -1, 1)),
                         a.d2(np.moveaxis(psi, -1, 1))], axis=1)  # (2, 2i, 2a, N, N)
        sel = tgt == tc
        if not sel.any():
            continue
        pts = psi[sel]
        ncomp = int(np.prod(field.comp_shape))
        block = np.empty((ncomp, pts.shape[0]))
        fsrc = field.data[tc].reshape((ncomp,) + field.data.shape[-2:])
        block[:] = a.interp_chart(fsrc, pts, points=points)
        Jp = np.moveaxis(dpsi, (1, 2), (-2, -1))[sel]  # (K, 2i, 2a)
        if field.kind == "covector":
            out = np.einsum("kia,ak->ik", Jp, block)
            for i in (0, 1):
                data[:, i][sel] = out[i]
        else:
            mm = np.empty((2, 2, pts.shape[0]))
            mm[0, 0], mm[0, 1], mm[1, 1] = block[0], block[1], block[2]
            mm[1, 0] = block[1]
            out = np.einsum("kia,kjb,abk->ijk", Jp, Jp, mm)
            data[:, 0][sel] = out[0, 0]
            data[:, 1][sel] = 0.5 * (out[0, 1] + out[1, 0])
            data[:, 2][sel] = out[1, 1]
    return type(field)(a, data)


# ---- serialization ----------------------------------------------------------

MAGIC = "coneembed-field-v1"


def save_field(field: Field, path: str, binary: bool = True) -> None:
    """One file: a JSON header line, then raw float64 or a JSON array."""
    header = {"magic": MAGIC, "kind": field.kind, "n": field.atlas.n,
              "shape": list(field.data.shape), "encoding": "binary" if binary else "json"}
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode())
        if binary:
            f.write(struct.pack("<Q", field.data.size))
            f.write(np.ascontiguousarray(field.data, dtype="<f8").tobytes())
        else:
            f.write(json.dumps(field.data.ravel().tolist()).encode())


def load_field(path: str, atlas: ChartAtlas | None = None) -> Field:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        if header.get("magic") != MAGIC:
            raise ConfigError(f"{path}: not a field file")
        cls = KINDS[header["kind"]]
        a = atlas if atlas is not None else build_atlas_cached(header["n"])
        if a.n != header["n"]:
            raise ConfigError(f"{path}: atlas n={a.n} but file has n={header['n']}")
        shape = tuple(header["shape"])
        if header["encoding"] == "binary":
            (count,) = struct.unpack("<Q", f.read(8))
            data = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape).copy()
        else:
            data = np.array(json.loads(f.read().decode()), float).reshape(shape)
    return cls(a, data)


def build_atlas_cached(n: int) -> ChartAtlas:
    from .atlas import build_atlas
    return build_atlas(n)
