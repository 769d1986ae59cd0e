"""Smooth reference profiles on the sphere: low-degree real harmonics
(as polynomials of the unit vector) and seeded random smooth fields.
"""

from __future__ import annotations

import numpy as np

from .atlas import ChartAtlas
from .errors import ConfigError
from .fields import (CovectorField, ScalarField, SymTensorField,
                     covector_from_r3, scalar_from_units, sym_from_r3)

# restrictions of harmonic homogeneous polynomials; eigenfunctions of the
# round Laplacian with eigenvalue -l(l+1)
_HARMONICS = {
    (0, 0): lambda n: np.ones(n.shape[:-1]),
    (1, 0): lambda n: n[..., 2],
    (1, 1): lambda n: n[..., 0],
    (1, -1): lambda n: n[..., 1],
    (2, 0): lambda n: 3 * n[..., 2] ** 2 - 1,
    (2, 1): lambda n: n[..., 0] * n[..., 2],
    (2, -1): lambda n: n[..., 1] * n[..., 2],
    (2, 2): lambda n: n[..., 0] ** 2 - n[..., 1] ** 2,
    (2, -2): lambda n: n[..., 0] * n[..., 1],
    (3, 0): lambda n: n[..., 2] * (5 * n[..., 2] ** 2 - 3),
    (3, 1): lambda n: n[..., 0] * (5 * n[..., 2] ** 2 - 1),
    (3, -1): lambda n: n[..., 1] * (5 * n[..., 2] ** 2 - 1),
    (3, 2): lambda n: n[..., 2] * (n[..., 0] ** 2 - n[..., 1] ** 2),
    (3, -2): lambda n: n[..., 0] * n[..., 1] * n[..., 2],
    (3, 3): lambda n: n[..., 0] * (n[..., 0] ** 2 - 3 * n[..., 1] ** 2),
    (3, -3): lambda n: n[..., 1] * (3 * n[..., 0] ** 2 - n[..., 1] ** 2),
    (4, 0): lambda n: 35 * n[..., 2] ** 4 - 30 * n[..., 2] ** 2 + 3,
    (4, 1): lambda n: n[..., 0] * n[..., 2] * (7 * n[..., 2] ** 2 - 3),
    (4, -1): lambda n: n[..., 1] * n[..., 2] * (7 * n[..., 2] ** 2 - 3),
    (4, 2): lambda n: (n[..., 0] ** 2 - n[..., 1] ** 2) * (7 * n[..., 2] ** 2 - 1),
    (4, -2): lambda n: n[..., 0] * n[..., 1] * (7 * n[..., 2] ** 2 - 1),
    (4, 3): lambda n: n[..., 2] * n[..., 0] * (n[..., 0] ** 2 - 3 * n[..., 1] ** 2),
    (4, -3): lambda n: n[..., 2] * n[..., 1] * (3 * n[..., 0] ** 2 - n[..., 1] ** 2),
    (4, 4): lambda n: (n[..., 0] ** 4 - 6 * n[..., 0] ** 2 * n[..., 1] ** 2 + n[..., 1] ** 4),
    (4, -4): lambda n: n[..., 0] * n[..., 1] * (n[..., 0] ** 2 - n[..., 1] ** 2),
}


def harmonic_fn(l: int, m: int):
    """Real harmonic polynomial profile (unnormalized), radial eigenvalue -l(l+1)."""
    try:
        return _HARMONICS[(l, m)]
    except KeyError:
        raise ConfigError(f"harmonic (l={l}, m={m}) not tabulated (need |m| <= l <= 4)")


def harmonic_scalar(atlas: ChartAtlas, l: int, m: int, amp: float = 1.0) -> ScalarField:
    fn = harmonic_fn(l, m)
    return scalar_from_units(atlas, lambda n: amp * fn(n))


def harmonic_sum(atlas: ChartAtlas, terms) -> ScalarField:
    """Sum of amp * Y_lm from an iterable of {"l", "m", "amp"} mappings."""
    fns = [(harmonic_fn(int(t["l"]), int(t["m"])), float(t["amp"])) for t in terms]

    def f(n):
        out = np.zeros(n.shape[:-1])
        for fn, amp in fns:
            out += amp * fn(n)
        return out

    return scalar_from_units(atlas, f)


def random_scalar(atlas: ChartAtlas, rng: np.random.Generator, lmax: int = 3,
                  amp: float = 1.0, lmin: int = 0) -> ScalarField:
    """Band-limited random smooth scalar with decaying mode amplitudes."""
    keys = [k for k in _HARMONICS if lmin <= k[0] <= lmax]
    coeffs = {k: rng.standard_normal() * amp / (1.0 + k[0] * (k[0] + 1.0)) for k in keys}

    def f(n):
        out = np.zeros(n.shape[:-1])
        for k, c in coeffs.items():
            out += c * _HARMONICS[k](n)
        return out

    return scalar_from_units(atlas, f)


def random_covector(atlas: ChartAtlas, rng: np.random.Generator,
                    amp: float = 1.0) -> CovectorField:
    """tau_i = V . e_i for a random low-degree polynomial vector field V."""
    A = rng.standard_normal((3, 3)) * amp
    b = rng.standard_normal(3) * amp
    Q = rng.standard_normal((3, 3, 3)) * amp * 0.5

    def V(n):
        lin = np.einsum("uv,...v->...u", A, n)
        quad = np.einsum("uvw,...v,...w->...u", Q, n, n)
        return lin + b + quad

    return covector_from_r3(atlas, V)


def random_sym(atlas: ChartAtlas, rng: np.random.Generator,
               amp: float = 1.0) -> SymTensorField:
    """a_ij = e_i . S(n) . e_j for a random smooth symmetric S."""
    S0 = rng.standard_normal((3, 3)) * amp
    S0 = 0.5 * (S0 + S0.T)
    S1 = rng.standard_normal((3, 3, 3)) * amp * 0.5
    S1 = 0.5 * (S1 + S1.transpose(1, 0, 2))

    def S(n):
        return S0 + np.einsum("uvw,...w->...uv", S1, n)

    return sym_from_r3(atlas, S)


def rotation_map_fn(R: np.ndarray):
    """Sphere self-map n -> R n for a rotation matrix R."""
    R = np.asarray(R, float)

    def f(n):
        return np.einsum("uv,...v->...u", R, n)

    return f


def rotation_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
