"""Cartesian multipole potentials around a point.

The field is stored as the coefficients of its Taylor expansion

    E_i(r) = d_i + q_ij r_j + 1/2 h_ijk r_j r_k + 1/6 o_ijkl r_j r_k r_l

with ``E = -grad V``.  Coefficient tensors of order k are the (k-1)-th
derivatives of E, so a valid tensor is fully symmetric with vanishing
partial traces.  Lengths are in units of the ion-electrode distance d and
potentials in units of the RF amplitude V0.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

ORDERS = (1, 2, 3, 4)
NAMES = {1: "dipole", 2: "quadrupole", 3: "hexapole", 4: "octupole"}

# harmonic polynomial of degree k has 2k+1 free coefficients
FREE_PARAMETERS = {1: 3, 2: 5, 3: 7, 4: 9}


def _constraint_rows(rank: int, parity: tuple[int, int, int] | None = None) -> np.ndarray:
    """Rows of the linear conditions a valid rank-``rank`` E-tensor satisfies.

    With ``parity`` given, entries whose index counts have a different
    (x, y, z) parity are additionally forced to zero.
    """
    size = 3**rank
    shape = (3,) * rank
    rows = []
    for idx in itertools.product(range(3), repeat=rank):
        key = tuple(sorted(idx))
        if idx != key:
            row = np.zeros(size)
            row[np.ravel_multi_index(idx, shape)] += 1.0
            row[np.ravel_multi_index(key, shape)] -= 1.0
            rows.append(row)
        if parity is not None:
            counts = tuple(idx.count(a) % 2 for a in range(3))
            if counts != tuple(parity):
                row = np.zeros(size)
                row[np.ravel_multi_index(idx, shape)] = 1.0
                rows.append(row)
    if rank >= 2:
        for rest in itertools.product(range(3), repeat=rank - 2):
            row = np.zeros(size)
            for i in range(3):
                row[np.ravel_multi_index((i, i) + rest, shape)] = 1.0
            rows.append(row)
    if not rows:
        return np.zeros((0, size))
    return np.array(rows)


def _nullspace(matrix: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    ncol = matrix.shape[1]
    if matrix.shape[0] == 0:
        return np.eye(ncol)
    _, sv, vt = np.linalg.svd(matrix, full_matrices=True)
    rank = int(np.sum(sv > rtol * sv[0])) if sv.size and sv[0] > 0 else 0
    return vt[rank:].T


@lru_cache(maxsize=None)
def harmonic_basis(rank: int, parity: tuple[int, int, int] | None = None) -> np.ndarray:
    """Orthonormal basis (columns, flattened) of valid rank-``rank`` tensors."""
    basis = _nullspace(_constraint_rows(rank, parity))
    basis.setflags(write=False)
    return basis


def constraint_dimension(rank: int) -> int:
    """Number of free parameters left by the symmetry and trace conditions."""
    return harmonic_basis(rank).shape[1]


def symmetrize_detrace(t, order: int) -> np.ndarray:
    """Orthogonal projection of a raw tensor onto the valid tensors of ``order``.

    Idempotent; valid tensors are its fixed points.
    """
    t = np.asarray(t, dtype=float)
    if t.shape != (3,) * order:
        raise ValueError(f"expected a tensor of shape {(3,) * order}, got {t.shape}")
    basis = harmonic_basis(order)
    return (basis @ (basis.T @ t.ravel())).reshape(t.shape)


def tensor_violation(t: np.ndarray) -> float:
    """Largest absolute symmetry or trace violation of an E-tensor."""
    t = np.asarray(t, dtype=float)
    rows = _constraint_rows(t.ndim)
    if rows.shape[0] == 0:
        return 0.0
    return float(np.max(np.abs(rows @ t.ravel())))


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MultipoleField:
    """Expansion coefficients of the RF field amplitude around the origin.

    Absent orders are stored as zero tensors.
    """

    dipole: np.ndarray | None = None
    quadrupole: np.ndarray | None = None
    hexapole: np.ndarray | None = None
    octupole: np.ndarray | None = None

    def __post_init__(self):
        for order in ORDERS:
            name = NAMES[order]
            value = getattr(self, name)
            value = np.zeros((3,) * order) if value is None else value
            value = _frozen(value)
            if value.shape != (3,) * order:
                raise ValueError(f"{name} must have shape {(3,) * order}, got {value.shape}")
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, value)

    def tensor(self, order: int) -> np.ndarray:
        return getattr(self, NAMES[order])

    @property
    def tensors(self) -> tuple[np.ndarray, ...]:
        return tuple(self.tensor(k) for k in ORDERS)

    def is_valid(self, atol: float = 1e-10) -> bool:
        scale = max(1.0, max(float(np.max(np.abs(t))) for t in self.tensors))
        return all(tensor_violation(t) <= atol * scale for t in self.tensors)

    def max_order(self) -> int:
        nonzero = [k for k in ORDERS if np.any(self.tensor(k))]
        return max(nonzero) if nonzero else 0

    def __add__(self, other: "MultipoleField") -> "MultipoleField":
        return MultipoleField(*(a + b for a, b in zip(self.tensors, other.tensors)))

    def __neg__(self) -> "MultipoleField":
        return MultipoleField(*(-a for a in self.tensors))

    def __sub__(self, other: "MultipoleField") -> "MultipoleField":
        return self + (-other)

    def __mul__(self, c: float) -> "MultipoleField":
        return MultipoleField(*(c * a for a in self.tensors))

    __rmul__ = __mul__

    def allclose(self, other: "MultipoleField", atol: float = 1e-12) -> bool:
        return all(np.allclose(a, b, rtol=0, atol=atol) for a, b in zip(self.tensors, other.tensors))

    def as_vector(self, orders=ORDERS) -> np.ndarray:
        return np.concatenate([self.tensor(k).ravel() for k in orders])

    @classmethod
    def from_vector(cls, vec, orders=ORDERS) -> "MultipoleField":
        vec = np.asarray(vec, dtype=float)
        parts = {}
        pos = 0
        for k in orders:
            n = 3**k
            parts[NAMES[k]] = vec[pos:pos + n].reshape((3,) * k)
            pos += n
        if pos != vec.size:
            raise ValueError(f"vector of length {vec.size} does not match orders {orders}")
        return cls(**parts)

    @classmethod
    def from_polynomial(cls, coefficients: Mapping[tuple[int, int, int], float]) -> "MultipoleField":
        """Field of a potential given as ``{(a, b, c): coeff}`` for x^a y^b z^c.

        Monomials of total degree 1..4 are accepted; the potential is taken as
        given, so it should be harmonic for the result to be physical.
        """
        tensors = {k: np.zeros((3,) * k) for k in ORDERS}
        for (a, b, c), coeff in coefficients.items():
            k = a + b + c
            if k not in tensors:
                raise ValueError(f"monomial degree {k} outside 1..4")
            weight = math.factorial(a) * math.factorial(b) * math.factorial(c)
            for idx in itertools.product(range(3), repeat=k):
                if (idx.count(0), idx.count(1), idx.count(2)) == (a, b, c):
                    tensors[k][idx] -= coeff * weight
        return cls(*(tensors[k] for k in ORDERS))

    def to_dict(self) -> dict:
        return {NAMES[k]: self.tensor(k).tolist() for k in ORDERS if np.any(self.tensor(k))}

    @classmethod
    def from_dict(cls, data: Mapping) -> "MultipoleField":
        unknown = set(data) - set(NAMES.values())
        if unknown:
            raise ValueError(f"unknown multipole keys: {sorted(unknown)}")
        return cls(**{name: data.get(name) for name in NAMES.values()})


@dataclass(frozen=True)
class PseudopotentialScale:
    """Prefactor Q^2 / (4 M Omega^2) converting |E|^2 into an energy."""

    prefactor: float = 1.0

    def __post_init__(self):
        if not (self.prefactor > 0 and math.isfinite(self.prefactor)):
            raise ValueError("pseudopotential prefactor must be positive and finite")

    @classmethod
    def from_physical(cls, charge: float, mass: float, omega: float) -> "PseudopotentialScale":
        return cls(charge**2 / (4.0 * mass * omega**2))


def _points(r) -> tuple[np.ndarray, bool]:
    r = np.asarray(r, dtype=float)
    single = r.ndim == 1
    r = np.atleast_2d(r)
    if r.shape[-1] != 3:
        raise ValueError("points must have 3 components")
    return r, single


def potential(f: MultipoleField, r):
    """Potential V with ``field == -grad V``; accepts one point or an (N, 3) array."""
    r, single = _points(r)
    d, q, h, o = f.tensors
    v = (
        r @ d
        + 0.5 * np.einsum("ij,ni,nj->n", q, r, r)
        + np.einsum("ijk,ni,nj,nk->n", h, r, r, r) / 6.0
        + np.einsum("ijkl,ni,nj,nk,nl->n", o, r, r, r, r) / 24.0
    )
    v = -v
    return float(v[0]) if single else v


def field(f: MultipoleField, r) -> np.ndarray:
    """Field amplitude E(r); shape (3,) for one point, (N, 3) for many."""
    r, single = _points(r)
    d, q, h, o = f.tensors
    e = (
        d[None, :]
        + r @ q.T
        + 0.5 * np.einsum("ijk,nj,nk->ni", h, r, r)
        + np.einsum("ijkl,nj,nk,nl->ni", o, r, r, r) / 6.0
    )
    return e[0] if single else e


def jacobian(f: MultipoleField, r) -> np.ndarray:
    """dE_i/dr_j; shape (3, 3) for one point, (N, 3, 3) for many."""
    r, single = _points(r)
    _, q, h, o = f.tensors
    jac = (
        q[None, :, :]
        + np.einsum("ijk,nk->nij", h, r)
        + 0.5 * np.einsum("ijkl,nk,nl->nij", o, r, r)
    )
    return jac[0] if single else jac


def pseudopotential(f: MultipoleField, r, s: PseudopotentialScale | None = None):
    """Ponderomotive potential prefactor * |E(r)|^2."""
    s = s or PseudopotentialScale()
    e = field(f, r)
    u = s.prefactor * np.sum(e * e, axis=-1)
    return float(u) if np.ndim(u) == 0 else u


def laplacian_residual(f: MultipoleField, r, h: float = 1e-3) -> float:
    """Seven-point finite-difference Laplacian of the potential at ``r``."""
    if h <= 0:
        raise ValueError("step must be positive")
    r = np.asarray(r, dtype=float)
    offsets = np.vstack([np.eye(3) * h, -np.eye(3) * h])
    total = np.sum(potential(f, r + offsets)) - 6.0 * potential(f, r)
    return float(total / h**2)


def gradient_fd(f: MultipoleField, r, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of the potential."""
    r = np.asarray(r, dtype=float)
    steps = np.eye(3) * h
    return (potential(f, r + steps) - potential(f, r - steps)) / (2 * h)
