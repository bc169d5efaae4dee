"""Admissible multipole fields for zero-field path intersections.

The condition "E vanishes along both paths" is expanded order by order in
the path length s and stacked with the Maxwell (symmetry and trace)
conditions into one linear system over the dense tensor entries.  Its
nullspace is the set of admissible fields.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from trapnet.multipole import ORDERS, MultipoleField, _constraint_rows, field

RANK_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class PathCurve:
    """Space curve through the origin, gamma(s) = sum_n coeffs[n-1] s^n.

    ``exact`` marks curves whose series terminates (straight lines), so
    that compositions are valid to any order in s.
    """

    coeffs: np.ndarray
    exact: bool = False
    atol: float = 1e-9

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.ndim != 2 or c.shape[1] != 3 or c.shape[0] < 1:
            raise ValueError("coeffs must be an (N, 3) array with N >= 1")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        if abs(np.linalg.norm(c[0]) - 1.0) > self.atol:
            raise ValueError("tangent must be a unit vector (arc-length parametrization)")
        bad = np.abs(self.speed_squared_series()[1:])
        if bad.size and bad.max() > self.atol:
            raise ValueError(f"curve is not arc-length parametrized: |gamma'|^2 - 1 terms {bad}")

    @property
    def order(self) -> int:
        return self.coeffs.shape[0]

    @property
    def tangent(self) -> np.ndarray:
        return self.coeffs[0]

    def speed_squared_series(self) -> np.ndarray:
        """Coefficients of |gamma'(s)|^2 in s that the stored terms determine."""
        n = self.order
        deriv = self.coeffs * np.arange(1, n + 1)[:, None]
        out = np.zeros(n)
        for a in range(n):
            for b in range(n - a):
                out[a + b] += deriv[a] @ deriv[b]
        return out

    def series(self, max_order: int) -> np.ndarray:
        """Coordinate series, shape (3, max_order + 1), constant term zero."""
        out = np.zeros((3, max_order + 1))
        m = min(self.order, max_order)
        out[:, 1:m + 1] = self.coeffs[:m].T
        return out

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        powers = s[..., None] ** np.arange(1, self.order + 1)
        return powers @ self.coeffs


def arc_length_path(tangent, transverse) -> PathCurve:
    """Arc-length curve with given tangent and transverse parts of u^(2..N).

    ``transverse[k]`` is the part of u^(k+2) orthogonal to the tangent; the
    tangential components follow from |gamma'|^2 = 1 order by order.
    """
    t = np.asarray(tangent, dtype=float)
    t = t / np.linalg.norm(t)
    coeffs = [t]
    for n, w in enumerate(transverse, start=2):
        w = np.asarray(w, dtype=float)
        w = w - (w @ t) * t
        # s^(n-1) term: 2 n t.u^(n) + sum_{a,b>=2, a+b=n+1} a b u^(a).u^(b) = 0
        rest = sum(a * (n + 1 - a) * (coeffs[a - 1] @ coeffs[n - a]) for a in range(2, n))
        coeffs.append(w - rest / (2.0 * n) * t)
    return PathCurve(np.array(coeffs))


def straight_x_paths(theta: float) -> tuple[PathCurve, PathCurve]:
    """Straight paths crossing at the origin with half-angle ``theta``."""
    if not (0.0 < theta <= math.pi / 4 + 1e-12):
        raise ValueError("half-angle must satisfy 0 < theta <= pi/4")
    c, s = math.cos(theta), math.sin(theta)
    return PathCurve(np.array([[c, s, 0.0]]), exact=True), PathCurve(np.array([[c, -s, 0.0]]), exact=True)


@dataclass(frozen=True, eq=False)
class IntersectionProblem:
    path1: PathCurve
    path2: PathCurve | None = None
    max_multipole_order: int = 3
    max_s_order: int = 2

    def __post_init__(self):
        if self.max_multipole_order not in ORDERS:
            raise ValueError("max_multipole_order must be between 1 and 4")
        if self.max_s_order < 0:
            raise ValueError("max_s_order must be non-negative")
        if self.path2 is not None:
            n = max(self.path1.order, self.path2.order)
            a, b = self.path1.series(n), self.path2.series(n)
            if np.allclose(a, b, atol=1e-14):
                raise ValueError("paths are identical")

    @property
    def paths(self) -> tuple[PathCurve, ...]:
        return (self.path1,) if self.path2 is None else (self.path1, self.path2)

    @property
    def orders(self) -> tuple[int, ...]:
        return tuple(range(1, self.max_multipole_order + 1))


@dataclass(frozen=True, eq=False)
class ConstraintSystem:
    matrix: np.ndarray
    tags: tuple[str, ...]
    orders: tuple[int, ...]

    @property
    def n_unknowns(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True, eq=False)
class NullspaceResult:
    dimension: int
    basis: np.ndarray  # rows are orthonormal coefficient vectors
    singular_values: np.ndarray
    orders: tuple[int, ...] = dc_field(default=ORDERS)

    def fields(self) -> list[MultipoleField]:
        return [MultipoleField.from_vector(v, self.orders) for v in self.basis]


def _block_offsets(orders) -> dict[int, int]:
    offsets, pos = {}, 0
    for k in orders:
        offsets[k] = pos
        pos += 3**k
    return offsets


def maxwell_system(orders=(1, 2, 3)) -> ConstraintSystem:
    """Symmetry and trace rows only, for the given multipole orders."""
    offsets = _block_offsets(orders)
    n = sum(3**k for k in orders)
    rows, tags = [], []
    for k in orders:
        block = _constraint_rows(k)
        for row in block:
            full = np.zeros(n)
            full[offsets[k]:offsets[k] + 3**k] = row
            rows.append(full)
            nonzero = np.count_nonzero(row)
            tags.append(f"maxwell-{'symmetry' if nonzero == 2 and row.sum() == 0 else 'trace'}/{k}")
    matrix = np.array(rows) if rows else np.zeros((0, n))
    return ConstraintSystem(matrix, tuple(tags), tuple(orders))


def _product_series(series: np.ndarray, idx: tuple[int, ...], m_max: int) -> np.ndarray:
    out = np.zeros(m_max + 1)
    out[0] = 1.0
    for j in idx:
        out = np.convolve(out, series[j])[: m_max + 1]
    return out


def path_rows(path: PathCurve, orders, m_max: int, label: str) -> tuple[np.ndarray, list[str]]:
    """Rows setting the s^m coefficient of each E_i(gamma(s)) to zero, m <= m_max."""
    if not path.exact and m_max > path.order:
        raise ValueError(
            f"s-order {m_max} exceeds the {path.order} stored path coefficients of {label}"
        )
    offsets = _block_offsets(orders)
    n = sum(3**k for k in orders)
    series = path.series(m_max)
    rows = np.zeros((m_max + 1, 3, n))
    for k in orders:
        shape = (3,) * k
        for rest in itertools.product(range(3), repeat=k - 1):
            coeff = _product_series(series, rest, m_max) / math.factorial(k - 1)
            for i in range(3):
                col = offsets[k] + np.ravel_multi_index((i,) + rest, shape)
                rows[:, i, col] += coeff
    tags = [f"{label}/s^{m}/E_{'xyz'[i]}" for m in range(m_max + 1) for i in range(3)]
    return rows.reshape(-1, n), tags


def build_constraints(p: IntersectionProblem) -> ConstraintSystem:
    """Maxwell rows plus order-by-order vanishing of E on every path."""
    base = maxwell_system(p.orders)
    blocks, tags = [base.matrix], list(base.tags)
    for l, path in enumerate(p.paths, start=1):
        rows, row_tags = path_rows(path, p.orders, p.max_s_order, f"path{l}")
        blocks.append(rows)
        tags.extend(row_tags)
    return ConstraintSystem(np.vstack(blocks), tuple(tags), p.orders)


def solve_nullspace(c: ConstraintSystem, rtol: float = RANK_RTOL) -> NullspaceResult:
    """Dimension and orthonormal basis of the admissible coefficient vectors."""
    a = np.asarray(c.matrix, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("constraint matrix has non-finite entries")
    n = a.shape[1]
    if a.shape[0] == 0 or not np.any(a):
        return NullspaceResult(n, np.eye(n), np.zeros(0), c.orders)
    _, sv, vt = np.linalg.svd(a, full_matrices=True)
    rank = int(np.sum(sv > rtol * sv[0]))
    return NullspaceResult(n - rank, vt[rank:], sv, c.orders)


def theta_x(theta: float, alpha: float = 1.0) -> MultipoleField:
    """Hexapole with potential alpha * [sin^2 z(3x^2 - z^2) - cos^2 z(3y^2 - z^2)]."""
    if not (0.0 < theta <= math.pi / 4 + 1e-12):
        raise ValueError("half-angle must satisfy 0 < theta <= pi/4")
    s2, c2 = math.sin(theta) ** 2, math.cos(theta) ** 2
    return MultipoleField.from_polynomial(
        {(2, 0, 1): 3 * alpha * s2, (0, 2, 1): -3 * alpha * c2, (0, 0, 3): alpha * (c2 - s2)}
    )


def theta_x_components() -> tuple[MultipoleField, MultipoleField]:
    """Hexapole guides z(3x^2 - z^2) and z(3y^2 - z^2)."""
    tx = MultipoleField.from_polynomial({(2, 0, 1): 3.0, (0, 0, 3): -1.0})
    ty = MultipoleField.from_polynomial({(0, 2, 1): 3.0, (0, 0, 3): -1.0})
    return tx, ty


def theta_o(alpha: float = 1.0) -> MultipoleField:
    """Octupole z^4 - 3(x^2 + y^2) z^2 + 3 x^2 y^2, zero field on the x and y axes."""
    return MultipoleField.from_polynomial(
        {(0, 0, 4): alpha, (2, 0, 2): -3 * alpha, (0, 2, 2): -3 * alpha, (2, 2, 0): 3 * alpha}
    )


def alignment(a: MultipoleField | np.ndarray, b: MultipoleField | np.ndarray) -> float:
    """|cos| of the angle between two coefficient vectors."""
    va = a.as_vector() if isinstance(a, MultipoleField) else np.asarray(a, dtype=float)
    vb = b.as_vector() if isinstance(b, MultipoleField) else np.asarray(b, dtype=float)
    return float(abs(va @ vb) / (np.linalg.norm(va) * np.linalg.norm(vb)))


@dataclass(frozen=True)
class CotangentialReport:
    M: int
    orthogonality: float  # |u1 . (uM - vM)| / |uM - vM|
    nullspace_dim: int
    full_system_dim: int
    forced_q_zero: bool


def verify_cotangential_quadrupole(path1: PathCurve, path2: PathCurve, tol: float = 1e-9) -> CotangentialReport:
    """Check that two distinct paths sharing a tangent force q = 0."""
    u, v = path1.coeffs, path2.coeffs
    if np.linalg.norm(u[0] - v[0]) > tol:
        raise ValueError("paths are not cotangential; use build_constraints")
    n = max(path1.order, path2.order)
    su, sv = path1.series(n)[:, 1:].T, path2.series(n)[:, 1:].T
    differing = [m for m in range(n) if np.linalg.norm(su[m] - sv[m]) > tol]
    if not differing:
        raise ValueError("paths are identical to the stored order")
    m_idx = differing[0]
    delta = su[m_idx] - sv[m_idx]
    ortho = float(abs(u[0] @ delta) / np.linalg.norm(delta))

    rows = list(_constraint_rows(2))
    for vec in (u[0], delta):
        for i in range(3):
            row = np.zeros((3, 3))
            row[i] = vec
            rows.append(row.ravel())
    null = solve_nullspace(ConstraintSystem(np.array(rows), (), (2,)))

    # full series composition restricted to dipole + quadrupole
    problem = IntersectionProblem(path1, path2, max_multipole_order=2, max_s_order=m_idx + 1)
    full = solve_nullspace(build_constraints(problem))
    return CotangentialReport(
        M=m_idx + 1,
        orthogonality=ortho,
        nullspace_dim=null.dimension,
        full_system_dim=full.dimension,
        forced_q_zero=null.dimension == 0 and ortho < 1e-6,
    )


@dataclass(frozen=True, eq=False)
class LineRestriction:
    direction: np.ndarray
    coefficients: np.ndarray  # (degree + 1, 3), E(s a) = sum_k c_k s^k
    vanishes_on_half_line: bool
    vanishes_on_full_line: bool


def line_restriction(f: MultipoleField, direction, s_range=(0.05, 2.0), n_samples: int = 24,
                     rtol: float = 1e-9) -> LineRestriction:
    """Fit the restriction of E to the half-line s*direction, s in ``s_range``."""
    a = np.asarray(direction, dtype=float)
    a = a / np.linalg.norm(a)
    lo, hi = s_range
    if not 0 <= lo < hi:
        raise ValueError("s_range must satisfy 0 <= lo < hi")
    s = np.linspace(lo, hi, n_samples)
    e = field(f, s[:, None] * a)
    degree = max(f.max_order() - 1, 0)
    coeffs = np.polynomial.polynomial.polyfit(s, e, degree)
    coeffs = np.atleast_2d(coeffs).reshape(degree + 1, 3)
    scale = max(max(float(np.max(np.abs(t))) for t in f.tensors), 1e-300) * max(1.0, hi**3)
    half = float(np.max(np.abs(e))) <= rtol * scale
    t = np.linspace(-hi, hi, 2 * n_samples + 1)
    extended = np.polynomial.polynomial.polyval(t, coeffs.T).T
    direct = field(f, t[:, None] * a)
    full = max(float(np.max(np.abs(extended))), float(np.max(np.abs(direct)))) <= rtol * scale
    return LineRestriction(a, coeffs, half, full)


def verify_no_straight_y(f: MultipoleField, axis_direction, s_range=(0.05, 2.0)) -> bool:
    """True when a zero on the half-line extends to the full line (or there is none)."""
    r = line_restriction(f, axis_direction, s_range)
    return (not r.vanishes_on_half_line) or r.vanishes_on_full_line


def zero_along_paths(f: MultipoleField, paths, s) -> float:
    """Largest |E| sampled along the given paths."""
    s = np.asarray(s, dtype=float)
    return max(float(np.max(np.linalg.norm(field(f, p(s)), axis=1))) for p in paths)


def rotate_path(path: PathCurve, rotation: np.ndarray) -> PathCurve:
    return PathCurve(path.coeffs @ np.asarray(rotation).T, exact=path.exact)


__all__ = [
    "PathCurve",
    "IntersectionProblem",
    "ConstraintSystem",
    "NullspaceResult",
    "CotangentialReport",
    "LineRestriction",
    "arc_length_path",
    "straight_x_paths",
    "build_constraints",
    "maxwell_system",
    "solve_nullspace",
    "theta_x",
    "theta_x_components",
    "theta_o",
    "alignment",
    "verify_cotangential_quadrupole",
    "line_restriction",
    "verify_no_straight_y",
]


@dataclass(frozen=True)
class ThetaXDecomposition:
    """Hexapole content of a field in the x/y-mirror, z-odd symmetry class.

    The potential's allowed hexapole part is written as
    ``alpha_x * z(3x^2 - z^2) - alpha_y * z(3y^2 - z^2)``, so an ideal
    intersection has both coefficients of the same sign and
    ``theta = arctan(sqrt(alpha_x / alpha_y))``.
    """

    alpha_x: float
    alpha_y: float
    alpha: float
    theta: float | None
    forbidden: float  # norm of the hexapole part outside the symmetry class


def decompose_theta_x(f: MultipoleField) -> ThetaXDecomposition:
    tx, ty = theta_x_components()
    basis = np.column_stack([tx.hexapole.ravel(), -ty.hexapole.ravel()])
    h = f.hexapole.ravel()
    coef, *_ = np.linalg.lstsq(basis, h, rcond=None)
    rest = h - basis @ coef
    ax, ay = float(coef[0]), float(coef[1])
    theta = None
    if ay != 0 and ax / ay >= 0:
        theta = math.atan(math.sqrt(ax / ay))
    # |grad| of a unit-coefficient guide tensor has Frobenius norm 12
    return ThetaXDecomposition(ax, ay, ax + ay, theta, float(np.linalg.norm(rest)) / 12.0)
