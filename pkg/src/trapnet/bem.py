"""Constant-panel collocation boundary elements for electrode structures.

Each triangle carries a uniform surface charge density sigma_j and the
potential is V(r) = 1/(4 pi) sum_j sigma_j int_j dA / |r - r'| (vacuum
permittivity set to one).  Collocation at panel centroids gives a dense
linear system for sigma.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from trapnet.intersection import decompose_theta_x, theta_x_components
from trapnet.multipole import MultipoleField, harmonic_basis, potential as multipole_potential

log = logging.getLogger(__name__)

FOUR_PI = 4.0 * math.pi


class BemError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ElectrodeMesh:
    """Triangulated electrodes with a potential tag per panel (units of V0)."""

    vertices: np.ndarray
    triangles: np.ndarray
    tags: np.ndarray
    names: tuple[str, ...] | None = None  # electrode (material) name per panel

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        t = np.array(self.triangles, dtype=np.int64)
        tags = np.array(self.tags, dtype=float)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("vertices must be (N, 3)")
        if t.ndim != 2 or t.shape[1] != 3 or len(t) == 0:
            raise ValueError("triangles must be a non-empty (M, 3) index array")
        if t.min() < 0 or t.max() >= len(v):
            raise ValueError("triangle index out of range")
        if tags.shape != (len(t),) or not np.all(np.isfinite(tags)):
            raise ValueError("need one finite potential tag per triangle")
        if self.names is not None and len(self.names) != len(t):
            raise ValueError("need one name per triangle")
        for a in (v, t, tags):
            a.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "tags", tags)
        small = np.flatnonzero(self.areas <= 1e-12)
        if small.size:
            raise ValueError(f"degenerate triangles (area <= 1e-12): {small[:10].tolist()}")

    @property
    def corners(self) -> np.ndarray:
        return self.vertices[self.triangles]

    @property
    def n_panels(self) -> int:
        return len(self.triangles)

    @property
    def centroids(self) -> np.ndarray:
        return self.corners.mean(axis=1)

    @property
    def areas(self) -> np.ndarray:
        c = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    @property
    def diameters(self) -> np.ndarray:
        c = self.corners
        edges = np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 1], c[:, 0] - c[:, 2]], axis=1)
        return np.linalg.norm(edges, axis=2).max(axis=1)

    def with_tags(self, tags) -> "ElectrodeMesh":
        return ElectrodeMesh(self.vertices, self.triangles, tags, self.names)

    def nearest_distance(self, point) -> float:
        return float(np.min(point_triangle_distance(np.asarray(point, dtype=float), self.corners)))


def merge_meshes(meshes) -> ElectrodeMesh:
    verts, tris, tags, names = [], [], [], []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        tags.append(m.tags)
        names.extend(m.names if m.names is not None else ("electrode",) * m.n_panels)
        offset += len(m.vertices)
    return ElectrodeMesh(np.vstack(verts), np.vstack(tris), np.concatenate(tags), tuple(names))


def point_triangle_distance(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Distance from one point to each triangle in ``tri`` (M, 3, 3)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n, axis=1)[:, None]
    d = np.einsum("ij,ij->i", p - a, n)
    proj = p - d[:, None] * n
    inside = np.ones(len(tri), dtype=bool)
    for u, v in ((a, b), (b, c), (c, a)):
        inside &= np.einsum("ij,ij->i", np.cross(v - u, proj - u), n) >= 0
    out = np.abs(d)

    def seg(u, v):
        e = v - u
        t = np.clip(np.einsum("ij,ij->i", p - u, e) / np.einsum("ij,ij->i", e, e), 0.0, 1.0)
        return np.linalg.norm(p - (u + t[:, None] * e), axis=1)

    edge = np.minimum(np.minimum(seg(a, b), seg(b, c)), seg(c, a))
    return np.where(inside, out, edge)


def panel_integrals(tri: np.ndarray, r: np.ndarray, gradient: bool = False):
    """Exact single-layer integrals of 1/|r - r'| over triangles.

    ``tri`` is (K, 3, 3) and ``r`` is (K, 3) (one observation point per
    triangle, broadcasting allowed).  Returns phi (K,) and, optionally, the
    gradient of phi with respect to r (K, 3).
    """
    p1, p2, p3 = tri[:, 0], tri[:, 1], tri[:, 2]
    nrm = np.cross(p2 - p1, p3 - p1)
    nrm /= np.linalg.norm(nrm, axis=1)[:, None]
    a, b, c = p1 - r, p2 - r, p3 - r
    la, lb, lc = (np.linalg.norm(x, axis=1) for x in (a, b, c))
    num = np.einsum("ij,ij->i", a, np.cross(b, c))
    den = (la * lb * lc + np.einsum("ij,ij->i", a, b) * lc
           + np.einsum("ij,ij->i", a, c) * lb + np.einsum("ij,ij->i", b, c) * la)
    omega = -2.0 * np.arctan2(num, den)  # signed solid angle, positive on the +normal side
    height = -np.einsum("ij,ij->i", a, nrm)

    phi = -height * omega
    grad = -omega[:, None] * nrm if gradient else None
    for (s, rs), (e, re) in (((a, la), (b, lb)), ((b, lb), (c, lc)), ((c, lc), (a, la))):
        edge = e - s
        length = np.linalg.norm(edge, axis=1)
        lhat = edge / length[:, None]
        u = np.cross(lhat, nrm)
        lm = np.einsum("ij,ij->i", s, lhat)
        lp = np.einsum("ij,ij->i", e, lhat)
        forward = (lp + lm) > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            big = np.where(forward, (re + lp) / (rs + lm), (rs - lm) / (re - lp))
            log_term = np.log(big)
        t = np.einsum("ij,ij->i", s, u)
        phi = phi + t * log_term
        if gradient:
            grad = grad - u * log_term[:, None]
    return (phi, grad) if gradient else phi


@dataclass(frozen=True, eq=False)
class BemSolution:
    mesh: ElectrodeMesh
    sigma: np.ndarray
    residual: float

    @property
    def total_charge(self) -> float:
        return float(self.sigma @ self.mesh.areas)

    def _kernel(self, points: np.ndarray, gradient: bool, chunk: int = 400_000):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        corners = self.mesh.corners
        m = len(corners)
        out_v = np.empty(len(points))
        out_g = np.empty((len(points), 3)) if gradient else None
        per = max(1, chunk // m)
        for i0 in range(0, len(points), per):
            pts = points[i0:i0 + per]
            k = len(pts)
            tri = np.broadcast_to(corners, (k, m, 3, 3)).reshape(-1, 3, 3)
            rr = np.repeat(pts, m, axis=0)
            res = panel_integrals(tri, rr, gradient)
            if gradient:
                phi, g = res
                out_g[i0:i0 + k] = (g.reshape(k, m, 3) * self.sigma[None, :, None]).sum(axis=1) / FOUR_PI
            else:
                phi = res
            out_v[i0:i0 + k] = phi.reshape(k, m) @ self.sigma / FOUR_PI
        return out_v, out_g

    def _check_clearance(self, points, min_distance):
        tree = cKDTree(self.mesh.centroids)
        reach = float(self.mesh.diameters.max())
        corners = self.mesh.corners
        for p in np.atleast_2d(points):
            idx = tree.query_ball_point(p, reach + min_distance)
            if idx and np.min(point_triangle_distance(p, corners[idx])) <= min_distance:
                raise BemError(f"evaluation point {p.tolist()} lies within {min_distance} of a panel")

    def potential(self, points, min_distance: float = 1e-6):
        points = np.asarray(points, dtype=float)
        self._check_clearance(points, min_distance)
        v, _ = self._kernel(points, gradient=False)
        return float(v[0]) if points.ndim == 1 else v

    def field(self, points, min_distance: float = 1e-6) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        self._check_clearance(points, min_distance)
        _, g = self._kernel(points, gradient=True)
        e = -g
        return e[0] if points.ndim == 1 else e


def assemble_matrix(mesh: ElectrodeMesh, far_factor: float = 5.0) -> np.ndarray:
    """Collocation matrix A[i, j] = potential at centroid i of unit density on panel j."""
    cent = mesh.centroids
    areas = mesh.areas
    diam = mesh.diameters
    n = mesh.n_panels
    a = np.empty((n, n))
    block = max(1, 4_000_000 // n)
    for i0 in range(0, n, block):
        diff = cent[i0:i0 + block, None, :] - cent[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        with np.errstate(divide="ignore"):
            a[i0:i0 + block] = areas[None, :] / dist
    tree = cKDTree(cent)
    near_i, near_j = [], []
    for i, nbrs in enumerate(tree.query_ball_point(cent, far_factor * diam.max())):
        nbrs = np.asarray(nbrs)
        keep = nbrs[np.linalg.norm(cent[nbrs] - cent[i], axis=1) < far_factor * diam[nbrs]]
        near_i.append(np.full(len(keep), i))
        near_j.append(keep)
    near_i = np.concatenate(near_i)
    near_j = np.concatenate(near_j)
    corners = mesh.corners
    for k0 in range(0, len(near_i), 500_000):
        ii, jj = near_i[k0:k0 + 500_000], near_j[k0:k0 + 500_000]
        a[ii, jj] = panel_integrals(corners[jj], cent[ii])
    return a / FOUR_PI


def _check_duplicates(mesh: ElectrodeMesh, tol: float = 1e-9) -> None:
    pairs = cKDTree(mesh.centroids).query_pairs(tol, output_type="ndarray")
    if len(pairs):
        i, j = pairs[0]
        raise BemError(f"duplicate panels {int(i)} and {int(j)} make the system singular")


def assemble_and_solve(mesh: ElectrodeMesh, far_factor: float = 5.0, max_panels: int = 8000) -> BemSolution:
    """Solve for the panel charge densities that reproduce the tagged potentials."""
    if mesh.n_panels > max_panels:
        raise BemError(f"{mesh.n_panels} panels exceed the configured maximum {max_panels}")
    _check_duplicates(mesh)
    rhs = mesh.tags.astype(float)
    if not np.any(rhs):
        return BemSolution(mesh, np.zeros(mesh.n_panels), 0.0)
    a = assemble_matrix(mesh, far_factor)
    try:
        sigma = linalg.solve(a, rhs, check_finite=True)
    except linalg.LinAlgError as exc:
        raise BemError(f"collocation matrix is singular: {exc}") from exc
    residual = float(np.linalg.norm(a @ sigma - rhs) / np.linalg.norm(rhs))
    if residual > 1e-8:
        raise BemError(f"solve residual {residual:.2e} exceeds 1e-8")
    return BemSolution(mesh, sigma, residual)


def evaluate_bem_field(sol: BemSolution, r) -> np.ndarray:
    return sol.field(r)


# local multipole fitting

PARITIES = [(px, py, pz) for px in (0, 1) for py in (0, 1) for pz in (0, 1)]
ALLOWED_PARITY = (0, 0, 1)  # even in x and y, odd in z


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    polar = np.arccos(1 - 2 * i / n)
    golden = math.pi * (1 + 5**0.5)
    return np.column_stack([np.cos(golden * i) * np.sin(polar), np.sin(golden * i) * np.sin(polar), np.cos(polar)])


def mirrored_sphere(n: int) -> np.ndarray:
    """At least ``n`` sphere points closed under the three coordinate mirrors.

    Mirror-closed sampling keeps parity classes orthogonal in the fit, so
    symmetric higher-order content cannot alias into forbidden coefficients.
    """
    m = n
    while True:
        pts = fibonacci_sphere(m)
        base = pts[np.all(pts > 1e-9, axis=1)]
        if 8 * len(base) >= n:
            break
        m += 8
    signs = np.array([(sx, sy, sz) for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)], dtype=float)
    return (signs[:, None, :] * base[None, :, :]).reshape(-1, 3)


def _basis_field(order: int, vec: np.ndarray) -> MultipoleField:
    tensors = [None] * 4
    tensors[order - 1] = vec.reshape((3,) * order)
    return MultipoleField(*tensors)


@lru_cache(maxsize=None)
def fit_basis(max_order: int = 4) -> tuple[tuple[str, int, MultipoleField], ...]:
    """Symmetry-adapted harmonic basis as (label, order, field) triples.

    The allowed class uses the potentials z, z(3x^2 - z^2) and -z(3y^2 - z^2)
    directly; every other function is scaled to unit RMS on the unit sphere.
    """
    tx, ty = theta_x_components()
    sphere = fibonacci_sphere(4000)
    out = []
    for k in range(1, max_order + 1):
        for par in PARITIES:
            basis = harmonic_basis(k, par)
            if basis.shape[1] == 0:
                continue
            if par == ALLOWED_PARITY and k == 1:
                out.append(("alpha_H", 1, MultipoleField(dipole=[0.0, 0.0, -1.0])))
                continue
            if par == ALLOWED_PARITY and k == 3:
                out.append(("alpha_X_x", 3, tx))
                out.append(("alpha_X_y", 3, -ty))
                continue
            for col in range(basis.shape[1]):
                f = _basis_field(k, basis[:, col])
                rms = math.sqrt(float(np.mean(multipole_potential(f, sphere) ** 2)))
                out.append((f"forbidden/{k}/{''.join(map(str, par))}/{col}", k, f * (1.0 / rms)))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class MultipoleFit:
    alpha_H: float
    alpha_X_x: float
    alpha_X_y: float
    theta_fit: float | None
    alpha_X: float
    residual: float
    offset: float
    coefficients: dict
    field: MultipoleField

    def forbidden(self) -> dict:
        """Coefficients outside the mirror-x, mirror-y, odd-z class (unit-RMS basis)."""
        return {k: v for k, v in self.coefficients.items() if k.startswith("forbidden/")}

    def max_forbidden(self) -> float:
        vals = list(self.forbidden().values())
        return max(abs(v) for v in vals) if vals else 0.0

    def to_dict(self) -> dict:
        return {
            "alpha_H": self.alpha_H,
            "alpha_X_x": self.alpha_X_x,
            "alpha_X_y": self.alpha_X_y,
            "alpha_X": self.alpha_X,
            "theta_fit_deg": None if self.theta_fit is None else math.degrees(self.theta_fit),
            "residual": self.residual,
            "offset": self.offset,
            "max_forbidden": self.max_forbidden(),
            "multipole": self.field.to_dict(),
        }


def fit_potential_samples(points: np.ndarray, values: np.ndarray, center, max_order: int = 4) -> MultipoleFit:
    """Least-squares fit of constant + harmonic polynomials up to ``max_order``."""
    center = np.asarray(center, dtype=float)
    rel = np.asarray(points, dtype=float) - center
    basis = fit_basis(max_order)
    cols = [np.ones(len(rel))] + [multipole_potential(f, rel) for _, _, f in basis]
    design = np.column_stack(cols)
    if len(rel) < design.shape[1] or np.linalg.matrix_rank(design) < design.shape[1]:
        raise ValueError("rank-deficient fit design; use more sample points")
    coef, *_ = np.linalg.lstsq(design, values, rcond=None)
    misfit = design @ coef - values
    signal = values - np.mean(values)
    residual = float(np.sqrt(np.mean(misfit**2)) / max(np.sqrt(np.mean(signal**2)), 1e-300))
    coefficients = {label: float(c) for (label, _, _), c in zip(basis, coef[1:])}
    total = MultipoleField()
    for (_, _, f), c in zip(basis, coef[1:]):
        total = total + f * float(c)
    dec = decompose_theta_x(total)
    return MultipoleFit(
        alpha_H=coefficients.get("alpha_H", 0.0),
        alpha_X_x=dec.alpha_x,
        alpha_X_y=dec.alpha_y,
        theta_fit=dec.theta,
        alpha_X=dec.alpha,
        residual=residual,
        offset=float(coef[0]),
        coefficients=coefficients,
        field=total,
    )


def fit_multipoles(sol, center=(0.0, 0.0, 0.0), radius: float = 0.2, max_order: int = 4,
                   n_points: int = 256) -> MultipoleFit:
    """Fit the local expansion of ``sol.potential`` on a sphere around ``center``."""
    if n_points < 200:
        raise ValueError("use at least 200 sample points")
    pts = np.asarray(center, dtype=float) + radius * mirrored_sphere(n_points)
    values = np.asarray(sol.potential(pts), dtype=float)
    return fit_potential_samples(pts, values, center, max_order)


# geometry tuning


@dataclass(frozen=True)
class GeometryFamily:
    """One-parameter electrode geometry generator."""

    build: Callable[[float], ElectrodeMesh]
    name: str = "custom"
    param_range: tuple[float, float] = (-math.inf, math.inf)
    symmetric: bool = True

    def __call__(self, value: float) -> ElectrodeMesh:
        lo, hi = self.param_range
        if not lo <= value <= hi:
            raise ValueError(f"parameter {value} outside declared range {self.param_range}")
        return self.build(value)


@dataclass(frozen=True, eq=False)
class TuneResult:
    parameter: float
    fit: MultipoleFit
    iterations: int
    history: tuple[tuple[float, float], ...]
    converged: bool
    solution: BemSolution | None = None


def tune_alpha_h(family: GeometryFamily, bracket: tuple[float, float], tol: float = 1e-3,
                 fit_radius: float = 0.2, max_iter: int = 40, far_factor: float = 5.0) -> TuneResult:
    """Bisect the family parameter until |alpha_H| < tol * |alpha_X|."""
    history = []

    def evaluate(value):
        sol = assemble_and_solve(family(value), far_factor=far_factor)
        fit = fit_multipoles(sol, radius=fit_radius)
        history.append((float(value), fit.alpha_H))
        log.info("parameter %.6f: alpha_H = %.3e, alpha_X = %.4f", value, fit.alpha_H, fit.alpha_X)
        return sol, fit

    lo, hi = map(float, bracket)
    sol_lo, fit_lo = evaluate(lo)
    sol_hi, fit_hi = evaluate(hi)
    if np.sign(fit_lo.alpha_H) == np.sign(fit_hi.alpha_H):
        raise BemError(
            f"no sign change of alpha_H in bracket: alpha_H({lo}) = {fit_lo.alpha_H:.3e}, "
            f"alpha_H({hi}) = {fit_hi.alpha_H:.3e}"
        )
    for sol, fit, val in ((sol_lo, fit_lo, lo), (sol_hi, fit_hi, hi)):
        if abs(fit.alpha_H) < tol * abs(fit.alpha_X):
            return TuneResult(val, fit, 0, tuple(history), True, sol)
    sign_lo = np.sign(fit_lo.alpha_H)
    best = None
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        sol, fit = evaluate(mid)
        best = (mid, fit, sol)
        if abs(fit.alpha_H) < tol * abs(fit.alpha_X):
            return TuneResult(mid, fit, it, tuple(history), True, sol)
        if np.sign(fit.alpha_H) == sign_lo:
            lo = mid
        else:
            hi = mid
        ordered = sorted(history)
        signs = [np.sign(a) for _, a in ordered]
        if sum(1 for s0, s1 in zip(signs, signs[1:]) if s0 != s1) > 1:
            warnings.warn("alpha_H is not monotone in the tuning parameter")
    mid, fit, sol = best
    warnings.warn("bisection did not reach the alpha_H tolerance")
    return TuneResult(mid, fit, max_iter, tuple(history), False, sol)
