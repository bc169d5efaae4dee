"""Ponderomotive landscape of ideal and perturbed hexapole intersections."""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import optimize
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from trapnet.intersection import theta_x
from trapnet.multipole import MultipoleField, field, jacobian, potential

log = logging.getLogger(__name__)

RIGHT_ANGLE = math.pi / 4


class Topology(str, enum.Enum):
    IDEAL = "Ideal"
    DOUBLE_JUNCTION = "DoubleJunction"
    DISJOINT = "Disjoint"
    DEGENERATE_RIGHT_ANGLE = "DegenerateRightAngle"
    DEGENERATE_PERTURBED = "DegeneratePerturbed"
    UNCLASSIFIED = "Unclassified"


def _is_right_angle(theta: float) -> bool:
    return abs(theta - RIGHT_ANGLE) < 1e-12


@dataclass(frozen=True)
class PerturbedIntersection:
    """Potential alpha_H z + alpha_X Theta_X(theta)."""

    alpha_H: float
    alpha_X: float
    theta: float

    def __post_init__(self):
        if self.alpha_X == 0:
            raise ValueError("alpha_X must be nonzero")
        if not (0.0 < self.theta <= RIGHT_ANGLE + 1e-12):
            raise ValueError("half-angle must satisfy 0 < theta <= pi/4")

    @property
    def ratio(self) -> float:
        return self.alpha_H / self.alpha_X

    @property
    def length_scale(self) -> float:
        """sqrt(|alpha_H| / 3|alpha_X|)."""
        return math.sqrt(abs(self.alpha_H) / (3.0 * abs(self.alpha_X)))

    def field(self) -> MultipoleField:
        return MultipoleField(dipole=[0.0, 0.0, -self.alpha_H]) + theta_x(self.theta, self.alpha_X)


def grad_theta_x(p: PerturbedIntersection, r) -> np.ndarray:
    """Closed-form grad V for V = alpha_H z + alpha_X Theta_X; the field is its negative."""
    r = np.asarray(r, dtype=float)
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    s2, c2 = math.sin(p.theta) ** 2, math.cos(p.theta) ** 2
    a = 3.0 * p.alpha_X
    g = np.stack(
        [
            a * 2 * x * z * s2,
            -a * 2 * y * z * c2,
            a * ((z * z - y * y) * c2 - (z * z - x * x) * s2) + p.alpha_H,
        ],
        axis=-1,
    )
    return g


def grad_squared(p: PerturbedIntersection, r) -> np.ndarray:
    g = grad_theta_x(p, r)
    return np.sum(g * g, axis=-1)


@dataclass(frozen=True, eq=False)
class TopologyReport:
    topology: Topology
    zeros: list[np.ndarray]  # isolated zeros in the y-z plane
    junction_points: list[np.ndarray]
    zero_line_directions: list[np.ndarray] = dc_field(default_factory=list)


def classify_topology(p: PerturbedIntersection) -> TopologyReport:
    """Topology class of the perturbed intersection plus its analytic markers."""
    c, s = math.cos(p.theta), math.sin(p.theta)
    if p.alpha_H == 0:
        dirs = [np.array([c, s, 0.0]), np.array([c, -s, 0.0])]
        if _is_right_angle(p.theta):
            dirs.append(np.array([0.0, 0.0, 1.0]))
            return TopologyReport(Topology.DEGENERATE_RIGHT_ANGLE, [], [np.zeros(3)], dirs)
        return TopologyReport(Topology.IDEAL, [], [np.zeros(3)], dirs)

    ell = p.length_scale
    if p.ratio > 0:
        y0 = ell / c
        zeros = [np.array([0.0, y0, 0.0]), np.array([0.0, -y0, 0.0])]
        return TopologyReport(Topology.DISJOINT, zeros, [])

    x0 = ell / s
    junctions = [np.array([x0, 0.0, 0.0]), np.array([-x0, 0.0, 0.0])]
    if _is_right_angle(p.theta):
        return TopologyReport(Topology.DEGENERATE_PERTURBED, [], junctions)
    z0 = ell * math.sqrt(1.0 / math.cos(2 * p.theta))
    zeros = [np.array([0.0, 0.0, z0]), np.array([0.0, 0.0, -z0])]
    return TopologyReport(Topology.DOUBLE_JUNCTION, zeros, junctions)


@dataclass(frozen=True, eq=False)
class Saddle:
    position: np.ndarray
    height: float
    numeric_position: np.ndarray | None = None
    numeric_height: float | None = None


def _valley_point(p: PerturbedIntersection, phi: float, sx: float, sz: float, rmax: float):
    """Minimizer of |grad V|^2 along the ray at polar angle phi in the x-z plane."""
    d = np.array([sx * math.cos(phi), 0.0, sz * math.sin(phi)])
    res = optimize.minimize_scalar(
        lambda rho: float(grad_squared(p, rho * d)),
        bounds=(0.0, rmax),
        method="bounded",
        options={"xatol": 1e-14 * max(rmax, 1.0)},
    )
    return res.x * d, float(res.fun)


def connecting_path(p: PerturbedIntersection, sx: float = 1.0, sz: float = 1.0, n: int = 101) -> np.ndarray:
    """Valley floor in the x-z plane from an x-axis junction to a z-axis zero."""
    rmax = 4.0 * p.length_scale / math.sin(p.theta)
    return np.array([_valley_point(p, phi, sx, sz, rmax)[0] for phi in np.linspace(0, math.pi / 2, n)])


def barrier_analysis(p: PerturbedIntersection, verify: bool = True) -> list[Saddle]:
    """Barriers on the paths joining the perturbed intersection's entries.

    Each analytic saddle is cross-checked by maximizing |grad V|^2 along the
    connecting path (valley floor or the y axis) with a bounded scalar search.
    """
    if p.alpha_H == 0:
        raise ValueError("barrier analysis needs alpha_H != 0")
    c, s = math.cos(p.theta), math.sin(p.theta)
    a2 = p.alpha_H**2
    if p.ratio > 0:
        saddle = Saddle(np.zeros(3), a2)
        if not verify:
            return [saddle]
        y0 = p.length_scale / c
        res = optimize.minimize_scalar(
            lambda y: -float(grad_squared(p, np.array([0.0, y, 0.0]))),
            bounds=(-y0, y0),
            method="bounded",
            options={"xatol": 1e-12 * y0},
        )
        return [Saddle(np.zeros(3), a2, np.array([0.0, res.x, 0.0]), -float(res.fun))]

    if _is_right_angle(p.theta):
        raise ValueError("degenerate saddle geometry at theta = pi/4 with alpha_H/alpha_X < 0")
    ell = math.sqrt(abs(p.alpha_H) / (6.0 * abs(p.alpha_X)))
    xb = ell * math.sqrt(1 / s**2 - 1 / c**2)
    zb = ell / c
    height = a2 * math.tan(p.theta) ** 2
    rmax = 4.0 * p.length_scale / s
    out = []
    for sx in (1.0, -1.0):
        for sz in (1.0, -1.0):
            pos = np.array([sx * xb, 0.0, sz * zb])
            if not verify:
                out.append(Saddle(pos, height))
                continue
            res = optimize.minimize_scalar(
                lambda phi: -_valley_point(p, phi, sx, sz, rmax)[1],
                bounds=(0.0, math.pi / 2),
                method="bounded",
                options={"xatol": 1e-12},
            )
            npos, nval = _valley_point(p, res.x, sx, sz, rmax)
            out.append(Saddle(pos, height, npos, nval))
    return out


@dataclass(eq=False)
class ZeroLocusReport:
    polylines: list[np.ndarray] = dc_field(default_factory=list)
    junction_points: list[np.ndarray] = dc_field(default_factory=list)
    saddle_points: list[tuple[np.ndarray, float]] = dc_field(default_factory=list)
    topology: Topology = Topology.UNCLASSIFIED
    isolated_zeros: list[np.ndarray] = dc_field(default_factory=list)
    connecting_paths: list[np.ndarray] = dc_field(default_factory=list)
    failures: list[str] = dc_field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "topology": self.topology.value,
            "junction_points": [np.asarray(j).tolist() for j in self.junction_points],
            "isolated_zeros": [np.asarray(z).tolist() for z in self.isolated_zeros],
            "saddle_points": [{"position": np.asarray(pt).tolist(), "height": h} for pt, h in self.saddle_points],
            "n_polylines": len(self.polylines),
            "polyline_lengths": [len(pl) for pl in self.polylines],
            "failures": list(self.failures),
        }


def _coefficient_scale(f: MultipoleField) -> float:
    return max(float(np.max(np.abs(t))) for t in f.tensors) or 1.0


def _correct(f: MultipoleField, r: np.ndarray, t: np.ndarray, tol: float, max_iter: int = 40):
    """Newton corrector for E = 0 restricted to the plane through r normal to t."""
    for _ in range(max_iter):
        e = field(f, r)
        if np.linalg.norm(e) < tol:
            return r, True
        a = np.vstack([jacobian(f, r), t])
        dr = np.linalg.lstsq(a, np.append(-e, 0.0), rcond=None)[0]
        r = r + dr
        if not np.all(np.isfinite(r)):
            return r, False
    return r, bool(np.linalg.norm(field(f, r)) < tol)


def _newton_zero(f: MultipoleField, r: np.ndarray, tol: float, max_iter: int = 60):
    """Minimum-norm Gauss-Newton iteration onto the zero set."""
    for _ in range(max_iter):
        e = field(f, r)
        if np.linalg.norm(e) < tol:
            return r, True
        dr = np.linalg.lstsq(jacobian(f, r), -e, rcond=1e-12)[0]
        if not np.any(dr):
            break
        r = r + dr
    return r, bool(np.linalg.norm(field(f, r)) < tol)


def _tangent(f: MultipoleField, r: np.ndarray, prev: np.ndarray | None, degenerate: float):
    _, sv, vt = np.linalg.svd(jacobian(f, r))
    if sv[1] < degenerate and prev is not None:
        return prev, True
    t = vt[-1]
    if prev is not None and t @ prev < 0:
        t = -t
    return t, sv[1] < degenerate


def _continue(f, r0, t0, step, tol, box, max_points, degenerate):
    pts = [r0]
    r, t, h = r0, t0, step
    min_step = step * 1e-4
    while len(pts) < max_points:
        r_new, ok = _correct(f, r + h * t, t, tol)
        if not ok or np.linalg.norm(r_new - r) > 2.0 * h:
            h *= 0.5
            if h < min_step:
                return np.array(pts), "corrector-failure"
            continue
        t_new, _ = _tangent(f, r_new, t, degenerate)
        if t_new @ t < 0.9 and h > min_step:
            h *= 0.5
            continue
        pts.append(r_new)
        r, t = r_new, t_new
        h = min(step, 2.0 * h)
        if np.max(np.abs(r)) > box:
            return np.array(pts), "box"
        if len(pts) > 10 and np.linalg.norm(r - r0) < 0.5 * step:
            return np.array(pts), "closed"
    return np.array(pts), "max-points"


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    golden = math.pi * (1 + 5**0.5)
    return np.column_stack([np.cos(golden * i) * np.sin(phi), np.sin(golden * i) * np.sin(phi), np.cos(phi)])


def _branch_directions(f, r0, radius, tol, n_dirs=2000):
    """Directions of zero branches leaving a rank-deficient zero."""
    dirs = _fibonacci_sphere(n_dirs)
    g = np.linalg.norm(field(f, r0 + radius * dirs), axis=1)
    tree = cKDTree(dirs)
    _, nbrs = tree.query(dirs, k=9)
    minima = [i for i in range(n_dirs) if np.all(g[i] <= g[nbrs[i, 1:]])]
    found = []
    for i in minima:
        r, ok = _correct(f, r0 + radius * dirs[i], dirs[i], tol)
        if not ok:
            continue
        d = r - r0
        n = np.linalg.norm(d)
        if n < 0.5 * radius or n > 2.0 * radius:
            continue
        d = d / n
        if all(d @ other < 0.99 for other in found):
            found.append(d)
    return found


def _near_polyline(point, polylines, dist) -> bool:
    return any(np.min(np.linalg.norm(pl - point, axis=1)) < dist for pl in polylines if len(pl))


def _refine_junction(f, guess, scale):
    def objective(r):
        sv = np.linalg.svd(jacobian(f, r), compute_uv=False)
        return float(np.sum(field(f, r) ** 2) + sv[1] ** 2) / scale**2

    res = optimize.minimize(objective, guess, method="Nelder-Mead",
                            options={"xatol": 1e-12, "fatol": 1e-30, "maxiter": 4000})
    return res.x


def trace_zero_lines(f: MultipoleField, seeds, step: float = 0.01, tol: float | None = None,
                     box: float = 3.0, max_points: int = 20000) -> ZeroLocusReport:
    """Predictor-corrector continuation of the curves where E vanishes.

    Each seed is first pulled onto the zero set.  Regular zeros are traced
    in both directions; rank-deficient zeros (crossings) spawn one trace per
    outgoing branch.  Crossings between traced curves become junctions.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    scale = _coefficient_scale(f)
    tol = tol if tol is not None else 1e-12 * scale
    degenerate = 1e-8 * scale
    report = ZeroLocusReport()
    for seed in np.atleast_2d(np.asarray(seeds, dtype=float)):
        r0, ok = _newton_zero(f, seed, tol)
        if not ok:
            report.failures.append(f"seed {seed.tolist()} did not converge")
            log.info("seed %s did not converge", seed)
            continue
        if _near_polyline(r0, report.polylines, step):
            continue
        sv = np.linalg.svd(jacobian(f, r0), compute_uv=False)
        if sv[1] < degenerate:
            if not any(np.linalg.norm(r0 - j) < step for j in report.junction_points):
                report.junction_points.append(r0)
            for d in _branch_directions(f, r0, step, tol):
                start = r0 + step * d
                if _near_polyline(start, report.polylines, 0.5 * step):
                    continue
                start, _ = _correct(f, start, d, tol)
                pts, why = _continue(f, start, d, step, tol, box, max_points, degenerate)
                report.polylines.append(np.vstack([r0, pts]))
            continue
        t0, _ = _tangent(f, r0, None, degenerate)
        fwd, why = _continue(f, r0, t0, step, tol, box, max_points, degenerate)
        if why == "closed":
            report.polylines.append(fwd)
            continue
        bwd, _ = _continue(f, r0, -t0, step, tol, box, max_points, degenerate)
        report.polylines.append(np.vstack([bwd[::-1], fwd[1:]]))

    # crossings between distinct traced curves
    for i in range(len(report.polylines)):
        for j in range(i + 1, len(report.polylines)):
            a, b = report.polylines[i], report.polylines[j]
            dist, idx = cKDTree(b).query(a)
            k = int(np.argmin(dist))
            if dist[k] < 0.75 * step:
                guess = 0.5 * (a[k] + b[idx[k]])
                point = _refine_junction(f, guess, scale)
                if not any(np.linalg.norm(point - jp) < step for jp in report.junction_points):
                    report.junction_points.append(point)
    return report


def analyze_intersection(p: PerturbedIntersection, box: float = 1.5, step: float = 0.01) -> ZeroLocusReport:
    """Zero lines, junctions, isolated zeros, and barriers of a perturbed intersection."""
    f = p.field()
    topo = classify_topology(p)
    c, s = math.cos(p.theta), math.sin(p.theta)
    if topo.topology in (Topology.IDEAL, Topology.DEGENERATE_RIGHT_ANGLE):
        seeds = [0.5 * box * d for d in topo.zero_line_directions]
    elif topo.topology is Topology.DISJOINT:
        seeds = topo.zeros
    else:
        seeds = topo.junction_points
    report = trace_zero_lines(f, seeds, step=step, box=box)
    report.topology = topo.topology
    if topo.topology in (Topology.IDEAL, Topology.DEGENERATE_RIGHT_ANGLE):
        if not report.junction_points:
            report.junction_points.append(np.zeros(3))
        return report

    scale = _coefficient_scale(f)
    report.junction_points = [ _newton_zero(f, j, 1e-14 * scale)[0] for j in topo.junction_points]
    report.isolated_zeros = [_newton_zero(f, z, 1e-14 * scale)[0] for z in topo.zeros]
    if topo.topology is Topology.DOUBLE_JUNCTION:
        for sx in (1.0, -1.0):
            for sz in (1.0, -1.0):
                report.connecting_paths.append(connecting_path(p, sx, sz))
    elif topo.topology is Topology.DISJOINT:
        y0 = topo.zeros[0][1]
        ys = np.linspace(-y0, y0, 101)
        report.connecting_paths.append(np.column_stack([np.zeros_like(ys), ys, np.zeros_like(ys)]))
    if topo.topology is not Topology.DEGENERATE_PERTURBED:
        report.saddle_points = [(sd.position, sd.height) for sd in barrier_analysis(p, verify=False)]
    return report


# grid sampling and isosurfaces


def _evaluate_field(source, points: np.ndarray) -> np.ndarray:
    if isinstance(source, MultipoleField):
        return field(source, points)
    return source.field(points)


def _evaluate_potential(source, points: np.ndarray) -> np.ndarray:
    if isinstance(source, MultipoleField):
        return potential(source, points)
    return source.potential(points)


@dataclass(frozen=True, eq=False)
class GridSampling:
    """|E|^2 on a corner-sampled regular grid; ``values[ix, iy, iz]``."""

    axes: tuple[np.ndarray, np.ndarray, np.ndarray]
    values: np.ndarray

    def __post_init__(self):
        if any(len(a) < 2 for a in self.axes):
            raise ValueError("grid needs at least 2 samples per axis")
        if self.values.shape != tuple(len(a) for a in self.axes):
            raise ValueError("values do not match grid axes")

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(float(a[1] - a[0]) for a in self.axes)

    @property
    def origin(self) -> np.ndarray:
        return np.array([a[0] for a in self.axes])

    def points(self) -> np.ndarray:
        """All grid points with x varying fastest."""
        z, y, x = np.meshgrid(self.axes[2], self.axes[1], self.axes[0], indexing="ij")
        return np.column_stack([x.ravel(), y.ravel(), z.ravel()])

    def flat_values(self) -> np.ndarray:
        return self.values.ravel(order="F")


def _box_axes(box, resolution):
    if np.isscalar(box):
        box = [(-float(box), float(box))] * 3
    res = [int(resolution)] * 3 if np.isscalar(resolution) else [int(n) for n in resolution]
    if min(res) < 2:
        raise ValueError("resolution must be at least 2 per axis")
    return tuple(np.linspace(lo, hi, n) for (lo, hi), n in zip(box, res))


def sample_pseudopotential(source, box=1.0, resolution=51, chunk: int = 400_000) -> GridSampling:
    """Sample |E|^2 of a multipole field (or any object with ``.field``) on a grid."""
    axes = _box_axes(box, resolution)
    shape = tuple(len(a) for a in axes)
    values = np.empty(shape)
    x, y = np.meshgrid(axes[0], axes[1], indexing="ij")
    per_slab = max(1, chunk // (shape[0] * shape[1]))
    for k0 in range(0, shape[2], per_slab):
        zs = axes[2][k0:k0 + per_slab]
        pts = np.empty((shape[0], shape[1], len(zs), 3))
        pts[..., 0] = x[..., None]
        pts[..., 1] = y[..., None]
        pts[..., 2] = zs[None, None, :]
        e = _evaluate_field(source, pts.reshape(-1, 3))
        values[:, :, k0:k0 + len(zs)] = np.sum(e * e, axis=1).reshape(shape[0], shape[1], len(zs))
    return GridSampling(axes, values)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def to_obj(self) -> str:
        lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in self.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.faces]
        return "\n".join(lines) + "\n"


def extract_isosurface(g: GridSampling, level: float) -> TriangleMesh:
    """Marching-cubes isosurface |E|^2 = level with shared vertices."""
    from skimage.measure import marching_cubes

    if level <= 0:
        raise ValueError("isosurface level must be positive")
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    lo, hi = float(np.min(g.values)), float(np.max(g.values))
    if not lo < level < hi:
        warnings.warn(f"level {level:g} outside sampled range [{lo:g}, {hi:g}]; empty mesh")
        return empty
    verts, faces, _, _ = marching_cubes(g.values, level, spacing=g.spacing, allow_degenerate=False)
    return TriangleMesh(verts + g.origin, faces.astype(int))


def boundary_loops(mesh: TriangleMesh) -> int:
    """Number of closed boundary curves (open edges) of a triangle mesh."""
    if mesh.is_empty:
        return 0
    f = mesh.faces
    edges = np.sort(np.vstack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    open_edges = uniq[counts == 1]
    if len(open_edges) == 0:
        return 0
    nodes, inv = np.unique(open_edges, return_inverse=True)
    inv = inv.reshape(-1, 2)
    adj = coo_matrix((np.ones(len(inv)), (inv[:, 0], inv[:, 1])), shape=(len(nodes), len(nodes)))
    n, _ = connected_components(adj, directed=False)
    return int(n)


@dataclass(frozen=True)
class SymmetryReport:
    mirror_x: bool
    mirror_y: bool
    antisymmetric_z: bool
    in_plane_z_directed: bool | None
    max_deviation: dict

    @property
    def passes(self) -> bool:
        return self.mirror_x and self.mirror_y and self.antisymmetric_z and bool(self.in_plane_z_directed)


def symmetry_check(source, n_samples: int = 64, radius: float = 1.0, rtol: float = 1e-9,
                   seed: int = 0) -> SymmetryReport:
    """Check V even in x and y, odd in z, and E along z in the z = 0 plane."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-radius, radius, size=(n_samples, 3))
    v = _evaluate_potential(source, pts)
    scale = max(float(np.max(np.abs(v))), 1e-300)
    dev = {
        "mirror_x": float(np.max(np.abs(_evaluate_potential(source, pts * [-1, 1, 1]) - v))) / scale,
        "mirror_y": float(np.max(np.abs(_evaluate_potential(source, pts * [1, -1, 1]) - v))) / scale,
        "antisymmetric_z": float(np.max(np.abs(_evaluate_potential(source, pts * [1, 1, -1]) + v))) / scale,
    }
    ok = {k: dev[k] <= rtol for k in dev}
    in_plane = None
    if all(ok.values()):
        plane = pts.copy()
        plane[:, 2] = 0.0
        e = _evaluate_field(source, plane)
        escale = max(float(np.max(np.abs(_evaluate_field(source, pts)))), 1e-300)
        dev["in_plane_xy"] = float(np.max(np.abs(e[:, :2]))) / escale
        in_plane = dev["in_plane_xy"] <= max(rtol, 1e-12)
    return SymmetryReport(ok["mirror_x"], ok["mirror_y"], ok["antisymmetric_z"], in_plane, dev)
