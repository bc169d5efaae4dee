"""Electrode mesh builders, OBJ I/O, and the reference intersection geometry."""

from __future__ import annotations

import json
import math
from importlib import resources
from pathlib import Path

import numpy as np
import shapely
import shapely.geometry as sg
from shapely import affinity
import triangle

from trapnet.bem import ElectrodeMesh, GeometryFamily, merge_meshes


SNAP = 1e-7  # coordinate grid for planar outlines, d units


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0), tag: float = 1.0,
              name: str = "sphere") -> ElectrodeMesh:
    """Geodesic sphere with 20 * 4**subdivisions outward-oriented panels."""
    g = (1 + 5**0.5) / 2
    verts = [(-1, g, 0), (1, g, 0), (-1, -g, 0), (1, -g, 0), (0, -1, g), (0, 1, g),
             (0, -1, -g), (0, 1, -g), (g, 0, -1), (g, 0, 1), (-g, 0, -1), (-g, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    v = radius * np.array(verts) + np.asarray(center, dtype=float)
    return ElectrodeMesh(v, np.array(faces), np.full(len(faces), float(tag)), (name,) * len(faces))


def flip_orientation(mesh: ElectrodeMesh) -> ElectrodeMesh:
    return ElectrodeMesh(mesh.vertices, mesh.triangles[:, ::-1], mesh.tags, mesh.names)


def planar_mesh(polygon: sg.Polygon, z: float, max_area: float, tag: float, name: str,
                min_angle: float = 28.0) -> ElectrodeMesh:
    """Quality triangulation of a planar polygon (holes allowed) at height z."""
    polygon = shapely.set_precision(polygon, SNAP).simplify(SNAP)
    if polygon.geom_type != "Polygon" or polygon.area <= SNAP:
        raise ValueError(f"cannot mesh a {polygon.geom_type} of area {polygon.area:.3g}")
    polygon = sg.polygon.orient(polygon, 1.0)
    verts, segs, holes = [], [], []
    for ring in [polygon.exterior, *polygon.interiors]:
        pts = np.asarray(ring.coords)[:-1]
        start = len(verts)
        verts.extend(pts.tolist())
        segs.extend([(start + i, start + (i + 1) % len(pts)) for i in range(len(pts))])
    for ring in polygon.interiors:
        holes.append(sg.Polygon(ring).representative_point().coords[0])
    spec = {"vertices": np.array(verts), "segments": np.array(segs)}
    if holes:
        spec["holes"] = np.array(holes)
    out = triangle.triangulate(spec, f"pq{min_angle:g}a{max_area:.6g}Q")
    v2 = out["vertices"]
    v3 = np.column_stack([v2, np.full(len(v2), float(z))])
    tris = out["triangles"]
    return ElectrodeMesh(v3, tris, np.full(len(tris), float(tag)), (name,) * len(tris))


def graded_planar_mesh(polygon: sg.Polygon, z: float, size, tag: float, name: str,
                       min_angle: float = 28.0, max_passes: int = 10) -> ElectrodeMesh:
    """Triangulate a planar polygon with target edge length ``size(xy)``.

    ``size`` maps an (N, 2) array of points to edge lengths; triangles are
    refined until their areas match equilateral triangles of that size.
    """
    polygon = shapely.set_precision(polygon, SNAP).simplify(SNAP)
    if polygon.geom_type != "Polygon" or polygon.area <= SNAP:
        raise ValueError(f"cannot mesh a {polygon.geom_type} of area {polygon.area:.3g}")
    polygon = sg.polygon.orient(polygon, 1.0)
    verts, segs, holes = [], [], []
    for ring in [polygon.exterior, *polygon.interiors]:
        pts = np.asarray(ring.coords)[:-1]
        start = len(verts)
        verts.extend(pts.tolist())
        segs.extend([(start + i, start + (i + 1) % len(pts)) for i in range(len(pts))])
    for ring in polygon.interiors:
        holes.append(sg.Polygon(ring).representative_point().coords[0])
    spec = {"vertices": np.array(verts), "segments": np.array(segs)}
    if holes:
        spec["holes"] = np.array(holes)
    out = triangle.triangulate(spec, f"pq{min_angle:g}Q")
    for _ in range(max_passes):
        tri = out["vertices"][out["triangles"]]
        centroids = tri.mean(axis=1)
        e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
        areas = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        target = (math.sqrt(3) / 4) * np.asarray(size(centroids), dtype=float) ** 2
        if np.all(areas <= 1.5 * target):
            break
        out["triangle_max_area"] = target
        out = triangle.triangulate(out, f"rpq{min_angle:g}aQ")
    v3 = np.column_stack([out["vertices"], np.full(len(out["vertices"]), float(z))])
    tris = out["triangles"]
    return ElectrodeMesh(v3, tris, np.full(len(tris), float(tag)), (name,) * len(tris))


def strip_arm(half_width: float, angle: float, x_start: float, length: float, z: float, n_across: int,
              step, tag: float, name: str) -> ElectrodeMesh:
    """Structured mesh of a straight strip leaving the y axis side at ``x = x_start``.

    The strip runs along (cos angle, sin angle) with |t| <= half_width across it
    and ends at arc length ``length``.  Lateral nodes are cosine-clustered
    toward both edges, where the surface charge is singular; ``step(s)`` sets
    the spacing along the strip.
    """
    c, sn = math.cos(angle), math.sin(angle)
    t = -half_width * np.cos(np.pi * np.arange(n_across + 1) / n_across)
    # along-strip fractions from the step function on the centre line
    s0_mid = x_start / c
    s_nodes = [s0_mid]
    while s_nodes[-1] < length:
        s_nodes.append(min(length, s_nodes[-1] + float(step(s_nodes[-1]))))
    if length - s_nodes[-2] < 0.3 * (s_nodes[-1] - s_nodes[-2]) and len(s_nodes) > 2:
        s_nodes.pop(-2)
    frac = (np.array(s_nodes) - s0_mid) / (length - s0_mid)
    s_start = (x_start + t * sn) / c
    S = s_start[None, :] + frac[:, None] * (length - s_start[None, :])
    T = np.broadcast_to(t[None, :], S.shape)
    xs = S * c - T * sn
    ys = S * sn + T * c
    verts = np.column_stack([xs.ravel(), ys.ravel(), np.full(xs.size, float(z))])
    m = n_across + 1
    tris = []
    for i in range(len(frac) - 1):
        for j in range(n_across):
            a, b, cc, d = i * m + j, (i + 1) * m + j, (i + 1) * m + j + 1, i * m + j + 1
            tris += [(a, b, cc), (a, cc, d)]
    tris = np.array(tris)
    return ElectrodeMesh(verts, tris, np.full(len(tris), float(tag)), (name,) * len(tris))


def mirror(mesh: ElectrodeMesh, axis: int, tag_map=None) -> ElectrodeMesh:
    """Reflect through the plane normal to ``axis``; orientation is restored."""
    v = mesh.vertices.copy()
    v[:, axis] *= -1
    tags = mesh.tags if tag_map is None else np.array([tag_map(t) for t in mesh.tags])
    return ElectrodeMesh(v, mesh.triangles[:, ::-1], tags, mesh.names)


def with_mirror_images(mesh: ElectrodeMesh, axes=(0, 1)) -> ElectrodeMesh:
    out = mesh
    for ax in axes:
        out = merge_meshes([out, mirror(out, ax)])
    return out


# OBJ + JSON sidecar


def write_obj(mesh: ElectrodeMesh, path) -> None:
    names = mesh.names or ("electrode",) * mesh.n_panels
    lines = ["# trapnet electrode mesh"]
    lines += [f"v {x:.12g} {y:.12g} {z:.12g}" for x, y, z in mesh.vertices]
    current = None
    for (a, b, c), name in zip(mesh.triangles, names):
        if name != current:
            lines.append(f"usemtl {name}")
            current = name
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def tags_for(mesh: ElectrodeMesh) -> dict:
    names = mesh.names or ("electrode",) * mesh.n_panels
    out = {}
    for name, tag in zip(names, mesh.tags):
        out.setdefault(name, float(tag))
    return out


def read_obj(path, tags: dict) -> ElectrodeMesh:
    """Read an OBJ whose ``usemtl`` names map to volts through ``tags``."""
    verts, tris, names = [], [], []
    material = None
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "usemtl":
            material = parts[1]
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):
                tris.append([idx[0], idx[k], idx[k + 1]])
                names.append(material)
    missing = sorted({n for n in names if n not in tags}, key=str)
    if missing:
        raise ValueError(f"no potential given for materials {missing}")
    return ElectrodeMesh(np.array(verts), np.array(tris), np.array([tags[n] for n in names]), tuple(names))


# reference intersection geometry
#
# Upper half (z > 0): two RF rails crossing at +-half_angle in the plane z = 1,
# a grounded back plane, and a grounded bridge strip along x hung between
# them at a tunable height.  The lower half is the z-mirror image with every
# potential negated, so V(x, y, -z) = -V(x, y, z).

RF_VOLTS = 0.5
GROUND_VOLTS = -0.5


def load_reference_dimensions(path=None) -> dict:
    if path is None:
        text = resources.files("trapnet").joinpath("data/reference_intersection.json").read_text()
    else:
        text = Path(path).read_text()
    dims = json.loads(text)
    if dims.get("schema_version") != 1:
        raise ValueError(f"unsupported dimension table schema {dims.get('schema_version')!r}")
    return dims


def _plate_size(spec: dict, polygon: sg.Polygon, refine: float):
    """Edge length growing with distance from the origin and, optionally, from the plate edge."""
    scale = 1.0 / math.sqrt(refine)
    boundary = polygon.boundary
    h0, grow, hmax = spec["size"], spec["growth"], spec["max"]
    edge = spec.get("edge")

    def size(xy):
        r = np.hypot(xy[:, 0], xy[:, 1])
        h = np.minimum(h0 + grow * r, hmax)
        if edge is not None:
            d = shapely.distance(shapely.points(xy), boundary)
            h = np.minimum(h, edge + spec["edge_growth"] * d)
        return scale * h

    return size


def _quadrant_plate(polygon: sg.Polygon, z: float, tag: float, name: str, spec: dict, refine: float):
    """Mesh the x, y >= 0 part of a mirror-symmetric outline and unfold it."""
    piece = polygon.intersection(sg.box(0, 0, 1e3, 1e3))
    size = _plate_size(spec, polygon, refine)  # grade toward real edges, not the cut
    parts = []
    for g in getattr(piece, "geoms", [piece]):
        if g.geom_type == "Polygon" and g.area > 1e-9:
            parts.append(graded_planar_mesh(g, z, size, tag, name))
    return with_mirror_images(merge_meshes(parts))


def reference_mesh(parameter: float, dims: dict | None = None, refine: float = 1.0) -> ElectrodeMesh:
    """Electrode mesh of the reference intersection with bridge height ``parameter``.

    ``refine`` multiplies the panel density (lengths shrink by sqrt(refine)).
    """
    dims = dims or load_reference_dimensions()
    g, m = dims["geometry"], dims["mesh"]
    if refine <= 0:
        raise ValueError("refine must be positive")
    th = math.radians(g["half_angle_deg"])
    a, zr, length = g["rail_half_width"], g["rail_height"], g["rail_length"]
    scale = 1.0 / math.sqrt(refine)

    # rails: small merged centre piece plus one structured arm, unfolded by mirrors
    x_join = a / math.sin(th)
    centre = sg.Polygon([(0, 0), (x_join, 0), (x_join, x_join * math.tan(th) + a / math.cos(th)),
                         (0, a / math.cos(th))])
    rail = m["rail"]
    ce = rail["centre_size"] * scale
    rail_centre = graded_planar_mesh(centre, zr, lambda xy: np.full(len(xy), ce), RF_VOLTS, "rail_upper")
    n_across = max(2, int(round(rail["cells_across"] * math.sqrt(refine))))
    step0, step_grow, step_max = rail["step"], rail["step_growth"], rail["step_max"]
    arm = strip_arm(a, th, x_join, length, zr, n_across,
                    lambda s_: scale * min(step_max, step0 + step_grow * s_), RF_VOLTS, "rail_upper")
    rails = with_mirror_images(merge_meshes([rail_centre, arm]))

    back = sg.Point(0, 0).buffer(g["back_radius"], 16)
    if g.get("back_hole_radius"):
        back = back.difference(sg.Point(0, 0).buffer(g["back_hole_radius"], 16))
    plates = [_quadrant_plate(back, g["back_height"], GROUND_VOLTS, "ground_upper", m["back"], refine)]
    bw, bl = g["bridge_half_width"], g["bridge_half_length"]
    bridge = sg.box(-bl, -bw, bl, bw)
    plates.append(_quadrant_plate(bridge, parameter, GROUND_VOLTS, "bridge_upper", m["bridge"], refine))
    if g.get("wedge_height") is not None:
        # grounded plates filling the narrow wedges between the rails, outside the bridge
        reach = 2.0 * g["back_radius"]
        half = sg.Polygon([(0, 0), (reach, reach * math.tan(th)), (reach, -reach * math.tan(th))])
        offset = (a + g["wedge_gap"]) / math.sin(th)
        wedge = affinity.translate(half, xoff=offset).intersection(back)
        if not g.get("wedge_under_bridge", False):
            wedge = wedge.difference(bridge)
        wedge = wedge.union(affinity.scale(wedge, -1.0, 1.0, origin=(0, 0)))
        plates.append(_quadrant_plate(wedge, g["wedge_height"], GROUND_VOLTS, "wedge_upper", m["wedge"], refine))

    upper = merge_meshes([rails, *plates])
    lower = mirror(upper, 2, tag_map=lambda t: -t)
    lower = ElectrodeMesh(lower.vertices, lower.triangles, lower.tags,
                          tuple(n.replace("_upper", "_lower") for n in lower.names))
    return merge_meshes([upper, lower])


def reference_family(dims: dict | None = None, refine: float = 1.0) -> GeometryFamily:
    """Reference intersection with the bridge height as the tuning parameter."""
    dims = dims or load_reference_dimensions()
    lo, hi = dims["parameter"]["range"]
    return GeometryFamily(
        build=lambda value: reference_mesh(value, dims, refine),
        name=dims["name"],
        param_range=(lo, hi),
        symmetric=True,
    )
