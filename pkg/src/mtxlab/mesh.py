"""Triangulations of bounded planar domains.

Meshes are immutable value objects: node coordinates, element connectivity,
and topologically-derived boundary data.  Constructors cover the reference
domains used by the experiments (disk, rectangle, annulus, polygon); uniform
red refinement re-projects boundary nodes onto the analytic boundary when the
mesh remembers the domain it came from.
"""

from __future__ import annotations

import io
import numpy as np
from dataclasses import dataclass, field
from scipy.spatial import Delaunay, cKDTree


class PointLocationError(Exception):
    """Raised when a query point lies outside the triangulation."""


@dataclass(frozen=True)
class Quadrature:
    """Symmetric quadrature rule on the reference triangle.

    ``points`` are barycentric coordinates, ``weights`` are positive and sum
    to one; the integral over a physical element is
    ``area * sum(w_q * f(x_q))``.
    """

    degree: int
    points: np.ndarray  # (Q, 3) barycentric
    weights: np.ndarray  # (Q,)


def _sym_points(groups):
    pts, wts = [], []
    for group in groups:
        if len(group) == 2:  # centroid or 3-fold orbit given by a single value
            a, w = group
            if abs(3.0 * a - 1.0) < 1e-14:
                orbit = [(a, a, a)]
            else:
                b = 1.0 - 2.0 * a
                orbit = [(a, a, b), (a, b, a), (b, a, a)]
        else:  # 6-fold orbit (a, b, w)
            a, b, w = group
            c = 1.0 - a - b
            orbit = [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]
        for p in orbit:
            pts.append(p)
            wts.append(w)
    return np.asarray(pts), np.asarray(wts)


_DUNAVANT = {
    1: [(1.0 / 3.0, 1.0)],
    2: [(0.5, 1.0 / 3.0)],
    4: [
        (0.445948490915965, 0.223381589678011),
        (0.091576213509771, 0.109951743655322),
    ],
    6: [
        (0.063089014491502, 0.050844906370207),
        (0.249286745170910, 0.116786275726379),
        (0.053145049844817, 0.310352451033784, 0.082851075618374),
    ],
}


def _collapsed_rule(degree):
    """Product Gauss rule on the collapsed square; handles degree > 6."""
    from scipy.special import roots_jacobi, roots_legendre

    k = degree // 2 + 1
    # x = u, y = v*(1-u); Jacobian (1-u) absorbed by a Gauss-Jacobi rule in u
    xj, wj = roots_jacobi(k, 1.0, 0.0)  # weight (1-t) on [-1, 1]
    xl, wl = roots_legendre(k)
    u = 0.5 * (xj + 1.0)
    wu = wj * 0.25  # maps weight (1-t)dt on [-1,1] to (1-u)du on [0,1]
    v = 0.5 * (xl + 1.0)
    wv = wl * 0.5
    pts, wts = [], []
    for ui, wui in zip(u, wu):
        for vi, wvi in zip(v, wv):
            x = ui
            y = vi * (1.0 - ui)
            pts.append((1.0 - x - y, x, y))
            wts.append(wui * wvi)
    wts = np.asarray(wts)
    return np.asarray(pts), wts / wts.sum()


def triangle_quadrature(degree: int) -> Quadrature:
    """Positive-weight rule exact for polynomials up to ``degree``."""
    if degree < 1:
        raise ValueError(f"degree must be >= 1, got {degree}")
    for d in sorted(_DUNAVANT):
        if d >= degree:
            pts, wts = _sym_points(_DUNAVANT[d])
            return Quadrature(degree=d, points=pts, weights=wts)
    pts, wts = _collapsed_rule(degree)
    return Quadrature(degree=degree, points=pts, weights=wts)


@dataclass(frozen=True)
class Geometry:
    """Analytic domain descriptor kept by meshes for boundary re-projection."""

    kind: str  # disk | rectangle | annulus | polygon | none
    params: tuple = ()

    def project_boundary(self, x):
        """Project boundary-node coordinates (k, 2) onto the true boundary."""
        if self.kind == "disk":
            (radius,) = self.params
            r = np.linalg.norm(x, axis=1, keepdims=True)
            return np.where(r > 0, radius * x / r, x)
        if self.kind == "annulus":
            r_in, r_out = self.params
            r = np.linalg.norm(x, axis=1)
            target = np.where(np.abs(r - r_in) < np.abs(r - r_out), r_in, r_out)
            return x * (target / r)[:, None]
        return x


@dataclass(frozen=True)
class Mesh:
    """Conforming triangulation with boundary tagging.

    Attributes
    ----------
    nodes : (N, 2) float array
        Vertex coordinates.
    elements : (M, 3) int array
        Vertex indices per triangle, counterclockwise.
    boundary_faces : (K, 2) int array
        Edges incident to exactly one element.
    boundary_nodes : (B,) int array
        Sorted indices of nodes lying on boundary faces.
    element_volumes : (M,) float array
        Triangle areas (positive).
    """

    nodes: np.ndarray
    elements: np.ndarray
    boundary_faces: np.ndarray
    boundary_nodes: np.ndarray
    element_volumes: np.ndarray
    geometry: Geometry = field(default=Geometry("none"), compare=False)

    @property
    def num_nodes(self):
        return self.nodes.shape[0]

    @property
    def num_elements(self):
        return self.elements.shape[0]

    @property
    def volume(self):
        return float(self.element_volumes.sum())

    def __str__(self):
        return (
            f"Mesh({self.num_nodes} nodes, {self.num_elements} elements, "
            f"area {self.volume:.6g})"
        )

    def element_gradients(self):
        """Constant P1 basis gradients per element, shape (M, 3, 2)."""
        p = self.nodes[self.elements]  # (M, 3, 2)
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])[:, None]
        grads = np.empty((self.num_elements, 3, 2))
        grads[:, 1, 0] = e2[:, 1]
        grads[:, 1, 1] = -e2[:, 0]
        grads[:, 2, 0] = -e1[:, 1]
        grads[:, 2, 1] = e1[:, 0]
        grads[:, 1] /= det
        grads[:, 2] /= det
        grads[:, 0] = -grads[:, 1] - grads[:, 2]
        return grads

    def element_centroids(self):
        return self.nodes[self.elements].mean(axis=1)

    def boundary_distance(self, x):
        """Distance from point(s) x to the polygonal boundary."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        a = self.nodes[self.boundary_faces[:, 0]]
        b = self.nodes[self.boundary_faces[:, 1]]
        d = np.empty((x.shape[0], a.shape[0]))
        ab = b - a
        denom = (ab**2).sum(axis=1)
        for i, xi in enumerate(x):
            t = np.clip(((xi - a) * ab).sum(axis=1) / denom, 0.0, 1.0)
            proj = a + t[:, None] * ab
            d[i] = np.linalg.norm(proj - xi, axis=1)
        out = d.min(axis=1)
        return out if out.size > 1 else float(out[0])


def _signed_areas(nodes, elements):
    p = nodes[elements]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def _orient_ccw(nodes, elements):
    areas = _signed_areas(nodes, elements)
    flip = areas < 0
    elements = elements.copy()
    elements[flip] = elements[flip][:, [0, 2, 1]]
    return elements, np.abs(areas)


def _boundary_topology(elements):
    """Faces incident to exactly one element (the topological boundary)."""
    edges = np.concatenate(
        [elements[:, [0, 1]], elements[:, [1, 2]], elements[:, [2, 0]]]
    )
    key = np.sort(edges, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    if counts.max() > 2:
        raise ValueError("non-manifold edge: some face shared by > 2 elements")
    single = counts[inverse] == 1
    bfaces = edges[single]
    bnodes = np.unique(bfaces)
    return bfaces, bnodes


def _assemble(nodes, elements, geometry):
    elements, areas = _orient_ccw(nodes, elements)
    if np.any(areas <= 0):
        raise ValueError("degenerate element with zero area")
    bfaces, bnodes = _boundary_topology(elements)
    return Mesh(
        nodes=nodes,
        elements=elements,
        boundary_faces=bfaces,
        boundary_nodes=bnodes,
        element_volumes=areas,
        geometry=geometry,
    )


def _delaunay_mesh(points, geometry, keep=None):
    tri = Delaunay(points)
    elements = tri.simplices.astype(np.int64)
    areas = np.abs(_signed_areas(points, elements))
    # qhull can emit slivers on cocircular inputs; drop zero-area triangles
    elements = elements[areas > 1e-14 * areas.max()]
    if keep is not None:
        centroids = points[elements].mean(axis=1)
        elements = elements[keep(centroids)]
    used = np.unique(elements)
    if used.size != points.shape[0]:
        remap = -np.ones(points.shape[0], dtype=np.int64)
        remap[used] = np.arange(used.size)
        points = points[used]
        elements = remap[elements]
    return _assemble(points, elements, geometry)


def build_disk(radius: float, target_h: float) -> Mesh:
    """Quasi-uniform triangulation of a disk centered at the origin.

    Nodes sit on concentric rings spaced by at most ``target_h``; the outer
    ring lies exactly on the circle.  Maximum element diameter stays below
    2 * target_h.
    """
    if radius <= 0 or target_h <= 0:
        raise ValueError("radius and target_h must be positive")
    if target_h >= radius:
        raise ValueError(f"target_h {target_h} must be below radius {radius}")
    rings = int(np.ceil(radius / target_h))
    pts = [(0.0, 0.0)]
    for j in range(1, rings + 1):
        r = radius * j / rings
        m = 6 * j
        ang = 2.0 * np.pi * np.arange(m) / m
        pts.extend(zip(r * np.cos(ang), r * np.sin(ang)))
    points = np.asarray(pts)
    return _delaunay_mesh(points, Geometry("disk", (float(radius),)))


def build_rectangle(width: float, height: float, target_h: float) -> Mesh:
    """Structured triangulation of [0, width] x [0, height] (exact area)."""
    if width <= 0 or height <= 0 or target_h <= 0:
        raise ValueError("width, height, target_h must be positive")
    nx = max(1, int(np.ceil(width / target_h)))
    ny = max(1, int(np.ceil(height / target_h)))
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    points = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return i * (ny + 1) + j

    elements = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)
            # alternate the diagonal for isotropy
            if (i + j) % 2 == 0:
                elements += [(a, b, c), (a, c, d)]
            else:
                elements += [(a, b, d), (b, c, d)]
    geometry = Geometry("rectangle", (float(width), float(height)))
    return _assemble(points, np.asarray(elements, dtype=np.int64), geometry)


def build_annulus(r_inner: float, r_outer: float, target_h: float) -> Mesh:
    """Triangulation of the annulus r_inner <= |x| <= r_outer."""
    if not (0 < r_inner < r_outer):
        raise ValueError("need 0 < r_inner < r_outer")
    if target_h <= 0 or target_h >= (r_outer - r_inner):
        raise ValueError("target_h must be positive and below the annulus width")
    rings = max(1, int(np.ceil((r_outer - r_inner) / target_h)))
    pts = []
    for j in range(rings + 1):
        r = r_inner + (r_outer - r_inner) * j / rings
        m = max(8, int(np.ceil(2.0 * np.pi * r / target_h)))
        # stagger alternate rings for better-shaped triangles
        ang = 2.0 * np.pi * (np.arange(m) + 0.5 * (j % 2)) / m
        pts.extend(zip(r * np.cos(ang), r * np.sin(ang)))
    points = np.asarray(pts)
    geometry = Geometry("annulus", (float(r_inner), float(r_outer)))

    def keep(centroids):
        return np.linalg.norm(centroids, axis=1) > r_inner * 0.999

    return _delaunay_mesh(points, geometry, keep=keep)


def build_polygon(vertices, target_h: float) -> Mesh:
    """Triangulation of a simple polygon given by its vertex loop.

    Interior nodes come from a trimmed regular grid; triangles whose centroid
    falls outside the polygon are discarded, so non-convex polygons are
    handled to first order in target_h.
    """
    verts = np.asarray(vertices, dtype=float)
    if verts.ndim != 2 or verts.shape[0] < 3 or verts.shape[1] != 2:
        raise ValueError("vertices must be an (k, 2) array with k >= 3")
    if target_h <= 0:
        raise ValueError("target_h must be positive")
    pts = []
    k = verts.shape[0]
    for i in range(k):
        a, b = verts[i], verts[(i + 1) % k]
        m = max(1, int(np.ceil(np.linalg.norm(b - a) / target_h)))
        for t in np.arange(m) / m:
            pts.append(a + t * (b - a))
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    xs = np.arange(lo[0] + 0.5 * target_h, hi[0], target_h)
    ys = np.arange(lo[1] + 0.5 * target_h, hi[1], target_h)
    boundary = np.asarray(pts)
    if xs.size and ys.size:
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        grid = np.column_stack([X.ravel(), Y.ravel()])
        # keep grid points a safe distance from the boundary segments
        safe = _points_in_polygon(grid, verts)
        near = np.zeros(grid.shape[0], dtype=bool)
        for i in range(k):
            a, b = verts[i], verts[(i + 1) % k]
            ab = b - a
            t = np.clip(((grid - a) @ ab) / (ab @ ab), 0.0, 1.0)
            proj = a + t[:, None] * ab
            near |= np.linalg.norm(grid - proj, axis=1) < 0.4 * target_h
        pts_in = grid[safe & ~near]
    else:
        pts_in = np.empty((0, 2))
    points = np.vstack([boundary, pts_in])

    def keep(centroids):
        return _points_in_polygon(centroids, verts)

    return _delaunay_mesh(points, Geometry("polygon", tuple(map(tuple, verts))), keep=keep)


def _points_in_polygon(points, verts):
    """Vectorized even-odd rule; points exactly on an edge count as inside."""
    x, y = points[:, 0], points[:, 1]
    inside = np.zeros(points.shape[0], dtype=bool)
    k = verts.shape[0]
    for i in range(k):
        (x1, y1), (x2, y2) = verts[i], verts[(i + 1) % k]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < np.where(crosses, xint, np.inf))
    return inside


def refine(mesh: Mesh) -> Mesh:
    """Uniform red refinement: every triangle splits into four children.

    New boundary nodes (edge midpoints of boundary faces) are re-projected
    onto the analytic boundary when the mesh carries a parametric geometry.
    """
    nodes = mesh.nodes
    elements = mesh.elements
    edge_mid = {}
    new_nodes = [nodes]
    next_id = mesh.num_nodes

    def midpoint(i, j):
        nonlocal next_id
        key = (i, j) if i < j else (j, i)
        if key not in edge_mid:
            edge_mid[key] = next_id
            new_nodes.append(0.5 * (nodes[i] + nodes[j]))
            next_id += 1
        return edge_mid[key]

    children = np.empty((4 * mesh.num_elements, 3), dtype=np.int64)
    for e, (a, b, c) in enumerate(elements):
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        children[4 * e : 4 * e + 4] = [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]

    coords = np.vstack([new_nodes[0]] + [p[None, :] for p in new_nodes[1:]])
    fine = _assemble(coords, children, mesh.geometry)
    if mesh.geometry.kind in ("disk", "annulus"):
        coords = fine.nodes.copy()
        bidx = fine.boundary_nodes
        coords[bidx] = mesh.geometry.project_boundary(coords[bidx])
        fine = _assemble(coords, fine.elements, mesh.geometry)
    return fine


def mesh_scale(mesh: Mesh) -> float:
    """Representative element size: median boundary-face length."""
    a = mesh.nodes[mesh.boundary_faces[:, 0]]
    b = mesh.nodes[mesh.boundary_faces[:, 1]]
    return float(np.median(np.linalg.norm(a - b, axis=1)))


class _Locator:
    """KD-tree accelerated point location with brute-force fallback."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.tree = cKDTree(mesh.element_centroids())
        p = mesh.nodes[mesh.elements]
        self.origin = p[:, 0]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        self.inv = np.empty((mesh.num_elements, 2, 2))
        self.inv[:, 0, 0] = e2[:, 1] / det
        self.inv[:, 0, 1] = -e2[:, 0] / det
        self.inv[:, 1, 0] = -e1[:, 1] / det
        self.inv[:, 1, 1] = e1[:, 0] / det

    def bary(self, elems, x):
        d = x[None, :] - self.origin[elems]
        st = np.einsum("kij,kj->ki", self.inv[elems], d)
        return np.column_stack([1.0 - st.sum(axis=1), st])

    def locate(self, x, tol):
        x = np.asarray(x, dtype=float)
        k = min(12, self.mesh.num_elements)
        _, cand = self.tree.query(x, k=k)
        cand = np.atleast_1d(cand)
        lam = self.bary(cand, x)
        best = lam.min(axis=1).argmax()
        if lam[best].min() >= -tol:
            return int(cand[best]), lam[best]
        lam_all = self.bary(np.arange(self.mesh.num_elements), x)
        best = lam_all.min(axis=1).argmax()
        if lam_all[best].min() >= -tol:
            return int(best), lam_all[best]
        raise PointLocationError(
            f"point {x.tolist()} outside the mesh (worst barycentric "
            f"{lam_all[best].min():.3e}, tolerance {tol:.3e})"
        )


_locator_cache = {}


def locate_point(mesh: Mesh, x, tol: float | None = None):
    """Containing element and barycentric coordinates of point x.

    Accepts points up to a small negative barycentric slack (default
    ``mesh_scale(mesh)**2`` relative) to tolerate the polygonal boundary;
    raises PointLocationError beyond it.
    """
    key = id(mesh)
    loc = _locator_cache.get(key)
    if loc is None or loc.mesh is not mesh:
        loc = _Locator(mesh)
        _locator_cache.clear()
        _locator_cache[key] = loc
    if tol is None:
        tol = mesh_scale(mesh) ** 2
    return loc.locate(x, tol)


def write_mesh(mesh: Mesh, path) -> None:
    """Plain-text export: header, node coordinates, elements, boundary faces."""
    buf = io.StringIO()
    buf.write(f"nodes {mesh.num_nodes} elements {mesh.num_elements} dim 2\n")
    for x, y in mesh.nodes:
        buf.write(f"{float(x)!r} {float(y)!r}\n")
    for a, b, c in mesh.elements:
        buf.write(f"{a} {b} {c}\n")
    for a, b in mesh.boundary_faces:
        buf.write(f"{a} {b}\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def read_mesh(path) -> Mesh:
    """Read a mesh written by write_mesh; boundary data is re-derived."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 6 or header[0] != "nodes" or header[2] != "elements":
            raise ValueError(f"malformed mesh header: {' '.join(header)!r}")
        n, m = int(header[1]), int(header[3])
        nodes = np.array([[float(v) for v in fh.readline().split()] for _ in range(n)])
        elements = np.array(
            [[int(v) for v in fh.readline().split()] for _ in range(m)], dtype=np.int64
        )
    return _assemble(nodes, elements, Geometry("none"))
