"""Triangulations: structured generators, Gmsh import, boundary tagging, metrics.

All meshes are conforming (edge-to-edge) triangulations of a 2D domain with
consistently oriented (CCW) triangles and every boundary edge carrying exactly
one integer tag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class MeshError(Exception):
    """Base class for mesh construction and import failures."""


class MeshFormatError(MeshError):
    """Input file is malformed or uses an unsupported format version."""


class MeshConnectivityError(MeshError):
    """Triangulation is not conforming (bad indices, non edge-to-edge)."""


class MeshGeometryError(MeshError):
    """Degenerate or inconsistent geometry (zero-area triangle, bad hole)."""


# Default tag numbering used by the generators.
TAG_LEFT, TAG_RIGHT, TAG_BOTTOM, TAG_TOP = 1, 2, 3, 4
TAG_INLET, TAG_OUTLET, TAG_WALL, TAG_CYLINDER = 1, 2, 3, 4


@dataclass(frozen=True)
class Mesh:
    """Immutable conforming triangulation with tagged boundary edges.

    Attributes
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array, CCW vertex triples
    boundary_edges : (nb, 2) int array, endpoint indices
    boundary_tags : (nb,) int array, one tag per boundary edge
    edges : (ne, 2) int array, all unique undirected edges (sorted pairs)
    tri_edges : (nt, 3) int array, edge index opposite each local vertex
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    edges: np.ndarray = field(default=None, repr=False)
    tri_edges: np.ndarray = field(default=None, repr=False)

    @staticmethod
    def create(vertices, triangles, boundary_edges, boundary_tags) -> "Mesh":
        """Validate, orient, and index a triangulation.

        Triangles with negative signed area are reordered; zero-area
        triangles and non-conforming connectivity raise.
        """
        vertices = np.ascontiguousarray(vertices, dtype=float)
        triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        boundary_edges = np.ascontiguousarray(boundary_edges, dtype=np.int64)
        boundary_tags = np.ascontiguousarray(boundary_tags, dtype=np.int64)

        nv = len(vertices)
        if triangles.size and (triangles.min() < 0 or triangles.max() >= nv):
            bad = int(triangles.max())
            raise MeshConnectivityError(
                f"triangle references vertex {bad} but only {nv} vertices exist")
        if boundary_edges.size and (boundary_edges.min() < 0 or boundary_edges.max() >= nv):
            raise MeshConnectivityError("boundary edge references a nonexistent vertex")
        if len(boundary_edges) != len(boundary_tags):
            raise MeshConnectivityError("boundary edge / tag count mismatch")

        areas = _signed_areas(vertices, triangles)
        scale = math.sqrt(abs(areas).max()) if len(areas) else 1.0
        if np.any(np.abs(areas) < 1e-14 * max(scale, 1.0) ** 2):
            idx = int(np.argmin(np.abs(areas)))
            raise MeshGeometryError(f"triangle {idx} has (near-)zero area")
        flipped = areas < 0
        if flipped.any():
            triangles = triangles.copy()
            triangles[flipped] = triangles[flipped][:, [0, 2, 1]]

        edges, tri_edges, edge_count = _edge_table(triangles)
        if edge_count.max() > 2:
            raise MeshConnectivityError("an edge is shared by more than two triangles")

        computed_boundary = {tuple(e) for e in edges[edge_count == 1]}
        given = {tuple(sorted(e)) for e in boundary_edges}
        if computed_boundary != given:
            raise MeshConnectivityError(
                "tagged boundary edges do not match the topological boundary "
                f"({len(given)} given vs {len(computed_boundary)} found)")
        if len(given) != len(boundary_edges):
            raise MeshConnectivityError("duplicate boundary edge tagging")

        return Mesh(vertices, triangles, boundary_edges, boundary_tags, edges, tri_edges)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def boundary_edge_normals(self) -> np.ndarray:
        """Outward unit normal of each boundary edge, shape (nb, 2)."""
        interior = {}
        for t in self.triangles:
            for a, b, c in ((t[0], t[1], t[2]), (t[1], t[2], t[0]), (t[2], t[0], t[1])):
                interior[(min(a, b), max(a, b))] = c
        normals = np.empty((len(self.boundary_edges), 2))
        for i, (a, b) in enumerate(self.boundary_edges):
            pa, pb = self.vertices[a], self.vertices[b]
            t = pb - pa
            n = np.array([t[1], -t[0]])
            n /= np.linalg.norm(n)
            opp = self.vertices[interior[(min(a, b), max(a, b))]]
            if np.dot(n, opp - pa) > 0:
                n = -n
            normals[i] = n
        return normals


@dataclass(frozen=True)
class BoundaryPartition:
    """Split of the boundary tags into Dirichlet and open (Neumann) parts."""

    dirichlet_tags: frozenset
    open_tags: frozenset

    def __init__(self, dirichlet_tags, open_tags=()):
        object.__setattr__(self, "dirichlet_tags", frozenset(dirichlet_tags))
        object.__setattr__(self, "open_tags", frozenset(open_tags))
        if self.dirichlet_tags & self.open_tags:
            raise MeshError("a tag cannot be both Dirichlet and open")

    def validate(self, mesh: Mesh) -> None:
        present = set(int(t) for t in np.unique(mesh.boundary_tags))
        missing = present - set(self.dirichlet_tags) - set(self.open_tags)
        if missing:
            raise MeshError(f"boundary tags {sorted(missing)} have no assigned role")

    def open_edge_mask(self, mesh: Mesh) -> np.ndarray:
        return np.isin(mesh.boundary_tags, sorted(self.open_tags))

    def dirichlet_edge_mask(self, mesh: Mesh) -> np.ndarray:
        return np.isin(mesh.boundary_tags, sorted(self.dirichlet_tags))


def _signed_areas(vertices, triangles):
    p = vertices[triangles]
    return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                  - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))


def _edge_table(triangles):
    """Unique undirected edges, per-triangle edge indices, and share counts.

    tri_edges[t, i] is the edge opposite local vertex i of triangle t.
    """
    # Edge opposite vertex i connects the other two vertices.
    raw = np.concatenate([triangles[:, [1, 2]], triangles[:, [2, 0]], triangles[:, [0, 1]]])
    raw_sorted = np.sort(raw, axis=1)
    edges, inverse, counts = np.unique(
        raw_sorted, axis=0, return_inverse=True, return_counts=True)
    nt = len(triangles)
    tri_edges = np.column_stack([inverse[:nt], inverse[nt:2 * nt], inverse[2 * nt:]])
    return edges, tri_edges, counts


def generate_unit_square(n: int) -> Mesh:
    """Structured triangulation of (0,1)^2 with n subdivisions per side.

    Each quad is split along the lower-left to upper-right diagonal. Boundary
    sides are tagged TAG_LEFT/RIGHT/BOTTOM/TOP.
    """
    return generate_rectangle(1.0, 1.0, n, n)


def generate_rectangle(length, height, nx, ny,
                       tags=(TAG_LEFT, TAG_RIGHT, TAG_BOTTOM, TAG_TOP)) -> Mesh:
    if nx < 1 or ny < 1:
        raise MeshError("subdivision counts must be >= 1")
    left, right, bottom, top = tags
    xs = np.linspace(0.0, length, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return i * (ny + 1) + j

    triangles = []
    for i in range(nx):
        for j in range(ny):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            triangles.append((a, b, c))   # below the a-c diagonal
            triangles.append((a, c, d))   # above it
    bedges, btags = [], []
    for j in range(ny):
        bedges.append((vid(0, j), vid(0, j + 1))); btags.append(left)
        bedges.append((vid(nx, j), vid(nx, j + 1))); btags.append(right)
    for i in range(nx):
        bedges.append((vid(i, 0), vid(i + 1, 0))); btags.append(bottom)
        bedges.append((vid(i, ny), vid(i + 1, ny))); btags.append(top)
    return Mesh.create(vertices, np.array(triangles), np.array(bedges), np.array(btags))


def generate_channel(length, height, nx, ny, hole=None) -> Mesh:
    """Rectangular channel, optionally with a circular hole.

    Without a hole this is the structured rectangle with tags
    inlet/outlet/wall. With hole=(cx, cy, r) the interior disk is carved out;
    its polygonal boundary vertices lie exactly on the circle and carry
    TAG_CYLINDER.
    """
    if hole is None:
        return generate_rectangle(length, height, nx, ny,
                                  tags=(TAG_INLET, TAG_OUTLET, TAG_WALL, TAG_WALL))
    cx, cy, r = hole
    if not (r < cx < length - r and r < cy < height - r):
        raise MeshGeometryError("hole must be strictly interior to the channel")

    h_target = min(length / nx, height / ny)
    n_seg = max(16, math.ceil(2 * math.pi * r / h_target))
    angles = 2 * math.pi * np.arange(n_seg) / n_seg
    circle_pts = np.column_stack([cx + r * np.cos(angles), cy + r * np.sin(angles)])

    xs = np.linspace(0.0, length, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    grid = np.column_stack([xx.ravel(), yy.ravel()])
    dist = np.hypot(grid[:, 0] - cx, grid[:, 1] - cy)
    keep = dist > r + 0.6 * h_target
    points = np.vstack([grid[keep], circle_pts])

    from scipy.spatial import Delaunay

    tri = Delaunay(points)
    simplices = tri.simplices
    cent = points[simplices].mean(axis=1)
    outside = np.hypot(cent[:, 0] - cx, cent[:, 1] - cy) > r
    simplices = simplices[outside]
    simplices = _drop_degenerate(points, simplices)

    points, simplices = _drop_unreferenced(points, simplices)
    bedges, btags = _tag_channel_boundary(points, simplices, length, height, (cx, cy, r))
    return Mesh.create(points, simplices, bedges, btags)


def generate_polygon_mesh(polygon, h_target, tag_fn) -> Mesh:
    """Delaunay mesh of a (possibly non-convex) polygon.

    polygon : (np, 2) CCW vertex loop; tag_fn(xm, ym) maps a boundary edge
    midpoint to an integer tag.
    """
    polygon = np.asarray(polygon, dtype=float)
    boundary_pts = _resample_loop(polygon, h_target)
    xmin, ymin = polygon.min(axis=0)
    xmax, ymax = polygon.max(axis=0)
    xs = np.arange(xmin, xmax + 0.5 * h_target, h_target)
    ys = np.arange(ymin, ymax + 0.5 * h_target, h_target)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    grid = np.column_stack([xx.ravel(), yy.ravel()])
    inside = _points_in_polygon(grid, polygon)
    far = _distance_to_loop(grid, boundary_pts) > 0.55 * h_target
    points = np.vstack([boundary_pts, grid[inside & far]])

    from scipy.spatial import Delaunay

    tri = Delaunay(points)
    simplices = tri.simplices
    cent = points[simplices].mean(axis=1)
    keep = _points_in_polygon(cent, polygon)
    simplices = _drop_degenerate(points, simplices[keep])
    points, simplices = _drop_unreferenced(points, simplices)

    edges, _, counts = _edge_table(simplices)
    bnd = edges[counts == 1]
    mids = 0.5 * (points[bnd[:, 0]] + points[bnd[:, 1]])
    tags = np.array([tag_fn(float(m[0]), float(m[1])) for m in mids],
                    dtype=np.int64)
    return Mesh.create(points, simplices, bnd, tags)


def _drop_degenerate(points, simplices, rel_tol=1e-10):
    areas = _signed_areas(points, simplices)
    scale = abs(areas).max()
    return simplices[np.abs(areas) > rel_tol * scale]


def _drop_unreferenced(points, simplices):
    used = np.unique(simplices)
    remap = -np.ones(len(points), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return points[used], remap[simplices]


def _tag_channel_boundary(points, simplices, length, height, hole):
    cx, cy, r = hole
    edges, _, counts = _edge_table(simplices)
    bnd = edges[counts == 1]
    tol = 1e-9 * max(length, height)
    tags = np.empty(len(bnd), dtype=np.int64)
    for i, (a, b) in enumerate(bnd):
        pa, pb = points[a], points[b]
        on_circle = (abs(np.hypot(*(pa - (cx, cy))) - r) < 1e-9
                     and abs(np.hypot(*(pb - (cx, cy))) - r) < 1e-9)
        if on_circle:
            tags[i] = TAG_CYLINDER
        elif abs(pa[0]) < tol and abs(pb[0]) < tol:
            tags[i] = TAG_INLET
        elif abs(pa[0] - length) < tol and abs(pb[0] - length) < tol:
            tags[i] = TAG_OUTLET
        elif (abs(pa[1]) < tol and abs(pb[1]) < tol) or \
                (abs(pa[1] - height) < tol and abs(pb[1] - height) < tol):
            tags[i] = TAG_WALL
        else:
            raise MeshGeometryError(
                f"boundary edge ({pa}, {pb}) lies on no recognizable boundary piece")
    return bnd, tags


def _resample_loop(polygon, h):
    pts = []
    n = len(polygon)
    for i in range(n):
        a, b = polygon[i], polygon[(i + 1) % n]
        seg = np.linalg.norm(b - a)
        k = max(1, round(seg / h))
        for j in range(k):
            pts.append(a + (b - a) * j / k)
    return np.array(pts)


def _points_in_polygon(points, polygon):
    """Ray casting, vectorized over points."""
    x, y = points[:, 0], points[:, 1]
    inside = np.zeros(len(points), dtype=bool)
    n = len(polygon)
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < np.where(crosses, xint, np.inf))
    return inside


def _distance_to_loop(points, loop_pts):
    d = np.full(len(points), np.inf)
    n = len(loop_pts)
    a = loop_pts
    b = np.roll(loop_pts, -1, axis=0)
    for i in range(n):
        d = np.minimum(d, _dist_point_segment(points, a[i], b[i]))
    return d


def _dist_point_segment(points, a, b):
    ab = b - a
    t = np.clip(((points - a) @ ab) / max(ab @ ab, 1e-300), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def mesh_metrics(mesh: Mesh) -> dict:
    """Max element diameter h, domain diameter, and element areas."""
    p = mesh.vertices[mesh.triangles]
    e0 = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    e1 = np.linalg.norm(p[:, 2] - p[:, 1], axis=1)
    e2 = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
    h = float(np.max(np.column_stack([e0, e1, e2])))
    v = mesh.vertices
    # Diameter from the convex hull (all-pairs is fine at desk scale too).
    from scipy.spatial import ConvexHull

    hull = v[ConvexHull(v).vertices]
    d2 = ((hull[:, None, :] - hull[None, :, :]) ** 2).sum(-1)
    areas = _signed_areas(mesh.vertices, mesh.triangles)
    return {"h": h, "diam": float(np.sqrt(d2.max())), "areas": areas,
            "area": float(areas.sum())}


# ---------------------------------------------------------------------------
# Gmsh ASCII v2.2 import and plain-text round-trip format
# ---------------------------------------------------------------------------

_GMSH_LINE = 1
_GMSH_TRIANGLE = 2


def import_mesh(text: str) -> Mesh:
    """Parse a Gmsh ASCII v2.2 file.

    2-node line elements provide boundary tags (first element tag); 3-node
    triangles provide the region. Unreferenced nodes are dropped. Higher
    format versions are rejected.
    """
    sections = _split_sections(text)
    if "MeshFormat" not in sections:
        raise MeshFormatError("missing $MeshFormat section")
    fmt = sections["MeshFormat"][0].split()
    if not fmt or not fmt[0].startswith("2.2"):
        raise MeshFormatError(
            f"unsupported Gmsh format version {fmt[0] if fmt else '?'}; only 2.2 is read")
    if "Nodes" not in sections:
        raise MeshFormatError("missing $Nodes section")
    if "Elements" not in sections:
        raise MeshFormatError("missing $Elements section")

    node_lines = sections["Nodes"]
    try:
        n_nodes = int(node_lines[0])
    except (IndexError, ValueError):
        raise MeshFormatError("malformed $Nodes header")
    ids, coords = [], []
    for line in node_lines[1:1 + n_nodes]:
        parts = line.split()
        if len(parts) < 4:
            raise MeshFormatError(f"malformed node line: {line!r}")
        ids.append(int(parts[0]))
        coords.append((float(parts[1]), float(parts[2])))
    if len(ids) != n_nodes:
        raise MeshFormatError("node count does not match $Nodes header")
    id_map = {nid: i for i, nid in enumerate(ids)}
    coords = np.array(coords)

    elem_lines = sections["Elements"]
    try:
        n_elems = int(elem_lines[0])
    except (IndexError, ValueError):
        raise MeshFormatError("malformed $Elements header")
    triangles, bedges, btags = [], [], []
    for line in elem_lines[1:1 + n_elems]:
        parts = [int(x) for x in line.split()]
        if len(parts) < 3:
            raise MeshFormatError(f"malformed element line: {line!r}")
        etype, ntags = parts[1], parts[2]
        tags = parts[3:3 + ntags]
        nodes = parts[3 + ntags:]
        try:
            nodes = [id_map[n] for n in nodes]
        except KeyError as exc:
            raise MeshConnectivityError(
                f"element references unknown node {exc.args[0]}")
        if etype == _GMSH_TRIANGLE:
            if len(nodes) != 3:
                raise MeshFormatError("triangle element without 3 nodes")
            triangles.append(nodes)
        elif etype == _GMSH_LINE:
            if len(nodes) != 2:
                raise MeshFormatError("line element without 2 nodes")
            bedges.append(nodes)
            btags.append(tags[0] if tags else 0)
        # other element types (points etc.) are ignored
    if not triangles:
        raise MeshFormatError("no triangles in $Elements")

    triangles = np.array(triangles)
    used = np.unique(triangles)
    remap = -np.ones(len(coords), dtype=np.int64)
    remap[used] = np.arange(len(used))
    bedges = np.array(bedges, dtype=np.int64).reshape(-1, 2)
    if bedges.size and np.any(remap[bedges] < 0):
        raise MeshConnectivityError("boundary edge uses a node not in any triangle")
    return Mesh.create(coords[used], remap[triangles], remap[bedges],
                       np.array(btags, dtype=np.int64))


def _split_sections(text):
    sections = {}
    current = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("$End"):
            current = None
        elif line.startswith("$"):
            current = line[1:]
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
    return sections


def export_mesh(mesh: Mesh) -> str:
    """Plain-text export (vertices / triangles / tagged edges)."""
    out = ["# ensflow mesh", f"vertices {mesh.n_vertices}"]
    out += [f"{float(x)!r} {float(y)!r}" for x, y in mesh.vertices]
    out.append(f"triangles {mesh.n_triangles}")
    out += [f"{a} {b} {c}" for a, b, c in mesh.triangles]
    out.append(f"boundary_edges {len(mesh.boundary_edges)}")
    out += [f"{a} {b} {t}" for (a, b), t in zip(mesh.boundary_edges, mesh.boundary_tags)]
    return "\n".join(out) + "\n"


def parse_mesh_text(text: str) -> Mesh:
    """Inverse of export_mesh."""
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    pos = 0

    def expect(keyword):
        nonlocal pos
        parts = lines[pos].split()
        if parts[0] != keyword:
            raise MeshFormatError(f"expected '{keyword}' section, got {lines[pos]!r}")
        pos += 1
        return int(parts[1])

    nv = expect("vertices")
    vertices = np.array([[float(t) for t in lines[pos + i].split()] for i in range(nv)])
    pos += nv
    nt = expect("triangles")
    triangles = np.array([[int(t) for t in lines[pos + i].split()] for i in range(nt)])
    pos += nt
    nb = expect("boundary_edges")
    rows = [[int(t) for t in lines[pos + i].split()] for i in range(nb)]
    rows = np.array(rows, dtype=np.int64).reshape(-1, 3)
    return Mesh.create(vertices, triangles, rows[:, :2], rows[:, 2])
