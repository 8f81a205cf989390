"""Quadrilateral meshes for the annular film and its truncated-disk extensions.

Conventions used throughout:

* cells are 4 vertex indices in counterclockwise order; the bilinear map
  from the unit square [0,1]^2 sends the reference corners
  (0,0),(1,0),(1,1),(0,1) to the cell vertices in that order,
* boundary edges are stored in cell-traversal order, so the outward
  normal of edge (a, b) is the right-hand rotation of b - a,
* meshes are immutable after construction and safe to share read-only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, MeshConsistencyError

# Coarse annulus cell counts for tabulated aspect ratios.
_COARSE_CELLS = {
    0.1: 4,
    0.2: 5,
    0.33: 6,
    0.452: 9,
    0.56: 12,
    0.6446: 15,
    0.9: 29,
}

# Gauss points used for the positivity check of the cell maps.
_CHECK_PTS_1D = {
    3: np.polynomial.legendre.leggauss(3)[0] * 0.5 + 0.5,
    4: np.polynomial.legendre.leggauss(4)[0] * 0.5 + 0.5,
}


def annulus_radii(alpha: float) -> tuple[float, float]:
    """Inner and outer radius of the nondimensional annulus with unit gap."""
    if not 0.0 < alpha < 1.0:
        raise InvalidParameterError(f"aspect ratio must be in (0,1), got {alpha}")
    return alpha / (1.0 - alpha), 1.0 / (1.0 - alpha)


def coarse_cell_count(alpha: float) -> int:
    """Number of quadrilaterals in the coarse annulus ring.

    Tabulated aspect ratios use the fixed counts; any other value falls
    back to a near-square heuristic for a ring of radial width one.
    """
    for key, count in _COARSE_CELLS.items():
        if abs(alpha - key) < 1e-12:
            return count
    return max(4, round(2.0 * math.pi / (1.0 - alpha)))


@dataclass(frozen=True)
class Mesh:
    """Conforming quadrilateral mesh.

    vertices        (nv, 2) float array
    cells           (nc, 4) int array, counterclockwise
    bedge_vertices  (nbe, 2) boundary edges in cell-traversal order
    bedge_cell      (nbe,) owning cell of each boundary edge
    bedge_local     (nbe,) local edge index (k: corner k -> k+1) in the cell
    bedge_marker    (nbe,) marker name per boundary edge
    fluid_cells     cell indices belonging to the fluid domain
    marker_radii    marker name -> circle radius used for boundary snapping
    """

    vertices: np.ndarray
    cells: np.ndarray
    bedge_vertices: np.ndarray
    bedge_cell: np.ndarray
    bedge_local: np.ndarray
    bedge_marker: np.ndarray
    fluid_cells: np.ndarray
    marker_radii: dict = field(default_factory=dict)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    def cell_corners(self) -> np.ndarray:
        """(nc, 4, 2) corner coordinates."""
        return self.vertices[self.cells]

    def cell_diameters(self) -> np.ndarray:
        c = self.cell_corners()
        d02 = np.linalg.norm(c[:, 0] - c[:, 2], axis=1)
        d13 = np.linalg.norm(c[:, 1] - c[:, 3], axis=1)
        return np.maximum(d02, d13)

    def boundary_vertices(self, marker: str | None = None) -> np.ndarray:
        """Sorted unique vertex ids on (marker-selected) boundary edges."""
        sel = slice(None) if marker is None else self.bedge_marker == marker
        return np.unique(self.bedge_vertices[sel])

    def boundary_loop(self, marker: str) -> np.ndarray:
        """Vertex ids on a circular boundary, ordered counterclockwise by angle."""
        ids = self.boundary_vertices(marker)
        if ids.size == 0:
            raise MeshConsistencyError(f"no boundary edges marked {marker!r}")
        ang = np.arctan2(self.vertices[ids, 1], self.vertices[ids, 0])
        return ids[np.argsort(ang)]

    def markers(self) -> list[str]:
        return sorted(set(self.bedge_marker.tolist()))


def _bilinear_coeffs(corners: np.ndarray):
    """Coefficients of x(xi,eta) = a + b xi + c eta + d xi eta per cell."""
    a = corners[:, 0]
    b = corners[:, 1] - corners[:, 0]
    c = corners[:, 3] - corners[:, 0]
    d = corners[:, 2] - corners[:, 1] - corners[:, 3] + corners[:, 0]
    return a, b, c, d


def jacobian_determinants(mesh: Mesh, order: int = 4) -> np.ndarray:
    """det(J) of every cell map at the tensor-Gauss points of given order."""
    pts = _CHECK_PTS_1D[order]
    xi, eta = np.meshgrid(pts, pts, indexing="ij")
    xi = xi.ravel()
    eta = eta.ravel()
    _, b, c, d = _bilinear_coeffs(mesh.cell_corners())
    # J columns: d x/d xi = b + d*eta, d x/d eta = c + d*xi
    gx = b[:, None, :] + d[:, None, :] * eta[None, :, None]
    ge = c[:, None, :] + d[:, None, :] * xi[None, :, None]
    return gx[..., 0] * ge[..., 1] - gx[..., 1] * ge[..., 0]


def _validate(mesh: Mesh) -> None:
    edge_count: dict[tuple[int, int], int] = {}
    for quad in mesh.cells:
        for k in range(4):
            a, b = int(quad[k]), int(quad[(k + 1) % 4])
            key = (a, b) if a < b else (b, a)
            edge_count[key] = edge_count.get(key, 0) + 1
    bad = [k for k, v in edge_count.items() if v > 2]
    if bad:
        raise MeshConsistencyError(f"non-conforming edges shared by >2 cells: {bad[:5]}")
    n_boundary = sum(1 for v in edge_count.values() if v == 1)
    if n_boundary != mesh.bedge_vertices.shape[0]:
        raise MeshConsistencyError(
            f"boundary edge bookkeeping mismatch: scanned {n_boundary}, "
            f"stored {mesh.bedge_vertices.shape[0]}"
        )
    for order in (3, 4):
        det = jacobian_determinants(mesh, order)
        if not np.all(det > 0.0):
            raise MeshConsistencyError(
                f"non-positive cell-map Jacobian (min {det.min():.3e}) "
                f"at {order}x{order} Gauss points"
            )


def _boundary_scan(cells: np.ndarray):
    """All boundary edges as (a, b, cell, local) in cell-traversal order."""
    edge_count: dict[tuple[int, int], int] = {}
    for quad in cells:
        for k in range(4):
            a, b = int(quad[k]), int(quad[(k + 1) % 4])
            key = (a, b) if a < b else (b, a)
            edge_count[key] = edge_count.get(key, 0) + 1
    out = []
    for ci, quad in enumerate(cells):
        for k in range(4):
            a, b = int(quad[k]), int(quad[(k + 1) % 4])
            key = (a, b) if a < b else (b, a)
            if edge_count[key] == 1:
                out.append((a, b, ci, k))
    return out


def _classify_boundary(vertices, cells, marker_radii):
    """Assign markers to boundary edges by endpoint radius.

    Meshes without marker circles get the generic marker "boundary".
    """
    edges = _boundary_scan(cells)
    rad = np.linalg.norm(vertices, axis=1)
    bv, bc, bl, bm = [], [], [], []
    for a, b, ci, k in edges:
        marker = "boundary" if not marker_radii else None
        for name, r0 in marker_radii.items():
            tol = 1e-9 * max(1.0, r0)
            if abs(rad[a] - r0) < tol and abs(rad[b] - r0) < tol:
                marker = name
                break
        if marker is None:
            raise MeshConsistencyError(
                f"boundary edge ({a},{b}) at radii ({rad[a]:.6g},{rad[b]:.6g}) "
                f"matches no marker circle {marker_radii}"
            )
        bv.append((a, b))
        bc.append(ci)
        bl.append(k)
        bm.append(marker)
    return (
        np.array(bv, dtype=np.int64).reshape(-1, 2),
        np.array(bc, dtype=np.int64),
        np.array(bl, dtype=np.int64),
        np.array(bm, dtype="<U12"),
    )


def _make_mesh(vertices, cells, marker_radii, fluid_cells=None, validate=True) -> Mesh:
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    cells = np.ascontiguousarray(cells, dtype=np.int64)
    bv, bc, bl, bm = _classify_boundary(vertices, cells, marker_radii)
    if fluid_cells is None:
        fluid_cells = np.arange(cells.shape[0], dtype=np.int64)
    mesh = Mesh(vertices, cells, bv, bc, bl, bm, fluid_cells, dict(marker_radii))
    if validate:
        _validate(mesh)
    return mesh


def build_annulus(alpha: float, levels: int) -> Mesh:
    """Annulus mesh: a single coarse ring of quads, quad-split `levels` times.

    New boundary vertices created by refinement are snapped to the exact
    circles of radii alpha/(1-alpha) and 1/(1-alpha).
    """
    if levels < 0:
        raise InvalidParameterError(f"levels must be >= 0, got {levels}")
    r_i, r_o = annulus_radii(alpha)
    n = coarse_cell_count(alpha)
    theta = 2.0 * np.pi * np.arange(n) / n
    inner = np.column_stack([r_i * np.cos(theta), r_i * np.sin(theta)])
    outer = np.column_stack([r_o * np.cos(theta), r_o * np.sin(theta)])
    vertices = np.vstack([inner, outer])
    jp = (np.arange(n) + 1) % n
    cells = np.column_stack([np.arange(n), n + np.arange(n), n + jp, jp])
    mesh = _make_mesh(vertices, cells, {"inner": r_i, "outer": r_o})
    for _ in range(levels):
        mesh = refine(mesh)
    return mesh


def refine(mesh: Mesh) -> Mesh:
    """One uniform quad-split refinement.

    Edge midpoints on marked boundary circles are snapped radially onto the
    exact circle; all interior new vertices stay at arithmetic midpoints.
    """
    verts = [mesh.vertices]
    next_id = mesh.n_vertices
    mid_of: dict[tuple[int, int], int] = {}
    snap_edges = {
        tuple(sorted(e)): mesh.marker_radii[m]
        for e, m in zip(mesh.bedge_vertices.tolist(), mesh.bedge_marker.tolist())
    }

    new_pts = []

    def midpoint(a: int, b: int) -> int:
        nonlocal next_id
        key = (a, b) if a < b else (b, a)
        vid = mid_of.get(key)
        if vid is not None:
            return vid
        p = 0.5 * (mesh.vertices[a] + mesh.vertices[b])
        r0 = snap_edges.get(key)
        if r0 is not None:
            p = p * (r0 / np.hypot(p[0], p[1]))
        mid_of[key] = next_id
        new_pts.append(p)
        vid = next_id
        next_id += 1
        return vid

    cells = np.empty((4 * mesh.n_cells, 4), dtype=np.int64)
    for ci, quad in enumerate(mesh.cells):
        v0, v1, v2, v3 = (int(v) for v in quad)
        m01 = midpoint(v0, v1)
        m12 = midpoint(v1, v2)
        m23 = midpoint(v2, v3)
        m30 = midpoint(v3, v0)
        center = next_id
        new_pts.append(0.25 * (mesh.vertices[v0] + mesh.vertices[v1]
                               + mesh.vertices[v2] + mesh.vertices[v3]))
        next_id += 1
        cells[4 * ci + 0] = (v0, m01, center, m30)
        cells[4 * ci + 1] = (m01, v1, m12, center)
        cells[4 * ci + 2] = (center, m12, v2, m23)
        cells[4 * ci + 3] = (m30, center, m23, v3)

    vertices = np.vstack(verts + [np.array(new_pts)])
    fluid = (4 * mesh.fluid_cells[:, None] + np.arange(4)[None, :]).ravel()
    return _make_mesh(vertices, cells, mesh.marker_radii, fluid)


def structured_rectangle(nx: int, ny: int, width: float = 1.0,
                         height: float = 1.0) -> Mesh:
    """Axis-aligned nx-by-ny rectangle mesh (affine cells, generic marker)."""
    x = np.linspace(0.0, width, nx + 1)
    y = np.linspace(0.0, height, ny + 1)
    xx, yy = np.meshgrid(x, y, indexing="ij")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])
    vid = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    cells = np.column_stack([
        vid[:-1, :-1].ravel(), vid[1:, :-1].ravel(),
        vid[1:, 1:].ravel(), vid[:-1, 1:].ravel(),
    ])
    return _make_mesh(vertices, cells, {})


def truncation_radius(alpha: float, m: float, s: float) -> float:
    """Radius of the truncated extension disk for one quadrature node.

    For s <= 0 the disk grows like exp(-s/2); for s > 0 it stays at the
    fixed radius (m + 2)/(1 - alpha).
    """
    if m <= 1.0:
        raise InvalidParameterError(f"truncation parameter must be > 1, got {m}")
    _, r_o = annulus_radii(alpha)
    return _truncation_radius_from(r_o, m, s)


def _truncation_radius_from(r_outer: float, m: float, s: float) -> float:
    if s <= 0.0:
        return (1.0 + math.exp(-0.5 * s) * (m + 1.0)) * r_outer
    return (m + 2.0) * r_outer


def _fill_disk(loop_ids: np.ndarray, loop_xy: np.ndarray, first_new_id: int,
               n_transition: int):
    """Fill the disk bounded by a closed circular vertex loop with quads.

    Standard 5-patch layout: a diamond-shaped core grid plus 4 blended
    patches out to the loop. The loop vertex count must be divisible by 4.
    Returns (new vertex coords, cells with global ids).
    """
    n = loop_ids.shape[0]
    if n % 4 != 0:
        raise MeshConsistencyError(
            f"disk fill needs an azimuthal vertex count divisible by 4, got {n}"
        )
    m = n // 4
    radius = float(np.mean(np.linalg.norm(loop_xy, axis=1)))
    rho = 0.5 * radius

    # Diamond core: corners point toward the loop vertices 0, m, 2m, 3m.
    corner_dirs = loop_xy[[0, m, 2 * m, 3 * m]]
    corner_dirs = corner_dirs / np.linalg.norm(corner_dirs, axis=1, keepdims=True)
    A, B, C, D = rho * corner_dirs

    new_pts = []
    grid = np.empty((m + 1, m + 1), dtype=np.int64)
    nid = first_new_id
    for i in range(m + 1):
        for j in range(m + 1):
            xi, eta = i / m, j / m
            p = (A * (1 - xi) * (1 - eta) + B * xi * (1 - eta)
                 + C * xi * eta + D * (1 - xi) * eta)
            grid[i, j] = nid
            new_pts.append(p)
            nid += 1

    cells = []
    for i in range(m):
        for j in range(m):
            cells.append((grid[i, j], grid[i + 1, j], grid[i + 1, j + 1], grid[i, j + 1]))

    # Diamond perimeter in loop order: corner A -> B -> C -> D -> A.
    perim = np.concatenate([
        grid[:, 0][:-1],            # A -> B   (eta = 0, xi increasing)
        grid[m, :][:-1],            # B -> C   (xi = 1, eta increasing)
        grid[:, m][::-1][:-1],      # C -> D   (eta = 1, xi decreasing)
        grid[0, :][::-1][:-1],      # D -> A   (xi = 0, eta decreasing)
    ])
    all_new = np.array(new_pts)

    # Blended transition layers between the diamond perimeter and the loop.
    nt = n_transition
    layer_prev = perim
    pts_of = {int(v): all_new[int(v) - first_new_id] for v in perim}
    for s in range(1, nt + 1):
        if s == nt:
            layer = loop_ids
        else:
            w = s / nt
            layer = np.arange(nid, nid + n, dtype=np.int64)
            for t in range(n):
                p = (1 - w) * pts_of[int(perim[t])] + w * loop_xy[t]
                new_pts.append(p)
            nid += n
        for t in range(n):
            tp = (t + 1) % n
            cells.append((layer_prev[t], layer[t], layer[tp], layer_prev[tp]))
        layer_prev = layer

    return np.array(new_pts), np.array(cells, dtype=np.int64)


def build_disk(radius: float, levels: int) -> Mesh:
    """5-patch quadrilateral mesh of a disk (used for fractional-solver
    benchmarks and as the inner patch template of extended meshes)."""
    if radius <= 0:
        raise InvalidParameterError(f"radius must be positive, got {radius}")
    n0 = 12
    theta = 2.0 * np.pi * np.arange(n0) / n0
    loop_xy = radius * np.column_stack([np.cos(theta), np.sin(theta)])
    loop_ids = np.arange(n0, dtype=np.int64)
    new_pts, cells = _fill_disk(loop_ids, loop_xy, n0, n_transition=1)
    vertices = np.vstack([loop_xy, new_pts])
    mesh = _make_mesh(vertices, cells, {"outer": radius})
    for _ in range(levels):
        mesh = refine(mesh)
    return mesh


@dataclass(frozen=True)
class ExtendedMeshSet:
    """Annulus (or disk) mesh plus one truncated extension mesh per node.

    All extended meshes share the same topology (and the same cells array);
    only the radii of the graded outer rings differ between nodes. The
    first `base.n_vertices` vertices of every extended mesh coincide with
    the base mesh, so the fluid-dof injection is an identity prefix.
    """

    base: Mesh
    s_nodes: np.ndarray
    meshes: list
    n_rings: int
    grading_h: float

    @property
    def fluid_dof_injection(self) -> np.ndarray:
        return np.arange(self.base.n_vertices, dtype=np.int64)


def build_extended(base: Mesh, alpha: float, m: float, sinc_nodes, h: float,
                   validate: bool = True) -> ExtendedMeshSet:
    """Extend `base` to the truncated disks of every quadrature node.

    The hole of an annular base is filled with a 5-patch disk whose outer
    ring reuses the base inner-circle vertices; outside the base, structured
    rings are placed at exponentially graded radii
    r_j = R_out * exp(j * h0), h0 = log(R_trunc / R_out) * h / m,
    for j = 1 .. ceil(m / h), with the last ring pinned to R_trunc.
    """
    if h <= 0 or h > 1.0:
        raise InvalidParameterError(f"grading step must be in (0, 1], got {h}")
    if m <= 1.0:
        raise InvalidParameterError(f"truncation parameter must be > 1, got {m}")
    s_nodes = np.asarray(sinc_nodes, dtype=np.float64)

    outer_loop = base.boundary_loop("outer")
    outer_xy = base.vertices[outer_loop]
    r_outer = base.marker_radii["outer"]
    unit_out = outer_xy / np.linalg.norm(outer_xy, axis=1, keepdims=True)
    n_out = outer_loop.shape[0]

    parts = [base.vertices]
    cells_parts = [base.cells]
    next_id = base.n_vertices

    if "inner" in base.marker_radii:
        inner_loop = base.boundary_loop("inner")
        inner_xy = base.vertices[inner_loop]
        n_in = inner_loop.shape[0]
        if n_in % 4 != 0:
            raise MeshConsistencyError(
                f"inner boundary vertex count {n_in} not divisible by 4; "
                f"refine the base mesh at least twice before extending"
            )
        arc = 2.0 * np.pi * base.marker_radii["inner"] / n_in
        gap = 0.55 * base.marker_radii["inner"]
        n_transition = max(1, math.ceil(gap / (3.0 * arc)))
        disk_pts, disk_cells = _fill_disk(inner_loop, inner_xy, next_id, n_transition)
        parts.append(disk_pts)
        cells_parts.append(disk_cells)
        next_id += disk_pts.shape[0]

    n_rings = max(1, math.ceil(m / h))
    ring_ids = np.arange(next_id, next_id + n_rings * n_out,
                         dtype=np.int64).reshape(n_rings, n_out)
    prev = outer_loop
    ring_cells = []
    for j in range(n_rings):
        layer = ring_ids[j]
        tp = np.roll(np.arange(n_out), -1)
        ring_cells.append(np.column_stack([prev, layer, layer[tp], prev[tp]]))
        prev = layer
    cells_parts.append(np.vstack(ring_cells))
    cells = np.ascontiguousarray(np.vstack(cells_parts), dtype=np.int64)

    fixed = np.vstack(parts)
    fluid = np.arange(base.n_cells, dtype=np.int64)
    bedge = None  # boundary topology is shared by all nodes
    by_radius: dict[float, Mesh] = {}
    meshes = []
    for s in s_nodes:
        r_trunc = _truncation_radius_from(r_outer, m, float(s))
        mesh = by_radius.get(r_trunc)
        if mesh is None:
            h0 = math.log(r_trunc / r_outer) * h / m
            radii = r_outer * np.exp(h0 * np.arange(1, n_rings + 1))
            radii[-1] = r_trunc
            ring_xy = radii[:, None, None] * unit_out[None, :, :]
            vertices = np.vstack([fixed, ring_xy.reshape(-1, 2)])
            if bedge is None:
                mesh = _make_mesh(vertices, cells, {"truncation": r_trunc},
                                  fluid_cells=fluid, validate=validate)
                bedge = (mesh.bedge_vertices, mesh.bedge_cell,
                         mesh.bedge_local, mesh.bedge_marker)
            else:
                mesh = Mesh(vertices, cells, *bedge, fluid,
                            {"truncation": r_trunc})
                if validate:
                    det = jacobian_determinants(mesh, 3)
                    if not np.all(det > 0):
                        raise MeshConsistencyError(
                            f"extended mesh for node s={s:.3f} has inverted cells"
                        )
            by_radius[r_trunc] = mesh
        meshes.append(mesh)

    return ExtendedMeshSet(base, s_nodes, meshes, n_rings, h)
