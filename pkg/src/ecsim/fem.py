"""Q1/Q2 finite elements on quadrilateral meshes.

Assembly uses fixed tensor-Gauss rules: 3x3 for pure Q1 forms and 4x4 for
anything involving Q2 or mixed integrands. Geometry is always the bilinear
cell map, so Q2 spaces are subparametric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import MeshConsistencyError, SolverError
from .mesh import Mesh, _bilinear_coeffs

Q1_ORDER = 3
Q2_ORDER = 4

# Reference nodes, unit square, corners counterclockwise.
_Q1_NODES = np.array([(0, 0), (1, 0), (1, 1), (0, 1)], dtype=float)
_Q2_NODES = np.array(
    [(0, 0), (1, 0), (1, 1), (0, 1),
     (0.5, 0), (1, 0.5), (0.5, 1), (0, 0.5),
     (0.5, 0.5)], dtype=float)

# Local edge k runs from corner k to corner (k+1) % 4.
_EDGE_CORNERS = ((0, 1), (1, 2), (2, 3), (3, 0))


def gauss_1d(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


def tensor_gauss(order: int):
    """Tensor Gauss rule on the unit square: (points (nq,2), weights (nq,))."""
    x, w = gauss_1d(order)
    xi, eta = np.meshgrid(x, x, indexing="ij")
    wq = np.outer(w, w).ravel()
    return np.column_stack([xi.ravel(), eta.ravel()]), wq


def _lag1(t):
    return np.stack([1.0 - t, t]), np.stack([-np.ones_like(t), np.ones_like(t)])


def _lag2(t):
    vals = np.stack([(2 * t - 1) * (t - 1), 4 * t * (1 - t), t * (2 * t - 1)])
    ders = np.stack([4 * t - 3, 4 - 8 * t, 4 * t - 1])
    return vals, ders


_IDX1 = [(0, 0), (1, 0), (1, 1), (0, 1)]
_IDX2 = [(0, 0), (2, 0), (2, 2), (0, 2),
         (1, 0), (2, 1), (1, 2), (0, 1),
         (1, 1)]


def shape_functions(degree: int, pts: np.ndarray):
    """Values (nb, nq) and reference gradients (nb, nq, 2) at `pts`."""
    xi, eta = pts[:, 0], pts[:, 1]
    if degree == 1:
        vx, dx = _lag1(xi)
        vy, dy = _lag1(eta)
        index = _IDX1
    elif degree == 2:
        vx, dx = _lag2(xi)
        vy, dy = _lag2(eta)
        index = _IDX2
    else:
        raise ValueError(f"unsupported degree {degree}")
    vals = np.stack([vx[i] * vy[j] for i, j in index])
    grads = np.stack([np.stack([dx[i] * vy[j], vx[i] * dy[j]], axis=-1)
                      for i, j in index])
    return vals, grads


@dataclass
class CellGeometry:
    """Per-cell map data at one quadrature rule: weights include |det J|."""

    points: np.ndarray      # (nc, nq, 2) physical quadrature points
    weights: np.ndarray     # (nc, nq) w_q * det J
    inv_jt: np.ndarray      # (nc, nq, 2, 2) inverse-transpose Jacobian


def cell_geometry(mesh: Mesh, order: int, cells=None) -> CellGeometry:
    pts, wq = tensor_gauss(order)
    corners = mesh.cell_corners() if cells is None else mesh.vertices[mesh.cells[cells]]
    a, b, c, d = _bilinear_coeffs(corners)
    xi = pts[:, 0][None, :, None]
    eta = pts[:, 1][None, :, None]
    x = a[:, None, :] + b[:, None, :] * xi + c[:, None, :] * eta + d[:, None, :] * xi * eta
    gx = b[:, None, :] + d[:, None, :] * eta           # d x / d xi
    ge = c[:, None, :] + d[:, None, :] * xi            # d x / d eta
    det = gx[..., 0] * ge[..., 1] - gx[..., 1] * ge[..., 0]
    inv_jt = np.empty(x.shape[:2] + (2, 2))
    inv_jt[..., 0, 0] = ge[..., 1] / det
    inv_jt[..., 0, 1] = -gx[..., 1] / det
    inv_jt[..., 1, 0] = -ge[..., 0] / det
    inv_jt[..., 1, 1] = gx[..., 0] / det
    return CellGeometry(x, wq[None, :] * det, inv_jt)


class FunctionSpace:
    """Continuous Q1 or Q2 space over a mesh, scalar or 2-vector valued.

    Vector spaces store the x-component block first: global dof of
    component a, scalar dof i is a * n_scalar_dofs + i.
    """

    def __init__(self, mesh: Mesh, degree: int, components: int = 1):
        if degree not in (1, 2):
            raise ValueError(f"unsupported degree {degree}")
        if components not in (1, 2):
            raise ValueError(f"components must be 1 or 2, got {components}")
        self.mesh = mesh
        self.degree = degree
        self.components = components
        self.quad_order = Q1_ORDER if degree == 1 else Q2_ORDER
        self._build_dofs()
        self._geom: dict[int, CellGeometry] = {}
        self._basis: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._bbox = None

    def _build_dofs(self):
        mesh = self.mesh
        if self.degree == 1:
            self.cell_dofs = mesh.cells.copy()
            self.n_scalar = mesh.n_vertices
            self.dof_coords = mesh.vertices.copy()
            self._edge_dof = {}
        else:
            edge_dof: dict[tuple[int, int], int] = {}
            nv = mesh.n_vertices
            nxt = nv
            cd = np.empty((mesh.n_cells, 9), dtype=np.int64)
            for ci, quad in enumerate(mesh.cells):
                cd[ci, :4] = quad
                for k, (la, lb) in enumerate(_EDGE_CORNERS):
                    a, b = int(quad[la]), int(quad[lb])
                    key = (a, b) if a < b else (b, a)
                    dof = edge_dof.get(key)
                    if dof is None:
                        dof = nxt
                        edge_dof[key] = dof
                        nxt += 1
                    cd[ci, 4 + k] = dof
            cd[:, 8] = nxt + np.arange(mesh.n_cells)
            self.cell_dofs = cd
            self.n_scalar = nxt + mesh.n_cells
            coords = np.empty((self.n_scalar, 2))
            coords[:nv] = mesh.vertices
            for (a, b), dof in edge_dof.items():
                coords[dof] = 0.5 * (mesh.vertices[a] + mesh.vertices[b])
            corners = mesh.cell_corners()
            coords[nxt:] = corners.mean(axis=1)
            self.dof_coords = coords
            self._edge_dof = edge_dof

    @property
    def n_dofs(self) -> int:
        return self.components * self.n_scalar

    def geometry(self, order: int | None = None) -> CellGeometry:
        order = order or self.quad_order
        if order not in self._geom:
            self._geom[order] = cell_geometry(self.mesh, order)
        return self._geom[order]

    def basis(self, order: int | None = None):
        order = order or self.quad_order
        key = order
        if key not in self._basis:
            pts, _ = tensor_gauss(order)
            self._basis[key] = shape_functions(self.degree, pts)
        return self._basis[key]

    def boundary_scalar_dofs(self, marker: str | None = None) -> np.ndarray:
        """Scalar dofs lying on (marker-selected) boundary edges."""
        mesh = self.mesh
        sel = np.arange(mesh.bedge_vertices.shape[0]) if marker is None else \
            np.flatnonzero(mesh.bedge_marker == marker)
        dofs = set()
        for e in sel:
            a, b = (int(v) for v in mesh.bedge_vertices[e])
            dofs.add(a)
            dofs.add(b)
            if self.degree == 2:
                key = (a, b) if a < b else (b, a)
                dofs.add(self._edge_dof[key])
        return np.array(sorted(dofs), dtype=np.int64)

    def boundary_dofs(self, marker: str | None = None) -> np.ndarray:
        """Boundary dofs expanded over components."""
        sd = self.boundary_scalar_dofs(marker)
        if self.components == 1:
            return sd
        return np.concatenate([sd + a * self.n_scalar for a in range(self.components)])

    def interior_scalar_dofs(self) -> np.ndarray:
        mask = np.ones(self.n_scalar, dtype=bool)
        mask[self.boundary_scalar_dofs()] = False
        return np.flatnonzero(mask)

    def domain_area(self) -> float:
        return float(self.geometry().weights.sum())

    # -- field evaluation ------------------------------------------------

    def interpolate(self, fn) -> np.ndarray:
        """Nodal interpolation of a callable fn(x, y) (scalar spaces) or
        fn(x, y) -> (2,) arrays (vector spaces)."""
        x, y = self.dof_coords[:, 0], self.dof_coords[:, 1]
        vals = np.asarray(fn(x, y))
        if self.components == 1:
            return vals.astype(float)
        return np.concatenate([vals[0], vals[1]]).astype(float)

    def _cell_bboxes(self):
        if self._bbox is None:
            corners = self.mesh.cell_corners()
            self._bbox = (corners.min(axis=1), corners.max(axis=1))
        return self._bbox

    def locate(self, points: np.ndarray):
        """Find (cell, reference coords) for each query point."""
        points = np.atleast_2d(points)
        lo, hi = self._cell_bboxes()
        corners = self.mesh.cell_corners()
        a, b, c, d = _bilinear_coeffs(corners)
        cells = np.empty(points.shape[0], dtype=np.int64)
        refs = np.empty((points.shape[0], 2))
        for i, p in enumerate(points):
            pad = 1e-9 + 1e-9 * np.abs(p).max()
            cand = np.flatnonzero((lo[:, 0] <= p[0] + pad) & (hi[:, 0] >= p[0] - pad)
                                  & (lo[:, 1] <= p[1] + pad) & (hi[:, 1] >= p[1] - pad))
            found = False
            for ci in cand:
                ref = np.array([0.5, 0.5])
                for _ in range(12):
                    xi, eta = ref
                    r = a[ci] + b[ci] * xi + c[ci] * eta + d[ci] * xi * eta - p
                    if abs(r[0]) + abs(r[1]) < 1e-13 * (1 + abs(p).max()):
                        break
                    jac = np.column_stack([b[ci] + d[ci] * eta, c[ci] + d[ci] * xi])
                    ref = ref - np.linalg.solve(jac, r)
                if np.all(ref > -1e-8) and np.all(ref < 1 + 1e-8):
                    resid = a[ci] + b[ci] * ref[0] + c[ci] * ref[1] + d[ci] * ref[0] * ref[1] - p
                    if abs(resid[0]) + abs(resid[1]) < 1e-9 * (1 + abs(p).max()):
                        cells[i] = ci
                        refs[i] = np.clip(ref, 0.0, 1.0)
                        found = True
                        break
            if not found:
                raise MeshConsistencyError(f"point {p} not found in mesh")
        return cells, refs

    def evaluate(self, vec: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Point values of a coefficient vector; (np,) or (np, 2)."""
        cells, refs = self.locate(points)
        vals, _ = shape_functions(self.degree, refs)
        out = []
        for a_comp in range(self.components):
            comp = vec[a_comp * self.n_scalar:(a_comp + 1) * self.n_scalar]
            local = comp[self.cell_dofs[cells]]          # (np, nb)
            out.append(np.einsum("pb,bp->p", local, vals))
        return out[0] if self.components == 1 else np.column_stack(out)

    def evaluate_grad(self, vec: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Point gradients; (np, 2) scalar or (np, 2, 2) with [p, comp, deriv]."""
        cells, refs = self.locate(points)
        _, gref = shape_functions(self.degree, refs)      # (nb, np, 2)
        corners = self.mesh.vertices[self.mesh.cells[cells]]
        _, b, c, d = _bilinear_coeffs(corners)
        gx = b + d * refs[:, 1:2]
        ge = c + d * refs[:, 0:1]
        det = gx[:, 0] * ge[:, 1] - gx[:, 1] * ge[:, 0]
        inv_jt = np.empty((refs.shape[0], 2, 2))
        inv_jt[:, 0, 0] = ge[:, 1] / det
        inv_jt[:, 0, 1] = -gx[:, 1] / det
        inv_jt[:, 1, 0] = -ge[:, 0] / det
        inv_jt[:, 1, 1] = gx[:, 0] / det
        out = []
        for a_comp in range(self.components):
            comp = vec[a_comp * self.n_scalar:(a_comp + 1) * self.n_scalar]
            local = comp[self.cell_dofs[cells]]
            gradref = np.einsum("pb,bpr->pr", local, gref)
            out.append(np.einsum("pij,pj->pi", inv_jt, gradref))
        return out[0] if self.components == 1 else np.stack(out, axis=1)


# -- assembly ------------------------------------------------------------


def _scatter_matrix(space: FunctionSpace, local: np.ndarray, cells) -> sp.csr_matrix:
    cd = space.cell_dofs if cells is None else space.cell_dofs[cells]
    nb = cd.shape[1]
    rows = np.repeat(cd, nb, axis=1).ravel()
    cols = np.tile(cd, (1, nb)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)),
                        shape=(space.n_scalar, space.n_scalar))
    return mat.tocsr()


def _expand_blocks(space: FunctionSpace, mat: sp.csr_matrix) -> sp.csr_matrix:
    if space.components == 1:
        return mat
    return sp.block_diag([mat] * space.components, format="csr")


def assemble_mass(space: FunctionSpace, restrict_to=None, order=None) -> sp.csr_matrix:
    """Mass matrix; `restrict_to` limits integration to a cell subset."""
    order = order or space.quad_order
    geo = space.geometry(order) if restrict_to is None else \
        cell_geometry(space.mesh, order, restrict_to)
    vals, _ = space.basis(order)
    local = np.einsum("cq,iq,jq->cij", geo.weights, vals, vals)
    return _expand_blocks(space, _scatter_matrix(space, local, restrict_to))


def local_stiffness(space: FunctionSpace, order=None) -> np.ndarray:
    """Per-cell scalar stiffness blocks (nc, nb, nb)."""
    order = order or space.quad_order
    geo = space.geometry(order)
    _, gref = space.basis(order)
    g = np.einsum("cqab,iqb->ciqa", geo.inv_jt, gref)
    return np.einsum("cq,ciqa,cjqa->cij", geo.weights, g, g)


def assemble_stiffness(space: FunctionSpace, restrict_to=None, order=None) -> sp.csr_matrix:
    order = order or space.quad_order
    geo = space.geometry(order) if restrict_to is None else \
        cell_geometry(space.mesh, order, restrict_to)
    _, gref = space.basis(order)
    g = np.einsum("cqab,iqb->ciqa", geo.inv_jt, gref)
    local = np.einsum("cq,ciqa,cjqa->cij", geo.weights, g, g)
    return _expand_blocks(space, _scatter_matrix(space, local, restrict_to))


def assemble_load(space: FunctionSpace, fn, order=None) -> np.ndarray:
    """Load vector of a pointwise callable against all test functions."""
    order = order or space.quad_order
    geo = space.geometry(order)
    vals, _ = space.basis(order)
    x, y = geo.points[..., 0], geo.points[..., 1]
    out = np.zeros(space.n_dofs)
    f = fn(x, y)
    if space.components == 1:
        local = np.einsum("cq,iq,cq->ci", geo.weights, vals, np.asarray(f))
        np.add.at(out, space.cell_dofs, local)
    else:
        for a_comp in range(2):
            local = np.einsum("cq,iq,cq->ci", geo.weights, vals, np.asarray(f[a_comp]))
            np.add.at(out, space.cell_dofs + a_comp * space.n_scalar, local)
    return out


def values_at_quadrature(space: FunctionSpace, vec: np.ndarray, order=None):
    """Field values at quadrature points: (nc, nq) or (nc, nq, 2)."""
    order = order or space.quad_order
    vals, _ = space.basis(order)
    if space.components == 1:
        return np.einsum("iq,ci->cq", vals, vec[space.cell_dofs])
    comps = []
    for a_comp in range(2):
        comp = vec[a_comp * space.n_scalar:(a_comp + 1) * space.n_scalar]
        comps.append(np.einsum("iq,ci->cq", vals, comp[space.cell_dofs]))
    return np.stack(comps, axis=-1)


def gradients_at_quadrature(space: FunctionSpace, vec: np.ndarray, order=None):
    """Field gradients at quadrature points: (nc, nq, 2) or (nc, nq, 2, 2)
    indexed [cell, point, component, derivative]."""
    order = order or space.quad_order
    geo = space.geometry(order)
    _, gref = space.basis(order)
    g = np.einsum("cqab,iqb->ciqa", geo.inv_jt, gref)
    if space.components == 1:
        return np.einsum("ciqa,ci->cqa", g, vec[space.cell_dofs])
    comps = []
    for a_comp in range(2):
        comp = vec[a_comp * space.n_scalar:(a_comp + 1) * space.n_scalar]
        comps.append(np.einsum("ciqa,ci->cqa", g, comp[space.cell_dofs]))
    return np.stack(comps, axis=2)


def integrate(space: FunctionSpace, vec: np.ndarray, order=None) -> float:
    """Integral of a scalar coefficient field over the mesh."""
    order = order or space.quad_order
    geo = space.geometry(order)
    vq = values_at_quadrature(space, vec, order)
    return float(np.einsum("cq,cq->", geo.weights, vq))


def integrate_grad_dot(space: FunctionSpace, vec_a: np.ndarray, vec_b: np.ndarray,
                       order=None) -> float:
    """Integral of grad(a) . grad(b) for two scalar fields."""
    ga = gradients_at_quadrature(space, vec_a, order)
    gb = gradients_at_quadrature(space, vec_b, order)
    geo = space.geometry(order or space.quad_order)
    return float(np.einsum("cq,cqa,cqa->", geo.weights, ga, gb))


def apply_dirichlet(matrix: sp.csr_matrix, rhs: np.ndarray, dofs: np.ndarray,
                    value: float = 0.0):
    """Symmetric elimination of Dirichlet dofs; returns (matrix, rhs)."""
    n = matrix.shape[0]
    keep = np.ones(n)
    keep[dofs] = 0.0
    if value != 0.0:
        x = np.zeros(n)
        x[dofs] = value
        rhs = rhs - matrix @ x
    d_keep = sp.diags(keep)
    fixed = np.zeros(n)
    fixed[dofs] = 1.0
    out = d_keep @ matrix @ d_keep + sp.diags(fixed)
    rhs = keep * rhs
    rhs[dofs] = value
    return out.tocsr(), rhs


def project_l2(space: FunctionSpace, fn, mean_zero: bool = False,
               mass: sp.csr_matrix | None = None, order=None) -> np.ndarray:
    """L2 projection of a pointwise callable onto the space."""
    from .linalg import factorize

    mass = assemble_mass(space) if mass is None else mass
    load = assemble_load(space, fn, order=order)
    x = factorize(mass.tocsc()).solve(load)
    if mean_zero:
        one = np.ones(space.n_dofs)
        x = x - integrate(space, x) / space.domain_area() * one
    return x


# -- boundary edge machinery (used by the charge transport scheme) --------


_EDGE_REF = {
    0: lambda t: np.column_stack([t, np.zeros_like(t)]),
    1: lambda t: np.column_stack([np.ones_like(t), t]),
    2: lambda t: np.column_stack([1.0 - t, np.ones_like(t)]),
    3: lambda t: np.column_stack([np.zeros_like(t), 1.0 - t]),
}


@dataclass
class BoundaryEdgeData:
    """Quadrature data for one-sided boundary integrals of Q1 fields."""

    cells: np.ndarray        # (nbe,)
    dof_a: np.ndarray        # (nbe,) first edge dof in traversal order
    dof_b: np.ndarray        # (nbe,)
    normals: np.ndarray      # (nbe, 2) outward unit normals
    weights: np.ndarray      # (nbe, ng) 1D weights * edge length
    test_a: np.ndarray       # (ng,) hat value of dof_a at quad points
    test_b: np.ndarray       # (ng,)
    inv_jt: np.ndarray       # (nbe, ng, 2, 2) cell map data at edge points
    gref: np.ndarray         # (nbe, ng, nb, 2) reference gradients


def boundary_edge_data(space: FunctionSpace, order: int = 3) -> BoundaryEdgeData:
    if space.degree != 1 or space.components != 1:
        raise ValueError("boundary edge data implemented for scalar Q1 spaces")
    mesh = space.mesh
    t, w = gauss_1d(order)
    nbe = mesh.bedge_vertices.shape[0]
    ng = order

    av = mesh.vertices[mesh.bedge_vertices[:, 0]]
    bv = mesh.vertices[mesh.bedge_vertices[:, 1]]
    tang = bv - av
    length = np.linalg.norm(tang, axis=1)
    normals = np.column_stack([tang[:, 1], -tang[:, 0]]) / length[:, None]
    weights = np.outer(length, w)

    corners = mesh.vertices[mesh.cells[mesh.bedge_cell]]
    a, b, c, d = _bilinear_coeffs(corners)
    inv_jt = np.empty((nbe, ng, 2, 2))
    gref = np.empty((nbe, ng, 4, 2))
    for k in range(4):
        sel = np.flatnonzero(mesh.bedge_local == k)
        if sel.size == 0:
            continue
        ref = _EDGE_REF[k](t)                      # (ng, 2)
        _, g = shape_functions(1, ref)             # (4, ng, 2)
        gref[sel] = np.transpose(g, (1, 0, 2))[None, :, :, :]
        xi = ref[:, 0][None, :, None]
        eta = ref[:, 1][None, :, None]
        gx = b[sel][:, None, :] + d[sel][:, None, :] * eta
        ge = c[sel][:, None, :] + d[sel][:, None, :] * xi
        det = gx[..., 0] * ge[..., 1] - gx[..., 1] * ge[..., 0]
        inv_jt[sel, :, 0, 0] = ge[..., 1] / det
        inv_jt[sel, :, 0, 1] = -gx[..., 1] / det
        inv_jt[sel, :, 1, 0] = -ge[..., 0] / det
        inv_jt[sel, :, 1, 1] = gx[..., 0] / det

    return BoundaryEdgeData(
        cells=mesh.bedge_cell.copy(),
        dof_a=mesh.bedge_vertices[:, 0].copy(),
        dof_b=mesh.bedge_vertices[:, 1].copy(),
        normals=normals,
        weights=weights,
        test_a=1.0 - t,
        test_b=t,
        inv_jt=inv_jt,
        gref=gref,
    )


def boundary_flux_load(space: FunctionSpace, edata: BoundaryEdgeData,
                       vec: np.ndarray) -> np.ndarray:
    """Assemble the one-sided boundary term: integral of (grad vec . n) phi
    over the domain boundary, using the owning cell's gradient."""
    local = vec[space.cell_dofs[edata.cells]]                       # (nbe, 4)
    gradref = np.einsum("egbr,eb->egr", edata.gref, local)          # (nbe, ng, 2)
    grad = np.einsum("egij,egj->egi", edata.inv_jt, gradref)
    flux = np.einsum("egi,ei->eg", grad, edata.normals)             # (nbe, ng)
    wflux = edata.weights * flux
    out = np.zeros(space.n_scalar)
    np.add.at(out, edata.dof_a, wflux @ edata.test_a)
    np.add.at(out, edata.dof_b, wflux @ edata.test_b)
    return out
