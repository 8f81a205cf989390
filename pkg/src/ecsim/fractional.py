"""Nonlocal electric-potential solvers for the two electrode configurations.

Both configurations reduce the potential trace on the film to a fractional
half-Laplacian problem. The infinite-electrode case uses the spectral
definition and is solved by an exponentially convergent sinc quadrature of
the resolvent integral; the slim-electrode case uses the integral
definition, realized through truncated extension meshes and an outer
conjugate-gradient iteration (or a precomputed dense solve operator).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import InvalidParameterError, SolverError
from .fem import FunctionSpace, assemble_mass, assemble_stiffness
from .linalg import Factorization, conjugate_gradient, factorize
from .mesh import ExtendedMeshSet, annulus_radii

log = logging.getLogger(__name__)


# -- special functions -----------------------------------------------------


def hyp2f1_half(x):
    """Gauss hypergeometric 2F1(1/2, 1/2; 1; x) for x in [0, 1).

    Computed as 1 / agm(1, sqrt(1-x)) via the arithmetic-geometric mean,
    which is uniformly accurate up to the logarithmic singularity at 1.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0) or np.any(x >= 1.0):
        raise InvalidParameterError("hyp2f1_half requires 0 <= x < 1")
    a = np.ones_like(x)
    b = np.sqrt(1.0 - x)
    for _ in range(60):
        a, b = 0.5 * (a + b), np.sqrt(a * b)
        if np.max(np.abs(a - b)) < 1e-17 * np.max(a):
            break
    out = 1.0 / a
    return float(out) if out.ndim == 0 else out


def electrode_potential(r, alpha: float):
    """Harmonic radial voltage profile: 1 on the inner circle, 0 on the outer."""
    r = np.asarray(r, dtype=float)
    out = np.log(r * (1.0 - alpha)) / math.log(alpha)
    return float(out) if out.ndim == 0 else out


def _bessel_overlap(a, b):
    """Closed form of the integral of J0(a k) J0(b k) over k in (0, inf).

    Symmetric in (a, b); logarithmically singular at a == b.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    if np.any(lo == hi):
        raise InvalidParameterError("Bessel overlap diverges at equal radii")
    return hyp2f1_half((lo / hi) ** 2) / hi


def electrode_flux(r, alpha: float):
    """Normal electric-field trace of the slim electrode potential on the film.

    Diverges logarithmically at both electrode rims; defined for all other
    positive radii (points of a polygonal mesh may fall slightly inside the
    inner rim).
    """
    r_i, r_o = annulus_radii(alpha)
    r = np.asarray(r, dtype=float)
    out = -(_bessel_overlap(r, r_o) - _bessel_overlap(r, r_i)) / math.log(alpha)
    return float(out) if out.ndim == 0 else out


# -- sinc quadrature rule ----------------------------------------------------


@dataclass(frozen=True)
class SincRule:
    """Quadrature nodes s_j = j*k, j = -n_minus .. n_plus.

    Default node counts follow ceil(pi^2 / k^2) on both sides.
    """

    k: float
    n_minus: int
    n_plus: int

    def __init__(self, k: float, n_minus: int | None = None, n_plus: int | None = None):
        if k <= 0:
            raise InvalidParameterError(f"sinc step must be positive, got {k}")
        default = math.ceil(math.pi**2 / k**2)
        n_minus = default if n_minus is None else n_minus
        n_plus = default if n_plus is None else n_plus
        if n_minus < 1 or n_plus < 1:
            raise InvalidParameterError("sinc node counts must be >= 1")
        object.__setattr__(self, "k", float(k))
        object.__setattr__(self, "n_minus", int(n_minus))
        object.__setattr__(self, "n_plus", int(n_plus))

    @property
    def n_nodes(self) -> int:
        return self.n_minus + self.n_plus + 1

    def nodes(self) -> np.ndarray:
        return self.k * np.arange(-self.n_minus, self.n_plus + 1)


# -- spectral solver (infinite electrodes) ----------------------------------


class SpectralFracSolver:
    """Inverse half-power of the Dirichlet Laplacian on the film mesh.

    Realizes psi0 = (2k/pi) * sum_j e^{s_j} Phi_j where each Phi_j solves
    (M + e^{2 s_j} K) Phi_j = M q with homogeneous Dirichlet values on the
    whole film boundary. The per-node factorizations depend only on the
    mesh and are cached for reuse across time steps; node solves are
    mutually independent and summed in fixed node order.
    """

    def __init__(self, space: FunctionSpace, rule: SincRule):
        if space.degree != 1 or space.components != 1:
            raise InvalidParameterError("spectral solver expects a scalar Q1 space")
        self.space = space
        self.rule = rule
        self.mass_full = assemble_mass(space)
        stiff_full = assemble_stiffness(space)
        self.interior = space.interior_scalar_dofs()
        ix = np.ix_(self.interior, self.interior)
        m_int = self.mass_full[self.interior][:, self.interior].tocsc()
        k_int = stiff_full[self.interior][:, self.interior].tocsc()
        self._m_int = m_int
        self._k_int = k_int
        s = rule.nodes()
        self.factors = [factorize(m_int + math.exp(2.0 * sj) * k_int) for sj in s]
        self._weights = (2.0 * rule.k / math.pi) * np.exp(s)
        self._dense_inverse = None
        del ix

    def node_contributions(self, load_int: np.ndarray):
        """Per-node weighted resolvent solves (mainly for diagnostics/tests)."""
        return [w * f.solve(load_int) for w, f in zip(self._weights, self.factors)]

    def solve_from_load(self, load_int: np.ndarray, x0=None) -> np.ndarray:
        if self._dense_inverse is not None:
            return self._dense_inverse @ load_int
        out = np.zeros_like(load_int)
        for w, f in zip(self._weights, self.factors):
            out += w * f.solve(load_int)
        return out

    def solve(self, q_full: np.ndarray) -> np.ndarray:
        """Potential field (zero on the boundary) for a charge field q."""
        load = (self.mass_full @ q_full)[self.interior]
        psi = np.zeros(self.space.n_scalar)
        psi[self.interior] = self.solve_from_load(load)
        return psi

    def build_dense(self, chunk: int = 1024) -> None:
        """Precompute the dense solve operator (load -> interior field)."""
        n = self.interior.size
        dense = np.zeros((n, n))
        eye = np.eye(n)
        for w, f in zip(self._weights, self.factors):
            for lo in range(0, n, chunk):
                hi = min(lo + chunk, n)
                dense[:, lo:hi] += w * f.solve(eye[:, lo:hi])
        self._dense_inverse = dense


# -- integral solver (slim electrodes) ---------------------------------------


class IntegralFracSolver:
    """Half-Laplacian solve in the integral (zero-extension) formulation.

    The operator action on a film field psi accumulates, over quadrature
    nodes, extension solves (e^{s_j} M_ext + K_ext) Phi_j = -e^{s_j} M psi
    on the truncated meshes with Dirichlet data only on the truncation
    circle, then pairs (k/pi) e^{s_j/2} (Phi_j + psi) against film test
    functions. The outer problem is solved either by CG on that operator
    or through a precomputed dense inverse.

    Node solves use the algebraically equivalent unknown
    chi_j := Phi_j + (zero-extended psi), which satisfies
    (e^{s_j} M_ext + K_ext) chi_j = K psi and is the accumulated quantity
    itself; this avoids the catastrophic Phi_j ~ -psi cancellation that
    otherwise amplifies roundoff by e^{s_j/2} on the positive tail.
    """

    def __init__(self, space: FunctionSpace, extset: ExtendedMeshSet,
                 rule: SincRule, cg_tol: float = 1e-8, cg_maxiter: int = 500,
                 keep_factors: bool | None = None,
                 factor_budget_bytes: float = 2.5e9):
        if extset.s_nodes.shape[0] != rule.n_nodes:
            raise InvalidParameterError("extended mesh set does not match sinc rule")
        self.space = space
        self.extset = extset
        self.rule = rule
        self.cg_tol = cg_tol
        self.cg_maxiter = cg_maxiter
        self.mass_full = assemble_mass(space)
        self.stiff_full = assemble_stiffness(space)
        self.interior = space.interior_scalar_dofs()
        self._mass_int_rows = self.mass_full[self.interior, :].tocsr()

        self.n_base = extset.base.n_vertices
        mesh0 = extset.meshes[0]
        trunc = mesh0.boundary_vertices("truncation")
        n_ext = mesh0.n_vertices
        self.n_active = n_ext - trunc.size
        # truncation vertices occupy the tail of the vertex numbering, so
        # active dofs are the contiguous prefix [0, n_active)
        if trunc.min() != self.n_active or trunc.size != n_ext - self.n_active:
            raise SolverError("truncation circle dofs are not a contiguous tail")

        s = extset.s_nodes
        self._w_outer = (rule.k / math.pi) * np.exp(0.5 * s)
        self._factors = None
        self._dense_inverse = None
        self._dense_cho = None

        if keep_factors is None:
            keep_factors = self._estimate_keep(factor_budget_bytes)
        if keep_factors:
            self._factors = list(self._iter_factors())

    # -- node machinery ----------------------------------------------------

    def _assemblies(self):
        """(mesh id -> (M_ext, K_ext)) generator helper, one mesh at a time."""
        cache_key, cache_val = None, None

        def get(mesh):
            nonlocal cache_key, cache_val
            if cache_key is not id(mesh):
                space_e = FunctionSpace(mesh, 1)
                cache_val = (assemble_mass(space_e).tocsr(),
                             assemble_stiffness(space_e).tocsr())
                cache_key = id(mesh)
            return cache_val

        return get

    def _node_matrix(self, get, idx: int) -> sp.csc_matrix:
        mesh = self.extset.meshes[idx]
        m_e, k_e = get(mesh)
        s = float(self.extset.s_nodes[idx])
        full = (math.exp(s) * m_e + k_e).tocsr()
        act = full[: self.n_active, : self.n_active]
        return act.tocsc()

    def _iter_factors(self):
        get = self._assemblies()
        for idx in range(self.extset.s_nodes.shape[0]):
            yield factorize(self._node_matrix(get, idx))

    def _estimate_keep(self, budget: float) -> bool:
        get = self._assemblies()
        f0 = factorize(self._node_matrix(get, 0))
        total = f0.nnz * 16.0 * self.extset.s_nodes.shape[0]
        log.debug("estimated factor storage %.2f GB", total / 1e9)
        return total <= budget

    # -- operator ------------------------------------------------------------

    def apply(self, psi_int: np.ndarray) -> np.ndarray:
        """Dual vector of the fractional bilinear form against interior dofs."""
        if self._factors is None:
            log.warning("materializing %d extension factorizations beyond the "
                        "memory budget estimate", self.extset.s_nodes.shape[0])
            self._factors = list(self._iter_factors())
        psi_pad = np.zeros(self.n_base)
        psi_pad[self.interior] = psi_int
        kq = self.stiff_full @ psi_pad
        field_sum = np.zeros(self.n_base)
        rhs = np.zeros(self.n_active)
        for j, fact in enumerate(self._factors):
            rhs[:] = 0.0
            rhs[: self.n_base] = kq
            chi = fact.solve(rhs)
            field_sum += self._w_outer[j] * chi[: self.n_base]
        return self._mass_int_rows @ field_sum

    def solve_from_load(self, load_int: np.ndarray, x0: np.ndarray | None = None):
        if self._dense_inverse is not None:
            return self._dense_inverse @ load_int
        if self._dense_cho is not None:
            return sla.cho_solve(self._dense_cho, load_int)
        x, iters = conjugate_gradient(self.apply, load_int, x0=x0,
                                      rtol=self.cg_tol, maxiter=self.cg_maxiter)
        log.debug("integral solve: %d CG iterations", iters)
        return x

    def solve(self, rhs_field_full: np.ndarray, x0: np.ndarray | None = None):
        """Film potential (zero on the film boundary) for a given source field."""
        load = (self.mass_full @ rhs_field_full)[self.interior]
        psi = np.zeros(self.space.n_scalar)
        psi[self.interior] = self.solve_from_load(load, x0=x0)
        return psi

    # -- dense precompute ------------------------------------------------------

    def build_dense(self, chunk: int = 512, explicit_inverse_limit: int = 8000):
        """Assemble the dense operator column by column and factor it.

        Streams one extension factorization at a time, so memory stays at
        one LU plus the dense operator. Column accumulation order is fixed,
        making the result independent of chunk size up to bitwise identity.
        """
        n_i = self.interior.size
        dense = np.zeros((n_i, n_i))
        stiff_csc = self.stiff_full.tocsc()
        get = self._assemblies()
        n_nodes = self.extset.s_nodes.shape[0]
        for idx in range(n_nodes):
            fact = (self._factors[idx] if self._factors is not None
                    else factorize(self._node_matrix(get, idx)))
            w = self._w_outer[idx]
            for lo in range(0, n_i, chunk):
                hi = min(lo + chunk, n_i)
                rhs = np.zeros((self.n_active, hi - lo))
                rhs[: self.n_base] = stiff_csc[:, self.interior[lo:hi]].toarray()
                chi = fact.solve(rhs)
                dense[:, lo:hi] += w * (self._mass_int_rows @ chi[: self.n_base])
            del fact
        asym = _asymmetry_sample(dense)
        if asym > 1e-8:
            raise SolverError(f"integral operator asymmetry {asym:.2e} too large")
        dense = 0.5 * (dense + dense.T)
        if n_i <= explicit_inverse_limit:
            ident = np.eye(n_i)
            cho = sla.cho_factor(dense, overwrite_a=True)
            self._dense_inverse = sla.cho_solve(cho, ident)
        else:
            self._dense_cho = sla.cho_factor(dense, overwrite_a=True)


def _asymmetry_sample(mat: np.ndarray, n_pairs: int = 2000) -> float:
    rng = np.random.default_rng(0)
    n = mat.shape[0]
    i = rng.integers(0, n, n_pairs)
    j = rng.integers(0, n, n_pairs)
    scale = np.abs(mat).max()
    return float(np.max(np.abs(mat[i, j] - mat[j, i])) / scale)


# -- combined potential -------------------------------------------------------


@dataclass
class PotentialState:
    """Film potential split into the charge part (zero trace) and the
    projected electrode profile."""

    psi0: np.ndarray
    eta_h: np.ndarray

    @property
    def psi(self) -> np.ndarray:
        return self.psi0 + self.eta_h


class PotentialSolver:
    """Dispatches the potential solve for one electrode configuration."""

    def __init__(self, mode: str, frac, eta_h: np.ndarray,
                 g_h: np.ndarray | None = None):
        if mode not in ("infinite", "slim"):
            raise InvalidParameterError(f"unknown electrode mode {mode!r}")
        if mode == "slim" and g_h is None:
            raise InvalidParameterError("slim mode needs the projected electrode flux")
        self.mode = mode
        self.frac = frac
        self.eta_h = eta_h
        self.g_h = g_h

    def compute(self, q_full: np.ndarray, x0_full: np.ndarray | None = None) -> PotentialState:
        x0 = None
        if x0_full is not None:
            x0 = x0_full[self.frac.interior]
        if self.mode == "infinite":
            psi0 = self.frac.solve(q_full)
        else:
            psi0 = self.frac.solve(q_full + self.g_h, x0=x0)
        return PotentialState(psi0, self.eta_h)
