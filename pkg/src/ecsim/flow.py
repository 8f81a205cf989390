"""Incompressible flow step: BDF-2 in time, Taylor-Hood (Q2/Q1) in space.

Convection and the charge forcing are explicit, so the saddle-point matrix
is constant in time and factorized once. The pressure unknown carried by
the system is the time-step-scaled multiplier of the divergence
constraint; it stays meaningful in the tau -> 0 limit and the physical
pressure is recovered on the way out. A single extra Lagrange multiplier
pins the pressure mean to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InvalidParameterError
from .fem import (
    FunctionSpace,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    gradients_at_quadrature,
    values_at_quadrature,
)
from .linalg import factorize


@dataclass
class FlowState:
    u: np.ndarray
    u_prev: np.ndarray
    p: np.ndarray
    step_count: int = 0


def rest_state(space_u: FunctionSpace, space_p: FunctionSpace) -> FlowState:
    z = np.zeros(space_u.n_dofs)
    return FlowState(z, z.copy(), np.zeros(space_p.n_scalar), 0)


class SaddleSystem:
    """Factorized velocity-pressure block system for one (P, tau, scheme).

    Layout: [A, -B^T, 0; -B, 0, -c; 0, -c^T, 0] with A the velocity mass
    plus scaled viscous block, B the divergence coupling, and c the
    pressure integral column enforcing a zero mean. No-slip rows/columns
    are eliminated symmetrically.
    """

    def __init__(self, space_u: FunctionSpace, space_p: FunctionSpace,
                 prandtl: float, tau: float, scheme: str = "bdf2"):
        if scheme not in ("bdf2", "be"):
            raise InvalidParameterError(f"unknown time scheme {scheme!r}")
        if space_u.mesh is not space_p.mesh:
            raise InvalidParameterError("velocity and pressure meshes differ")
        if space_u.degree != 2 or space_u.components != 2 or space_p.degree != 1:
            raise InvalidParameterError("expected Q2 vector velocity, Q1 pressure")
        if prandtl < 0 or tau < 0:
            raise InvalidParameterError("prandtl and tau must be nonnegative")
        self.space_u = space_u
        self.space_p = space_p
        self.prandtl = prandtl
        self.tau = tau
        self.scheme = scheme
        self.c_coef = (2.0 / 3.0) * tau if scheme == "bdf2" else tau

        self.mass_u = assemble_mass(space_u)
        a_blk = (self.mass_u + self.c_coef * prandtl * assemble_stiffness(space_u)).tocsr()
        self.div_b = _divergence_matrix(space_u, space_p)
        c_vec = assemble_load(space_p, lambda x, y: np.ones_like(x))
        self.pressure_weights = c_vec

        n_u, n_p = space_u.n_dofs, space_p.n_scalar
        self.n_u, self.n_p = n_u, n_p
        c_col = sp.csr_matrix((c_vec, (np.arange(n_p), np.zeros(n_p, dtype=int))),
                              shape=(n_p, 1))
        mat = sp.bmat([
            [a_blk, -self.div_b.T, None],
            [-self.div_b, None, -c_col],
            [None, -c_col.T, None],
        ], format="csr")

        self.noslip = space_u.boundary_dofs()
        keep = np.ones(mat.shape[0])
        keep[self.noslip] = 0.0
        fixed = np.zeros(mat.shape[0])
        fixed[self.noslip] = 1.0
        mat = sp.diags(keep) @ mat @ sp.diags(keep) + sp.diags(fixed)
        self.fact = factorize(mat.tocsc())

    def solve(self, rhs_u: np.ndarray, rhs_div: np.ndarray | None = None):
        """Solve for (velocity, scaled pressure, mean multiplier)."""
        rhs = np.zeros(self.n_u + self.n_p + 1)
        rhs[: self.n_u] = rhs_u
        rhs[self.noslip] = 0.0
        if rhs_div is not None:
            rhs[self.n_u: self.n_u + self.n_p] = rhs_div
        x = self.fact.solve(rhs)
        return x[: self.n_u], x[self.n_u: self.n_u + self.n_p], x[-1]

    def divergence_residual(self, u: np.ndarray) -> float:
        """Largest discrete divergence pairing against pressure tests."""
        return float(np.max(np.abs(self.div_b @ u)))


def assemble_saddle(space_u: FunctionSpace, space_p: FunctionSpace,
                    prandtl: float, tau: float, scheme: str = "bdf2") -> SaddleSystem:
    return SaddleSystem(space_u, space_p, prandtl, tau, scheme)


def _divergence_matrix(space_u: FunctionSpace, space_p: FunctionSpace) -> sp.csr_matrix:
    """B[i, (a,j)] = integral of theta_i * d(phi_j)/d(x_a)."""
    order = space_u.quad_order
    geo = space_u.geometry(order)
    vals_p, _ = space_p.basis(order)
    _, gref_u = space_u.basis(order)
    g_u = np.einsum("cqab,iqb->ciqa", geo.inv_jt, gref_u)
    local = np.einsum("cq,iq,cjqa->cija", geo.weights, vals_p, g_u)

    n_p, n_s = space_p.n_scalar, space_u.n_scalar
    cd_p, cd_u = space_p.cell_dofs, space_u.cell_dofs
    nb_p, nb_u = cd_p.shape[1], cd_u.shape[1]
    rows = np.repeat(cd_p[:, :, None, None], nb_u * 2, axis=2).ravel()
    cols_scalar = np.repeat(cd_u[:, None, :, None], nb_p, axis=1)
    cols = np.concatenate([cols_scalar, cols_scalar + n_s], axis=3).ravel()
    vals = local.transpose(0, 1, 3, 2).ravel()
    return sp.coo_matrix((vals, (rows, cols)),
                         shape=(n_p, 2 * n_s)).tocsr()


def convection_load(space_u: FunctionSpace, w: np.ndarray) -> np.ndarray:
    """Load vector of (w . grad) w against vector test functions."""
    wq = values_at_quadrature(space_u, w)                 # (nc, nq, 2)
    gw = gradients_at_quadrature(space_u, w)              # (nc, nq, 2, 2)
    conv = np.einsum("cqb,cqab->cqa", wq, gw)
    geo = space_u.geometry()
    vals, _ = space_u.basis()
    local = np.einsum("cq,iq,cqa->cia", geo.weights, vals, conv)
    out = np.zeros(space_u.n_dofs)
    for a in range(2):
        np.add.at(out, space_u.cell_dofs + a * space_u.n_scalar, local[..., a])
    return out


def lorentz_load(space_u: FunctionSpace, space_q: FunctionSpace, q: np.ndarray,
                 psi: np.ndarray, rayleigh: float, prandtl: float) -> np.ndarray:
    """Charge forcing -R P q grad(psi) paired with vector test functions."""
    order = space_u.quad_order
    qv = values_at_quadrature(space_q, q, order=order)
    gpsi = gradients_at_quadrature(space_q, psi, order=order)
    force = -rayleigh * prandtl * qv[..., None] * gpsi
    geo = space_u.geometry(order)
    vals, _ = space_u.basis(order)
    local = np.einsum("cq,iq,cqa->cia", geo.weights, vals, force)
    out = np.zeros(space_u.n_dofs)
    for a in range(2):
        np.add.at(out, space_u.cell_dofs + a * space_u.n_scalar, local[..., a])
    return out


def _advance(system: SaddleSystem, history: np.ndarray, w_conv: np.ndarray,
             force_load: np.ndarray):
    conv = convection_load(system.space_u, w_conv)
    rhs_u = system.mass_u @ history + system.c_coef * (force_load - conv)
    u, p_scaled, _ = system.solve(rhs_u)
    if system.c_coef > 0.0:
        p = p_scaled / system.c_coef
    else:
        p = p_scaled
    return u, p


def bdf2_step(state: FlowState, system: SaddleSystem, force_load: np.ndarray,
              convection: str = "extrapolated") -> FlowState:
    """One BDF-2 step with explicit convection.

    `convection` chooses the explicit transport velocity: "extrapolated"
    uses the second-order 2 u^n - u^{n-1}; "lagged" uses u^n, which is
    formally first order in time.
    """
    if system.scheme != "bdf2":
        raise InvalidParameterError("bdf2_step needs a bdf2 saddle system")
    if convection not in ("extrapolated", "lagged"):
        raise InvalidParameterError(f"unknown convection mode {convection!r}")
    u, up = state.u, state.u_prev
    w = 2.0 * u - up if convection == "extrapolated" else u
    history = (4.0 / 3.0) * u - (1.0 / 3.0) * up
    u_new, p = _advance(system, history, w, force_load)
    return FlowState(u_new, u, p, state.step_count + 1)


def bootstrap_step(state: FlowState, system: SaddleSystem,
                   force_load: np.ndarray) -> FlowState:
    """Backward-Euler start step that seeds the BDF-2 history."""
    if system.scheme != "be":
        raise InvalidParameterError("bootstrap_step needs a backward-Euler system")
    u_new, p = _advance(system, state.u, state.u, force_load)
    return FlowState(u_new, state.u, p, state.step_count + 1)
