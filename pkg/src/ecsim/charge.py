"""Surface-charge transport: explicit two-stage SSP Runge-Kutta with
entropy-viscosity stabilization and exact total-charge restoration.

The evolved equation couples advection by the fluid velocity with the
(weak) Laplacian of the charge part of the potential; the potential term
integrates by parts, leaving a one-sided boundary flux evaluated with the
owning cell's gradient. Mass matrices are row-sum lumped inside the
stages; the mean is restored after every step, which enforces charge
conservation exactly in the lumped integral.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import StepRejectedError
from .fem import (
    FunctionSpace,
    assemble_mass,
    assemble_stiffness,
    boundary_edge_data,
    boundary_flux_load,
    local_stiffness,
)

log = logging.getLogger(__name__)

_D_FLOOR = 1e-14


@dataclass
class ChargeState:
    q: np.ndarray
    q_prev: np.ndarray
    total_charge_0: float


class ChargeWorkspace:
    """Precomputed assembly data reused every step."""

    def __init__(self, space_q: FunctionSpace, space_u: FunctionSpace):
        if space_q.mesh is not space_u.mesh:
            raise ValueError("charge and velocity spaces must share one mesh")
        self.space_q = space_q
        self.space_u = space_u
        self.mass = assemble_mass(space_q)
        self.lumped = np.asarray(self.mass.sum(axis=1)).ravel()
        self.stiff = assemble_stiffness(space_q).tocsr()
        self.stiff_local = local_stiffness(space_q)
        self.edge_data = boundary_edge_data(space_q)
        self.h_cells = space_q.mesh.cell_diameters()
        self.h_min = float(self.h_cells.min())
        self.area = space_q.domain_area()
        # mixed-form data at the Q2 quadrature order
        order = space_u.quad_order
        self.geo_mixed = space_q.geometry(order)
        self.q1_vals, _ = space_q.basis(order)
        self.q2_vals, _ = space_u.basis(order)
        self._grad_q1 = None
        self._order = order

    def charge_gradients(self, q: np.ndarray) -> np.ndarray:
        """Physical gradients of a Q1 field at the mixed quadrature points.

        Nodal values are centered per cell first, so constant fields yield
        exactly zero gradients (floating-point exact, not just small).
        """
        _, gref = self.space_q.basis(self._order)
        q_loc = q[self.space_q.cell_dofs]
        q_loc = q_loc - q_loc[:, :1]
        g_ref = np.einsum("iqr,ci->cqr", gref, q_loc)
        return np.einsum("cqab,cqb->cqa", self.geo_mixed.inv_jt, g_ref)

    def velocity_at_points(self, u: np.ndarray):
        su = self.space_u
        comps = []
        for a in range(2):
            comp = u[a * su.n_scalar:(a + 1) * su.n_scalar]
            comps.append(np.einsum("iq,ci->cq", self.q2_vals, comp[su.cell_dofs]))
        return np.stack(comps, axis=-1)          # (nc, nq, 2)

    def total_charge(self, q: np.ndarray) -> float:
        return float(self.lumped @ q)


def initial_charge(ws: ChargeWorkspace, g_h: np.ndarray, noise_amplitude: float,
                   seed: int) -> ChargeState:
    """Charge in equilibrium with the slim electrode field (q0 = -g_h),
    plus clamped Gaussian nodal noise to break the axial symmetry."""
    q0 = -g_h.copy()
    if noise_amplitude > 0.0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, noise_amplitude / 3.0, q0.shape[0])
        q0 = q0 + np.clip(noise, -noise_amplitude, noise_amplitude)
    return ChargeState(q0, q0.copy(), ws.total_charge(q0))


def entropy_viscosity(ws: ChargeWorkspace, q: np.ndarray, q_prev: np.ndarray,
                      u: np.ndarray, tau: float, c_max: float = 0.5,
                      c_e: float = 1.0) -> np.ndarray:
    """Per-cell artificial viscosity: first-order cap c_max h |u| capped by
    the entropy-residual value c_e h^2 |R| / ||E - mean||_inf, E = q^2/2."""
    vals = ws.q1_vals
    cd = ws.space_q.cell_dofs
    qv = np.einsum("iq,ci->cq", vals, q[cd])
    qpv = np.einsum("iq,ci->cq", vals, q_prev[cd])
    uv = ws.velocity_at_points(u)
    gq = ws.charge_gradients(q)

    ent = 0.5 * qv * qv
    ent_prev = 0.5 * qpv * qpv
    resid = (ent - ent_prev) / tau + qv * np.einsum("cqa,cqa->cq", uv, gq)
    r_cell = np.max(np.abs(resid), axis=1)

    mean_ent = float((ws.geo_mixed.weights * ent).sum()) / ws.area
    denom = max(float(np.max(np.abs(ent - mean_ent))), _D_FLOOR)

    umax = np.sqrt(np.max(np.einsum("cqa,cqa->cq", uv, uv), axis=1))
    return np.minimum(c_max * ws.h_cells * umax,
                      c_e * ws.h_cells**2 * r_cell / denom)


def transport_residual(ws: ChargeWorkspace, q: np.ndarray, u: np.ndarray,
                       psi0: np.ndarray, viscosity: np.ndarray) -> np.ndarray:
    """Spatial residual: -(u . grad q, phi) - (grad psi0, grad phi)
    + boundary flux of psi0 - (viscosity grad q, grad phi)."""
    cd = ws.space_q.cell_dofs
    uv = ws.velocity_at_points(u)
    gq = ws.charge_gradients(q)
    udotg = np.einsum("cqa,cqa->cq", uv, gq)
    local = np.einsum("cq,iq,cq->ci", ws.geo_mixed.weights, ws.q1_vals, udotg)
    out = np.zeros(ws.space_q.n_scalar)
    np.add.at(out, cd, -local)

    out -= ws.stiff @ psi0
    out += boundary_flux_load(ws.space_q, ws.edge_data, psi0)

    visc_local = np.einsum("c,cij,cj->ci", viscosity, ws.stiff_local, q[cd])
    np.add.at(out, cd, -visc_local)
    return out


def cfl_number(ws: ChargeWorkspace, u: np.ndarray, tau: float) -> float:
    su = ws.space_u
    speed = np.sqrt(u[: su.n_scalar] ** 2 + u[su.n_scalar:] ** 2)
    return tau * float(speed.max(initial=0.0)) / ws.h_min


def ssp_rk2_step(ws: ChargeWorkspace, state: ChargeState, u: np.ndarray,
                 psi0: np.ndarray, tau: float, c_max: float = 0.5,
                 c_e: float = 1.0) -> ChargeState:
    """One explicit SSP-RK2 step followed by exact mean restoration."""
    cfl = cfl_number(ws, u, tau)
    if cfl > 1.0:
        raise StepRejectedError(f"advective CFL {cfl:.3f} exceeds 1.0")
    if cfl > 0.5:
        log.warning("advective CFL %.3f above 0.5", cfl)

    nu = entropy_viscosity(ws, state.q, state.q_prev, u, tau, c_max, c_e)
    q = state.q
    stage1 = q + tau * transport_residual(ws, q, u, psi0, nu) / ws.lumped
    stage2 = stage1 + tau * transport_residual(ws, stage1, u, psi0, nu) / ws.lumped
    q_new = 0.5 * (q + stage2)

    drift = (ws.total_charge(q_new) - state.total_charge_0) / ws.area
    q_new = q_new - drift
    return ChargeState(q_new, q, state.total_charge_0)
