import math

import numpy as np
import pytest

from ecsim.charge import (
    ChargeState,
    ChargeWorkspace,
    cfl_number,
    entropy_viscosity,
    initial_charge,
    ssp_rk2_step,
    transport_residual,
)
from ecsim.errors import StepRejectedError
from ecsim.fem import FunctionSpace, project_l2, shape_functions, tensor_gauss
from ecsim.fractional import electrode_flux
from ecsim.mesh import build_annulus

ALPHA = 0.33


def make_workspace(levels=2):
    mesh = build_annulus(ALPHA, levels)
    return ChargeWorkspace(FunctionSpace(mesh, 1), FunctionSpace(mesh, 2, components=2))


@pytest.fixture(scope="module")
def ws():
    return make_workspace()


@pytest.fixture(scope="module")
def g_h(ws):
    return project_l2(ws.space_q,
                      lambda x, y: electrode_flux(np.hypot(x, y), ALPHA),
                      mass=ws.mass)


class TestInitialCharge:
    def test_zero_noise_is_exact_negative_projection(self, ws, g_h):
        state = initial_charge(ws, g_h, 0.0, seed=1)
        assert np.array_equal(state.q, -g_h)

    def test_seed_determinism(self, ws, g_h):
        a = initial_charge(ws, g_h, 1e-4, seed=42)
        b = initial_charge(ws, g_h, 1e-4, seed=42)
        assert np.array_equal(a.q, b.q)
        c = initial_charge(ws, g_h, 1e-4, seed=43)
        assert not np.array_equal(a.q, c.q)

    def test_noise_clamped(self, ws, g_h):
        amp = 1e-4
        state = initial_charge(ws, g_h, amp, seed=0)
        assert np.max(np.abs(state.q + g_h)) <= amp

    def test_equilibrium_profile_monotone_radially(self, ws, g_h):
        # the noise-free charge rises toward the inner rim and drops
        # steeply negative toward the outer rim
        state = initial_charge(ws, g_h, 0.0, seed=0)
        r = np.hypot(ws.space_q.dof_coords[:, 0], ws.space_q.dof_coords[:, 1])
        order = np.argsort(r)
        q_sorted = state.q[order]
        assert q_sorted[0] > 0 > q_sorted[-1]


class TestEntropyViscosity:
    def test_zero_velocity_gives_zero(self, ws):
        rng = np.random.default_rng(0)
        q = rng.standard_normal(ws.space_q.n_scalar)
        u = np.zeros(ws.space_u.n_dofs)
        nu = entropy_viscosity(ws, q, q, u, tau=1e-3)
        assert np.all(nu == 0.0)

    def test_constant_charge_gives_zero(self, ws):
        q = np.full(ws.space_q.n_scalar, 2.5)
        u = ws.space_u.interpolate(lambda x, y: (-y, x))
        nu = entropy_viscosity(ws, q, q, u, tau=1e-3)
        assert np.all(nu == 0.0)

    def test_nonnegative(self, ws):
        rng = np.random.default_rng(1)
        q = rng.standard_normal(ws.space_q.n_scalar)
        qp = q + 1e-3 * rng.standard_normal(q.shape[0])
        u = ws.space_u.interpolate(lambda x, y: (-y, x))
        nu = entropy_viscosity(ws, q, qp, u, tau=1e-3)
        assert np.all(nu >= 0.0)

    def test_second_order_scaling(self):
        # smooth fields with zero time increment: the residual is the O(1)
        # advective entropy flux, so nu scales like h^2 once below the
        # first-order cap (measured ratios ~3.95 per refinement)
        maxima = []
        for levels in (3, 4, 5):
            w = make_workspace(levels)
            q = w.space_q.interpolate(lambda x, y: np.sin(x) * np.cos(y))
            u = w.space_u.interpolate(lambda x, y: (-y, x))
            nu = entropy_viscosity(w, q, q, u, tau=1e-3)
            maxima.append(float(nu.max()))
        assert maxima[0] / maxima[1] == pytest.approx(4.0, abs=0.8)
        assert maxima[1] / maxima[2] == pytest.approx(4.0, abs=0.8)


class TestTransportResidual:
    def test_all_zero_inputs(self, ws):
        q = np.zeros(ws.space_q.n_scalar)
        u = np.zeros(ws.space_u.n_dofs)
        r = transport_residual(ws, q, u, np.zeros_like(q), np.zeros(ws.space_q.mesh.n_cells))
        assert np.all(r == 0.0)

    def test_zero_velocity_reduces_to_potential_terms(self, ws):
        rng = np.random.default_rng(3)
        q = rng.standard_normal(ws.space_q.n_scalar)
        psi0 = rng.standard_normal(ws.space_q.n_scalar)
        u = np.zeros(ws.space_u.n_dofs)
        nu = np.zeros(ws.space_q.mesh.n_cells)
        r = transport_residual(ws, q, u, psi0, nu)
        from ecsim.fem import boundary_flux_load

        expected = -ws.stiff @ psi0 + boundary_flux_load(ws.space_q, ws.edge_data, psi0)
        assert np.allclose(r, expected, atol=1e-14)


class TestSspRk2Step:
    def test_rest_state_is_bitwise_identity(self, ws, g_h):
        state = initial_charge(ws, g_h, 1e-4, seed=7)
        u = np.zeros(ws.space_u.n_dofs)
        psi0 = np.zeros(ws.space_q.n_scalar)
        out = ssp_rk2_step(ws, state, u, psi0, tau=1e-3)
        assert np.array_equal(out.q, state.q)

    def test_cfl_rejection(self, ws, g_h):
        state = initial_charge(ws, g_h, 0.0, seed=0)
        u = ws.space_u.interpolate(lambda x, y: (0 * x + 1e4, 0 * y))
        with pytest.raises(StepRejectedError):
            ssp_rk2_step(ws, state, u, np.zeros(ws.space_q.n_scalar), tau=1e-3)
        assert cfl_number(ws, u, 1e-3) > 1.0

    def test_conservation_many_steps(self, ws, g_h):
        state = initial_charge(ws, g_h, 1e-4, seed=3)
        u = ws.space_u.interpolate(lambda x, y: (-0.3 * y, 0.3 * x))
        rng = np.random.default_rng(5)
        psi0 = np.zeros(ws.space_q.n_scalar)
        idx = ws.space_q.interior_scalar_dofs()
        psi0[idx] = 0.01 * rng.standard_normal(idx.size)
        worst = 0.0
        for _ in range(200):
            state = ssp_rk2_step(ws, state, u, psi0, tau=1e-3)
            worst = max(worst, abs(ws.total_charge(state.q) - state.total_charge_0))
        assert worst <= 1e-10 * ws.area

    def test_matches_dense_reimplementation(self, ws, g_h):
        # independent dense implementation of the same scheme on the same
        # coarse mesh: same quadrature content, plainly-coded loops
        sq, su = ws.space_q, ws.space_u
        mesh = sq.mesh
        n = sq.n_scalar

        pts, wref = tensor_gauss(4)
        v1, g1ref = shape_functions(1, pts)
        v2, _ = shape_functions(2, pts)

        u = su.interpolate(lambda x, y: (-0.2 * y, 0.2 * x))
        psi_hat = project_l2(sq, lambda x, y: np.sin(x + y), mass=ws.mass)
        tau = 5e-4

        def dense_residual(qv, psi0):
            out = np.zeros(n)
            for ci, quad in enumerate(mesh.cells):
                corners = mesh.vertices[quad]
                a = corners[0]
                b = corners[1] - corners[0]
                c = corners[3] - corners[0]
                d = corners[2] - corners[1] - corners[3] + corners[0]
                for qi in range(len(wref)):
                    xi, eta = pts[qi]
                    jac = np.column_stack([b + d * eta, c + d * xi])
                    det = np.linalg.det(jac)
                    inv_t = np.linalg.inv(jac).T
                    gphys = np.array([inv_t @ g1ref[bb, qi] for bb in range(4)])
                    gq = sum(qv[quad[bb]] * gphys[bb] for bb in range(4))
                    ux = sum(u[su.cell_dofs[ci, bb]] * v2[bb, qi] for bb in range(9))
                    uy = sum(u[su.n_scalar + su.cell_dofs[ci, bb]] * v2[bb, qi]
                             for bb in range(9))
                    adv = ux * gq[0] + uy * gq[1]
                    for bb in range(4):
                        out[quad[bb]] -= wref[qi] * det * v1[bb, qi] * adv
            # potential terms via the same assembled operators (shared data)
            from ecsim.fem import boundary_flux_load

            out -= ws.stiff @ psi0
            out += boundary_flux_load(sq, ws.edge_data, psi0)
            return out

        q0 = project_l2(sq, lambda x, y: np.cos(2 * x) + 0.3 * y, mass=ws.mass)
        state = ChargeState(q0.copy(), q0.copy(), ws.total_charge(q0))
        qd = q0.copy()
        total0 = ws.total_charge(q0)
        for step in range(3):
            psi0 = (1.0 + step * tau) * psi_hat
            state = ssp_rk2_step(ws, state, u, psi0, tau, c_max=0.0, c_e=0.0)
            r1 = dense_residual(qd, psi0)
            mu1 = qd + tau * r1 / ws.lumped
            mu2 = mu1 + tau * dense_residual(mu1, psi0) / ws.lumped
            qn = 0.5 * (qd + mu2)
            qn -= (ws.lumped @ qn - total0) / ws.area
            qd = qn
        scale = np.max(np.abs(qd))
        assert np.max(np.abs(state.q - qd)) < 1e-12 * max(scale, 1.0)

    @staticmethod
    def _rotate_once(levels, n_steps, c_max, c_e):
        w = make_workspace(levels)
        sq = w.space_q
        u = w.space_u.interpolate(lambda x, y: (-y, x))
        tau = 2 * math.pi / n_steps
        assert cfl_number(w, u, tau) < 0.5
        q0 = sq.interpolate(lambda x, y: np.sin(np.arctan2(y, x)))
        state = ChargeState(q0.copy(), q0.copy(), w.total_charge(q0))
        psi0 = np.zeros(sq.n_scalar)
        for _ in range(n_steps):
            state = ssp_rk2_step(w, state, u, psi0, tau, c_max=c_max, c_e=c_e)
        num = np.sqrt(float((state.q - q0) @ (w.mass @ (state.q - q0))))
        den = np.sqrt(float(q0 @ (w.mass @ q0)))
        return num / den

    def test_rigid_rotation_full_revolution(self):
        # one full rotation returns the initial field (exact pullback
        # oracle: rotation by 2*pi is the identity); the raw transport
        # scheme meets 2%, the by-design-diffusive stabilized scheme is
        # checked at its own measured level
        assert self._rotate_once(3, 600, 0.0, 0.0) < 0.02
        assert self._rotate_once(3, 600, 0.5, 1.0) < 0.08

    def test_temporal_second_order(self):
        # frozen velocity and potential; reference = same scheme at a tiny
        # step. The entropy-viscosity coefficient carries its own O(tau)
        # dependence, so the clean integrator order is measured with the
        # stabilization off; the stabilized errors must still shrink.
        w = make_workspace(2)
        sq = w.space_q
        u = w.space_u.interpolate(lambda x, y: (-0.5 * y, 0.5 * x))
        psi0 = project_l2(sq, lambda x, y: 0.1 * np.sin(x) * y, mass=w.mass)
        q0 = sq.interpolate(lambda x, y: np.cos(x) + 0.2 * np.sin(2 * y))
        t_end = 0.2

        def evolve(tau, c_max, c_e):
            state = ChargeState(q0.copy(), q0.copy(), w.total_charge(q0))
            for _ in range(int(round(t_end / tau))):
                state = ssp_rk2_step(w, state, u, psi0, tau, c_max=c_max, c_e=c_e)
            return state.q

        taus = (t_end / 16, t_end / 32, t_end / 64)

        ref = evolve(t_end / 512, 0.0, 0.0)
        errs = []
        for tau in taus:
            diff = evolve(tau, 0.0, 0.0) - ref
            errs.append(np.sqrt(float(diff @ (w.mass @ diff))))
        assert 3.5 < errs[0] / errs[1] < 4.5
        assert 3.5 < errs[1] / errs[2] < 4.5

        ref = evolve(t_end / 512, 0.5, 1.0)
        errs_ev = []
        for tau in taus:
            diff = evolve(tau, 0.5, 1.0) - ref
            errs_ev.append(np.sqrt(float(diff @ (w.mass @ diff))))
        assert errs_ev[0] > errs_ev[1] > errs_ev[2]
