import math

import numpy as np
import pytest
import scipy.linalg as sla

from ecsim.errors import InvalidParameterError
from ecsim.fem import (
    FunctionSpace,
    assemble_mass,
    assemble_stiffness,
    integrate,
    project_l2,
)
from ecsim.fractional import (
    IntegralFracSolver,
    PotentialSolver,
    SincRule,
    SpectralFracSolver,
    electrode_flux,
    electrode_potential,
    hyp2f1_half,
)
from ecsim.mesh import annulus_radii, build_annulus, build_disk, build_extended

ALPHA = 0.33


def hyp_series(x, terms=200):
    """Independent oracle: direct hypergeometric series summation."""
    total, coef = 0.0, 1.0
    for n in range(terms):
        total += coef * x**n
        ratio = ((0.5 + n) * (0.5 + n)) / ((1.0 + n) * (n + 1.0))
        coef *= ratio
    return total


class TestHyp2f1Half:
    def test_at_zero(self):
        assert hyp2f1_half(0.0) == pytest.approx(1.0, abs=1e-15)

    def test_against_series(self):
        for x in (0.1, 0.3, 0.5, 0.7):
            assert hyp2f1_half(x) == pytest.approx(hyp_series(x), rel=1e-13)

    def test_known_value(self):
        assert hyp2f1_half(0.5) == pytest.approx(1.18034059901700, rel=1e-12)

    def test_log_limit(self):
        # F(x)/(-ln(1-x)) -> 1/pi; the approach is logarithmic with the
        # known constant: pi F(1-eps) = -ln(eps) + 4 ln 2 + O(eps ln eps)
        ratios = []
        for eps in (1e-6, 1e-9, 1e-12):
            val = hyp2f1_half(1.0 - eps)
            assert abs(math.pi * val + math.log(eps) - 4.0 * math.log(2.0)) < 1e-4
            ratios.append(val / (-math.log(eps)))
        deviations = [abs(r - 1.0 / math.pi) for r in ratios]
        assert deviations[0] > deviations[1] > deviations[2]

    def test_domain_error(self):
        with pytest.raises(InvalidParameterError):
            hyp2f1_half(1.0)
        with pytest.raises(InvalidParameterError):
            hyp2f1_half(-0.1)

    def test_vectorized(self):
        x = np.array([0.0, 0.25, 0.5])
        out = hyp2f1_half(x)
        assert out.shape == (3,)
        assert out[0] == pytest.approx(1.0)


class TestElectrodePotential:
    def test_boundary_values(self):
        r_i, r_o = annulus_radii(ALPHA)
        assert electrode_potential(r_i, ALPHA) == pytest.approx(1.0, abs=1e-14)
        assert electrode_potential(r_o, ALPHA) == pytest.approx(0.0, abs=1e-14)

    def test_log_midpoint(self):
        r_i, r_o = annulus_radii(ALPHA)
        assert electrode_potential(math.sqrt(r_i * r_o), ALPHA) == pytest.approx(0.5)

    def test_monotone_decreasing(self):
        r_i, r_o = annulus_radii(0.56)
        r = np.linspace(r_i, r_o, 50)
        vals = electrode_potential(r, 0.56)
        assert np.all(np.diff(vals) < 0)


class TestElectrodeFlux:
    def test_against_bessel_integral_oracle(self):
        # adaptive oscillatory quadrature of the defining integral
        mp = pytest.importorskip("mpmath")
        mp.mp.dps = 25
        r_i, r_o = annulus_radii(ALPHA)
        r = 0.5 * (r_i + r_o)

        def pair(a, b):
            f = lambda t: mp.besselj(0, a * t) * mp.besselj(0, b * t)
            return float(mp.quadosc(f, [0, mp.inf], zeros=lambda n: n * mp.pi / abs(b - a)))

        oracle = -(pair(r, r_o) - pair(r_i, r)) / math.log(ALPHA)
        assert electrode_flux(r, ALPHA) == pytest.approx(oracle, rel=1e-6)

    def test_log_divergence_at_inner_rim(self):
        r_i, _ = annulus_radii(ALPHA)
        vals = [abs(electrode_flux(r_i + 10.0**-k, ALPHA)) for k in (2, 4, 6, 8)]
        diffs = np.diff(vals)
        assert np.all(diffs > 0)
        # log growth: increments roughly constant
        assert np.all(np.abs(diffs / diffs[0] - 1.0) < 0.35)

    def test_defined_slightly_inside_inner_rim(self):
        # polygonal meshes sample radii slightly below the inner circle
        r_i, _ = annulus_radii(ALPHA)
        val = electrode_flux(0.999 * r_i, ALPHA)
        assert np.isfinite(val)

    def test_divergence_at_rims(self):
        r_i, r_o = annulus_radii(ALPHA)
        with pytest.raises(InvalidParameterError):
            electrode_flux(r_i, ALPHA)
        with pytest.raises(InvalidParameterError):
            electrode_flux(r_o, ALPHA)


class TestSincRule:
    def test_default_counts(self):
        rule = SincRule(0.4)
        assert rule.n_minus == rule.n_plus == 62
        nodes = rule.nodes()
        assert nodes.shape[0] == 125
        assert np.all(np.diff(nodes) > 0)
        assert nodes[62] == 0.0

    def test_explicit_counts(self):
        rule = SincRule(0.4, 62, 124)
        assert rule.n_nodes == 187

    def test_invalid(self):
        with pytest.raises(InvalidParameterError):
            SincRule(-0.1)
        with pytest.raises(InvalidParameterError):
            SincRule(0.4, 0, 5)


@pytest.fixture(scope="module")
def spectral_setup():
    space = FunctionSpace(build_annulus(ALPHA, 3), 1)
    mass = assemble_mass(space)
    stiff = assemble_stiffness(space)
    idx = space.interior_scalar_dofs()
    md = mass[idx][:, idx].toarray()
    kd = stiff[idx][:, idx].toarray()
    lam, vecs = sla.eigh(kd, md)
    solver = SpectralFracSolver(space, SincRule(0.4))
    return space, mass, idx, md, lam, vecs, solver


def eig_oracle(mass, idx, lam, vecs, q_full):
    load = (mass @ q_full)[idx]
    return vecs @ ((vecs.T @ load) / np.sqrt(lam))


class TestSpectralSolver:
    def test_zero_charge(self, spectral_setup):
        space, *_, solver = spectral_setup
        assert np.all(solver.solve(np.zeros(space.n_scalar)) == 0.0)

    def test_factor_count(self, spectral_setup):
        *_, solver = spectral_setup
        rule = solver.rule
        assert len(solver.factors) == rule.n_minus + rule.n_plus + 1

    def test_matches_eigendecomposition_oracle(self, spectral_setup):
        space, mass, idx, md, lam, vecs, solver = spectral_setup
        rng = np.random.default_rng(5)
        q = rng.standard_normal(space.n_scalar)
        oracle = eig_oracle(mass, idx, lam, vecs, q)
        got = solver.solve(q)[idx]
        err = np.sqrt((got - oracle) @ md @ (got - oracle) / (oracle @ md @ oracle))
        assert err < 1e-3

    def test_error_monotone_in_k(self, spectral_setup):
        space, mass, idx, md, lam, vecs, _ = spectral_setup
        rng = np.random.default_rng(5)
        q = rng.standard_normal(space.n_scalar)
        oracle = eig_oracle(mass, idx, lam, vecs, q)
        errs = []
        for k in (0.4, 0.4 / math.sqrt(2.0), 0.2):
            sol = SpectralFracSolver(space, SincRule(k))
            got = sol.solve(q)[idx]
            errs.append(float(np.sqrt((got - oracle) @ md @ (got - oracle)
                                      / (oracle @ md @ oracle))))
        assert errs[0] > errs[1] > errs[2]

    def test_single_eigenmode_scaling(self, spectral_setup):
        space, mass, idx, md, lam, vecs, solver = spectral_setup
        j = 4
        q = np.zeros(space.n_scalar)
        q[idx] = vecs[:, j]
        got = solver.solve(q)[idx]
        expected = vecs[:, j] / math.sqrt(lam[j])
        err = np.sqrt((got - expected) @ md @ (got - expected)
                      / (expected @ md @ expected))
        assert err < 1e-3

    def test_linearity(self, spectral_setup):
        space, *_, solver = spectral_setup
        rng = np.random.default_rng(9)
        qa = rng.standard_normal(space.n_scalar)
        qb = rng.standard_normal(space.n_scalar)
        combo = solver.solve(1.7 * qa - 0.3 * qb)
        parts = 1.7 * solver.solve(qa) - 0.3 * solver.solve(qb)
        assert np.max(np.abs(combo - parts)) < 1e-9 * max(1.0, np.max(np.abs(combo)))

    def test_node_order_invariance(self, spectral_setup):
        space, mass, idx, *_, solver = spectral_setup
        rng = np.random.default_rng(3)
        q = rng.standard_normal(space.n_scalar)
        load = (mass @ q)[idx]
        contribs = solver.node_contributions(load)
        fwd = np.zeros_like(load)
        for c in contribs:
            fwd += c
        rev = np.zeros_like(load)
        for c in reversed(contribs):
            rev += c
        assert np.max(np.abs(fwd - rev)) < 1e-13 * np.max(np.abs(fwd))

    def test_dense_path_matches(self, spectral_setup):
        space, *_ , solver = spectral_setup
        import copy

        rng = np.random.default_rng(13)
        q = rng.standard_normal(space.n_scalar)
        direct = solver.solve(q)
        dense_solver = SpectralFracSolver(space, solver.rule)
        dense_solver.build_dense()
        dense = dense_solver.solve(q)
        assert np.max(np.abs(direct - dense)) < 1e-11 * max(1.0, np.max(np.abs(direct)))

    def test_eta_projection_discrete_harmonic(self):
        norms = []
        for levels in (2, 3, 4):
            space = FunctionSpace(build_annulus(ALPHA, levels), 1)
            eta_h = project_l2(space, lambda x, y: electrode_potential(np.hypot(x, y), ALPHA))
            stiff = assemble_stiffness(space)
            resid = (stiff @ eta_h)[space.interior_scalar_dofs()]
            norms.append(np.linalg.norm(resid))
        assert norms[0] > norms[1] > norms[2]


@pytest.fixture(scope="module")
def integral_setup():
    base = build_annulus(ALPHA, 2)
    space = FunctionSpace(base, 1)
    rule = SincRule(0.4, 62, 124)
    h = float(base.cell_diameters().max())
    extset = build_extended(base, ALPHA, 3.0, rule.nodes(), h=min(1.0, h))
    solver = IntegralFracSolver(space, extset, rule, keep_factors=True)
    return space, solver


class TestIntegralSolver:
    def test_zero_inputs(self, integral_setup):
        space, solver = integral_setup
        n_i = solver.interior.size
        assert np.all(solver.apply(np.zeros(n_i)) == 0.0)
        assert np.all(solver.solve(np.zeros(space.n_scalar)) == 0.0)

    def test_operator_symmetry(self, integral_setup):
        _, solver = integral_setup
        rng = np.random.default_rng(2)
        n_i = solver.interior.size
        for _ in range(10):
            a = rng.standard_normal(n_i)
            b = rng.standard_normal(n_i)
            ab = float(solver.apply(a) @ b)
            ba = float(solver.apply(b) @ a)
            assert abs(ab - ba) < 1e-10 * max(abs(ab), 1e-30)

    def test_operator_positive(self, integral_setup):
        _, solver = integral_setup
        rng = np.random.default_rng(4)
        for _ in range(5):
            a = rng.standard_normal(solver.interior.size)
            assert float(solver.apply(a) @ a) > 0.0

    def test_linearity(self, integral_setup):
        space, solver = integral_setup
        rng = np.random.default_rng(6)
        fa = rng.standard_normal(space.n_scalar)
        fb = rng.standard_normal(space.n_scalar)
        combo = solver.solve(2.0 * fa + 0.5 * fb)
        parts = 2.0 * solver.solve(fa) + 0.5 * solver.solve(fb)
        scale = np.max(np.abs(combo))
        assert np.max(np.abs(combo - parts)) < 1e-7 * max(scale, 1e-30)

    def test_dense_matches_cg(self, integral_setup):
        space, solver = integral_setup
        rng = np.random.default_rng(8)
        f = rng.standard_normal(space.n_scalar)
        via_cg = solver.solve(f)
        dense_solver = IntegralFracSolver(space, solver.extset, solver.rule,
                                          keep_factors=True)
        dense_solver.build_dense()
        via_dense = dense_solver.solve(f)
        scale = np.max(np.abs(via_cg))
        assert np.max(np.abs(via_cg - via_dense)) < 1e-6 * scale

    def test_psi0_boundary_dofs_zero(self, integral_setup):
        space, solver = integral_setup
        rng = np.random.default_rng(10)
        psi = solver.solve(rng.standard_normal(space.n_scalar))
        assert np.all(psi[space.boundary_scalar_dofs()] == 0.0)


class TestDiskBenchmarkSmoke:
    def test_half_laplacian_disk(self):
        # coarse smoke version of the unit-disk closed-form benchmark
        from ecsim.fem import values_at_quadrature

        rule = SincRule(0.4, 62, 124)
        disk = build_disk(1.0, 1)
        h = float(disk.cell_diameters().max())
        ext = build_extended(disk, 0.0, 3.0, rule.nodes(), h=min(1.0, h))
        space = FunctionSpace(disk, 1)
        solver = IntegralFracSolver(space, ext, rule)
        psi = solver.solve(np.ones(space.n_scalar))
        geo = space.geometry()
        r2 = (geo.points**2).sum(axis=-1)
        exact = (2.0 / np.pi) * np.sqrt(np.maximum(0.0, 1.0 - r2))
        uh = values_at_quadrature(space, psi)
        err = np.sqrt((geo.weights * (uh - exact) ** 2).sum()
                      / (geo.weights * exact**2).sum())
        assert err < 0.25


class TestPotentialSolver:
    def test_slim_equilibrium_charge_gives_zero_psi0(self, integral_setup):
        # with q = -(projected flux), the slim source q + g_h vanishes
        space, solver = integral_setup
        g_h = project_l2(space, lambda x, y: electrode_flux(np.hypot(x, y), ALPHA))
        eta_h = project_l2(space, lambda x, y: electrode_potential(np.hypot(x, y), ALPHA))
        pot = PotentialSolver("slim", solver, eta_h, g_h)
        state = pot.compute(-g_h)
        assert np.max(np.abs(state.psi0)) < 1e-12
        assert np.array_equal(state.psi, state.psi0 + eta_h)

    def test_infinite_mode(self, spectral_setup):
        space, *_ , solver = spectral_setup
        eta_h = project_l2(space, lambda x, y: electrode_potential(np.hypot(x, y), ALPHA))
        pot = PotentialSolver("infinite", solver, eta_h)
        rng = np.random.default_rng(1)
        q = rng.standard_normal(space.n_scalar)
        state = pot.compute(q)
        assert np.allclose(state.psi, state.psi0 + eta_h)
