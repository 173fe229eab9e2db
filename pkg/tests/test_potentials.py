"""Potential duals: values, derivatives, duality gaps, convexity structure."""

import numpy as np
import pytest

from slm.potentials import (
    BoundCoefficients,
    PotentialSpec,
    WarmStartCache,
    fenchel_gap,
    g_value_derivs,
    h_decompose_student_t,
    h_star,
    h_value_derivs,
)


def bc_a(z1, z2=0.0):
    return BoundCoefficients(z1=z1, z2=z2, z3=0)


def bc_b(z2):
    return BoundCoefficients(z1=0.0, z2=z2, z3=1)


class TestSpecValidation:
    def test_parameter_checks(self):
        with pytest.raises(ValueError):
            PotentialSpec.laplace(-1.0)
        with pytest.raises(ValueError):
            PotentialSpec.student_t(1.0, 0.0)
        with pytest.raises(ValueError):
            PotentialSpec.bernoulli(1.0, 2)
        with pytest.raises(ValueError):
            PotentialSpec("cauchy", 1.0)

    def test_linear_coefficient(self):
        assert PotentialSpec.laplace(1.0).b == 0.0
        assert PotentialSpec.student_t(1.0, 3.0).b == 0.0
        assert PotentialSpec.bernoulli(2.0, 1).b == 1.0
        assert PotentialSpec.bernoulli(2.0, -1).b == -1.0

    @pytest.mark.parametrize("pot", [
        PotentialSpec.laplace(0.7),
        PotentialSpec.student_t(1.3, 2.5),
        PotentialSpec.bernoulli(2.0, 1),
    ])
    def test_g_convex_decreasing(self, pot):
        # sampled check of the defining property: g'' >= 0, g' <= 0
        for x in np.geomspace(1e-6, 1e4, 40):
            _, gp, gpp = g_value_derivs(pot, float(x))
            assert gp <= 0
            assert gpp >= 0

    def test_bound_coefficient_regimes(self):
        BoundCoefficients(1.0, 0.0, 0)
        BoundCoefficients(0.0, 1.0, 1)
        BoundCoefficients(0.0, 0.0, 0)  # point-estimation limit
        with pytest.raises(ValueError):
            BoundCoefficients(1.0, 1.0, 1)
        with pytest.raises(ValueError):
            BoundCoefficients(0.0, 0.0, 1)
        with pytest.raises(ValueError):
            BoundCoefficients(-1.0, 0.0, 0)


class TestGValues:
    def test_laplace_example(self):
        g, gp, gpp = g_value_derivs(PotentialSpec.laplace(1.0), 4.0)
        assert g == pytest.approx(-2.0)
        assert gp == pytest.approx(-0.25)
        assert gpp == pytest.approx(1.0 / 32.0)

    def test_laplace_origin_sentinels(self):
        g, gp, gpp = g_value_derivs(PotentialSpec.laplace(1.0), 0.0)
        assert g == 0.0
        assert np.isinf(gp) and gp < 0
        assert np.isinf(gpp) and gpp > 0

    def test_bernoulli_series_origin(self):
        # g(0) = -log 2 and g'(0) = -C with C = (y tau / 2)^2 / 2
        g, gp, _ = g_value_derivs(PotentialSpec.bernoulli(2.0, 1), 0.0)
        assert g == pytest.approx(-np.log(2.0), abs=1e-14)
        assert gp == pytest.approx(-0.5, abs=1e-12)

    def test_bernoulli_series_matches_direct(self):
        # the two branches agree where both are accurate
        pot = PotentialSpec.bernoulli(1.5, -1)
        for x in (2e-4, 1e-3, 1e-2):
            g, gp, gpp = g_value_derivs(pot, x)
            h = 1e-5 * x
            gm = g_value_derivs(pot, x - h)[0]
            gp_fd = (g_value_derivs(pot, x + h)[0] - gm) / (2 * h)
            assert gp == pytest.approx(gp_fd, rel=1e-5)

    def test_student_t_zero(self):
        g, _, _ = g_value_derivs(PotentialSpec.student_t(2.0, 1.0), 0.0)
        assert g == 0.0

    def test_domain_error(self):
        with pytest.raises(ValueError):
            g_value_derivs(PotentialSpec.laplace(1.0), -1e-3)


class TestHValues:
    def test_laplace_closed_form(self):
        h, hp, hpp = h_value_derivs(PotentialSpec.laplace(2.0), 3.0)
        assert (h, hp, hpp) == (12.0, 4.0, 0.0)

    def test_student_t_branch_point(self):
        pot = PotentialSpec.student_t(2.0, 1.0)  # alpha=0.5, gamma0=0.25
        assert pot.gamma0 == pytest.approx(0.25)
        h, _, _ = h_value_derivs(pot, 0.25)
        assert h == pytest.approx(0.0, abs=1e-14)
        assert h_value_derivs(pot, 0.1)[0] == 0.0
        # above the branch: alpha/g + (nu+1) log g + C
        g = 0.8
        cc = -2.0 * (np.log(0.25) + 1.0)
        assert h_value_derivs(pot, g)[0] == pytest.approx(
            0.5 / g + 2.0 * np.log(g) + cc)

    def test_bernoulli_flat_region(self):
        pot = PotentialSpec.bernoulli(2.0, 1)  # C=1/2, gamma0=1
        for g in (0.2, 0.9, 1.0):
            h, hp, _ = h_value_derivs(pot, g)
            assert h == pytest.approx(2.0 * np.log(2.0), abs=1e-12)
            assert hp == 0.0

    def test_bernoulli_derivatives_fd(self):
        pot = PotentialSpec.bernoulli(2.0, 1)
        warm = WarmStartCache()
        for g in (1.5, 3.0, 10.0):
            h, hp, hpp = h_value_derivs(pot, g, warm=warm)
            d = 1e-6 * g
            hm = h_value_derivs(pot, g - d)[0]
            hp_fd = (h_value_derivs(pot, g + d)[0] - hm) / (2 * d)
            assert hp == pytest.approx(hp_fd, rel=1e-5)
            assert hpp >= 0  # log-concave potential has convex dual

    def test_domain_error(self):
        with pytest.raises(ValueError):
            h_value_derivs(PotentialSpec.laplace(1.0), 0.0)

    def test_laplace_convex_student_not(self):
        # Laplace h'' = 0 everywhere; Student-t violates midpoint convexity
        lap = PotentialSpec.laplace(1.0)
        assert h_value_derivs(lap, 5.0)[2] == 0.0
        pot = PotentialSpec.student_t(2.0, 1.0)

        def h(g):
            return h_value_derivs(pot, g)[0]

        found = False
        for ga in np.geomspace(0.01, 5, 60):
            gb = 5.0 * ga
            if h(0.5 * (ga + gb)) > 0.5 * (h(ga) + h(gb)) + 1e-10:
                found = True
                break
        assert found, "expected a midpoint-convexity violation for Student-t"


class TestHStar:
    def test_laplace_type_a_example(self):
        pe = h_star(PotentialSpec.laplace(1.0), 0.0, bc_a(1.0))
        assert pe.hstar == pytest.approx(1.0)
        assert pe.theta == 0.0
        assert pe.rho == pytest.approx(1.0)
        assert pe.gamma_star == pytest.approx(1.0)

    def test_laplace_type_b_example(self):
        pe = h_star(PotentialSpec.laplace(1.0), 0.0, bc_b(1.0))
        # q = 4, p = 1 at s = 0
        assert pe.hstar == pytest.approx(0.5 * (1.0 - np.log(2.0) + np.log(4.0)))
        assert pe.gamma_star == pytest.approx(0.5)
        assert pe.theta == 0.0

    def test_laplace_map_limit(self):
        pe = h_star(PotentialSpec.laplace(1.0), 3.0, bc_a(0.0))
        assert pe.hstar == pytest.approx(3.0)
        assert pe.theta == pytest.approx(1.0)
        assert pe.rho == pytest.approx(0.0)

    @pytest.mark.parametrize("pot,bc", [
        (PotentialSpec.laplace(0.8), bc_a(0.3)),
        (PotentialSpec.laplace(0.8), bc_b(0.6)),
        (PotentialSpec.student_t(1.5, 2.2), bc_a(0.3, 0.4)),
        (PotentialSpec.bernoulli(2.0, 1), bc_a(0.5)),
        (PotentialSpec.bernoulli(2.0, 1), bc_b(0.7)),
    ])
    def test_derivative_consistency(self, pot, bc):
        # theta and rho match central differences of hstar away from s = 0
        warm = WarmStartCache()
        for s in (0.4, 1.7, -2.3):
            pe = h_star(pot, s, bc, warm=warm)
            d1 = 1e-6 * max(abs(s), 1.0)
            hp = h_star(pot, s + d1, bc, warm=warm)
            hm = h_star(pot, s - d1, bc, warm=warm)
            theta_fd = (hp.hstar - hm.hstar) / (2 * d1) - pot.b
            # second difference needs a larger step to beat roundoff
            d2 = 3e-4 * max(abs(s), 1.0)
            hp2 = h_star(pot, s + d2, bc, warm=warm)
            hm2 = h_star(pot, s - d2, bc, warm=warm)
            rho_fd = (hp2.hstar - 2 * pe.hstar + hm2.hstar) / d2 ** 2
            assert pe.theta == pytest.approx(theta_fd, rel=1e-6, abs=1e-9)
            assert pe.rho == pytest.approx(rho_fd, rel=1e-5, abs=1e-7)
            assert pe.rho >= 0
            assert pe.theta_tilde >= pe.rho - 1e-12

    def test_convexity_random_sweep(self):
        # rho >= 0 at 1000 random (s, bc) draws across the families
        rng = np.random.default_rng(0)
        pots = [PotentialSpec.laplace(0.5), PotentialSpec.student_t(1.0, 3.0),
                PotentialSpec.bernoulli(1.5, -1)]
        warm = WarmStartCache()
        for _ in range(1000):
            pot = pots[rng.integers(len(pots))]
            s = float(rng.standard_normal() * 3)
            if rng.random() < 0.5:
                bc = bc_a(float(rng.uniform(1e-3, 5)),
                          float(rng.uniform(0, 2)) if pot.kind == "student_t"
                          or rng.random() < 0.3 else 0.0)
                if pot.kind == "student_t" and bc.z2 == 0:
                    bc = bc_a(bc.z1, 0.5)
            else:
                bc = bc_b(float(rng.uniform(1e-3, 5)))
            pe = h_star(pot, s, bc, warm=warm)
            assert pe.rho >= -1e-13
            assert np.isfinite(pe.hstar)

    def test_group_reduction_bitwise(self):
        # a 1-dimensional group gives bitwise the scalar result
        pot = PotentialSpec.laplace(1.3)
        bc = bc_a(0.7)
        for s in (0.0, 1.1, -2.0):
            a = h_star(pot, s, bc, group_dim=1)
            b = h_star(pot, s, bc)
            assert (a.hstar, a.theta, a.rho, a.theta_tilde, a.kappa,
                    a.gamma_star) == (b.hstar, b.theta, b.rho, b.theta_tilde,
                                      b.kappa, b.gamma_star)

    def test_student_t_needs_positive_z2(self):
        with pytest.raises(ValueError):
            h_star(PotentialSpec.student_t(1.0, 2.0), 1.0,
                   BoundCoefficients(1.0, 0.0, 0))


class TestStudentTDecomposition:
    pot = PotentialSpec.student_t(2.0, 1.0)  # gamma0 = 0.25

    def test_wrong_kind_rejected(self):
        with pytest.raises(ValueError):
            h_decompose_student_t(PotentialSpec.laplace(1.0), 1.0)

    @pytest.mark.parametrize("z3", [0, 1])
    def test_branch_continuity(self, z3):
        g0 = self.pot.gamma0
        left = h_decompose_student_t(self.pot, np.nextafter(g0, 0.0), z3)
        right = h_decompose_student_t(self.pot, g0, z3)
        # value, slope and h_cup curvature agree across the branch point
        for a, b in zip(left, right):
            assert a == pytest.approx(b, rel=1e-12, abs=1e-12)

    def test_sum_recovers_h(self):
        for z3 in (0, 1):
            for g in (0.05, 0.25, 0.8, 3.0):
                hcap, _, hcup, _, _ = h_decompose_student_t(self.pot, g, z3)
                h, _, _ = h_value_derivs(self.pot, g)
                assert hcap + hcup == pytest.approx(h - z3 * np.log(g), abs=1e-12)

    def test_upper_branch_curvature(self):
        g = 10.0 * self.pot.gamma0
        _, _, _, _, hcup_pp = h_decompose_student_t(self.pot, g)
        assert hcup_pp == pytest.approx(2.0 * self.pot.alpha / g ** 3)
        assert hcup_pp > 0

    def test_hcup_convex_hcap_concave_nondecreasing(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            ga, gb = np.exp(rng.uniform(-4, 2, size=2))
            lam = rng.uniform(0.1, 0.9)
            gm = lam * ga + (1 - lam) * gb

            def parts(g):
                return h_decompose_student_t(self.pot, g)

            cup = [parts(g)[2] for g in (ga, gb, gm)]
            cap = [parts(g)[0] for g in (ga, gb, gm)]
            assert cup[2] <= lam * cup[0] + (1 - lam) * cup[1] + 1e-10
            assert cap[2] >= lam * cap[0] + (1 - lam) * cap[1] - 1e-10
        # nondecreasing slope check
        for g in np.geomspace(0.01, 10, 30):
            assert h_decompose_student_t(self.pot, float(g))[1] >= -1e-14


class TestFenchelGap:
    def test_laplace_analytic_minimizer(self):
        pot = PotentialSpec.laplace(1.0)
        # gamma* = sqrt(x)/tau = 2 at x = 4
        h, _, _ = h_value_derivs(pot, 2.0)
        g, _, _ = g_value_derivs(pot, 4.0)
        assert 4.0 / 2.0 + h + 2.0 * g == pytest.approx(0.0, abs=1e-12)
        assert abs(fenchel_gap(pot, 4.0)) <= 1e-8

    def test_student_t_at_zero(self):
        assert fenchel_gap(PotentialSpec.student_t(2.0, 1.0), 0.0) == pytest.approx(
            0.0, abs=1e-12)

    def test_bernoulli_grid_refine(self):
        gap = fenchel_gap(PotentialSpec.bernoulli(2.0, 1), 1.0)
        assert -1e-9 <= gap <= 1e-6

    def test_duality_round_trip_sweep(self):
        # |2 g(x) + min_gamma (x/gamma + h(gamma))| <= 1e-6 across families
        rng = np.random.default_rng(7)
        for _ in range(50):
            kind = rng.integers(3)
            tau = float(rng.uniform(0.2, 3.0))
            if kind == 0:
                pot = PotentialSpec.laplace(tau)
            elif kind == 1:
                pot = PotentialSpec.student_t(tau, float(rng.uniform(0.5, 6.0)))
            else:
                pot = PotentialSpec.bernoulli(tau, 1 if rng.random() < 0.5 else -1)
            for x in np.geomspace(1e-4, 1e3, 8):
                assert abs(fenchel_gap(pot, float(x))) <= 1e-6
