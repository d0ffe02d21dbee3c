"""Messages, densities and the dual objective against the dense oracle."""
import numpy as np
import pytest

from _helpers import (fresh_cache, random_instruments, random_potentials,
                      small_reference, zero_state)
from mmcalib import oracle
from mmcalib.dual import (CostParams, DualPotentials, MessageCache,
                          TransitionStatistic, build_constraints,
                          delta_transition, dual_objective, joint_density,
                          marginal_density, path_log_mass, refresh_all,
                          update_psi_up)
from mmcalib.errors import NonFiniteMessage


class TestDeltaTransition:
    def test_zero_potential(self):
        stat = TransitionStatistic.MARTINGALE_EXP
        x = np.linspace(-1, 1, 5)
        assert np.all(delta_transition(np.zeros(5), stat, x, x + 0.3) == 0.0)

    def test_vanishes_on_diagonal(self):
        x = np.linspace(-1, 1, 5)
        for stat in TransitionStatistic:
            phi = (np.full(5, 2.0) if stat.n_components == 1
                   else np.full((5, 2), 2.0))
            np.testing.assert_allclose(delta_transition(phi, stat, x, x), 0.0,
                                       atol=1e-15)

    def test_scalar_value(self):
        stat = TransitionStatistic.MARTINGALE_EXP
        got = delta_transition(np.array([2.0]), stat, np.array([0.0]),
                               np.array([0.01]))
        assert got[0] == pytest.approx(-0.020100334168336, abs=1e-14)


class TestZeroPotentialChain:
    def setup_method(self):
        self.ref = small_reference(n_steps=3)
        self.cons, self.pots, self.cache = zero_state(self.ref)

    def test_psi_up_boundary(self):
        with np.errstate(divide="ignore"):
            np.testing.assert_array_equal(self.cache.psi_up[0],
                                          np.log(self.ref.nu0))

    def test_psi_down_is_zero(self):
        for k in range(self.ref.n_steps + 1):
            np.testing.assert_allclose(self.cache.psi_down[k], 0.0, atol=1e-13)

    def test_first_forward_message(self):
        dense = self.ref.kernels[0].to_dense()
        expected = self.ref.nu0 @ dense
        got = np.exp(self.cache.psi_up[1])
        np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_marginals_normalized(self):
        for k in range(self.ref.n_steps + 1):
            nu = marginal_density(k, self.pots, self.cache, self.ref, self.cons)
            assert nu.sum() == pytest.approx(1.0, abs=1e-10)

    def test_joint_is_reference_joint(self):
        nu1 = marginal_density(1, self.pots, self.cache, self.ref, self.cons)
        J = joint_density(1, self.pots, self.cache, self.ref, self.cons)
        expected = nu1[:, None] * self.ref.kernels[1].to_dense()
        np.testing.assert_allclose(J.to_dense(), expected, atol=1e-14)

    def test_objective_is_minus_h(self):
        obj = dual_objective(self.pots, self.cache, self.ref, self.cons,
                             CostParams())
        assert obj == pytest.approx(-self.ref.h, rel=1e-12)


class TestOracleEquivalence:
    @pytest.mark.parametrize("seed,n_steps", [(0, 2), (1, 3), (2, 3), (3, 2)])
    def test_random_instance(self, seed, n_steps):
        rng = np.random.default_rng(seed)
        ref = small_reference(n_steps=n_steps, maturities=[0.25, 0.5][: 1 + seed % 2]
                              if n_steps == 2 else [0.5])
        insts = random_instruments(ref, rng)
        cons = build_constraints(ref, insts)
        pots = random_potentials(ref, cons, rng)
        cache = fresh_cache(ref, pots, cons)
        tensor = oracle.dense_tensor(pots, ref, cons)
        cp = CostParams(c_mart=50.0, w_price=2.0)

        for k in range(ref.n_steps + 1):
            om = oracle.oracle_marginal(tensor, k)
            mm = marginal_density(k, pots, cache, ref, cons)
            np.testing.assert_allclose(mm, om, rtol=1e-10, atol=1e-13 * om.max())
        for k in range(ref.n_steps):
            oj = oracle.oracle_joint(tensor, k)
            mj = joint_density(k, pots, cache, ref, cons).to_dense()
            np.testing.assert_allclose(mj, oj, rtol=1e-10, atol=1e-13 * oj.max())
        mass = np.exp(path_log_mass(pots, cache, ref, cons))
        assert mass == pytest.approx(oracle.oracle_path_mass(tensor), rel=1e-10)
        d = dual_objective(pots, cache, ref, cons, cp)
        o = oracle.oracle_objective(tensor, pots, cons, cp, ref.h)
        assert d == pytest.approx(o, rel=1e-10)

    def test_joint_rows_match_marginal(self):
        rng = np.random.default_rng(7)
        ref = small_reference(n_steps=3)
        cons = build_constraints(ref, random_instruments(ref, rng))
        pots = random_potentials(ref, cons, rng)
        cache = fresh_cache(ref, pots, cons)
        for k in range(ref.n_steps):
            J = joint_density(k, pots, cache, ref, cons)
            nu = marginal_density(k, pots, cache, ref, cons)
            np.testing.assert_allclose(J.row_sums(), nu, rtol=1e-12,
                                       atol=1e-12 * nu.max())

    def test_shift_covariance(self):
        rng = np.random.default_rng(11)
        ref = small_reference(n_steps=3)
        cons, pots, cache = zero_state(ref)
        pots = random_potentials(ref, cons, rng)
        cache = fresh_cache(ref, pots, cons)
        base_mass = np.exp(path_log_mass(pots, cache, ref, cons))
        base_marg = marginal_density(2, pots, cache, ref, cons)
        c = 0.37
        pots.phi_nu[1] = pots.phi_nu[1] + c
        cache = fresh_cache(ref, pots, cons)
        np.testing.assert_allclose(
            marginal_density(2, pots, cache, ref, cons), np.exp(c) * base_marg,
            rtol=1e-12)
        assert np.exp(path_log_mass(pots, cache, ref, cons)) == pytest.approx(
            np.exp(c) * base_mass, rel=1e-12)


class TestPairStatistic:
    def test_moments_match_direct_sums(self):
        rng = np.random.default_rng(5)
        ref = small_reference(n_steps=3)
        cons = build_constraints(ref, [])
        pots = random_potentials(ref, cons, rng,
                                 statistic=TransitionStatistic.DRIFT_VOL_PAIR)
        cache = fresh_cache(ref, pots, cons)
        tensor = oracle.dense_tensor(pots, ref, cons)
        h = ref.h
        for k in range(ref.n_steps):
            J = oracle.oracle_joint(tensor, k)
            x = ref.grids[k].centers
            y = ref.grids[k + 1].centers
            d = y[None, :] - x[:, None]
            nu = J.sum(axis=1)
            beta_direct = (J * d).sum(axis=1) / nu / h
            alpha_direct = (J * d * d).sum(axis=1) / nu / h
            Jb = joint_density(k, pots, cache, ref, cons)
            dband = y[Jb.lo[:, None] + np.arange(Jb.values.shape[1])] - x[:, None]
            nub = Jb.row_sums()
            np.testing.assert_allclose((Jb.values * dband).sum(1) / nub / h,
                                       beta_direct, rtol=1e-12)
            np.testing.assert_allclose((Jb.values * dband * dband).sum(1) / nub / h,
                                       alpha_direct, rtol=1e-12)


class TestMessageHygiene:
    def test_stale_messages_rejected(self):
        ref = small_reference(n_steps=2)
        cons, pots, _ = zero_state(ref)
        cache = MessageCache.allocate(ref)
        with pytest.raises(ValueError):
            marginal_density(1, pots, cache, ref, cons)

    def test_non_finite_potential_raises(self):
        ref = small_reference(n_steps=2)
        cons, pots, cache = zero_state(ref)
        pots.phi_nu[0] = pots.phi_nu[0] + np.inf
        with pytest.raises(NonFiniteMessage):
            update_psi_up(cache, 0, pots, ref, cons)
