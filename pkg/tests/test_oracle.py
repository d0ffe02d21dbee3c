"""Dense path-tensor reference implementation."""
import numpy as np
import pytest

from _helpers import small_reference, zero_state
from mmcalib import oracle
from mmcalib.errors import TooLarge


class TestDenseTensor:
    def test_zero_potentials_mass_one(self):
        ref = small_reference(n_steps=3)
        cons, pots, _ = zero_state(ref)
        t = oracle.dense_tensor(pots, ref, cons)
        assert oracle.oracle_path_mass(t) == pytest.approx(1.0, abs=1e-12)

    def test_single_step_closed_form(self):
        ref = small_reference(n_steps=1, T=0.25, maturities=[0.25])
        cons, pots, _ = zero_state(ref)
        t = oracle.dense_tensor(pots, ref, cons)
        expected = ref.nu0[:, None] * ref.kernels[0].to_dense()
        np.testing.assert_allclose(t.values, expected, atol=1e-15)

    def test_marginals_normalized(self):
        ref = small_reference(n_steps=2)
        cons, pots, _ = zero_state(ref)
        t = oracle.dense_tensor(pots, ref, cons)
        for k in range(3):
            assert oracle.oracle_marginal(t, k).sum() == pytest.approx(1.0, abs=1e-12)

    def test_joint_rows_are_marginals(self):
        ref = small_reference(n_steps=3)
        cons, pots, _ = zero_state(ref)
        t = oracle.dense_tensor(pots, ref, cons)
        for k in range(3):
            np.testing.assert_allclose(oracle.oracle_joint(t, k).sum(axis=1),
                                       oracle.oracle_marginal(t, k), atol=1e-13)

    def test_size_guard(self):
        ref = small_reference(n_steps=8, T=1.0, maturities=[1.0], delta=4.0,
                              K_pts=4.0)
        sizes = [g.n for g in ref.grids]
        assert np.prod([float(s) for s in sizes]) > oracle.SIZE_GUARD
        cons, pots, _ = zero_state(ref)
        with pytest.raises(TooLarge):
            oracle.dense_tensor(pots, ref, cons)
