"""Grids, banded kernels and the initial density."""
import numpy as np
import pytest

from mmcalib import discretization as dz
from mmcalib.errors import EmptyBand, MaturityOffGrid

X0 = float(np.log(100.0))


class TestTimeGrid:
    def test_maturity_indices(self):
        tg = dz.build_time_grid(1.0, 5, [0.2, 0.4, 0.6, 0.8, 1.0])
        assert [tg.maturity_map[t] for t in (0.2, 0.4, 0.6, 0.8, 1.0)] == [1, 2, 3, 4, 5]

    def test_fine_grid_index(self):
        tg = dz.build_time_grid(1.0, 80, [0.2])
        assert tg.maturity_map[0.2] == 16

    def test_off_grid_raises(self):
        with pytest.raises(MaturityOffGrid):
            dz.build_time_grid(1.0, 7, [0.2])


class TestSpatialGrids:
    def test_variance_accumulation_closed_form(self):
        tg = dz.build_time_grid(1.0, 80, [1.0])
        grids = dz.build_spatial_grids(tg, 0.2, v0=0.0, delta=5.0, K_pts=50.0,
                                       x_center=X0)
        # v_79 = 0.2 * sqrt(80 * 0.0125) = 0.2, half width 1.0 at delta = 5
        assert grids[79].half_width == pytest.approx(1.0, rel=1e-12)

    def test_parabolic_spacing(self):
        tg = dz.build_time_grid(1.0, 80, [1.0])
        grids = dz.build_spatial_grids(tg, 0.2, v0=0.0, delta=5.0, K_pts=50.0,
                                       x_center=X0)
        assert grids[0].dx == pytest.approx(0.2 * np.sqrt(0.0125) / 50.0, rel=1e-12)
        for g in grids:
            np.testing.assert_allclose(np.diff(g.centers), g.dx, rtol=1e-10)

    def test_point_count_scaling(self):
        def final_count(n_steps):
            tg = dz.build_time_grid(1.0, n_steps, [1.0])
            return dz.build_spatial_grids(tg, 0.2, 0.0, 5.0, 10.0, X0)[-1].n

        ratio = final_count(80) / final_count(20)
        assert 1.9 < ratio < 2.1


class TestKernels:
    def setup_method(self):
        self.ref = dz.build_reference_measure(T=1.0, n_steps=20, maturities=[1.0],
                                              ref_vol=0.2, x0=X0, delta=5.0,
                                              K_pts=20.0)

    def test_rows_are_stochastic(self):
        for kern in self.ref.kernels:
            np.testing.assert_allclose(kern.weights.sum(axis=1), 1.0, atol=1e-12)

    def test_row_self_kl_is_zero(self):
        kern = self.ref.kernels[3]
        w = kern.weights[kern.n_src // 2]
        w = w[w > 0]
        assert np.sum(w * np.log(w / w)) == 0.0

    def test_lognormal_mean_identity(self):
        # martingale drift: E[e^(Y-X) | X] = 1 up to band truncation
        k = 10
        kern = self.ref.kernels[k]
        x = self.ref.grids[k].centers
        y = self.ref.grids[k + 1].centers
        m = (kern.weights * np.exp(y[kern.dst_indices()] - x[:, None])).sum(axis=1)
        h = self.ref.h
        win = 5.0 * 0.2 * np.sqrt(h)
        mean = x - 0.5 * 0.04 * h
        interior = (mean - win >= y[0]) & (mean + win <= y[-1])
        assert interior.sum() > 100
        assert np.max(np.abs(m[interior] - 1.0)) <= 1e-6

    def test_zero_drift_rows_symmetric(self):
        ref = dz.build_reference_measure(T=1.0, n_steps=20, maturities=[1.0],
                                         ref_vol=0.2, x0=X0, delta=5.0,
                                         K_pts=20.0, ref_drift=0.0)
        k = 10
        kern = ref.kernels[k]
        x = ref.grids[k].centers
        y = ref.grids[k + 1].centers
        d = y[kern.dst_indices()] - x[:, None]
        fm = (kern.weights * d).sum(axis=1)
        win = 5.0 * 0.2 * np.sqrt(ref.h)
        interior = (x - win >= y[0]) & (x + win <= y[-1])
        assert np.max(np.abs(fm[interior])) <= 1e-10 * 0.2 * np.sqrt(ref.h)

    def test_band_width(self):
        expected = 2 * 5.0 * 20.0 + 1
        for kern in self.ref.kernels[1:]:
            assert abs(kern.bandwidth - expected) <= 2

    def test_storage_footprint(self):
        stored = sum(k.stored_entries() for k in self.ref.kernels)
        predicted = 5.0 * 20.0 * sum(g.n for g in self.ref.grids[1:])
        assert predicted / 2 <= stored <= 2 * predicted

    def test_empty_band_raises(self):
        tg = dz.build_time_grid(1.0, 1, [1.0])
        near = dz.SpatialGrid(centers=np.array([0.0, 0.01]), dx=0.01, half_width=0.01)
        far = dz.SpatialGrid(centers=np.array([5.0, 5.01]), dx=0.01, half_width=0.01)
        with pytest.raises(EmptyBand):
            dz.build_reference_kernels([near, far], tg, 0.2, 0.0, delta=5.0)


class TestInitialDensity:
    def test_dirac_single_entry(self):
        ref = dz.build_reference_measure(T=1.0, n_steps=4, maturities=[1.0],
                                         ref_vol=0.2, x0=X0, v0=0.0, delta=3.0,
                                         K_pts=5.0)
        nu = ref.nu0
        assert np.count_nonzero(nu) == 1
        assert nu.max() == 1.0
        i = int(np.argmax(nu))
        assert abs(ref.grids[0].centers[i] - X0) <= ref.grids[0].dx / 2

    def test_gaussian_density(self):
        tg = dz.build_time_grid(1.0, 4, [1.0])
        grids = dz.build_spatial_grids(tg, 0.2, v0=0.05, delta=4.0, K_pts=5.0,
                                       x_center=X0)
        nu = dz.build_initial_density(grids[0], X0, 0.05)
        assert nu.sum() == pytest.approx(1.0, abs=1e-14)
        mean = float(nu @ grids[0].centers)
        assert abs(mean - X0) <= grids[0].dx

    def test_x0_outside_grid_rejected(self):
        tg = dz.build_time_grid(1.0, 2, [1.0])
        grids = dz.build_spatial_grids(tg, 0.2, 0.0, 3.0, 4.0, X0)
        with pytest.raises(ValueError):
            dz.build_initial_density(grids[0], X0 + 10.0, 0.0)
