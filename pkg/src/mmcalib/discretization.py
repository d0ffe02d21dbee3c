"""Time grid, truncated spatial grids and banded Gaussian reference kernels.

The reference chain is the Euler step
    Y_{k+1} = Y_k + mu_bar(Y_k, t_k) h + sigma_bar(Y_k, t_k) sqrt(h) Z,
truncated to a sliding window of delta standard deviations around the
drift-shifted source point and renormalized row by row.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBand, MaturityOffGrid


def as_coefficient(spec):
    """Turn a scalar or callable(x, t) coefficient into a callable."""
    if callable(spec):
        return spec
    val = float(spec)
    return lambda x, t: np.full_like(np.asarray(x, dtype=float), val)


def log_drift_of_vol(ref_vol) -> callable:
    """Martingale-in-price reference drift: mu_bar = -sigma_bar^2 / 2."""
    vol = as_coefficient(ref_vol)
    return lambda x, t: -0.5 * vol(x, t) ** 2


@dataclass(frozen=True)
class TimeGrid:
    n_steps: int
    h: float
    horizon: float
    maturity_map: dict

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    def times(self) -> np.ndarray:
        return self.h * np.arange(self.n_points)


@dataclass(frozen=True)
class SpatialGrid:
    centers: np.ndarray
    dx: float
    half_width: float

    @property
    def n(self) -> int:
        return self.centers.size


@dataclass
class TransitionKernel:
    """Banded row-stochastic kernel between consecutive spatial grids.

    Row i covers destination indices lo[i] .. lo[i]+bandwidth-1; entries
    outside the per-source window carry log-weight -inf.  rev_lo/rev_hi give,
    per destination index, the source range whose band covers it.
    """

    lo: np.ndarray                # (n_src,) int
    log_weights: np.ndarray       # (n_src, bandwidth)
    n_dst: int
    rev_lo: np.ndarray = field(init=False)
    rev_hi: np.ndarray = field(init=False)
    _idx: np.ndarray = field(init=False, default=None, repr=False)
    _band_cache: dict = field(init=False, default_factory=dict, repr=False)

    def __post_init__(self):
        j = np.arange(self.n_dst)
        self.rev_lo = np.searchsorted(self.lo, j - self.bandwidth, side="right")
        self.rev_hi = np.searchsorted(self.lo, j, side="right")

    @property
    def n_src(self) -> int:
        return self.log_weights.shape[0]

    @property
    def bandwidth(self) -> int:
        return self.log_weights.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def dst_indices(self) -> np.ndarray:
        if self._idx is None:
            self._idx = (self.lo[:, None]
                         + np.arange(self.bandwidth)[None, :]).astype(np.int32)
        return self._idx

    def band_values(self, key: str, fn) -> np.ndarray:
        """Lazily cached per-band arrays (increments, statistic values...)."""
        if key not in self._band_cache:
            self._band_cache[key] = fn()
        return self._band_cache[key]

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_src, self.n_dst))
        np.put_along_axis(out, self.dst_indices(), self.weights, axis=1)
        return out

    def stored_entries(self) -> int:
        return int(np.isfinite(self.log_weights).sum())


@dataclass
class ReferenceMeasure:
    """Reference chain: grids, banded kernels and the initial density."""

    time_grid: TimeGrid
    grids: list
    kernels: list
    nu0: np.ndarray
    ref_vol: callable
    ref_drift: callable

    @property
    def n_steps(self) -> int:
        return self.time_grid.n_steps

    @property
    def h(self) -> float:
        return self.time_grid.h


def build_time_grid(T: float, n_steps: int, maturities) -> TimeGrid:
    """Regular grid of n_steps+1 points; every maturity must sit on a node."""
    if T <= 0 or n_steps < 1:
        raise ValueError("need T > 0 and n_steps >= 1")
    h = T / n_steps
    mat_map = {}
    for tau in maturities:
        k = round(tau / h)
        if k < 0 or k > n_steps or abs(tau - k * h) > 1e-9 * max(1.0, abs(tau)):
            raise MaturityOffGrid(
                f"maturity {tau} is not a multiple of h={h} within tolerance")
        mat_map[float(tau)] = int(k)
    return TimeGrid(n_steps=n_steps, h=h, horizon=T, maturity_map=mat_map)


def _step_vol_scales(time_grid: TimeGrid, vol, x_center: float, v0: float,
                     delta: float) -> np.ndarray:
    """Per-step volatility scale used for grid sizing (max over a probe)."""
    h = time_grid.h
    scales = np.empty(time_grid.n_points)
    v = v0
    c = x_center
    for k in range(time_grid.n_points):
        t = k * h
        hw = max(delta * v, 1e-12)
        probe = c + np.linspace(-hw, hw, 65)
        s = float(np.max(vol(probe, t)))
        if not (s > 0):
            raise ValueError("reference volatility must be positive")
        scales[k] = s
        v = np.sqrt(v * v + h * s * s)
    return scales


def build_spatial_grids(time_grid: TimeGrid, ref_vol, v0: float, delta: float,
                        K_pts: float, x_center: float, ref_drift=None) -> list:
    """Per-timestep grids with parabolic spacing dx = sigma_bar sqrt(h)/K_pts.

    Half-width at step k is delta * v_k with v_k = sqrt(v0^2 + h sum_{l<=k}
    sigma_l^2); all grids share the spacing of the smallest sigma_l.  Centers
    follow the accumulated reference drift.
    """
    if delta <= 0 or K_pts < 1:
        raise ValueError("need delta > 0 and K_pts >= 1")
    vol = as_coefficient(ref_vol)
    drift = log_drift_of_vol(vol) if ref_drift is None else as_coefficient(ref_drift)
    h = time_grid.h
    scales = _step_vol_scales(time_grid, vol, x_center, v0, delta)
    dx = float(np.min(scales)) * np.sqrt(h) / K_pts

    grids = []
    v_sq = v0 * v0
    center = x_center
    for k in range(time_grid.n_points):
        v_sq += h * scales[k] ** 2
        v_k = np.sqrt(v_sq)
        half = delta * v_k
        m = int(np.ceil(half / dx))
        centers = center + dx * np.arange(-m, m + 1)
        grids.append(SpatialGrid(centers=centers, dx=dx, half_width=half))
        center += h * float(drift(np.asarray([center]), k * h)[0])
    return grids


def build_reference_kernels(grids, time_grid: TimeGrid, ref_vol, ref_drift,
                            delta: float, band_vol=None) -> list:
    """Banded Euler-step Gaussian kernels between consecutive grids.

    Row weights are the normal density N(x + mu_bar h, sigma_bar^2 h) at the
    destination points, zeroed outside the sliding window
    [x + mu_bar h - delta*w*sqrt(h), x + mu_bar h + delta*w*sqrt(h)]
    (w = band_vol, defaulting to sigma_bar) and renormalized to sum to one.
    """
    vol = as_coefficient(ref_vol)
    drift = log_drift_of_vol(vol) if ref_drift is None else as_coefficient(ref_drift)
    window_vol = vol if band_vol is None else as_coefficient(band_vol)
    h = time_grid.h
    sqh = np.sqrt(h)

    kernels = []
    for k in range(time_grid.n_steps):
        src = grids[k].centers
        dst = grids[k + 1].centers
        n_dst = dst.size
        t = k * h
        mean = src + h * drift(src, t)
        sd = vol(src, t) * sqh
        win = delta * window_vol(src, t) * sqh

        # half-cell search margin + relative mask slack keep window-edge
        # lattice points included symmetrically despite fp ties
        dx = grids[k + 1].dx
        lo_f = np.searchsorted(dst, mean - win - 0.5 * dx, side="left")
        hi_f = np.searchsorted(dst, mean + win + 0.5 * dx, side="right")
        if np.any(hi_f <= lo_f):
            raise EmptyBand(f"no destination point in band at step {k}")
        bw = int(np.max(hi_f - lo_f))
        bw = min(bw, n_dst)
        lo = np.clip(lo_f, 0, n_dst - bw).astype(np.int64)

        j = lo[:, None] + np.arange(bw)[None, :]
        y = dst[j]
        z = (y - mean[:, None]) / sd[:, None]
        w = np.exp(-0.5 * z * z)
        w[np.abs(y - mean[:, None]) > win[:, None] * (1 + 1e-9)] = 0.0
        row_sums = w.sum(axis=1)
        if np.any(row_sums <= 0):
            raise EmptyBand(f"empty kernel row at step {k}")
        w /= row_sums[:, None]
        with np.errstate(divide="ignore"):
            log_w = np.log(w)
        kernels.append(TransitionKernel(lo=lo, log_weights=log_w, n_dst=n_dst))
    return kernels


def build_initial_density(grid0: SpatialGrid, x0: float, v0: float) -> np.ndarray:
    """Initial density on grid0: point mass if v0 = 0, else discrete Gaussian."""
    x = grid0.centers
    if not (x[0] - grid0.dx / 2 <= x0 <= x[-1] + grid0.dx / 2):
        raise ValueError("x0 outside the initial grid")
    if v0 == 0.0:
        nu = np.zeros(x.size)
        nu[int(np.argmin(np.abs(x - x0)))] = 1.0
        return nu
    z = (x - x0) / v0
    nu = np.exp(-0.5 * z * z)
    return nu / nu.sum()


def build_reference_measure(T: float, n_steps: int, maturities, ref_vol,
                            x0: float, v0: float = 0.0, delta: float = 5.0,
                            K_pts: float = 50.0, ref_drift=None,
                            band_vol=None) -> ReferenceMeasure:
    """Assemble the full reference chain for one time-resolution level."""
    tg = build_time_grid(T, n_steps, maturities)
    vol = as_coefficient(ref_vol)
    drift = log_drift_of_vol(vol) if ref_drift is None else as_coefficient(ref_drift)
    grids = build_spatial_grids(tg, vol, v0, delta, K_pts, x0, ref_drift=drift)
    kernels = build_reference_kernels(grids, tg, vol, drift, delta, band_vol=band_vol)
    nu0 = build_initial_density(grids[0], x0, v0)
    return ReferenceMeasure(time_grid=tg, grids=grids, kernels=kernels,
                            nu0=nu0, ref_vol=vol, ref_drift=drift)
