"""Anderson mixing of the sweep fixed-point map and multiscale warm restart."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .discretization import ReferenceMeasure, build_reference_measure
from .dual import DualPotentials
from .errors import GridMismatch


@dataclass
class AndersonState:
    """Short history of fixed-point iterates and residuals for mixing."""

    depth: int = 5
    regularization: float = 1e-10
    iterate_history: list = field(default_factory=list)   # g_j = s(x_j)
    residual_history: list = field(default_factory=list)  # r_j = g_j - x_j

    def __len__(self) -> int:
        return len(self.residual_history)

    def reset(self):
        self.iterate_history.clear()
        self.residual_history.clear()


def anderson_step(state: AndersonState, new_iterate: np.ndarray,
                  new_residual: np.ndarray) -> np.ndarray:
    """Push the latest (iterate, residual) pair and return the mixed iterate.

    Solves the Tikhonov-regularized least squares over residual differences;
    with fewer than two history pairs, depth < 2, or any non-finite output it
    falls back to the plain iterate (returning the same object, so callers
    can detect that no extrapolation happened).
    """
    state.iterate_history.append(np.asarray(new_iterate, dtype=float))
    state.residual_history.append(np.asarray(new_residual, dtype=float))
    while len(state.iterate_history) > max(state.depth, 1):
        state.iterate_history.pop(0)
        state.residual_history.pop(0)
    if state.depth < 2 or len(state.residual_history) < 2:
        return new_iterate

    G = np.column_stack(state.iterate_history)
    R = np.column_stack(state.residual_history)
    dR = np.diff(R, axis=1)
    dG = np.diff(G, axis=1)
    rhs = dR.T @ R[:, -1]
    A = dR.T @ dR
    # relative Tikhonov: an absolute shift would freeze the mixing once the
    # residual differences shrink below its scale
    scale = max(float(np.trace(A)) / A.shape[0], 1e-300)
    A = A + state.regularization * scale * np.eye(dR.shape[1])
    try:
        gamma = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        state.reset()
        return new_iterate
    mixed = G[:, -1] - dG @ gamma
    if not np.all(np.isfinite(mixed)):
        state.reset()
        return new_iterate
    return mixed


class RefineMode(Enum):
    INTERPOLATE_POTENTIALS = "interpolate"
    REBUILD_REFERENCE = "rebuild_reference"


@dataclass(frozen=True)
class MultiscaleSchedule:
    """Increasing list of time-grid point counts and the refinement rule."""

    levels: tuple
    refine_mode: RefineMode = RefineMode.INTERPOLATE_POTENTIALS

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("schedule levels must be strictly increasing")


def _interp_to(fine_x: np.ndarray, coarse_x: np.ndarray, vals: np.ndarray) -> np.ndarray:
    return np.interp(fine_x, coarse_x, vals)


def _time_blend(t: float, h_c: float, n_c: int):
    s = t / h_c
    j = int(np.floor(s))
    j = min(max(j, 0), n_c - 1)
    return j, min(max(s - j, 0.0), 1.0)


def refine_level(coarse_potentials: DualPotentials, coarse_ref: ReferenceMeasure,
                 fine_ref: ReferenceMeasure,
                 mode: RefineMode = RefineMode.INTERPOLATE_POTENTIALS,
                 vol_surface=None, grid_params=None):
    """Warm-start data for a finer time grid from a converged coarse level.

    INTERPOLATE_POTENTIALS returns potentials piecewise-linear in time
    (linear in space where the grids differ) with multipliers copied at the
    shared maturities, together with fine_ref unchanged.  REBUILD_REFERENCE
    returns (None, new_reference) where the new reference carries the local
    volatility extracted from the coarse solution (vol_surface callable);
    potentials restart from zero.
    """
    tg_c, tg_f = coarse_ref.time_grid, fine_ref.time_grid
    ratio = tg_c.h / tg_f.h
    if abs(ratio - round(ratio)) > 1e-9 or tg_f.horizon != tg_c.horizon:
        raise GridMismatch("fine timesteps must nest inside the coarse grid")
    for tau in tg_c.maturity_map:
        if tau not in tg_f.maturity_map:
            raise GridMismatch(f"maturity {tau} missing from the fine grid")

    if mode is RefineMode.REBUILD_REFERENCE:
        if vol_surface is None:
            raise ValueError("REBUILD_REFERENCE needs the extracted vol surface")
        params = dict(grid_params or {})
        new_ref = build_reference_measure(
            T=tg_f.horizon, n_steps=tg_f.n_steps,
            maturities=list(tg_f.maturity_map.keys()),
            ref_vol=vol_surface, **params)
        return None, new_ref

    n_c, n_f = tg_c.n_steps, tg_f.n_steps
    fine = DualPotentials(
        phi_nu=[np.zeros(g.n) for g in fine_ref.grids],
        phi_m=[np.zeros(g.n) for g in fine_ref.grids[:-1]],
        lam=[np.zeros(0) for _ in range(n_f + 1)],
        statistic=coarse_potentials.statistic)

    def blend(kf, series, last_index):
        j, w = _time_blend(kf * tg_f.h, tg_c.h, last_index)
        jn = min(j + 1, last_index)
        fx = fine_ref.grids[kf].centers
        if series[j].ndim == 1:
            a = _interp_to(fx, cx[j], series[j])
            b = _interp_to(fx, cx[jn], series[jn])
            return (1.0 - w) * a + w * b
        cols = [(1.0 - w) * _interp_to(fx, cx[j], series[j][:, c])
                + w * _interp_to(fx, cx[jn], series[jn][:, c])
                for c in range(series[j].shape[1])]
        return np.column_stack(cols)

    cx = [g.centers for g in coarse_ref.grids]
    # The t=0 marginal potential carries the hard-constraint spike (capped
    # log-ratio); it is re-derived in closed form on the fine level and must
    # not be blended into interior warm-start nodes. Copy it at t=0, and use
    # the first interior node for fine times inside the first coarse step.
    fine.phi_nu[0] = _interp_to(fine_ref.grids[0].centers, cx[0],
                                coarse_potentials.phi_nu[0])
    for kf in range(1, n_f + 1):
        if kf * tg_f.h <= tg_c.h:
            fine.phi_nu[kf] = _interp_to(fine_ref.grids[kf].centers, cx[1],
                                         coarse_potentials.phi_nu[1])
        else:
            fine.phi_nu[kf] = blend(kf, coarse_potentials.phi_nu, n_c)
    for kf in range(n_f):
        fine.phi_m[kf] = blend(kf, coarse_potentials.phi_m, n_c - 1)

    for tau, kc in tg_c.maturity_map.items():
        kf = tg_f.maturity_map[tau]
        fine.lam[kf] = coarse_potentials.lam[kc].copy()
    return fine, fine_ref
