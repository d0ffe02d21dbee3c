"""Shared builders for small test instances."""
import numpy as np

from mmcalib import discretization as dz
from mmcalib.dual import (ConstraintSet, DualPotentials, MessageCache,
                          TransitionStatistic, build_constraints, refresh_all)
from mmcalib.market import Instrument, OptionKind

X0 = float(np.log(100.0))


def small_reference(n_steps=3, T=0.5, ref_vol=0.25, v0=0.05, delta=2.5,
                    K_pts=2.0, maturities=None, ref_drift=None):
    """A tiny chain whose grids stay below ~25 points per timestep."""
    if maturities is None:
        maturities = [T]
    return dz.build_reference_measure(T=T, n_steps=n_steps, maturities=maturities,
                                      ref_vol=ref_vol, x0=X0, v0=v0, delta=delta,
                                      K_pts=K_pts, ref_drift=ref_drift)


def random_instruments(reference, rng, per_maturity=2):
    """Instruments with random strikes at every maturity on the grid."""
    out = []
    for tau, k in reference.time_grid.maturity_map.items():
        for _ in range(per_maturity):
            strike = float(rng.uniform(90.0, 110.0))
            kind = OptionKind.CALL if rng.random() < 0.5 else OptionKind.PUT
            price = float(rng.uniform(0.5, 5.0))
            out.append(Instrument(maturity_index=k, strike=strike, kind=kind,
                                  target_price=price, maturity=tau))
    return out


def random_potentials(reference, constraints, rng, scale=1.0, lam_scale=0.01,
                      statistic=TransitionStatistic.MARTINGALE_EXP):
    """Uniform potentials in [-scale, scale]; multipliers kept small so the
    payoff/h exponents stay in range on coarse test grids."""
    pots = DualPotentials.zeros(reference, constraints, statistic)
    for k in range(len(pots.phi_nu)):
        pots.phi_nu[k] = rng.uniform(-scale, scale, pots.phi_nu[k].shape)
    for k in range(len(pots.phi_m)):
        pots.phi_m[k] = rng.uniform(-scale, scale, pots.phi_m[k].shape)
    for k in range(len(pots.lam)):
        pots.lam[k] = rng.uniform(-lam_scale, lam_scale, pots.lam[k].shape)
    return pots


def fresh_cache(reference, potentials, constraints):
    cache = MessageCache.allocate(reference)
    refresh_all(cache, potentials, reference, constraints)
    return cache


def zero_state(reference, instruments=()):
    """(constraints, zero potentials, fresh cache) for a reference chain."""
    cons = build_constraints(reference, list(instruments))
    pots = DualPotentials.zeros(reference, cons)
    cache = fresh_cache(reference, pots, cons)
    return cons, pots, cache
