"""Model characteristics, calibration errors and entropy diagnostics.

All conditional statistics are taken under the calibrated chain's joint
densities; grid points carrying less than MASS_FLOOR marginal mass are
masked and report zeros rather than NaNs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .discretization import ReferenceMeasure
from .dual import (ConstraintSet, DualPotentials, MessageCache,
                   joint_log_banded, marginal_density, marginal_log)

MASS_FLOOR = 1e-300


@dataclass
class Characteristics:
    """Per-timestep conditional moments of the calibrated chain."""

    beta: list        # drift E[dX | x] / h
    alpha: list       # second moment E[dX^2 | x] / h
    local_vol: list   # sqrt(alpha - h beta^2), clipped at zero
    mart_stat: list   # E[1 - e^dX | x] / h
    mask: list        # True where the marginal carries mass


@dataclass
class CalibrationResult:
    marginals: list
    characteristics: Characteristics
    model_prices: np.ndarray
    model_implied_vols: np.ndarray
    target_prices: np.ndarray
    history: list
    price_error_l2: float
    martingale_error_l2: float
    specific_entropy: tuple
    converged: bool


def normal_kl(mu1: float, var1: float, mu2: float, var2: float) -> float:
    """KL divergence between the normal laws N(mu1, var1) and N(mu2, var2)."""
    if var1 <= 0 or var2 <= 0:
        raise ValueError("variances must be positive")
    return 0.5 * ((var1 + (mu1 - mu2) ** 2) / var2 - 1.0 - np.log(var1 / var2))


def _conditional_sums(k: int, potentials, cache, reference, constraints):
    """Stabilized row sums of the joint against powers of the increment."""
    lg = joint_log_banded(k, potentials, cache, reference, constraints)
    kern = reference.kernels[k]
    x = reference.grids[k].centers
    y = reference.grids[k + 1].centers[kern.dst_indices()]
    d = y - x[:, None]
    R = lg.values.max(axis=1)
    ok = np.isfinite(R)
    R_safe = np.where(ok, R, 0.0)
    e = np.exp(lg.values - R_safe[:, None])
    s0 = e.sum(axis=1)
    sums = {
        "mass": np.where(ok, np.exp(R_safe) * s0, 0.0),
        "d": (e * d).sum(axis=1),
        "d2": (e * d * d).sum(axis=1),
        "b": (e * (1.0 - np.exp(d))).sum(axis=1),
        "s0": s0,
        "ok": ok,
    }
    return sums, d, e


def extract_characteristics(potentials: DualPotentials, cache: MessageCache,
                            reference: ReferenceMeasure,
                            constraints: ConstraintSet) -> Characteristics:
    """Conditional drift, second moment, martingale statistic and local vol."""
    h = reference.h
    beta, alpha, sig, mart, mask = [], [], [], [], []
    for k in range(reference.n_steps):
        sums, _, _ = _conditional_sums(k, potentials, cache, reference, constraints)
        ok = sums["ok"] & (sums["mass"] >= MASS_FLOOR)
        s0 = np.where(ok, sums["s0"], 1.0)
        b = np.where(ok, sums["d"] / s0 / h, 0.0)
        a = np.where(ok, sums["d2"] / s0 / h, 0.0)
        m = np.where(ok, sums["b"] / s0 / h, 0.0)
        v = np.sqrt(np.maximum(a - h * b * b, 0.0))
        beta.append(b)
        alpha.append(a)
        sig.append(v)
        mart.append(m)
        mask.append(ok)
    return Characteristics(beta=beta, alpha=alpha, local_vol=sig,
                           mart_stat=mart, mask=mask)


def local_vol_surface(characteristics: Characteristics,
                      reference: ReferenceMeasure) -> np.ndarray:
    """Rows (t_k, x, sigma_k(x)) over all unmasked lattice points."""
    rows = []
    h = reference.h
    for k in range(reference.n_steps):
        m = characteristics.mask[k]
        x = reference.grids[k].centers[m]
        s = characteristics.local_vol[k][m]
        t = np.full(x.shape, k * h)
        rows.append(np.column_stack([t, x, s]))
    return np.vstack(rows) if rows else np.zeros((0, 3))


def local_vol_callable(characteristics: Characteristics,
                       reference: ReferenceMeasure,
                       floor_frac: float = 0.1, cap_frac: float = 10.0):
    """Clamped sigma(x, t) interpolant of the extracted surface.

    Used to rebuild a reference measure from a coarse solution; masked
    points fall back to the reference volatility.
    """
    h = reference.h
    xs, vs = [], []
    for k in range(reference.n_steps):
        x = reference.grids[k].centers
        ref_v = reference.ref_vol(x, k * h)
        v = np.where(characteristics.mask[k], characteristics.local_vol[k], ref_v)
        v = np.clip(v, floor_frac * ref_v, cap_frac * ref_v)
        # dead zones (sigma ~ 0 inside the mask) also revert to the reference
        v = np.where(v < floor_frac * ref_v + 1e-30, ref_v, v)
        xs.append(x)
        vs.append(v)

    n = reference.n_steps

    def surface(x, t):
        x = np.asarray(x, dtype=float)
        s = np.clip(t / h, 0.0, n - 1)
        j = min(int(np.floor(s)), n - 1)
        jn = min(j + 1, n - 1)
        w = min(max(s - j, 0.0), 1.0)
        a = np.interp(x, xs[j], vs[j])
        b = np.interp(x, xs[jn], vs[jn])
        return (1.0 - w) * a + w * b

    return surface


def model_prices(potentials: DualPotentials, cache: MessageCache,
                 reference: ReferenceMeasure,
                 constraints: ConstraintSet) -> np.ndarray:
    """Payoff expectations under the (renormalized) maturity marginals."""
    out = np.zeros(constraints.n_instruments)
    for k, blk in constraints.blocks.items():
        nu = marginal_density(k, potentials, cache, reference, constraints)
        mass = nu.sum()
        if mass <= 0:
            continue
        g = blk.payoffs.T @ (nu / mass)
        out[blk.instrument_ids] = g
    return out


def target_prices(constraints: ConstraintSet) -> np.ndarray:
    out = np.zeros(constraints.n_instruments)
    for blk in constraints.blocks.values():
        out[blk.instrument_ids] = blk.targets
    return out


def price_error_l2(potentials, cache, reference, constraints) -> float:
    g = model_prices(potentials, cache, reference, constraints)
    return float(np.linalg.norm(g - target_prices(constraints)))


def martingale_error_l2(potentials, cache, reference, constraints) -> float:
    """Mass- and h-weighted L2 norm of the conditional martingale statistic."""
    h = reference.h
    total = 0.0
    for k in range(reference.n_steps):
        sums, _, _ = _conditional_sums(k, potentials, cache, reference, constraints)
        ok = sums["ok"] & (sums["mass"] >= MASS_FLOOR)
        s0 = np.where(ok, sums["s0"], 1.0)
        b = np.where(ok, sums["b"] / s0 / h, 0.0)
        nu = sums["mass"]
        mass = nu.sum()
        if mass <= 0:
            continue
        total += h * float(((nu / mass) * b * b).sum())
    return float(np.sqrt(total))


def error_norms(potentials, cache, reference, constraints):
    return (price_error_l2(potentials, cache, reference, constraints),
            martingale_error_l2(potentials, cache, reference, constraints))


def specific_entropy(potentials: DualPotentials, cache: MessageCache,
                     reference: ReferenceMeasure, constraints: ConstraintSet):
    """(h * KL against the reference chain, its small-step limit value).

    The exact term sums KL of the joint laws against marginal x reference
    transitions; the limit form integrates
    sigma^2/sigma_bar^2 - 1 - log(sigma^2/sigma_bar^2)
    over the extracted local volatility, halved.
    """
    h = reference.h
    n = reference.n_steps

    log_mass = None
    h_kl = 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        nu0 = marginal_density(0, potentials, cache, reference, constraints)
        mass = nu0.sum()
        if mass > 0:
            nu0n = nu0 / mass
            pos = nu0n > 0
            h_kl += h * float(np.sum(nu0n[pos] * np.log(nu0n[pos] / reference.nu0[pos])))
        for k in range(n):
            lg = joint_log_banded(k, potentials, cache, reference, constraints)
            kern = reference.kernels[k]
            if log_mass is None:
                v = lg.values
                m = v.max()
                log_mass = m + np.log(np.exp(v - m).sum())
            marg = marginal_log(k, potentials, cache, reference, constraints)
            cond = lg.values - marg[:, None] - kern.log_weights
            J = np.exp(lg.values - log_mass)
            term = np.where(J > 0, J * np.where(np.isfinite(cond), cond, 0.0), 0.0)
            h_kl += h * float(term.sum())

    chars = extract_characteristics(potentials, cache, reference, constraints)
    s_limit = 0.0
    for k in range(n):
        nu = marginal_density(k, potentials, cache, reference, constraints)
        mass = nu.sum()
        if mass <= 0:
            continue
        nu = nu / mass
        x = reference.grids[k].centers
        sb2 = reference.ref_vol(x, k * h) ** 2
        s2 = chars.local_vol[k] ** 2
        ok = chars.mask[k] & (s2 > 0)
        r = s2[ok] / sb2[ok]
        s_limit += 0.5 * h * float(np.sum(nu[ok] * (r - 1.0 - np.log(r))))
    return float(h_kl), float(s_limit)


def summarize(potentials: DualPotentials, cache: MessageCache,
              reference: ReferenceMeasure, constraints: ConstraintSet,
              instruments, spot: float, history, converged: bool) -> CalibrationResult:
    """Collect everything the artifact writers need from a finished solve."""
    from .errors import PriceOutOfBounds
    from .market import implied_vol

    marginals = [marginal_density(k, potentials, cache, reference, constraints)
                 for k in range(reference.n_steps + 1)]
    chars = extract_characteristics(potentials, cache, reference, constraints)
    prices = model_prices(potentials, cache, reference, constraints)
    ivs = np.full(len(instruments), np.nan)
    for i, inst in enumerate(instruments):
        try:
            ivs[i] = implied_vol(spot, inst.strike, inst.maturity, prices[i], inst.kind)
        except PriceOutOfBounds:
            pass
    return CalibrationResult(
        marginals=marginals,
        characteristics=chars,
        model_prices=prices,
        model_implied_vols=ivs,
        target_prices=target_prices(constraints),
        history=list(history),
        price_error_l2=float(np.linalg.norm(prices - target_prices(constraints))),
        martingale_error_l2=martingale_error_l2(potentials, cache, reference, constraints),
        specific_entropy=specific_entropy(potentials, cache, reference, constraints),
        converged=converged,
    )
