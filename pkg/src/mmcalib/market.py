"""Synthetic option market: SSVI surface, Black-Scholes pricing, instruments.

Everything is undiscounted and driftless (zero rates): prices are forward
prices and the forward equals the spot.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.stats import norm

from .errors import PriceOutOfBounds

# Maturities and per-maturity strike ladder sizes of the default experiment.
DEFAULT_MATURITIES = (0.2, 0.4, 0.6, 0.8, 1.0)
DEFAULT_STRIKE_COUNTS = (5, 7, 9, 10, 12)


class OptionKind(Enum):
    CALL = "call"
    PUT = "put"


@dataclass(frozen=True)
class SsviParams:
    """Power-law SSVI total-variance surface parameters.

    Total variance at log-moneyness k and maturity t:
        w(k, t) = theta/2 * (1 + rho*phi*k + sqrt((phi*k + rho)^2 + 1 - rho^2))
    with theta = theta_slope * t and phi = eta * theta^(-lam).
    """

    eta: float = 1.6
    lam: float = 0.4
    rho: float = -0.15
    theta_slope: float = 0.04

    def __post_init__(self):
        if not (self.eta > 0):
            raise ValueError("eta must be positive")
        if not (0.0 < self.lam < 1.0):
            raise ValueError("lam must lie in (0, 1)")
        if not (abs(self.rho) < 1.0):
            raise ValueError("|rho| must be < 1")
        if not (self.theta_slope > 0):
            raise ValueError("theta_slope must be positive")


@dataclass(frozen=True)
class Instrument:
    """One calibration target."""

    maturity_index: int
    strike: float
    kind: OptionKind
    target_price: float
    maturity: float = 0.0

    def __post_init__(self):
        if self.strike <= 0:
            raise ValueError("strike must be positive")
        if self.target_price < 0:
            raise ValueError("target price must be nonnegative")


@dataclass(frozen=True)
class OptionQuote:
    """A priced quote with its implied volatility."""

    maturity: float
    strike: float
    kind: OptionKind
    price: float
    implied_vol: float


def ssvi_total_variance(params: SsviParams, log_moneyness, t):
    """Total implied variance w = sigma_BS^2 * t of the SSVI surface."""
    k = np.asarray(log_moneyness, dtype=float)
    t = np.asarray(t, dtype=float)
    if not (np.all(np.isfinite(k)) and np.all(np.isfinite(t))):
        raise ValueError("non-finite SSVI inputs")
    if np.any(t <= 0):
        raise ValueError("maturity must be positive")
    theta = params.theta_slope * t
    phi = params.eta * theta ** (-params.lam)
    rho = params.rho
    w = 0.5 * theta * (1.0 + rho * phi * k + np.sqrt((phi * k + rho) ** 2 + 1.0 - rho**2))
    return w if w.ndim else float(w)


def black_scholes_price(forward: float, strike: float, total_variance: float,
                        kind: OptionKind) -> float:
    """Undiscounted forward price of a European option.

    total_variance = 0 returns the intrinsic value.
    """
    if forward <= 0 or strike <= 0:
        raise ValueError("forward and strike must be positive")
    if total_variance < 0:
        raise ValueError("total variance must be nonnegative")
    if total_variance == 0.0:
        intrinsic = forward - strike if kind is OptionKind.CALL else strike - forward
        return max(intrinsic, 0.0)
    s = np.sqrt(total_variance)
    d1 = np.log(forward / strike) / s + 0.5 * s
    d2 = d1 - s
    call = forward * norm.cdf(d1) - strike * norm.cdf(d2)
    if kind is OptionKind.CALL:
        return float(call)
    return float(call - forward + strike)


def _price_bounds(forward: float, strike: float, kind: OptionKind):
    if kind is OptionKind.CALL:
        return max(forward - strike, 0.0), forward
    return max(strike - forward, 0.0), strike


def implied_vol(forward: float, strike: float, t: float, price: float,
                kind: OptionKind, price_tol: float = 1e-12) -> float:
    """Invert the Black-Scholes price for the implied volatility.

    Monotone bisection on the bracket [1e-6, 5], then Newton polish.
    Raises PriceOutOfBounds if the price is not strictly inside the static
    arbitrage bounds.
    """
    lo_p, hi_p = _price_bounds(forward, strike, kind)
    if not (lo_p < price < hi_p):
        raise PriceOutOfBounds(
            f"price {price} outside ({lo_p}, {hi_p}) for {kind.value} K={strike}")
    lo, hi = 1e-6, 5.0
    f = lambda sig: black_scholes_price(forward, strike, sig * sig * t, kind) - price
    if f(lo) > 0:
        return lo
    if f(hi) < 0:
        return hi
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    sig = 0.5 * (lo + hi)
    # Newton polish on the price residual; vega of the forward price.
    for _ in range(8):
        w = sig * sig * t
        diff = black_scholes_price(forward, strike, w, kind) - price
        if abs(diff) <= price_tol:
            break
        s = np.sqrt(w)
        d1 = np.log(forward / strike) / s + 0.5 * s
        vega = forward * norm.pdf(d1) * np.sqrt(t)
        if vega < 1e-14:
            break
        step = diff / vega
        sig = min(max(sig - step, 1e-6), 5.0)
    return float(sig)


def payoff(kind: OptionKind, strike: float, x):
    """Option payoff in price units at log-price x."""
    s = np.exp(np.asarray(x, dtype=float))
    if kind is OptionKind.CALL:
        out = np.maximum(s - strike, 0.0)
    else:
        out = np.maximum(strike - s, 0.0)
    return out if out.ndim else float(out)


def generate_synthetic_instruments(params: SsviParams, spot: float,
                                   maturities=DEFAULT_MATURITIES,
                                   strike_counts=DEFAULT_STRIKE_COUNTS,
                                   maturity_indices=None) -> list[Instrument]:
    """Build the synthetic calibration target set.

    At maturity i the calls have strikes spot + 1 + 4*j and the puts
    spot - 1 - 4*j for j = 0..strike_counts[i], priced off the SSVI surface.
    maturity_indices, when given, maps each maturity to its timestep index
    (otherwise indices are left at -1 and must be assigned later).
    """
    if spot <= 0:
        raise ValueError("spot must be positive")
    if len(strike_counts) != len(maturities):
        raise ValueError("one strike count per maturity required")
    out = []
    for i, (t, n_c) in enumerate(zip(maturities, strike_counts)):
        k_idx = maturity_indices[i] if maturity_indices is not None else -1
        for j in range(n_c + 1):
            for kind, strike in ((OptionKind.CALL, spot + 1.0 + 4.0 * j),
                                 (OptionKind.PUT, spot - 1.0 - 4.0 * j)):
                if strike <= 0:
                    raise ValueError("put ladder reached a nonpositive strike")
                w = ssvi_total_variance(params, np.log(strike / spot), t)
                price = black_scholes_price(spot, strike, w, kind)
                out.append(Instrument(maturity_index=k_idx, strike=strike,
                                      kind=kind, target_price=price, maturity=t))
    return out


def quote_from_instrument(inst: Instrument, spot: float) -> OptionQuote:
    """Attach the implied vol to an instrument's target price."""
    iv = implied_vol(spot, inst.strike, inst.maturity, inst.target_price, inst.kind)
    return OptionQuote(maturity=inst.maturity, strike=inst.strike, kind=inst.kind,
                       price=inst.target_price, implied_vol=iv)
