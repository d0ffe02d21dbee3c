"""Dual potentials, log-domain message recursions and chain densities.

The calibrated chain has density exp(.) relative to the reference chain,
assembled from per-timestep node potentials (marginal potential plus price
multipliers) and per-transition tilts (moment potential against a two-point
statistic).  Forward/backward log-messages factorize all marginals and joint
laws, so every quantity here reduces to banded log-sum-exp contractions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .discretization import ReferenceMeasure, TransitionKernel
from .errors import NonFiniteMessage


class TransitionStatistic(Enum):
    """Two-point statistic whose conditional mean is penalized.

    MARTINGALE_EXP:  B(x, y) = 1 - e^(y-x), zero iff the price chain e^X is
                     conditionally driftless.
    DRIFT_VOL_PAIR:  B(x, y) = (y - x, (y - x)^2 / 2), the discrete drift and
                     half second moment.
    """

    MARTINGALE_EXP = "martingale_exp"
    DRIFT_VOL_PAIR = "drift_vol_pair"

    @property
    def n_components(self) -> int:
        return 1 if self is TransitionStatistic.MARTINGALE_EXP else 2

    def values(self, x, y):
        """B(x, y), broadcast over inputs; pair statistic stacks last axis."""
        d = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        if self is TransitionStatistic.MARTINGALE_EXP:
            return 1.0 - np.exp(d)
        return np.stack([d, 0.5 * d * d], axis=-1)

    def transition_term(self, phi, x, y):
        """Inner product B(x, y) . phi(x), broadcast over a band."""
        d = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        if self is TransitionStatistic.MARTINGALE_EXP:
            return (1.0 - np.exp(d)) * phi
        return phi[..., 0] * d + phi[..., 1] * (0.5 * d * d)


def delta_transition(phi_m_k, statistic: TransitionStatistic, x_k, x_k1):
    """Transitional tilt B(x_k, x_{k+1}) . phi_m_k(x_k) (no 1/h factor)."""
    return statistic.transition_term(phi_m_k, x_k, x_k1)


@dataclass(frozen=True)
class CostParams:
    """Strengths of the soft moment and price penalties.

    The moment cost is F(b) = c_mart * |b|^2 with conjugate
    F*(p) = |p|^2 / (4 c_mart); the price cost per instrument is
    C_i(g) = w_price/2 * (g - c_i)^2 with conjugate
    C_i*(l) = l c_i + l^2 / (2 w_price).
    """

    c_mart: float = 1e4
    w_price: float = 1.0

    def f_conj(self, p):
        p = np.asarray(p, dtype=float)
        sq = p * p if p.ndim <= 1 else (p * p).sum(axis=-1)
        if self.c_mart > 0:
            return sq / (4.0 * self.c_mart)
        return np.where(sq == 0.0, 0.0, np.inf)


@dataclass
class PriceBlock:
    """Instruments maturing at one timestep: payoffs on its grid."""

    timestep: int
    instrument_ids: list
    payoffs: np.ndarray   # (n_grid, n_instruments)
    targets: np.ndarray   # (n_instruments,)


@dataclass
class ConstraintSet:
    """Initial-marginal target plus maturity-bucketed price constraints."""

    mu0: np.ndarray
    blocks: dict            # timestep -> PriceBlock
    n_instruments: int

    def block(self, k: int):
        return self.blocks.get(k)


def build_constraints(reference: ReferenceMeasure, instruments,
                      mu0=None) -> ConstraintSet:
    """Bucket instruments by maturity index and tabulate their payoffs."""
    from .market import payoff as payoff_fn

    blocks = {}
    for i, inst in enumerate(instruments):
        k = inst.maturity_index
        if not (0 <= k <= reference.n_steps):
            raise ValueError(f"instrument {i} maturity index {k} off the grid")
        blocks.setdefault(k, []).append(i)
    out = {}
    for k, ids in blocks.items():
        x = reference.grids[k].centers
        G = np.column_stack([payoff_fn(instruments[i].kind, instruments[i].strike, x)
                             for i in ids])
        c = np.array([instruments[i].target_price for i in ids])
        out[k] = PriceBlock(timestep=k, instrument_ids=ids, payoffs=G, targets=c)
    mu0 = reference.nu0 if mu0 is None else np.asarray(mu0, dtype=float)
    if mu0.shape != reference.nu0.shape:
        raise ValueError("mu0 must live on the initial grid")
    return ConstraintSet(mu0=mu0, blocks=out, n_instruments=len(instruments))


@dataclass
class DualPotentials:
    """Per-timestep dual variables of the calibration problem.

    phi_nu[k] lives on grid k (k = 0..N), phi_m[k] on grid k (k = 0..N-1,
    one extra axis for a vector statistic), lam[k] has one entry per
    instrument maturing at step k (empty otherwise).
    """

    phi_nu: list
    phi_m: list
    lam: list
    statistic: TransitionStatistic

    @classmethod
    def zeros(cls, reference: ReferenceMeasure, constraints: ConstraintSet,
              statistic: TransitionStatistic = TransitionStatistic.MARTINGALE_EXP):
        n = reference.n_steps
        phi_nu = [np.zeros(g.n) for g in reference.grids]
        if statistic.n_components == 1:
            phi_m = [np.zeros(reference.grids[k].n) for k in range(n)]
        else:
            phi_m = [np.zeros((reference.grids[k].n, statistic.n_components))
                     for k in range(n)]
        lam = []
        for k in range(n + 1):
            blk = constraints.block(k)
            lam.append(np.zeros(0 if blk is None else blk.targets.size))
        return cls(phi_nu=phi_nu, phi_m=phi_m, lam=lam, statistic=statistic)

    def copy(self) -> "DualPotentials":
        return DualPotentials(phi_nu=[a.copy() for a in self.phi_nu],
                              phi_m=[a.copy() for a in self.phi_m],
                              lam=[a.copy() for a in self.lam],
                              statistic=self.statistic)

    def _chunks(self):
        return list(self.phi_nu) + list(self.phi_m) + list(self.lam)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._chunks()])

    def set_flat(self, vec: np.ndarray):
        pos = 0
        for a in self._chunks():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size
        if pos != vec.size:
            raise ValueError("flat vector length mismatch")


@dataclass
class MessageCache:
    """Forward (psi_up) and backward (psi_down) log-messages per timestep."""

    psi_up: list
    psi_down: list
    up_valid: np.ndarray
    down_valid: np.ndarray

    @classmethod
    def allocate(cls, reference: ReferenceMeasure) -> "MessageCache":
        n = reference.n_steps
        up = [np.full(g.n, -np.inf) for g in reference.grids]
        down = [np.zeros(g.n) for g in reference.grids]
        with np.errstate(divide="ignore"):
            up[0] = np.log(reference.nu0)
        cache = cls(psi_up=up, psi_down=down,
                    up_valid=np.zeros(n + 1, dtype=bool),
                    down_valid=np.zeros(n + 1, dtype=bool))
        cache.up_valid[0] = True
        cache.down_valid[n] = True
        return cache

    def invalidate(self):
        self.up_valid[1:] = False
        self.down_valid[:-1] = False


@dataclass
class BandedMatrix:
    """Nonnegative banded matrix sharing a kernel's band structure."""

    values: np.ndarray    # (n_src, bandwidth)
    lo: np.ndarray
    n_dst: int

    def row_sums(self) -> np.ndarray:
        return self.values.sum(axis=1)

    def col_sums(self) -> np.ndarray:
        idx = self.lo[:, None] + np.arange(self.values.shape[1])[None, :]
        return np.bincount(idx.ravel(), weights=self.values.ravel(),
                           minlength=self.n_dst)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.values.shape[0], self.n_dst))
        idx = self.lo[:, None] + np.arange(self.values.shape[1])[None, :]
        np.put_along_axis(out, idx, self.values, axis=1)
        return out


# ---------------------------------------------------------------------------
# banded log-sum-exp contractions
# ---------------------------------------------------------------------------

def _lse_rows(E: np.ndarray) -> np.ndarray:
    """Row-wise logsumexp stabilized by the per-row max; empty rows -> -inf."""
    m = E.max(axis=1)
    finite = m > -np.inf
    m_safe = np.where(finite, m, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.exp(E - m_safe[:, None]).sum(axis=1)
        out = np.where(finite, m_safe + np.log(np.maximum(s, 1e-300)), -np.inf)
    return out


def _check_message(v: np.ndarray, what: str) -> np.ndarray:
    if np.any(np.isnan(v)) or np.any(np.isposinf(v)):
        raise NonFiniteMessage(f"{what} produced non-finite values")
    return v


def band_increments(kernel: TransitionKernel, x_src, x_dst) -> np.ndarray:
    """Cached y_j - x_i over the band."""
    return kernel.band_values(
        "dy", lambda: x_dst[kernel.dst_indices()] - x_src[:, None])


def band_statistic(kernel: TransitionKernel, x_src, x_dst,
                   statistic: TransitionStatistic) -> np.ndarray:
    """Cached B(x_i, y_j) over the band (last axis for a vector statistic)."""
    def build():
        d = band_increments(kernel, x_src, x_dst)
        if statistic is TransitionStatistic.MARTINGALE_EXP:
            return 1.0 - np.exp(d)
        return np.stack([d, 0.5 * d * d], axis=-1)

    return kernel.band_values(statistic.value, build)


def transition_logfactor(statistic: TransitionStatistic, phi_m_k,
                         kernel: TransitionKernel, x_src, x_dst, h: float):
    """Banded array of B(x_i, y_j) . phi_m_k(x_i) / h, or None when zero."""
    if not np.any(phi_m_k):
        return None
    B = band_statistic(kernel, x_src, x_dst, statistic)
    if statistic.n_components == 1:
        return B * (phi_m_k[:, None] / h)
    return (B * (phi_m_k[:, None, :] / h)).sum(axis=-1)


def node_logweight(k: int, potentials: DualPotentials,
                   constraints: ConstraintSet, h: float) -> np.ndarray:
    """Node potential phi_nu_k + (lam_k . payoffs_k)/h on grid k."""
    out = potentials.phi_nu[k]
    blk = constraints.block(k)
    if blk is not None and potentials.lam[k].size:
        out = out + blk.payoffs @ (potentials.lam[k] / h)
    return out


def contract_forward(kernel: TransitionKernel, src_log: np.ndarray,
                     trans: np.ndarray | None) -> np.ndarray:
    """out[j] = LSE_i [src_log(i) + trans(i, j) + log W(i, j)] over the band."""
    E_fwd = kernel.log_weights + src_log[:, None]
    if trans is not None:
        E_fwd = E_fwd + trans
    rbw = int(np.max(kernel.rev_hi - kernel.rev_lo))
    src = kernel.rev_lo[:, None] + np.arange(rbw)[None, :]
    valid = src < kernel.rev_hi[:, None]
    srcc = np.minimum(src, kernel.n_src - 1)
    col = np.arange(kernel.n_dst)[:, None] - kernel.lo[srcc]
    valid &= (col >= 0) & (col < kernel.bandwidth)
    colc = np.clip(col, 0, kernel.bandwidth - 1)
    E = np.where(valid, E_fwd[srcc, colc], -np.inf)
    return _lse_rows(E)


def contract_backward(kernel: TransitionKernel, dst_log: np.ndarray,
                      trans: np.ndarray | None) -> np.ndarray:
    """out[i] = LSE_j [dst_log(j) + trans(i, j) + log W(i, j)] over the band."""
    E = kernel.log_weights + dst_log[kernel.dst_indices()]
    if trans is not None:
        E = E + trans
    return _lse_rows(E)


# ---------------------------------------------------------------------------
# message recursions
# ---------------------------------------------------------------------------

def update_psi_up(cache: MessageCache, k: int, potentials: DualPotentials,
                  reference: ReferenceMeasure, constraints: ConstraintSet) -> np.ndarray:
    """One forward step: psi_up[k+1] from psi_up[k] through kernel k."""
    if not cache.up_valid[k]:
        raise ValueError(f"psi_up[{k}] is stale")
    h = reference.h
    kern = reference.kernels[k]
    src_log = cache.psi_up[k] + node_logweight(k, potentials, constraints, h)
    trans = transition_logfactor(potentials.statistic, potentials.phi_m[k], kern,
                                 reference.grids[k].centers,
                                 reference.grids[k + 1].centers, h)
    out = _check_message(contract_forward(kern, src_log, trans), f"psi_up[{k + 1}]")
    cache.psi_up[k + 1] = out
    cache.up_valid[k + 1] = True
    return out


def update_psi_down(cache: MessageCache, k: int, potentials: DualPotentials,
                    reference: ReferenceMeasure, constraints: ConstraintSet) -> np.ndarray:
    """One backward step: psi_down[k-1] from psi_down[k] through kernel k-1."""
    if not cache.down_valid[k]:
        raise ValueError(f"psi_down[{k}] is stale")
    h = reference.h
    kern = reference.kernels[k - 1]
    dst_log = cache.psi_down[k] + node_logweight(k, potentials, constraints, h)
    trans = transition_logfactor(potentials.statistic, potentials.phi_m[k - 1], kern,
                                 reference.grids[k - 1].centers,
                                 reference.grids[k].centers, h)
    out = _check_message(contract_backward(kern, dst_log, trans), f"psi_down[{k - 1}]")
    cache.psi_down[k - 1] = out
    cache.down_valid[k - 1] = True
    return out


def refresh_down(cache: MessageCache, potentials: DualPotentials,
                 reference: ReferenceMeasure, constraints: ConstraintSet):
    n = reference.n_steps
    cache.psi_down[n] = np.zeros(reference.grids[n].n)
    cache.down_valid[n] = True
    for k in range(n, 0, -1):
        update_psi_down(cache, k, potentials, reference, constraints)


def refresh_up(cache: MessageCache, potentials: DualPotentials,
               reference: ReferenceMeasure, constraints: ConstraintSet):
    with np.errstate(divide="ignore"):
        cache.psi_up[0] = np.log(reference.nu0)
    cache.up_valid[0] = True
    for k in range(reference.n_steps):
        update_psi_up(cache, k, potentials, reference, constraints)


def refresh_all(cache: MessageCache, potentials: DualPotentials,
                reference: ReferenceMeasure, constraints: ConstraintSet):
    refresh_down(cache, potentials, reference, constraints)
    refresh_up(cache, potentials, reference, constraints)


# ---------------------------------------------------------------------------
# densities and the dual objective
# ---------------------------------------------------------------------------

def marginal_log(k: int, potentials: DualPotentials, cache: MessageCache,
                 reference: ReferenceMeasure, constraints: ConstraintSet) -> np.ndarray:
    if not (cache.up_valid[k] and cache.down_valid[k]):
        raise ValueError(f"messages stale at timestep {k}")
    return (cache.psi_up[k] + node_logweight(k, potentials, constraints, reference.h)
            + cache.psi_down[k])


def marginal_density(k: int, potentials: DualPotentials, cache: MessageCache,
                     reference: ReferenceMeasure, constraints: ConstraintSet) -> np.ndarray:
    """Marginal of the calibrated chain at timestep k (not renormalized)."""
    return np.exp(marginal_log(k, potentials, cache, reference, constraints))


def joint_log_banded(k: int, potentials: DualPotentials, cache: MessageCache,
                     reference: ReferenceMeasure, constraints: ConstraintSet) -> BandedMatrix:
    """Log-density of the (k, k+1) joint law in banded layout (-inf off band)."""
    if not (cache.up_valid[k] and cache.down_valid[k + 1]):
        raise ValueError(f"messages stale around transition {k}")
    h = reference.h
    kern = reference.kernels[k]
    src_log = cache.psi_up[k] + node_logweight(k, potentials, constraints, h)
    dst_log = (cache.psi_down[k + 1]
               + node_logweight(k + 1, potentials, constraints, h))
    E = kern.log_weights + src_log[:, None] + dst_log[kern.dst_indices()]
    trans = transition_logfactor(potentials.statistic, potentials.phi_m[k], kern,
                                 reference.grids[k].centers,
                                 reference.grids[k + 1].centers, h)
    if trans is not None:
        E = E + trans
    return BandedMatrix(values=E, lo=kern.lo, n_dst=kern.n_dst)


def joint_density(k: int, potentials: DualPotentials, cache: MessageCache,
                  reference: ReferenceMeasure, constraints: ConstraintSet) -> BandedMatrix:
    """Joint density of the calibrated chain at (t_k, t_{k+1}), banded."""
    lg = joint_log_banded(k, potentials, cache, reference, constraints)
    return BandedMatrix(values=np.exp(lg.values), lo=lg.lo, n_dst=lg.n_dst)


def path_log_mass(potentials: DualPotentials, cache: MessageCache,
                  reference: ReferenceMeasure, constraints: ConstraintSet) -> float:
    """Log of the total mass of the calibrated chain (one final contraction)."""
    n = reference.n_steps
    if not cache.up_valid[n]:
        raise ValueError("psi_up is stale at the final timestep")
    v = cache.psi_up[n] + node_logweight(n, potentials, constraints, reference.h)
    m = v.max()
    if not np.isfinite(m):
        return -np.inf
    return float(m + np.log(np.exp(v - m).sum()))


def dual_objective(potentials: DualPotentials, cache: MessageCache,
                   reference: ReferenceMeasure, constraints: ConstraintSet,
                   cost_params: CostParams) -> float:
    """Value of the concave dual at the current potentials.

    Comprises the hard initial-marginal pairing (with its moment-conjugate
    correction), the price-penalty conjugates, and -h times the total mass of
    the tilted chain.  Interior marginal-positivity terms vanish on iterates
    that keep phi_nu_k = F*(-phi_m_k), which every block update preserves.
    """
    h = reference.h
    mu0 = constraints.mu0
    sup = mu0 > 0
    fc = cost_params.f_conj(-potentials.phi_m[0]) if potentials.phi_m else 0.0
    fc = np.broadcast_to(np.asarray(fc, dtype=float), mu0.shape)
    init_term = h * float(np.sum(mu0[sup] * (potentials.phi_nu[0][sup] - fc[sup])))

    price_term = 0.0
    for k, blk in constraints.blocks.items():
        lam = potentials.lam[k]
        price_term += float(lam @ blk.targets
                            - (lam @ lam) / (2.0 * cost_params.w_price))

    log_mass = path_log_mass(potentials, cache, reference, constraints)
    if np.isnan(log_mass):
        raise NonFiniteMessage("path mass is NaN")
    mass_term = h * np.exp(min(log_mass, 709.0)) if log_mass > -np.inf else 0.0
    if log_mass > 709.0:
        return -np.inf
    return init_term + price_term - mass_term
