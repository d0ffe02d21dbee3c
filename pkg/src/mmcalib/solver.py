"""Gauss-Seidel block-coordinate ascent on the calibration dual.

One sweep walks the timesteps left to right, solving in turn the marginal
block (closed form), the price block (damped Newton on the instrument
multipliers) and the drift/vol block (independent pointwise 1-D Newton
solves with bisection safeguard), refreshing the forward message after each
timestep; backward messages are refreshed once per sweep.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diagnostics
from .acceleration import AndersonState, anderson_step
from .discretization import ReferenceMeasure
from .dual import (ConstraintSet, CostParams, DualPotentials, MessageCache,
                   TransitionStatistic, build_constraints, dual_objective,
                   marginal_log, node_logweight, refresh_all, refresh_down,
                   update_psi_up)
from .errors import NewtonDiverged

# Stand-in for -infinity in the hard-constraint marginal potential: large
# enough that exp(psi + CAP) underflows to zero against any message value.
OFF_SUPPORT_CAP = -746.0

# Pointwise solves are skipped where the local mass is below this (the
# objective is flat there to machine precision).
MASS_SKIP = 1e-300


@dataclass
class SolverConfig:
    epsilon: float = 1e-6
    max_sweeps: int = 500
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    c_mart: float = 1e4
    w_price: float = 1.0
    eliminate_phi_nu: bool = False
    anderson_depth: int = 5
    anderson_reg: float = 1e-10
    track_errors: bool = True

    def __post_init__(self):
        if self.epsilon <= 0 or self.c_mart < 0 or self.w_price <= 0:
            raise ValueError("epsilon and w_price must be positive, c_mart >= 0")

    @property
    def cost_params(self) -> CostParams:
        return CostParams(c_mart=self.c_mart, w_price=self.w_price)


@dataclass
class SweepReport:
    sweep_index: int
    e_max: float
    dual_value: float
    price_error_l2: float
    martingale_error_l2: float
    wall_time: float
    anderson_accepted: bool = False


@dataclass
class SolveResult:
    potentials: DualPotentials
    history: list
    converged: bool
    cache: MessageCache
    constraints: ConstraintSet


# ---------------------------------------------------------------------------
# marginal block
# ---------------------------------------------------------------------------

def solve_marginal_block(k: int, potentials: DualPotentials, cache: MessageCache,
                         reference: ReferenceMeasure, constraints: ConstraintSet,
                         config: SolverConfig) -> np.ndarray:
    """Update phi_nu[k].

    k = 0 enforces the initial marginal exactly (closed-form log ratio,
    capped off the support); later timesteps saturate the nonnegativity
    conjugate at phi_nu = F*(-phi_m) (zero at the final step).
    """
    if k == 0:
        if not (cache.up_valid[0] and cache.down_valid[0]):
            raise ValueError("messages stale at timestep 0")
        mu0 = constraints.mu0
        base = cache.psi_up[0] + cache.psi_down[0]
        blk = constraints.block(0)
        if blk is not None and potentials.lam[0].size:
            base = base + blk.payoffs @ (potentials.lam[0] / reference.h)
        sup = mu0 > 0
        out = np.full(mu0.shape, OFF_SUPPORT_CAP)
        with np.errstate(divide="ignore"):
            out[sup] = np.maximum(np.log(mu0[sup]) - base[sup], OFF_SUPPORT_CAP)
    elif k < reference.n_steps:
        out = np.asarray(config.cost_params.f_conj(-potentials.phi_m[k]), dtype=float)
    else:
        out = np.zeros(reference.grids[k].n)
    potentials.phi_nu[k] = out
    return out


# ---------------------------------------------------------------------------
# price block
# ---------------------------------------------------------------------------

def _price_state(mk_log: np.ndarray, G: np.ndarray, lam: np.ndarray, h: float):
    """Stabilized sums of the tilted mass against payoffs: scale and moments."""
    t = mk_log + G @ (lam / h)
    M = float(t.max()) if t.size else -np.inf
    if not np.isfinite(M):
        m = G.shape[1]
        return -np.inf, 0.0, np.zeros(m), np.zeros((m, m))
    e = np.exp(t - M)
    s0 = float(e.sum())
    s1 = G.T @ e
    s2 = (G * e[:, None]).T @ G
    return M, s0, s1, s2


def _price_value(mk_log: np.ndarray, G: np.ndarray, lam: np.ndarray,
                 targets: np.ndarray, h: float, w: float) -> float:
    M, s0, _, _ = _price_state(mk_log, G, lam, h)
    poly = float(lam @ targets - (lam @ lam) / (2.0 * w))
    if M == -np.inf or s0 == 0.0:
        return poly
    lm = M + np.log(s0)
    if lm > 709.0:
        return -np.inf
    return poly - h * np.exp(lm)


def solve_price_block(k: int, potentials: DualPotentials, cache: MessageCache,
                      reference: ReferenceMeasure, constraints: ConstraintSet,
                      config: SolverConfig) -> np.ndarray:
    """Damped Newton on the strictly concave multiplier subproblem at step k."""
    blk = constraints.block(k)
    if blk is None:
        raise ValueError(f"no instruments mature at timestep {k}")
    if not (cache.up_valid[k] and cache.down_valid[k]):
        raise ValueError(f"messages stale at timestep {k}")
    h = reference.h
    w = config.w_price
    G, c = blk.payoffs, blk.targets
    mk_log = cache.psi_up[k] + potentials.phi_nu[k] + cache.psi_down[k]
    lam = potentials.lam[k].copy()
    tol = config.newton_tol * max(1.0, float(np.max(np.abs(c))))
    value = _price_value(mk_log, G, lam, c, h, w)
    converged = False
    for _ in range(config.newton_max_iter):
        M, _, s1, s2 = _price_state(mk_log, G, lam, h)
        scale = np.exp(M) if M > -np.inf else 0.0
        grad = c - lam / w - scale * s1
        if float(np.max(np.abs(grad))) <= tol:
            converged = True
            break
        H = np.eye(lam.size) / w + (scale / h) * s2
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = grad * w
        alpha = 1.0
        for _ in range(60):
            cand = lam + alpha * step
            cand_value = _price_value(mk_log, G, cand, c, h, w)
            if cand_value >= value - 1e-14 * max(1.0, abs(value)):
                break
            alpha *= 0.5
        else:
            raise NewtonDiverged(f"price block at step {k}: backtracking exhausted")
        lam, value = cand, cand_value
    if not converged:
        M, _, s1, _ = _price_state(mk_log, G, lam, h)
        scale = np.exp(M) if M > -np.inf else 0.0
        grad = c - lam / w - scale * s1
        if float(np.max(np.abs(grad))) > 1e3 * tol:
            raise NewtonDiverged(f"price block at step {k}: no convergence")
    potentials.lam[k] = lam
    return lam


# ---------------------------------------------------------------------------
# drift/vol block
# ---------------------------------------------------------------------------

def _driftvol_setup(k: int, potentials: DualPotentials, cache: MessageCache,
                    reference: ReferenceMeasure, constraints: ConstraintSet):
    """Banded statistic values and downstream log-weights for timestep k."""
    h = reference.h
    kern = reference.kernels[k]
    y = reference.grids[k + 1].centers[kern.dst_indices()]
    B = potentials.statistic.values(reference.grids[k].centers[:, None], y)
    dst_log = (cache.psi_down[k + 1]
               + node_logweight(k + 1, potentials, constraints, h))
    base = kern.log_weights + dst_log[kern.dst_indices()]
    return base, B


def driftvol_gradient(k: int, potentials: DualPotentials, cache: MessageCache,
                      reference: ReferenceMeasure, constraints: ConstraintSet,
                      config: SolverConfig) -> np.ndarray:
    """Pointwise stationarity residual phi/(2 c_mart) + E[B | x]/h at phi_m[k].

    The conditional mean weights the kernel row by the downstream messages
    and the current transition tilt; rows with no mass report zero.
    """
    if potentials.statistic is not TransitionStatistic.MARTINGALE_EXP:
        raise NotImplementedError("scalar statistic only")
    h = reference.h
    base, B = _driftvol_setup(k, potentials, cache, reference, constraints)
    phi = potentials.phi_m[k]
    T = base + B * (phi[:, None] / h)
    R = T.max(axis=1)
    ok = np.isfinite(R)
    out = np.zeros(phi.shape)
    e = np.exp(T[ok] - R[ok, None])
    s0 = e.sum(axis=1)
    s1 = (e * B[ok]).sum(axis=1)
    lin = phi[ok] / (2.0 * config.c_mart) if config.c_mart > 0 else 0.0
    out[ok] = lin + s1 / s0 / h
    return out


def solve_driftvol_block(k: int, potentials: DualPotentials, cache: MessageCache,
                         reference: ReferenceMeasure, constraints: ConstraintSet,
                         config: SolverConfig) -> np.ndarray:
    """Pointwise concave solves for the moment potential at timestep k.

    Newton iteration safeguarded by a sign-change bracket with bisection;
    points with vanishing local mass keep their previous value.  At k >= 1
    the marginal potential is re-saturated at F*(-phi_m) afterwards, so the
    iterate stays on the manifold where the positivity conjugate vanishes.
    At k = 0 the hard initial-marginal constraint makes the moment-conjugate
    term linear in the target density instead.
    """
    if potentials.statistic is not TransitionStatistic.MARTINGALE_EXP:
        raise NotImplementedError("pointwise solver covers the scalar statistic only")
    if not (cache.up_valid[k] and cache.down_valid[k + 1] and cache.down_valid[k]):
        raise ValueError(f"messages stale around transition {k}")
    h = reference.h
    c_mart = config.c_mart
    phi = potentials.phi_m[k].copy()
    if c_mart == 0.0:
        return phi

    base, B = _driftvol_setup(k, potentials, cache, reference, constraints)
    b_max = float(np.max(np.abs(B)))
    bound = 2.0 * c_mart * b_max / h + 1.0

    if k == 0:
        mu0 = constraints.mu0
        m_node = np.exp(cache.psi_up[0]
                        + node_logweight(0, potentials, constraints, h))
        active = (mu0 > 0) | (m_node > MASS_SKIP)
    else:
        mu0 = m_node = None
        mass = np.exp(marginal_log(k, potentials, cache, reference, constraints))
        active = mass > MASS_SKIP
    active &= np.isfinite(base).any(axis=1)
    if not np.any(active):
        return phi

    idx = np.nonzero(active)[0]
    p = np.clip(phi[idx].astype(float), -bound, bound)
    lob = np.full(idx.size, -bound)
    hib = np.full(idx.size, bound)
    tol = config.newton_tol * max(1.0, b_max / h)
    live = np.ones(idx.size, dtype=bool)

    for _ in range(config.newton_max_iter):
        lv = np.nonzero(live)[0]
        rows = idx[lv]
        pl = p[lv]
        T = base[rows] + B[rows] * (pl[:, None] / h)
        R = T.max(axis=1)
        e = np.exp(T - R[:, None])
        s0 = e.sum(axis=1)
        s1 = (e * B[rows]).sum(axis=1)
        s2 = (e * B[rows] * B[rows]).sum(axis=1)
        if k == 0:
            # gradient of -h mu0 F*(-p) - h m_node sum_j exp(base + B p / h)
            w_lin = h * mu0[rows]
            w_exp = m_node[rows] * np.exp(R)
            grad = -w_lin * pl / (2.0 * c_mart) - w_exp * s1
            hess = -w_lin / (2.0 * c_mart) - (w_exp / h) * s2
            gtol = tol * np.maximum(w_lin + w_exp * s0 * h, MASS_SKIP)
        else:
            mean = s1 / s0
            var = np.maximum(s2 / s0 - mean * mean, 0.0)
            grad = -(pl / (2.0 * c_mart) + mean / h)
            hess = -(1.0 / (2.0 * c_mart) + var / (h * h))
            gtol = tol
        done = np.abs(grad) <= gtol
        # gradient decreases in p: positive gradient -> root lies to the right
        pos = grad > 0
        lob[lv[pos & ~done]] = pl[pos & ~done]
        hib[lv[~pos & ~done]] = pl[~pos & ~done]
        step = -grad / np.where(hess < 0, hess, -1.0)
        cand = pl + step
        outside = (cand <= lob[lv]) | (cand >= hib[lv])
        cand[outside] = 0.5 * (lob[lv][outside] + hib[lv][outside])
        p[lv] = np.where(done, pl, cand)
        live[lv[done]] = False
        if not np.any(live):
            break

    phi[idx] = p
    potentials.phi_m[k] = phi
    if k >= 1:
        potentials.phi_nu[k] = np.asarray(config.cost_params.f_conj(-phi), dtype=float)
    return phi


# ---------------------------------------------------------------------------
# sweep and outer loop
# ---------------------------------------------------------------------------

def sweep(potentials: DualPotentials, cache: MessageCache,
          reference: ReferenceMeasure, constraints: ConstraintSet,
          config: SolverConfig, sweep_index: int = 0) -> SweepReport:
    """One full Gauss-Seidel sweep; backward messages are left consistent."""
    t0 = time.perf_counter()
    prev = potentials.flatten()
    n = reference.n_steps
    for k in range(n):
        if k == 0 or not config.eliminate_phi_nu:
            solve_marginal_block(k, potentials, cache, reference, constraints, config)
        if constraints.block(k) is not None:
            solve_price_block(k, potentials, cache, reference, constraints, config)
        solve_driftvol_block(k, potentials, cache, reference, constraints, config)
        update_psi_up(cache, k, potentials, reference, constraints)
    solve_marginal_block(n, potentials, cache, reference, constraints, config)
    if constraints.block(n) is not None:
        solve_price_block(n, potentials, cache, reference, constraints, config)

    dual_value = dual_objective(potentials, cache, reference, constraints,
                                config.cost_params)
    refresh_down(cache, potentials, reference, constraints)

    new = potentials.flatten()
    # off-support entries sit at the large negative cap; they never move but
    # would inflate the norm and weaken the stopping rule
    live = np.abs(prev) < 700.0
    denom = max(1.0, float(np.max(np.abs(prev[live]))) if live.any() else 1.0)
    e_max = float(np.max(np.abs(new - prev))) / denom if new.size else 0.0

    price_err = mart_err = float("nan")
    if config.track_errors:
        price_err = diagnostics.price_error_l2(potentials, cache, reference, constraints)
        mart_err = diagnostics.martingale_error_l2(potentials, cache, reference, constraints)
    return SweepReport(sweep_index=sweep_index, e_max=e_max, dual_value=dual_value,
                       price_error_l2=price_err, martingale_error_l2=mart_err,
                       wall_time=time.perf_counter() - t0)


def _snapshot_messages(cache: MessageCache):
    return ([a.copy() for a in cache.psi_up], [a.copy() for a in cache.psi_down],
            cache.up_valid.copy(), cache.down_valid.copy())


def _restore_messages(cache: MessageCache, snap):
    cache.psi_up = [a.copy() for a in snap[0]]
    cache.psi_down = [a.copy() for a in snap[1]]
    cache.up_valid, cache.down_valid = snap[2].copy(), snap[3].copy()


def run(reference: ReferenceMeasure, instruments, config: SolverConfig,
        potentials: DualPotentials | None = None, mu0=None,
        statistic: TransitionStatistic = TransitionStatistic.MARTINGALE_EXP) -> SolveResult:
    """Iterate sweeps (optionally Anderson-accelerated) until e_max < epsilon."""
    constraints = build_constraints(reference, instruments, mu0=mu0)
    if potentials is None:
        potentials = DualPotentials.zeros(reference, constraints, statistic)
    cache = MessageCache.allocate(reference)
    refresh_down(cache, potentials, reference, constraints)

    anderson = None
    if config.anderson_depth >= 2:
        anderson = AndersonState(depth=config.anderson_depth,
                                 regularization=config.anderson_reg)
    history = []
    converged = False
    prev_flat = potentials.flatten()
    for it in range(config.max_sweeps):
        report = sweep(potentials, cache, reference, constraints, config,
                       sweep_index=it)
        history.append(report)
        if report.e_max < config.epsilon:
            converged = True
            break
        if anderson is not None:
            plain_flat = potentials.flatten()
            proposal = anderson_step(anderson, plain_flat, plain_flat - prev_flat)
            if proposal is not plain_flat:
                snap = _snapshot_messages(cache)
                potentials.set_flat(proposal)
                try:
                    refresh_all(cache, potentials, reference, constraints)
                    d_acc = dual_objective(potentials, cache, reference,
                                           constraints, config.cost_params)
                except Exception:
                    d_acc = -np.inf
                if np.isfinite(d_acc) and d_acc >= report.dual_value:
                    report.anderson_accepted = True
                else:
                    potentials.set_flat(plain_flat)
                    _restore_messages(cache, snap)
                    anderson.reset()
        prev_flat = potentials.flatten()
    return SolveResult(potentials=potentials, history=history, converged=converged,
                       cache=cache, constraints=constraints)
