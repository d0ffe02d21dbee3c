"""Dense brute-force reference implementation for small instances.

Builds the full path-space tensor of the tilted chain and reduces it by
direct summation.  Used only by tests to cross-validate the banded
message-passing code; guarded against large instances.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .discretization import ReferenceMeasure
from .dual import ConstraintSet, CostParams, DualPotentials, node_logweight
from .errors import TooLarge

SIZE_GUARD = 10**7


@dataclass
class DensePathTensor:
    """Full joint density over all timesteps, axis k = grid at timestep k."""

    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape


def dense_tensor(potentials: DualPotentials, reference: ReferenceMeasure,
                 constraints: ConstraintSet) -> DensePathTensor:
    """Exact dense product nu0 * prod_k [node_k * tilt_k * kernel_k] * node_N."""
    sizes = [g.n for g in reference.grids]
    total = int(np.prod([float(s) for s in sizes]))
    if total > SIZE_GUARD:
        raise TooLarge(f"path tensor would hold {total} entries")
    h = reference.h
    cur = reference.nu0.copy()
    for k in range(reference.n_steps):
        x = reference.grids[k].centers
        y = reference.grids[k + 1].centers
        node = np.exp(node_logweight(k, potentials, constraints, h))
        tilt = potentials.statistic.transition_term(
            _phi_col(potentials.phi_m[k]), x[:, None], y[None, :]) / h
        edge = reference.kernels[k].to_dense() * np.exp(tilt) * node[:, None]
        cur = cur[..., :, None] * edge
    node_n = np.exp(node_logweight(reference.n_steps, potentials, constraints, h))
    cur = cur * node_n
    return DensePathTensor(values=cur)


def _phi_col(phi_m):
    if phi_m.ndim == 1:
        return phi_m[:, None]
    return phi_m[:, None, :]


def oracle_marginal(tensor: DensePathTensor, k: int) -> np.ndarray:
    axes = tuple(i for i in range(tensor.values.ndim) if i != k)
    return tensor.values.sum(axis=axes)


def oracle_joint(tensor: DensePathTensor, k: int) -> np.ndarray:
    axes = tuple(i for i in range(tensor.values.ndim) if i not in (k, k + 1))
    return tensor.values.sum(axis=axes)


def oracle_path_mass(tensor: DensePathTensor) -> float:
    return float(tensor.values.sum())


def oracle_objective(tensor: DensePathTensor, potentials: DualPotentials,
                     constraints: ConstraintSet, cost_params: CostParams,
                     h: float) -> float:
    """Dual value evaluated by direct summation over the dense tensor."""
    mu0 = constraints.mu0
    sup = mu0 > 0
    fc = cost_params.f_conj(-potentials.phi_m[0])
    fc = np.broadcast_to(np.asarray(fc, dtype=float), mu0.shape)
    init_term = h * float(np.sum(mu0[sup] * (potentials.phi_nu[0][sup] - fc[sup])))
    price_term = 0.0
    for k, blk in constraints.blocks.items():
        lam = potentials.lam[k]
        price_term += float(lam @ blk.targets
                            - (lam @ lam) / (2.0 * cost_params.w_price))
    return init_term + price_term - h * oracle_path_mass(tensor)
