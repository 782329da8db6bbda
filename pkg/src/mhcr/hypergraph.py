"""Hypergraph view: learnable hyperedge incidence built from modality
features, dropout-regularized pool-then-broadcast message passing, and
cross-modality aggregation.

Incidence H_i = F_m @ V_m^T links items to K latent hyperedges; user
incidence H_u = X_u @ H_i pools the hyperedge profiles of each user's
train items. One pass computes

    E_i' = DROP(H_i) @ DROP(H_i^T) @ E_i
    E_u' = DROP(H_u) @ DROP(H_i^T) @ E_i

with an independent dropout mask per DROP occurrence. Dropout uses
inverted scaling (survivors divided by the keep probability), so each
factor is unbiased and evaluation needs no rescale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class HyperedgeParameters:
    """Learnable hyperedge matrices V_m (K x d_m) and projections W_m (d_m x d)."""

    v: dict[str, ad.Tensor]
    w: dict[str, ad.Tensor]
    k_hyper: int

    def __post_init__(self):
        if self.k_hyper < 1:
            raise ConfigError("hyperedge count must be >= 1")
        if set(self.v) != set(self.w):
            raise ConfigError("V and W must cover the same modalities")


@dataclass
class IncidencePair:
    modality: str
    h_items: ad.Tensor
    h_users: ad.Tensor


def build_incidence(
    features: np.ndarray, v_m, x_u: sp.spmatrix, modality: str = ""
) -> IncidencePair:
    """Item and user incidence for one modality; no nonlinearity applied."""
    features = np.asarray(features, dtype=np.float64)
    v_m = ad.as_tensor(v_m)
    if features.ndim != 2 or v_m.ndim != 2:
        raise ShapeError("features and hyperedge matrix must be 2-D")
    if features.shape[1] != v_m.shape[1]:
        raise ShapeError(
            f"feature width {features.shape[1]} != hyperedge width {v_m.shape[1]}"
        )
    if x_u.shape[1] != features.shape[0]:
        raise ShapeError(
            f"interaction matrix has {x_u.shape[1]} item columns, features have "
            f"{features.shape[0]} rows"
        )
    h_items = ad.matmul(ad.constant(features), ad.transpose(v_m))
    h_users = ad.spmm(x_u, h_items)
    return IncidencePair(modality, h_items, h_users)


def _dropped(t: ad.Tensor, rate: float, rng: np.random.Generator) -> ad.Tensor:
    if rate <= 0.0:
        return t
    if rate >= 1.0:
        return t * 0.0
    mask = (rng.random(t.shape) >= rate) / (1.0 - rate)
    return ad.mul(t, ad.constant(mask))


def hypergraph_pass(
    pair: IncidencePair,
    e_items,
    drop_rate: float,
    steps: int = 1,
    rng: int | np.random.Generator | None = None,
) -> tuple[ad.Tensor, ad.Tensor]:
    """Run `steps` rounds of hyperedge pooling and broadcasting.

    Masks are resampled for every DROP occurrence in a fixed order (item
    update's two factors, then the user update's two), so a seeded `rng`
    pins the whole stochastic chain. Returns (user, item) states after the
    final step; both updates of a step read the same incoming item state.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if not 0.0 <= drop_rate <= 1.0:
        raise ConfigError("drop_rate must be in [0, 1]")
    if drop_rate >= 1.0:
        log.warning("drop_rate=1 zeroes every message; output is all-zero")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    e_items = ad.as_tensor(e_items)
    if e_items.shape[0] != pair.h_items.shape[0]:
        raise ShapeError(
            f"item state rows {e_items.shape[0]} != incidence rows {pair.h_items.shape[0]}"
        )

    e_cur = e_items
    e_users = None
    for _ in range(steps):
        pooled_i = ad.matmul(ad.transpose(_dropped(pair.h_items, drop_rate, rng)), e_cur)
        e_next = ad.matmul(_dropped(pair.h_items, drop_rate, rng), pooled_i)
        pooled_u = ad.matmul(ad.transpose(_dropped(pair.h_items, drop_rate, rng)), e_cur)
        e_users = ad.matmul(_dropped(pair.h_users, drop_rate, rng), pooled_u)
        e_cur = e_next
    return e_users, e_cur


def aggregate_hyper(per_modality: list[tuple[ad.Tensor, ad.Tensor]]) -> ad.Tensor:
    """Stack each modality's (user, item) pair and sum across modalities."""
    if not per_modality:
        raise ConfigError("aggregate_hyper requires at least one modality")
    shapes = {(u.shape, i.shape) for u, i in per_modality}
    if len(shapes) != 1:
        raise ShapeError(f"inconsistent per-modality shapes: {sorted(shapes)}")
    out = None
    for e_u, e_i in per_modality:
        stacked = ad.concat_rows([e_u, e_i])
        out = stacked if out is None else out + stacked
    return out
