"""Training objectives: BPR ranking loss, the two temperature-scaled
contrastive losses over batch nodes, embedding regularization, and their
weighted composition.

All similarities are cosine: embeddings are L2-normalized before any inner
product, which makes every loss invariant to a common positive rescaling
of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError


@dataclass
class LossBreakdown:
    """Unweighted component values plus the exact weighted total."""

    l_bpr: float
    l_hc: float
    l_ghc: float
    l_reg: float
    total: float

    CSV_FIELDS = ("l_bpr", "l_hc", "l_ghc", "l_reg", "total")


def bpr_loss(pos_scores, neg_scores) -> ad.Tensor:
    """Mean of -ln(sigmoid(pos - neg)) over the batch."""
    pos, neg = ad.as_tensor(pos_scores), ad.as_tensor(neg_scores)
    if pos.shape != neg.shape:
        raise DataError(f"score batches differ in shape: {pos.shape} vs {neg.shape}")
    if pos.data.size == 0:
        raise DataError("bpr_loss: empty batch")
    return ad.mean(ad.softplus(neg - pos))


def _batch_normalized(embeddings, batch: np.ndarray) -> ad.Tensor:
    return ad.row_normalize(ad.gather_rows(ad.as_tensor(embeddings), batch))


def hyper_contrastive_loss(
    per_modality: Sequence, batch: np.ndarray, tau: float
) -> ad.Tensor:
    """Cross-modal contrastive loss over the batch nodes.

    For each node x, the positive mass sums exp(cos(E_x^m, E_x^m')/tau)
    over ordered modality pairs m != m'; the negative mass sums the same
    quantity over every batch node x' (x included). The loss is the batch
    mean of -ln(pos / neg); it is non-negative because each positive term
    also appears among the negatives.
    """
    if tau <= 0:
        raise ConfigError("temperature must be > 0")
    if len(per_modality) < 2:
        raise ConfigError("hyper_contrastive_loss needs at least two modalities")
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size == 0:
        raise DataError("hyper_contrastive_loss: empty batch")

    normalized = [_batch_normalized(e, batch) for e in per_modality]
    inv_tau = 1.0 / tau
    pos = None
    neg = None
    for a, b in permutations(range(len(normalized)), 2):
        e_a, e_b = normalized[a], normalized[b]
        pos_term = ad.exp(ad.row_dot(e_a, e_b) * inv_tau)
        neg_term = ad.tensor_sum(ad.exp(ad.matmul(e_a, ad.transpose(e_b)) * inv_tau), axis=1)
        pos = pos_term if pos is None else pos + pos_term
        neg = neg_term if neg is None else neg + neg_term
    return ad.mean(ad.log(neg) - ad.log(pos))


def graph_hyper_contrastive_loss(
    e_graph, e_hyper, batch: np.ndarray, tau: float
) -> ad.Tensor:
    """InfoNCE aligning the graph-side and hypergraph-side embedding of each
    batch node against in-batch negatives."""
    if tau <= 0:
        raise ConfigError("temperature must be > 0")
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size == 0:
        raise DataError("graph_hyper_contrastive_loss: empty batch")

    g = _batch_normalized(e_graph, batch)
    h = _batch_normalized(e_hyper, batch)
    inv_tau = 1.0 / tau
    pos = ad.row_dot(g, h) * inv_tau
    denom = ad.tensor_sum(ad.exp(ad.matmul(g, ad.transpose(h)) * inv_tau), axis=1)
    return ad.mean(ad.log(denom) - pos)


def embedding_l2(rows) -> ad.Tensor:
    """Mean squared L2 norm of the given embedding rows."""
    rows = ad.as_tensor(rows)
    return ad.mean(ad.tensor_sum(ad.mul(rows, rows), axis=1))


def total_loss(
    l_bpr,
    l_hc,
    l_ghc,
    l_reg,
    lambda_hc: float,
    lambda_ghc: float,
    lambda_reg: float,
) -> tuple[ad.Tensor, LossBreakdown]:
    """Compose total = l_bpr + hc*l_hc + ghc*l_ghc + reg*l_reg.

    Components may be Tensors (kept in the gradient graph) or plain floats
    (e.g. 0.0 for an ablated term). Returns the total as a Tensor together
    with a float breakdown whose `total` is exactly the same composition.
    """
    if min(lambda_hc, lambda_ghc, lambda_reg) < 0:
        raise ConfigError("loss weights must be >= 0")
    l_bpr = ad.as_tensor(l_bpr)
    l_hc = ad.as_tensor(l_hc)
    l_ghc = ad.as_tensor(l_ghc)
    l_reg = ad.as_tensor(l_reg)
    total = l_bpr + l_hc * lambda_hc + l_ghc * lambda_ghc + l_reg * lambda_reg
    breakdown = LossBreakdown(
        l_bpr=l_bpr.item(),
        l_hc=l_hc.item(),
        l_ghc=l_ghc.item(),
        l_reg=l_reg.item(),
        total=total.item(),
    )
    return total, breakdown
