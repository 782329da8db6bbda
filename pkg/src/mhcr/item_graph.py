"""Per-modality item-item affinity graphs: cosine similarity, top-K
sparsification, row normalization, and feature propagation.

Graphs are built once from the raw modality features and frozen; only the
projection applied to the propagated features is learnable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .dataio import ModalityFeatures
from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class AffinityGraph:
    """Row-stochastic top-K item-item graph for one modality."""

    modality: str
    matrix: sp.csr_matrix
    k: int


def cosine_affinity(features: np.ndarray, a: int, b: int) -> float:
    """Cosine similarity of item rows a and b; zero-norm rows compare as 0."""
    va, vb = features[a], features[b]
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        log.warning("cosine_affinity: zero-norm feature row (items %d, %d)", a, b)
        return 0.0
    return float(va @ vb / (na * nb))


def _normalized_rows(matrix: np.ndarray, tag: str) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    zero = norms[:, 0] == 0.0
    if zero.any():
        log.warning("%s features: %d zero-norm rows treated as no-affinity", tag, int(zero.sum()))
        norms[zero] = 1.0
    return matrix / norms


def build_affinity_graph(
    features: ModalityFeatures, k: int, block_size: int = 2048, norm: str = "row"
) -> AffinityGraph:
    """Keep each item's K most cosine-similar neighbors (self excluded),
    clamp negatives to zero, and normalize.

    The default "row" mode divides each row by its sum, so nonzero rows are
    stochastic; "sym" applies D^-1/2 S D^-1/2 instead. Ties at the K-th
    value resolve to the lower item index. Similarities are computed in row
    blocks so memory stays O(block_size * |I|).
    """
    if k < 1:
        raise ConfigError("neighbor count k must be >= 1")
    if norm not in ("row", "sym"):
        raise ConfigError(f"normalization must be 'row' or 'sym', got {norm!r}")
    num_items = features.matrix.shape[0]
    if k >= num_items:
        log.warning("k=%d >= %d items; clamping to %d", k, num_items, num_items - 1)
        k = max(num_items - 1, 1)

    normalized = _normalized_rows(features.matrix, features.modality)
    indptr = [0]
    indices: list[np.ndarray] = []
    data: list[np.ndarray] = []
    for start in range(0, num_items, block_size):
        stop = min(start + block_size, num_items)
        sims = normalized[start:stop] @ normalized.T
        sims[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        # stable argsort of the negated row keeps lower indices first on ties
        order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        kept = np.take_along_axis(sims, order, axis=1)
        kept = np.maximum(kept, 0.0)
        for r in range(stop - start):
            nz = kept[r] > 0.0
            cols = order[r][nz]
            vals = kept[r][nz]
            if norm == "row":
                total = vals.sum()
                if total > 0.0:
                    vals = vals / total
            col_order = np.argsort(cols, kind="stable")
            indices.append(cols[col_order])
            data.append(vals[col_order])
            indptr.append(indptr[-1] + cols.size)

    matrix = sp.csr_matrix(
        (
            np.concatenate(data) if data else np.empty(0),
            np.concatenate(indices) if indices else np.empty(0, dtype=np.int64),
            np.asarray(indptr, dtype=np.int64),
        ),
        shape=(num_items, num_items),
    )
    if norm == "sym":
        row_sums = np.asarray(matrix.sum(axis=1)).ravel()
        col_sums = np.asarray(matrix.sum(axis=0)).ravel()
        inv_sqrt_r = np.divide(1.0, np.sqrt(row_sums), out=np.zeros_like(row_sums), where=row_sums > 0)
        inv_sqrt_c = np.divide(1.0, np.sqrt(col_sums), out=np.zeros_like(col_sums), where=col_sums > 0)
        matrix = (sp.diags(inv_sqrt_r) @ matrix @ sp.diags(inv_sqrt_c)).tocsr()
        matrix.sort_indices()
    return AffinityGraph(features.modality, matrix, k)


def propagate_items(graphs: Sequence[AffinityGraph], projected: Sequence) -> ad.Tensor:
    """Sum over modalities of S_m @ P_m, where P_m is the projected feature
    matrix for modality m. Linear in every projected input."""
    if len(graphs) != len(projected):
        raise ShapeError(f"{len(graphs)} graphs but {len(projected)} projected matrices")
    if not graphs:
        raise ConfigError("propagate_items requires at least one modality")
    out = None
    for graph, p in zip(graphs, projected):
        p = ad.as_tensor(p)
        if p.shape[0] != graph.matrix.shape[0]:
            raise ShapeError(
                f"{graph.modality}: projected rows {p.shape[0]} != {graph.matrix.shape[0]} items"
            )
        term = ad.spmm(graph.matrix, p)
        out = term if out is None else out + term
    return out


def dump_affinity_tsv(graph: AffinityGraph, path: str | Path) -> None:
    """Debug dump of the sparsified graph as `i<TAB>j<TAB>weight` lines."""
    coo = graph.matrix.tocoo()
    with Path(path).open("w", encoding="utf-8") as fh:
        for i, j, w in zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()):
            fh.write(f"{i}\t{j}\t{w:.10g}\n")
