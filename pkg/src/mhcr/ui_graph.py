"""Symmetrically normalized user-item bipartite graph and its linear
propagation with layer-sum readout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .dataio import TRAIN, InteractionDataset
from .errors import ConfigError, DataError, ShapeError


@dataclass
class NormalizedBipartiteGraph:
    """(|U|+|I|)-node adjacency with edge weight 1/sqrt(deg(u) * deg(i)).

    Users occupy node rows [0, |U|), items [|U|, |U|+|I|). Only train
    interactions contribute edges; isolated nodes keep zero rows.
    """

    adjacency: sp.csr_matrix
    num_users: int
    num_items: int

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items


def build_norm_adjacency(ds: InteractionDataset) -> NormalizedBipartiteGraph:
    users, items = ds.split_pairs(TRAIN)
    if users.size == 0:
        raise DataError("cannot build bipartite graph: no train interactions")
    deg_u = np.bincount(users, minlength=ds.num_users)
    deg_i = np.bincount(items, minlength=ds.num_items)
    weights = 1.0 / np.sqrt(deg_u[users] * deg_i[items])

    n = ds.num_users + ds.num_items
    rows = np.concatenate([users, ds.num_users + items])
    cols = np.concatenate([ds.num_users + items, users])
    vals = np.concatenate([weights, weights])
    adjacency = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return NormalizedBipartiteGraph(adjacency, ds.num_users, ds.num_items)


def propagate_ui(graph: NormalizedBipartiteGraph, e0, layers: int) -> ad.Tensor:
    """Sum of embeddings over layers 0..L, where layer l is A_norm^l @ e0.

    Pure linear propagation: no nonlinearity and no per-layer parameters.
    """
    if layers < 0:
        raise ConfigError("layer count must be >= 0")
    e0 = ad.as_tensor(e0)
    if e0.ndim != 2 or e0.shape[0] != graph.num_nodes:
        raise ShapeError(
            f"embedding rows {e0.shape} do not match {graph.num_nodes} graph nodes"
        )
    out = e0
    current = e0
    for _ in range(layers):
        current = ad.spmm(graph.adjacency, current)
        out = out + current
    return out
