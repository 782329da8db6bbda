"""Model assembly and optimization: parameter ownership, the multi-view
forward pass with ablation toggles, reverse-mode gradients through the
fixed computation chain, Adam updates, negative sampling, and the epoch
loop with early stopping on validation Recall@20."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import evaluation
from .dataio import MODALITIES, TRAIN, InteractionDataset, ModalityFeatures, validate_features
from .errors import ConfigError, DataError, NumericError
from .hypergraph import HyperedgeParameters, aggregate_hyper, build_incidence, hypergraph_pass
from .item_graph import AffinityGraph, build_affinity_graph, propagate_items
from .objectives import (
    LossBreakdown,
    bpr_loss,
    embedding_l2,
    graph_hyper_contrastive_loss,
    hyper_contrastive_loss,
    total_loss,
)
from .ui_graph import NormalizedBipartiteGraph, build_norm_adjacency, propagate_ui

log = logging.getLogger(__name__)

_NEGATIVE_SAMPLING_TRIES = 100


@dataclass(frozen=True)
class TrainConfig:
    """Model, objective, and optimizer hyperparameters plus ablation flags."""

    d: int = 64
    layers: int = 2
    k_knn: int = 10
    k_hyper: int = 32
    hyper_steps: int = 1
    drop_rate: float = 0.5
    tau: float = 0.2
    tau_hc: float | None = None
    tau_ghc: float | None = None
    lambda_hc: float = 1e-5
    lambda_ghc: float = 0.01
    lambda_reg: float = 1e-4
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    use_ui: bool = True
    use_ii: bool = True
    use_hem: bool = True
    use_hc: bool = True
    use_ghc: bool = True

    def validate(self) -> None:
        if self.d < 1 or self.k_hyper < 1 or self.k_knn < 1 or self.hyper_steps < 1:
            raise ConfigError("d, k_knn, k_hyper, hyper_steps must be >= 1")
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ConfigError("drop_rate must be in [0, 1]")
        if min(self.effective_tau_hc, self.effective_tau_ghc) <= 0:
            raise ConfigError("temperatures must be > 0")
        if min(self.lambda_hc, self.lambda_ghc, self.lambda_reg) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")

    @property
    def effective_tau_hc(self) -> float:
        return self.tau if self.tau_hc is None else self.tau_hc

    @property
    def effective_tau_ghc(self) -> float:
        return self.tau if self.tau_ghc is None else self.tau_ghc


VARIANT_PRESETS = {
    "full": {},
    "wo-ui": {"use_ui": False},
    "wo-ii": {"use_ii": False},
    "wo-hem": {"use_hem": False},
    "wo-hc": {"use_hc": False},
    "wo-ghc": {"use_ghc": False},
    "bpr-mf": {"use_ii": False, "use_hem": False, "use_hc": False, "use_ghc": False, "layers": 0},
}


def apply_variant(cfg: TrainConfig, variant: str) -> TrainConfig:
    if variant not in VARIANT_PRESETS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANT_PRESETS)}")
    return replace(cfg, **VARIANT_PRESETS[variant])


def variant_label(cfg: TrainConfig) -> str:
    """Human-readable name for an ablation configuration."""
    if cfg.use_ui and not cfg.use_ii and not cfg.use_hem and cfg.layers == 0:
        return "BPR-MF"
    missing = []
    for flag, name in (
        (cfg.use_ui, "UI"),
        (cfg.use_ii, "II"),
        (cfg.use_hem, "HEM"),
        (cfg.use_hc, "HC"),
        (cfg.use_ghc, "GHC"),
    ):
        if not flag:
            missing.append(name)
    return "MHCR" if not missing else "w/o " + "+".join(missing)


def canonical_modalities(features: Sequence[ModalityFeatures]) -> list[ModalityFeatures]:
    order = {tag: idx for idx, tag in enumerate(MODALITIES)}
    return sorted(features, key=lambda f: order[f.modality])


@dataclass
class ModelParameters:
    """All learnable tensors, exclusively owned by the training loop."""

    num_users: int
    num_items: int
    d: int
    e0: ad.Tensor
    hyper: HyperedgeParameters
    modality_tags: tuple[str, ...]
    modality_dims: dict[str, int]

    def tensors(self) -> dict[str, ad.Tensor]:
        named = {"E0": self.e0}
        for tag in self.modality_tags:
            named[f"W_{tag}"] = self.hyper.w[tag]
            named[f"V_{tag}"] = self.hyper.v[tag]
        return named

    def zero_grad(self) -> None:
        for tensor in self.tensors().values():
            tensor.zero_grad()

    def check_finite(self) -> None:
        for name, tensor in self.tensors().items():
            if not np.isfinite(tensor.data).all():
                raise NumericError(f"parameter {name} contains non-finite values")

    def copy(self) -> "ModelParameters":
        def clone(t: ad.Tensor) -> ad.Tensor:
            return ad.Tensor(t.data.copy(), requires_grad=True)

        hyper = HyperedgeParameters(
            v={tag: clone(t) for tag, t in self.hyper.v.items()},
            w={tag: clone(t) for tag, t in self.hyper.w.items()},
            k_hyper=self.hyper.k_hyper,
        )
        return ModelParameters(
            self.num_users,
            self.num_items,
            self.d,
            clone(self.e0),
            hyper,
            self.modality_tags,
            dict(self.modality_dims),
        )


def init_parameters(
    cfg: TrainConfig,
    num_users: int,
    num_items: int,
    modality_dims: dict[str, int],
    rng_seed: int | None = None,
) -> ModelParameters:
    """Gaussian init, every entry i.i.d. N(0, (1/sqrt(d))^2), so ID embedding
    row norms concentrate near 1. Deterministic given the seed: tensors are
    drawn in a fixed order (E0, then W/V per canonical modality order)."""
    cfg.validate()
    seed = cfg.seed if rng_seed is None else rng_seed
    rng = np.random.default_rng(seed)
    std = 1.0 / np.sqrt(cfg.d)
    tags = tuple(tag for tag in MODALITIES if tag in modality_dims)
    if not tags:
        raise ConfigError("at least one modality is required")

    e0 = ad.Tensor(rng.normal(0.0, std, size=(num_users + num_items, cfg.d)), requires_grad=True)
    w: dict[str, ad.Tensor] = {}
    v: dict[str, ad.Tensor] = {}
    for tag in tags:
        d_m = modality_dims[tag]
        w[tag] = ad.Tensor(rng.normal(0.0, std, size=(d_m, cfg.d)), requires_grad=True)
        v[tag] = ad.Tensor(rng.normal(0.0, std, size=(cfg.k_hyper, d_m)), requires_grad=True)
    hyper = HyperedgeParameters(v=v, w=w, k_hyper=cfg.k_hyper)
    return ModelParameters(num_users, num_items, cfg.d, e0, hyper, tags, dict(modality_dims))


class Adam:
    """Adam with bias correction; betas (0.9, 0.999), eps 1e-8."""

    def __init__(
        self,
        params: dict[str, ad.Tensor],
        learning_rate: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / (1.0 - self.beta1**self.t)
            v_hat = self.v[name] / (1.0 - self.beta2**self.t)
            p.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class ViewInputs:
    """Frozen graph structures shared by every training step."""

    graph: NormalizedBipartiteGraph
    affinity: list[AffinityGraph]
    x_u: sp.csr_matrix
    features: list[ModalityFeatures]

    @property
    def modality_dims(self) -> dict[str, int]:
        return {f.modality: f.dim for f in self.features}


def build_views(
    ds: InteractionDataset, features: Sequence[ModalityFeatures], cfg: TrainConfig
) -> ViewInputs:
    validate_features(ds, features)
    feats = canonical_modalities(features)
    graph = build_norm_adjacency(ds)
    affinity = [build_affinity_graph(f, cfg.k_knn) for f in feats]
    users, items = ds.split_pairs(TRAIN)
    x_u = sp.csr_matrix(
        (np.ones(users.size), (users, items)), shape=(ds.num_users, ds.num_items)
    )
    return ViewInputs(graph, affinity, x_u, feats)


@dataclass
class Batch:
    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray


@dataclass
class ForwardResult:
    """Per-view full-node embeddings plus the training losses (train mode)."""

    e_ui: ad.Tensor
    e_ii: ad.Tensor
    e_h: ad.Tensor
    fused: ad.Tensor
    hyper_stacks: list[ad.Tensor] = field(default_factory=list)
    total: ad.Tensor | None = None
    breakdown: LossBreakdown | None = None


def train_item_sets(ds: InteractionDataset) -> list[frozenset[int]]:
    return [frozenset(items.tolist()) for items in ds.items_by_user(TRAIN)]


def sample_negatives(
    ds: InteractionDataset,
    batch_users: np.ndarray,
    rng: np.random.Generator,
    train_sets: Sequence[frozenset[int]] | None = None,
) -> np.ndarray:
    """One uniformly sampled non-train item per batch user.

    Rejection sampling capped at 100 tries per user; users interacting with
    (nearly) every item fall back to an unconstrained uniform draw.
    """
    if train_sets is None:
        train_sets = train_item_sets(ds)
    negatives = np.empty(len(batch_users), dtype=np.int64)
    fallbacks = 0
    for row, u in enumerate(np.asarray(batch_users).tolist()):
        seen = train_sets[u]
        for _ in range(_NEGATIVE_SAMPLING_TRIES):
            j = int(rng.integers(ds.num_items))
            if j not in seen:
                break
        else:
            j = int(rng.integers(ds.num_items))
            fallbacks += 1
        negatives[row] = j
    if fallbacks:
        log.warning("negative sampling fell back to uniform for %d draw(s)", fallbacks)
    return negatives


def forward(
    params: ModelParameters,
    views: ViewInputs,
    cfg: TrainConfig,
    batch: Batch | None = None,
    mode: str = "train",
    rng: int | np.random.Generator | None = None,
) -> ForwardResult:
    """Assemble the three views, fuse them, and (in train mode) compute the
    loss breakdown on the batch.

    Ablation flags zero a view's contribution and drop its loss terms
    without touching the remaining views' computations. Evaluation mode
    disables dropout and computes no losses.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    train_mode = mode == "train"
    if train_mode and batch is None:
        raise ConfigError("train mode requires a batch")
    num_users, num_items, d = params.num_users, params.num_items, params.d
    n_nodes = num_users + num_items
    zero_view = ad.zeros((n_nodes, d))

    projected: dict[str, ad.Tensor] = {}
    if cfg.use_ii or cfg.use_hem:
        for feats in views.features:
            projected[feats.modality] = ad.matmul(
                ad.constant(feats.matrix), params.hyper.w[feats.modality]
            )

    e_ui = propagate_ui(views.graph, params.e0, cfg.layers) if cfg.use_ui else zero_view

    if cfg.use_ii:
        items_part = propagate_items(
            views.affinity, [projected[g.modality] for g in views.affinity]
        )
        e_ii = ad.concat_rows([ad.zeros((num_users, d)), items_part])
    else:
        e_ii = zero_view

    hyper_stacks: list[ad.Tensor] = []
    if cfg.use_hem:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        drop = cfg.drop_rate if train_mode else 0.0
        pairs = []
        for feats in views.features:
            incidence = build_incidence(
                feats.matrix, params.hyper.v[feats.modality], views.x_u, feats.modality
            )
            pairs.append(
                hypergraph_pass(incidence, projected[feats.modality], drop, cfg.hyper_steps, rng)
            )
        hyper_stacks = [ad.concat_rows([e_u, e_i]) for e_u, e_i in pairs]
        e_h = aggregate_hyper(pairs)
    else:
        e_h = zero_view

    e_graph = e_ui + e_ii
    fused = e_graph + e_h
    result = ForwardResult(e_ui=e_ui, e_ii=e_ii, e_h=e_h, fused=fused, hyper_stacks=hyper_stacks)
    if not train_mode:
        return result

    user_nodes = np.asarray(batch.users, dtype=np.int64)
    pos_nodes = num_users + np.asarray(batch.pos_items, dtype=np.int64)
    neg_nodes = num_users + np.asarray(batch.neg_items, dtype=np.int64)

    u_emb = ad.gather_rows(fused, user_nodes)
    pos_emb = ad.gather_rows(fused, pos_nodes)
    neg_emb = ad.gather_rows(fused, neg_nodes)
    l_bpr = bpr_loss(ad.row_dot(u_emb, pos_emb), ad.row_dot(u_emb, neg_emb))

    contrastive_nodes = np.concatenate([user_nodes, pos_nodes])
    if cfg.use_hem and cfg.use_hc:
        if len(hyper_stacks) < 2:
            raise ConfigError("the cross-modal contrastive loss needs >= 2 modalities")
        l_hc = hyper_contrastive_loss(hyper_stacks, contrastive_nodes, cfg.effective_tau_hc)
    else:
        l_hc = 0.0
    if cfg.use_hem and cfg.use_ghc:
        l_ghc = graph_hyper_contrastive_loss(
            e_graph, e_h, contrastive_nodes, cfg.effective_tau_ghc
        )
    else:
        l_ghc = 0.0

    reg_nodes = np.concatenate([user_nodes, pos_nodes, neg_nodes])
    l_reg = embedding_l2(ad.gather_rows(params.e0, reg_nodes))

    result.total, result.breakdown = total_loss(
        l_bpr, l_hc, l_ghc, l_reg, cfg.lambda_hc, cfg.lambda_ghc, cfg.lambda_reg
    )
    return result


def backward_and_step(total: ad.Tensor, params: ModelParameters, optimizer: Adam) -> None:
    """Reverse-mode gradient accumulation followed by one Adam update."""
    params.zero_grad()
    total.backward()
    for name, tensor in params.tensors().items():
        if tensor.grad is not None and not np.isfinite(tensor.grad).all():
            raise NumericError(f"gradient for {name} contains non-finite values")
    optimizer.step()
    params.check_finite()


def compute_embeddings(
    params: ModelParameters, views: ViewInputs, cfg: TrainConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluation-mode fused embeddings, split into user and item blocks."""
    result = forward(params, views, cfg, mode="eval")
    return evaluation.fuse_embeddings(result.e_ui, result.e_ii, result.e_h, params.num_users)


def evaluate_params(
    params: ModelParameters,
    ds: InteractionDataset,
    features: Sequence[ModalityFeatures],
    cfg: TrainConfig,
    slice_name: str = evaluation.SLICE_ALL,
    ks: Sequence[int] = (10, 20),
    cold_threshold: int = 3,
) -> evaluation.EvalReport:
    """Full pipeline for one report: rebuild views, fuse in eval mode, rank."""
    views = build_views(ds, features, cfg)
    user_emb, item_emb = compute_embeddings(params, views, cfg)
    return evaluation.evaluate(
        user_emb, item_emb, ds, slice_name=slice_name, ks=ks, cold_threshold=cold_threshold
    )


@dataclass
class EpochStats:
    epoch: int
    loss: LossBreakdown
    val_recall20: float


@dataclass
class TrainResult:
    params: ModelParameters
    epochs: list[EpochStats]
    best_epoch: int
    best_val_recall20: float
    initial_val_recall20: float
    variant: str
    seed: int


def _mean_breakdown(parts: list[tuple[int, LossBreakdown]], cfg: TrainConfig) -> LossBreakdown:
    """Interaction-weighted component means; the total is recomposed from the
    averaged components so the exact-composition invariant holds per row."""
    n = sum(size for size, _ in parts)
    acc = np.zeros(4)
    for size, b in parts:
        acc += size * np.array([b.l_bpr, b.l_hc, b.l_ghc, b.l_reg])
    l_bpr, l_hc, l_ghc, l_reg = (acc / n).tolist()
    total = l_bpr + cfg.lambda_hc * l_hc + cfg.lambda_ghc * l_ghc + cfg.lambda_reg * l_reg
    return LossBreakdown(l_bpr, l_hc, l_ghc, l_reg, total)


def fit(
    ds: InteractionDataset,
    features: Sequence[ModalityFeatures],
    cfg: TrainConfig,
) -> TrainResult:
    """Mini-batch training with per-epoch validation Recall@20 early stopping.

    Deterministic for a fixed config and seed in single-threaded mode: the
    shuffle, negative-sampling, and dropout streams are spawned from the
    root seed, and dropout is only consumed by the hypergraph view.
    """
    cfg.validate()
    ds.require_split()
    if cfg.use_hem and cfg.use_hc and len(features) < 2:
        raise ConfigError("the cross-modal contrastive loss needs >= 2 modalities")

    views = build_views(ds, features, cfg)
    params = init_parameters(cfg, ds.num_users, ds.num_items, views.modality_dims)
    optimizer = Adam(params.tensors(), cfg.learning_rate)
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    rng_shuffle, rng_neg, rng_drop = (np.random.default_rng(s) for s in seeds)

    train_users, train_items = ds.split_pairs(TRAIN)
    train_sets = train_item_sets(ds)
    n_train = train_users.size

    user_emb, item_emb = compute_embeddings(params, views, cfg)
    initial_recall = evaluation.mean_recall(user_emb, item_emb, ds, k=20)

    best_recall = -np.inf
    best_epoch = 0
    best_params = params.copy()
    epochs_since_best = 0
    history: list[EpochStats] = []

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng_shuffle.permutation(n_train)
        batch_stats: list[tuple[int, LossBreakdown]] = []
        for start in range(0, n_train, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            batch = Batch(
                users=train_users[idx],
                pos_items=train_items[idx],
                neg_items=sample_negatives(ds, train_users[idx], rng_neg, train_sets),
            )
            result = forward(params, views, cfg, batch=batch, mode="train", rng=rng_drop)
            backward_and_step(result.total, params, optimizer)
            batch_stats.append((idx.size, result.breakdown))

        user_emb, item_emb = compute_embeddings(params, views, cfg)
        val_recall = evaluation.mean_recall(user_emb, item_emb, ds, k=20)
        history.append(EpochStats(epoch, _mean_breakdown(batch_stats, cfg), val_recall))

        if val_recall > best_recall:
            best_recall = val_recall
            best_epoch = epoch
            best_params = params.copy()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best > cfg.patience:
                break

    return TrainResult(
        params=best_params,
        epochs=history,
        best_epoch=best_epoch,
        best_val_recall20=float(best_recall),
        initial_val_recall20=float(initial_recall),
        variant=variant_label(cfg),
        seed=cfg.seed,
    )
