"""Interaction datasets and per-modality item features: loading, validation,
per-user splitting, synthetic generation, and the on-disk formats."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError

log = logging.getLogger(__name__)

MODALITIES = ("image", "video", "text")
TRAIN, VAL, TEST = 0, 1, 2

_FEATURE_MAGIC = b"MHCRFEAT"
_FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<8sIBQQ")


@dataclass
class InteractionDataset:
    """User-item interaction pairs with an optional train/val/test assignment.

    `users` and `items` are parallel int64 arrays; `split` (when assigned)
    labels each pair with TRAIN/VAL/TEST. Vocabulary sizes are fixed even if
    some indices end up with no interactions.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    split: np.ndarray | None = None
    num_duplicates: int = 0
    num_dropped_users: int = 0

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        if self.users.shape != self.items.shape or self.users.ndim != 1:
            raise DataError("users and items must be parallel 1-D arrays")
        if self.num_users < 1 or self.num_items < 1:
            raise DataError("vocabulary sizes must be >= 1")
        if self.users.size:
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise DataError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise DataError("item index out of range")
        keys = self.users * self.num_items + self.items
        if np.unique(keys).size != keys.size:
            raise DataError("duplicate (user, item) pairs")
        if self.split is not None:
            self.split = np.asarray(self.split, dtype=np.int8)
            if self.split.shape != self.users.shape:
                raise DataError("split assignment length mismatch")
            if self.split.size and not np.isin(self.split, (TRAIN, VAL, TEST)).all():
                raise DataError("split labels must be in {0, 1, 2}")

    def __len__(self) -> int:
        return self.users.size

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.users.tolist(), self.items.tolist()))

    def require_split(self) -> np.ndarray:
        if self.split is None:
            raise DataError("dataset has no split assignment; run split_dataset first")
        return self.split

    def split_pairs(self, label: int) -> tuple[np.ndarray, np.ndarray]:
        mask = self.require_split() == label
        return self.users[mask], self.items[mask]

    def user_degree(self, label: int) -> np.ndarray:
        """Per-user interaction count within one split."""
        users, _ = self.split_pairs(label)
        return np.bincount(users, minlength=self.num_users)

    def items_by_user(self, label: int) -> list[np.ndarray]:
        users, items = self.split_pairs(label)
        order = np.argsort(users, kind="stable")
        users, items = users[order], items[order]
        bounds = np.searchsorted(users, np.arange(self.num_users + 1))
        return [items[bounds[u]:bounds[u + 1]] for u in range(self.num_users)]


@dataclass
class ModalityFeatures:
    """One modality's item feature matrix (|I| x d_m)."""

    modality: str
    matrix: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality tag {self.modality!r}")
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise DataError("feature matrix must be 2-D")
        if not np.isfinite(self.matrix).all():
            raise DataError(f"non-finite values in {self.modality} features")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def validate_features(ds: InteractionDataset, features: Sequence[ModalityFeatures]) -> None:
    """Reject feature matrices that cannot be paired with the dataset."""
    for feats in features:
        if feats.matrix.shape[0] != ds.num_items:
            raise DataError(
                f"{feats.modality} features have {feats.matrix.shape[0]} rows, "
                f"dataset has {ds.num_items} items"
            )
        zero = ~np.any(feats.matrix != 0.0, axis=1)
        if zero.any():
            raise DataError(
                f"{feats.modality} features contain {int(zero.sum())} all-zero rows "
                f"(first at item {int(np.flatnonzero(zero)[0])})"
            )
    tags = [f.modality for f in features]
    if len(set(tags)) != len(tags):
        raise DataError("duplicate modality tags")


def load_interactions(path: str | Path) -> InteractionDataset:
    """Read a UTF-8 TSV of `user<TAB>item` integer pairs (no header).

    Duplicate pairs are dropped (first occurrence kept) and counted.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"interactions file not found: {path}")
    users: list[int] = []
    items: list[int] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'user<TAB>item', got {line!r}")
            try:
                u, i = int(fields[0]), int(fields[1])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-integer id in {line!r}") from None
            if u < 0 or i < 0:
                raise DataError(f"{path}:{lineno}: negative id in {line!r}")
            users.append(u)
            items.append(i)
    if not users:
        raise DataError(f"{path}: no interactions")
    u_arr = np.asarray(users, dtype=np.int64)
    i_arr = np.asarray(items, dtype=np.int64)
    num_users = int(u_arr.max()) + 1
    num_items = int(i_arr.max()) + 1
    keys = u_arr * num_items + i_arr
    _, first = np.unique(keys, return_index=True)
    first.sort()
    dup_count = keys.size - first.size
    if dup_count:
        log.warning("%s: dropped %d duplicate interaction(s)", path, dup_count)
        u_arr, i_arr = u_arr[first], i_arr[first]
    return InteractionDataset(num_users, num_items, u_arr, i_arr, num_duplicates=dup_count)


def save_interactions(ds: InteractionDataset, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for u, i in zip(ds.users.tolist(), ds.items.tolist()):
            fh.write(f"{u}\t{i}\n")


def split_dataset(
    ds: InteractionDataset,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> InteractionDataset:
    """Assign each user's interactions to train/val/test at the given ratios.

    Per user the interaction list is shuffled by `seed`, val and test counts
    are rounded half-up from the ratios, and all remaining interactions go to
    train, so any user with at least one interaction keeps a train signal
    under the default ratios. Users that still end up with zero train
    interactions (possible only for degenerate ratios) are dropped entirely
    and counted in `num_dropped_users`.
    """
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be >= 0 and sum to 1, got {ratios}")
    _, r_val, r_test = ratios
    rng = np.random.default_rng(seed)

    order = np.argsort(ds.users, kind="stable")
    sorted_users = ds.users[order]
    bounds = np.searchsorted(sorted_users, np.arange(ds.num_users + 1))

    split = np.empty(len(ds), dtype=np.int8)
    drop = np.zeros(len(ds), dtype=bool)
    dropped_users = 0
    for u in range(ds.num_users):
        rows = order[bounds[u]:bounds[u + 1]]
        n = rows.size
        if n == 0:
            continue
        rows = rows[rng.permutation(n)]
        n_test = min(n, int(np.floor(r_test * n + 0.5)))
        n_val = min(n - n_test, int(np.floor(r_val * n + 0.5)))
        n_train = n - n_val - n_test
        if n_train == 0:
            drop[rows] = True
            dropped_users += 1
            continue
        split[rows[:n_train]] = TRAIN
        split[rows[n_train:n_train + n_val]] = VAL
        split[rows[n_train + n_val:]] = TEST

    if dropped_users:
        log.warning("dropped %d user(s) left without train interactions", dropped_users)
    keep = ~drop
    return InteractionDataset(
        ds.num_users,
        ds.num_items,
        ds.users[keep],
        ds.items[keep],
        split=split[keep],
        num_duplicates=ds.num_duplicates,
        num_dropped_users=dropped_users,
    )


def cold_start_users(ds: InteractionDataset, threshold: int = 3) -> set[int]:
    """Users whose TRAIN interaction count is strictly below `threshold`."""
    counts = ds.user_degree(TRAIN)
    return set(np.flatnonzero(counts < threshold).tolist())


def unseen_eval_items(ds: InteractionDataset) -> int:
    """Count val/test interactions whose item never occurs in train.

    Such items cannot be ranked well; they are kept, not filtered.
    """
    split = ds.require_split()
    train_items = np.unique(ds.items[split == TRAIN])
    eval_items = ds.items[split != TRAIN]
    return int((~np.isin(eval_items, train_items)).sum())


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the planted-cluster generator.

    User degrees follow a rank-size power law: the user at (shuffled) rank r
    gets weight r**(-degree_exponent), rescaled to `mean_interactions`.
    Items and users live in latent clusters; a user interacts within their
    own cluster with probability `within_cluster_prob`, and item features are
    the item's cluster centroid plus Gaussian noise, so the modality graphs
    carry real signal.
    """

    num_users: int = 1000
    num_items: int = 200
    mean_interactions: float = 8.0
    degree_exponent: float = 0.6
    num_clusters: int = 8
    modality_dims: Mapping[str, int] = field(
        default_factory=lambda: {"image": 32, "video": 32, "text": 16}
    )
    within_cluster_prob: float = 0.85
    noise_std: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if self.num_users < 1 or self.num_items < 1 or self.num_clusters < 1:
            raise ConfigError("num_users, num_items, num_clusters must be >= 1")
        if self.mean_interactions < 1:
            raise ConfigError("mean_interactions must be >= 1")
        if self.degree_exponent < 0:
            raise ConfigError("degree_exponent must be >= 0")
        if not 0.0 <= self.within_cluster_prob < 1.0:
            raise ConfigError("within_cluster_prob must be in [0, 1)")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not self.modality_dims:
            raise ConfigError("at least one modality is required")
        for tag, dim in self.modality_dims.items():
            if tag not in MODALITIES:
                raise ConfigError(f"unknown modality tag {tag!r}")
            if dim < 1:
                raise ConfigError(f"modality dim for {tag!r} must be >= 1")


def _power_law_degrees(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    ranks = rng.permutation(cfg.num_users) + 1
    weights = ranks.astype(np.float64) ** (-cfg.degree_exponent)
    degrees = np.rint(weights * cfg.mean_interactions / weights.mean()).astype(np.int64)
    return np.clip(degrees, 1, cfg.num_items)


def generate_synthetic(cfg: SyntheticConfig) -> tuple[InteractionDataset, list[ModalityFeatures]]:
    """Deterministic planted-cluster dataset plus matching modality features."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    user_clusters = rng.integers(0, cfg.num_clusters, size=cfg.num_users)
    item_clusters = rng.integers(0, cfg.num_clusters, size=cfg.num_items)
    degrees = _power_law_degrees(cfg, rng)

    cluster_sizes = np.bincount(item_clusters, minlength=cfg.num_clusters)
    base = np.full(cfg.num_items, 1.0 / cfg.num_items)
    users_out: list[np.ndarray] = []
    items_out: list[np.ndarray] = []
    for u in range(cfg.num_users):
        c = user_clusters[u]
        own = cluster_sizes[c]
        if 0 < own < cfg.num_items:
            p = np.full(cfg.num_items, (1.0 - cfg.within_cluster_prob) / (cfg.num_items - own))
            p[item_clusters == c] = cfg.within_cluster_prob / own
        else:
            p = base
        chosen = rng.choice(cfg.num_items, size=degrees[u], replace=False, p=p)
        users_out.append(np.full(degrees[u], u, dtype=np.int64))
        items_out.append(np.sort(chosen).astype(np.int64))

    ds = InteractionDataset(
        cfg.num_users,
        cfg.num_items,
        np.concatenate(users_out),
        np.concatenate(items_out),
    )

    features = []
    for tag in MODALITIES:
        if tag not in cfg.modality_dims:
            continue
        dim = cfg.modality_dims[tag]
        centroids = rng.normal(size=(cfg.num_clusters, dim))
        noise = rng.normal(size=(cfg.num_items, dim)) * cfg.noise_std
        features.append(ModalityFeatures(tag, centroids[item_clusters] + noise))
    validate_features(ds, features)
    return ds, features


def save_features(feats: ModalityFeatures, path: str | Path) -> None:
    rows, cols = feats.matrix.shape
    tag = MODALITIES.index(feats.modality)
    with Path(path).open("wb") as fh:
        fh.write(_FEATURE_HEADER.pack(_FEATURE_MAGIC, _FEATURE_VERSION, tag, rows, cols))
        fh.write(np.ascontiguousarray(feats.matrix, dtype="<f4").tobytes())


def load_features(path: str | Path) -> ModalityFeatures:
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise DataError(f"{path}: truncated feature header")
    magic, version, tag, rows, cols = _FEATURE_HEADER.unpack_from(raw)
    if magic != _FEATURE_MAGIC:
        raise DataError(f"{path}: bad feature magic {magic!r}")
    if version != _FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature version {version}")
    if tag >= len(MODALITIES):
        raise DataError(f"{path}: unknown modality tag {tag}")
    body = raw[_FEATURE_HEADER.size:]
    expected = rows * cols * 4
    if len(body) != expected:
        raise DataError(f"{path}: expected {expected} payload bytes, got {len(body)}")
    matrix = np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)
    return ModalityFeatures(MODALITIES[tag], matrix)


def save_split(ds: InteractionDataset, path: str | Path) -> None:
    """Sidecar TSV `user<TAB>item<TAB>{0|1|2}` (0=train, 1=val, 2=test)."""
    split = ds.require_split()
    with Path(path).open("w", encoding="utf-8") as fh:
        for u, i, s in zip(ds.users.tolist(), ds.items.tolist(), split.tolist()):
            fh.write(f"{u}\t{i}\t{s}\n")


def load_split(ds: InteractionDataset, path: str | Path) -> InteractionDataset:
    """Attach a sidecar split to `ds`; every dataset pair must be covered."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"split file not found: {path}")
    assignment: dict[tuple[int, int], int] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(f"{path}:{lineno}: expected 'user<TAB>item<TAB>label'")
            try:
                u, i, s = int(fields[0]), int(fields[1]), int(fields[2])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-integer field") from None
            if s not in (TRAIN, VAL, TEST):
                raise ParseError(f"{path}:{lineno}: label must be 0, 1, or 2")
            assignment[(u, i)] = s
    labels = np.empty(len(ds), dtype=np.int8)
    for idx, (u, i) in enumerate(zip(ds.users.tolist(), ds.items.tolist())):
        if (u, i) not in assignment:
            raise DataError(f"{path}: no split label for pair ({u}, {i})")
        labels[idx] = assignment[(u, i)]
    return replace(ds, split=labels)


def dataset_stats(num_users: int, num_items: int, num_interactions: int) -> dict[str, float]:
    return {
        "sparsity": 1.0 - num_interactions / (num_users * num_items),
        "mean_per_user": num_interactions / num_users,
        "mean_per_item": num_interactions / num_items,
    }


def format_dataset_stats(num_users: int, num_items: int, num_interactions: int) -> str:
    stats = dataset_stats(num_users, num_items, num_interactions)
    return (
        f"users={num_users} items={num_items} interactions={num_interactions} "
        f"sparsity={100.0 * stats['sparsity']:.2f}% "
        f"mean_per_user={stats['mean_per_user']:.2f} "
        f"mean_per_item={stats['mean_per_item']:.2f}"
    )
