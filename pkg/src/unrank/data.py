"""Interaction data: loading, splitting, bipartite adjacency and forget sets."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ._random import stream

logger = logging.getLogger(__name__)

ENTITY_ITEM = "entity-item"
INTERACTION_USER = "interaction-user"
FORGET_MODES = (ENTITY_ITEM, INTERACTION_USER)


class DataFormatError(ValueError):
    pass


def load_interactions(path, delimiter="\t"):
    """Read ``user<d>item[<d>rating<d>timestamp]`` lines into (user, item) pairs.

    Every line is an implicit positive; rating and timestamp are ignored.
    Duplicate pairs keep their first occurrence. Blank lines are skipped.
    """
    path = Path(path)
    pairs = []
    seen = set()
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split(delimiter)
            if len(fields) < 2 or len(fields) > 4:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 2-4 fields separated by {delimiter!r}, got {len(fields)}"
                )
            user, item = fields[0].strip(), fields[1].strip()
            if not user or not item:
                raise DataFormatError(f"{path}:{lineno}: empty user or item field")
            if (user, item) in seen:
                continue
            seen.add((user, item))
            pairs.append((user, item))
    if not pairs:
        raise DataFormatError(f"{path}: no interactions found")
    return pairs


def _as_edges(edges):
    arr = np.asarray(edges, dtype=np.int64)
    if arr.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"edges must have shape (n, 2), got {arr.shape}")
    return arr


def _csr(rows, cols, n_rows, n_cols):
    order = np.lexsort((cols, rows))
    counts = np.bincount(rows, minlength=n_rows)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    mat = sp.csr_matrix(
        (np.ones(len(rows)), cols[order], indptr), shape=(n_rows, n_cols)
    )
    return mat, order


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Users, items and the train/val/test split of their implicit edges.

    Edge lists are ``(n, 2)`` integer arrays of dense ``(user, item)``
    indices. ``user_adjacency`` (users x items) and ``item_adjacency``
    (items x users) are CSR matrices over the train edges; ``user_edge_ids``
    and ``item_edge_ids`` give the train-edge index behind each stored entry.
    """

    n_users: int
    n_items: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    user_ids: tuple = ()
    item_ids: tuple = ()
    n_small_users: int = 0
    user_adjacency: sp.csr_matrix = field(init=False, repr=False)
    item_adjacency: sp.csr_matrix = field(init=False, repr=False)
    user_edge_ids: np.ndarray = field(init=False, repr=False)
    item_edge_ids: np.ndarray = field(init=False, repr=False)
    _keys: np.ndarray = field(init=False, repr=False)
    _key_order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        set_ = object.__setattr__
        for name in ("train", "val", "test"):
            arr = _as_edges(getattr(self, name))
            arr.setflags(write=False)
            set_(self, name, arr)
        for arr in (self.train, self.val, self.test):
            if len(arr) and (
                arr[:, 0].min() < 0
                or arr[:, 0].max() >= self.n_users
                or arr[:, 1].min() < 0
                or arr[:, 1].max() >= self.n_items
            ):
                raise ValueError("edge index out of range")
        users, items = self.train[:, 0], self.train[:, 1]
        ua, uorder = _csr(users, items, self.n_users, self.n_items)
        ia, iorder = _csr(items, users, self.n_items, self.n_users)
        set_(self, "user_adjacency", ua)
        set_(self, "item_adjacency", ia)
        set_(self, "user_edge_ids", uorder)
        set_(self, "item_edge_ids", iorder)
        keys = users * self.n_items + items
        key_order = np.argsort(keys, kind="stable")
        if len(keys) > 1 and np.any(np.diff(keys[key_order]) == 0):
            raise ValueError("duplicate train edge")
        set_(self, "_keys", keys[key_order])
        set_(self, "_key_order", key_order)

    @property
    def n_nodes(self):
        return self.n_users + self.n_items

    def train_edge_ids(self, edges):
        """Indices into ``train`` of the given edges; raises if any is absent."""
        edges = _as_edges(edges)
        if len(edges) == 0:
            return np.empty(0, dtype=np.int64)
        keys = edges[:, 0] * self.n_items + edges[:, 1]
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        ok = self._keys[pos] == keys if len(self._keys) else np.zeros(len(keys), bool)
        if not np.all(ok):
            bad = edges[~ok][0]
            raise ValueError(f"edge ({bad[0]}, {bad[1]}) is not a train edge")
        return self._key_order[pos]

    def is_train_edge(self, users, items):
        keys = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        if len(self._keys) == 0:
            return np.zeros(keys.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(self._keys, keys), len(self._keys) - 1)
        return self._keys[pos] == keys

    def train_items(self, user):
        a = self.user_adjacency
        return a.indices[a.indptr[user]:a.indptr[user + 1]]

    def with_train(self, train):
        """Same users, items and held-out splits over a different train set."""
        return InteractionDataset(
            self.n_users, self.n_items, train, self.val, self.test,
            self.user_ids, self.item_ids, self.n_small_users,
        )


def build_dataset(raw, split_ratios=(0.8, 0.1, 0.1), seed=0):
    """Remap external ids to dense indices and split each user's edges.

    Ids are numbered by first appearance. Each user's edges are shuffled
    with the ``split`` stream and cut at ``split_ratios``; users with fewer
    than three edges go entirely to train (counted in ``n_small_users``).
    """
    if len(raw) == 0:
        raise ValueError("raw interaction list is empty")
    ratios = np.asarray(split_ratios, dtype=float)
    if ratios.shape != (3,) or np.any(ratios < 0) or not math.isclose(ratios.sum(), 1.0):
        raise ValueError(f"split_ratios must be three non-negative fractions summing to 1, got {split_ratios}")

    user_index, item_index = {}, {}
    seen = set()
    users, items = [], []
    for u, i in raw:
        if (u, i) in seen:
            continue
        seen.add((u, i))
        users.append(user_index.setdefault(u, len(user_index)))
        items.append(item_index.setdefault(i, len(item_index)))
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)

    rng = stream(seed, "split")
    order = np.argsort(users, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(np.bincount(users, minlength=len(user_index)))])
    parts = {"train": [], "val": [], "test": []}
    n_small = 0
    for u in range(len(user_index)):
        idx = order[bounds[u]:bounds[u + 1]]
        n = len(idx)
        if n < 3:
            n_small += 1
            parts["train"].append(idx)
            continue
        idx = idx[rng.permutation(n)]
        n_val = max(1, int(math.floor(n * ratios[1] + 0.5)))
        n_test = max(1, int(math.floor(n * ratios[2] + 0.5)))
        if n - n_val - n_test < 1:
            n_val, n_test = 1, 1
        n_train = n - n_val - n_test
        parts["train"].append(idx[:n_train])
        parts["val"].append(idx[n_train:n_train + n_val])
        parts["test"].append(idx[n_train + n_val:])

    def edges(name):
        if not parts[name]:
            return np.empty((0, 2), dtype=np.int64)
        sel = np.concatenate(parts[name])
        return np.stack([users[sel], items[sel]], axis=1)

    if n_small:
        logger.info("%d users with < 3 interactions assigned entirely to train", n_small)
    return InteractionDataset(
        n_users=len(user_index),
        n_items=len(item_index),
        train=edges("train"),
        val=edges("val"),
        test=edges("test"),
        user_ids=tuple(user_index),
        item_ids=tuple(item_index),
        n_small_users=n_small,
    )


def write_remap(ds, prefix):
    """Write ``<prefix>.users.tsv`` and ``<prefix>.items.tsv`` (external id, dense index)."""
    prefix = str(prefix)
    paths = []
    for kind, ids in (("users", ds.user_ids), ("items", ds.item_ids)):
        path = Path(f"{prefix}.{kind}.tsv")
        path.write_text("".join(f"{ext}\t{k}\n" for k, ext in enumerate(ids)))
        paths.append(path)
    return paths


def read_remap(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        ext, idx = line.rsplit("\t", 1)
        out[ext] = int(idx)
    return out


@dataclass(frozen=True)
class ForgetRequest:
    mode: str = ENTITY_ITEM
    ratio: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.mode not in FORGET_MODES:
            raise ValueError(f"mode must be one of {FORGET_MODES}, got {self.mode!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio must lie in [0, 1], got {self.ratio}")


@dataclass(frozen=True, eq=False)
class ForgetPartition:
    forget: np.ndarray
    retain: np.ndarray
    forget_ids: np.ndarray
    targets: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def generate_forget_set(ds, req, targets=None):
    """Split ``ds.train`` into forget and retain edges.

    In entity-item mode ``ceil(ratio * n_items)`` items are drawn and every
    train edge touching them is forgotten. In interaction-user mode
    ``ceil(ratio * n_users)`` users are drawn and ``ceil(deg / 2)`` of each
    one's train edges are forgotten. ``targets`` overrides the sampled
    items or users.
    """
    if len(ds.train) == 0:
        raise ValueError("dataset has no train edges")
    rng = stream(req.seed, "forget")
    train = ds.train
    if req.mode == ENTITY_ITEM:
        if targets is None:
            k = math.ceil(req.ratio * ds.n_items)
            targets = np.sort(rng.choice(ds.n_items, size=k, replace=False))
        targets = np.asarray(targets, dtype=np.int64)
        mask = np.isin(train[:, 1], targets)
        forget_ids = np.flatnonzero(mask)
    else:
        if targets is None:
            k = math.ceil(req.ratio * ds.n_users)
            targets = np.sort(rng.choice(ds.n_users, size=k, replace=False))
        targets = np.asarray(targets, dtype=np.int64)
        chosen = []
        a = ds.user_adjacency
        for u in targets:
            ids = ds.user_edge_ids[a.indptr[u]:a.indptr[u + 1]]
            take = math.ceil(len(ids) / 2)
            if take:
                chosen.append(rng.choice(ids, size=take, replace=False))
        forget_ids = np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=np.int64)
    if len(forget_ids) == len(train):
        raise ValueError("forget request would remove every train edge")
    keep = np.ones(len(train), dtype=bool)
    keep[forget_ids] = False
    return ForgetPartition(
        forget=train[forget_ids], retain=train[keep], forget_ids=forget_ids, targets=targets
    )
