"""p-hop influenced scope around a forget set on the user-item graph."""

import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class InfluencedScope:
    """Train edges reached from the forget set, with the hop that added each.

    Entities are node ids: users ``0..n_users-1`` then items offset by
    ``n_users``. ``degree[k]`` is the number of scope edges touching
    ``entities[k]``.
    """

    n_users: int
    edge_ids: np.ndarray
    edges: np.ndarray
    hops: np.ndarray
    entities: np.ndarray
    degree: np.ndarray

    def __len__(self):
        return len(self.edge_ids)

    @property
    def users(self):
        return self.entities[self.entities < self.n_users]

    @property
    def items(self):
        return self.entities[self.entities >= self.n_users] - self.n_users

    def degree_map(self):
        return dict(zip(self.entities.tolist(), self.degree.tolist()))

    def edge_set(self):
        return {(int(u), int(i)) for u, i in self.edges}


def direct_entities(forget, n_users):
    """Node ids of every user and item touched by the forget edges."""
    forget = np.asarray(forget, dtype=np.int64).reshape(-1, 2)
    if len(forget) == 0:
        raise ValueError("forget set is empty")
    return np.union1d(np.unique(forget[:, 0]), np.unique(forget[:, 1]) + n_users)


def _gather(indptr, edge_ids, rows):
    starts = indptr[rows]
    lens = indptr[rows + 1] - starts
    total = int(lens.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    offsets = np.repeat(starts - np.concatenate([[0], np.cumsum(lens)[:-1]]), lens)
    return edge_ids[np.arange(total) + offsets]


def _make_scope(ds, ids, hops):
    order = np.lexsort((ids, hops))
    ids, hops = ids[order], hops[order]
    edges = ds.train[ids]
    nodes = np.concatenate([edges[:, 0], edges[:, 1] + ds.n_users])
    entities, degree = np.unique(nodes, return_counts=True)
    return InfluencedScope(ds.n_users, ids, edges, hops, entities, degree)


def expand_scope(ds, forget, p):
    """Grow the scope from the forget edges by ``p`` rounds of edge adjacency.

    Each round adds every train edge that shares a user or an item with an
    edge already in the scope. Only entities first reached in the previous
    round need expanding, so each round costs time proportional to the
    edges it touches.
    """
    if p < 0:
        raise ValueError("p must be >= 0")
    n = len(ds.train)
    in_scope = np.zeros(n, dtype=bool)
    hop = np.full(n, -1, dtype=np.int64)
    frontier = np.unique(ds.train_edge_ids(forget))
    in_scope[frontier] = True
    hop[frontier] = 0
    seen_users = np.zeros(ds.n_users, dtype=bool)
    seen_items = np.zeros(ds.n_items, dtype=bool)
    ua, ia = ds.user_adjacency, ds.item_adjacency
    for k in range(1, p + 1):
        users = np.unique(ds.train[frontier, 0])
        users = users[~seen_users[users]]
        items = np.unique(ds.train[frontier, 1])
        items = items[~seen_items[items]]
        seen_users[users] = True
        seen_items[items] = True
        cand = np.concatenate([
            _gather(ua.indptr, ds.user_edge_ids, users),
            _gather(ia.indptr, ds.item_edge_ids, items),
        ])
        new = np.unique(cand[~in_scope[cand]])
        if len(new) == 0:
            break
        in_scope[new] = True
        hop[new] = k
        frontier = new
    ids = np.flatnonzero(in_scope)
    return _make_scope(ds, ids, hop[ids])


def full_scope(ds, forget):
    """Every train edge; forget edges at hop 0 and the rest at hop 1."""
    ids = np.arange(len(ds.train))
    hops = np.ones(len(ids), dtype=np.int64)
    hops[ds.train_edge_ids(forget)] = 0
    return _make_scope(ds, ids, hops)


def write_scope_csv(scope, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user", "item", "hop"])
        for (u, i), h in zip(scope.edges, scope.hops):
            writer.writerow([int(u), int(i), int(h)])
