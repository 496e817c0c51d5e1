"""Per-entity influence inside a scope: degree and cosine affinity fused by softmax.

Maps are numpy arrays aligned with ``scope.entities``.
"""

import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class InfluenceWeights:
    entities: np.ndarray
    weights: np.ndarray
    alpha: float
    raw_structural: np.ndarray
    raw_semantic: np.ndarray
    raw: np.ndarray

    def mapping(self):
        return dict(zip(self.entities.tolist(), self.weights.tolist()))

    def node_array(self, n_nodes):
        """Weights scattered into a node-indexed array (zero outside the scope)."""
        out = np.zeros(n_nodes)
        out[self.entities] = self.weights
        return out


def structural_influence(scope):
    """Degree of each entity within the scope's edges."""
    if len(scope) == 0:
        raise ValueError("scope is empty")
    return scope.degree.astype(float)


def _unit_rows(X):
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)


def semantic_influence(scope, params, forget_entities):
    """Summed cosine similarity between each scope entity and the forget entities.

    Uses base (unpropagated) embedding rows; zero vectors have cosine 0.
    """
    table = params.stacked()
    anchor = _unit_rows(table[np.asarray(forget_entities)]).sum(axis=0)
    return _unit_rows(table[scope.entities]) @ anchor


def minmax(x):
    """Scale to [0, 1]; a constant input maps to zeros."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return x
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def unify(w_st, w_se, alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * minmax(w_st) + (1.0 - alpha) * minmax(w_se)


def softmax(raw):
    raw = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw scores must be finite")
    e = np.exp(raw - raw.max())
    return e / e.sum()


def softmax_weights(raw, entities=None, alpha=float("nan"), w_st=None, w_se=None):
    raw = np.asarray(raw, dtype=float)
    entities = np.arange(len(raw)) if entities is None else np.asarray(entities)
    empty = np.full(len(raw), np.nan)
    return InfluenceWeights(
        entities=entities,
        weights=softmax(raw),
        alpha=alpha,
        raw_structural=empty if w_st is None else np.asarray(w_st, dtype=float),
        raw_semantic=empty if w_se is None else np.asarray(w_se, dtype=float),
        raw=raw,
    )


def quantify(scope, params, forget_entities, alpha=0.5):
    w_st = structural_influence(scope)
    w_se = semantic_influence(scope, params, forget_entities)
    raw = unify(w_st, w_se, alpha)
    return softmax_weights(raw, scope.entities, alpha, w_st, w_se)


def uniform(scope, alpha=float("nan")):
    n = len(scope.entities)
    zeros = np.zeros(n)
    return InfluenceWeights(scope.entities, np.full(n, 1.0 / n), alpha, zeros, zeros, zeros)


def entity_hops(scope):
    """Smallest hop among each entity's scope edges."""
    nodes = np.concatenate([scope.edges[:, 0], scope.edges[:, 1] + scope.n_users])
    hops = np.concatenate([scope.hops, scope.hops])
    best = np.full(nodes.max() + 1, np.iinfo(np.int64).max)
    np.minimum.at(best, nodes, hops)
    return best[scope.entities]


def write_influence_csv(scope, weights, path):
    hops = entity_hops(scope)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["entity", "kind", "index", "hop", "w_st", "w_se", "w_raw", "w"])
        for k, node in enumerate(weights.entities):
            is_user = node < scope.n_users
            writer.writerow([
                int(node), "user" if is_user else "item",
                int(node if is_user else node - scope.n_users), int(hops[k]),
                weights.raw_structural[k], weights.raw_semantic[k], weights.raw[k], weights.weights[k],
            ])
