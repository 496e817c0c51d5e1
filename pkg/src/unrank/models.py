"""Embedding recommenders: MF and LightGCN-style propagation, BPR training,
scoring, ranking and checkpoints."""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import objective
from ._random import stream

logger = logging.getLogger(__name__)

MF = "mf"
LIGHTGCN = "lightgcn"
BACKBONES = (MF, LIGHTGCN)
MAGIC = "L2UR1"


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(eq=False)
class ModelParams:
    user_emb: np.ndarray
    item_emb: np.ndarray
    backbone: str = MF
    n_layers: int = 0

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        self.user_emb = np.asarray(self.user_emb, dtype=np.float64)
        self.item_emb = np.asarray(self.item_emb, dtype=np.float64)
        if self.user_emb.ndim != 2 or self.item_emb.ndim != 2:
            raise ValueError("embedding tables must be 2-D")
        if self.user_emb.shape[1] != self.item_emb.shape[1] or self.user_emb.shape[1] < 1:
            raise ValueError("user and item tables need the same dim >= 1")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")

    @property
    def dim(self):
        return self.user_emb.shape[1]

    @property
    def n_users(self):
        return self.user_emb.shape[0]

    @property
    def n_items(self):
        return self.item_emb.shape[0]

    def stacked(self):
        return np.vstack([self.user_emb, self.item_emb])

    def with_stacked(self, table):
        return ModelParams(
            table[: self.n_users].copy(), table[self.n_users:].copy(), self.backbone, self.n_layers
        )

    def copy(self):
        return ModelParams(self.user_emb.copy(), self.item_emb.copy(), self.backbone, self.n_layers)


def _as_f32_values(a):
    return a.astype(np.float32).astype(np.float64)


def init_params(n_users, n_items, dim=64, seed=0, backbone=MF, n_layers=0):
    """Draw both tables i.i.d. from N(0, (0.1 / sqrt(dim))^2).

    Values are rounded to float32 so checkpoints round-trip exactly.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = stream(seed, "init")
    scale = 0.1 / np.sqrt(dim)
    table = _as_f32_values(rng.normal(0.0, scale, size=(n_users + n_items, dim)))
    return ModelParams(table[:n_users], table[n_users:], backbone, n_layers)


class PropagationOperator:
    """Layer-averaged propagation ``(1/(K+1)) sum_k A_hat^k`` over user+item nodes.

    ``A_hat = D^-1/2 A D^-1/2`` is built from the given edges; rows and
    columns of isolated nodes are zero. The operator is symmetric, so it is
    also its own transpose in the chain rule.
    """

    def __init__(self, edges, n_users, n_items, n_layers=1):
        if n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        n = n_users + n_items
        rows = np.concatenate([edges[:, 0], edges[:, 1] + n_users])
        cols = np.concatenate([edges[:, 1] + n_users, edges[:, 0]])
        adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        deg = np.asarray(adj.sum(axis=1)).ravel()
        inv_sqrt = np.zeros(n)
        nz = deg > 0
        inv_sqrt[nz] = deg[nz] ** -0.5
        d = sp.diags(inv_sqrt)
        self.norm_adj = (d @ adj @ d).tocsr()
        self.n_users = n_users
        self.n_items = n_items
        self.n_layers = n_layers

    @property
    def n_nodes(self):
        return self.n_users + self.n_items

    def apply(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] != self.n_nodes:
            raise ValueError(f"expected {self.n_nodes} rows, got {X.shape[0]}")
        out = X.copy()
        cur = X
        for _ in range(self.n_layers):
            cur = self.norm_adj @ cur
            out += cur
        return out / (self.n_layers + 1)

    def dense(self):
        return self.apply(np.eye(self.n_nodes))


def make_propagation(ds, n_layers=1, edges=None):
    return PropagationOperator(ds.train if edges is None else edges, ds.n_users, ds.n_items, n_layers)


def _check_prop(params, prop):
    if params.backbone == MF:
        return None
    if prop is None:
        raise ValueError("LightGCN parameters need a propagation operator")
    if prop.n_users != params.n_users or prop.n_items != params.n_items:
        raise ValueError(
            f"propagation is over {prop.n_users}x{prop.n_items} nodes, "
            f"params are {params.n_users}x{params.n_items}"
        )
    return prop


def propagate(params, prop, table):
    """Map a stacked base table to effective embeddings."""
    prop = _check_prop(params, prop)
    return table if prop is None else prop.apply(table)


def effective_embeddings(params, prop=None):
    Z = propagate(params, prop, params.stacked())
    return Z[: params.n_users], Z[params.n_users:]


def score(params, prop, u, i):
    if not (0 <= u < params.n_users and 0 <= i < params.n_items):
        raise IndexError(f"pair ({u}, {i}) out of range")
    users, items = effective_embeddings(params, prop)
    return float(users[u] @ items[i])


def score_pairs(params, prop, pairs, effective=None):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    users, items = effective if effective is not None else effective_embeddings(params, prop)
    return np.einsum("nd,nd->n", users[pairs[:, 0]], items[pairs[:, 1]])


def score_users(params, prop, users, effective=None):
    U, I = effective if effective is not None else effective_embeddings(params, prop)
    return U[np.asarray(users)] @ I.T


def sample_negatives(ds, users, m, rng):
    """Draw ``m`` items per user uniformly from that user's non-train items.

    Returns ``(negatives, valid)``; rows for users who have interacted with
    every item are marked invalid and left as -1.
    """
    users = np.asarray(users, dtype=np.int64)
    deg = np.diff(ds.user_adjacency.indptr)[users]
    valid = deg < ds.n_items
    negs = np.full((len(users), m), -1, dtype=np.int64)
    if not valid.any() or m == 0:
        return negs, valid
    vu = np.repeat(users[valid], m)
    cand = rng.integers(0, ds.n_items, size=len(vu))
    bad = ds.is_train_edge(vu, cand)
    while bad.any():
        idx = np.flatnonzero(bad)
        cand[idx] = rng.integers(0, ds.n_items, size=len(idx))
        bad[idx] = ds.is_train_edge(vu[idx], cand[idx])
    negs[valid] = cand.reshape(-1, m)
    return negs, valid


def sample_triplets(ds, edges, m=1, seed=0, rng=None):
    """One ``(u, i, j)`` row per edge and negative, in edge order.

    Edges whose user has no negative candidates are skipped with a warning.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rng = stream(seed, "negatives") if rng is None else rng
    negs, valid = sample_negatives(ds, edges[:, 0], m, rng)
    if not valid.all():
        logger.warning("skipped %d edges whose user has no negative items", int((~valid).sum()))
    kept = edges[valid]
    return np.column_stack([np.repeat(kept, m, axis=0), negs[valid].ravel()])


def triplet_weights(triplets, entity_weights, n_users):
    """Per-triplet weight ``(w(u) + w(i)) / 2`` from a node-indexed weight array."""
    t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    w = np.asarray(entity_weights, dtype=float)
    return 0.5 * (w[t[:, 0]] + w[t[:, 1] + n_users])


def bpr_loss(params, prop, triplets, weights=None):
    """``sum_t -w_t ln sigmoid(y_ui - y_uj)`` with the margin clamped to [-30, 30]."""
    terms = objective.bpr_terms(triplets, weights, params.n_users)
    if len(terms) == 0:
        return 0.0
    if weights is not None and np.any(terms.weight < 0):
        raise ValueError("triplet weights must be non-negative")
    Z = propagate(params, prop, params.stacked())
    return objective.value(Z, terms)


def loss_gradient(params, prop, terms):
    """Gradient of a term sum with respect to the stacked base table."""
    Z = propagate(params, prop, params.stacked())
    G = objective.gradient(Z, terms)
    return propagate(params, prop, G)


def bpr_gradient(params, prop, triplets, weights=None):
    G = loss_gradient(params, prop, objective.bpr_terms(triplets, weights, params.n_users))
    return G[: params.n_users], G[params.n_users:]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 1024
    epochs: int = 20
    weight_decay: float = 0.0
    seed: int = 0
    negatives: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def train(ds, config, backbone=MF, n_layers=1, dim=64, edges=None, callback=None):
    """Fit embeddings with minibatch BPR and AdamW.

    ``edges`` defaults to ``ds.train``. Negatives are resampled every epoch
    from the ``negatives`` stream and exclude all of ``ds.train``, so a
    retrain should pass ``ds.with_train(retain)`` rather than ``edges``.
    ``callback(epoch, batch_triplets)`` is invoked per batch.

    Returns ``(params, loss_trace)`` with the mean per-triplet loss of every
    epoch.
    """
    if backbone not in BACKBONES:
        raise ValueError(f"backbone must be one of {BACKBONES}")
    layers = n_layers if backbone == LIGHTGCN else 0
    edges = ds.train if edges is None else np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    params = init_params(ds.n_users, ds.n_items, dim, config.seed, backbone, layers)
    prop = make_propagation(ds, layers, edges) if backbone == LIGHTGCN else None

    E = params.stacked()
    m1 = np.zeros_like(E)
    m2 = np.zeros_like(E)
    step = 0
    trace = []
    for epoch in range(config.epochs):
        order = stream(config.seed, "shuffle", epoch).permutation(len(edges))
        triplets = sample_triplets(
            ds, edges[order], config.negatives, rng=stream(config.seed, "negatives", epoch)
        )
        total = 0.0
        for start in range(0, len(triplets), config.batch_size):
            batch = triplets[start:start + config.batch_size]
            if callback is not None:
                callback(epoch, batch)
            terms = objective.bpr_terms(batch, None, ds.n_users)
            Z = E if prop is None else prop.apply(E)
            total += objective.value(Z, terms)
            G = objective.gradient(Z, terms) / len(batch)
            if prop is not None:
                G = prop.apply(G)
            step += 1
            m1 = config.beta1 * m1 + (1 - config.beta1) * G
            m2 = config.beta2 * m2 + (1 - config.beta2) * G * G
            mhat = m1 / (1 - config.beta1 ** step)
            vhat = m2 / (1 - config.beta2 ** step)
            E = E * (1 - config.lr * config.weight_decay)
            E = E - config.lr * mhat / (np.sqrt(vhat) + config.eps)
        mean = total / max(len(triplets), 1)
        if not np.isfinite(mean) or not np.all(np.isfinite(E)):
            raise TrainingDivergedError(f"non-finite loss or parameters at epoch {epoch}; lower lr")
        trace.append(mean)
        logger.debug("epoch %d loss %.6f", epoch, mean)
    return params.with_stacked(_as_f32_values(E)), trace


def rank(params, prop, u, exclude_train=False, ds=None):
    """Items by descending score, ties by ascending index.

    With ``exclude_train`` the user's train positives in ``ds`` are dropped.
    """
    scores = score_users(params, prop, [u])[0]
    order = np.argsort(-scores, kind="stable")
    if exclude_train:
        if ds is None:
            raise ValueError("exclude_train needs the dataset")
        order = order[~np.isin(order, ds.train_items(u))]
    return order


def save_checkpoint(params, path):
    path = Path(path)
    header = (
        f"{MAGIC} {params.backbone} {params.n_layers} "
        f"{params.n_users} {params.n_items} {params.dim}\n"
    )
    body = params.stacked().astype("<f4").tobytes()
    path.write_bytes(header.encode("ascii") + body)
    return path


def load_checkpoint(path, n_users=None, n_items=None, dim=None):
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError("header: missing newline")
    fields = raw[:nl].decode("ascii", errors="replace").split(" ")
    if len(fields) != 6:
        raise CheckpointError(f"header: expected 6 fields, got {len(fields)}")
    if fields[0] != MAGIC:
        raise CheckpointError(f"magic: expected {MAGIC!r}, got {fields[0]!r}")
    backbone = fields[1]
    if backbone not in BACKBONES:
        raise CheckpointError(f"backbone: unknown {backbone!r}")
    values = {}
    for name, text in zip(("n_layers", "n_users", "n_items", "dim"), fields[2:]):
        try:
            values[name] = int(text)
        except ValueError:
            raise CheckpointError(f"{name}: not an integer: {text!r}") from None
        if values[name] < 0:
            raise CheckpointError(f"{name}: negative value {text}")
    for name, want in (("n_users", n_users), ("n_items", n_items), ("dim", dim)):
        if want is not None and values[name] != want:
            raise CheckpointError(f"{name} mismatch: checkpoint has {values[name]}, expected {want}")
    n = values["n_users"] + values["n_items"]
    need = n * values["dim"] * 4
    body = raw[nl + 1:]
    if len(body) != need:
        raise CheckpointError(f"body: expected {need} bytes, got {len(body)} (truncated or padded)")
    table = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(n, values["dim"])
    nu = values["n_users"]
    return ModelParams(table[:nu].copy(), table[nu:].copy(), backbone, values["n_layers"])


class BPRRecommender(BaseEstimator):
    """Scikit-learn style wrapper around :func:`train`.

    ``fit`` takes an :class:`~unrank.data.InteractionDataset` (optionally a
    subset of its train edges); ``predict`` scores an ``(n, 2)`` array of
    ``(user, item)`` pairs.
    """

    def __init__(self, backbone=MF, n_layers=1, dim=64, lr=1e-3, epochs=20,
                 batch_size=1024, weight_decay=0.0, negatives=1, seed=0):
        self.backbone = backbone
        self.n_layers = n_layers
        self.dim = dim
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.negatives = negatives
        self.seed = seed

    def train_config(self):
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
            weight_decay=self.weight_decay, seed=self.seed, negatives=self.negatives,
        )

    def fit(self, dataset, edges=None, callback=None):
        self.params_, self.loss_trace_ = train(
            dataset, self.train_config(), self.backbone, self.n_layers, self.dim, edges, callback
        )
        self.propagation_ = (
            make_propagation(dataset, self.n_layers, edges) if self.backbone == LIGHTGCN else None
        )
        self.dataset_ = dataset
        return self

    @classmethod
    def from_params(cls, params, dataset, propagation=None, **kwargs):
        est = cls(backbone=params.backbone, n_layers=params.n_layers, dim=params.dim, **kwargs)
        est.params_ = params
        est.loss_trace_ = []
        if params.backbone == LIGHTGCN and propagation is None:
            propagation = make_propagation(dataset, params.n_layers)
        est.propagation_ = propagation
        est.dataset_ = dataset
        return est

    def predict(self, pairs):
        check_is_fitted(self, "params_")
        pairs = check_array(pairs, dtype=np.int64)
        if pairs.shape[1] != 2:
            raise ValueError("pairs must have two columns (user, item)")
        return score_pairs(self.params_, self.propagation_, pairs)

    def rank(self, user, exclude_train=True):
        check_is_fitted(self, "params_")
        return rank(self.params_, self.propagation_, user, exclude_train, self.dataset_)

    def recommend(self, user, k=10):
        return self.rank(user)[:k]
