"""Utility (NDCG/Recall), unranking rate, membership-inference FPR and speedup."""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.model_selection import train_test_split
from sklearn.neural_network import MLPClassifier
from sklearn.preprocessing import StandardScaler

from ._random import stream
from .models import effective_embeddings

DEFAULT_KS = (5, 10, 20)
MIN_MIA_PAIRS = 20


@dataclass
class RankingMetrics:
    ndcg: dict
    recall: dict
    n_users: int

    def as_dict(self):
        return {"ndcg": dict(self.ndcg), "recall": dict(self.recall), "n_users": self.n_users}


@dataclass(eq=False)
class URRReport:
    urr: float
    worsened_fraction: float
    pairs: np.ndarray
    before: np.ndarray
    after: np.ndarray

    def recompute(self):
        return unranking_rate(self.before, self.after)[0]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["user", "item", "rank_before", "rank_after"])
            for (u, i), r, r2 in zip(self.pairs, self.before, self.after):
                writer.writerow([int(u), int(i), int(r), int(r2)])


@dataclass
class MIAReport:
    fpr: float
    accuracy: float
    n_members: int
    n_nonmembers: int
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        return {"fpr": self.fpr, "accuracy": self.accuracy,
                "n_members": self.n_members, "n_nonmembers": self.n_nonmembers}


def _user_groups(users, batch=256):
    uniq = np.unique(users)
    for start in range(0, len(uniq), batch):
        yield uniq[start:start + batch]


def ranking_metrics(params, prop, ds, ks=DEFAULT_KS, split="test", exclude=None):
    """Mean NDCG@k and Recall@k over users with held-out items.

    Each user's items in ``exclude`` (default: train edges) are removed
    before ranking; ties go to the lower item index. Recall divides hits by
    ``min(k, n_relevant)``.
    """
    held = getattr(ds, split) if isinstance(split, str) else np.asarray(split).reshape(-1, 2)
    if len(held) == 0:
        raise ValueError(f"{split} split is empty")
    exclude = ds.train if exclude is None else np.asarray(exclude, dtype=np.int64).reshape(-1, 2)
    ks = sorted(int(k) for k in ks)
    kmax = max(ks)
    U, I = effective_embeddings(params, prop)
    discounts = 1.0 / np.log2(np.arange(2, kmax + 2))
    ideal = np.cumsum(discounts)
    ndcg = {k: 0.0 for k in ks}
    recall = {k: 0.0 for k in ks}
    n_eval = 0
    for users in _user_groups(held[:, 0]):
        scores = U[users] @ I.T
        row = {u: r for r, u in enumerate(users)}
        ex = exclude[np.isin(exclude[:, 0], users)]
        scores[[row[u] for u in ex[:, 0]], ex[:, 1]] = -np.inf
        rel = np.zeros(scores.shape, dtype=bool)
        h = held[np.isin(held[:, 0], users)]
        rel[[row[u] for u in h[:, 0]], h[:, 1]] = True
        top = np.argsort(-scores, axis=1, kind="stable")[:, :kmax]
        hits = np.take_along_axis(rel, top, axis=1)
        n_rel = rel.sum(axis=1)
        for k in ks:
            width = min(k, hits.shape[1])  # k may exceed the number of items
            dcg = hits[:, :width] @ discounts[:width]
            idcg = ideal[np.minimum(k, n_rel) - 1]
            ndcg[k] += float(np.sum(dcg / idcg))
            recall[k] += float(np.sum(hits[:, :width].sum(axis=1) / np.minimum(k, n_rel)))
        n_eval += len(users)
    return RankingMetrics(
        ndcg={k: v / n_eval for k, v in ndcg.items()},
        recall={k: v / n_eval for k, v in recall.items()},
        n_users=n_eval,
    )


def pair_ranks(params, prop, pairs, effective=None):
    """0-based rank of each item in its user's full ranking (nothing excluded)."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    U, I = effective if effective is not None else effective_embeddings(params, prop)
    out = np.empty(len(pairs), dtype=np.int64)
    idx = np.arange(I.shape[0])
    for start in range(0, len(pairs), 1024):
        p = pairs[start:start + 1024]
        scores = U[p[:, 0]] @ I.T
        own = scores[np.arange(len(p)), p[:, 1]][:, None]
        ahead = (scores > own) | ((scores == own) & (idx[None, :] < p[:, 1][:, None]))
        out[start:start + 1024] = ahead.sum(axis=1)
    return out


def unranking_rate(before, after):
    """``mean((r' - r) / (r + 1)) * P`` where ``P`` is the share of worsened pairs."""
    before = np.asarray(before, dtype=float)
    after = np.asarray(after, dtype=float)
    if len(before) == 0:
        raise ValueError("no pairs")
    worsened = float(np.mean(after > before))
    return float(np.mean((after - before) / (before + 1.0)) * worsened), worsened


def urr(orig_params, new_params, prop, forget):
    forget = np.asarray(forget, dtype=np.int64).reshape(-1, 2)
    if len(forget) == 0:
        raise ValueError("forget set is empty")
    before = pair_ranks(orig_params, prop, forget)
    after = pair_ranks(new_params, prop, forget)
    value, worsened = unranking_rate(before, after)
    return URRReport(value, worsened, forget, before, after)


def sample_nonmembers(ds, n, rng):
    """``n`` distinct random (user, item) pairs that are not train edges."""
    out = np.empty((0, 2), dtype=np.int64)
    capacity = ds.n_users * ds.n_items - len(ds.train)
    if n > capacity:
        raise ValueError("not enough non-member pairs")
    while len(out) < n:
        cand = np.column_stack([
            rng.integers(0, ds.n_users, size=2 * n),
            rng.integers(0, ds.n_items, size=2 * n),
        ])
        cand = cand[~ds.is_train_edge(cand[:, 0], cand[:, 1])]
        out = np.concatenate([out, cand])
        _, first = np.unique(out[:, 0] * ds.n_items + out[:, 1], return_index=True)
        out = out[np.sort(first)]
    return out[:n]


def attack(features, labels, seed=0, test_size=0.3):
    """Train the MLP attacker on a stratified split; report held-out FPR/accuracy."""
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    if len(np.unique(y)) < 2:
        raise ValueError("attack data has a single class")
    X_tr, X_te, y_tr, y_te = train_test_split(
        X, y, test_size=test_size, stratify=y, random_state=seed
    )
    scaler = StandardScaler().fit(X_tr)
    clf = MLPClassifier(
        hidden_layer_sizes=(32, 16, 8), activation="relu", alpha=1e-3,
        learning_rate_init=1e-3, max_iter=300, random_state=seed,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        clf.fit(scaler.transform(X_tr), y_tr)
    pred = clf.predict(scaler.transform(X_te))
    negatives = y_te == 0
    fpr = float(np.mean(pred[negatives] == 1)) if negatives.any() else 0.0
    return MIAReport(
        fpr=fpr,
        accuracy=float(np.mean(pred == y_te)),
        n_members=int(np.sum(y == 1)),
        n_nonmembers=int(np.sum(y == 0)),
    )


def mia_fpr(orig_params, new_params, prop, ds, forget, seed=0):
    """Black-box membership inference against the unlearned model.

    Members are the forget pairs; non-members are random non-train pairs.
    Features per pair: original score, unlearned score and their difference.
    """
    forget = np.asarray(forget, dtype=np.int64).reshape(-1, 2)
    if len(forget) < MIN_MIA_PAIRS:
        raise ValueError(f"need at least {MIN_MIA_PAIRS} forget pairs for the attack, got {len(forget)}")
    rng = stream(seed, "mia")
    nonmembers = sample_nonmembers(ds, len(forget), rng)
    pairs = np.concatenate([forget, nonmembers])
    labels = np.concatenate([np.ones(len(forget), int), np.zeros(len(nonmembers), int)])
    U0, I0 = effective_embeddings(orig_params, prop)
    U1, I1 = effective_embeddings(new_params, prop)
    s0 = np.einsum("nd,nd->n", U0[pairs[:, 0]], I0[pairs[:, 1]])
    s1 = np.einsum("nd,nd->n", U1[pairs[:, 0]], I1[pairs[:, 1]])
    return attack(np.column_stack([s0, s1, s0 - s1]), labels, seed)


def speedup(retrain_seconds, unlearn_seconds):
    if unlearn_seconds <= 0:
        return float("inf")
    return retrain_seconds / unlearn_seconds
