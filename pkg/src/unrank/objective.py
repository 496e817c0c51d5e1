"""Weighted logistic losses over bilinear scores, with exact derivatives.

Every loss here is a sum of terms ``-w * ln sigmoid(x)`` where

    x = z_u . (cp * z_p - cn * z_n)

over rows of a stacked node-embedding matrix ``Z`` (users first, then
items offset by ``n_users``). A BPR triplet is one term with ``cp = cn = 1``;
binary cross-entropy splits it into a positive term (``cn = 0``) and a
negative term (``cp = 0``). Derivatives are taken with respect to ``Z``; the
caller maps them through any linear propagation.
"""

from dataclasses import dataclass

import numpy as np

CLAMP = 30.0


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True, eq=False)
class Terms:
    user: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    cp: np.ndarray
    cn: np.ndarray
    weight: np.ndarray

    def __len__(self):
        return len(self.user)


def bpr_terms(triplets, weights, n_users):
    t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    w = np.ones(len(t)) if weights is None else np.asarray(weights, dtype=float)
    ones = np.ones(len(t))
    return Terms(t[:, 0], t[:, 1] + n_users, t[:, 2] + n_users, ones, ones, w)


def bce_terms(triplets, weights, n_users):
    """Positive ``(u, i)`` labelled 1 and negative ``(u, j)`` labelled 0.

    ``-ln(1 - sigmoid(s))`` equals ``-ln sigmoid(-s)``, so the negative
    half is a term with the item on the subtracted side.
    """
    t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    w = np.ones(len(t)) if weights is None else np.asarray(weights, dtype=float)
    n = len(t)
    one, zero = np.ones(n), np.zeros(n)
    return Terms(
        user=np.concatenate([t[:, 0], t[:, 0]]),
        pos=np.concatenate([t[:, 1], t[:, 2]]) + n_users,
        neg=np.concatenate([t[:, 2], t[:, 2]]) + n_users,
        cp=np.concatenate([one, zero]),
        cn=np.concatenate([zero, one]),
        weight=np.concatenate([w, w]),
    )


def _direction(Z, terms):
    return terms.cp[:, None] * Z[terms.pos] - terms.cn[:, None] * Z[terms.neg]


def margins(Z, terms):
    return np.einsum("nd,nd->n", Z[terms.user], _direction(Z, terms))


def value(Z, terms):
    if len(terms) == 0:
        return 0.0
    x = np.clip(margins(Z, terms), -CLAMP, CLAMP)
    return float(np.sum(terms.weight * np.logaddexp(0.0, -x)))


def _derivatives(Z, terms):
    x = np.clip(margins(Z, terms), -CLAMP, CLAMP)
    s = sigmoid(x)
    first = -terms.weight * (1.0 - s)
    second = terms.weight * s * (1.0 - s)
    return first, second


def gradient(Z, terms):
    """Gradient of ``value`` with respect to every row of ``Z``."""
    G = np.zeros_like(Z)
    if len(terms) == 0:
        return G
    first, _ = _derivatives(Z, terms)
    zu = Z[terms.user]
    np.add.at(G, terms.user, first[:, None] * _direction(Z, terms))
    np.add.at(G, terms.pos, (first * terms.cp)[:, None] * zu)
    np.add.at(G, terms.neg, -(first * terms.cn)[:, None] * zu)
    return G


def hvp(Z, terms, V, derivs=None):
    """Hessian of ``value`` (w.r.t. ``Z``) applied to a direction ``V``.

    ``derivs`` lets repeated products reuse the per-term first and second
    derivatives, which depend only on ``Z``.
    """
    out = np.zeros_like(V)
    if len(terms) == 0:
        return out
    first, second = derivs if derivs is not None else _derivatives(Z, terms)
    zu = Z[terms.user]
    d = _direction(Z, terms)
    vu = V[terms.user]
    vd = terms.cp[:, None] * V[terms.pos] - terms.cn[:, None] * V[terms.neg]
    c = second * (np.einsum("nd,nd->n", d, vu) + np.einsum("nd,nd->n", zu, vd))
    common = c[:, None] * zu + first[:, None] * vu
    np.add.at(out, terms.user, c[:, None] * d + first[:, None] * vd)
    np.add.at(out, terms.pos, terms.cp[:, None] * common)
    np.add.at(out, terms.neg, -terms.cn[:, None] * common)
    return out


def derivatives(Z, terms):
    return _derivatives(Z, terms)
