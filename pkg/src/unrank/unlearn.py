"""Influence-weighted unranking update restricted to a scope of entities.

Pipeline: scope -> entity weights -> triplets -> forget gradient ``g`` ->
CG solve of ``(H + damping I) step = -g`` -> ``theta + sign * step / eta`` on
the scoped rows only.
"""

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import objective
from ._random import stream
from .cg import CGConfig, solve
from .influence import quantify, uniform
from .models import LIGHTGCN, BPRRecommender, propagate, sample_negatives
from .scoping import direct_entities, expand_scope, full_scope

logger = logging.getLogger(__name__)

FULL = "full"
NO_SCOPING = "no_scoping"
UNIFORM_WEIGHTS = "uniform_weights"
BCE_LOSS = "bce_loss"
VARIANTS = (FULL, NO_SCOPING, UNIFORM_WEIGHTS, BCE_LOSS)

PAPER = "paper"
FLIPPED = "flipped"
SIGNS = {PAPER: 1.0, FLIPPED: -1.0}


class UnlearnError(RuntimeError):
    pass


@dataclass
class UnlearnConfig:
    """``p=None`` picks 1 hop for LightGCN and 0 for MF.

    ``update_sign="paper"`` applies ``theta + step / eta`` with
    ``step = -(H + damping I)^-1 g``, which descends the forget loss and so
    promotes forget pairs; ``"flipped"`` applies the opposite direction and
    is the default because it is the one that demotes them.
    """

    p: int | None = None
    alpha: float = 0.5
    eta: float = 0.1
    damping: float = 0.01
    negatives: int = 1
    variant: str = FULL
    update_sign: str = FLIPPED
    seed: int = 0
    cg: CGConfig = field(default_factory=CGConfig)

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.p is not None and self.p < 0:
            raise ValueError("p must be >= 0")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.update_sign not in SIGNS:
            raise ValueError(f"update_sign must be one of {tuple(SIGNS)}")

    def hops(self, backbone):
        if self.p is not None:
            return self.p
        return 1 if backbone == LIGHTGCN else 0

    def as_dict(self):
        out = asdict(self)
        out["cg"] = {"tol": self.cg.tol, "max_iter": self.cg.max_iter, "restart": self.cg.restart}
        return out


@dataclass(eq=False)
class ScopedParameterVector:
    """Embedding rows of ``entities`` (node ids, users then items) flattened."""

    entities: np.ndarray
    values: np.ndarray
    dim: int

    @classmethod
    def gather(cls, table, entities):
        entities = np.asarray(entities, dtype=np.int64)
        return cls(entities, table[entities].ravel().copy(), table.shape[1])

    @classmethod
    def zeros(cls, entities, dim):
        return cls(np.asarray(entities, dtype=np.int64), np.zeros(len(entities) * dim), dim)

    def __len__(self):
        return len(self.values)

    def rows(self):
        return self.values.reshape(len(self.entities), self.dim)

    def scatter(self, n_nodes):
        """Dense node table with these rows and zeros elsewhere."""
        out = np.zeros((n_nodes, self.dim))
        out[self.entities] = self.rows()
        return out

    def apply_to(self, params):
        table = params.stacked()
        table[self.entities] += self.rows()
        return params.with_stacked(table)

    def scaled(self, factor):
        return ScopedParameterVector(self.entities, factor * self.values, self.dim)

    def norm(self):
        return float(np.linalg.norm(self.values))


@dataclass
class UnlearnResult:
    delta: ScopedParameterVector
    step: ScopedParameterVector
    cg_report: object
    scope_size: int
    n_entities: int
    n_forget: int
    n_forget_triplets: int
    n_retained_triplets: int
    timing: dict
    config: dict

    def as_dict(self):
        return {
            "scope_size": self.scope_size,
            "n_entities": self.n_entities,
            "n_params": len(self.delta),
            "n_forget": self.n_forget,
            "n_forget_triplets": self.n_forget_triplets,
            "n_retained_triplets": self.n_retained_triplets,
            "update_norm": self.delta.norm(),
            "cg": self.cg_report.as_dict(),
            "timing": {k: round(v, 6) for k, v in self.timing.items()},
            "config": self.config,
        }


def build_scope_triplets(ds, scope, forget, m=1, seed=0):
    """Sample ``m`` negatives per scope edge once, then split by forget membership.

    Returns ``(forget_triplets, retained_triplets)``.
    """
    forget_ids = ds.train_edge_ids(forget)
    negs, valid = sample_negatives(ds, scope.edges[:, 0], m, stream(seed, "unlearn-negatives"))
    if not valid.all():
        logger.warning("skipped %d scope edges whose user has no negative items", int((~valid).sum()))
    in_forget = np.isin(scope.edge_ids, forget_ids)
    trip = np.column_stack([np.repeat(scope.edges, m, axis=0), negs.ravel()])
    keep = np.repeat(valid, m)
    is_forget = np.repeat(in_forget, m)
    return trip[keep & is_forget], trip[keep & ~is_forget]


def _terms(triplets, weights, params, loss):
    n_users = params.n_users
    t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    w_nodes = weights.node_array(n_users + params.n_items)
    w_t = 0.5 * (w_nodes[t[:, 0]] + w_nodes[t[:, 1] + n_users])
    build = objective.bce_terms if loss == "bce" else objective.bpr_terms
    return build(t, w_t, n_users)


def forget_gradient(params, prop, forget_triplets, weights, loss="bpr"):
    """Gradient of the weighted loss over forget triplets, on scoped rows.

    By linearity this equals the gradient over the whole scope minus the
    gradient over the retained part when both share the same negatives.
    """
    entities = weights.entities
    terms = _terms(forget_triplets, weights, params, loss)
    if len(terms) == 0:
        return ScopedParameterVector.zeros(entities, params.dim)
    Z = propagate(params, prop, params.stacked())
    G = propagate(params, prop, objective.gradient(Z, terms))
    return ScopedParameterVector.gather(G, entities)


def hessian_operator(params, prop, retained_triplets, weights, damping, loss="bpr"):
    """LinearOperator for ``(H + damping I)`` over the scoped parameter vector.

    ``H`` is the exact Hessian of the weighted loss over the retained
    triplets. For LightGCN it is the effective-embedding Hessian pulled back
    through the propagation map; rows outside the scope stay fixed.
    """
    entities = weights.entities
    n = len(entities) * params.dim
    terms = _terms(retained_triplets, weights, params, loss)
    if len(terms) == 0:
        return LinearOperator((n, n), matvec=lambda v: damping * np.asarray(v).ravel(), dtype=np.float64)
    Z = propagate(params, prop, params.stacked())
    derivs = objective.derivatives(Z, terms)
    n_nodes = params.n_users + params.n_items
    shape = (len(entities), params.dim)

    def matvec(v):
        v = np.asarray(v, dtype=np.float64).ravel()
        V = np.zeros((n_nodes, params.dim))
        V[entities] = v.reshape(shape)
        V = propagate(params, prop, V)
        HV = propagate(params, prop, objective.hvp(Z, terms, V, derivs))
        return HV[entities].ravel() + damping * v

    return LinearOperator((n, n), matvec=matvec, rmatvec=matvec, dtype=np.float64)


def dense_matrix(op):
    n = op.shape[0]
    return np.column_stack([op.matvec(e) for e in np.eye(n)])


def unlearn(params, ds, forget, config=None, prop=None):
    """Apply the unranking update for ``forget`` and return ``(new_params, result)``.

    ``params`` is never modified. Raises :class:`UnlearnError` on an empty
    forget set or a non-finite update, and :class:`~unrank.cg.CGBreakdown`
    when ``H + damping I`` is not positive definite.
    """
    config = config or UnlearnConfig()
    forget = np.asarray(forget, dtype=np.int64).reshape(-1, 2)
    if len(forget) == 0:
        raise UnlearnError("forget set is empty")
    if params.backbone == LIGHTGCN and prop is None:
        raise ValueError("LightGCN parameters need a propagation operator")
    loss = "bce" if config.variant == BCE_LOSS else "bpr"
    timing = {}
    t_start = time.perf_counter()

    t = time.perf_counter()
    if config.variant == NO_SCOPING:
        scope = full_scope(ds, forget)
    else:
        scope = expand_scope(ds, forget, config.hops(params.backbone))
    timing["scope"] = time.perf_counter() - t

    t = time.perf_counter()
    if config.variant == UNIFORM_WEIGHTS:
        weights = uniform(scope, config.alpha)
    else:
        weights = quantify(scope, params, direct_entities(forget, ds.n_users), config.alpha)
    timing["influence"] = time.perf_counter() - t

    t = time.perf_counter()
    forget_t, retained_t = build_scope_triplets(ds, scope, forget, config.negatives, config.seed)
    g = forget_gradient(params, prop, forget_t, weights, loss)
    H = hessian_operator(params, prop, retained_t, weights, config.damping, loss)
    timing["gradient"] = time.perf_counter() - t

    t = time.perf_counter()
    x, report = solve(H, -g.values, config.cg)
    timing["cg"] = time.perf_counter() - t

    t = time.perf_counter()
    step = ScopedParameterVector(g.entities, x, params.dim)
    delta = step.scaled(SIGNS[config.update_sign] / config.eta)
    if not np.all(np.isfinite(delta.values)):
        raise UnlearnError("update has non-finite entries; parameters left unchanged")
    new_params = delta.apply_to(params)
    timing["apply"] = time.perf_counter() - t
    timing["total"] = time.perf_counter() - t_start

    result = UnlearnResult(
        delta=delta,
        step=step,
        cg_report=report,
        scope_size=len(scope),
        n_entities=len(scope.entities),
        n_forget=len(forget),
        n_forget_triplets=len(forget_t),
        n_retained_triplets=len(retained_t),
        timing=timing,
        config=config.as_dict() | {"backbone": params.backbone, "p_effective": config.hops(params.backbone)},
    )
    return new_params, result


def predicted_score_change(params, prop, delta, pairs):
    """First-order score change ``grad s(u, i) . delta`` for each pair.

    ``delta`` is the applied update (sign and ``1/eta`` included).
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    n_nodes = params.n_users + params.n_items
    Z = propagate(params, prop, params.stacked())
    dZ = propagate(params, prop, delta.scatter(n_nodes))
    u = pairs[:, 0]
    i = pairs[:, 1] + params.n_users
    return np.einsum("nd,nd->n", Z[i], dZ[u]) + np.einsum("nd,nd->n", Z[u], dZ[i])


class L2UnRank(BaseEstimator):
    """Estimator wrapper: ``fit(model, forget)`` unlearns ``forget`` from a fitted
    :class:`~unrank.models.BPRRecommender`.

    After fitting, ``unlearned_`` is a recommender with the updated
    parameters and ``result_`` holds the diagnostics.
    """

    def __init__(self, p=None, alpha=0.5, eta=0.1, damping=0.01, negatives=1,
                 variant=FULL, update_sign=FLIPPED, cg_tol=1e-6, cg_max_iter=None, seed=0):
        self.p = p
        self.alpha = alpha
        self.eta = eta
        self.damping = damping
        self.negatives = negatives
        self.variant = variant
        self.update_sign = update_sign
        self.cg_tol = cg_tol
        self.cg_max_iter = cg_max_iter
        self.seed = seed

    def unlearn_config(self):
        return UnlearnConfig(
            p=self.p, alpha=self.alpha, eta=self.eta, damping=self.damping,
            negatives=self.negatives, variant=self.variant, update_sign=self.update_sign,
            seed=self.seed, cg=CGConfig(tol=self.cg_tol, max_iter=self.cg_max_iter),
        )

    def fit(self, model, forget):
        check_is_fitted(model, "params_")
        params, self.result_ = unlearn(
            model.params_, model.dataset_, forget, self.unlearn_config(), model.propagation_
        )
        self.unlearned_ = BPRRecommender.from_params(params, model.dataset_, model.propagation_)
        return self

    def predict(self, pairs):
        check_is_fitted(self, "unlearned_")
        return self.unlearned_.predict(pairs)

    def predicted_change(self, model, pairs):
        check_is_fitted(self, "result_")
        return predicted_score_change(model.params_, model.propagation_, self.result_.delta, pairs)

