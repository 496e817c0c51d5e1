import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare
from sklearn.base import clone

from unrank.models import (
    BPRRecommender,
    CheckpointError,
    ModelParams,
    PropagationOperator,
    TrainConfig,
    bpr_gradient,
    bpr_loss,
    effective_embeddings,
    init_params,
    load_checkpoint,
    make_propagation,
    rank,
    sample_triplets,
    save_checkpoint,
    score,
    train,
    triplet_weights,
)

from .conftest import random_params, small_dataset


def test_init_deterministic_and_shape():
    a = init_params(2, 3, 1, seed=4)
    b = init_params(2, 3, 1, seed=4)
    np.testing.assert_array_equal(a.user_emb, b.user_emb)
    assert a.user_emb.shape == (2, 1) and a.item_emb.shape == (3, 1)
    assert np.all(np.isfinite(a.stacked()))


@pytest.mark.parametrize("dim", [1, 4, 16])
def test_init_variance(dim):
    p = init_params(10_000 // dim, 0, dim, seed=1)
    var = p.user_emb.ravel().var()
    assert abs(var - 0.01 / dim) < 0.2 * 0.01 / dim


def test_init_rejects_zero_dim():
    with pytest.raises(ValueError):
        init_params(2, 2, 0)


def test_mf_effective_is_identity():
    p = random_params(3, 4, 2)
    u, i = effective_embeddings(p)
    np.testing.assert_array_equal(u, p.user_emb)
    np.testing.assert_array_equal(i, p.item_emb)


def test_lightgcn_zero_layers_is_identity(tiny_ds):
    p = random_params(3, 4, 2, backbone="lightgcn", n_layers=0)
    u, i = effective_embeddings(p, make_propagation(tiny_ds, 0))
    np.testing.assert_allclose(u, p.user_emb)
    np.testing.assert_allclose(i, p.item_emb)


def test_lightgcn_toy_matches_dense_power():
    # users {0, 1}, items {0, 1}; edges u0-i0, u0-i1, u1-i1
    edges = np.array([[0, 0], [0, 1], [1, 1]])
    A = np.zeros((4, 4))
    for u, i in edges:
        A[u, 2 + i] = A[2 + i, u] = 1.0
    d = A.sum(1)
    A_hat = A / np.sqrt(np.outer(d, d))
    E = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, -1.0], [0.5, 0.5]])
    want = (E + A_hat @ E) / 2
    p = ModelParams(E[:2], E[2:], "lightgcn", 1)
    prop = PropagationOperator(edges, 2, 2, 1)
    u, i = effective_embeddings(p, prop)
    np.testing.assert_allclose(np.vstack([u, i]), want, atol=1e-14)
    # K = 2 against the explicit matrix power
    prop2 = PropagationOperator(edges, 2, 2, 2)
    want2 = (E + A_hat @ E + np.linalg.matrix_power(A_hat, 2) @ E) / 3
    np.testing.assert_allclose(prop2.apply(E), want2, atol=1e-14)


def test_isolated_node_rows_are_zero():
    prop = PropagationOperator(np.array([[0, 0]]), 2, 2, 1)
    A = prop.norm_adj.toarray()
    assert np.all(A[1] == 0) and np.all(A[:, 3] == 0)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 3), st.integers(0, 1000))
def test_propagation_linearity(a, b, layers, seed):
    rng = np.random.default_rng(seed)
    edges = np.array([[0, 0], [0, 2], [1, 1], [2, 2], [2, 0]])
    prop = PropagationOperator(edges, 3, 3, layers)
    X, Y = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    np.testing.assert_allclose(
        prop.apply(a * X + b * Y), a * prop.apply(X) + b * prop.apply(Y), atol=1e-12
    )


def test_propagation_dimension_mismatch(tiny_ds):
    p = random_params(2, 4, 2, backbone="lightgcn", n_layers=1)
    with pytest.raises(ValueError):
        effective_embeddings(p, make_propagation(tiny_ds, 1))


def test_score_basis_and_orthogonal():
    p = ModelParams(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert score(p, None, 0, 0) == 1.0
    assert score(p, None, 0, 1) == 0.0
    with pytest.raises(IndexError):
        score(p, None, 0, 2)


def test_score_random_pair():
    p = random_params(2, 2, 4, seed=9)
    want = sum(p.user_emb[1, k] * p.item_emb[0, k] for k in range(4))
    assert score(p, None, 1, 0) == pytest.approx(want, rel=1e-14)


def test_score_mf_depends_only_on_its_rows():
    p = random_params(3, 3, 4, seed=2)
    before = score(p, None, 0, 1)
    p.user_emb[1:] += 5.0
    p.item_emb[[0, 2]] -= 2.0
    assert score(p, None, 0, 1) == before


def test_sample_triplets_definition(tiny_ds):
    t = sample_triplets(tiny_ds, [[0, 0]], m=1, seed=3)
    assert t.shape == (1, 3)
    u, i, j = t[0]
    assert (u, i) == (0, 0)
    assert j not in tiny_ds.train_items(0)
    np.testing.assert_array_equal(t, sample_triplets(tiny_ds, [[0, 0]], m=1, seed=3))


def test_sample_triplets_skips_saturated_user(caplog):
    ds = small_dataset([[0, 0], [0, 1], [1, 0]], 2, 2)
    t = sample_triplets(ds, ds.train, m=2, seed=0)
    assert np.all(t[:, 0] == 1) and len(t) == 2
    assert "skipped 2 edges" in caplog.text


def test_negative_sampling_uniform():
    ds = small_dataset([[0, 0], [0, 3], [0, 7], [1, 1]], 2, 12)
    t = sample_triplets(ds, [[0, 0]] * 1000, m=1, seed=11)
    pool = sorted(set(range(12)) - {0, 3, 7})
    counts = np.array([np.sum(t[:, 2] == j) for j in pool])
    assert counts.sum() == 1000
    assert chisquare(counts).pvalue > 1e-3


def test_bpr_loss_weighted_tie():
    p = ModelParams(np.array([[1.0, 0.0]]), np.array([[0.5, 1.0], [0.5, -1.0]]))
    trip = np.array([[0, 0, 1]])
    ent = np.array([0.2, 0.4, 0.0])  # node weights: user 0, item 0, item 1
    w = triplet_weights(trip, ent, 1)
    assert w[0] == pytest.approx(0.3)
    assert bpr_loss(p, None, trip, w) == pytest.approx(0.3 * math.log(2), abs=1e-12)
    assert bpr_loss(p, None, trip, w) == pytest.approx(0.20794, abs=1e-5)


def test_bpr_loss_empty_and_linear():
    p = random_params(2, 3, 3)
    assert bpr_loss(p, None, np.empty((0, 3), int)) == 0.0
    one = bpr_loss(p, None, [[0, 1, 2]])
    assert bpr_loss(p, None, [[0, 1, 2], [0, 1, 2]]) == 2 * one


def test_bpr_loss_clamped_is_finite():
    p = ModelParams(np.array([[100.0]]), np.array([[-10.0], [10.0]]))
    assert np.isfinite(bpr_loss(p, None, [[0, 0, 1]]))


def _fd_gradient(params, prop, trip, w, h=1e-4):
    table = params.stacked()
    out = np.zeros_like(table)
    for idx in np.ndindex(table.shape):
        plus, minus = table.copy(), table.copy()
        plus[idx] += h
        minus[idx] -= h
        out[idx] = (
            bpr_loss(params.with_stacked(plus), prop, trip, w)
            - bpr_loss(params.with_stacked(minus), prop, trip, w)
        ) / (2 * h)
    return out


@pytest.mark.parametrize("backbone,layers", [("mf", 0), ("lightgcn", 1), ("lightgcn", 2)])
def test_bpr_gradient_matches_finite_differences(tiny_ds, backbone, layers):
    params = random_params(3, 4, 5, seed=1, backbone=backbone, n_layers=layers)
    prop = make_propagation(tiny_ds, layers) if backbone == "lightgcn" else None
    trip = np.array([[0, 0, 2], [1, 2, 0], [2, 3, 1], [0, 1, 2]])
    w = np.array([0.3, 1.0, 0.7, 0.2])
    gu, gi = bpr_gradient(params, prop, trip, w)
    fd = _fd_gradient(params, prop, trip, w)
    got = np.vstack([gu, gi])
    assert np.linalg.norm(got - fd) / np.linalg.norm(fd) < 1e-4


def planted():
    # users 0-2 like items 0-1, users 3-4 like items 3-4
    edges = [[0, 0], [0, 1], [1, 0], [1, 1], [2, 0], [2, 1], [3, 3], [3, 4], [4, 3], [4, 4]]
    return small_dataset(edges, 5, 5)


def test_train_zero_epochs_is_init():
    ds = planted()
    p, trace = train(ds, TrainConfig(epochs=0, seed=2), dim=4)
    np.testing.assert_array_equal(p.stacked(), init_params(5, 5, 4, seed=2).stacked())
    assert trace == []


@pytest.mark.parametrize("backbone", ["mf", "lightgcn"])
def test_train_loss_decreases_and_is_deterministic(backbone):
    ds = planted()
    cfg = TrainConfig(lr=0.05, epochs=50, batch_size=4, seed=1)
    p, trace = train(ds, cfg, backbone, n_layers=1, dim=4)
    assert trace[-1] < trace[0]
    p2, trace2 = train(ds, cfg, backbone, n_layers=1, dim=4)
    assert trace == trace2
    np.testing.assert_array_equal(p.stacked(), p2.stacked())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence():
    from unrank.models import TrainingDivergedError

    with pytest.raises(TrainingDivergedError):
        train(planted(), TrainConfig(lr=1e300, epochs=3, seed=0), dim=2)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def _params_with_scores(scores):
    s = np.asarray(scores, dtype=float)
    return ModelParams(np.array([[1.0]]), s[:, None])


def test_rank_sort_and_ties():
    assert rank(_params_with_scores([0.9, 0.1, 0.5]), None, 0).tolist() == [0, 2, 1]
    assert rank(_params_with_scores([0.3] * 5), None, 0).tolist() == [0, 1, 2, 3, 4]


def test_rank_random_matches_sort():
    rng = np.random.default_rng(0)
    s = np.round(rng.normal(size=20), 1)  # rounding forces ties
    want = sorted(range(20), key=lambda k: (-s[k], k))
    assert rank(_params_with_scores(s), None, 0).tolist() == want


def test_rank_exclude_train(tiny_ds):
    p = random_params(3, 4, 3)
    order = rank(p, None, 0, exclude_train=True, ds=tiny_ds)
    assert set(order) == {2}


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=12), st.floats(-10, 10))
def test_rank_shift_invariance(scores, c):
    s = np.round(np.asarray(scores), 2)
    # appending a constant coordinate adds c to every item score of this user
    p = ModelParams(np.array([[1.0, c]]), np.column_stack([s, np.ones_like(s)]))
    base = _params_with_scores(s)
    assert rank(p, None, 0).tolist() == rank(base, None, 0).tolist()


def test_checkpoint_roundtrip(tmp_path):
    p = init_params(3, 5, 4, seed=0, backbone="lightgcn", n_layers=2)
    path = save_checkpoint(p, tmp_path / "m.ckpt")
    q = load_checkpoint(path)
    np.testing.assert_array_equal(q.user_emb, p.user_emb)
    np.testing.assert_array_equal(q.item_emb, p.item_emb)
    assert (q.backbone, q.n_layers) == ("lightgcn", 2)
    assert path.read_bytes().startswith(b"L2UR1 lightgcn 2 3 5 4\n")


def test_checkpoint_errors(tmp_path):
    p = init_params(3, 5, 4, seed=0)
    path = save_checkpoint(p, tmp_path / "m.ckpt")
    raw = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(raw.replace(b"L2UR1", b"XXXX1", 1))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)
    bad.write_bytes(raw.replace(b" 3 5 4", b" 3 x 4", 1))
    with pytest.raises(CheckpointError, match="n_items"):
        load_checkpoint(bad)
    bad.write_bytes(raw[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError, match="dim mismatch"):
        load_checkpoint(path, dim=8)


def test_estimator_api(toy_ds):
    est = BPRRecommender(dim=4, epochs=3, lr=0.01, batch_size=16)
    assert est.get_params()["dim"] == 4
    c = clone(est).set_params(seed=5)
    assert c.seed == 5 and not hasattr(c, "params_")
    est.fit(toy_ds)
    pairs = toy_ds.test[:5]
    s = est.predict(pairs)
    np.testing.assert_allclose(s, np.einsum("nd,nd->n", est.params_.user_emb[pairs[:, 0]], est.params_.item_emb[pairs[:, 1]]))
    assert len(est.recommend(0, k=3)) == 3
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 3), dtype=int))
