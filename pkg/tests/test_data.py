import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unrank.data import (
    DataFormatError,
    ForgetRequest,
    build_dataset,
    generate_forget_set,
    load_interactions,
    read_remap,
    write_remap,
)

from .conftest import ML100K, small_dataset


def edge_set(edges):
    return {tuple(map(int, e)) for e in edges}


def test_load_three_lines(tmp_path):
    p = tmp_path / "r.tsv"
    p.write_text("1\t10\t5\t100\n2\t10\t3\t101\n1\t11\t4\t102\n")
    assert load_interactions(p) == [("1", "10"), ("2", "10"), ("1", "11")]


def test_load_dedups_keeping_first(tmp_path):
    p = tmp_path / "r.tsv"
    p.write_text("1\t10\t5\t100\n2\t10\t3\t101\n1\t10\t1\t900\n")
    assert load_interactions(p) == [("1", "10"), ("2", "10")]


def test_load_double_colon(tmp_path):
    p = tmp_path / "ratings.dat"
    p.write_text("1::1193::5::978300760\n1::661::3::978302109\n")
    assert load_interactions(p, "::") == [("1", "1193"), ("1", "661")]


def test_malformed_line_reports_number(tmp_path):
    p = tmp_path / "r.tsv"
    p.write_text("1\t10\t5\t100\nbroken-line\n")
    with pytest.raises(DataFormatError, match=":2:"):
        load_interactions(p)


def test_empty_file(tmp_path):
    p = tmp_path / "r.tsv"
    p.write_text("")
    with pytest.raises(DataFormatError):
        load_interactions(p)


@pytest.mark.skipif(not ML100K.exists(), reason="MovieLens-100K not materialized")
def test_ml100k_line_count():
    n_lines = sum(1 for line in ML100K.read_text().splitlines() if line.strip())
    pairs = load_interactions(ML100K)
    assert n_lines == 100_000
    assert len(pairs) == len(set(pairs)) <= n_lines
    ds = build_dataset(pairs, seed=0)
    assert len(ds.train) + len(ds.val) + len(ds.test) == len(pairs)


def ten_by_ten():
    return [(f"u{u}", f"i{(u + k) % 10}") for u in range(10) for k in range(10)]


def test_per_user_split_8_1_1():
    ds = build_dataset(ten_by_ten(), seed=3)
    for split, want in ((ds.train, 8), (ds.val, 1), (ds.test, 1)):
        assert np.all(np.bincount(split[:, 0], minlength=10) == want)


def test_split_deterministic():
    a = build_dataset(ten_by_ten(), seed=5)
    b = build_dataset(ten_by_ten(), seed=5)
    for name in ("train", "val", "test"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_small_users_go_to_train():
    raw = [("a", "x"), ("a", "y"), ("b", "x"), ("b", "y"), ("b", "z")]
    ds = build_dataset(raw, seed=0)
    assert ds.n_small_users == 1
    assert np.sum(ds.train[:, 0] == 0) == 2


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 12), st.integers(0, 15)), min_size=1, max_size=120),
    st.integers(0, 2**31 - 1),
)
def test_split_conservation_and_disjointness(pairs, seed):
    raw = [(str(u), str(i)) for u, i in pairs]
    ds = build_dataset(raw, seed=seed)
    n = len(set(raw))
    tr, va, te = edge_set(ds.train), edge_set(ds.val), edge_set(ds.test)
    assert len(ds.train) + len(ds.val) + len(ds.test) == n
    assert not (tr & va) and not (tr & te) and not (va & te)
    # adjacency reconstructs the train edges exactly
    coo = ds.user_adjacency.tocoo()
    assert edge_set(np.column_stack([coo.row, coo.col])) == tr
    coo = ds.item_adjacency.tocoo()
    assert edge_set(np.column_stack([coo.col, coo.row])) == tr
    assert edge_set(ds.train[ds.user_edge_ids]) == tr


def test_remap_roundtrip(tmp_path):
    ds = build_dataset([("alice", "m1"), ("bob", "m2"), ("alice", "m2")], seed=0)
    users, items = write_remap(ds, tmp_path / "ds")
    assert read_remap(users) == {"alice": 0, "bob": 1}
    assert read_remap(items) == {"m1": 0, "m2": 1}


def test_train_edge_ids(tiny_ds):
    ids = tiny_ds.train_edge_ids([[1, 2], [0, 0]])
    np.testing.assert_array_equal(tiny_ds.train[ids], [[1, 2], [0, 0]])
    with pytest.raises(ValueError, match="not a train edge"):
        tiny_ds.train_edge_ids([[2, 0]])


def test_forget_ratio_zero(tiny_ds):
    part = generate_forget_set(tiny_ds, ForgetRequest("entity-item", 0.0, 1))
    assert len(part.forget) == 0
    assert edge_set(part.retain) == edge_set(tiny_ds.train)


def test_forget_explicit_item():
    ds = small_dataset([[0, 0], [1, 0], [2, 0], [0, 1], [1, 2]])
    part = generate_forget_set(ds, ForgetRequest("entity-item", 0.1, 0), targets=[0])
    assert edge_set(part.forget) == {(0, 0), (1, 0), (2, 0)}


def test_forget_user_half():
    ds = small_dataset([[0, i] for i in range(7)] + [[1, 0], [1, 1]], n_items=8)
    part = generate_forget_set(ds, ForgetRequest("interaction-user", 0.5, 4), targets=[0])
    assert len(part.forget) == 4
    assert np.all(part.forget[:, 0] == 0)


def test_forget_rejects_everything():
    ds = small_dataset([[0, 0], [1, 0]])
    with pytest.raises(ValueError, match="every train edge"):
        generate_forget_set(ds, ForgetRequest("entity-item", 1.0, 0))


def test_forget_request_validation():
    with pytest.raises(ValueError):
        ForgetRequest("entity-item", 1.5)
    with pytest.raises(ValueError):
        ForgetRequest("bogus", 0.1)


@pytest.mark.parametrize("mode", ["entity-item", "interaction-user"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forget_partition_properties(toy_ds, mode, seed):
    req = ForgetRequest(mode, 0.2, seed)
    part = generate_forget_set(toy_ds, req)
    f, r, t = edge_set(part.forget), edge_set(part.retain), edge_set(toy_ds.train)
    assert f | r == t and not (f & r)
    again = generate_forget_set(toy_ds, req)
    np.testing.assert_array_equal(part.forget, again.forget)
    if mode == "entity-item":
        assert len(part.targets) == int(np.ceil(0.2 * toy_ds.n_items))
