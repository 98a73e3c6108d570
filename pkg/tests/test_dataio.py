import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alteraser.dataio import (ForgetRequest, apply_forget, gen_forget_privacy,
                              inject_noise_and_gen_forget, load_movielens, load_tsv,
                              make_planted, read_forget_request, restore_noise, round_half_up,
                              split_per_user, subsample_users, write_forget_request)
from alteraser.errors import DataError, ParseError
from instances import dataset_from_pairs, random_dataset


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def _rebuild_from_rows(ds, rows_of, count):
    return {(a, int(b)) for a in range(count) for b in rows_of(a)}


# loading -----------------------------------------------------------------


def test_movielens_duplicates_collapse(tmp_path):
    path = _write(tmp_path, "r.dat", "1::10::5::978300760\n1::10::3::978302109\n")
    ds = load_movielens(path)
    assert (ds.num_users, ds.num_items, ds.num_train) == (1, 1, 1)


def test_movielens_parse_error_names_line(tmp_path):
    path = _write(tmp_path, "r.dat", "abc\n")
    with pytest.raises(ParseError, match="line 1"):
        load_movielens(path)


def test_movielens_error_on_later_line(tmp_path):
    path = _write(tmp_path, "r.dat", "1::2::3::4\n2::3::1::5\nbroken\n")
    with pytest.raises(ParseError) as info:
        load_movielens(path)
    assert info.value.lineno == 3


def test_empty_file_is_an_error(tmp_path):
    with pytest.raises(DataError):
        load_movielens(_write(tmp_path, "r.dat", ""))


def test_movielens_first_appearance_indexing(tmp_path):
    path = _write(tmp_path, "r.dat", "7::30::1::0\n3::20::4::0\n7::20::2::0\n")
    ds = load_movielens(path)
    assert ds.user_ids == ("7", "3") and ds.item_ids == ("30", "20")
    assert ds.train_pairs() == {(0, 0), (1, 1), (0, 1)}


ML1M = os.environ.get("ALTERASER_ML1M")


@pytest.mark.skipif(not ML1M or not os.path.exists(ML1M), reason="set ALTERASER_ML1M to ratings.dat")
def test_movielens_1m_counts():
    ds = load_movielens(ML1M)
    assert (ds.num_users, ds.num_items, ds.num_train) == (6040, 3706, 1_000_209)


def test_tsv_two_users(tmp_path):
    ds = load_tsv(_write(tmp_path, "d.tsv", "u1\ti1\nu2\ti1\n"))
    assert (ds.num_users, ds.num_items, ds.num_train) == (2, 1, 2)


def test_tsv_header_skipped(tmp_path):
    ds = load_tsv(_write(tmp_path, "d.tsv", "# header\nu1\ti1\n"))
    assert ds.num_train == 1


def test_tsv_single_column_is_parse_error(tmp_path):
    with pytest.raises(ParseError):
        load_tsv(_write(tmp_path, "d.tsv", "u1\n"))


def test_tsv_extra_columns_ignored(tmp_path):
    ds = load_tsv(_write(tmp_path, "d.tsv", "u1\ti1\t5\tx\n"))
    assert ds.train_pairs() == {(0, 0)}


# dataset invariants --------------------------------------------------------


def test_train_test_overlap_rejected():
    with pytest.raises(DataError):
        dataset_from_pairs(2, 2, [(0, 0)], [(0, 0)])


def test_out_of_range_rejected():
    with pytest.raises(DataError):
        dataset_from_pairs(2, 2, [(0, 2)])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_adjacency_round_trip(m, n, seed):
    ds = random_dataset(np.random.default_rng(seed), m, n, density=0.4)
    assert _rebuild_from_rows(ds, ds.by_user, m) == ds.train_pairs()
    by_item = {(int(u), v) for v in range(n) for u in ds.by_item(v)}
    assert by_item == ds.train_pairs()
    assert len(ds.train_pairs()) == ds.num_train
    for u in range(m):
        assert np.all(np.diff(ds.by_user(u)) > 0)


def test_duplicates_removed():
    ds = dataset_from_pairs(2, 2, [(0, 1), (0, 1), (1, 0)])
    assert ds.num_train == 2


# splitting ---------------------------------------------------------------


def _single_user(n_items):
    return dataset_from_pairs(1, max(n_items, 1), [(0, v) for v in range(n_items)])


def test_split_ten_interactions():
    ds = split_per_user(_single_user(10), 0.8, seed=0)
    assert len(ds.by_user(0)) == 8 and len(ds.test_items(0)) == 2


def test_split_deterministic():
    base = make_planted(30, 40, items_per_user=9, seed=4)
    a, b = split_per_user(base, 0.8, 7), split_per_user(base, 0.8, 7)
    assert np.array_equal(a.train, b.train) and np.array_equal(a.test, b.test)


def test_split_single_interaction_stays_in_train():
    ds = split_per_user(_single_user(1), 0.8, seed=0)
    assert len(ds.by_user(0)) == 1 and len(ds.test_items(0)) == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_counts(n_items, fraction, seed):
    ds = split_per_user(_single_user(n_items), fraction, seed)
    n_train = len(ds.by_user(0))
    expected = max(1, round_half_up(fraction * n_items))
    if n_items >= 2:
        expected = min(expected, n_items - 1)
        assert len(ds.test_items(0)) >= 1
    assert n_train == expected
    assert n_train + len(ds.test_items(0)) == n_items


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        split_per_user(_single_user(3), 1.0)


# forget requests -----------------------------------------------------------


@pytest.fixture(scope="module")
def split_ds():
    return split_per_user(make_planted(100, 150, items_per_user=12, seed=0), 0.8, seed=1)


def test_privacy_64_users(split_ds):
    req = gen_forget_privacy(split_ds, 64, seed=3)
    assert len(set(req.forgetting_users)) == 64
    assert req.scenario == "privacy"
    assert set(map(tuple, req.pairs.tolist())) <= split_ds.train_pairs()


def test_privacy_half_up_rounding():
    ds = dataset_from_pairs(1, 7, [(0, v) for v in range(7)])
    req = gen_forget_privacy(ds, 1, seed=0)
    assert len(req) == 4


def test_privacy_zero_users(split_ds):
    req = gen_forget_privacy(split_ds, 0, seed=0)
    assert len(req) == 0 and req.forgetting_users == ()


def test_privacy_too_many_users():
    ds = dataset_from_pairs(3, 3, [(0, 0), (0, 1), (1, 0)])
    with pytest.raises(DataError):
        gen_forget_privacy(ds, 2, seed=0)


def test_noise_injection_ten_positives():
    ds = dataset_from_pairs(2, 40, [(0, v) for v in range(10)] + [(1, 0), (1, 1)],
                            [(0, 10), (0, 11)])
    noisy, req = inject_noise_and_gen_forget(ds, 2, seed=5)
    mine = req.pairs[req.pairs[:, 0] == 0]
    assert len(mine) == 5
    assert not set(mine[:, 1].tolist()) & set(range(12))
    assert np.array_equal(apply_forget(noisy, req).train, ds.train)


def test_noise_injection_deterministic(split_ds):
    a = inject_noise_and_gen_forget(split_ds, 10, seed=9)[1]
    b = inject_noise_and_gen_forget(split_ds, 10, seed=9)[1]
    assert np.array_equal(a.pairs, b.pairs)


def test_noise_injection_names_user_without_room():
    ds = dataset_from_pairs(1, 3, [(0, 0), (0, 1)], [(0, 2)])
    with pytest.raises(DataError, match="u0"):
        inject_noise_and_gen_forget(ds, 1, seed=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_noise_then_forget_restores(seed):
    base = split_per_user(make_planted(20, 60, items_per_user=8, seed=seed), 0.8, seed)
    noisy, req = inject_noise_and_gen_forget(base, 5, seed)
    assert np.array_equal(apply_forget(noisy, req).train, base.train)
    assert np.array_equal(restore_noise(apply_forget(noisy, req), req).train, noisy.train)
    assert not set(map(tuple, req.pairs.tolist())) & (base.train_pairs() | base.test_pairs())


def test_apply_forget_empty_is_identity(split_ds):
    req = ForgetRequest(np.empty((0, 2)), "privacy", (), 0)
    assert apply_forget(split_ds, req) is split_ds


def test_apply_forget_whole_user_keeps_index():
    ds = dataset_from_pairs(2, 3, [(0, 0), (0, 2), (1, 1)])
    out = apply_forget(ds, ForgetRequest([(0, 0), (0, 2)], "privacy", (0,), 0))
    assert out.num_users == 2 and len(out.by_user(0)) == 0


def test_apply_forget_counts():
    rng = np.random.default_rng(0)
    ds = dataset_from_pairs(10, 10, np.argwhere(np.ones((10, 10)))[:100])
    pick = ds.train[rng.choice(100, 7, replace=False)]
    req = ForgetRequest(pick, "privacy", tuple(np.unique(pick[:, 0])), 0)
    assert apply_forget(ds, req).num_train == 93


def test_apply_forget_missing_pair():
    ds = dataset_from_pairs(2, 2, [(0, 0)])
    with pytest.raises(DataError):
        apply_forget(ds, ForgetRequest([(1, 1)], "privacy", (1,), 0))


def test_apply_forget_keeps_test(split_ds):
    req = gen_forget_privacy(split_ds, 5, seed=1)
    assert np.array_equal(apply_forget(split_ds, req).test, split_ds.test)


def test_request_rejects_foreign_user():
    with pytest.raises(DataError):
        ForgetRequest([(0, 1)], "privacy", (1,), 0)


def test_request_rejects_unknown_scenario():
    with pytest.raises(DataError):
        ForgetRequest([(0, 1)], "other", (0,), 0)


def test_forget_file_round_trip(tmp_path, split_ds):
    req = gen_forget_privacy(split_ds, 6, seed=2)
    path = tmp_path / "forget.tsv"
    write_forget_request(req, split_ds, path)
    text = path.read_text().splitlines()
    assert text[0] == "# scenario=privacy" and text[1] == "# seed=2"
    back = read_forget_request(path, split_ds)
    assert np.array_equal(back.pairs, req.pairs)
    assert back.forgetting_users == req.forgetting_users and back.seed == 2


def test_forget_file_unknown_id(tmp_path, split_ds):
    path = _write(tmp_path, "f.tsv", "# scenario=noise\n# seed=1\nnobody\ti1\n")
    with pytest.raises(ParseError):
        read_forget_request(path, split_ds)


def test_forget_file_missing_header(tmp_path, split_ds):
    with pytest.raises(DataError):
        read_forget_request(_write(tmp_path, "f.tsv", "u0\ti1\n"), split_ds)


# synthetic data ------------------------------------------------------------


def test_planted_shape_and_determinism():
    a, b = make_planted(20, 30, items_per_user=5, seed=1), make_planted(20, 30, items_per_user=5, seed=1)
    assert np.array_equal(a.train, b.train)
    assert np.all(a.user_counts() == 5)


def test_subsample_users_reindexes_items():
    ds = dataset_from_pairs(3, 5, [(0, 4), (1, 2), (2, 0)])
    sub = subsample_users(ds, 2)
    assert (sub.num_users, sub.num_items) == (2, 2)
    assert sub.item_ids == ("i2", "i4")
    assert sub.train_pairs() == {(0, 1), (1, 0)}


@pytest.mark.parametrize("x, expected", [(3.5, 4), (2.5, 3), (2.4999, 2), (0.5, 1), (0.0, 0)])
def test_round_half_up(x, expected):
    assert round_half_up(x) == expected
