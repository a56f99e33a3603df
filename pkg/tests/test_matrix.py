import pickle

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netsense.matrix import (
    CountOverflowError,
    TrafficMatrix,
    U64_MAX,
    format_ipv4,
    parse_ipv4,
    sum_tree,
)

from conftest import as_pair_list, random_pair_arrays, tally_pairs

addresses = st.integers(min_value=0, max_value=2**32 - 1)
pair_lists = st.lists(st.tuples(addresses, addresses), max_size=200)


def test_from_pairs_empty():
    m = TrafficMatrix.from_pairs([])
    assert m.nnz == 0
    assert m.request_total == 0
    assert m.to_dict() == {}


def test_from_pairs_multiplicity():
    p = (parse_ipv4("1.2.3.4"), parse_ipv4("5.6.7.8"))
    m = TrafficMatrix.from_pairs([p, p, p])
    assert m.nnz == 1
    assert m.request_total == 3
    assert m.to_dict() == {p: 3}


def test_from_pairs_matches_tally_oracle(rng):
    src, dst = random_pair_arrays(rng, 1000, 2**32)
    m = TrafficMatrix.from_arrays(src, dst)
    assert m.to_dict() == tally_pairs(as_pair_list(src, dst))
    assert m.request_total == 1000


def test_from_pairs_rejects_out_of_range():
    with pytest.raises(ValueError):
        TrafficMatrix.from_pairs([(2**32, 0)])
    with pytest.raises(ValueError):
        TrafficMatrix.from_pairs([(-1, 0)])
    with pytest.raises(ValueError):
        TrafficMatrix.from_arrays(np.array([1, 2]), np.array([3]))


def test_add_identity_element(rng):
    src, dst = random_pair_arrays(rng, 64, 2**8)
    m = TrafficMatrix.from_arrays(src, dst)
    empty = TrafficMatrix.empty()
    assert m.add(empty) == m
    assert empty.add(m) == m


def test_add_disjoint_supports():
    a = TrafficMatrix.from_pairs([(1, 2)] * 2)
    b = TrafficMatrix.from_pairs([(1, 3)] * 5)
    c = a.add(b)
    assert c.nnz == 2
    assert c.request_total == 7
    assert c.to_dict() == {(1, 2): 2, (1, 3): 5}


def test_add_matches_concatenation_oracle(rng):
    for _ in range(25):
        universe = int(rng.integers(4, 2**16))
        na, nb = int(rng.integers(0, 4096)), int(rng.integers(0, 4096))
        sa, da = random_pair_arrays(rng, na, universe)
        sb, db = random_pair_arrays(rng, nb, universe)
        both = TrafficMatrix.from_arrays(np.concatenate([sa, sb]),
                                         np.concatenate([da, db]))
        assert TrafficMatrix.from_arrays(sa, da).add(
            TrafficMatrix.from_arrays(sb, db)) == both


@settings(deadline=None, max_examples=60)
@given(pair_lists, pair_lists)
def test_homomorphism_property(a, b):
    assert TrafficMatrix.from_pairs(a).add(TrafficMatrix.from_pairs(b)) == \
        TrafficMatrix.from_pairs(a + b)


@settings(deadline=None, max_examples=40)
@given(pair_lists, pair_lists, pair_lists)
def test_monoid_laws(a, b, c):
    ma, mb, mc = map(TrafficMatrix.from_pairs, (a, b, c))
    assert ma.add(mb) == mb.add(ma)
    assert ma.add(mb).add(mc) == ma.add(mb.add(mc))


def test_sum_tree_singleton(rng):
    src, dst = random_pair_arrays(rng, 32, 2**8)
    m = TrafficMatrix.from_arrays(src, dst)
    assert sum_tree([m]) == m


def test_sum_tree_equals_sequential_fold(rng):
    ms = []
    for _ in range(4):
        src, dst = random_pair_arrays(rng, 100, 2**6)
        ms.append(TrafficMatrix.from_arrays(src, dst))
    folded = ms[0]
    for m in ms[1:]:
        folded = folded.add(m)
    assert sum_tree(ms) == folded
    assert sum_tree(ms) == ms[0].add(ms[1]).add(ms[2].add(ms[3]))


def test_sum_tree_64_bases_matches_concatenation(rng):
    all_src, all_dst, ms = [], [], []
    for _ in range(64):
        src, dst = random_pair_arrays(rng, 50, 2**10)
        all_src.append(src)
        all_dst.append(dst)
        ms.append(TrafficMatrix.from_arrays(src, dst))
    assert sum_tree(ms) == TrafficMatrix.from_arrays(
        np.concatenate(all_src), np.concatenate(all_dst))


def test_sum_tree_rejects_empty_input():
    with pytest.raises(ValueError):
        sum_tree([])


def test_nnz(rng):
    assert TrafficMatrix.empty().nnz == 0
    assert TrafficMatrix.from_pairs([(1, 2)] * 3).nnz == 1
    src, dst = random_pair_arrays(rng, 500, 2**7)
    assert TrafficMatrix.from_arrays(src, dst).nnz == \
        len(tally_pairs(as_pair_list(src, dst)))


def test_structural_invariants(rng):
    src, dst = random_pair_arrays(rng, 2000, 2**8)
    m = TrafficMatrix.from_arrays(src, dst)
    keys, counts = m.keys_counts()
    assert np.all(keys[1:] > keys[:-1])
    assert int(counts.min()) >= 1
    assert int(counts.sum()) == m.request_total
    _, row_nnz, row_sums = m.row_stats()
    _, col_nnz, col_sums = m.col_stats()
    assert int(row_nnz.sum()) == m.nnz == int(col_nnz.sum())
    assert int(row_sums.sum()) == m.request_total == int(col_sums.sum())


def test_count_of(rng):
    m = TrafficMatrix.from_pairs([(9, 9), (9, 9), (1, 5)])
    assert m.count_of(9, 9) == 2
    assert m.count_of(1, 5) == 1
    assert m.count_of(5, 1) == 0


def test_add_detects_count_overflow():
    huge = np.array([U64_MAX - 10], dtype=np.uint64)
    key = np.array([123], dtype=np.uint64)
    a = TrafficMatrix(key, huge, U64_MAX - 10)
    b = TrafficMatrix(key, np.array([11], dtype=np.uint64), 11)
    with pytest.raises(CountOverflowError):
        a.add(b)
    # OverflowError subclass: callers can catch the builtin
    with pytest.raises(OverflowError):
        a.add(b)


def test_matrix_is_immutable_and_picklable(rng):
    src, dst = random_pair_arrays(rng, 100, 2**6)
    m = TrafficMatrix.from_arrays(src, dst)
    keys, counts = m.keys_counts()
    with pytest.raises(ValueError):
        keys[0] = 0
    with pytest.raises(ValueError):
        counts[0] = 0
    clone = pickle.loads(pickle.dumps(m))
    assert clone == m
    assert clone.request_total == m.request_total


def test_ipv4_parse_format_round_trip():
    assert parse_ipv4("1.2.3.4") == 0x01020304
    assert format_ipv4(0x01020304) == "1.2.3.4"
    for v in (0, 1, 2**31, 2**32 - 1, 0xC0A80001):
        assert parse_ipv4(format_ipv4(v)) == v
    with pytest.raises(ValueError):
        format_ipv4(2**32)
    with pytest.raises(ValueError):
        parse_ipv4("256.1.1.1")


@settings(deadline=None, max_examples=100)
@given(addresses)
def test_ipv4_round_trip_property(v):
    assert parse_ipv4(format_ipv4(v)) == v
