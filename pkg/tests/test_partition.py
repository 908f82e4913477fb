import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loopsoup.partition import Partition, UnionFind, all_partitions, bell_number, set_partitions


def test_canonical_labels():
    assert Partition((5, 5, 2, 7)).labels == (0, 0, 1, 2)
    assert Partition.from_blocks([[2, 3], [0, 1]]).labels == (0, 0, 1, 1)


def test_blocks_sorted_by_minimum():
    pi = Partition.from_blocks([[3, 1], [2], [0, 4]])
    assert pi.blocks == [(0, 4), (1, 3), (2,)]
    assert pi.to_json() == [[0, 4], [1, 3], [2]]


@pytest.mark.parametrize("blocks", [[[0, 1], [1, 2]], [[0], []], [[0, 2]]])
def test_from_blocks_rejects_bad_input(blocks):
    with pytest.raises(ValueError):
        Partition.from_blocks(blocks, n=3)


def test_bell_numbers():
    assert [bell_number(n) for n in range(8)] == [1, 1, 2, 5, 15, 52, 203, 877]
    for n in range(7):
        parts = list(all_partitions(n))
        assert len(parts) == bell_number(n)
        assert len(set(parts)) == len(parts)


def test_set_partitions_of_items():
    out = list(set_partitions("abc"))
    assert len(out) == 5
    assert [["a", "b", "c"]] in out


def test_refinement_order():
    s, w = Partition.singletons(4), Partition.whole(4)
    pi = Partition.from_blocks([[0, 1], [2, 3]])
    assert s <= pi <= w
    assert not (w <= pi)
    assert pi.is_finer(pi)


def test_merge_join_restrict():
    pi = Partition.singletons(4).merge([0, 2])
    assert pi.blocks == [(0, 2), (1,), (3,)]
    a = Partition.from_blocks([[0, 1], [2], [3]])
    b = Partition.from_blocks([[0], [1, 2], [3]])
    assert a.join(b).blocks == [(0, 1, 2), (3,)]
    assert Partition.from_blocks([[0, 3], [1, 2]]).restrict([0, 1, 3]).blocks == [(0, 2), (1,)]


def test_cross_edges():
    pi = Partition.from_blocks([[0, 1], [2, 3]])
    edges = np.array(list(itertools.combinations(range(4), 2)))
    assert pi.cross_edges(edges).sum() == 4


def test_union_find_components():
    uf = UnionFind(5)
    assert uf.union(0, 1) and uf.union(3, 4)
    assert not uf.union(1, 0)
    assert uf.components == 3
    assert Partition(tuple(uf.labels())).blocks == [(0, 1), (2,), (3, 4)]


labels = st.lists(st.integers(0, 4), min_size=1, max_size=8)


@given(labels, labels)
@settings(max_examples=200)
def test_join_is_least_upper_bound(la, lb):
    n = min(len(la), len(lb))
    a, b = Partition(tuple(la[:n])), Partition(tuple(lb[:n]))
    j = a.join(b)
    assert a <= j and b <= j
    for c in all_partitions(n) if n <= 5 else []:
        if a <= c and b <= c:
            assert j <= c


@given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 7)), max_size=12))
def test_from_edges_matches_union_find(pairs):
    pi = Partition.from_edges(8, pairs)
    uf = UnionFind(8)
    for u, v in pairs:
        uf.union(u, v)
    assert pi == Partition(tuple(uf.labels()))
    assert len(pi) == uf.components
