import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import expit

from sucm.errors import DuplicateApp, EmptyAppList, UnknownApp
from sucm.hsoftmax import (BALANCED, HUFFMAN, LEFT, RIGHT, HsForest, HsTree, balanced_depth, build_forest,
                           build_hs_tree, expected_code_length, hs_path)

from conftest import two_by_two


def test_single_app_has_empty_path():
    t = build_hs_tree([7])
    assert t.num_internal == 0
    assert len(t.path(7)) == 0


def test_two_apps():
    t = build_hs_tree([0, 1])
    assert t.num_internal == 1
    assert t.path(0).steps == ((0, LEFT),)
    assert t.path(1).steps == ((0, RIGHT),)


def test_four_apps_balanced():
    t = build_hs_tree([0, 1, 2, 3])
    assert t.num_internal == 3
    assert all(len(t.path(a)) == 2 for a in range(4))
    # preorder numbering: root 0, left child 1, right child 2
    assert t.path(2).steps == ((0, RIGHT), (2, LEFT))


def test_errors():
    with pytest.raises(EmptyAppList):
        build_hs_tree([])
    with pytest.raises(DuplicateApp):
        build_hs_tree([1, 1])
    with pytest.raises(UnknownApp):
        build_hs_tree([0, 1]).path(5)


def test_forest_paths_and_unknown():
    tree = two_by_two()
    forest = build_forest(tree)
    assert forest.num_nodes == 2
    assert hs_path(forest, 0).steps == ((0, LEFT),)
    assert hs_path(forest, 3).steps == ((1, RIGHT),)
    with pytest.raises(UnknownApp):
        hs_path(forest, 4)


@pytest.mark.parametrize("n", range(1, 65))
def test_structure_counts(n):
    bal = build_hs_tree(range(n))
    assert bal.num_internal == n - 1
    assert bal.depth() == balanced_depth(n) == (0 if n == 1 else math.ceil(math.log2(n)))
    freq = np.random.default_rng(n).integers(0, 20, size=n)
    huf = build_hs_tree(range(n), HUFFMAN, freq)
    assert huf.num_internal == n - 1
    assert sorted(huf.apps) == list(range(n))


def _optimal_cost(freq):
    """Minimum sum freq*depth over all full binary trees, by subset recursion."""
    n = len(freq)
    weight = {}
    best = {}
    for mask in range(1, 1 << n):
        members = [k for k in range(n) if mask >> k & 1]
        weight[mask] = sum(freq[k] for k in members)
        if len(members) == 1:
            best[mask] = 0.0
            continue
        low = mask & -mask
        sub = (mask - 1) & mask
        b = math.inf
        while sub:
            if sub & low:  # each unordered split once
                b = min(b, best[sub] + best[mask ^ sub])
            sub = (sub - 1) & mask
        best[mask] = b + weight[mask]
    return best[(1 << n) - 1]


@given(st.lists(st.integers(0, 30), min_size=2, max_size=8))
def test_huffman_optimal_and_not_worse_than_balanced(counts):
    apps = list(range(len(counts)))
    freq = dict(zip(apps, map(float, counts)))
    huf = build_hs_tree(apps, HUFFMAN, freq)
    bal = build_hs_tree(apps, BALANCED)
    assert expected_code_length(huf, freq) == pytest.approx(_optimal_cost(counts))
    assert expected_code_length(huf, freq) <= expected_code_length(bal, freq) + 1e-9


def test_huffman_is_deterministic_under_ties():
    a = build_hs_tree(range(6), HUFFMAN, [1] * 6)
    b = build_hs_tree(range(6), HUFFMAN, [1] * 6)
    assert a == b


@given(st.integers(1, 40), st.integers(0, 1000), st.sampled_from([BALANCED, HUFFMAN]))
def test_normalisation_random_scores(n, seed, strategy):
    rng = np.random.default_rng(seed)
    t = build_hs_tree(range(n), strategy, rng.integers(0, 9, size=n))
    y = rng.normal(0, 3, size=max(t.num_internal, 1))
    total = sum(math.prod(expit(d * y[k]) for k, d in t.path(a).steps) for a in range(n))
    assert abs(total - 1.0) < 1e-12


def test_balanced_path_length_bound():
    for n in range(1, 65):
        t = build_hs_tree(range(n))
        assert max(len(t.path(a)) for a in range(n)) <= math.ceil(math.log2(n)) + 1 if n > 1 else True


def test_serialisation_roundtrip():
    tree = two_by_two()
    f = build_forest(tree, HUFFMAN, [3, 1, 4, 1])
    assert HsForest.from_dict(f.to_dict()) == f
    t = f.trees[0]
    assert HsTree.from_dict(t.to_dict()) == t
