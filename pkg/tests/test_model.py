import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sucm.baselines import FlatParams
from sucm.errors import EmptyDataset, EmptySubcategory, RootHasNoChoice, UnknownUser
from sucm.gradcheck import random_params, random_taxonomy
from sucm.hsoftmax import LEFT, RIGHT, build_forest
from sucm.model import (ModelParams, affinity_node, app_prob_exact, app_prob_hs, log_posterior, log_prior,
                        log_prob_matrix, path_prob, score_all, step_prob_category, step_prob_hs)
from sucm.taxonomy import APP, INTERNAL, build_tree

from conftest import flat_tree, two_by_two


def zeros(tree, users=2, K=3, sigma=1.0):
    return ModelParams.zeros(tree, build_forest(tree), users, K, sigma)


def _cat(tree, label):
    return tree.node_by_label(label)


# -- affinity ----------------------------------------------------------------------

def test_affinity_examples(tree22):
    p = zeros(tree22, K=4)
    A = _cat(tree22, "A")
    assert affinity_node(p, 0, A) == 0.0
    r = tree22.internal_row[A]
    p.P[0] = 1 / math.sqrt(4)
    p.Qz[r] = 1 / math.sqrt(4)
    p.bz[r] = 0.5
    assert affinity_node(p, 0, A) == pytest.approx(1.5, abs=1e-12)
    p.Qz[r] = 0.0
    p.bz[r] = 3.0
    p.P[0] = [5, -2, 7, 1]
    assert affinity_node(p, 0, A) == 3.0


def test_unknown_user(tree22):
    with pytest.raises(UnknownUser):
        affinity_node(zeros(tree22), 5, _cat(tree22, "A"))


# -- category step -----------------------------------------------------------------

def _star(c):
    return build_tree([("root", None, INTERNAL, "r")] + [(f"c{k}", "root", INTERNAL, "c") for k in range(c)]
                      + [(f"a{k}", f"c{k}", APP, "a") for k in range(c)])


def test_step_prob_symmetric():
    t = _star(5)
    p = zeros(t)
    assert step_prob_category(p, 0, _cat(t, "c3")) == pytest.approx(0.2, abs=1e-15)


def test_step_prob_two_children():
    t = _star(2)
    p = zeros(t)
    p.bz[t.internal_row[_cat(t, "c0")]] = 1.0
    assert step_prob_category(p, 0, _cat(t, "c0")) == pytest.approx(math.e / (math.e + 1), abs=1e-12)
    assert step_prob_category(p, 0, _cat(t, "c0")) == pytest.approx(0.7311, abs=5e-5)
    p.bz[t.internal_row[_cat(t, "c0")]] = 1000.0
    v = step_prob_category(p, 0, _cat(t, "c0"))
    assert np.isfinite(v) and v == pytest.approx(1.0)


def test_root_has_no_choice(tree22):
    with pytest.raises(RootHasNoChoice):
        step_prob_category(zeros(tree22), 0, tree22.root)


# -- binary-tree step ----------------------------------------------------------------

def test_step_prob_hs_examples(tree22):
    p = zeros(tree22)
    assert step_prob_hs(p, 0, 0, LEFT) == 0.5 == step_prob_hs(p, 0, 0, RIGHT)
    p.bn[0] = 2.0
    assert step_prob_hs(p, 0, 0, LEFT) == pytest.approx(0.8808, abs=5e-5)
    assert step_prob_hs(p, 0, 0, LEFT) == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-15)
    assert step_prob_hs(p, 0, 0, RIGHT) == pytest.approx(0.1192, abs=5e-5)


@given(st.floats(-50, 50, allow_nan=False))
def test_step_prob_hs_complement_exact(score):
    t = two_by_two()
    p = zeros(t)
    p.bn[0] = score
    assert step_prob_hs(p, 0, 0, LEFT) + step_prob_hs(p, 0, 0, RIGHT) == 1.0


def test_app_prob_hs_examples():
    single = flat_tree(1)
    assert app_prob_hs(zeros(single), 0, 0) == 1.0
    assert app_prob_hs(zeros(flat_tree(2)), 0, 1) == 0.5
    four = zeros(flat_tree(4))
    probs = [app_prob_hs(four, 0, i) for i in range(4)]
    assert probs == [0.25] * 4


# -- exact softmax oracle --------------------------------------------------------------

def _flat(n_apps, K=2, users=1):
    return FlatParams(np.zeros((users, K)), np.zeros((n_apps, K)), np.zeros(n_apps))


def test_app_prob_exact_examples():
    t = flat_tree(5)
    assert np.allclose(app_prob_exact(_flat(5), 0, t, t.root), 0.2, atol=1e-15)
    t2 = flat_tree(2)
    f = _flat(2)
    f.b[0] = math.log(2)
    assert np.allclose(app_prob_exact(f, 0, t2, t2.root), [2 / 3, 1 / 3], atol=1e-15)
    t1 = flat_tree(1)
    assert app_prob_exact(_flat(1), 0, t1, t1.root).tolist() == [1.0]


def test_app_prob_exact_empty_subcategory(tree22):
    with pytest.raises(EmptySubcategory):
        app_prob_exact(_flat(4), 0, tree22, tree22.root)


@given(st.floats(-20, 20), st.floats(-20, 20))
def test_app_prob_exact_logit_identity(s1, s2):
    t = flat_tree(2)
    f = _flat(2)
    f.b[:] = [s1, s2]
    assert abs(app_prob_exact(f, 0, t, t.root)[0] - 1 / (1 + math.exp(-(s1 - s2)))) < 1e-12


@given(st.integers(0, 10_000))
def test_app_prob_exact_sums_to_one(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 50))
    t = flat_tree(n)
    f = FlatParams(rng.normal(0, 2, (1, 4)), rng.normal(0, 2, (n, 4)), rng.normal(0, 2, n))
    assert abs(app_prob_exact(f, 0, t, t.root).sum() - 1) < 1e-12


# -- cascaded path probability -----------------------------------------------------------

def test_path_prob_examples(tree22):
    one = build_tree([("root", None, INTERNAL, "r"), ("c", "root", INTERNAL, "c"), ("a", "c", APP, "a")])
    assert path_prob(zeros(one), 0, 0) == 0.0
    assert path_prob(zeros(tree22), 0, 2) == pytest.approx(math.log(0.25), abs=1e-15)


def _brute_log_prob(params, u, i):
    """Straight-line product over the root-to-app path, no shared helpers."""
    tree = params.tree
    p = params.P[u]
    prob = 1.0
    z = tree.root
    path = tree.choice_path(i)
    for nxt in path.nodes:
        kids = [c for c in tree.children(z) if any(tree.choice_path(a).origin == tree.root and
                                                   c in tree.choice_path(a).nodes
                                                   for a in range(tree.num_apps))]
        ys = {c: params.bz[tree.internal_row[c]] + p @ params.Qz[tree.internal_row[c]] for c in kids}
        prob *= math.exp(ys[nxt]) / sum(math.exp(v) for v in ys.values())
        z = nxt
    for n, d in params.forest.hs_path(i).steps:
        y = params.bn[n] + p @ params.Qn[n]
        prob *= 1 / (1 + math.exp(-d * y))
    return math.log(prob)


@given(st.integers(0, 10_000))
def test_path_prob_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    t = random_taxonomy(rng, max_apps=15)
    p = random_params(rng, t)
    for i in range(t.num_apps):
        assert path_prob(p, 0, i) == pytest.approx(_brute_log_prob(p, 0, i), abs=1e-10)


@given(st.integers(0, 10_000))
def test_normalisation_and_matrix(seed):
    rng = np.random.default_rng(seed)
    t = random_taxonomy(rng)
    p = random_params(rng, t, scale=2.0)
    L = log_prob_matrix(p)
    assert np.abs(np.exp(L).sum(axis=1) - 1).max() < 1e-9
    for u in range(p.num_users):
        assert np.allclose(L[u], [path_prob(p, u, i) for i in range(t.num_apps)], atol=1e-12)
    assert (L <= 1e-15).all()


@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_shift_invariance(seed, c):
    rng = np.random.default_rng(seed)
    t = random_taxonomy(rng)
    p = random_params(rng, t)
    before = log_prob_matrix(p)
    kids = t.choice_children(t.root)
    if not kids or t.is_app(kids[0]):
        return
    p.bz[t.internal_row[list(kids)]] += c
    assert np.abs(log_prob_matrix(p) - before).max() < 1e-12


# -- objective ------------------------------------------------------------------------------

def test_log_posterior_zero_params(tree22):
    p = zeros(tree22)
    pairs = [(0, 0), (0, 3), (1, 2)]
    assert log_posterior(p, pairs) == pytest.approx(3 * math.log(0.25), abs=1e-12)
    with pytest.raises(EmptyDataset):
        log_posterior(p, [])


def test_prior_perturbation():
    t = build_tree([("root", None, INTERNAL, "r"), ("A", "root", INTERNAL, "A"), ("A1", "A", INTERNAL, "A1"),
                    ("A2", "A", INTERNAL, "A2"), ("a", "A1", APP, "a"), ("b", "A2", APP, "b")])
    K, sigma, delta = 3, 0.7, 0.01
    p = zeros(t, K=K, sigma=sigma)
    base = log_prior(p)
    # a leaf-level category sits in one prior term
    p.Qz[t.internal_row[t.node_by_label("A1")]] += delta
    assert base - log_prior(p) == pytest.approx(delta ** 2 * K / (2 * sigma ** 2), rel=1e-9)
    # a node with two category children sits in three terms
    p = zeros(t, K=K, sigma=sigma)
    p.Qz[t.internal_row[t.node_by_label("A")]] += delta
    assert base - log_prior(p) == pytest.approx(3 * delta ** 2 * K / (2 * sigma ** 2), rel=1e-9)


def test_prior_vanishes_for_large_sigma(rng):
    t = random_taxonomy(rng)
    p = random_params(rng, t, sigma=1e8)
    assert abs(log_prior(p)) < 1e-12


# -- ranking ------------------------------------------------------------------------------

def test_score_all_zero_params_tie_break(tree22):
    assert [a for a, _ in score_all(zeros(tree22), 0)] == [0, 1, 2, 3]


def test_score_all_planted_preference(tree22):
    p = zeros(tree22)
    p.P[0] = [1, 0, 0]
    p.Qz[tree22.internal_row[_cat(tree22, "B")]] = [5, 0, 0]
    p.bn[1] = -5.0  # prefer the right child: app b1
    ranked = score_all(p, 0)
    assert ranked[0][0] == 3
    assert [a for a, _ in score_all(p, 0, exclude=[3, 0])] == [2, 1]
    assert [s for _, s in ranked] == sorted((s for _, s in ranked), reverse=True)
    with pytest.raises(UnknownUser):
        score_all(p, 7)


@given(st.integers(0, 1000))
def test_rank_order_same_for_probs(seed):
    rng = np.random.default_rng(seed)
    t = random_taxonomy(rng)
    p = random_params(rng, t)
    L = log_prob_matrix(p, [0])[0]
    assert np.array_equal(np.argsort(-L, kind="stable"), np.argsort(-np.exp(L), kind="stable"))
