"""Parameters and probabilities of the structural user choice model.

A user reaches an app by a cascade of softmax choices down the category
tree (one per level, over the competing children of the current node) and
then a run of left/right sigmoid decisions inside the subcategory's binary
tree.  Everything here is read-only with respect to the parameters; the
trainer owns mutation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, log_expit

from .errors import (
    EmptyDataset,
    EmptySubcategory,
    RootHasNoChoice,
    UnknownApp,
    UnknownNode,
    UnknownUser,
)
from .hsoftmax import LEFT, RIGHT, HsForest
from .taxonomy import CategoryTree


sigmoid = expit
log_sigmoid = log_expit


def log_softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    m = s.max(axis=-1, keepdims=True)
    return s - m - np.log(np.exp(s - m).sum(axis=-1, keepdims=True))


def softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class Layout:
    """Index arrays derived from the tree and forest, shared by scorer and trainer.

    For app ``i`` the competing sets ``c(z_0), c(z_1), ..., c(z_{M-1})`` are
    concatenated into ``comp_rows[i]`` (internal-node rows), with segment
    starts ``comp_starts[i]`` and a 0/1 mask ``comp_chosen[i]`` marking the
    path node inside each segment.
    """

    def __init__(self, tree: CategoryTree, forest: HsForest):
        row = tree.internal_row
        n_int = tree.num_internal
        self.parent_row = np.full(n_int, -1, dtype=np.int64)
        self.child_rows = []
        for r, z in enumerate(tree.internal_nodes):
            p = tree.nodes[z].parent
            if p is not None:
                self.parent_row[r] = row[p]
            self.child_rows.append(np.asarray(
                [row[c] for c in tree.nodes[z].children if row[c] >= 0], dtype=np.int64))
        self.root_row = int(row[tree.root])

        # competing groups over internal children: (parent row, child rows)
        self.groups = []
        for z in tree.internal_nodes:
            kids = tree.choice_children(z)
            if kids and not tree.is_app(kids[0]):
                self.groups.append((int(row[z]), np.asarray([row[c] for c in kids], dtype=np.int64)))

        self.comp_rows, self.comp_starts, self.comp_chosen, self.path_rows = [], [], [], []
        self.comp_seg, self.comp_parent = [], []
        self.prior_flat, self.prior_starts, self.prior_nchild = [], [], []
        cat_r, cat_c = [], []
        for i in range(tree.num_apps):
            path = tree.choice_path(i)
            prev = path.origin
            rows, starts, chosen = [], [], []
            for z in path.nodes:
                starts.append(len(rows))
                for c in tree.choice_children(prev):
                    rows.append(row[c])
                    chosen.append(1.0 if c == z else 0.0)
                prev = z
            rows = np.asarray(rows, dtype=np.int64)
            self.comp_rows.append(rows)
            self.comp_starts.append(np.asarray(starts, dtype=np.int64))
            self.comp_chosen.append(np.asarray(chosen, dtype=np.float64))
            self.comp_seg.append(np.repeat(np.arange(len(starts)), np.diff(starts + [len(rows)])))
            self.comp_parent.append(self.parent_row[rows])
            self.path_rows.append(np.asarray([row[z] for z in path.nodes], dtype=np.int64))
            # prior-gradient helpers: segments [r, children(r)...] per competing row
            flat, pst, nch = [], [], []
            for r in rows:
                pst.append(len(flat))
                flat.append(r)
                flat.extend(self.child_rows[r])
                nch.append(len(self.child_rows[r]))
            self.prior_flat.append(np.asarray(flat, dtype=np.int64))
            self.prior_starts.append(np.asarray(pst, dtype=np.int64))
            self.prior_nchild.append(np.asarray(nch, dtype=np.float64))
            cat_r.extend(row[z] for z in path.nodes)
            cat_c.extend([i] * path.M)

        n_apps = tree.num_apps
        self.cat_inc = sp.csr_matrix(
            (np.ones(len(cat_r)), (np.asarray(cat_r, dtype=np.int64), np.asarray(cat_c, dtype=np.int64))),
            shape=(n_int, n_apps))
        lr, lc, rr, rc = [], [], [], []
        for i in range(n_apps):
            for n, d in forest.hs_path(i).steps:
                if d == LEFT:
                    lr.append(n)
                    lc.append(i)
                else:
                    rr.append(n)
                    rc.append(i)
        n_hs = forest.num_nodes
        self.left_inc = sp.csr_matrix((np.ones(len(lr)), (lr, lc)), shape=(n_hs, n_apps))
        self.right_inc = sp.csr_matrix((np.ones(len(rr)), (rr, rc)), shape=(n_hs, n_apps))
        self.hs_nodes = forest.path_nodes
        self.hs_signs = forest.path_signs
        self.hs_left = [(s > 0).astype(np.float64) for s in forest.path_signs]


@dataclass(eq=False)
class ModelParams:
    """All learnable parameters.

    ``P[u]`` is the user vector; ``Qz[r]``/``bz[r]`` belong to the internal
    taxonomy node ``tree.internal_nodes[r]``; ``Qn[n]``/``bn[n]`` belong to
    binary-tree node ``n`` of the forest.  Apps carry no parameters.
    """

    tree: CategoryTree
    forest: HsForest
    P: np.ndarray
    Qz: np.ndarray
    bz: np.ndarray
    Qn: np.ndarray
    bn: np.ndarray
    sigma: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        K = self.P.shape[1]
        expect = {
            "Qz": (self.tree.num_internal, K), "bz": (self.tree.num_internal,),
            "Qn": (self.forest.num_nodes, K), "bn": (self.forest.num_nodes,),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def K(self) -> int:
        return self.P.shape[1]

    @property
    def num_users(self) -> int:
        return self.P.shape[0]

    @cached_property
    def layout(self) -> Layout:
        return Layout(self.tree, self.forest)

    @classmethod
    def zeros(cls, tree, forest, num_users, K, sigma=1.0) -> "ModelParams":
        return cls(tree, forest, np.zeros((num_users, K)), np.zeros((tree.num_internal, K)),
                   np.zeros(tree.num_internal), np.zeros((forest.num_nodes, K)),
                   np.zeros(forest.num_nodes), sigma)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"P": self.P, "Qz": self.Qz, "bz": self.bz, "Qn": self.Qn, "bn": self.bn}

    def copy(self) -> "ModelParams":
        new = ModelParams(self.tree, self.forest, self.P.copy(), self.Qz.copy(), self.bz.copy(),
                          self.Qn.copy(), self.bn.copy(), self.sigma, dict(self.meta))
        if "layout" in self.__dict__:
            new.__dict__["layout"] = self.__dict__["layout"]
        return new

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays().values())

    # index checks
    def user(self, u) -> int:
        if not isinstance(u, (int, np.integer)) or not 0 <= u < self.num_users:
            raise UnknownUser(f"unknown user {u!r}")
        return int(u)

    def row(self, z) -> int:
        if not isinstance(z, (int, np.integer)) or not 0 <= z < self.tree.num_nodes:
            raise UnknownNode(f"unknown node {z!r}")
        r = int(self.tree.internal_row[z])
        if r < 0:
            raise UnknownNode(f"node {z} is an app and has no parameters")
        return r

    def hs_node(self, n) -> int:
        if not isinstance(n, (int, np.integer)) or not 0 <= n < self.forest.num_nodes:
            raise UnknownNode(f"unknown binary-tree node {n!r}")
        return int(n)

    def app(self, i) -> int:
        if not isinstance(i, (int, np.integer)) or not 0 <= i < self.tree.num_apps:
            raise UnknownApp(f"unknown app {i!r}")
        return int(i)


# -- affinities and single-step probabilities -------------------------------------

def affinity_node(params: ModelParams, u, z) -> float:
    """``b_z + p_u . q_z`` for an internal taxonomy node."""
    u, r = params.user(u), params.row(z)
    return float(params.bz[r] + params.P[u] @ params.Qz[r])


def affinity_hs(params: ModelParams, u, n) -> float:
    u, n = params.user(u), params.hs_node(n)
    return float(params.bn[n] + params.P[u] @ params.Qn[n])


def log_step_prob_category(params: ModelParams, u, z) -> float:
    u, r = params.user(u), params.row(z)
    tree = params.tree
    parent = tree.parent(z)
    if parent is None:
        raise RootHasNoChoice("the root is never chosen")
    rivals = tree.choice_children(parent)
    if z not in rivals:
        return -np.inf  # empty category: never on a choice path
    rows = tree.internal_row[list(rivals)]
    y = params.bz[rows] + params.Qz[rows] @ params.P[u]
    return float(log_softmax(y)[rivals.index(z)])


def step_prob_category(params: ModelParams, u, z) -> float:
    """Probability that ``u`` picks ``z`` among the children of ``z``'s parent."""
    return float(np.exp(log_step_prob_category(params, u, z)))


def step_prob_hs(params: ModelParams, u, n, direction) -> float:
    """``sigmoid(y_un)`` for ``LEFT``, its complement for ``RIGHT``.

    The right branch is computed as ``1 - left`` so the pair sums to exactly 1.
    """
    if direction not in (LEFT, RIGHT):
        raise ValueError(f"direction must be LEFT (+1) or RIGHT (-1), got {direction!r}")
    left = float(sigmoid(affinity_hs(params, u, n)))
    return left if direction == LEFT else 1.0 - left


def log_app_prob_hs(params: ModelParams, u, i) -> float:
    u, i = params.user(u), params.app(i)
    lay = params.layout
    nodes, signs = lay.hs_nodes[i], lay.hs_signs[i]
    if nodes.size == 0:
        return 0.0
    y = params.bn[nodes] + params.Qn[nodes] @ params.P[u]
    return float(log_sigmoid(signs * y).sum())


def app_prob_hs(params: ModelParams, u, i) -> float:
    """Binary-tree approximation of ``Pr(i | u, z_M)``; 1 for a singleton subcategory."""
    return float(np.exp(log_app_prob_hs(params, u, i)))


def app_prob_exact(flat, u, tree: CategoryTree, z) -> np.ndarray:
    """Exact softmax over the apps of subcategory ``z`` using per-app parameters.

    ``flat`` is anything with per-user ``P`` and per-app ``Q``, ``b`` arrays
    (e.g. :class:`sucm.baselines.FlatParams`).  Returns probabilities in the
    order of ``tree.apps_under(z)``.
    """
    apps = list(tree.apps_under(z))
    if not apps:
        raise EmptySubcategory(f"node {z} has no app children")
    y = flat.b[apps] + flat.Q[apps] @ flat.P[u]
    return softmax(y)


def path_prob(params: ModelParams, u, i) -> float:
    """``log Pr(i | u)``: category steps along the choice path plus the app step."""
    u, i = params.user(u), params.app(i)
    lp = 0.0
    for z in params.tree.choice_path(i).nodes:
        lp += log_step_prob_category(params, u, z)
    return lp + log_app_prob_hs(params, u, i)


# -- vectorised scoring ---------------------------------------------------------------

def log_prob_matrix(params: ModelParams, users: Sequence[int] | np.ndarray | None = None) -> np.ndarray:
    """``log Pr(i | u)`` for every app, one row per requested user."""
    if users is None:
        users = np.arange(params.num_users)
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    if users.size and (users.min() < 0 or users.max() >= params.num_users):
        raise UnknownUser("user index out of range")
    lay = params.layout
    Pu = params.P[users]
    out = np.zeros((users.size, params.tree.num_apps))
    if lay.groups:
        Y = Pu @ params.Qz.T + params.bz
        logsm = np.zeros_like(Y)
        for _, rows in lay.groups:
            logsm[:, rows] = log_softmax(Y[:, rows])
        out += np.asarray((lay.cat_inc.T @ logsm.T).T)
    if params.forest.num_nodes:
        Yn = Pu @ params.Qn.T + params.bn
        out += np.asarray((lay.left_inc.T @ log_sigmoid(Yn).T).T)
        out += np.asarray((lay.right_inc.T @ log_sigmoid(-Yn).T).T)
    return out


def rank_apps(scores: np.ndarray, exclude: Iterable[int] | None = None) -> np.ndarray:
    """App ids by descending score, ties by ascending app id, excluded ids dropped."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    if exclude is not None:
        ex = np.fromiter(exclude, dtype=np.int64)
        if ex.size:
            order = order[~np.isin(order, ex)]
    return order


def score_all(params: ModelParams, u, exclude: Iterable[int] | None = None) -> list[tuple[int, float]]:
    """All apps ranked by ``log Pr(i | u)``; ``exclude`` removes e.g. training adoptions."""
    u = params.user(u)
    lp = log_prob_matrix(params, [u])[0]
    return [(int(i), float(lp[i])) for i in rank_apps(lp, exclude)]


# -- objective ------------------------------------------------------------------------

def log_prior(params: ModelParams) -> float:
    """Gaussian tree prior on category vectors, additive constants dropped.

    ``-|q_root|^2 / 2s^2 - sum_{z != root} |q_z - q_parent(z)|^2 / 2s^2``.
    The dropped constant is ``-n_internal * K/2 * log(2 pi s^2)``.
    """
    lay = params.layout
    Qz = params.Qz
    diff = Qz.copy()
    has_parent = lay.parent_row >= 0
    diff[has_parent] -= Qz[lay.parent_row[has_parent]]
    return float(-(diff ** 2).sum() / (2.0 * params.sigma ** 2))


def _pairs(dataset) -> np.ndarray:
    inst = getattr(dataset, "instances", dataset)
    inst = np.asarray(inst, dtype=np.int64).reshape(-1, 2)
    return inst


def log_likelihood(params: ModelParams, dataset) -> float:
    """``sum_{(u,i)} log Pr(i | u)`` over the dataset's adoption pairs."""
    inst = _pairs(dataset)
    if inst.shape[0] == 0:
        raise EmptyDataset("no adoption instances")
    total = 0.0
    users = np.unique(inst[:, 0])
    for start in range(0, users.size, 256):
        block = users[start:start + 256]
        lp = log_prob_matrix(params, block)
        pos = np.searchsorted(block, inst[:, 0])
        mask = (pos < block.size) & (block[np.minimum(pos, block.size - 1)] == inst[:, 0])
        total += float(lp[pos[mask], inst[mask, 1]].sum())
    return total


def log_posterior(params: ModelParams, dataset, prior_weight: float = 1.0,
                  l2_user: float = 0.0, l2_hs: float = 0.0) -> float:
    """Training objective: log-likelihood plus tree prior (constants dropped).

    Optional L2 terms ``-(l2/2) |x|^2`` on user and binary-tree vectors are
    off by default.
    """
    obj = log_likelihood(params, dataset) + prior_weight * log_prior(params)
    if l2_user:
        obj -= 0.5 * l2_user * float((params.P ** 2).sum())
    if l2_hs:
        obj -= 0.5 * l2_hs * float((params.Qn ** 2).sum())
    return obj
