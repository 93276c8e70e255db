"""Stochastic gradient ascent for the structural choice model.

Each sampled adoption ``(u, i)`` updates the user vector, every category
node competing along the app's choice path (the path nodes and their
siblings), and the binary-tree nodes on the app's code path.  Nothing else
is touched, which keeps a step at ``sum_m |c(z_{m-1})| + (L(i) - 1) + 1``
parameter blocks.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from ._kernels import FlatLayout, sucm_epoch
from .errors import EmptyTrainingSet, IndexOutOfPath, NodeNotInCompetingSet
from .hsoftmax import BALANCED, LEFT, STRATEGIES, build_forest
from .model import ModelParams, log_posterior, sigmoid, softmax

log = logging.getLogger(__name__)

EPOCH = "epoch"
STEP = "step"


@dataclass
class TrainConfig:
    K: int = 20
    lr: float = 0.05
    nu: float = 50.0
    max_iter: int = 50
    sigma: float = 1.0
    seed: int = 0
    init_std: float = 0.1
    l2_user: float = 0.0
    l2_hs: float = 0.0
    prior_weight: float = 1.0
    convergence_tol: float = 1e-5
    hs_strategy: str = BALANCED
    anneal_unit: str = EPOCH

    def __post_init__(self):
        if int(self.K) < 1:
            raise ValueError("K must be >= 1")
        if self.lr <= 0 or self.nu <= 0 or self.sigma <= 0:
            raise ValueError("lr, nu and sigma must be positive")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be >= 1")
        if self.init_std < 0 or self.l2_user < 0 or self.l2_hs < 0 or self.prior_weight < 0:
            raise ValueError("init_std, l2 weights and prior_weight must be non-negative")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be non-negative")
        if self.hs_strategy not in STRATEGIES:
            raise ValueError(f"hs_strategy must be one of {STRATEGIES}")
        if self.anneal_unit not in (EPOCH, STEP):
            raise ValueError("anneal_unit must be 'epoch' or 'step'")
        self.K = int(self.K)
        self.max_iter = int(self.max_iter)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    initial_objective: float
    objectives: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    touched: list[int] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    converged: bool = False

    @property
    def epochs(self) -> int:
        return len(self.objectives)

    @property
    def final_objective(self) -> float:
        return self.objectives[-1] if self.objectives else self.initial_objective


def init_params(config: TrainConfig, tree, forest, num_users: int) -> ModelParams:
    """Gaussian init ``N(0, init_std^2)`` for all vectors, zero biases.

    Draw order is fixed (users, category nodes, binary-tree nodes) so a seed
    pins every entry.
    """
    rng = np.random.default_rng(config.seed)
    K, s = config.K, config.init_std
    P = rng.normal(0.0, s, size=(num_users, K)) if s > 0 else np.zeros((num_users, K))
    Qz = rng.normal(0.0, s, size=(tree.num_internal, K)) if s > 0 else np.zeros((tree.num_internal, K))
    Qn = rng.normal(0.0, s, size=(forest.num_nodes, K)) if s > 0 else np.zeros((forest.num_nodes, K))
    return ModelParams(tree, forest, P, Qz, np.zeros(tree.num_internal), Qn,
                       np.zeros(forest.num_nodes), config.sigma)


def anneal_lr(config: TrainConfig, n_iter: int) -> float:
    """``lr * nu / (nu + n_iter - 1)`` for a 1-based iteration counter."""
    if n_iter < 1:
        raise ValueError("n_iter is 1-based")
    return config.lr * config.nu / (config.nu + n_iter - 1)


# -- reference gradients (one instance, literal per-term formulas) ----------------------

def _competing_level(tree, i, z):
    """``(m, rivals)`` for the level at which ``z`` competes on app ``i``'s path."""
    path = tree.choice_path(i)
    prev = path.origin
    for m, zm in enumerate(path.nodes, start=1):
        rivals = tree.choice_children(prev)
        if z in rivals:
            return m, rivals, zm
        prev = zm
    raise NodeNotInCompetingSet(f"node {z} neither lies on nor competes with the path of app {i}")


def grad_user(params: ModelParams, u, i) -> np.ndarray:
    """d log Pr(i|u) / d p_u."""
    u, i = params.user(u), params.app(i)
    p = params.P[u]
    g = np.zeros(params.K)
    for n, d in params.forest.hs_path(i).steps:
        y = params.bn[n] + p @ params.Qn[n]
        g += ((1.0 if d == LEFT else 0.0) - sigmoid(y)) * params.Qn[n]
    tree = params.tree
    path = tree.choice_path(i)
    prev = path.origin
    for z in path.nodes:
        rows = tree.internal_row[list(tree.choice_children(prev))]
        w = softmax(params.bz[rows] + params.Qz[rows] @ p)
        g += params.Qz[tree.internal_row[z]] - w @ params.Qz[rows]
        prev = z
    return g


def prior_grad(params: ModelParams, z) -> np.ndarray:
    """d log-prior / d q_z: pull towards the parent and towards each category child."""
    tree = params.tree
    r = params.row(z)
    q = params.Qz[r]
    s2 = params.sigma ** 2
    parent = tree.parent(z)
    g = -(q - (params.Qz[tree.internal_row[parent]] if parent is not None else 0.0)) / s2
    for c in tree.children(z):
        rc = tree.internal_row[c]
        if rc >= 0:
            g = g - (q - params.Qz[rc]) / s2
    return g


def grad_category_node(params: ModelParams, u, i, z, prior_weight: float = 1.0):
    """Gradient for a category node on app ``i``'s path or competing with it.

    Returns ``(d/dq_z, d/db_z)``.  The bias carries no prior term.
    """
    u, i, r = params.user(u), params.app(i), params.row(z)
    _, rivals, chosen = _competing_level(params.tree, i, z)
    p = params.P[u]
    rows = params.tree.internal_row[list(rivals)]
    w = softmax(params.bz[rows] + params.Qz[rows] @ p)[rivals.index(z)]
    coef = (1.0 if z == chosen else 0.0) - w
    return coef * p + prior_weight * prior_grad(params, z), float(coef)


def grad_hs_node(params: ModelParams, u, i, l):
    """Gradient for the ``l``-th binary-tree node (1-based) on app ``i``'s code path."""
    u, i = params.user(u), params.app(i)
    steps = params.forest.hs_path(i).steps
    if not 1 <= l <= len(steps):
        raise IndexOutOfPath(f"level {l} outside 1..{len(steps)} for app {i}")
    n, d = steps[l - 1]
    p = params.P[u]
    coef = (1.0 if d == LEFT else 0.0) - float(sigmoid(params.bn[n] + p @ params.Qn[n]))
    return coef * p, coef


def touch_count(params: ModelParams, i) -> int:
    """Parameter blocks an SGD step on app ``i`` updates."""
    lay = params.layout
    return int(lay.comp_rows[i].size + lay.hs_nodes[i].size + 1)


# -- the update ------------------------------------------------------------------------------

def _sgd_step(params, u, i, lr, prior_weight, l2_user, l2_hs):
    lay = params.layout
    p = params.P[u]
    g_p = np.zeros_like(p)
    sq = 0.0

    rows = lay.comp_rows[i]
    if rows.size:
        Q = params.Qz[rows]
        y = params.bz[rows] + Q @ p
        starts = lay.comp_starts[i]
        seg = lay.comp_seg[i]
        e = np.exp(y - np.maximum.reduceat(y, starts)[seg])
        coef = lay.comp_chosen[i] - e / np.add.reduceat(e, starts)[seg]
        g_p += coef @ Q
        gQ = np.outer(coef, p)
        if prior_weight:
            childsum = np.add.reduceat(params.Qz[lay.prior_flat[i]], lay.prior_starts[i], axis=0) - Q
            pull = (Q - params.Qz[lay.comp_parent[i]]) + (lay.prior_nchild[i][:, None] * Q - childsum)
            gQ -= (prior_weight / params.sigma ** 2) * pull
        sq += float((gQ ** 2).sum() + coef @ coef)

    hs = lay.hs_nodes[i]
    if hs.size:
        Qh = params.Qn[hs]
        ch = lay.hs_left[i] - expit(params.bn[hs] + Qh @ p)
        g_p += ch @ Qh
        gQh = np.outer(ch, p)
        if l2_hs:
            gQh -= l2_hs * Qh
        sq += float((gQh ** 2).sum() + ch @ ch)

    if l2_user:
        g_p -= l2_user * p
    sq += float(g_p @ g_p)

    # all gradients above were taken at the pre-step point
    params.P[u] += lr * g_p
    if rows.size:
        params.Qz[rows] += lr * gQ
        params.bz[rows] += lr * coef
    if hs.size:
        params.Qn[hs] += lr * gQh
        params.bn[hs] += lr * ch
    return 1 + rows.size + hs.size, sq


def sgd_step(params: ModelParams, u, i, lr: float, prior_weight: float = 1.0,
             l2_user: float = 0.0, l2_hs: float = 0.0) -> int:
    """One ascent step on instance ``(u, i)``, in place.  Returns blocks touched.

    All gradients are evaluated at the current parameters and then applied
    together.  The tree-prior pull is applied every time a node is touched.
    """
    u, i = params.user(u), params.app(i)
    touched, _ = _sgd_step(params, u, i, lr, prior_weight, l2_user, l2_hs)
    return touched


def _run_epoch(params, flat, order, lrs, config):
    return sucm_epoch(
        np.ascontiguousarray(order[:, 0]), np.ascontiguousarray(order[:, 1]), lrs,
        params.P, params.Qz, params.bz, params.Qn, params.bn,
        flat.comp_ptr, flat.comp_rows, flat.comp_chosen, flat.seg_ptr, flat.seg_start,
        flat.parent_row, flat.child_ptr, flat.child_idx, flat.hs_ptr, flat.hs_nodes, flat.hs_left,
        float(config.prior_weight), 1.0 / params.sigma ** 2, float(config.l2_user), float(config.l2_hs))


def train(dataset, tree, config: TrainConfig | None = None, forest=None, callback=None):
    """Fit the model on ``dataset`` (an :class:`~sucm.dataio.AdoptionDataset`).

    Builds one binary tree per leaf-level subcategory, initialises, then runs
    epochs over a fresh permutation of the instances until ``max_iter`` or the
    relative change of the full objective drops below ``convergence_tol``.
    Returns ``(params, report)``.
    """
    config = config or TrainConfig()
    inst = np.asarray(dataset.instances, dtype=np.int64).reshape(-1, 2)
    if inst.shape[0] == 0:
        raise EmptyTrainingSet("no training instances")
    if forest is None:
        freq = np.bincount(inst[:, 1], minlength=tree.num_apps)
        forest = build_forest(tree, config.hs_strategy, freq)
    params = init_params(config, tree, forest, dataset.num_users)
    params.meta["config"] = config.to_dict()

    def objective():
        return log_posterior(params, inst, config.prior_weight, config.l2_user, config.l2_hs)

    report = TrainReport(initial_objective=objective())
    log.info("initial objective %.6f", report.initial_objective)
    rng = np.random.default_rng([config.seed, 1])
    t0 = time.perf_counter()
    step = 0
    prev = report.initial_objective
    flat = FlatLayout(params.layout, tree.num_internal)
    for epoch in range(1, config.max_iter + 1):
        order = inst[rng.permutation(inst.shape[0])]
        if config.anneal_unit == STEP:
            lrs = config.lr * config.nu / (config.nu + np.arange(step + 1, step + len(order) + 1) - 1.0)
        else:
            lrs = np.full(len(order), anneal_lr(config, epoch))
        step += len(order)
        lr = float(lrs[-1])
        touched, sq = _run_epoch(params, flat, order, lrs, config)
        obj = objective()
        report.objectives.append(obj)
        report.grad_norms.append(float(np.sqrt(sq / len(order))))
        report.touched.append(touched)
        report.learning_rates.append(lr)
        log.info("epoch %d objective %.6f lr %.5f", epoch, obj, lr)
        if callback is not None:
            callback(epoch, obj, params)
        if not np.isfinite(obj):
            break
        if abs(obj - prev) <= config.convergence_tol * abs(prev):
            report.converged = True
            break
        prev = obj
    report.wall_time = time.perf_counter() - t0
    return params, report
