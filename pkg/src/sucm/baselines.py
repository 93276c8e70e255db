"""Flat latent-factor baselines: LLFM, PMF with negatives, BPR and CCF.

All four score a user-app pair as ``p_u . q_i + b_i`` and differ only in
the loss.  They share the annealed SGD schedule and Gaussian init of the
structural model.  Losses are written per instance with the L2 terms of the
parameters that instance touches; the ``*_grad`` functions return exact
gradients of those per-instance losses (used by the finite-difference
suite).
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from ._kernels import BPR, CCF, LLFM, PMF, flat_epoch
from .errors import EmptyTrainingSet, UnknownUser, UserHasAdoptedEverything
from .model import rank_apps

log = logging.getLogger(__name__)

MODELS = ("llfm", "pmf-neg", "bpr", "ccf")


@dataclass(eq=False)
class FlatParams:
    P: np.ndarray
    Q: np.ndarray
    b: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.P.shape[1]

    @property
    def num_users(self) -> int:
        return self.P.shape[0]

    @property
    def num_apps(self) -> int:
        return self.Q.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"P": self.P, "Q": self.Q, "b": self.b}

    def copy(self) -> "FlatParams":
        return FlatParams(self.P.copy(), self.Q.copy(), self.b.copy(), dict(self.meta))

    def scores(self, users) -> np.ndarray:
        users = np.atleast_1d(np.asarray(users, dtype=np.int64))
        return self.P[users] @ self.Q.T + self.b


@dataclass
class BaselineConfig:
    K: int = 20
    lr: float = 0.05
    nu: float = 50.0
    max_iter: int = 50
    seed: int = 0
    init_std: float = 0.1
    lambda_u: float = 0.01
    lambda_i: float = 0.01
    lambda_b: float = 0.01
    neg_per_pos: int = 5
    freeze_negatives: bool = False

    def __post_init__(self):
        if int(self.K) < 1 or int(self.max_iter) < 1 or int(self.neg_per_pos) < 1:
            raise ValueError("K, max_iter and neg_per_pos must be >= 1")
        if self.lr <= 0 or self.nu <= 0:
            raise ValueError("lr and nu must be positive")
        if min(self.lambda_u, self.lambda_i, self.lambda_b, self.init_std) < 0:
            raise ValueError("regularisation weights and init_std must be non-negative")
        self.K, self.max_iter, self.neg_per_pos = int(self.K), int(self.max_iter), int(self.neg_per_pos)

    def to_dict(self) -> dict:
        return asdict(self)

    def anneal(self, n_iter: int) -> float:
        return self.lr * self.nu / (self.nu + n_iter - 1)


def init_flat(config: BaselineConfig, num_users: int, num_apps: int) -> FlatParams:
    rng = np.random.default_rng(config.seed)
    K, s = config.K, config.init_std
    P = rng.normal(0.0, s, size=(num_users, K)) if s > 0 else np.zeros((num_users, K))
    Q = rng.normal(0.0, s, size=(num_apps, K)) if s > 0 else np.zeros((num_apps, K))
    return FlatParams(P, Q, np.zeros(num_apps))


# -- negative sampling ---------------------------------------------------------------------

def negative_sample(dataset, u: int, count: int, rng: np.random.Generator) -> list[int]:
    """Up to ``count`` distinct apps drawn uniformly from those ``u`` has not adopted.

    Returns fewer than ``count`` only when fewer candidates exist.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0 <= u < dataset.num_users:
        raise UnknownUser(f"unknown user {u!r}")
    adopted = dataset.adopted(u)
    n = dataset.num_apps
    free = n - len(adopted)
    if free <= 0:
        raise UserHasAdoptedEverything(f"user {u} adopted all {n} apps")
    count = min(count, free)
    if len(adopted) * 2 > n:
        pool = np.setdiff1d(np.arange(n), dataset.items(u), assume_unique=True)
        return [int(j) for j in rng.choice(pool, size=count, replace=False)]
    out: list[int] = []
    seen = set(adopted)
    while len(out) < count:
        j = int(rng.integers(n))
        if j not in seen:
            seen.add(j)
            out.append(j)
    return out


# -- per-instance losses and gradients -----------------------------------------------------------
# Every loss takes (params, config, u, ...) and is minimised.

def _l2(params, config, u, apps):
    return (config.lambda_u * params.P[u] @ params.P[u]
            + config.lambda_i * float((params.Q[apps] ** 2).sum())
            + config.lambda_b * float((params.b[apps] ** 2).sum()))


def _score(params, u, j):
    return params.P[u] @ params.Q[j] + params.b[j]


def llfm_loss(params, config, u, i) -> float:
    """``log(1 + exp(-(p_u.q_i + b_i)))`` plus L2."""
    return float(-log_expit(_score(params, u, i))) + _l2(params, config, u, [i])


def llfm_grad(params, config, u, i):
    """``(d/dp_u, {app: (d/dq, d/db)})``."""
    p, q, b = params.P[u], params.Q[i], params.b[i]
    r = -expit(-(p @ q + b))
    return (r * q + 2 * config.lambda_u * p,
            {i: (r * p + 2 * config.lambda_i * q, r + 2 * config.lambda_b * b)})


def pmf_loss(params, config, u, apps, labels) -> float:
    """Squared error over a positive and its sampled negatives, plus L2."""
    apps = list(apps)
    y = params.Q[apps] @ params.P[u] + params.b[apps]
    return float(((np.asarray(labels, dtype=np.float64) - y) ** 2).sum()) + _l2(params, config, u, apps)


def pmf_grad(params, config, u, apps, labels):
    apps = list(apps)
    p = params.P[u]
    Q, b = params.Q[apps], params.b[apps]
    r = -2.0 * (np.asarray(labels, dtype=np.float64) - (Q @ p + b))
    gp = r @ Q + 2 * config.lambda_u * p
    return gp, {j: (r[k] * p + 2 * config.lambda_i * Q[k], r[k] + 2 * config.lambda_b * b[k])
                for k, j in enumerate(apps)}


def bpr_loss(params, config, u, i, j) -> float:
    """``-log sigmoid(y_ui - y_uj)`` plus the Gaussian-prior L2."""
    return float(-log_expit(_score(params, u, i) - _score(params, u, j))) + _l2(params, config, u, [i, j])


def bpr_grad(params, config, u, i, j):
    p = params.P[u]
    r = -expit(-(_score(params, u, i) - _score(params, u, j)))
    gp = r * (params.Q[i] - params.Q[j]) + 2 * config.lambda_u * p
    return gp, {
        i: (r * p + 2 * config.lambda_i * params.Q[i], r + 2 * config.lambda_b * params.b[i]),
        j: (-r * p + 2 * config.lambda_i * params.Q[j], -r + 2 * config.lambda_b * params.b[j]),
    }


def ccf_loss(params, config, u, i, offer) -> float:
    """``log sum_{j in offer} exp(y_uj) - y_ui`` plus L2; ``offer`` must contain ``i``."""
    offer = list(offer)
    if i not in offer:
        raise ValueError("the offer set must contain the chosen app")
    y = params.Q[offer] @ params.P[u] + params.b[offer]
    return float(logsumexp(y) - y[offer.index(i)]) + _l2(params, config, u, offer)


def ccf_grad(params, config, u, i, offer):
    offer = list(offer)
    p = params.P[u]
    Q, b = params.Q[offer], params.b[offer]
    y = Q @ p + b
    w = np.exp(y - logsumexp(y))
    r = w - (np.asarray(offer) == i)
    gp = r @ Q + 2 * config.lambda_u * p
    return gp, {j: (r[k] * p + 2 * config.lambda_i * Q[k], r[k] + 2 * config.lambda_b * b[k])
                for k, j in enumerate(offer)}


def apply_step(params, lr, u, gp, gapps):
    """Descent step from a ``*_grad`` result, in place."""
    params.P[u] -= lr * gp
    for j, (gq, gb) in gapps.items():
        params.Q[j] -= lr * gq
        params.b[j] -= lr * gb


# -- trainers --------------------------------------------------------------------------------------

def _full_l2(params, config):
    return (config.lambda_u * float((params.P ** 2).sum()) + config.lambda_i * float((params.Q ** 2).sum())
            + config.lambda_b * float((params.b ** 2).sum()))


def _instances(dataset):
    inst = np.asarray(dataset.instances, dtype=np.int64).reshape(-1, 2)
    if inst.shape[0] == 0:
        raise EmptyTrainingSet("no training instances")
    return inst


def sample_negatives(dataset, users, count: int, rng: np.random.Generator) -> np.ndarray:
    """Row ``t`` holds up to ``count`` distinct apps user ``users[t]`` has not adopted.

    Same distribution as :func:`negative_sample`, vectorised by rejection;
    rows that would reject often fall back to it.  Short rows are padded
    with -1.
    """
    users = np.asarray(users, dtype=np.int64)
    n = dataset.num_apps
    out = rng.integers(n, size=(users.size, count))
    if users.size == 0:
        return out
    inst = dataset.instances
    codes = inst[:, 0] * n + inst[:, 1]
    n_adopted = np.bincount(inst[:, 0], minlength=dataset.num_users)[users]
    slow = (n - n_adopted < 2 * count) | (2 * n_adopted > n)
    fast = ~slow
    earlier = np.tril(np.ones((count, count), dtype=bool), -1)

    def rejected():
        key = users[:, None] * n + out
        at = np.minimum(np.searchsorted(codes, key), codes.size - 1) if codes.size else np.zeros_like(key)
        bad = codes[at] == key if codes.size else np.zeros(key.shape, dtype=bool)
        bad |= ((out[:, :, None] == out[:, None, :]) & earlier).any(axis=2)
        return bad & fast[:, None]

    bad = rejected()
    while bad.any():
        out[bad] = rng.integers(n, size=int(bad.sum()))
        bad = rejected()
    for t in np.flatnonzero(slow).tolist():
        row = negative_sample(dataset, int(users[t]), count, rng)
        out[t] = -1
        out[t, :len(row)] = row
    return out


def _run(name, kind, dataset, config, negatives_fn, objective_fn):
    """Epoch loop shared by the baselines.

    ``negatives_fn(perm, rng)`` returns the alternatives for the instances
    in ``perm`` order as a -1 padded matrix.
    """
    inst = _instances(dataset)
    params = init_flat(config, dataset.num_users, dataset.num_apps)
    params.meta.update(model=name, config=config.to_dict())
    rng = np.random.default_rng([config.seed, 1])
    history = []
    t0 = time.perf_counter()
    for epoch in range(1, config.max_iter + 1):
        lr = config.anneal(epoch)
        perm = rng.permutation(inst.shape[0])
        order = inst[perm]
        negs = np.ascontiguousarray(negatives_fn(perm, rng), dtype=np.int64)
        flat_epoch(kind, np.ascontiguousarray(order[:, 0]), np.ascontiguousarray(order[:, 1]), negs,
                   np.full(order.shape[0], lr), params.P, params.Q, params.b,
                   float(config.lambda_u), float(config.lambda_i), float(config.lambda_b))
        history.append(objective_fn(params))
        log.info("%s epoch %d loss %.6f", name, epoch, history[-1])
    params.meta["history"] = history
    params.meta["wall_time"] = time.perf_counter() - t0
    return params


def train_llfm(dataset, config: BaselineConfig | None = None) -> FlatParams:
    """Logistic latent factors fitted on positive instances only."""
    config = config or BaselineConfig()
    inst = _instances(dataset)

    def objective(params):
        y = np.einsum("nk,nk->n", params.P[inst[:, 0]], params.Q[inst[:, 1]]) + params.b[inst[:, 1]]
        return float(-log_expit(y).sum()) + _full_l2(params, config)

    return _run("llfm", LLFM, dataset, config, lambda perm, rng: np.zeros((perm.size, 0)), objective)


def train_pmf_neg(dataset, config: BaselineConfig | None = None) -> FlatParams:
    """Squared loss on positives (1) and sampled negatives (0).

    Negatives are redrawn every epoch unless ``freeze_negatives`` is set.
    """
    config = config or BaselineConfig()
    inst = _instances(dataset)
    frozen = []

    def negatives(perm, rng):
        if not config.freeze_negatives:
            return sample_negatives(dataset, inst[perm, 0], config.neg_per_pos, rng)
        if not frozen:
            frozen.append(sample_negatives(dataset, inst[:, 0], config.neg_per_pos, rng))
        return frozen[0][perm]

    def objective(params):
        y = np.einsum("nk,nk->n", params.P[inst[:, 0]], params.Q[inst[:, 1]]) + params.b[inst[:, 1]]
        return float(((1.0 - y) ** 2).sum()) + _full_l2(params, config)

    return _run("pmf-neg", PMF, dataset, config, negatives, objective)


def train_bpr(dataset, config: BaselineConfig | None = None) -> FlatParams:
    """Pairwise ranking: one uniform negative per positive per epoch."""
    config = config or BaselineConfig()
    inst = _instances(dataset)
    check_rng = np.random.default_rng([config.seed, 2])
    check = inst[check_rng.permutation(inst.shape[0])[:2000]]
    check = np.column_stack([check, sample_negatives(dataset, check[:, 0], 1, check_rng)[:, 0]])

    def objective(params):
        # fixed monitoring triples so the curve is comparable across epochs
        t = check
        d = (np.einsum("nk,nk->n", params.P[t[:, 0]], params.Q[t[:, 1]] - params.Q[t[:, 2]])
             + params.b[t[:, 1]] - params.b[t[:, 2]])
        return float(-log_expit(d).mean())

    return _run("bpr", BPR, dataset, config,
                lambda perm, rng: sample_negatives(dataset, inst[perm, 0], 1, rng), objective)


def train_ccf(dataset, config: BaselineConfig | None = None,
              offer_fn: Callable | None = None) -> FlatParams:
    """Competitive softmax over an offer set ``{i} + sampled negatives``.

    ``offer_fn(u, i, rng)`` may supply other alternatives (e.g. the app's
    taxonomy siblings); it must return a collection containing ``i``.
    """
    config = config or BaselineConfig()
    inst = _instances(dataset)
    check_rng = np.random.default_rng([config.seed, 2])
    check = inst[check_rng.permutation(inst.shape[0])[:1000]]
    check_neg = sample_negatives(dataset, check[:, 0], config.neg_per_pos, check_rng)

    def negatives(perm, rng):
        if offer_fn is None:
            return sample_negatives(dataset, inst[perm, 0], config.neg_per_pos, rng)
        rows = []
        for u, i in inst[perm].tolist():
            offer = [int(j) for j in offer_fn(u, i, rng)]
            if i not in offer:
                raise ValueError("the offer set must contain the chosen app")
            rows.append([j for j in offer if j != i])
        width = max((len(r) for r in rows), default=0)
        out = np.full((len(rows), width), -1, dtype=np.int64)
        for t, r in enumerate(rows):
            out[t, :len(r)] = r
        return out

    def objective(params):
        zero = BaselineConfig(lambda_u=0.0, lambda_i=0.0, lambda_b=0.0)
        return float(np.mean([ccf_loss(params, zero, int(u), int(i), [int(i)] + [int(j) for j in neg if j >= 0])
                              for (u, i), neg in zip(check.tolist(), check_neg)]))

    return _run("ccf", CCF, dataset, config, negatives, objective)


TRAINERS = {"llfm": train_llfm, "pmf-neg": train_pmf_neg, "bpr": train_bpr, "ccf": train_ccf}


def score_flat(params: FlatParams, u, exclude: Sequence[int] | None = None) -> list[tuple[int, float]]:
    """All apps ranked by ``p_u . q_i + b_i``, ties by app id."""
    if not isinstance(u, (int, np.integer)) or not 0 <= u < params.num_users:
        raise UnknownUser(f"unknown user {u!r}")
    s = params.scores([u])[0]
    return [(int(i), float(s[i])) for i in rank_apps(s, exclude)]
