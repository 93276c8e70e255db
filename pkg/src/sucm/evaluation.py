"""Per-user holdout split and top-N ranking metrics.

Every metric treats relevance as binary: an app is relevant iff the user
adopted it in the test split.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import EmptyTestSet, NoEvaluableUsers

METRICS = ("precision", "recall", "f_beta", "map", "ndcg")
DEFAULT_CUTOFFS = (1, 3, 5, 10)
DEFAULT_BETA = 0.5


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


def split(dataset, spec: SplitSpec = SplitSpec()):
    """Per user, shuffle adoptions and keep ``floor(fraction * n)`` for training.

    At least one adoption lands on each side whenever the user has two or
    more; a single-adoption user goes entirely to training.
    """
    rng = np.random.default_rng(spec.seed)
    train, test = [], []
    for u in range(dataset.num_users):
        items = np.asarray(dataset.items(u))
        n = items.size
        if n == 0:
            continue
        perm = items[rng.permutation(n)]
        k = n if n == 1 else min(max(math.floor(spec.train_fraction * n), 1), n - 1)
        train.extend((u, int(a)) for a in perm[:k])
        test.extend((u, int(a)) for a in perm[k:])
    return dataset.with_pairs(train), dataset.with_pairs(test)


# -- single-user metrics ---------------------------------------------------------------------

def _hits(recommended: Sequence[int], adopted: set, N: int) -> np.ndarray:
    if N < 1:
        raise ValueError("N must be >= 1")
    if not adopted:
        raise EmptyTestSet("the user has no test adoptions")
    return np.fromiter((1.0 if a in adopted else 0.0 for a in list(recommended)[:N]), dtype=np.float64)


def precision_recall_at_n(recommended: Sequence[int], adopted_test, N: int) -> tuple[float, float]:
    adopted = set(adopted_test)
    h = _hits(recommended, adopted, N).sum()
    return float(h / N), float(h / len(adopted))


def f_beta(precision: float, recall: float, beta: float = DEFAULT_BETA) -> float:
    """``(1 + b^2) p r / (b^2 p + r)``; defined as 0 when ``p = r = 0``."""
    den = beta * beta * precision + recall
    if den == 0:
        return 0.0
    return float((1 + beta * beta) * precision * recall / den)


def ap_at_n(recommended: Sequence[int], adopted_test, N: int) -> float:
    """Sum of precision@k over hit positions k <= N, over ``min(N, |adopted|)``."""
    adopted = set(adopted_test)
    rel = _hits(recommended, adopted, N)
    if not rel.any():
        return 0.0
    prec = np.cumsum(rel) / np.arange(1, rel.size + 1)
    return float((prec * rel).sum() / min(N, len(adopted)))


def ndcg_at_n(recommended: Sequence[int], adopted_test, N: int) -> float:
    adopted = set(adopted_test)
    rel = _hits(recommended, adopted, N)
    discounts = 1.0 / np.log2(np.arange(2, N + 2))
    dcg = float((rel * discounts[:rel.size]).sum())  # 2^rel - 1 == rel for binary gains
    idcg = float(discounts[:min(N, len(adopted))].sum())
    return dcg / idcg


def user_metrics(recommended: Sequence[int], adopted_test, cutoffs: Iterable[int],
                 beta: float = DEFAULT_BETA) -> dict:
    out = {}
    for N in cutoffs:
        p, r = precision_recall_at_n(recommended, adopted_test, N)
        out[("precision", N)] = p
        out[("recall", N)] = r
        out[("f_beta", N)] = f_beta(p, r, beta)
        out[("map", N)] = ap_at_n(recommended, adopted_test, N)
        out[("ndcg", N)] = ndcg_at_n(recommended, adopted_test, N)
    return out


# -- full protocol ------------------------------------------------------------------------------

@dataclass
class EvalReport:
    values: dict
    cutoffs: tuple[int, ...]
    n_evaluated: int
    n_skipped: int
    config: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def rows(self) -> list[tuple[str, int, float, int]]:
        return [(m, N, self.values[(m, N)], self.n_evaluated) for m in METRICS for N in self.cutoffs]

    def to_tsv(self) -> str:
        lines = ["metric\tcutoff\tvalue\tn_users"]
        lines += [f"{m}\t{N}\t{v:.6f}\t{n}" for m, N, v, n in self.rows()]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {
            "results": [{"metric": m, "cutoff": N, "value": v, "n_users": n} for m, N, v, n in self.rows()],
            "n_evaluated": self.n_evaluated,
            "n_skipped": self.n_skipped,
            "config": self.config,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        """Metrics as rows, cutoffs as columns, percentages."""
        head = "metric\t" + "\t".join(f"@{N}" for N in self.cutoffs)
        body = [m + "\t" + "\t".join(f"{100 * self.values[(m, N)]:.2f}%" for N in self.cutoffs)
                for m in METRICS]
        return "\n".join([head] + body) + "\n"


def evaluate(scorer: Callable[[np.ndarray], np.ndarray], train, test,
             cutoffs: Sequence[int] = DEFAULT_CUTOFFS, beta: float = DEFAULT_BETA,
             batch_size: int = 256, config: dict | None = None) -> EvalReport:
    """Rank all apps per user, drop training adoptions, score the top-N.

    ``scorer(users)`` returns a ``(len(users), num_apps)`` score matrix where
    larger is better; ties are broken by ascending app id.  Users without
    test adoptions are skipped and counted.
    """
    cutoffs = tuple(sorted(set(int(N) for N in cutoffs)))
    if not cutoffs or cutoffs[0] < 1:
        raise ValueError("cutoffs must be positive")
    users = np.asarray([u for u in range(test.num_users) if len(test.items(u))], dtype=np.int64)
    n_skipped = test.num_users - users.size
    if users.size == 0:
        raise NoEvaluableUsers("no user has test adoptions")
    top = cutoffs[-1]
    sums = {(m, N): 0.0 for m in METRICS for N in cutoffs}
    for start in range(0, users.size, batch_size):
        block = users[start:start + batch_size]
        S = np.array(scorer(block), dtype=np.float64)
        for k, u in enumerate(block.tolist()):
            s = S[k]
            seen = train.items(u)
            s[seen] = -np.inf
            order = np.argsort(-s, kind="stable")
            order = order[:min(top, s.size - seen.size)]
            for key, v in user_metrics(order.tolist(), set(test.items(u).tolist()), cutoffs, beta).items():
                sums[key] += v
    values = {key: v / users.size for key, v in sums.items()}
    return EvalReport(values, cutoffs, int(users.size), int(n_skipped), dict(config or {}))


def held_out_log_prob(log_prob_fn: Callable[[np.ndarray], np.ndarray], test) -> float:
    """Mean ``log Pr(i | u)`` over test pairs; ``log_prob_fn`` as for :func:`evaluate`."""
    inst = test.instances
    users = np.unique(inst[:, 0])
    total = 0.0
    for start in range(0, users.size, 256):
        block = users[start:start + 256]
        L = log_prob_fn(block)
        for k, u in enumerate(block.tolist()):
            total += float(L[k, test.items(u)].sum())
    return total / inst.shape[0]
