"""Central finite-difference checks for every analytic gradient.

Each probe draws a small random taxonomy, random parameters and a random
instance, then compares an analytic gradient with ``(f(x+h) - f(x-h)) / 2h``
where ``f`` is evaluated by the probability code alone (no gradient code is
shared).  Relative error is ``|a - n| / max(|a|, |n|, 1e-6)`` in the L2 norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import baselines as bl
from .hsoftmax import BALANCED, HUFFMAN, build_forest
from .model import ModelParams, log_prior, path_prob
from .taxonomy import APP, INTERNAL, build_tree
from .training import grad_category_node, grad_hs_node, grad_user

H = 1e-5
TOL = 1e-4


def rel_error(a, n) -> float:
    a, n = np.atleast_1d(np.asarray(a, dtype=np.float64)), np.atleast_1d(np.asarray(n, dtype=np.float64))
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-6))


def central_diff(f, arr: np.ndarray, index, h: float = H) -> np.ndarray:
    """Numerical gradient of ``f()`` w.r.t. ``arr[index]`` (a vector or a scalar slot)."""
    view = arr[index]
    if np.ndim(view) == 0:
        old = arr[index]
        arr[index] = old + h
        fp = f()
        arr[index] = old - h
        fm = f()
        arr[index] = old
        return np.asarray((fp - fm) / (2 * h))
    out = np.zeros(view.shape)
    for k in range(view.size):
        old = arr[index][k]
        arr[index][k] = old + h
        fp = f()
        arr[index][k] = old - h
        fm = f()
        arr[index][k] = old
        out[k] = (fp - fm) / (2 * h)
    return out


def random_taxonomy(rng: np.random.Generator, max_levels: int = 3, max_apps: int = 30,
                    max_fanout: int = 3, max_apps_per_leaf: int = 5, empty_prob: float = 0.1):
    """Random category tree with 0..``max_levels`` category levels below the root.

    Occasionally adds an empty category (no apps) to exercise that corner.
    """
    levels = int(rng.integers(0, max_levels + 1))
    edges = [("r", None, INTERNAL, "root")]
    frontier = ["r"]
    for d in range(levels):
        nxt = []
        for parent in frontier:
            for k in range(int(rng.integers(1, max_fanout + 1))):
                label = f"{parent}.{k}"
                edges.append((label, parent, INTERNAL, label))
                nxt.append(label)
            if d > 0 and rng.random() < empty_prob:
                edges.append((f"{parent}.e", parent, INTERNAL, "empty"))
        frontier = nxt
    n = 0
    for parent in frontier:
        for _ in range(int(rng.integers(1, max_apps_per_leaf + 1))):
            if n >= max_apps:
                break
            edges.append((f"a{n}", parent, APP, f"a{n}"))
            n += 1
    return build_tree(edges)


def random_params(rng, tree, num_users: int = 3, K: int | None = None, scale: float = 0.7,
                  sigma: float | None = None, strategy: str | None = None) -> ModelParams:
    K = K or int(rng.integers(1, 9))
    strategy = strategy or (BALANCED if rng.random() < 0.5 else HUFFMAN)
    forest = build_forest(tree, strategy, rng.integers(0, 10, size=tree.num_apps))
    sigma = sigma if sigma is not None else float(rng.uniform(0.5, 3.0))
    return ModelParams(tree, forest,
                       rng.normal(0, scale, (num_users, K)), rng.normal(0, scale, (tree.num_internal, K)),
                       rng.normal(0, scale, tree.num_internal), rng.normal(0, scale, (forest.num_nodes, K)),
                       rng.normal(0, scale, forest.num_nodes), sigma)


@dataclass
class GradReport:
    errors: dict = field(default_factory=dict)  # name -> list of relative errors

    def add(self, name, err):
        self.errors.setdefault(name, []).append(err)

    @property
    def max_error(self) -> float:
        return max((max(v) for v in self.errors.values() if v), default=0.0)

    def passed(self, tol: float = TOL) -> bool:
        return self.max_error < tol

    def summary(self) -> str:
        lines = [f"{name}\tprobes={len(v)}\tmax_rel_err={max(v):.3e}" for name, v in sorted(self.errors.items())]
        lines.append(f"overall\tmax_rel_err={self.max_error:.3e}")
        return "\n".join(lines)


def check_sucm(rng, report: GradReport, h: float = H) -> None:
    tree = random_taxonomy(rng)
    params = random_params(rng, tree)
    u = int(rng.integers(params.num_users))
    i = int(rng.integers(tree.num_apps))
    weight = float(rng.choice([0.0, 1.0, 0.3]))

    def f():
        return path_prob(params, u, i) + weight * log_prior(params)

    report.add("sucm.grad_user", rel_error(grad_user(params, u, i), central_diff(f, params.P, u, h)))

    path = tree.choice_path(i)
    prev = path.origin
    for z in path.nodes:
        for c in tree.choice_children(prev):
            r = tree.internal_row[c]
            gq, gb = grad_category_node(params, u, i, c, prior_weight=weight)
            report.add("sucm.grad_category_vector", rel_error(gq, central_diff(f, params.Qz, r, h)))
            report.add("sucm.grad_category_bias", rel_error(gb, central_diff(f, params.bz, r, h)))
        prev = z

    for l, (n, _) in enumerate(params.forest.hs_path(i).steps, start=1):
        gq, gb = grad_hs_node(params, u, i, l)
        report.add("sucm.grad_hs_vector", rel_error(gq, central_diff(f, params.Qn, n, h)))
        report.add("sucm.grad_hs_bias", rel_error(gb, central_diff(f, params.bn, n, h)))


def _check_flat(rng, report, name, loss, grad, args_fn, h):
    n_users, n_apps = 3, int(rng.integers(4, 12))
    K = int(rng.integers(1, 9))
    params = bl.FlatParams(rng.normal(0, 0.7, (n_users, K)), rng.normal(0, 0.7, (n_apps, K)),
                           rng.normal(0, 0.7, n_apps))
    config = bl.BaselineConfig(K=K, lambda_u=float(rng.uniform(0, 0.1)),
                               lambda_i=float(rng.uniform(0, 0.1)), lambda_b=float(rng.uniform(0, 0.1)))
    u = int(rng.integers(n_users))
    args = args_fn(rng, n_apps)

    def f():
        return loss(params, config, u, *args)

    gp, gapps = grad(params, config, u, *args)
    report.add(f"{name}.user", rel_error(gp, central_diff(f, params.P, u, h)))
    for j, (gq, gb) in gapps.items():
        report.add(f"{name}.item", rel_error(gq, central_diff(f, params.Q, j, h)))
        report.add(f"{name}.bias", rel_error(gb, central_diff(f, params.b, j, h)))


def _distinct(rng, n_apps, k):
    return [int(a) for a in rng.choice(n_apps, size=k, replace=False)]


def check_baselines(rng, report: GradReport, h: float = H) -> None:
    _check_flat(rng, report, "llfm", bl.llfm_loss, bl.llfm_grad,
                lambda r, n: (int(r.integers(n)),), h)

    def pmf_args(r, n):
        apps = _distinct(r, n, int(r.integers(2, min(n, 6) + 1)))
        return apps, [1.0] + [0.0] * (len(apps) - 1)

    _check_flat(rng, report, "pmf_neg", bl.pmf_loss, bl.pmf_grad, pmf_args, h)
    _check_flat(rng, report, "bpr", bl.bpr_loss, bl.bpr_grad, lambda r, n: tuple(_distinct(r, n, 2)), h)

    def ccf_args(r, n):
        offer = _distinct(r, n, int(r.integers(2, n + 1)))
        return offer[0], offer

    _check_flat(rng, report, "ccf", bl.ccf_loss, bl.ccf_grad, ccf_args, h)


def run(seed: int = 0, probes: int = 100, h: float = H) -> GradReport:
    """``probes`` random instances for the structural model and for each baseline."""
    rng = np.random.default_rng(seed)
    report = GradReport()
    for _ in range(probes):
        check_sucm(rng, report, h)
        check_baselines(rng, report, h)
    return report
