"""Adoption data, a planted-model data generator, and the model file format.

Adoption TSV: ``user_id<TAB>app_id[<TAB>rating]``; a missing rating counts as
an adoption.  ``app_id`` is the app's ``node_id`` in the taxonomy file.

Model file layout (all integers little-endian)::

    8 bytes   magic b"SUCMMODL"
    uint32    format version
    uint64    header length H
    H bytes   UTF-8 JSON header (sorted keys): kind, K, counts, sigma,
              taxonomy edges, forest, user labels, config echo, and the
              ordered list of arrays [name, shape]
    ...       float64 little-endian arrays, C order, in header order
    32 bytes  SHA-256 of everything between the version field and here
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .baselines import FlatParams
from .errors import (
    CorruptFile,
    EmptyAfterFiltering,
    ParseError,
    SpecInfeasible,
    UnknownAppInRecord,
    VersionMismatch,
)
from .hsoftmax import BALANCED, HsForest, build_forest
from .model import ModelParams, log_prob_matrix
from .taxonomy import APP, INTERNAL, CategoryTree, build_tree


class AdoptionDataset:
    """Deduplicated positive ``(user, app)`` pairs with per-user indexes.

    ``instances`` is an ``(n, 2)`` int array sorted by user then app.
    """

    def __init__(self, pairs, num_users: int, num_apps: int,
                 user_labels: Sequence[str] | None = None, app_labels: Sequence[str] | None = None):
        inst = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if inst.size:
            if inst.min() < 0 or inst[:, 0].max() >= num_users or inst[:, 1].max() >= num_apps:
                raise ValueError("pair index out of range")
            inst = np.unique(inst, axis=0)
        inst.setflags(write=False)
        self.instances = inst
        self.num_users = int(num_users)
        self.num_apps = int(num_apps)
        self.user_labels = tuple(user_labels) if user_labels is not None else tuple(str(u) for u in range(num_users))
        self.app_labels = tuple(app_labels) if app_labels is not None else tuple(str(a) for a in range(num_apps))
        if len(self.user_labels) != self.num_users or len(self.app_labels) != self.num_apps:
            raise ValueError("label lists must match user/app counts")
        bounds = np.searchsorted(inst[:, 0], np.arange(self.num_users + 1))
        self._items = [inst[bounds[u]:bounds[u + 1], 1] for u in range(self.num_users)]

    def __len__(self):
        return self.instances.shape[0]

    @property
    def per_user(self) -> list[np.ndarray]:
        return self._items

    def items(self, u: int) -> np.ndarray:
        return self._items[u]

    @cached_property
    def _sets(self):
        return [frozenset(a.tolist()) for a in self._items]

    def adopted(self, u: int) -> frozenset:
        return self._sets[u]

    def with_pairs(self, pairs) -> "AdoptionDataset":
        """Same users and apps, different pairs (used by the train/test split)."""
        return AdoptionDataset(pairs, self.num_users, self.num_apps, self.user_labels, self.app_labels)

    def to_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("# user_id\tapp_id\n")
            for u, i in self.instances.tolist():
                fh.write(f"{self.user_labels[u]}\t{self.app_labels[i]}\n")

    def __repr__(self):
        return f"AdoptionDataset(users={self.num_users}, apps={self.num_apps}, obs={len(self)})"


# -- loading -------------------------------------------------------------------------------

def parse_adoptions(lines: Iterable[str], tree: CategoryTree, rating_threshold: float = 3.0,
                    min_adoptions: int = 40) -> AdoptionDataset:
    adopted: dict[str, set[int]] = {}
    order: list[str] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = [p.strip() for p in line.split("\t")]
        if len(parts) not in (2, 3) or not parts[0] or not parts[1]:
            raise ParseError("expected user_id<TAB>app_id[<TAB>rating]", lineno)
        user, app_label = parts[0], parts[1]
        try:
            app = tree.app_by_label(app_label)
        except KeyError:
            raise UnknownAppInRecord(f"app {app_label!r} is not in the taxonomy", lineno) from None
        if user not in adopted:
            adopted[user] = set()
            order.append(user)
        if len(parts) == 3 and parts[2]:
            try:
                rating = float(parts[2])
            except ValueError:
                raise ParseError(f"rating {parts[2]!r} is not a number", lineno) from None
            if rating < rating_threshold:
                continue
        adopted[user].add(app)

    kept = [u for u in order if len(adopted[u]) >= min_adoptions]
    if not kept:
        raise EmptyAfterFiltering(
            f"no user has >= {min_adoptions} adoptions with rating >= {rating_threshold}")
    pairs = [(k, a) for k, u in enumerate(kept) for a in sorted(adopted[u])]
    return AdoptionDataset(pairs, len(kept), tree.num_apps, kept, tree.app_labels)


def load_adoptions(path, tree: CategoryTree, rating_threshold: float = 3.0,
                   min_adoptions: int = 40) -> AdoptionDataset:
    """Read an adoption TSV applying the rating threshold and the per-user minimum.

    Records with ``rating < rating_threshold`` are ignored; duplicate pairs
    collapse to one adoption; users with fewer than ``min_adoptions`` distinct
    adopted apps are dropped entirely.  Users keep first-appearance order.
    """
    with open(path, encoding="utf-8") as fh:
        return parse_adoptions(fh, tree, rating_threshold, min_adoptions)


# -- statistics ------------------------------------------------------------------------------

def stats_from_counts(n_users: int, n_apps: int, n_obs: int) -> dict:
    return {
        "n_users": int(n_users),
        "n_apps": int(n_apps),
        "n_obs": int(n_obs),
        "sparsity": 1.0 - n_obs / (n_users * n_apps),
        "mean_adoptions": n_obs / n_users,
    }


def stats(dataset: AdoptionDataset) -> dict:
    """Counts, sparsity ``1 - obs/(users*apps)`` and mean adoptions per user.

    ``n_apps`` is the number of apps in the taxonomy (the matrix width).
    """
    return stats_from_counts(dataset.num_users, dataset.num_apps, len(dataset))


def format_stats(st: dict) -> str:
    head = "#users\t#apps\t#observations\tsparsity\tmean_adoptions"
    row = (f"{st['n_users']:,}\t{st['n_apps']:,}\t{st['n_obs']:,}\t"
           f"{100 * st['sparsity']:.2f}%\t{st['mean_adoptions']:.2f}")
    return head + "\n" + row


# -- synthetic data ----------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Shape of a planted-model dataset.

    ``fanouts[k]`` is the number of children of every internal node at depth
    ``k``; the nodes at depth ``len(fanouts)`` are subcategories holding
    ``apps_per_subcategory`` apps each.
    """

    num_users: int = 1000
    fanouts: tuple[int, ...] = (4, 3, 3)
    apps_per_subcategory: int = 14
    adoptions_per_user: int = 40
    K: int = 8
    seed: int = 0
    scale: float = 1.0
    node_spread: float = 1.0
    bias_scale: float = 0.5
    hs_strategy: str = BALANCED

    def __post_init__(self):
        self.fanouts = tuple(int(f) for f in self.fanouts)
        for name in ("num_users", "apps_per_subcategory", "adoptions_per_user", "K"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if any(f < 1 for f in self.fanouts):
            raise ValueError("fan-outs must be >= 1")
        if min(self.scale, self.node_spread, self.bias_scale) < 0:
            raise ValueError("scales must be non-negative")

    @property
    def num_apps(self) -> int:
        return int(np.prod(self.fanouts, dtype=np.int64)) * self.apps_per_subcategory

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fanouts"] = list(self.fanouts)
        return d


def synthetic_taxonomy(fanouts: Sequence[int], apps_per_subcategory: int) -> CategoryTree:
    edges = [("root", None, INTERNAL, "root")]
    frontier = ["root"]
    for depth, f in enumerate(fanouts, start=1):
        nxt = []
        for parent in frontier:
            for k in range(f):
                label = f"{parent}.{k}" if parent != "root" else f"c{k}"
                edges.append((label, parent, INTERNAL, label))
                nxt.append(label)
        frontier = nxt
    n = 0
    for parent in frontier:
        for _ in range(apps_per_subcategory):
            edges.append((f"app{n}", parent, APP, f"app {n}"))
            n += 1
    return build_tree(edges)


def planted_params(spec: SynthSpec, tree: CategoryTree, forest: HsForest, rng) -> ModelParams:
    """Draw ground truth: category vectors follow the tree (child = parent + noise)."""
    K = spec.K
    P = rng.normal(0.0, spec.scale / np.sqrt(K), size=(spec.num_users, K))
    Qz = np.zeros((tree.num_internal, K))
    row = tree.internal_row
    for z in tree.preorder():
        r = row[z]
        if r < 0:
            continue
        parent = tree.parent(z)
        base = Qz[row[parent]] if parent is not None else 0.0
        Qz[r] = base + rng.normal(0.0, spec.node_spread, size=K)
    bz = rng.normal(0.0, spec.bias_scale, size=tree.num_internal)
    Qn = rng.normal(0.0, spec.node_spread, size=(forest.num_nodes, K))
    bn = rng.normal(0.0, spec.bias_scale, size=forest.num_nodes)
    return ModelParams(tree, forest, P, Qz, bz, Qn, bn, sigma=max(spec.node_spread, 1e-12))


def sample_without_replacement(probs: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    """Draw ``k`` distinct indices, renormalising over the remaining mass after each draw."""
    w = np.array(probs, dtype=np.float64)
    out = []
    for _ in range(k):
        c = np.cumsum(w)
        j = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
        j = min(j, w.size - 1)
        while w[j] == 0.0:  # guard against landing on an exhausted cell at the edge
            j -= 1
        out.append(j)
        w[j] = 0.0
    return out


def generate_synthetic(spec: SynthSpec):
    """Build a taxonomy, plant parameters, sample adoptions from ``Pr(i | u)``.

    Each user adopts ``adoptions_per_user`` distinct apps by repeated draws
    from the planted choice distribution restricted to apps not yet drawn.
    Users get independent random streams spawned from ``seed``.
    Returns ``(tree, dataset, planted_params)``.
    """
    if spec.adoptions_per_user > spec.num_apps:
        raise SpecInfeasible(f"{spec.adoptions_per_user} adoptions per user but only {spec.num_apps} apps")
    tree = synthetic_taxonomy(spec.fanouts, spec.apps_per_subcategory)
    forest = build_forest(tree, spec.hs_strategy, np.ones(tree.num_apps))
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.num_users + 1)
    planted = planted_params(spec, tree, forest, np.random.default_rng(seeds[0]))
    planted.meta["synth_spec"] = spec.to_dict()
    pairs = []
    for start in range(0, spec.num_users, 256):
        users = np.arange(start, min(start + 256, spec.num_users))
        probs = np.exp(log_prob_matrix(planted, users))
        for k, u in enumerate(users.tolist()):
            rng = np.random.default_rng(seeds[u + 1])
            pairs.extend((u, a) for a in sample_without_replacement(probs[k], spec.adoptions_per_user, rng))
    dataset = AdoptionDataset(pairs, spec.num_users, tree.num_apps,
                              [f"u{u}" for u in range(spec.num_users)], tree.app_labels)
    return tree, dataset, planted


# -- model files ----------------------------------------------------------------------------------

MAGIC = b"SUCMMODL"
FORMAT_VERSION = 1


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def save_model(params, path, tree: CategoryTree | None = None, user_labels: Sequence[str] | None = None,
               extra: dict | None = None) -> None:
    """Write a structural or flat model to ``path`` (format in the module docstring)."""
    if isinstance(params, ModelParams):
        kind, tree = "sucm", params.tree
        forest = params.forest.to_dict()
        sigma = params.sigma
    elif isinstance(params, FlatParams):
        if tree is None:
            raise ValueError("flat models need the taxonomy to be saved alongside")
        kind, forest, sigma = params.meta.get("model", "flat"), None, None
    else:
        raise TypeError(f"cannot save {type(params).__name__}")
    arrays = params.arrays()
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "K": params.P.shape[1],
        "counts": {"users": params.P.shape[0], "apps": tree.num_apps,
                   "internal": tree.num_internal, "hs_nodes": (params.Qn.shape[0] if kind == "sucm" else 0)},
        "sigma": sigma,
        "taxonomy": [list(e) for e in tree.edges()],
        "forest": forest,
        "users": list(user_labels) if user_labels is not None else None,
        "meta": {k: v for k, v in params.meta.items() if k not in ("history", "wall_time")},
        "extra": extra or {},
        "arrays": [[name, list(a.shape)] for name, a in arrays.items()],
    }
    hdr = json.dumps(_jsonable(header), sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray()
    body += struct.pack("<Q", len(hdr))
    body += hdr
    for a in arrays.values():
        body += np.ascontiguousarray(a, dtype="<f8").tobytes()
    digest = hashlib.sha256(bytes(body)).digest()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(body)
        fh.write(digest)


def read_model(path) -> tuple[object, dict]:
    """Load a model file; returns ``(params, header)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise CorruptFile(f"{path}: not a model file (bad magic)")
    (version,) = struct.unpack("<I", blob[8:12])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    body, digest = blob[12:-32], blob[-32:]
    if len(blob) < 12 + 8 + 32 or hashlib.sha256(body).digest() != digest:
        raise CorruptFile(f"{path}: checksum mismatch (truncated or modified)")
    (hlen,) = struct.unpack("<Q", body[:8])
    try:
        header = json.loads(body[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header ({exc})") from None
    offset = 8 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape, dtype=np.int64))
        chunk = body[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise CorruptFile(f"{path}: array {name} truncated")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += 8 * n
    if offset != len(body):
        raise CorruptFile(f"{path}: trailing bytes after arrays")

    tree = build_tree(tuple(e) for e in header["taxonomy"])
    meta = header.get("meta") or {}
    if header["kind"] == "sucm":
        forest = HsForest.from_dict(header["forest"])
        params = ModelParams(tree, forest, arrays["P"], arrays["Qz"], arrays["bz"], arrays["Qn"],
                             arrays["bn"], float(header["sigma"]), meta)
    else:
        params = FlatParams(arrays["P"], arrays["Q"], arrays["b"], meta)
    header["tree"] = tree
    return params, header


def load_model(path):
    return read_model(path)[0]
