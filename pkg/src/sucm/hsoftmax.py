"""Binary trees over the apps of each leaf-level subcategory.

Each subcategory ``z_M`` gets its own strictly binary tree whose leaves are
its apps.  An app's code is the list of ``(node, direction)`` steps from the
tree root; ``LEFT`` is +1 and ``RIGHT`` is -1 so a direction doubles as the
sign applied to the node score inside the sigmoid.

Child references inside an :class:`HsTree` are plain ints: ``k >= 0`` is the
internal node ``k``; ``k < 0`` is the app ``~k`` (i.e. ``-k - 1``).
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DuplicateApp, EmptyAppList, UnknownApp

LEFT = 1
RIGHT = -1

BALANCED = "balanced"
HUFFMAN = "huffman"
STRATEGIES = (BALANCED, HUFFMAN)


@dataclass(frozen=True)
class HsPath:
    steps: tuple[tuple[int, int], ...]

    @property
    def nodes(self) -> tuple[int, ...]:
        return tuple(n for n, _ in self.steps)

    @property
    def signs(self) -> tuple[int, ...]:
        return tuple(d for _, d in self.steps)

    def __len__(self):
        return len(self.steps)


@dataclass(frozen=True)
class HsTree:
    apps: tuple[int, ...]
    left: tuple[int, ...]
    right: tuple[int, ...]
    owner: int | None = None
    _paths: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.left) != len(self.right):
            raise ValueError("left/right arrays differ in length")
        if len(self.left) != len(self.apps) - 1:
            raise ValueError("a strictly binary tree over n apps has n-1 internal nodes")
        paths: dict[int, tuple] = {}
        if not self.left:
            paths[self.apps[0]] = ()
        else:
            stack = [(0, ())]
            while stack:
                k, prefix = stack.pop()
                for child, d in ((self.left[k], LEFT), (self.right[k], RIGHT)):
                    steps = prefix + ((k, d),)
                    if child >= 0:
                        stack.append((child, steps))
                    else:
                        app = ~child
                        if app in paths:
                            raise ValueError(f"app {app} appears twice in the tree")
                        paths[app] = steps
        if set(paths) != set(self.apps):
            raise ValueError("tree leaves do not match the app list")
        object.__setattr__(self, "_paths", paths)

    @property
    def num_internal(self) -> int:
        return len(self.left)

    @property
    def num_leaves(self) -> int:
        return len(self.apps)

    def path(self, app: int) -> HsPath:
        """Local path (node ids relative to this tree)."""
        try:
            return HsPath(self._paths[app])
        except KeyError:
            raise UnknownApp(f"app {app!r} is not in this tree") from None

    def depth(self) -> int:
        return max((len(s) for s in self._paths.values()), default=0)

    def to_dict(self) -> dict:
        return {"owner": self.owner, "apps": list(self.apps),
                "left": list(self.left), "right": list(self.right)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "HsTree":
        return cls(apps=tuple(int(a) for a in d["apps"]), left=tuple(int(x) for x in d["left"]),
                   right=tuple(int(x) for x in d["right"]),
                   owner=None if d.get("owner") is None else int(d["owner"]))


def _check_apps(apps: Sequence[int]) -> tuple[int, ...]:
    apps = tuple(int(a) for a in apps)
    if not apps:
        raise EmptyAppList("cannot build a tree over zero apps")
    if len(set(apps)) != len(apps):
        raise DuplicateApp("duplicate app in hierarchical-softmax app list")
    return apps


def _balanced(apps):
    left, right = [], []

    def grow(lo, hi):
        if hi - lo == 1:
            return ~apps[lo]
        k = len(left)
        left.append(None)
        right.append(None)
        mid = lo + (hi - lo + 1) // 2
        left[k] = grow(lo, mid)
        right[k] = grow(mid, hi)
        return k

    grow(0, len(apps))
    return left, right


def _huffman(apps, freq):
    # heap entries: (frequency, smallest app id inside, subtree)
    heap = [(float(freq[a]), a, a) for a in apps]
    heapq.heapify(heap)
    while len(heap) > 1:
        f1, m1, t1 = heapq.heappop(heap)
        f2, m2, t2 = heapq.heappop(heap)
        heapq.heappush(heap, (f1 + f2, min(m1, m2), (t1, t2)))
    shape = heap[0][2]

    left, right = [], []

    def number(t):
        if not isinstance(t, tuple):
            return ~t
        k = len(left)
        left.append(None)
        right.append(None)
        left[k] = number(t[0])
        right[k] = number(t[1])
        return k

    number(shape)
    return left, right


def build_hs_tree(apps: Sequence[int], strategy: str = BALANCED,
                  freq: Mapping[int, float] | Sequence[float] | None = None,
                  owner: int | None = None) -> HsTree:
    """Build the binary tree for one subcategory.

    ``balanced`` splits the load-ordered app list in halves (left half gets
    the extra app), giving depth ``ceil(log2 n)``.  ``huffman`` needs an
    adoption count per app and merges the two lightest subtrees first; ties go
    to the subtree holding the smallest app id, and the lighter subtree is
    placed on the left.  Internal nodes are numbered in preorder.
    """
    apps = _check_apps(apps)
    if len(apps) == 1:
        return HsTree(apps=apps, left=(), right=(), owner=owner)
    if strategy == BALANCED:
        left, right = _balanced(apps)
    elif strategy == HUFFMAN:
        if freq is None:
            raise ValueError("huffman strategy needs per-app frequencies")
        if not isinstance(freq, Mapping):
            if len(freq) != len(apps):
                raise ValueError("frequency sequence must align with apps")
            freq = dict(zip(apps, freq))
        missing = [a for a in apps if a not in freq]
        if missing:
            raise ValueError(f"no frequency for apps {missing[:5]}")
        left, right = _huffman(apps, freq)
    else:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    return HsTree(apps=apps, left=tuple(left), right=tuple(right), owner=owner)


def expected_code_length(tree: HsTree, freq: Mapping[int, float]) -> float:
    """``sum_i freq(i) * (L(i) - 1)``."""
    return float(sum(freq[a] * len(tree.path(a)) for a in tree.apps))


class HsForest:
    """One :class:`HsTree` per leaf-level subcategory, with global node ids.

    Node ``k`` of the tree owned by ``z`` has global id ``offset[z] + k``;
    owners are laid out in the category tree's ``leaf_parents`` order.
    """

    def __init__(self, trees: Sequence[HsTree], num_apps: int, strategy: str = BALANCED):
        self.strategy = strategy
        self.trees = tuple(trees)
        self.num_apps = num_apps
        self.offsets = {}
        self._app_tree = {}
        off = 0
        for t in self.trees:
            self.offsets[t.owner] = off
            for a in t.apps:
                if a in self._app_tree:
                    raise DuplicateApp(f"app {a} appears in two subcategory trees")
                self._app_tree[a] = t
            off += t.num_internal
        self.num_nodes = off
        if set(self._app_tree) != set(range(num_apps)):
            raise ValueError("forest leaves must cover every app exactly once")

        self._paths = []
        for a in range(num_apps):
            t = self._app_tree[a]
            off = self.offsets[t.owner]
            self._paths.append(HsPath(tuple((off + k, d) for k, d in t.path(a).steps)))

        # flat arrays used by the vectorised scorer and the trainer
        self.path_nodes = [np.asarray(p.nodes, dtype=np.int64) for p in self._paths]
        self.path_signs = [np.asarray(p.signs, dtype=np.float64) for p in self._paths]

    def tree_of(self, owner: int) -> HsTree:
        for t in self.trees:
            if t.owner == owner:
                return t
        raise KeyError(owner)

    def hs_path(self, app: int) -> HsPath:
        if not isinstance(app, (int, np.integer)) or not 0 <= app < self.num_apps:
            raise UnknownApp(f"unknown app {app!r}")
        return self._paths[app]

    def max_depth(self) -> int:
        return max(len(p) for p in self._paths)

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "num_apps": self.num_apps,
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "HsForest":
        return cls([HsTree.from_dict(t) for t in d["trees"]], int(d["num_apps"]), d.get("strategy", BALANCED))

    def __eq__(self, other):
        return isinstance(other, HsForest) and self.to_dict() == other.to_dict()

    __hash__ = None


def build_forest(tree, strategy: str = BALANCED, app_freq: Sequence[float] | None = None) -> HsForest:
    """Build one binary tree per leaf-level subcategory of ``tree``.

    ``app_freq`` (indexed by app id) is required for the ``huffman`` strategy.
    """
    trees = []
    for z in tree.leaf_parents:
        apps = tree.apps_under(z)
        freq = None
        if strategy == HUFFMAN:
            if app_freq is None:
                raise ValueError("huffman strategy needs app frequencies")
            freq = {a: float(app_freq[a]) for a in apps}
        trees.append(build_hs_tree(apps, strategy, freq, owner=z))
    return HsForest(trees, tree.num_apps, strategy)


def hs_path(forest: HsForest, app: int) -> HsPath:
    return forest.hs_path(app)


def balanced_depth(n: int) -> int:
    return 0 if n <= 1 else math.ceil(math.log2(n))
