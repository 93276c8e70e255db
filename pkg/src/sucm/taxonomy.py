"""Category tree over apps and the choice paths it induces.

Nodes get dense integer ids in load order, apps get dense app ids in the
order their lines appear.  A node's children keep load order, so every
iteration over siblings or competing sets is reproducible.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CycleDetected,
    DuplicateApp,
    DuplicateNode,
    MixedChildKinds,
    MultipleRoots,
    OrphanNode,
    ParseError,
    TaxonomyError,
    UnknownApp,
    UnknownNode,
)

INTERNAL = "internal"
APP = "app"
_KIND_ALIASES = {"internal": INTERNAL, "category": INTERNAL, "app": APP, "leaf": APP}
ROOT_PARENT = "-"


@dataclass(frozen=True)
class Node:
    label: str
    parent: int | None
    children: tuple[int, ...]
    kind: str
    name: str
    level: int


@dataclass(frozen=True)
class ChoicePath:
    """Root-to-app path ``z_0 -> z_1 -> ... -> z_M -> app``.

    ``nodes`` holds the decision steps ``z_1..z_M``; the root is kept
    separately as ``origin`` because nothing is chosen there.
    """

    origin: int
    nodes: tuple[int, ...]
    app: int

    @property
    def M(self) -> int:
        return len(self.nodes)

    @property
    def leaf_parent(self) -> int:
        return self.nodes[-1] if self.nodes else self.origin


class CategoryTree:
    """Immutable, validated category taxonomy.  Build with :func:`build_tree`."""

    def __init__(self, nodes: Sequence[Node], root: int, app_nodes: Sequence[int]):
        self.nodes = tuple(nodes)
        self.root = root
        self.app_nodes = tuple(app_nodes)
        self._node_app = {n: a for a, n in enumerate(self.app_nodes)}
        self._label_node = {nd.label: i for i, nd in enumerate(self.nodes)}
        self._app_label_id = {self.nodes[n].label: a for a, n in enumerate(self.app_nodes)}

        self.internal_nodes = tuple(i for i, nd in enumerate(self.nodes) if nd.kind == INTERNAL)
        row = np.full(len(self.nodes), -1, dtype=np.int64)
        row[list(self.internal_nodes)] = np.arange(len(self.internal_nodes))
        row.setflags(write=False)
        self.internal_row = row

        below = [0] * len(self.nodes)
        for z in self._postorder():
            nd = self.nodes[z]
            below[z] = 1 if nd.kind == APP else sum(below[c] for c in nd.children)
        self._apps_below = tuple(below)
        self._choice_children = tuple(
            tuple(c for c in nd.children if below[c] > 0) for nd in self.nodes
        )
        self.leaf_parents = tuple(
            z for z in self.internal_nodes
            if self.nodes[z].children and self.nodes[self.nodes[z].children[0]].kind == APP
        )
        self._paths = tuple(self._walk_up(n) for n in self.app_nodes)

    # -- sizes ---------------------------------------------------------------
    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_apps(self) -> int:
        return len(self.app_nodes)

    @property
    def num_internal(self) -> int:
        return len(self.internal_nodes)

    @property
    def depth(self) -> int:
        return max(nd.level for nd in self.nodes)

    # -- accessors -------------------------------------------------------------
    def _check(self, z: int) -> Node:
        if not isinstance(z, (int, np.integer)) or not 0 <= z < len(self.nodes):
            raise UnknownNode(f"unknown node {z!r}")
        return self.nodes[z]

    def children(self, z: int) -> tuple[int, ...]:
        return self._check(z).children

    def parent(self, z: int) -> int | None:
        return self._check(z).parent

    def siblings(self, z: int) -> tuple[int, ...]:
        p = self._check(z).parent
        if p is None:
            return ()
        return tuple(c for c in self.nodes[p].children if c != z)

    def level(self, z: int) -> int:
        return self._check(z).level

    def is_app(self, z: int) -> bool:
        return self._check(z).kind == APP

    def choice_children(self, z: int) -> tuple[int, ...]:
        """Children of ``z`` that lead to at least one app (the competing set).

        Empty internal nodes are kept in the tree but never compete, so the
        cascaded probabilities still sum to one over apps.
        """
        self._check(z)
        return self._choice_children[z]

    def apps_under(self, z: int) -> tuple[int, ...]:
        """App ids of the leaf children of ``z`` (empty unless ``z`` is a z_M)."""
        return tuple(self._node_app[c] for c in self._check(z).children if c in self._node_app)

    def node_of_app(self, app: int) -> int:
        self._check_app(app)
        return self.app_nodes[app]

    def app_of_node(self, z: int) -> int:
        self._check(z)
        if z not in self._node_app:
            raise UnknownApp(f"node {z} is not an app")
        return self._node_app[z]

    def node_by_label(self, label) -> int:
        try:
            return self._label_node[str(label)]
        except KeyError:
            raise UnknownNode(f"unknown node label {label!r}") from None

    def app_by_label(self, label) -> int:
        try:
            return self._app_label_id[str(label)]
        except KeyError:
            raise UnknownApp(f"unknown app {label!r}") from None

    def app_label(self, app: int) -> str:
        return self.nodes[self.node_of_app(app)].label

    @property
    def app_labels(self) -> tuple[str, ...]:
        return tuple(self.nodes[n].label for n in self.app_nodes)

    def _check_app(self, app) -> None:
        if not isinstance(app, (int, np.integer)) or not 0 <= app < len(self.app_nodes):
            raise UnknownApp(f"unknown app {app!r}")

    # -- paths ---------------------------------------------------------------
    def choice_path(self, app: int) -> ChoicePath:
        self._check_app(app)
        return self._paths[app]

    def _walk_up(self, leaf: int) -> ChoicePath:
        chain = []
        z = self.nodes[leaf].parent
        while z is not None:
            chain.append(z)
            z = self.nodes[z].parent
        chain.reverse()
        return ChoicePath(origin=chain[0], nodes=tuple(chain[1:]), app=self._node_app[leaf])

    def _postorder(self) -> list[int]:
        out, stack = [], [(self.root, False)]
        while stack:
            z, done = stack.pop()
            if done:
                out.append(z)
                continue
            stack.append((z, True))
            stack.extend((c, False) for c in reversed(self.nodes[z].children))
        return out

    def preorder(self) -> list[int]:
        return _preorder(self.nodes, self.root)

    # -- serialisation -------------------------------------------------------
    def edges(self) -> list[tuple[str, str, str, str]]:
        """``(node, parent, kind, name)`` rows in load order; feeds :func:`build_tree`."""
        return [
            (nd.label, ROOT_PARENT if nd.parent is None else self.nodes[nd.parent].label, nd.kind, nd.name)
            for nd in self.nodes
        ]

    def __eq__(self, other):
        return isinstance(other, CategoryTree) and self.edges() == other.edges()

    def __hash__(self):
        return hash(tuple(self.edges()))

    def __repr__(self):
        return (f"CategoryTree(nodes={self.num_nodes}, internal={self.num_internal}, "
                f"apps={self.num_apps}, depth={self.depth})")


def _preorder(nodes, root):
    out, stack = [], [root]
    while stack:
        z = stack.pop()
        out.append(z)
        stack.extend(reversed(nodes[z].children))
    return out


def build_tree(edges: Iterable[Sequence]) -> CategoryTree:
    """Validate an edge list ``(node, parent, kind, name)`` and build the tree.

    ``parent`` is ``None`` or ``"-"`` for the root.  ``kind`` is ``internal``
    or ``app`` (``leaf``/``category`` accepted as aliases).
    """
    rows = []
    for row in edges:
        if len(row) == 3:
            node, parent, kind = row
            name = str(node)
        else:
            node, parent, kind, name = row
        kind_n = _KIND_ALIASES.get(str(kind).strip().lower())
        if kind_n is None:
            raise TaxonomyError(f"node {node!r}: unknown kind {kind!r}")
        parent = None if parent is None or str(parent) == ROOT_PARENT else str(parent)
        rows.append((str(node), parent, kind_n, str(name)))
    if not rows:
        raise TaxonomyError("empty edge list")

    index: dict[str, int] = {}
    for i, (node, _, kind, _) in enumerate(rows):
        if node in index:
            if kind == APP or rows[index[node]][2] == APP:
                raise DuplicateApp(f"app {node!r} listed more than once")
            raise DuplicateNode(f"node {node!r} listed more than once")
        index[node] = i

    parents: list[int | None] = []
    for node, parent, _, _ in rows:
        if parent is None:
            parents.append(None)
        elif parent not in index:
            raise OrphanNode(f"node {node!r} has unknown parent {parent!r}")
        else:
            parents.append(index[parent])

    roots = [i for i, p in enumerate(parents) if p is None]
    if len(roots) > 1:
        raise MultipleRoots("roots: " + ", ".join(rows[r][0] for r in roots))
    if not roots:
        raise CycleDetected("no root: every node has a parent, so the parent links contain a cycle")
    root = roots[0]

    children: list[list[int]] = [[] for _ in rows]
    for i, p in enumerate(parents):
        if p is not None:
            children[p].append(i)

    level = [-1] * len(rows)
    level[root] = 0
    queue = deque([root])
    while queue:
        z = queue.popleft()
        for c in children[z]:
            level[c] = level[z] + 1
            queue.append(c)
    unreached = [rows[i][0] for i, lv in enumerate(level) if lv < 0]
    if unreached:
        raise CycleDetected("nodes on or below a cycle: " + ", ".join(unreached[:10]))

    for i, (node, _, kind, _) in enumerate(rows):
        kinds = {rows[c][2] for c in children[i]}
        if kind == APP and children[i]:
            raise TaxonomyError(f"app {node!r} has children")
        if len(kinds) > 1:
            raise MixedChildKinds(f"node {node!r} mixes app and category children")

    apps = [i for i, r in enumerate(rows) if r[2] == APP]
    if not apps:
        raise TaxonomyError("taxonomy has no apps")
    nodes = [
        Node(label=r[0], parent=parents[i], children=tuple(children[i]), kind=r[2], name=r[3], level=level[i])
        for i, r in enumerate(rows)
    ]
    return CategoryTree(nodes, root, apps)


def parse_taxonomy(lines: Iterable[str]) -> CategoryTree:
    rows = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4):
            raise ParseError(f"expected 3 or 4 tab-separated fields, got {len(parts)}", lineno)
        rows.append(tuple(p.strip() for p in parts))
    return build_tree(rows)


def load_taxonomy(path) -> CategoryTree:
    """Read a taxonomy TSV: ``node_id<TAB>parent_id<TAB>kind<TAB>name``."""
    with open(path, encoding="utf-8") as fh:
        return parse_taxonomy(fh)


def format_taxonomy(tree: CategoryTree) -> str:
    out = ["# node_id\tparent_id\tkind\tname"]
    out.extend("\t".join(e) for e in tree.edges())
    return "\n".join(out) + "\n"


def save_taxonomy(tree: CategoryTree, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_taxonomy(tree))
