"""Random forest on formula residuals whose leaves are read off as groups.

Each tree is grown best-first on a bootstrap sample of the binary group
components. Every terminal node is recorded with the canonical signature of
its root-to-leaf path, its in-bag size and its mean in-bag residual.

Because all split variables are binary, rows sharing a component pattern
always travel together. Trees are therefore grown on per-pattern sufficient
statistics (bootstrap count, residual sum), which is exact and makes a tree
cost O(patterns) after the O(n) bootstrap.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .domain import AuditConfig, ConfigError, GroupSignature, canonicalize
from .rng import tree_stream

# A split must remove more than this fraction of the node's sum of squares.
ZERO_REDUCTION_RTOL = 1e-12
# Reductions within this relative distance count as tied.
TIE_RTOL = 1e-9


@dataclass(frozen=True)
class Leaf:
    signature: GroupSignature | None
    member_count: int
    mean_residual: float


@dataclass(frozen=True)
class TreeNode:
    """Internal node (``component`` set) or leaf (``leaf`` set).

    ``absent`` holds rows without the component, ``present`` rows with it.
    """

    component: int | None = None
    absent: "TreeNode | None" = None
    present: "TreeNode | None" = None
    leaf: Leaf | None = None

    @property
    def is_leaf(self) -> bool:
        return self.leaf is not None

    def as_tuple(self):
        if self.is_leaf:
            return (self.leaf.signature, self.leaf.member_count, self.leaf.mean_residual)
        return (self.component, self.absent.as_tuple(), self.present.as_tuple())


@dataclass(frozen=True)
class TreeRecord:
    tree_index: int
    leaves: tuple[Leaf, ...]
    oob_mse: float
    root: TreeNode

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)


def better(reduction: float, incumbent: float | None) -> bool:
    """Whether ``reduction`` beats ``incumbent`` by more than the tie tolerance."""
    return incumbent is None or reduction > incumbent * (1.0 + TIE_RTOL)


def choose_split(candidates: Sequence[int], total_w: float, total_s: float, total_ss: float,
                 w_present: np.ndarray, s_present: np.ndarray, min_node_size: int):
    """Pick the best legal split from per-candidate present-side sums.

    ``candidates`` must be sorted ascending so ties go to the lowest index.
    Returns ``(component, reduction)`` or ``None``.
    """
    best, best_red = None, None
    floor = ZERO_REDUCTION_RTOL * total_ss
    for c, wr, sr in zip(candidates, w_present, s_present):
        wl = total_w - wr
        if wl < min_node_size or wr < min_node_size:
            continue
        sl = total_s - sr
        diff = sl / wl - sr / wr
        red = (wl * wr / total_w) * diff * diff
        if red <= floor:
            continue
        if better(red, best_red):
            best, best_red = int(c), float(red)
    return None if best is None else (best, best_red)


def best_split(components: np.ndarray, residuals: np.ndarray, candidates: Iterable[int],
               min_node_size: int, weights: np.ndarray | None = None):
    """Best variance-reducing split of a row set over ``candidates``.

    Parameters
    ----------
    components : (n, s) array of 0/1
    residuals : (n,) array
    candidates : component indices to try
    min_node_size : smallest admissible child (counting ``weights``)
    weights : optional per-row multiplicities, e.g. bootstrap counts

    Returns
    -------
    ``(component_index, sse_reduction)``, or ``None`` when no candidate
    yields two admissible children with a positive reduction.
    """
    cands = sorted(set(int(c) for c in candidates))
    if len(residuals) == 0:
        raise ValueError("best_split needs at least one row")
    r = np.asarray(residuals, dtype=np.float64)
    w = np.ones_like(r) if weights is None else np.asarray(weights, dtype=np.float64)
    if not cands:
        return None
    X = np.asarray(components)[:, cands].astype(np.float64)
    wr_ = w * r
    return choose_split(cands, w.sum(), wr_.sum(), (wr_ * r).sum(),
                        w @ X, wr_ @ X, min_node_size)


@dataclass(frozen=True, eq=False)
class PatternTable:
    """Distinct component patterns and the row -> pattern map."""

    patterns: np.ndarray  # (P, s) uint8
    inverse: np.ndarray  # (n,) pattern of each row
    residuals: np.ndarray

    @classmethod
    def build(cls, components: np.ndarray, residuals: np.ndarray) -> "PatternTable":
        components = np.asarray(components, dtype=np.uint8)
        if components.shape[0] != len(residuals):
            raise ValueError("components and residuals are not row-aligned")
        patterns, inverse = np.unique(components, axis=0, return_inverse=True)
        return cls(patterns, inverse.reshape(-1), np.asarray(residuals, dtype=np.float64))

    @property
    def n_rows(self) -> int:
        return len(self.inverse)

    @property
    def n_components(self) -> int:
        return self.patterns.shape[1]


def bootstrap_counts(rng: np.random.Generator, n: int) -> np.ndarray:
    """Multiplicity of each row in a size-``n`` draw with replacement."""
    return np.bincount(rng.integers(0, n, size=n), minlength=n)


def _as_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.Generator(np.random.Philox(rng))


class _Node:
    __slots__ = ("pidx", "path", "w", "s", "ss", "split", "order")

    def __init__(self, pidx, path, cnt, s1, s2, order):
        self.pidx = pidx
        self.path = path
        self.w = float(cnt[pidx].sum())
        self.s = float(s1[pidx].sum())
        self.ss = float(s2[pidx].sum())
        self.split = None
        self.order = order

    @property
    def path_indices(self):
        return [c for c, _ in self.path]


def grow_tree(components, residuals, config: AuditConfig, rng, *, tree_index: int = 0,
              weights: np.ndarray | None = None, table: PatternTable | None = None) -> TreeRecord:
    """Grow one tree on a bootstrap sample of the rows.

    The bootstrap is drawn from ``rng`` unless ``weights`` (per-row in-bag
    multiplicities) are given. Growth is best-first: the frontier leaf whose
    best legal split removes the most squared error is expanded next, until
    ``max_leaf_nodes`` is reached or no leaf can be split. Each leaf draws
    its own ``mtry`` candidates from the components unused on its path.
    """
    if table is None:
        table = PatternTable.build(components, residuals)
    s = table.n_components
    if config.mtry > s:
        raise ConfigError(f"mtry: {config.mtry} exceeds the {s} available components")
    rng = _as_rng(rng)
    n = table.n_rows
    w = bootstrap_counts(rng, n) if weights is None else np.asarray(weights)
    if len(w) != n:
        raise ValueError("weights are not row-aligned")

    r = table.residuals
    inv = table.inverse
    P = len(table.patterns)
    wf = w.astype(np.float64)
    cnt = np.bincount(inv, weights=wf, minlength=P)
    s1 = np.bincount(inv, weights=wf * r, minlength=P)
    s2 = np.bincount(inv, weights=wf * r * r, minlength=P)
    oob = (w == 0).astype(np.float64)
    o0 = np.bincount(inv, weights=oob, minlength=P)
    o1 = np.bincount(inv, weights=oob * r, minlength=P)
    o2 = np.bincount(inv, weights=oob * r * r, minlength=P)

    X = table.patterns
    min_size = config.min_node_size
    counter = iter(range(1 << 62))

    def evaluate(node: _Node):
        if node.w < 2 * min_size:
            return
        used = set(node.path_indices)
        avail = [c for c in range(s) if c not in used]
        if not avail:
            return
        k = min(config.mtry, len(avail))
        cands = sorted(int(c) for c in rng.choice(avail, size=k, replace=False))
        M = X[np.ix_(node.pidx, cands)].astype(np.float64)
        node.split = choose_split(cands, node.w, node.s, node.ss,
                                  cnt[node.pidx] @ M, s1[node.pidx] @ M, min_size)

    root = _Node(np.arange(P), (), cnt, s1, s2, next(counter))
    evaluate(root)
    children: dict[int, tuple[int, _Node, _Node]] = {}
    frontier = [root] if root.split else []
    n_leaves = 1
    while frontier and n_leaves < config.max_leaf_nodes:
        pick = None
        for node in frontier:  # creation order, so ties favor the older leaf
            if pick is None or better(node.split[1], pick.split[1]):
                pick = node
        frontier.remove(pick)
        c = pick.split[0]
        has = X[pick.pidx, c] == 1
        absent = _Node(pick.pidx[~has], pick.path + ((c, False),), cnt, s1, s2, next(counter))
        present = _Node(pick.pidx[has], pick.path + ((c, True),), cnt, s1, s2, next(counter))
        children[id(pick)] = (c, absent, present)
        n_leaves += 1
        for child in (absent, present):
            evaluate(child)
            if child.split:
                frontier.append(child)

    leaves: list[Leaf] = []
    oob_sse, oob_n = 0.0, 0.0

    def finish(node: _Node) -> TreeNode:
        nonlocal oob_sse, oob_n
        if id(node) in children:
            c, a, p = children[id(node)]
            return TreeNode(component=c, absent=finish(a), present=finish(p))
        mean = node.s / node.w
        leaf = Leaf(canonicalize(node.path) if node.path else None, int(round(node.w)), mean)
        leaves.append(leaf)
        c0, c1, c2 = o0[node.pidx].sum(), o1[node.pidx].sum(), o2[node.pidx].sum()
        oob_sse += c2 - 2.0 * mean * c1 + mean * mean * c0
        oob_n += c0
        return TreeNode(leaf=leaf)

    tree_root = finish(root)
    oob_mse = max(oob_sse, 0.0) / oob_n if oob_n else float("nan")
    return TreeRecord(tree_index, tuple(leaves), float(oob_mse), tree_root)


def grow_forest(components, residuals, config: AuditConfig, year: int, threads: int = 1,
                n_trees: int | None = None) -> list[TreeRecord]:
    """Grow ``config.n_trees`` trees; tree ``t`` uses substream ``(seed, year, t)``."""
    n_trees = config.n_trees if n_trees is None else n_trees
    if config.mtry > np.asarray(components).shape[1]:
        raise ConfigError(f"mtry: {config.mtry} exceeds the number of components")
    table = PatternTable.build(components, residuals)

    def one(t):
        return grow_tree(None, None, config, tree_stream(config.master_seed, year, t),
                         tree_index=t, table=table)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, range(n_trees)))
    return [one(t) for t in range(n_trees)]
