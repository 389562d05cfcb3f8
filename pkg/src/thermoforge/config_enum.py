"""Coolant-routing configurations as rooted labeled forests.

Nodes 1..n are cold-plate heat exchangers (CPHXs). The pump/tank junction is
a virtual parent labeled -1; every root hangs off it. Children of a vertex
are unordered, so a configuration is fully determined by its parent array,
which also serves as the canonical serialization.
"""

from __future__ import annotations

import functools
import itertools
import json
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

from .errors import StructureError, ValidationError

TANK = -1

# Enumeration sizes grow like (n+1)^(n-1); six nodes is the supported ceiling.
MAX_NODES = 6


@dataclass(frozen=True)
class ConfigGraph:
    """A rooted labeled forest: parents[i] is the parent of node i+1."""

    n_nodes: int
    parents: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.n_nodes < 1:
            raise ValidationError(f"need at least one node, got {self.n_nodes}")
        parents = tuple(int(p) for p in self.parents)
        object.__setattr__(self, "parents", parents)
        if len(parents) != self.n_nodes:
            raise ValidationError(
                f"parents has length {len(parents)}, expected {self.n_nodes}"
            )
        for i, p in enumerate(parents):
            node = i + 1
            if p == node:
                raise ValidationError(f"node {node} is its own parent")
            if p != TANK and not 1 <= p <= self.n_nodes:
                raise ValidationError(f"node {node} has parent {p} outside 1..{self.n_nodes}")

    def parent(self, node: int) -> int:
        return self.parents[node - 1]

    def children(self, node: int) -> tuple[int, ...]:
        """Children of `node` (or of the tank when node == TANK), ascending."""
        return tuple(
            i + 1 for i, p in enumerate(self.parents) if p == node
        )

    def roots(self) -> tuple[int, ...]:
        return self.children(TANK)

    def leaves(self) -> tuple[int, ...]:
        kids = set(p for p in self.parents if p != TANK)
        return tuple(v for v in range(1, self.n_nodes + 1) if v not in kids)

    def canonical_key(self) -> tuple:
        return (len(self.roots()), self.parents)

    def to_json(self) -> str:
        return json.dumps(
            {"n_nodes": self.n_nodes, "parents": list(self.parents)},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ConfigGraph":
        try:
            obj = json.loads(text)
            return cls(int(obj["n_nodes"]), tuple(obj["parents"]))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"malformed configuration JSON: {exc}") from exc

    @classmethod
    def from_branches(cls, n_nodes: int, branches: Iterable[Sequence[int]]) -> "ConfigGraph":
        """Build from tank-level chains, e.g. [[2, 3], [1]]; order is irrelevant."""
        parents = [0] * n_nodes
        seen: set[int] = set()
        for chain in branches:
            prev = TANK
            for node in chain:
                if not 1 <= node <= n_nodes:
                    raise ValidationError(f"branch node {node} outside 1..{n_nodes}")
                if node in seen:
                    raise ValidationError(f"node {node} appears in two branches")
                seen.add(node)
                parents[node - 1] = prev
                prev = node
        if len(seen) != n_nodes:
            missing = sorted(set(range(1, n_nodes + 1)) - seen)
            raise ValidationError(f"branches omit nodes {missing}")
        return cls(n_nodes, tuple(parents))


@dataclass(frozen=True)
class ConfigClassification:
    kind: str  # "single_split" or "multi_split"
    depth: int  # longest root-to-leaf path length in nodes


def canonicalize(graph: ConfigGraph) -> ConfigGraph:
    """Validate forest structure and return the canonical instance.

    The parent array is already order-free (children are unordered sets), so
    canonical bytes are just the JSON of the validated graph. Idempotent.
    Raises StructureError on parent cycles.
    """
    _walk_depths(graph)
    return ConfigGraph(graph.n_nodes, graph.parents)


def _walk_depths(graph: ConfigGraph) -> list[int]:
    """Edge-distance of each node from the tank; raises on cycles."""
    depths = [0] * graph.n_nodes
    for start in range(1, graph.n_nodes + 1):
        node, hops = start, 0
        while node != TANK:
            node = graph.parent(node)
            hops += 1
            if hops > graph.n_nodes:
                raise StructureError(f"cycle in parents at node {start}")
        depths[start - 1] = hops
    return depths


def relabel(graph: ConfigGraph, perm: Sequence[int]) -> ConfigGraph:
    """Apply permutation perm (perm[i-1] = new label of node i)."""
    if sorted(perm) != list(range(1, graph.n_nodes + 1)):
        raise ValidationError(f"not a permutation of 1..{graph.n_nodes}: {perm!r}")
    parents = [0] * graph.n_nodes
    for node in range(1, graph.n_nodes + 1):
        p = graph.parent(node)
        parents[perm[node - 1] - 1] = TANK if p == TANK else perm[p - 1]
    return ConfigGraph(graph.n_nodes, tuple(parents))


def classify_shape(graph: ConfigGraph) -> ConfigClassification:
    graph = canonicalize(graph)
    multi = any(
        len(graph.children(v)) >= 2 for v in range(1, graph.n_nodes + 1)
    )
    depth = max(_walk_depths(graph))
    return ConfigClassification("multi_split" if multi else "single_split", depth)


def is_all_parallel(graph: ConfigGraph) -> bool:
    return all(p == TANK for p in graph.parents)


def is_series_chain(graph: ConfigGraph, order: Sequence[int] | None = None) -> bool:
    """True when the forest is one chain; with `order`, that exact chain."""
    if len(graph.roots()) != 1:
        return False
    chain = []
    node: int | None = graph.roots()[0]
    while node is not None:
        chain.append(node)
        kids = graph.children(node)
        if len(kids) > 1:
            return False
        node = kids[0] if kids else None
    if len(chain) != graph.n_nodes:
        return False
    return order is None or list(order) == chain


def _check_n(n: int) -> None:
    if not 1 <= n <= MAX_NODES:
        raise ValidationError(f"node count {n} outside 1..{MAX_NODES}")


@functools.lru_cache(maxsize=None)
def _single_split_cached(n: int) -> tuple[ConfigGraph, ...]:
    graphs = []
    for chains in _chain_partitions(tuple(range(1, n + 1))):
        graphs.append(ConfigGraph.from_branches(n, chains))
    graphs.sort(key=ConfigGraph.canonical_key)
    return tuple(graphs)


def _chain_partitions(items: tuple[int, ...]) -> Iterator[list[list[int]]]:
    """All partitions of `items` into a set of ordered chains.

    Items are inserted in order, each either opening a new chain or landing in
    any slot of an existing chain, so every partition appears exactly once.
    """
    if not items:
        yield []
        return
    head, rest = items[0], items[1:]
    stack: list[tuple[list[list[int]], tuple[int, ...]]] = [([[head]], rest)]
    while stack:
        chains, todo = stack.pop()
        if not todo:
            yield [list(c) for c in chains]
            continue
        nxt, todo = todo[0], todo[1:]
        stack.append((chains + [[nxt]], todo))
        for ci, chain in enumerate(chains):
            for slot in range(len(chain) + 1):
                grown = chain[:slot] + [nxt] + chain[slot:]
                stack.append((chains[:ci] + [grown] + chains[ci + 1 :], todo))


def enumerate_single_split(n: int) -> list[ConfigGraph]:
    """All forests of chains on n nodes (splits only at the tank junction).

    Canonical order: tank-branch count ascending, then parent-array order.
    """
    _check_n(n)
    return list(_single_split_cached(n))


def _forest_parent_maps(nodes: tuple[int, ...]) -> Iterator[dict[int, int]]:
    """Every rooted forest on `nodes` as a parent map (roots map to TANK)."""
    if not nodes:
        yield {}
        return
    for r in range(1, len(nodes) + 1):
        for roots in itertools.combinations(nodes, r):
            rootset = set(roots)
            others = tuple(x for x in nodes if x not in rootset)
            for owner in itertools.product(range(r), repeat=len(others)):
                parts: list[list[int]] = [[] for _ in roots]
                for x, oi in zip(others, owner):
                    parts[oi].append(x)
                subtrees = [
                    list(_tree_parent_maps(root, tuple(part)))
                    for root, part in zip(roots, parts)
                ]
                for combo in itertools.product(*subtrees):
                    merged = {root: TANK for root in roots}
                    for sub in combo:
                        merged.update(sub)
                    yield merged


def _tree_parent_maps(root: int, nodes: tuple[int, ...]) -> Iterator[dict[int, int]]:
    for forest in _forest_parent_maps(nodes):
        yield {x: (root if p == TANK else p) for x, p in forest.items()}


def _split_depth_ok(graph: ConfigGraph, max_depth: int) -> bool:
    """Check every splitting CPHX sits at split-depth <= max_depth.

    The tank junction is split-depth 1; a splitting CPHX has depth 1 plus the
    number of splitting CPHXs on its tank path, itself included. Hence
    max_depth == 1 admits tank-only splits and no multi-split graph at all.
    """
    for v in range(1, graph.n_nodes + 1):
        if len(graph.children(v)) < 2:
            continue
        depth, node = 1, v
        while node != TANK:
            if len(graph.children(node)) >= 2:
                depth += 1
            node = graph.parent(node)
        if depth > max_depth:
            return False
    return True


@functools.lru_cache(maxsize=None)
def _multi_split_cached(n: int, max_depth: int) -> tuple[ConfigGraph, ...]:
    graphs = []
    for pmap in _forest_parent_maps(tuple(range(1, n + 1))):
        g = ConfigGraph(n, tuple(pmap[v] for v in range(1, n + 1)))
        if classify_shape(g).kind != "multi_split":
            continue
        if _split_depth_ok(g, max_depth):
            graphs.append(g)
    graphs.sort(key=ConfigGraph.canonical_key)
    return tuple(graphs)


def enumerate_multi_split(n: int, max_depth: int | None = None) -> list[ConfigGraph]:
    """All forests on n nodes where some CPHX splits, split-depth limited.

    max_depth >= n (or None) lifts the depth limit entirely.
    """
    _check_n(n)
    if max_depth is None:
        max_depth = n
    if max_depth < 1:
        raise ValidationError(f"max_depth must be >= 1, got {max_depth}")
    return list(_multi_split_cached(n, min(max_depth, n)))


def enumerate_all(n: int, max_depth: int | None = None) -> list[ConfigGraph]:
    """Single-split and multi-split configurations merged in canonical order."""
    merged = enumerate_single_split(n) + enumerate_multi_split(n, max_depth)
    merged.sort(key=ConfigGraph.canonical_key)
    return merged


def single_split_count(n: int) -> int:
    _check_n(n)
    return len(_single_split_cached(n))


def group_by_parent(system) -> list[tuple[int, tuple[int, ...]]]:
    """Extract and validate (anchor, member ids) groups from a system spec.

    `system` carries `junctions` (objects with .id and .anchor) and `groups`
    (objects with .anchor and .node_ids). Anchors must be the tank or a
    declared junction CPHX; every leaf CPHX must appear in exactly one group,
    every junction exactly once as a junction. Node ids must cover 1..n_total.
    """
    junction_anchor: dict[int, int] = {}
    for j in system.junctions:
        jid, anchor = int(j.id), int(j.anchor)
        if jid < 1:
            raise ValidationError(f"junction id {jid} must be >= 1")
        if jid in junction_anchor:
            raise ValidationError(f"junction {jid} declared twice")
        junction_anchor[jid] = anchor

    valid_anchors = {TANK} | set(junction_anchor)
    for jid, anchor in junction_anchor.items():
        if anchor not in valid_anchors or anchor == jid:
            raise StructureError(f"junction {jid} anchored to unknown node {anchor}")
    for jid in junction_anchor:
        node, hops = jid, 0
        while node != TANK:
            node = junction_anchor[node]
            hops += 1
            if hops > len(junction_anchor):
                raise StructureError(f"junction anchors form a cycle at {jid}")

    groups: list[tuple[int, tuple[int, ...]]] = []
    seen: set[int] = set(junction_anchor)
    for spec in system.groups:
        anchor = int(spec.anchor)
        if anchor not in valid_anchors:
            raise StructureError(f"group anchored to unknown node {anchor}")
        members = tuple(int(x) for x in spec.node_ids)
        if not members:
            raise ValidationError("empty group")
        for m in members:
            if m in seen:
                raise ValidationError(f"node {m} belongs to two groups or is a junction")
            seen.add(m)
        groups.append((anchor, members))

    n_total = len(seen)
    if seen != set(range(1, n_total + 1)):
        raise ValidationError(f"node ids must cover 1..{n_total}, got {sorted(seen)}")
    groups.sort(key=lambda g: (g[0], g[1]))
    return groups


def composite_space_size(groups: Sequence[tuple[int, tuple[int, ...]]]) -> int:
    """Number of composite designs: product of per-group single-split counts."""
    size = 1
    for _, members in groups:
        size *= single_split_count(len(members))
    return size
