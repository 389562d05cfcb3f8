"""Design estimation for multi-junction systems built from trained group models.

A complex loop is described as junction CPHXs plus groups of leaf CPHXs
anchored to the tank or to a junction. Each group's configuration is an
independent choice from the single-split family of its size, so the composite
design space is the product of per-group families. Estimation predicts each
group locally with a trained classifier and stitches the winners; evaluation
ranks the stitched design against uniformly sampled composite alternatives.

The 4-to-3 merge path trades a 73-configuration sweep for 6 candidate solves:
merge one pair of nodes, predict the optimal 3-node shape, then expand the
merged node back into a series pair.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .config_enum import (
    TANK,
    ConfigGraph,
    canonicalize,
    composite_space_size,
    enumerate_single_split,
    group_by_parent,
    relabel,
)
from .errors import ValidationError
from .knowledge import KnnModel, featurize, predict
from .oloc_solver import OlocOptions
from .study_runner import _solve_cell, resolve_workers

# Composition work runs many solves per call, so the default collocation grid
# is coarser than the solver's own default. Callers pass options to override.
REDUCED_SEGMENTS = 10

# rng.choice without replacement materializes the whole index range; above
# this size distinct draws come from a rejection loop instead.
_CHOICE_LIMIT = 10_000_000


@dataclass(frozen=True)
class JunctionNode:
    """A CPHX that other components hang from. Anchor is TANK or another junction."""

    id: int
    anchor: int


@dataclass(frozen=True)
class NodeGroup:
    """Leaf CPHXs sharing an anchor; their internal routing is the free choice."""

    anchor: int
    node_ids: tuple[int, ...]


@dataclass(frozen=True)
class ComplexSystemSpec:
    """Junction skeleton, leaf groups, and per-node heat loads in kW.

    Node ids must cover 1..n exactly once across junctions and group members.
    Anchors must form a tree rooted at the tank; group_by_parent enforces that
    along with the coverage rule.
    """

    junctions: tuple[JunctionNode, ...]
    groups: tuple[NodeGroup, ...]
    loads: dict[int, float]

    def validate(self) -> "ComplexSystemSpec":
        parsed = group_by_parent(self)
        ids = {j.id for j in self.junctions}
        for _, members in parsed:
            ids.update(members)
        n = len(ids)
        extra = set(self.loads) - ids
        if extra:
            raise ValidationError(f"loads given for unknown nodes {sorted(extra)}")
        for node in range(1, n + 1):
            if node not in self.loads:
                raise ValidationError(f"missing load for node {node}")
            value = float(self.loads[node])
            if not np.isfinite(value) or value < 0:
                raise ValidationError(f"load for node {node} must be finite and >= 0")
        return self

    @property
    def n_nodes(self) -> int:
        return len(self.loads)

    def load_vector(self) -> list[float]:
        return [float(self.loads[i]) for i in range(1, self.n_nodes + 1)]

    def to_dict(self) -> dict:
        return {
            "junctions": [{"id": j.id, "anchor": j.anchor} for j in self.junctions],
            "groups": [
                {
                    "anchor": g.anchor,
                    "node_ids": list(g.node_ids),
                    "loads": [float(self.loads[m]) for m in g.node_ids],
                }
                for g in self.groups
            ],
            "loads": {str(j.id): float(self.loads[j.id]) for j in self.junctions},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ComplexSystemSpec":
        try:
            junctions = tuple(
                JunctionNode(id=int(j["id"]), anchor=int(j["anchor"]))
                for j in obj.get("junctions", [])
            )
            raw_groups = list(obj.get("groups", []))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed system spec: {exc}") from exc

        loads: dict[int, float] = {}

        def put(node: int, value: float) -> None:
            if node in loads and loads[node] != value:
                raise ValidationError(
                    f"conflicting loads for node {node}: {loads[node]} vs {value}"
                )
            loads[node] = value

        for key, value in dict(obj.get("loads", {})).items():
            put(int(key), float(value))
        groups = []
        for g in raw_groups:
            members = tuple(int(m) for m in g["node_ids"])
            groups.append(NodeGroup(anchor=int(g["anchor"]), node_ids=members))
            group_loads = g.get("loads")
            if group_loads is not None:
                if len(group_loads) != len(members):
                    raise ValidationError(
                        f"group {members} has {len(group_loads)} loads for "
                        f"{len(members)} nodes"
                    )
                for m, value in zip(members, group_loads):
                    put(m, float(value))
        return cls(junctions=junctions, groups=tuple(groups), loads=loads).validate()


# ---- composition ------------------------------------------------------------------


def _stitch_group(
    parents: list[int], anchor: int, members: Sequence[int], local: ConfigGraph
) -> None:
    """Write a group's local routing into the global parent array.

    Local node i stands for members[i-1]; the local tank becomes the anchor.
    """
    for i, m in enumerate(members, start=1):
        p = local.parent(i)
        parents[m - 1] = anchor if p == TANK else members[p - 1]


def _skeleton(spec: ComplexSystemSpec) -> list[int]:
    parents = [TANK] * spec.n_nodes
    for j in spec.junctions:
        parents[j.id - 1] = j.anchor
    return parents


def compose_design(spec: ComplexSystemSpec, assignment: Sequence[int]) -> ConfigGraph:
    """Build the full graph for one point of the composite space.

    assignment[g] indexes the single-split family of group g, with groups in
    group_by_parent order.
    """
    spec.validate()
    groups = group_by_parent(spec)
    if len(assignment) != len(groups):
        raise ValidationError(
            f"assignment has {len(assignment)} entries for {len(groups)} groups"
        )
    parents = _skeleton(spec)
    for (anchor, members), idx in zip(groups, assignment):
        family = enumerate_single_split(len(members))
        idx = int(idx)
        if not 0 <= idx < len(family):
            raise ValidationError(
                f"group {members}: index {idx} outside family of {len(family)}"
            )
        _stitch_group(parents, anchor, members, family[idx])
    return canonicalize(ConfigGraph(spec.n_nodes, tuple(parents)))


def _predict_local(model: KnnModel, loads: Sequence[float], n_nodes: int) -> ConfigGraph:
    """Predict a group's configuration; returns a graph over 1..n_nodes.

    Models with the magnitude feature are trained on descending-sorted
    populations, so the query is sorted the same way and the predicted shape
    is relabeled back to the caller's node order. Fraction-only models are
    trained on unsorted samples and queried as-is.
    """
    d = np.asarray(loads, dtype=float)
    if model.spec.mode == "normalized_plus_magnitude":
        order = np.argsort(-d, kind="stable")
    else:
        order = np.arange(n_nodes)
    label = predict(model, featurize(d[order], model.spec))
    family = enumerate_single_split(n_nodes)
    if not 0 <= label < len(family):
        raise ValidationError(
            f"model predicted label {label} outside the {len(family)}-config "
            f"family for {n_nodes} nodes"
        )
    return relabel(family[label], [int(order[i]) + 1 for i in range(n_nodes)])


def compose_estimate(
    spec: ComplexSystemSpec, models: Mapping[int, KnnModel]
) -> ConfigGraph:
    """Predict each group's routing with its size's model and stitch the results.

    Single-node groups are a bare branch and never consult a model. A missing
    model for any larger group size is an error.
    """
    spec.validate()
    groups = group_by_parent(spec)
    parents = _skeleton(spec)
    for anchor, members in groups:
        k = len(members)
        if k == 1:
            parents[members[0] - 1] = anchor
            continue
        model = models.get(k)
        if model is None:
            raise ValidationError(f"no trained model for groups of {k} nodes")
        local = _predict_local(model, [spec.loads[m] for m in members], k)
        _stitch_group(parents, anchor, members, local)
    return canonicalize(ConfigGraph(spec.n_nodes, tuple(parents)))


# ---- shared solving ---------------------------------------------------------------


def _objectives(
    graphs: Sequence[ConfigGraph],
    loads_kw: Sequence[float],
    options: OlocOptions | None,
    workers: int | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Endurance objective for each graph; duplicates are solved once.

    Returns (objectives, converged) aligned with graphs. Non-converged solves
    report their re-simulated feasibility value, matching study datasets.
    """
    opts = (options or OlocOptions(segments=REDUCED_SEGMENTS)).validate()
    workers = resolve_workers(workers)
    unique: dict[tuple[int, ...], int] = {}
    reps: list[tuple[int, ...]] = []
    for g in graphs:
        if g.parents not in unique:
            unique[g.parents] = len(reps)
            reps.append(g.parents)

    loads = tuple(float(v) for v in loads_kw)
    tasks = [(u, 0, parents, loads, opts.to_dict()) for u, parents in enumerate(reps)]
    obj_u = np.zeros(len(reps))
    conv_u = np.zeros(len(reps), dtype=bool)
    if workers == 1 or len(tasks) <= 1:
        results = map(_solve_cell, tasks)
        for u, _, value, ok in results:
            obj_u[u] = value
            conv_u[u] = ok
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for u, _, value, ok in pool.map(_solve_cell, tasks, chunksize=4):
                obj_u[u] = value
                conv_u[u] = ok
    take = np.array([unique[g.parents] for g in graphs], dtype=int)
    return obj_u[take], conv_u[take]


# ---- percentile evaluation --------------------------------------------------------


@dataclass(frozen=True)
class PercentileReport:
    """Where a design's objective sits among sampled composite alternatives."""

    design_objective: float
    design_converged: bool
    objectives: np.ndarray  # aligned with indices
    converged: np.ndarray
    indices: np.ndarray  # composite-space indices, ascending
    percentile: float  # 100 * fraction of samples <= design objective
    space_size: int
    exhaustive: bool

    def to_dict(self) -> dict:
        return {
            "design_objective": float(self.design_objective),
            "design_converged": bool(self.design_converged),
            "objectives": [float(v) for v in self.objectives],
            "converged": [bool(v) for v in self.converged],
            "indices": [int(v) for v in self.indices],
            "percentile": float(self.percentile),
            "space_size": int(self.space_size),
            "exhaustive": bool(self.exhaustive),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PercentileReport":
        try:
            return cls(
                design_objective=float(obj["design_objective"]),
                design_converged=bool(obj["design_converged"]),
                objectives=np.asarray(obj["objectives"], dtype=float),
                converged=np.asarray(obj["converged"], dtype=bool),
                indices=np.asarray(obj["indices"], dtype=int),
                percentile=float(obj["percentile"]),
                space_size=int(obj["space_size"]),
                exhaustive=bool(obj["exhaustive"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed percentile report: {exc}") from exc


def _assignment_of(index: int, sizes: Sequence[int]) -> list[int]:
    """Decode a composite-space index, last group varying fastest."""
    digits = [0] * len(sizes)
    for g in range(len(sizes) - 1, -1, -1):
        index, digits[g] = divmod(index, sizes[g])
    return digits


def _distinct_indices(rng: np.random.Generator, total: int, n: int) -> np.ndarray:
    if n >= total:
        return np.arange(total)
    if total <= _CHOICE_LIMIT:
        return np.sort(rng.choice(total, size=n, replace=False))
    chosen: list[int] = []
    seen: set[int] = set()
    while len(chosen) < n:
        for v in rng.integers(0, total, size=n):
            v = int(v)
            if v not in seen:
                seen.add(v)
                chosen.append(v)
                if len(chosen) == n:
                    break
    return np.sort(np.array(chosen, dtype=np.int64))


def percentile_score(
    design: ConfigGraph,
    spec: ComplexSystemSpec,
    n_random: int = 100,
    seed: int = 0,
    options: OlocOptions | None = None,
    workers: int | None = None,
) -> PercentileReport:
    """Rank a design against uniform draws from the composite space.

    Draws n_random distinct composite configurations (the whole space when it
    is smaller), solves them and the design at the same resolution, and
    reports 100 * fraction of sampled objectives <= the design's objective.
    """
    spec.validate()
    if n_random < 1:
        raise ValidationError(f"n_random must be >= 1, got {n_random}")
    loads = spec.load_vector()
    if design.n_nodes != len(loads):
        raise ValidationError(
            f"design has {design.n_nodes} nodes, system has {len(loads)}"
        )
    groups = group_by_parent(spec)
    sizes = [len(enumerate_single_split(len(m))) for _, m in groups]
    total = composite_space_size(groups)
    indices = _distinct_indices(np.random.default_rng(seed), total, n_random)
    samples = [compose_design(spec, _assignment_of(int(i), sizes)) for i in indices]

    objs, conv = _objectives([design] + samples, loads, options, workers)
    design_obj = float(objs[0])
    sampled = objs[1:]
    percentile = 100.0 * float(np.mean(sampled <= design_obj))
    return PercentileReport(
        design_objective=design_obj,
        design_converged=bool(conv[0]),
        objectives=sampled,
        converged=conv[1:],
        indices=indices,
        percentile=percentile,
        space_size=total,
        exhaustive=bool(len(indices) == total),
    )


# ---- 4-to-3 merge estimation ------------------------------------------------------


@dataclass(frozen=True)
class MergePattern:
    """One unordered pair merged out of a 4-node load vector.

    pair is 1-based (i, j) with i < j; the merged node sits at position i of
    loads3 and carries d_i + d_j.
    """

    pair: tuple[int, int]
    loads3: tuple[float, float, float]


_MERGE_PAIRS = ((1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4))


def _check_loads4(loads4) -> np.ndarray:
    d = np.asarray(loads4, dtype=float)
    if d.shape != (4,):
        raise ValidationError(f"need exactly 4 loads, got shape {d.shape}")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise ValidationError("loads must be finite and >= 0")
    return d


def merge_patterns(loads4) -> list[MergePattern]:
    """All 6 pairwise merges, ordered (12),(13),(14),(23),(24),(34)."""
    d = _check_loads4(loads4)
    patterns = []
    for i, j in _MERGE_PAIRS:
        loads3 = tuple(
            float(d[i - 1] + d[j - 1]) if pos == i else float(d[pos - 1])
            for pos in range(1, 5)
            if pos != j
        )
        patterns.append(MergePattern(pair=(i, j), loads3=loads3))
    return patterns


def expand_merge(loads4, pattern: MergePattern, graph3: ConfigGraph) -> ConfigGraph:
    """Map a 3-node configuration back to 4 nodes by splitting the merged one.

    The merged node becomes a series pair with the larger-load member
    upstream (ties keep the lower index upstream); anything routed below the
    merged node attaches below the pair. Node ids are the original 1..4.
    """
    d = _check_loads4(loads4)
    i, j = pattern.pair
    if not (1 <= i < j <= 4):
        raise ValidationError(f"merge pair must satisfy 1 <= i < j <= 4, got {(i, j)}")
    if graph3.n_nodes != 3:
        raise ValidationError(f"expansion needs a 3-node graph, got {graph3.n_nodes}")
    up, down = (i, j) if d[i - 1] >= d[j - 1] else (j, i)
    slots = [p for p in range(1, 5) if p != j]  # slot s holds original node slots[s-1]

    def below(slot_parent: int) -> int:
        if slot_parent == TANK:
            return TANK
        original = slots[slot_parent - 1]
        return down if original == i else original

    parents = [0] * 4
    for s in (1, 2, 3):
        original = slots[s - 1]
        p = below(graph3.parent(s))
        if original == i:
            parents[up - 1] = p
            parents[down - 1] = up
        else:
            parents[original - 1] = p
    return canonicalize(ConfigGraph(4, tuple(parents)))


@dataclass(frozen=True)
class MergeEstimate:
    """Best-of-6 expanded candidate, with regret against the full family if solved."""

    graph: ConfigGraph
    objective: float
    pattern: MergePattern
    candidates: tuple[tuple[MergePattern, ConfigGraph, float], ...]
    regret: float | None = None
    reference_range: tuple[float, float] | None = None  # (y_min, y_max)
    converged: tuple[bool, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "graph": {"n_nodes": self.graph.n_nodes, "parents": list(self.graph.parents)},
            "objective": float(self.objective),
            "pattern": list(self.pattern.pair),
            "candidates": [
                {
                    "pattern": list(p.pair),
                    "merged_loads": list(p.loads3),
                    "parents": list(g.parents),
                    "objective": float(v),
                }
                for p, g, v in self.candidates
            ],
            "regret": None if self.regret is None else float(self.regret),
            "reference_range": (
                None
                if self.reference_range is None
                else [float(self.reference_range[0]), float(self.reference_range[1])]
            ),
            "converged": [bool(v) for v in self.converged],
        }


def estimate_via_merge(
    loads4,
    model3: KnnModel,
    reference: bool = False,
    options: OlocOptions | None = None,
    workers: int | None = None,
) -> MergeEstimate:
    """Estimate the best 4-node configuration from 6 merge-predict-expand solves.

    Each merge pattern yields a predicted 3-node shape that expands to a
    4-node candidate; only those candidates are solved and the best one wins
    (first pattern on ties). With reference=True the full single-split family
    is solved too and the normalized regret (y_max - y_hat)/(y_max - y_min)
    is reported; expansions always produce single-split graphs, so the
    estimate can never fall outside [y_min, y_max].
    """
    d = _check_loads4(loads4)
    patterns = merge_patterns(d)
    candidates = [
        expand_merge(d, p, _predict_local(model3, p.loads3, 3)) for p in patterns
    ]
    family = enumerate_single_split(4) if reference else []
    objs, conv = _objectives(candidates + family, list(d), options, workers)

    cand_objs = objs[: len(candidates)]
    best = int(np.argmax(cand_objs))
    y_hat = float(cand_objs[best])
    regret = None
    ref_range = None
    if reference:
        ref = objs[len(candidates):]
        y_min, y_max = float(ref.min()), float(ref.max())
        ref_range = (y_min, y_max)
        regret = 0.0 if y_max == y_min else (y_max - y_hat) / (y_max - y_min)
    return MergeEstimate(
        graph=candidates[best],
        objective=y_hat,
        pattern=patterns[best],
        candidates=tuple(
            (p, g, float(v)) for p, g, v in zip(patterns, candidates, cand_objs)
        ),
        regret=regret,
        reference_range=ref_range,
        converged=tuple(bool(v) for v in conv[: len(candidates)]),
    )
