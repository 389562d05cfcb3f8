"""Population studies: sample heat-load vectors, solve every configuration,
label the best, and persist the results.

A study is a (sample x configuration) grid of independent endurance solves.
The grid is embarrassingly parallel; results are merged by index so the
dataset bytes never depend on worker scheduling.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config_enum import (
    TANK,
    ConfigGraph,
    enumerate_all,
    enumerate_multi_split,
    enumerate_single_split,
)
from .errors import ValidationError
from .oloc_solver import OlocOptions, OlocSolution, solve
from .thermal_physics import build_physics_graph

SPLIT_MODES = ("single", "multi", "all")
SAMPLERS = ("lhs", "random_sorted")


@dataclass(frozen=True)
class StudySpec:
    """Everything needed to regenerate a dataset byte-for-byte."""

    n_nodes: int
    n_pop: int
    d_range: tuple[float, float] = (4.0, 16.0)
    sampler: str = "lhs"
    split_mode: str = "single"
    seed: int = 0
    solver: OlocOptions = field(default_factory=OlocOptions)
    max_depth: int | None = None
    label_tol: float = 0.01

    def validate(self) -> "StudySpec":
        if self.n_nodes < 1:
            raise ValidationError(f"n_nodes must be >= 1, got {self.n_nodes}")
        if self.n_pop < 1:
            raise ValidationError(f"n_pop must be >= 1, got {self.n_pop}")
        lo, hi = self.d_range
        if not lo < hi:
            raise ValidationError(f"d_range low must be < high, got {self.d_range}")
        if lo < 0:
            raise ValidationError("loads are non-negative; d_range low must be >= 0")
        if self.sampler not in SAMPLERS:
            raise ValidationError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.split_mode not in SPLIT_MODES:
            raise ValidationError(
                f"split_mode must be one of {SPLIT_MODES}, got {self.split_mode!r}"
            )
        if not 0.0 <= self.label_tol < 1.0:
            raise ValidationError(
                f"label_tol must be in [0, 1), got {self.label_tol}"
            )
        self.solver.validate()
        return self

    def to_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "n_pop": self.n_pop,
            "d_range": list(self.d_range),
            "sampler": self.sampler,
            "split_mode": self.split_mode,
            "seed": self.seed,
            "solver": self.solver.to_dict(),
            "max_depth": self.max_depth,
            "label_tol": self.label_tol,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "StudySpec":
        known = {
            "n_nodes", "n_pop", "d_range", "sampler", "split_mode",
            "seed", "solver", "max_depth", "label_tol",
        }
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown study fields: {sorted(unknown)}")
        d_range = tuple(float(v) for v in obj.get("d_range", (4.0, 16.0)))
        if len(d_range) != 2:
            raise ValidationError("d_range must have exactly two entries")
        return cls(
            n_nodes=int(obj["n_nodes"]),
            n_pop=int(obj["n_pop"]),
            d_range=d_range,
            sampler=str(obj.get("sampler", "lhs")),
            split_mode=str(obj.get("split_mode", "single")),
            seed=int(obj.get("seed", 0)),
            solver=OlocOptions.from_dict(obj.get("solver", {})),
            max_depth=None if obj.get("max_depth") is None else int(obj["max_depth"]),
            label_tol=float(obj.get("label_tol", 0.01)),
        ).validate()


@dataclass
class SampleRecord:
    sample_id: int
    loads: np.ndarray  # (n_nodes,), kW
    objectives: np.ndarray  # (n_conf,), s
    label: int  # best config per select_label; -1 when the sample is invalid
    converged: list[bool]
    valid: bool


@dataclass
class Dataset:
    spec: StudySpec
    configs: list[ConfigGraph]
    records: list[SampleRecord]

    @property
    def config_hash(self) -> str:
        return config_list_hash(self.configs)

    def objective_matrix(self) -> np.ndarray:
        return np.array([r.objectives for r in self.records])

    def load_matrix(self) -> np.ndarray:
        return np.array([r.loads for r in self.records])

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=int)

    def valid_records(self) -> list[SampleRecord]:
        return [r for r in self.records if r.valid]


def config_list(spec: StudySpec) -> list[ConfigGraph]:
    """Configurations of a study, in canonical order."""
    if spec.split_mode == "single":
        return enumerate_single_split(spec.n_nodes)
    if spec.split_mode == "multi":
        return enumerate_multi_split(spec.n_nodes, max_depth=spec.max_depth)
    return enumerate_all(spec.n_nodes, max_depth=spec.max_depth)


def config_list_hash(configs) -> str:
    payload = "\n".join(g.to_json() for g in configs)
    return hashlib.sha256(payload.encode()).hexdigest()


# ---- samplers ----------------------------------------------------------------


def lhs_sample(n_pop: int, n_dims: int, d_range, seed: int) -> np.ndarray:
    """Latin hypercube: per dimension, one jittered point in each of n_pop bins."""
    if n_pop < 1 or n_dims < 1:
        raise ValidationError("n_pop and n_dims must be >= 1")
    lo, hi = float(d_range[0]), float(d_range[1])
    if not lo < hi:
        raise ValidationError(f"d_range low must be < high, got {d_range}")
    rng = np.random.default_rng(seed)
    width = (hi - lo) / n_pop
    out = np.empty((n_pop, n_dims))
    for j in range(n_dims):
        bins = rng.permutation(n_pop)
        jitter = rng.random(n_pop)
        out[:, j] = lo + (bins + jitter) * width
    return out


def random_sorted_sample(n_pop: int, n_dims: int, d_range, seed: int) -> np.ndarray:
    """Uniform i.i.d. loads, each row sorted descending (d_1 >= d_2 >= ...)."""
    if n_pop < 1 or n_dims < 1:
        raise ValidationError("n_pop and n_dims must be >= 1")
    lo, hi = float(d_range[0]), float(d_range[1])
    if not lo < hi:
        raise ValidationError(f"d_range low must be < high, got {d_range}")
    rng = np.random.default_rng(seed)
    raw = rng.uniform(lo, hi, size=(n_pop, n_dims))
    return -np.sort(-raw, axis=1)


def sample_loads(spec: StudySpec) -> np.ndarray:
    if spec.sampler == "lhs":
        return lhs_sample(spec.n_pop, spec.n_nodes, spec.d_range, spec.seed)
    return random_sorted_sample(spec.n_pop, spec.n_nodes, spec.d_range, spec.seed)


# ---- the solve grid ----------------------------------------------------------


def objective_of(sol: OlocSolution) -> float:
    """Endurance score recorded in datasets: the re-simulated schedule truth.

    All configurations are compared on the verification integrator's common
    ruler, so transcription error never decides an argmax between near-tied
    layouts. The claimed t_end is only a fallback when no feasibility report
    is attached; unverifiable non-converged solutions score zero.
    """
    fz = sol.feasibility
    if fz is None:
        return float(sol.t_end) if sol.converged else 0.0
    if fz.endurance is not None:
        return float(fz.endurance)
    return float(fz.window)  # schedule survived the whole verification window


def select_label(objectives, configs, tol: float = 0.01) -> int:
    """Pick the configuration a sample is labeled with.

    Plain argmax is the wrong rule here: measured landscapes routinely hold
    several layouts within a fraction of a percent of each other, closer than
    the transcription and verification steps can rank (roughly 1e-3 relative
    at default resolution). Treating such runs as distinguishable turns the
    label field into noise. So every configuration within `tol` (relative) of
    the best objective counts as tied, and the tie goes to the layout with the
    most tank-level branches: the one that keeps the most flows independently
    controllable, which is never worse within the tie and stays useful if the
    loads drift. Remaining ties go to the lowest canonical index, which makes
    the label independent of enumeration permutations. `tol=0` recovers exact
    argmax.
    """
    J = np.asarray(objectives, dtype=float)
    if J.ndim != 1 or J.shape[0] != len(configs):
        raise ValidationError(
            f"objectives shape {J.shape} does not match {len(configs)} configs"
        )
    if not 0.0 <= tol < 1.0:
        raise ValidationError(f"tol must be in [0, 1), got {tol}")
    best = float(J.max())
    if best <= 0.0:
        return int(np.argmax(J))
    tied = np.flatnonzero(J >= best * (1.0 - tol))
    branches = np.array([sum(1 for p in configs[i].parents if p == TANK) for i in tied])
    return int(tied[branches == branches.max()].min())


def _solve_cell(task) -> tuple[int, int, float, bool]:
    sample_id, config_idx, parents, loads, options = task
    graph = ConfigGraph(len(parents), tuple(parents))
    sol = solve(build_physics_graph(graph), loads, options=OlocOptions.from_dict(options))
    return sample_id, config_idx, objective_of(sol), bool(sol.converged)


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get("THERMOFORGE_WORKERS", "1"))
    if workers < 1:
        raise ValidationError(f"workers must be >= 1, got {workers}")
    return workers


def run_study(spec: StudySpec, workers: int | None = None, progress=None) -> Dataset:
    """Solve every (sample, configuration) cell and label each sample.

    The merge is ordered by (sample index, config index) no matter how many
    workers run, so identical specs give identical datasets. `progress` is an
    optional callback taking (done, total).
    """
    spec = spec.validate()
    configs = config_list(spec)
    loads = sample_loads(spec)
    n_conf = len(configs)
    workers = resolve_workers(workers)

    tasks = [
        (k, i, configs[i].parents, tuple(map(float, loads[k])), spec.solver.to_dict())
        for k in range(spec.n_pop)
        for i in range(n_conf)
    ]
    J = np.zeros((spec.n_pop, n_conf))
    flags = np.zeros((spec.n_pop, n_conf), dtype=bool)

    done = 0
    if workers == 1:
        for task in tasks:
            k, i, value, ok = _solve_cell(task)
            J[k, i] = value
            flags[k, i] = ok
            done += 1
            if progress:
                progress(done, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for k, i, value, ok in pool.map(_solve_cell, tasks, chunksize=4):
                J[k, i] = value
                flags[k, i] = ok
                done += 1
                if progress:
                    progress(done, len(tasks))

    records = []
    for k in range(spec.n_pop):
        valid = bool(flags[k].any())
        label = select_label(J[k], configs, spec.label_tol) if valid else -1
        records.append(
            SampleRecord(
                sample_id=k,
                loads=loads[k].copy(),
                objectives=J[k].copy(),
                label=label,
                converged=[bool(v) for v in flags[k]],
                valid=valid,
            )
        )
    return Dataset(spec=spec, configs=configs, records=records)


# ---- aggregate views ---------------------------------------------------------


def success_rate(ds: Dataset) -> np.ndarray:
    """Fraction of valid samples on which each configuration is the best."""
    valid = ds.valid_records()
    if not valid:
        raise ValidationError("dataset has no valid samples")
    counts = np.zeros(len(ds.configs))
    for r in valid:
        counts[r.label] += 1
    return counts / len(valid)


def relative_performance(ds: Dataset, config_idx: int) -> np.ndarray:
    """Per-valid-sample ratio J_i / max_m J_m for one configuration."""
    if not 0 <= config_idx < len(ds.configs):
        raise ValidationError(f"config index {config_idx} out of range")
    valid = ds.valid_records()
    out = np.empty(len(valid))
    for row, r in enumerate(valid):
        out[row] = r.objectives[config_idx] / r.objectives.max()
    return out


# ---- persistence -------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dataset_csv_text(ds: Dataset) -> str:
    n = ds.spec.n_nodes
    n_conf = len(ds.configs)
    cols = (
        ["sample_id"]
        + [f"d_{j + 1}" for j in range(n)]
        + [f"J_{i}" for i in range(n_conf)]
        + ["label", "valid"]
    )
    lines = [",".join(cols)]
    for r in ds.records:
        row = (
            [str(r.sample_id)]
            + [_fmt(v) for v in r.loads]
            + [_fmt(v) for v in r.objectives]
            + [str(r.label), str(int(r.valid))]
        )
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def dataset_meta(ds: Dataset) -> dict:
    return {
        "spec": ds.spec.to_dict(),
        "config_hash": ds.config_hash,
        "configs": [list(g.parents) for g in ds.configs],
        "converged": [[int(v) for v in r.converged] for r in ds.records],
        "n_valid": sum(r.valid for r in ds.records),
    }


def save_dataset(ds: Dataset, csv_path: str) -> str:
    """Write `<path>.csv` plus `<path>.meta.json`; returns the meta path."""
    meta_path = _meta_path(csv_path)
    with open(csv_path, "w") as fh:
        fh.write(dataset_csv_text(ds))
    with open(meta_path, "w") as fh:
        json.dump(dataset_meta(ds), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return meta_path


def _meta_path(csv_path: str) -> str:
    stem = csv_path[:-4] if csv_path.endswith(".csv") else csv_path
    return stem + ".meta.json"


def load_dataset(csv_path: str) -> Dataset:
    with open(_meta_path(csv_path)) as fh:
        meta = json.load(fh)
    spec = StudySpec.from_dict(meta["spec"])
    configs = [ConfigGraph(spec.n_nodes, tuple(p)) for p in meta["configs"]]
    if config_list_hash(configs) != meta["config_hash"]:
        raise ValidationError("config list does not match its stored hash")
    expected = config_list(spec)
    if [g.parents for g in expected] != [g.parents for g in configs]:
        raise ValidationError("stored config list is not the canonical enumeration")

    n, n_conf = spec.n_nodes, len(configs)
    records = []
    with open(csv_path) as fh:
        header = fh.readline().strip()
        want = dataset_csv_text(Dataset(spec, configs, [])).strip()
        if header != want:
            raise ValidationError("dataset csv header mismatch")
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != 1 + n + n_conf + 2:
                raise ValidationError(f"bad dataset row: {line!r}")
            sid = int(parts[0])
            records.append(
                SampleRecord(
                    sample_id=sid,
                    loads=np.array([float(v) for v in parts[1 : 1 + n]]),
                    objectives=np.array([float(v) for v in parts[1 + n : 1 + n + n_conf]]),
                    label=int(parts[1 + n + n_conf]),
                    converged=[bool(v) for v in meta["converged"][sid]],
                    valid=bool(int(parts[2 + n + n_conf])),
                )
            )
    return Dataset(spec=spec, configs=configs, records=records)
