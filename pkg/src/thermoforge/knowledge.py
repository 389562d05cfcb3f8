"""Design-knowledge extraction: load features, nearest-neighbour labeling,
and evaluation against stored objective vectors.

Labels come from dataset records (index of the best configuration); features
are normalized load fractions, optionally with one magnitude feature so that
magnitude-dependent regimes stay separable. Distances are plain Euclidean:
normalized features are already commensurate and the magnitude feature is
pre-scaled, so no standardization is applied.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .study_runner import Dataset, SampleRecord

FEATURE_MODES = ("normalized_drop_last", "normalized_plus_magnitude")


@dataclass(frozen=True)
class FeatureSpec:
    """How a load vector becomes a feature row.

    normalized_drop_last: [d_1/S, ..., d_{n-1}/S] with S = sum(d); the last
    fraction is implied by the rest.
    normalized_plus_magnitude: [d_1/S, ..., d_{n-1}/S, max(d)/magnitude_scale];
    the magnitude feature keeps uniformly heavier populations separable.
    """

    mode: str = "normalized_drop_last"
    magnitude_scale: float = 10.0  # kW

    def validate(self) -> "FeatureSpec":
        if self.mode not in FEATURE_MODES:
            raise ValidationError(f"mode must be one of {FEATURE_MODES}, got {self.mode!r}")
        if not self.magnitude_scale > 0:
            raise ValidationError("magnitude_scale must be positive")
        return self

    def n_features(self, n_nodes: int) -> int:
        return n_nodes - 1 if self.mode == "normalized_drop_last" else n_nodes

    def to_dict(self) -> dict:
        return {"mode": self.mode, "magnitude_scale": self.magnitude_scale}

    @classmethod
    def from_dict(cls, obj: dict) -> "FeatureSpec":
        return cls(
            mode=str(obj.get("mode", "normalized_drop_last")),
            magnitude_scale=float(obj.get("magnitude_scale", 10.0)),
        ).validate()


def featurize(loads, spec: FeatureSpec) -> np.ndarray:
    spec.validate()
    d = np.asarray(loads, dtype=float)
    if d.ndim != 1 or d.shape[0] < 2:
        raise ValidationError("loads must be a 1-d vector with at least two entries")
    total = float(d.sum())
    if total <= 0.0:
        raise ValidationError("total load must be positive")
    fractions = d[:-1] / total
    if spec.mode == "normalized_drop_last":
        return fractions
    return np.concatenate([fractions, [float(d.max()) / spec.magnitude_scale]])


def featurize_records(records, spec: FeatureSpec) -> np.ndarray:
    return np.array([featurize(r.loads, spec) for r in records])


def train_test_split(
    ds: Dataset, n_train: int, seed: int
) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Seeded shuffle of the valid samples, split into (train, test)."""
    valid = ds.valid_records()
    if not 1 <= n_train < len(valid):
        raise ValidationError(
            f"need 1 <= n_train < {len(valid)} valid samples, got n_train={n_train}"
        )
    order = np.random.default_rng(seed).permutation(len(valid))
    train = [valid[i] for i in order[:n_train]]
    test = [valid[i] for i in order[n_train:]]
    return train, test


# ---- nearest neighbours --------------------------------------------------------


@dataclass(frozen=True)
class KnnModel:
    k: int
    features: np.ndarray  # (m, n_f)
    labels: np.ndarray  # (m,), int
    spec: FeatureSpec = field(default_factory=FeatureSpec)


def train_knn(features, labels, k: int, spec: FeatureSpec | None = None) -> KnnModel:
    """Store the data verbatim; no fitting beyond that."""
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValidationError(f"features {X.shape} and labels {y.shape} do not align")
    if not np.all(np.isfinite(X)):
        raise ValidationError("features must be finite")
    if not 1 <= k <= X.shape[0]:
        raise ValidationError(f"need 1 <= k <= {X.shape[0]}, got k={k}")
    if np.any(y < 0):
        raise ValidationError("labels must be non-negative")
    return KnnModel(k=int(k), features=X.copy(), labels=y.copy(), spec=spec or FeatureSpec())


def predict(model: KnnModel, row, k: int | None = None) -> int:
    """Majority vote among the k nearest stored rows.

    Vote ties go to the label with the smaller summed neighbor distance,
    then to the lower label. Neighbor selection orders by (distance, label,
    storage index), so equidistant rows admit the lower label first and
    permuting stored rows cannot change the vote.
    """
    k = model.k if k is None else k
    if not 1 <= k <= model.features.shape[0]:
        raise ValidationError(f"need 1 <= k <= {model.features.shape[0]}, got k={k}")
    q = np.asarray(row, dtype=float)
    if q.shape != (model.features.shape[1],):
        raise ValidationError(
            f"feature row must have shape ({model.features.shape[1]},), got {q.shape}"
        )
    dist = np.sqrt(np.sum((model.features - q) ** 2, axis=1))
    nearest = np.lexsort((np.arange(dist.shape[0]), model.labels, dist))[:k]
    votes = model.labels[nearest]
    counts = np.bincount(votes)
    top = int(counts.max())
    tied = np.flatnonzero(counts == top)
    if tied.shape[0] == 1:
        return int(tied[0])
    sums = {int(lab): float(dist[nearest[votes == lab]].sum()) for lab in tied}
    best = min(sums.values())
    return min(lab for lab, s in sums.items() if s <= best)


def predict_many(model: KnnModel, rows, k: int | None = None) -> np.ndarray:
    return np.array([predict(model, r, k=k) for r in np.asarray(rows, dtype=float)])


# ---- evaluation -----------------------------------------------------------------


@dataclass
class EvalReport:
    test_accuracy: float
    train_accuracy: float
    confusion: np.ndarray  # (n_classes, n_classes), true x predicted counts
    gaps: np.ndarray  # per test sample, (J_best - J_pred) / J_best
    gap_mean: float
    gap_median: float
    gap_max: float
    k_sensitivity: dict[int, float]  # test accuracy per neighbor count

    def to_dict(self) -> dict:
        return {
            "test_accuracy": self.test_accuracy,
            "train_accuracy": self.train_accuracy,
            "confusion": self.confusion.tolist(),
            "gaps": self.gaps.tolist(),
            "gap_mean": self.gap_mean,
            "gap_median": self.gap_median,
            "gap_max": self.gap_max,
            "k_sensitivity": {str(k): v for k, v in self.k_sensitivity.items()},
        }


def evaluate(
    model: KnnModel,
    test_records,
    n_classes: int,
    k_grid=(1, 3, 5, 7),
) -> EvalReport:
    """Accuracy, confusion counts, and objective gaps on held-out records.

    Gaps use the objective vectors stored in the records, so no re-solving
    happens here.
    """
    if not test_records:
        raise ValidationError("need at least one test record")
    rows = featurize_records(test_records, model.spec)
    preds = np.array([predict(model, r) for r in rows], dtype=int)
    truth = np.array([r.label for r in test_records], dtype=int)

    confusion = np.zeros((n_classes, n_classes), dtype=int)
    for t, p in zip(truth, preds):
        confusion[t, p] += 1
    gaps = np.empty(len(test_records))
    for i, (rec, p) in enumerate(zip(test_records, preds)):
        best = rec.objectives[rec.label]
        gaps[i] = (best - rec.objectives[p]) / best

    train_preds = predict_many(model, model.features)
    ks = {}
    for k in k_grid:
        if 1 <= k <= model.features.shape[0]:
            kp = np.array([predict(model, r, k=k) for r in rows])
            ks[int(k)] = float(np.mean(kp == truth))
    return EvalReport(
        test_accuracy=float(np.mean(preds == truth)),
        train_accuracy=float(np.mean(train_preds == model.labels)),
        confusion=confusion,
        gaps=gaps,
        gap_mean=float(gaps.mean()),
        gap_median=float(np.median(gaps)),
        gap_max=float(gaps.max()),
        k_sensitivity=ks,
    )


# ---- linear baseline --------------------------------------------------------------


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray  # (n_classes, n_features + 1), bias last
    classes: np.ndarray  # sorted unique labels
    class_counts: np.ndarray
    spec: FeatureSpec = field(default_factory=FeatureSpec)


def train_logistic_baseline(
    features, labels, epochs: int = 2000, rate: float = 1.0, spec: FeatureSpec | None = None
) -> LogisticModel:
    """One-vs-rest logistic regression, full-batch gradient descent.

    Zero-initialized and trained in a fixed class order, so the result is
    deterministic. Comparison baseline only; no regularization.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValidationError(f"features {X.shape} and labels {y.shape} do not align")
    if epochs < 0 or rate <= 0:
        raise ValidationError("need epochs >= 0 and rate > 0")
    classes, counts = np.unique(y, return_counts=True)
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    W = np.zeros((classes.shape[0], Xb.shape[1]))
    m = X.shape[0]
    for ci, cls in enumerate(classes):
        target = (y == cls).astype(float)
        w = W[ci]
        for _ in range(epochs):
            p = 1.0 / (1.0 + np.exp(-(Xb @ w)))
            w -= rate / m * (Xb.T @ (p - target))
    return LogisticModel(
        weights=W, classes=classes, class_counts=counts, spec=spec or FeatureSpec()
    )


def predict_logistic(model: LogisticModel, row) -> int:
    q = np.asarray(row, dtype=float)
    if q.shape != (model.weights.shape[1] - 1,):
        raise ValidationError(
            f"feature row must have shape ({model.weights.shape[1] - 1},), got {q.shape}"
        )
    scores = model.weights[:, :-1] @ q + model.weights[:, -1]
    top = scores.max()
    tied = np.flatnonzero(scores >= top - 1e-12)
    if tied.shape[0] == 1:
        return int(model.classes[tied[0]])
    # untrained or degenerate scores: fall back to the majority class
    counts = model.class_counts[tied]
    winners = tied[counts == counts.max()]
    return int(model.classes[winners.min()])


# ---- model files -------------------------------------------------------------------


def save_model(model: KnnModel, path: str) -> None:
    rows = [[*map(float, f), int(lab)] for f, lab in zip(model.features, model.labels)]
    payload = {"spec": model.spec.to_dict(), "k": model.k, "rows": rows}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path: str) -> KnnModel:
    with open(path) as fh:
        payload = json.load(fh)
    rows = payload.get("rows", [])
    if not rows:
        raise ValidationError(f"model file {path} has no rows")
    X = np.array([r[:-1] for r in rows], dtype=float)
    y = np.array([r[-1] for r in rows], dtype=int)
    if not np.all(np.isfinite(X)) or math.isnan(payload.get("k", math.nan)):
        raise ValidationError(f"model file {path} is malformed")
    return train_knn(X, y, int(payload["k"]), spec=FeatureSpec.from_dict(payload["spec"]))
