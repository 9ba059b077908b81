"""Measurement suite: linear probing, alignment quality, discriminability,
multiple-choice evaluation, confusion matrices, and projection export.

Distance conventions (the literature leaves the exact formulas open, so the
choice is recorded here and echoed in serialized reports): inter-class
distance is the mean over unordered class pairs of 1 - cos(centroid_i,
centroid_j); intra-class variance is the mean over classes of the mean
1 - cos(sample, class centroid).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .dataset import AlignmentDataset, Split
from .errors import (
    ChoicesOutOfRange,
    DegenerateCovariance,
    DegenerateLabels,
    DimensionMismatch,
    EmptyClass,
    EmptyInput,
    InvalidConfig,
)
from .model import ProjectionModel, project
from .numerics import cosine_sim

DISTANCE_NOTE = ("distances use cosine-centroid definitions: "
                 "inter = mean pairwise (1 - cos) of class centroids, "
                 "intra = mean per-class (1 - cos(sample, centroid))")


# ---------------------------------------------------------------------------
# Linear probing
# ---------------------------------------------------------------------------

def linear_probe(train_features, train_labels, test_features, test_labels,
                 epochs: int = 500, lr: float = 0.1) -> float:
    """Train multinomial logistic regression by full-batch gradient descent
    from zero init and return test top-1 accuracy."""
    Xtr = np.asarray(train_features, dtype=np.float64)
    Xte = np.asarray(test_features, dtype=np.float64)
    ytr = np.asarray(train_labels, dtype=np.int64)
    yte = np.asarray(test_labels, dtype=np.int64)
    if Xtr.ndim != 2 or Xte.ndim != 2 or Xtr.shape[1] != Xte.shape[1]:
        raise DimensionMismatch("probe features must be 2-d with matching columns")
    if Xtr.shape[0] != ytr.shape[0] or Xte.shape[0] != yte.shape[0]:
        raise DimensionMismatch("features and labels must align")
    num_classes = int(max(ytr.max(), yte.max())) + 1
    if num_classes < 2:
        raise DegenerateLabels("probing needs >= 2 classes")
    missing = sorted(set(range(num_classes)) - set(ytr.tolist()))
    if missing:
        raise DegenerateLabels(f"classes absent from the probe train set: {missing}")

    n, d = Xtr.shape
    W = np.zeros((num_classes, d))
    b = np.zeros(num_classes)
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), ytr] = 1.0
    for _ in range(epochs):
        logits = Xtr @ W.T + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        delta = (p - onehot) / n
        W -= lr * (delta.T @ Xtr)
        b -= lr * delta.sum(axis=0)
    pred = np.argmax(Xte @ W.T + b, axis=1)
    return float(np.mean(pred == yte))


# ---------------------------------------------------------------------------
# Alignment and discriminability
# ---------------------------------------------------------------------------

def _per_class_mean_cos(features: np.ndarray, labels: np.ndarray,
                        targets: np.ndarray) -> float:
    """Mean over classes of the mean cos(sample, class target); every class
    referenced by targets must have at least one sample."""
    per_class = []
    for c in range(targets.shape[0]):
        rows = features[labels == c]
        if rows.shape[0] == 0:
            raise EmptyClass(f"class {c} has no samples in the evaluated set")
        per_class.append(np.mean([cosine_sim(r, targets[c]) for r in rows]))
    return float(np.mean(per_class))


def alignment_quality(ds: AlignmentDataset, model: ProjectionModel) -> float:
    """Per-class mean cosine between projected objects and their projected
    category-name embeddings, averaged over classes."""
    H = project(model, "object", ds.object_matrix)
    T = project(model, "category", ds.table.name_matrix)
    return _per_class_mean_cos(H, ds.labels, T)


def raw_alignment_quality(ds: AlignmentDataset) -> float:
    """Same statistic on the raw embeddings; needs matching dimensions."""
    if ds.embedding_dim_object != ds.embedding_dim_text:
        raise DimensionMismatch(
            "raw alignment needs equal object/text dims "
            f"({ds.embedding_dim_object} vs {ds.embedding_dim_text})")
    return _per_class_mean_cos(ds.object_matrix, ds.labels, ds.table.name_matrix)


def discriminability(embeddings, labels) -> tuple[float, float]:
    """(inter-class distance, intra-class variance) under the cosine-centroid
    definitions in the module docstring."""
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DimensionMismatch("embeddings and labels must align")
    classes = np.unique(y)
    if classes.size < 2:
        raise EmptyClass("discriminability needs >= 2 non-empty classes")
    centroids = {int(c): X[y == c].mean(axis=0) for c in classes}

    inter_terms = []
    for i, ci in enumerate(classes):
        for cj in classes[i + 1:]:
            inter_terms.append(1.0 - cosine_sim(centroids[int(ci)], centroids[int(cj)]))
    intra_terms = []
    for c in classes:
        rows = X[y == c]
        intra_terms.append(np.mean([1.0 - cosine_sim(r, centroids[int(c)]) for r in rows]))
    return float(np.mean(inter_terms)), float(np.mean(intra_terms))


# ---------------------------------------------------------------------------
# Multiple-choice evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class McResult:
    accuracy: float
    confusion: np.ndarray          # (C, C) int64, rows = true class
    per_class_accuracy: tuple
    notes: tuple[str, ...] = ()


def evaluate_mc(ds: AlignmentDataset, model: ProjectionModel,
                choices="all", seed: int = 0) -> McResult:
    """Answer one multiple-choice question per test sample.

    The candidate set is the true category plus seeded distractors (or every
    category when choices="all"); the prediction is the candidate whose
    projected name embedding is most cosine-similar to the projected object.
    """
    test_idx = ds.indices(Split.TEST)
    if test_idx.size == 0:
        raise InvalidConfig("evaluation requires a non-empty test split")
    C = ds.num_categories
    if choices == "all":
        n_choices = C
    else:
        n_choices = int(choices)
        if n_choices < 1 or n_choices > C:
            raise ChoicesOutOfRange(f"choices must be in [1, {C}], got {n_choices}")

    H = project(model, "object", ds.object_matrix[test_idx])
    T = project(model, "category", ds.table.name_matrix)
    # projected rows are unit-norm, so dot products are cosine similarities
    sims = H @ T.T

    notes = []
    if n_choices == 1:
        notes.append("degenerate evaluation: a single-choice question is always correct")

    rng = np.random.default_rng(seed)
    labels = ds.labels[test_idx]
    confusion = np.zeros((C, C), dtype=np.int64)
    for row, true in enumerate(labels):
        if n_choices == C:
            candidates = np.arange(C)
        else:
            others = np.delete(np.arange(C), true)
            distractors = rng.choice(others, size=n_choices - 1, replace=False)
            candidates = np.concatenate(([true], distractors))
        pred = int(candidates[np.argmax(sims[row, candidates])])
        confusion[true, pred] += 1

    totals = confusion.sum(axis=1)
    per_class = tuple(
        float(confusion[c, c] / totals[c]) if totals[c] else None for c in range(C))
    accuracy = float(np.trace(confusion) / confusion.sum())
    return McResult(accuracy=accuracy, confusion=confusion,
                    per_class_accuracy=per_class, notes=tuple(notes))


# ---------------------------------------------------------------------------
# Projection export
# ---------------------------------------------------------------------------

class ProjectionMethod(str, Enum):
    PCA2D = "pca2d"
    RAW = "raw"


@dataclass(frozen=True)
class ProjectionExport:
    method: ProjectionMethod           # method actually used
    coordinates: np.ndarray
    labels: np.ndarray
    explained: tuple[float, float] | None = None
    degenerate: bool = False

    def save(self, path) -> None:
        lines = []
        if self.method == ProjectionMethod.PCA2D:
            lines.append("x,y,label")
            for (x, y), lab in zip(self.coordinates, self.labels):
                lines.append(f"{float(x)!r},{float(y)!r},{int(lab)}")
        else:
            dim = self.coordinates.shape[1]
            lines.append(",".join([f"v{i}" for i in range(dim)] + ["label"]))
            for row, lab in zip(self.coordinates, self.labels):
                lines.append(",".join(repr(float(v)) for v in row) + f",{int(lab)}")
        Path(path).write_text("\n".join(lines) + "\n")


def _pca2d(X: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    centered = X - X.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (X.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    tol = max(float(eigvals[0]), 0.0) * 1e-10 + 1e-18
    if eigvals.shape[0] < 2 or eigvals[1] <= tol:
        raise DegenerateCovariance("covariance rank below 2")
    comps = eigvecs[:, :2]
    # deterministic orientation: first nonzero loading of each axis positive
    for j in range(2):
        col = comps[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            comps[:, j] = -col
    return centered @ comps, (float(eigvals[0]), float(eigvals[1]))


def export_projection(embeddings, labels,
                      method: ProjectionMethod = ProjectionMethod.PCA2D) -> ProjectionExport:
    """Plot-ready coordinates; PCA falls back to a raw dump (flagged) when
    the covariance has rank below two."""
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DimensionMismatch("embeddings and labels must align")
    if X.shape[0] < 2:
        raise EmptyInput("projection export needs >= 2 samples")
    method = ProjectionMethod(method)
    if method == ProjectionMethod.RAW:
        return ProjectionExport(ProjectionMethod.RAW, X.copy(), y.copy())
    try:
        coords, explained = _pca2d(X)
    except DegenerateCovariance:
        return ProjectionExport(ProjectionMethod.RAW, X.copy(), y.copy(), degenerate=True)
    return ProjectionExport(ProjectionMethod.PCA2D, coords, y.copy(), explained=explained)


# ---------------------------------------------------------------------------
# Combined report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    """Structured measurement results for one model/dataset pair."""

    probe_accuracy: dict[str, float]
    alignment_quality: float
    inter_class_distance: float
    intra_class_variance: float
    mc_accuracy: float
    confusion: np.ndarray
    per_class_accuracy: tuple
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        conf = np.asarray(self.confusion, dtype=np.int64)
        if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
            raise DimensionMismatch("confusion matrix must be square")
        if np.any(conf < 0):
            raise InvalidConfig("confusion entries must be non-negative")
        total = conf.sum()
        if total and abs(self.mc_accuracy - np.trace(conf) / total) > 1e-12:
            raise InvalidConfig("mc_accuracy must equal trace(confusion)/sum(confusion)")
        rates = [self.mc_accuracy, *[v for v in self.probe_accuracy.values()]]
        rates += [v for v in self.per_class_accuracy if v is not None]
        if any(not (0.0 <= r <= 1.0) for r in rates):
            raise InvalidConfig("rates must lie in [0, 1]")
        notes = tuple(self.notes)
        if DISTANCE_NOTE not in notes:
            notes = notes + (DISTANCE_NOTE,)
        object.__setattr__(self, "confusion", conf)
        object.__setattr__(self, "notes", notes)

    def to_dict(self) -> dict:
        return {
            "probe_accuracy": dict(self.probe_accuracy),
            "alignment_quality": self.alignment_quality,
            "inter_class_distance": self.inter_class_distance,
            "intra_class_variance": self.intra_class_variance,
            "mc_accuracy": self.mc_accuracy,
            "confusion": self.confusion.tolist(),
            "per_class_accuracy": list(self.per_class_accuracy),
            "notes": list(self.notes),
        }

    def save(self, directory) -> list[Path]:
        """Write metrics.json, metrics.csv, and confusion.txt; returns paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        json_path = directory / "metrics.json"
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

        rows = [("alignment_quality", self.alignment_quality),
                ("inter_class_distance", self.inter_class_distance),
                ("intra_class_variance", self.intra_class_variance),
                ("mc_accuracy", self.mc_accuracy)]
        rows += [(f"probe_accuracy.{k}", v) for k, v in sorted(self.probe_accuracy.items())]
        csv_path = directory / "metrics.csv"
        csv_path.write_text("metric,value\n" + "".join(f"{k},{v!r}\n" for k, v in rows))

        grid_path = directory / "confusion.txt"
        grid_path.write_text(
            "\n".join(" ".join(str(int(v)) for v in row) for row in self.confusion) + "\n")
        return [json_path, csv_path, grid_path]


def compute_metrics(ds: AlignmentDataset, model: ProjectionModel,
                    choices="all", seed: int = 0, probe: bool = True,
                    probe_epochs: int = 500, probe_lr: float = 0.1) -> MetricsReport:
    """Full report over a dataset with train/test splits."""
    test = ds.subset(Split.TEST)
    mc = evaluate_mc(ds, model, choices=choices, seed=seed)
    align = alignment_quality(test, model)
    H_test = project(model, "object", test.object_matrix)
    inter, intra = discriminability(H_test, test.labels)

    probes: dict[str, float] = {}
    if probe:
        train = ds.subset(Split.TRAIN)
        probes["object_raw"] = linear_probe(
            train.object_matrix, train.labels, test.object_matrix, test.labels,
            epochs=probe_epochs, lr=probe_lr)
        H_train = project(model, "object", train.object_matrix)
        probes["object_projected"] = linear_probe(
            H_train, train.labels, H_test, test.labels,
            epochs=probe_epochs, lr=probe_lr)

    return MetricsReport(
        probe_accuracy=probes,
        alignment_quality=align,
        inter_class_distance=inter,
        intra_class_variance=intra,
        mc_accuracy=mc.accuracy,
        confusion=mc.confusion,
        per_class_accuracy=mc.per_class_accuracy,
        notes=mc.notes,
    )
