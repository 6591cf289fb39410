"""Evaluation: accuracy, pattern quality metrics and embedding projection.

Quality is measured per sample against the paired ground truth with four
numbers: l1 and l2 distance, KL divergence between the patterns normalized
as distributions, and a zero-normalized cross-correlation in [-1, 1].
Reports aggregate both the mean and the median (lower middle for even
counts) and track how often refinement improved each sample.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import ROLE_IMPERFECT, PatternDataset
from .proto import PrototypeSet
from .tensor import Tensor, no_grad

KL_EPSILON = 1e-8


class DiffMetrics(NamedTuple):
    l1: float
    l2: float
    kl: float
    ncc: float


def pattern_diff(a, b) -> DiffMetrics:
    """All four quality metrics between two equal-length patterns."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"pattern_diff: incompatible shapes {a.shape} vs {b.shape}")
    diff = a - b
    l1 = float(np.abs(diff).sum())
    l2 = float(np.sqrt((diff * diff).sum()))
    p = a + KL_EPSILON
    q = b + KL_EPSILON
    p = p / p.sum()
    q = q / q.sum()
    kl = float((p * np.log(p / q)).sum())
    ncc = zero_normalized_correlation(a, b)
    return DiffMetrics(l1, l2, kl, ncc)


def zero_normalized_correlation(a, b) -> float:
    """Pearson-style correlation of mean-removed patterns, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.array_equal(a, b):
        return 1.0
    da = a - a.mean()
    db = b - b.mean()
    na = float(np.sqrt((da * da).sum()))
    nb = float(np.sqrt((db * db).sum()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip((da * db).sum() / (na * nb), -1.0, 1.0))


def median_lower(values) -> float:
    """Median taking the lower of the two middle values for even counts."""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    if ordered.size == 0:
        raise ValueError("median of an empty sequence")
    return float(ordered[(ordered.size - 1) // 2])


def predict(classifier, patterns) -> np.ndarray:
    """Class predictions via the prediction head's highest logit."""
    with no_grad():
        _, logits = classifier.forward(Tensor(np.asarray(patterns, dtype=np.float64)))
    return logits.data.argmax(axis=1)


def accuracy(classifier, protos: PrototypeSet, patterns, labels) -> float:
    """Fraction of patterns whose argmax-softmax prediction matches the label."""
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size == 0:
        raise ValueError("accuracy over an empty set")
    return float((predict(classifier, patterns) == labels).mean())


def nearest_prototype_predictions(classifier, protos: PrototypeSet,
                                  patterns) -> np.ndarray:
    """Class of the closest prototype in embedding space, per pattern."""
    with no_grad():
        emb, _ = classifier.forward(Tensor(np.asarray(patterns, dtype=np.float64)))
    delta = emb.data[:, None, :] - protos.prototypes.data[None, :, :]
    return np.einsum("nkm,nkm->nk", delta, delta).argmin(axis=1)


def mean_prediction_entropy(classifier, patterns) -> float:
    """Mean Shannon entropy (natural log) of the classifier softmax."""
    from .proto import prediction_entropy_loss

    with no_grad():
        _, logits = classifier.forward(Tensor(np.asarray(patterns, dtype=np.float64)))
        return prediction_entropy_loss(Tensor(logits.data)).item()


@dataclass(frozen=True)
class SampleRecord:
    index: int
    raw: DiffMetrics
    refined: DiffMetrics


@dataclass(frozen=True)
class MetricsReport:
    """Per-sample quality rows plus aggregate statistics and accuracies."""

    records: tuple[SampleRecord, ...]
    accuracy_raw: float
    accuracy_refined: float

    @property
    def sample_count(self) -> int:
        return len(self.records)

    def aggregates(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for side in ("raw", "refined"):
            for metric in DiffMetrics._fields:
                values = [getattr(getattr(r, side), metric) for r in self.records]
                out[f"{side}_{metric}"] = {
                    "mean": float(np.mean(values)),
                    "median": median_lower(values),
                }
        return out

    def improved_fraction(self, metric: str) -> float:
        """Share of samples where refinement improved the given metric."""
        better = 0
        for r in self.records:
            raw, refined = getattr(r.raw, metric), getattr(r.refined, metric)
            better += (refined > raw) if metric == "ncc" else (refined < raw)
        return better / len(self.records)

    def csv_text(self) -> str:
        header = ["sample"]
        header += [f"raw_{m}" for m in DiffMetrics._fields]
        header += [f"refined_{m}" for m in DiffMetrics._fields]
        lines = [",".join(header)]
        for r in self.records:
            row = [str(r.index)]
            row += [str(v) for v in r.raw]
            row += [str(v) for v in r.refined]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def table_text(self) -> str:
        agg = self.aggregates()
        lines = [
            f"samples: {self.sample_count}",
            f"accuracy raw:     {self.accuracy_raw:.4f}",
            f"accuracy refined: {self.accuracy_refined:.4f}",
            "",
            f"{'metric':<10}{'raw mean':>12}{'refined mean':>14}"
            f"{'raw median':>13}{'refined median':>16}",
        ]
        for metric in DiffMetrics._fields:
            lines.append(
                f"{metric:<10}"
                f"{agg['raw_' + metric]['mean']:>12.5f}"
                f"{agg['refined_' + metric]['mean']:>14.5f}"
                f"{agg['raw_' + metric]['median']:>13.5f}"
                f"{agg['refined_' + metric]['median']:>16.5f}")
        lines.append("")
        for metric in ("l1", "kl"):
            lines.append(f"improved {metric}: "
                         f"{self.improved_fraction(metric) * 100.0:.1f}% of samples")
        return "\n".join(lines) + "\n"


def _worker_count() -> int:
    raw = os.environ.get("PF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def evaluate_refinement(refiner, classifier, protos: PrototypeSet,
                        dataset: PatternDataset) -> MetricsReport:
    """Quality and accuracy of refinement over a paired imperfect test set."""
    raw = dataset.values(ROLE_IMPERFECT)
    labels = dataset.labels(ROLE_IMPERFECT)
    if raw.shape[0] == 0:
        raise ValueError("dataset has no imperfect patterns")
    ground_truth = dataset.paired_ground_truth()  # raises when pairing is missing
    with no_grad():
        refined = refiner.forward(Tensor(raw)).data

    def one(i: int) -> SampleRecord:
        return SampleRecord(i, pattern_diff(raw[i], ground_truth[i]),
                            pattern_diff(refined[i], ground_truth[i]))

    workers = _worker_count()
    indices = range(raw.shape[0])
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = tuple(pool.map(one, indices))  # submission order kept
    else:
        records = tuple(one(i) for i in indices)
    return MetricsReport(
        records=records,
        accuracy_raw=accuracy(classifier, protos, raw, labels),
        accuracy_refined=accuracy(classifier, protos, refined, labels),
    )


# -- embedding projection --------------------------------------------------------


def _power_iteration_top2(cov: np.ndarray):
    """Leading two eigenvectors of a symmetric matrix by power iteration
    with deflation; deterministic start vectors."""
    m = cov.shape[0]
    components = []
    work = cov.copy()
    for comp in range(2):
        v = np.ones(m) + 1e-3 * np.arange(m) / max(m - 1, 1) + comp
        v /= np.linalg.norm(v)
        for _ in range(500):
            nxt = work @ v
            norm = np.linalg.norm(nxt)
            if norm == 0.0:
                break
            nxt /= norm
            if np.abs(nxt - v).max() < 1e-13:
                v = nxt
                break
            v = nxt
        # deterministic sign: largest-magnitude entry positive
        pivot = int(np.argmax(np.abs(v)))
        if v[pivot] < 0:
            v = -v
        eigenvalue = float(v @ work @ v)
        components.append(v)
        work = work - eigenvalue * np.outer(v, v)
    return np.stack(components, axis=1)  # (m, 2)


def pca_project_2d(embeddings: np.ndarray):
    """Project rows onto the top-2 principal components of their covariance.

    Returns (projected (n, 2), components (m, 2), column means (m,)).
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least 2 samples to project")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    components = _power_iteration_top2(cov)
    return centered @ components, components, mean


def export_embeddings_2d(classifier, patterns, labels, path) -> np.ndarray:
    """Write (x, y, label) rows of the 2-D embedding projection; returns it."""
    labels = np.asarray(labels, dtype=np.intp)
    with no_grad():
        emb, _ = classifier.forward(Tensor(np.asarray(patterns, dtype=np.float64)))
    projected, _, _ = pca_project_2d(emb.data)
    with open(path, "w") as fh:
        fh.write("x,y,label\n")
        for (px, py), label in zip(projected, labels):
            fh.write(f"{float(px)},{float(py)},{int(label)}\n")
    return projected
