"""Threshold-independent ranking metrics, thresholding, and collapse diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvariantError


def _binary_arrays(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InvariantError(f"scores/labels must be matching 1-D arrays, got {scores.shape}/{labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise InvariantError("labels must be 0/1")
    return scores, labels


def auroc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counted half.

    Computed by rank-sum with midrank tie handling.
    """
    scores, labels = _binary_arrays(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InvariantError("AUROC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision with step interpolation over descending thresholds."""
    scores, labels = _binary_arrays(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise InvariantError("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    # threshold group boundaries: last index of each tie group
    boundary = np.nonzero(np.diff(sorted_scores))[0]
    ends = np.concatenate([boundary, [scores.size - 1]])
    tp = np.cumsum(sorted_labels)[ends]
    precision = tp / (ends + 1.0)
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def best_threshold(scores, labels) -> float:
    """Accuracy-maximizing threshold from midpoints of sorted unique scores.

    Candidates include -inf/+inf, so single-class inputs resolve to the
    predict-everything threshold; ties pick the lowest candidate.
    """
    scores, labels = _binary_arrays(scores, labels)
    uniq = np.unique(scores)
    candidates = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2.0, [np.inf]])
    accs = [(np.mean((scores >= thr) == labels), -i) for i, thr in enumerate(candidates)]
    best = int(-max(accs)[1])
    return float(candidates[best])


def accuracy_at_threshold(scores, labels, threshold: float) -> float:
    scores, labels = _binary_arrays(scores, labels)
    return float(np.mean((scores >= threshold) == labels))


def macro_multiclass(score_matrix, labels):
    """One-vs-rest macro AUROC/AUPRC plus argmax accuracy.

    ``labels`` carry the raw class values; all of the matrix's classes must
    be present. Returns (auroc, auprc, accuracy).
    """
    scores = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.size:
        raise InvariantError(f"score matrix {scores.shape} does not match {labels.size} labels")
    classes = np.unique(labels)
    if classes.size != scores.shape[1]:
        raise InvariantError(
            f"matrix has {scores.shape[1]} columns but {classes.size} classes are present")
    aurocs, auprcs = [], []
    for k, cls in enumerate(classes):
        one_vs_rest = (labels == cls).astype(np.int64)
        aurocs.append(auroc(scores[:, k], one_vs_rest))
        auprcs.append(auprc(scores[:, k], one_vs_rest))
    predicted = classes[np.argmax(scores, axis=1)]
    accuracy = float(np.mean(predicted == labels))
    return float(np.mean(aurocs)), float(np.mean(auprcs)), accuracy


# ---------------------------------------------------------------------------
# Reports


@dataclass
class FoldMetrics:
    fold_id: int
    auroc: float
    auprc: float
    accuracy: float
    threshold: float
    n_test: int


@dataclass
class MetricsReport:
    task: str  # "binary" | "3-class"
    per_fold: list = field(default_factory=list)

    def add(self, fm: FoldMetrics) -> None:
        self.per_fold.append(fm)

    def _values(self, name):
        return np.asarray([getattr(f, name) for f in self.per_fold], dtype=np.float64)

    def mean(self, name) -> float:
        return float(self._values(name).mean())

    def sd(self, name) -> float:
        vals = self._values(name)
        return float(vals.std(ddof=1)) if vals.size > 1 else 0.0

    @property
    def n_folds(self) -> int:
        return len(self.per_fold)

    def summary(self) -> str:
        lines = [f"task: {self.task}  folds: {self.n_folds}"]
        for name in ("auroc", "auprc", "accuracy"):
            lines.append(f"{name}: {self.mean(name):.4f} ± {self.sd(name):.4f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        rows = ["fold,auroc,auprc,accuracy,threshold,n_test"]
        for f in sorted(self.per_fold, key=lambda f: f.fold_id):
            rows.append(f"{f.fold_id},{f.auroc!r},{f.auprc!r},{f.accuracy!r},{f.threshold!r},{f.n_test}")
        rows.append(f"mean,{self.mean('auroc')!r},{self.mean('auprc')!r},{self.mean('accuracy')!r},,")
        rows.append(f"sd,{self.sd('auroc')!r},{self.sd('auprc')!r},{self.sd('accuracy')!r},,")
        return "\n".join(rows) + "\n"


@dataclass
class CollapseReport:
    """Per-modality embedding-geometry diagnostics."""

    per_modality: dict = field(default_factory=dict)  # name -> dict of stats

    def to_csv(self) -> str:
        rows = ["modality,mean_pairwise_cosine,mean_feature_variance,excluded_pairs"]
        for name in sorted(self.per_modality):
            s = self.per_modality[name]
            rows.append(f"{name},{s['mean_pairwise_cosine']!r},{s['mean_feature_variance']!r},"
                        f"{s['excluded_pairs']}")
        return "\n".join(rows) + "\n"


def collapse_diagnostics(embeddings_by_modality: dict) -> CollapseReport:
    """Mean pairwise cosine and mean feature variance per modality.

    Zero-vector rows have undefined cosine; pairs touching them are excluded
    and counted in the report.
    """
    report = CollapseReport()
    for name, emb in embeddings_by_modality.items():
        x = np.asarray(emb, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise InvariantError(f"{name}: need [n >= 2, d] embeddings, got {x.shape}")
        n = x.shape[0]
        norms = np.linalg.norm(x, axis=1)
        nonzero = norms > 0
        m = int(nonzero.sum())
        total_pairs = n * (n - 1) // 2
        good_pairs = m * (m - 1) // 2
        if good_pairs == 0:
            mean_cos = 0.0
        else:
            unit = x[nonzero] / norms[nonzero, None]
            gram = unit @ unit.T
            mean_cos = float((gram.sum() - m) / (m * (m - 1)))
        mean_var = float(x.var(axis=0, ddof=1).mean())
        report.per_modality[name] = {
            "mean_pairwise_cosine": mean_cos,
            "mean_feature_variance": mean_var,
            "excluded_pairs": total_pairs - good_pairs,
        }
    return report
