"""Activation-clustering detection and remediation of poisoned training data.

Training samples are grouped by the model's own predictions; each
group's penultimate activations are reduced to two independent
components and clustered with k-means.  A group that splits into a
well-separated small cluster (high silhouette, small minority fraction)
is flagged, the minority cluster is treated as the poison set, and the
model is fine-tuned on a corrected dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attack import PoisonRecord
from .data import SampleSet


@dataclass
class DefenseConfig:
    ica_components: int = 2
    kmeans_k: int = 2
    silhouette_threshold: float = 0.55
    max_cluster_fraction: float = 0.35
    fine_tune_iterations: int = 500
    kmeans_restarts: int = 10
    ica_tol: float = 1e-4
    ica_max_iter: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.ica_components < 2:
            raise ValueError("ica_components must be >= 2")
        if self.kmeans_k < 2:
            raise ValueError("kmeans_k must be >= 2")
        if not -1.0 <= self.silhouette_threshold <= 1.0:
            raise ValueError("silhouette_threshold must lie in [-1, 1]")
        if not 0.0 < self.max_cluster_fraction < 1.0:
            raise ValueError("max_cluster_fraction must lie in (0, 1)")
        if self.fine_tune_iterations < 0:
            raise ValueError("fine_tune_iterations must be >= 0")
        if self.kmeans_restarts < 1:
            raise ValueError("kmeans_restarts must be >= 1")


def _sym_decorrelate(w: np.ndarray) -> np.ndarray:
    """w <- (w w^T)^{-1/2} w, making the rows an orthonormal set."""
    s, u = np.linalg.eigh(w @ w.T)
    s = np.clip(s, 1e-12, None)
    return (u / np.sqrt(s)) @ u.T @ w


def reduce_activations(features: np.ndarray, n_components: int = 2,
                       tol: float = 1e-4, max_iter: int = 200,
                       rng: np.random.Generator | None = None):
    """Whitened fastICA projection to n_components dimensions.

    Returns (points, converged).  When the fixed-point iteration does
    not converge, or the data has fewer informative directions than
    requested, the plain whitening projection (zero-padded if needed)
    is returned with converged=False so callers can flag it.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 3:
        raise ValueError("need a 2-D array of at least 3 feature vectors")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    rng = rng if rng is not None else np.random.default_rng(0)

    xc = x - x.mean(axis=0)
    cov = (xc.T @ xc) / len(xc)
    evals, evecs = np.linalg.eigh(cov)
    keep = evals > max(evals.max(), 0.0) * 1e-9
    if keep.sum() < n_components:
        # degenerate geometry: whiten what is there, pad the rest with zeros
        k = int(keep.sum())
        pts = np.zeros((len(x), n_components))
        if k > 0:
            vecs = evecs[:, keep][:, ::-1]
            lam = evals[keep][::-1]
            pts[:, :k] = xc @ (vecs / np.sqrt(lam))
        return pts, False

    vecs = evecs[:, -n_components:][:, ::-1]
    lam = evals[-n_components:][::-1]
    z = xc @ (vecs / np.sqrt(lam))  # (n, k), identity covariance

    w = _sym_decorrelate(rng.standard_normal((n_components, n_components)))
    for _ in range(max_iter):
        u = z @ w.T
        g = np.tanh(u)
        w1 = (g.T @ z) / len(z) - (1.0 - g * g).mean(axis=0)[:, None] * w
        w1 = _sym_decorrelate(w1)
        shift = np.max(np.abs(np.abs(np.einsum("ij,ij->i", w1, w)) - 1.0))
        w = w1
        if shift < tol:
            return z @ w.T, True
    return z, False


def kmeans(points: np.ndarray, k: int = 2, restarts: int = 10,
           rng: np.random.Generator | None = None, max_iter: int = 100):
    """Lloyd's algorithm, best inertia over seeded restarts.

    Returns (assignment, centers, inertia).
    """
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if n < k:
        raise ValueError(f"need at least {k} points, got {n}")
    rng = rng if rng is not None else np.random.default_rng(0)

    best = None
    for _ in range(restarts):
        centers = x[rng.choice(n, size=k, replace=False)].copy()
        assign = np.full(n, -1, dtype=np.int64)
        for _ in range(max_iter):
            d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new = d2.argmin(axis=1)
            for j in range(k):
                if not (new == j).any():
                    # revive an empty cluster with the worst-fit point
                    new[d2[np.arange(n), new].argmax()] = j
            if np.array_equal(new, assign):
                break
            assign = new
            for j in range(k):
                centers[j] = x[assign == j].mean(axis=0)
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        inertia = float(d2[np.arange(n), assign].sum())
        if best is None or inertia < best[2]:
            best = (assign.copy(), centers.copy(), inertia)
    return best


def silhouette_score(points: np.ndarray, labels: np.ndarray,
                     chunk: int = 512) -> float:
    """Mean silhouette coefficient, exact pairwise distances.

    Singleton clusters and all-identical points contribute 0, matching
    the usual convention for the degenerate cases.
    """
    x = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(x)
    uniq = np.unique(labels)
    if n < 2 or len(uniq) < 2:
        return 0.0
    onehot = (labels[None, :] == uniq[:, None])  # (k, n)
    counts = onehot.sum(axis=1).astype(np.float64)
    own = np.searchsorted(uniq, labels)

    s = np.zeros(n)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        d = np.sqrt(((x[lo:hi, None, :] - x[None, :, :]) ** 2).sum(axis=2))
        sums = d @ onehot.T  # (chunk, k): total distance to each cluster
        rows = np.arange(hi - lo)
        oc = own[lo:hi]
        denom = counts[oc] - 1.0
        a = np.where(denom > 0, sums[rows, oc] / np.maximum(denom, 1.0), 0.0)
        mean_other = sums / counts[None, :]
        mean_other[rows, oc] = np.inf
        b = mean_other.min(axis=1)
        top = np.maximum(a, b)
        sc = np.where((top > 0) & (denom > 0), (b - a) / np.where(top > 0, top, 1.0), 0.0)
        s[lo:hi] = sc
    return float(s.mean())


def cluster_and_score(points: np.ndarray, k: int = 2, restarts: int = 10,
                      rng: np.random.Generator | None = None):
    """(assignment, silhouette) for the best k-means split of the points."""
    if len(points) < 2 * k:
        raise ValueError(f"need at least {2 * k} points to cluster")
    assign, _, _ = kmeans(points, k=k, restarts=restarts, rng=rng)
    return assign, silhouette_score(points, assign)


@dataclass
class ClassAnalysis:
    class_id: int
    indices: np.ndarray        # positions in the analyzed training set
    points: np.ndarray         # (n, 2) reduced activations
    assignment: np.ndarray
    silhouette: float
    cluster_sizes: tuple
    ica_converged: bool

    @property
    def smaller_cluster(self) -> int:
        return int(np.argmin(self.cluster_sizes))

    @property
    def smaller_fraction(self) -> float:
        return float(min(self.cluster_sizes) / sum(self.cluster_sizes))


@dataclass
class DefenseReport:
    per_class: dict
    suspect_class: int | None
    suspect_cluster: int | None
    detected_indices: np.ndarray
    recovered_trigger: np.ndarray | None
    recall: float | None = None
    precision: float | None = None
    notes: list = field(default_factory=list)

    @property
    def attack_free(self) -> bool:
        return self.suspect_class is None


def detect_poison(samples: SampleSet, learner, config: DefenseConfig | None = None,
                  truth: PoisonRecord | None = None,
                  task_id: int | None = None) -> DefenseReport:
    """Group by model prediction, cluster each group, flag the outlier group."""
    config = config if config is not None else DefenseConfig()
    preds = learner.predict(samples, task_id=task_id)
    feats = learner.penultimate_activations(samples).astype(np.float64)

    notes = []
    per_class: dict[int, ClassAnalysis] = {}
    for c in np.unique(preds):
        idx = np.flatnonzero(preds == c)
        if len(idx) < max(3, 2 * config.kmeans_k):
            notes.append(f"class {int(c)}: group of {len(idx)} is too small, skipped")
            continue
        rng = np.random.default_rng([config.seed, int(c)])
        pts, converged = reduce_activations(
            feats[idx], config.ica_components, config.ica_tol,
            config.ica_max_iter, rng,
        )
        if not converged:
            notes.append(f"class {int(c)}: ICA did not converge, using whitened projection")
        assign, score = cluster_and_score(pts, config.kmeans_k,
                                          config.kmeans_restarts, rng)
        sizes = tuple(int(v) for v in np.bincount(assign, minlength=config.kmeans_k))
        per_class[int(c)] = ClassAnalysis(
            class_id=int(c), indices=idx, points=pts, assignment=assign,
            silhouette=float(score), cluster_sizes=sizes, ica_converged=converged,
        )

    candidates = [
        a for a in per_class.values()
        if a.silhouette >= config.silhouette_threshold
        and a.smaller_fraction <= config.max_cluster_fraction
    ]
    if candidates:
        pick = max(candidates, key=lambda a: a.silhouette)
        cluster = pick.smaller_cluster
        detected = pick.indices[pick.assignment == cluster]
        recovered = samples.pixels[detected].mean(axis=0)
        report = DefenseReport(per_class, pick.class_id, cluster,
                               detected.astype(np.int64), recovered, notes=notes)
    else:
        report = DefenseReport(per_class, None, None,
                               np.empty(0, dtype=np.int64), None, notes=notes)

    if truth is not None:
        truth_idx = set(int(i) for i in truth.poisoned_indices)
        hit = sum(1 for i in report.detected_indices if int(i) in truth_idx)
        report.recall = hit / len(truth_idx) if truth_idx else None
        report.precision = (hit / len(report.detected_indices)
                            if len(report.detected_indices) else None)
    return report


def remediate(learner, samples: SampleSet, report: DefenseReport,
              truth: PoisonRecord | None = None, mode: str = "correct",
              iterations: int = 500, task_index: int | None = None):
    """Fix the flagged samples and fine-tune the learner in place.

    ``correct`` restores ground-truth labels for flagged samples (clean
    false positives already carry their true label); ``drop`` discards
    them.  Fine-tuning runs the learner's own training step, so replay
    and regularization stay active.
    """
    if mode not in ("correct", "drop"):
        raise ValueError(f"unknown remediation mode {mode!r}")
    detected = report.detected_indices
    if len(detected) == 0 or iterations == 0:
        return learner
    if mode == "correct":
        if truth is None:
            raise ValueError("correct mode needs the ground-truth poison record")
        fixed = samples.copy()
        originals = {int(i): int(l) for i, l in
                     zip(truth.poisoned_indices, truth.original_labels)}
        for i in detected:
            if int(i) in originals:
                fixed.labels[i] = originals[int(i)]
    else:
        keep = np.ones(len(samples), dtype=bool)
        keep[detected] = False
        if not keep.any():
            return learner
        fixed = samples.subset(np.flatnonzero(keep))
    learner.fine_tune(fixed, task_index=task_index, iterations=iterations)
    return learner


def defense_report_to_dict(report: DefenseReport) -> dict:
    """JSON form: full reduced points included so plots can be rebuilt."""
    per_class = {}
    for c, a in report.per_class.items():
        per_class[str(c)] = {
            "n": int(len(a.indices)),
            "silhouette": a.silhouette,
            "cluster_sizes": list(a.cluster_sizes),
            "ica_converged": a.ica_converged,
            "points": a.points.round(6).tolist(),
            "assignment": a.assignment.tolist(),
        }
    return {
        "suspect_class": report.suspect_class,
        "suspect_cluster": report.suspect_cluster,
        "detected_indices": report.detected_indices.tolist(),
        "recovered_trigger": (None if report.recovered_trigger is None
                              else report.recovered_trigger.tolist()),
        "recall": report.recall,
        "precision": report.precision,
        "attack_free": report.attack_free,
        "notes": list(report.notes),
        "per_class": per_class,
    }
