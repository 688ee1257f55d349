"""Activation-clustering defense: the silhouette hand oracle, clustering
and ICA numerics, detection on crafted feature geometry, and the
remediation state machine."""

import numpy as np
import pytest

from il_backdoor.attack import PoisonRecord
from il_backdoor.data import SampleSet
from il_backdoor.defense import (
    ClassAnalysis,
    DefenseConfig,
    cluster_and_score,
    detect_poison,
    kmeans,
    reduce_activations,
    remediate,
    silhouette_score,
)

# Four points, two flat clusters 10 apart, 1 apart inside:
# a = 1 for every point, b = (10 + sqrt(101)) / 2,
# s = 1 - a/b = 1 - 2 / (10 + sqrt(101))
HAND_SILHOUETTE = 1.0 - 2.0 / (10.0 + np.sqrt(101.0))
FOUR_POINTS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 10.0], [1.0, 10.0]])
FOUR_LABELS = np.array([0, 0, 1, 1])


def test_silhouette_four_point_hand_value():
    score = silhouette_score(FOUR_POINTS, FOUR_LABELS)
    assert abs(score - HAND_SILHOUETTE) < 1e-6
    assert score == pytest.approx(0.9002487578, abs=1e-9)


def test_silhouette_label_permutation_invariance():
    a = silhouette_score(FOUR_POINTS, FOUR_LABELS)
    b = silhouette_score(FOUR_POINTS, 1 - FOUR_LABELS)
    assert a == pytest.approx(b, abs=1e-12)
    # arbitrary label values, same partition
    c = silhouette_score(FOUR_POINTS, np.array([7, 7, 3, 3]))
    assert a == pytest.approx(c, abs=1e-12)


def test_silhouette_degenerate_cases():
    # one cluster only
    assert silhouette_score(FOUR_POINTS, np.zeros(4)) == 0.0
    # all points identical: a = b = 0 everywhere
    same = np.zeros((6, 2))
    assert silhouette_score(same, np.array([0, 0, 0, 1, 1, 1])) == 0.0
    # two coincident masses far apart approach the ideal score
    two = np.repeat(np.array([[0.0, 0.0], [100.0, 0.0]]), 5, axis=0)
    labs = np.repeat([0, 1], 5)
    assert silhouette_score(two, labs) == pytest.approx(1.0)
    # singleton cluster contributes 0, not nan
    pts = np.array([[0.0, 0.0], [0.1, 0.0], [50.0, 0.0]])
    s = silhouette_score(pts, np.array([0, 0, 1]))
    assert np.isfinite(s)


def test_silhouette_chunking_is_invisible():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(700, 2))
    labels = (pts[:, 0] > 0).astype(int)
    a = silhouette_score(pts, labels, chunk=512)
    b = silhouette_score(pts, labels, chunk=97)
    assert a == pytest.approx(b, abs=1e-12)


def test_kmeans_separates_blobs():
    rng = np.random.default_rng(1)
    x = np.concatenate([
        rng.normal(0.0, 0.3, size=(40, 2)),
        rng.normal(8.0, 0.3, size=(20, 2)),
    ])
    assign, centers, inertia = kmeans(x, k=2, rng=np.random.default_rng(0))
    assert inertia < 50.0
    left = assign[:40]
    right = assign[40:]
    assert len(np.unique(left)) == 1 and len(np.unique(right)) == 1
    assert left[0] != right[0]
    got = sorted(np.linalg.norm(c) for c in centers)
    assert got[0] < 1.0 and abs(got[1] - np.sqrt(2) * 8) < 1.0


def test_kmeans_needs_enough_points():
    with pytest.raises(ValueError):
        kmeans(np.zeros((1, 2)), k=2)


def test_cluster_and_score_guard():
    with pytest.raises(ValueError):
        cluster_and_score(np.zeros((3, 2)), k=2)


def test_ica_separates_highdim_blobs():
    rng = np.random.default_rng(2)
    base = rng.normal(size=(2, 100))
    x = np.concatenate([
        rng.normal(0, 0.05, size=(60, 100)) + base[0],
        rng.normal(0, 0.05, size=(15, 100)) + base[1],
    ])
    pts, converged = reduce_activations(x, 2, rng=np.random.default_rng(3))
    assert pts.shape == (75, 2)
    assign, score = cluster_and_score(pts, rng=np.random.default_rng(4))
    # whitening puts the noise component at unit variance too, so even a huge
    # raw-space gap lands near the detection gate rather than near 1.0
    assert score > 0.55
    assert len(np.unique(assign[:60])) == 1
    assert len(np.unique(assign[60:])) == 1


def test_ica_on_white_data_preserves_geometry():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(400, 2))
    pts, _ = reduce_activations(x, 2, rng=np.random.default_rng(6))
    # whitening + orthonormal rotation: pairwise distances survive
    sub = rng.choice(400, size=40, replace=False)
    xc = (x - x.mean(axis=0))
    cov = np.cov(xc.T, bias=True)
    evals, evecs = np.linalg.eigh(cov)
    z = xc @ (evecs[:, ::-1] / np.sqrt(evals[::-1]))
    d_in = np.linalg.norm(z[sub][:, None] - z[sub][None], axis=2)
    d_out = np.linalg.norm(pts[sub][:, None] - pts[sub][None], axis=2)
    np.testing.assert_allclose(d_out, d_in, atol=1e-6)


def test_ica_handles_constant_columns():
    rng = np.random.default_rng(7)
    x = np.zeros((50, 30))
    x[:, 0] = rng.normal(size=50)  # single informative direction
    pts, converged = reduce_activations(x, 2, rng=np.random.default_rng(8))
    assert converged is False
    assert pts.shape == (50, 2)
    assert np.allclose(pts[:, 1], 0.0)  # padded dimension
    assert np.std(pts[:, 0]) == pytest.approx(1.0, abs=0.05)


def test_ica_nonconvergence_is_flagged():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(100, 5))
    pts, converged = reduce_activations(x, 2, max_iter=1, tol=1e-12,
                                        rng=np.random.default_rng(10))
    assert converged is False
    assert pts.shape == (100, 2)


def test_reduce_activations_input_guards():
    with pytest.raises(ValueError):
        reduce_activations(np.zeros((2, 4)))
    bad = np.zeros((5, 4))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        reduce_activations(bad)


def test_defense_config_validation():
    with pytest.raises(ValueError):
        DefenseConfig(ica_components=1)
    with pytest.raises(ValueError):
        DefenseConfig(max_cluster_fraction=0.0)
    with pytest.raises(ValueError):
        DefenseConfig(silhouette_threshold=2.0)
    with pytest.raises(ValueError):
        DefenseConfig(kmeans_restarts=0)


# -- detection on crafted geometry -----------------------------------------------


class FakeLearner:
    """Duck-typed stand-in: fixed predictions and activations."""

    def __init__(self, preds, feats):
        self._preds = np.asarray(preds)
        self._feats = np.asarray(feats, dtype=np.float64)

    def predict(self, samples, task_id=None):
        return self._preds

    def penultimate_activations(self, samples):
        return self._feats


def crafted_scene(n_clean=120, n_poison=30, seed=0):
    """Class 0 contains a tight alien activation cluster; classes 1, 2 are clean."""
    rng = np.random.default_rng(seed)
    feats = []
    preds = []
    protos = rng.normal(size=(4, 40)) * 3.0
    feats.append(rng.normal(0, 0.15, size=(n_clean, 40)) + protos[0])
    preds += [0] * n_clean
    feats.append(rng.normal(0, 0.15, size=(n_poison, 40)) + protos[3])  # the implant
    preds += [0] * n_poison
    for c in (1, 2):
        feats.append(rng.normal(0, 0.15, size=(n_clean, 40)) + protos[c])
        preds += [c] * n_clean
    feats = np.concatenate(feats)
    n = len(feats)
    pixels = rng.random((n, 8, 8)).astype(np.float32)
    pixels[n_clean : n_clean + n_poison, :3, :3] = 1.0  # recoverable stamp
    samples = SampleSet(pixels, np.asarray(preds, dtype=np.int64))
    truth = PoisonRecord(
        task_index=1,
        poisoned_indices=np.arange(n_clean, n_clean + n_poison),
        original_labels=np.full(n_poison, 2),
        target_label=0,
    )
    return samples, FakeLearner(preds, feats), truth


def test_detect_poison_flags_the_implanted_cluster():
    samples, learner, truth = crafted_scene()
    report = detect_poison(samples, learner, DefenseConfig(), truth=truth)
    assert not report.attack_free
    assert report.suspect_class == 0
    assert report.recall == 1.0
    assert report.precision == 1.0
    np.testing.assert_array_equal(np.sort(report.detected_indices),
                                  truth.poisoned_indices)
    # recovered trigger is the mean of the flagged pixels: stamp corner lights up
    assert report.recovered_trigger[:3, :3].min() > 0.99
    assert report.recovered_trigger[4:, 4:].mean() < 0.7
    analysis = report.per_class[0]
    assert analysis.silhouette >= 0.55
    assert analysis.smaller_fraction <= 0.35
    assert analysis.ica_converged


def test_detect_poison_clean_scene_is_attack_free():
    rng = np.random.default_rng(3)
    feats = []
    preds = []
    for c in range(3):
        feats.append(rng.normal(0, 1.0, size=(100, 40)))
        preds += [c] * 100
    samples = SampleSet(rng.random((300, 8, 8)).astype(np.float32),
                        np.asarray(preds, dtype=np.int64))
    report = detect_poison(samples, FakeLearner(preds, np.concatenate(feats)),
                           DefenseConfig())
    assert report.attack_free
    assert report.recovered_trigger is None
    assert len(report.detected_indices) == 0
    assert report.recall is None and report.precision is None


def test_detect_poison_skips_tiny_groups():
    rng = np.random.default_rng(4)
    preds = [0] * 50 + [1] * 2  # class 1 too small to cluster
    feats = rng.normal(size=(52, 10))
    samples = SampleSet(rng.random((52, 8, 8)).astype(np.float32),
                        np.asarray(preds, dtype=np.int64))
    report = detect_poison(samples, FakeLearner(preds, feats), DefenseConfig())
    assert 1 not in report.per_class
    assert any("too small" in note for note in report.notes)


def test_detection_partition_invariant():
    samples, learner, truth = crafted_scene(seed=8)
    report = detect_poison(samples, learner, DefenseConfig(), truth=truth)
    a = report.per_class[0]
    assert sum(a.cluster_sizes) == len(a.indices)
    assert a.smaller_cluster == int(np.argmin(a.cluster_sizes))
    # detected indices live inside the suspect class group
    assert set(report.detected_indices) <= set(a.indices.tolist())


def test_detection_holds_across_implant_sizes():
    # Whitening rescales the between-cluster axis by 1/sqrt(p*(1-p)), so the
    # silhouette is not monotone in implant size. What must hold is that both
    # a small and a large implant clear the gate and are fully recovered.
    for n_poison in (6, 30):
        samples, learner, truth = crafted_scene(n_poison=n_poison, seed=5)
        report = detect_poison(samples, learner, DefenseConfig(), truth=truth)
        assert not report.attack_free
        assert report.suspect_class == 0
        assert report.recall == 1.0
        assert report.precision == 1.0
        assert report.per_class[0].silhouette >= 0.55


# -- remediation -------------------------------------------------------------------


class RecordingLearner:
    """Captures what fine_tune is asked to train on."""

    def __init__(self):
        self.calls = []

    def fine_tune(self, samples, task_index=None, iterations=500, batch_size=None):
        self.calls.append({"labels": np.asarray(samples.labels).copy(),
                           "n": len(samples.labels),
                           "task_index": task_index,
                           "iterations": iterations})
        return self


def small_report(detected):
    return type("R", (), {"detected_indices": np.asarray(detected, dtype=np.int64)})()


def make_poisoned_samples():
    rng = np.random.default_rng(0)
    pixels = rng.random((10, 4, 4)).astype(np.float32)
    labels = np.array([0, 0, 0, 0, 5, 5, 1, 1, 1, 1], dtype=np.int64)
    truth = PoisonRecord(1, np.array([4, 5]), np.array([1, 2]), target_label=5)
    return SampleSet(pixels, labels), truth


def test_remediate_correct_restores_labels():
    samples, truth = make_poisoned_samples()
    learner = RecordingLearner()
    remediate(learner, samples, small_report([4, 5, 6]), truth=truth,
              mode="correct", iterations=7, task_index=1)
    call = call = learner.calls[0]
    assert call["n"] == 10
    # poisoned rows get their original labels back; the clean false
    # positive (6) keeps its own label
    assert call["labels"][4] == 1 and call["labels"][5] == 2
    assert call["labels"][6] == 1
    assert call["task_index"] == 1 and call["iterations"] == 7
    # caller's arrays untouched
    assert samples.labels[4] == 5


def test_remediate_drop_removes_rows():
    samples, truth = make_poisoned_samples()
    learner = RecordingLearner()
    remediate(learner, samples, small_report([4, 5]), truth=truth, mode="drop")
    call = learner.calls[0]
    assert call["n"] == 8
    assert 5 not in call["labels"]


def test_remediate_guards():
    samples, truth = make_poisoned_samples()
    learner = RecordingLearner()
    with pytest.raises(ValueError):
        remediate(learner, samples, small_report([4]), mode="purge")
    with pytest.raises(ValueError):
        remediate(learner, samples, small_report([4]), truth=None, mode="correct")
    # nothing detected or zero iterations: no training call
    remediate(learner, samples, small_report([]), truth=truth, mode="correct")
    remediate(learner, samples, small_report([4]), truth=truth, mode="correct",
              iterations=0)
    assert learner.calls == []
