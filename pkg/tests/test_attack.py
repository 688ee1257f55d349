import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from il_backdoor.attack import (
    PoisonEvent,
    TriggerPattern,
    apply_trigger,
    apply_trigger_set,
    compromise_stats,
    default_row_split,
    make_checkerboard_trigger,
    poison_task,
    split_trigger,
)
from il_backdoor.data import Sample, SampleSet, TaskDataset


def test_checkerboard_pattern_exact():
    trig = make_checkerboard_trigger(6)
    assert trig.footprint == (6, 6)
    assert trig.mask.all()
    expect = np.array([[1, 0, 1, 0, 1, 0],
                       [0, 1, 0, 1, 0, 1]] * 3, dtype=np.float32)
    np.testing.assert_array_equal(trig.values, expect)
    assert int(trig.values.sum()) == 18


def test_checkerboard_origin_and_fit():
    trig = make_checkerboard_trigger(6, origin=(22, 22))
    assert trig.origin == (22, 22)
    with pytest.raises(ValueError):
        make_checkerboard_trigger(6, origin=(23, 23))
    with pytest.raises(ValueError):
        make_checkerboard_trigger(0)


def test_trigger_pattern_validation():
    with pytest.raises(ValueError):
        TriggerPattern(np.ones((2, 2), bool), np.ones((3, 3), np.float32))
    with pytest.raises(ValueError):
        TriggerPattern(np.ones((2, 2), bool), np.full((2, 2), 1.5, np.float32))


def test_split_trigger_reconstructs_global():
    trig = make_checkerboard_trigger(6)
    parts = split_trigger(trig, [(0, 1), (2, 3), (4, 5)])
    assert len(parts) == 3
    # masks partition the footprint
    total = np.zeros((6, 6), dtype=int)
    for p in parts:
        total += p.mask.astype(int)
        assert p.origin == trig.origin
    np.testing.assert_array_equal(total, np.ones((6, 6), int))
    # overlaying the parts rebuilds the global values
    merged = np.zeros((6, 6), np.float32)
    for p in parts:
        merged[p.mask] = p.values[p.mask]
    np.testing.assert_array_equal(merged, trig.values)


def test_split_trigger_bounds_inclusive():
    trig = make_checkerboard_trigger(6)
    (band,) = split_trigger(trig, [(2, 4)])
    assert band.mask[2:5].all() and not band.mask[:2].any() and not band.mask[5:].any()
    with pytest.raises(ValueError):
        split_trigger(trig, [(4, 6)])
    with pytest.raises(ValueError):
        split_trigger(trig, [(3, 2)])


def test_default_row_split_covers_all_rows():
    trig = make_checkerboard_trigger(6)
    for n in (1, 2, 3, 6):
        parts = default_row_split(trig, n)
        total = np.zeros((6, 6), dtype=int)
        for p in parts:
            total += p.mask.astype(int)
        np.testing.assert_array_equal(total, 1)
    with pytest.raises(ValueError):
        default_row_split(trig, 7)


def test_apply_trigger_copies_and_keeps_label():
    rng = np.random.default_rng(0)
    pix = rng.random((28, 28)).astype(np.float32)
    sample = Sample(pix, 4)
    trig = make_checkerboard_trigger(6, origin=(10, 10))
    out = apply_trigger(sample, trig)
    assert out.label == 4
    assert out.pixels is not sample.pixels
    np.testing.assert_array_equal(sample.pixels, pix)  # input untouched
    np.testing.assert_array_equal(out.pixels[10:16, 10:16], trig.values)
    mask = np.ones((28, 28), bool)
    mask[10:16, 10:16] = False
    np.testing.assert_array_equal(out.pixels[mask], pix[mask])


def test_apply_trigger_set_matches_scalar_path():
    rng = np.random.default_rng(1)
    samples = SampleSet(rng.random((5, 28, 28)).astype(np.float32),
                        np.arange(5, dtype=np.int64))
    trig = make_checkerboard_trigger(6)
    batch = apply_trigger_set(samples, trig)
    for i in range(5):
        one = apply_trigger(samples[i], trig)
        np.testing.assert_array_equal(batch.pixels[i], one.pixels)
    np.testing.assert_array_equal(batch.labels, samples.labels)


def make_task(n=200, seed=0, classes=(0, 1, 2)):
    rng = np.random.default_rng(seed)
    pix = rng.random((n, 28, 28)).astype(np.float32)
    labels = rng.choice(classes, size=n).astype(np.int64)
    test = SampleSet(pix[: n // 4].copy(), labels[: n // 4].copy())
    return TaskDataset(SampleSet(pix, labels), test, tuple(classes))


def test_poison_appends_stamped_copies():
    task = make_task()
    trig = make_checkerboard_trigger(6)
    ev = PoisonEvent(task_index=1, ratio=0.05, trigger=trig, seed=42)
    poisoned, record = poison_task(task, ev)
    k = round(0.05 * 200)
    assert len(poisoned.train) == 200 + k
    np.testing.assert_array_equal(record.poisoned_indices, np.arange(200, 200 + k))
    assert record.target_label == 0  # default: the task's first class
    # appended rows are stamped and relabeled, originals untouched
    np.testing.assert_array_equal(poisoned.train.pixels[:200], task.train.pixels)
    np.testing.assert_array_equal(poisoned.train.labels[:200], task.train.labels)
    tail = poisoned.train.pixels[200:]
    np.testing.assert_array_equal(
        tail[:, :6, :6], np.broadcast_to(trig.values, (k, 6, 6))
    )
    assert (poisoned.train.labels[200:] == 0).all()
    # ground-truth originals line up with what was copied
    assert record.original_labels.shape == (k,)
    # test set is never touched
    assert poisoned.test is task.test


def test_poison_replace_mode():
    task = make_task()
    trig = make_checkerboard_trigger(6)
    ev = PoisonEvent(task_index=1, ratio=0.05, trigger=trig, target_label=2, seed=7)
    poisoned, record = poison_task(task, ev, replace=True)
    k = round(0.05 * 200)
    assert len(poisoned.train) == 200
    assert len(record.poisoned_indices) == k
    assert (np.diff(record.poisoned_indices) > 0).all()  # sorted positions
    sel = record.poisoned_indices
    assert (poisoned.train.labels[sel] == 2).all()
    np.testing.assert_array_equal(record.original_labels, task.train.labels[sel])
    keep = np.setdiff1d(np.arange(200), sel)
    np.testing.assert_array_equal(poisoned.train.pixels[keep], task.train.pixels[keep])


def test_poison_determinism_and_seed_sensitivity():
    task = make_task()
    trig = make_checkerboard_trigger(6)
    a1, r1 = poison_task(task, PoisonEvent(1, 0.05, trig, seed=3))
    a2, r2 = poison_task(task, PoisonEvent(1, 0.05, trig, seed=3))
    b, rb = poison_task(task, PoisonEvent(1, 0.05, trig, seed=4))
    np.testing.assert_array_equal(a1.train.pixels, a2.train.pixels)
    np.testing.assert_array_equal(r1.original_labels, r2.original_labels)
    assert not np.array_equal(r1.original_labels, rb.original_labels) or \
        not np.array_equal(a1.train.pixels, b.train.pixels)


def test_poison_ratio_cap_and_zero():
    task = make_task()
    trig = make_checkerboard_trigger(6)
    with pytest.raises(ValueError):
        poison_task(task, PoisonEvent(1, 0.06, trig, seed=0))
    # explicit cap raise allows it
    poisoned, _ = poison_task(task, PoisonEvent(1, 0.06, trig, seed=0), ratio_cap=0.1)
    assert len(poisoned.train) == 200 + 12
    # ratio 0: same task object back, empty record
    same, record = poison_task(task, PoisonEvent(1, 0.0, trig, seed=0))
    assert same is task
    assert len(record.poisoned_indices) == 0


def test_poison_requires_concrete_seed():
    task = make_task()
    trig = make_checkerboard_trigger(6)
    with pytest.raises(ValueError):
        poison_task(task, PoisonEvent(1, 0.05, trig))


def test_poison_event_validation():
    trig = make_checkerboard_trigger(6)
    with pytest.raises(ValueError):
        PoisonEvent(0, 0.05, trig)
    with pytest.raises(ValueError):
        PoisonEvent(1, 1.5, trig)


def test_compromise_stats_exact():
    p, e = compromise_stats(10, 0.3)
    assert abs(p - (1.0 - 0.7**10)) < 1e-15
    assert e == pytest.approx(3.0)
    assert compromise_stats(1, 0.0) == (0.0, 0.0)
    assert compromise_stats(5, 1.0) == (1.0, 5.0)
    with pytest.raises(ValueError):
        compromise_stats(0, 0.5)
    with pytest.raises(ValueError):
        compromise_stats(3, -0.1)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 50), p=st.floats(0.0, 1.0))
def test_compromise_stats_properties(n, p):
    prob, expect = compromise_stats(n, p)
    assert 0.0 <= prob <= 1.0
    assert prob <= min(1.0, expect + 1e-12)  # union bound
    bigger = compromise_stats(n + 1, p)[0]
    assert bigger >= prob  # monotone in n
    if 1e-6 < p < 1.0 - 1e-6 and bigger < 1.0:
        assert bigger > prob


@settings(max_examples=30, deadline=None)
@given(size=st.integers(1, 10), parts=st.data())
def test_row_split_property(size, parts):
    trig = make_checkerboard_trigger(size, image_shape=(12, 12))
    n = parts.draw(st.integers(1, size))
    bands = default_row_split(trig, n)
    assert len(bands) == n
    merged = np.zeros((size, size), np.float32)
    seen = np.zeros((size, size), int)
    for b in bands:
        merged[b.mask] = b.values[b.mask]
        seen += b.mask.astype(int)
    np.testing.assert_array_equal(seen, 1)
    np.testing.assert_array_equal(merged, trig.values)
