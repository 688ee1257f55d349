import os

# pin BLAS threading before numpy loads: keeps runs bit-reproducible
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from il_backdoor.data import SampleSet, TaskDataset, TaskStream


@pytest.fixture(scope="session")
def mnist():
    from il_backdoor.harness import load_mnist

    return load_mnist()


def make_class_blob(rng, label, n, shape=(8, 8), spread=0.08):
    """Samples of one synthetic class: a fixed random prototype plus noise."""
    proto_rng = np.random.default_rng(label + 1000)
    proto = proto_rng.random(shape)
    pix = np.clip(proto[None] + rng.normal(0, spread, size=(n,) + shape), 0, 1)
    return pix.astype(np.float32)


def make_synth_stream(n_tasks=3, scenario="domain", n_train=90, n_test=45,
                      classes_per_task=3, shape=(8, 8), seed=0):
    """Small learnable stream: distinct prototypes per (task, class)."""
    rng = np.random.default_rng(seed)
    tasks = []
    for t in range(n_tasks):
        pix_tr, lab_tr, pix_te, lab_te = [], [], [], []
        if scenario == "class":
            class_ids = tuple(range(t * classes_per_task, (t + 1) * classes_per_task))
        else:
            class_ids = tuple(range(classes_per_task))
        for j, c in enumerate(class_ids):
            proto_label = t * classes_per_task + j  # distinct inputs per task
            pix_tr.append(make_class_blob(rng, proto_label, n_train // classes_per_task, shape))
            lab_tr.append(np.full(n_train // classes_per_task, c, dtype=np.int64))
            pix_te.append(make_class_blob(rng, proto_label, n_test // classes_per_task, shape))
            lab_te.append(np.full(n_test // classes_per_task, c, dtype=np.int64))
        train = SampleSet(np.concatenate(pix_tr), np.concatenate(lab_tr))
        test = SampleSet(np.concatenate(pix_te), np.concatenate(lab_te))
        tasks.append(TaskDataset(train, test, class_ids))
    return TaskStream(tasks=tasks, scenario=scenario, seed=seed,
                      permutations=None, name="synth", image_shape=shape)


@pytest.fixture
def synth_stream():
    return make_synth_stream()
