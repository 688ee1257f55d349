"""The ten incremental learners behind one train/consolidate/predict interface."""

from __future__ import annotations

from ..checkpoint import load_checkpoint, save_checkpoint
from ..data import TaskStream
from .base import (
    METHODS,
    VALID_SCENARIOS,
    BaseLearner,
    LearnerConfig,
    MethodScenarioError,
    StreamMeta,
    TrainingDivergence,
    as_matrix,
)
from .generative import DGR, DGRdistill
from .icarl import ICaRL, herd_indices
from .regularization import SI, EWC, LwF, OnlineEWC, XdG, estimate_fisher
from .replay import AGEM, ER, BufferedLearner, project_gradient

REGISTRY = {
    "EWC": EWC,
    "OnlineEWC": OnlineEWC,
    "SI": SI,
    "LwF": LwF,
    "XdG": XdG,
    "DGR": DGR,
    "DGRdistill": DGRdistill,
    "ER": ER,
    "AGEM": AGEM,
    "iCaRL": ICaRL,
}


def create_learner(config: LearnerConfig, stream, seed: int) -> BaseLearner:
    """Build a fresh learner state for a stream (or its StreamMeta)."""
    meta = StreamMeta.of(stream) if isinstance(stream, TaskStream) else stream
    allowed = VALID_SCENARIOS[config.method]
    if meta.scenario not in allowed:
        raise MethodScenarioError(
            f"{config.method} does not run in the {meta.scenario!r} scenario "
            f"(supported: {', '.join(allowed)})"
        )
    return REGISTRY[config.method](config, meta, seed)


def save_learner(learner: BaseLearner, path):
    """Learner state -> checkpoint file (model + method-tagged aux arrays)."""
    meta = {"learner": learner.describe()}
    meta.update(learner.aux_meta())
    save_checkpoint(path, learner.model, aux_arrays=learner.aux_arrays(), meta=meta)


def load_learner(path) -> BaseLearner:
    model, aux, meta = load_checkpoint(path)
    desc = meta["learner"]
    cfg_dict = dict(desc["config"])
    config = LearnerConfig(**cfg_dict)
    sm = dict(desc["stream"])
    stream_meta = StreamMeta(
        scenario=sm["scenario"],
        n_tasks=sm["n_tasks"],
        classes_per_task=sm["classes_per_task"],
        total_classes=sm["total_classes"],
        image_shape=tuple(sm["image_shape"]),
        class_offsets=tuple(sm["class_offsets"]),
    )
    learner = create_learner(config, stream_meta, desc["seed"])
    learner.model.params[...] = model.params
    for t, m in model.gate_masks.items():
        learner.model.set_gate_mask(t, m)
    learner.tasks_seen = desc["tasks_seen"]
    learner._trained_through = desc["tasks_seen"]
    learner.class_hi = desc["class_hi"]
    learner.restore_aux(aux, meta)
    return learner


__all__ = [
    "METHODS",
    "VALID_SCENARIOS",
    "REGISTRY",
    "BaseLearner",
    "BufferedLearner",
    "LearnerConfig",
    "StreamMeta",
    "MethodScenarioError",
    "TrainingDivergence",
    "create_learner",
    "save_learner",
    "load_learner",
    "as_matrix",
    "project_gradient",
    "herd_indices",
    "estimate_fisher",
    "EWC",
    "OnlineEWC",
    "SI",
    "LwF",
    "XdG",
    "DGR",
    "DGRdistill",
    "ER",
    "AGEM",
    "ICaRL",
]
