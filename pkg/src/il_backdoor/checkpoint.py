"""Model/learner checkpoint container.

A checkpoint is an .npz archive: a JSON metadata entry (layer dims,
head layout, learner method tag) plus named float64 arrays (parameter
vectors stored row-major, gate masks, and the learner's method-specific
auxiliary arrays).  Round-trips are bit-exact: arrays are upcast to
float64 on save and cast back to the recorded compute dtype on load,
which is lossless for float32/float64 models.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from .nets import ClassifierMLP
from .vae import VAE

FORMAT = "il-backdoor-checkpoint-v1"


def _meta_for_classifier(model: ClassifierMLP) -> dict:
    return {
        "layer_dims": model.layer_dims,
        "n_heads": model.n_heads,
        "dtype": model.dtype.name,
        "gate_tasks": sorted(model.gate_masks),
    }


def classifier_arrays(model: ClassifierMLP, prefix: str = "model") -> dict[str, np.ndarray]:
    out = {f"{prefix}.params": model.params.astype(np.float64)}
    for t, m in model.gate_masks.items():
        out[f"{prefix}.gate.{t}"] = m.astype(np.float64)
    return out


def vae_arrays(gen: VAE, prefix: str = "generator") -> dict[str, np.ndarray]:
    return {f"{prefix}.params": gen.params.astype(np.float64)}


def save_checkpoint(path: str | Path, model: ClassifierMLP,
                    aux_arrays: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None):
    """Write model (+ optional auxiliary arrays and metadata) to ``path``."""
    full_meta = {"format": FORMAT, "model": _meta_for_classifier(model)}
    if meta:
        full_meta.update(meta)
    arrays = classifier_arrays(model)
    if aux_arrays:
        for k, v in aux_arrays.items():
            arrays[f"aux.{k}"] = np.asarray(v, dtype=np.float64)
    arrays["__meta__"] = np.frombuffer(
        json.dumps(full_meta, sort_keys=True).encode(), dtype=np.uint8
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path: str | Path):
    """Read a checkpoint; returns (model, aux_arrays, meta)."""
    with np.load(Path(path)) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path}: not an {FORMAT} file")
        m = meta["model"]
        model = ClassifierMLP(m["layer_dims"], n_heads=m["n_heads"], dtype=np.dtype(m["dtype"]))
        model.params[...] = z["model.params"].astype(model.dtype)
        for t in m["gate_tasks"]:
            model.set_gate_mask(int(t), z[f"model.gate.{t}"].astype(model.dtype))
        aux = {}
        for key in z.files:
            if key.startswith("aux."):
                aux[key[4:]] = z[key]
    return model, aux, meta


def restore_vae(aux: dict[str, np.ndarray], meta: dict, prefix: str = "generator") -> VAE:
    g = meta[prefix]
    gen = VAE(g["n_inputs"], g["hidden"], g["latent_dim"], dtype=np.dtype(g["dtype"]))
    gen.params[...] = aux[f"{prefix}.params"].astype(gen.dtype)
    return gen


def vae_meta(gen: VAE) -> dict:
    return {
        "n_inputs": gen.n_inputs,
        "hidden": gen.hidden,
        "latent_dim": gen.latent_dim,
        "dtype": gen.dtype.name,
    }
