"""Model checkpoints: ``model.json`` (spec, mode, layout) + ``params.bin``.

``params.bin`` is the concatenation of little-endian float64 arrays in the
canonical walk order: all trainable parameters in attribute-assignment order
(base blocks, head, then the CEC table or SE MLP), followed by the BatchNorm
running statistics in module order. ``model.json`` lists every entry's name
and shape in that order.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .conditioning import ConditionedModel, ConditioningMode
from .models import spec_from_dict, spec_to_dict

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: ConditionedModel, path, extra: dict | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    param_names = {n for n, _ in model.named_parameters()}
    state = model.state_dict()
    layout = [{"name": n, "shape": list(v.shape), "kind": "parameter" if n in param_names else "buffer"}
              for n, v in state.items()]
    meta = {
        "version": CHECKPOINT_VERSION,
        "spec": spec_to_dict(model.spec),
        "mode": model.mode.to_dict(),
        "num_subjects": model.num_subjects,
        "num_channels": model.num_channels,
        "seed": model.seed,
        "dtype": "f64",
        "byte_order": "little",
        "entries": layout,
    }
    if extra:
        meta["extra"] = extra
    with open(os.path.join(path, "model.json"), "w") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")
    flat = np.concatenate([v.reshape(-1) for v in state.values()]).astype("<f8")
    with open(os.path.join(path, "params.bin"), "wb") as f:
        f.write(flat.tobytes())


def load_checkpoint(path) -> ConditionedModel:
    try:
        with open(os.path.join(path, "model.json")) as f:
            meta = json.load(f)
        with open(os.path.join(path, "params.bin"), "rb") as f:
            raw = f.read()
    except FileNotFoundError as e:
        raise CheckpointError(f"incomplete checkpoint at {path}: {e.filename} missing") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')!r}")
    model = ConditionedModel(spec_from_dict(meta["spec"]), ConditioningMode(**meta["mode"]),
                             meta["num_subjects"], meta["num_channels"], meta["seed"])
    flat = np.frombuffer(raw, dtype="<f8")
    names = [e["name"] for e in meta["entries"]]
    own = model.state_dict()
    if names != list(own):
        raise CheckpointError("checkpoint layout does not match the model built from its spec")
    total = sum(v.size for v in own.values())
    if flat.size != total:
        raise CheckpointError(f"params.bin holds {flat.size} values, expected {total}")
    state, offset = {}, 0
    for name, v in own.items():
        state[name] = flat[offset:offset + v.size].reshape(v.shape)
        offset += v.size
    model.load_state_dict(state)
    model.eval()
    return model
