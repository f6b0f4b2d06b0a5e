"""Single-file JSON checkpoints with base64 little-endian float64 payloads."""
from __future__ import annotations

import base64
import json
import os
import tempfile
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
import torch

from ..grad import AdamState
from .model import SvaeConfig, SvaeModel

FORMAT_VERSION = 1


def encode_array(x: torch.Tensor | np.ndarray) -> str:
    arr = np.ascontiguousarray(np.asarray(x.detach() if isinstance(x, torch.Tensor) else x), dtype="<f8")
    return base64.b64encode(arr.tobytes()).decode("ascii")


def decode_array(s: str, shape) -> torch.Tensor:
    arr = np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape)
    return torch.from_numpy(arr.astype(np.float64))


class Checkpoint(NamedTuple):
    model: SvaeModel
    adam: AdamState | None
    rng_state: dict | None
    extra: dict


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def checkpoint_dict(model: SvaeModel, adam: AdamState | None = None, rng_state: dict | None = None,
                    extra: dict | None = None) -> dict[str, Any]:
    reg = model.registry
    doc: dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "registry": [{"name": k, "shape": list(s)} for k, s in reg.shapes.items()],
        "params": {k: encode_array(model.params[k]) for k in reg},
        "optimizer": None,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    if adam is not None:
        doc["optimizer"] = {"step": adam.step, "m": encode_array(adam.m), "v": encode_array(adam.v)}
    return doc


def save_checkpoint(path, model: SvaeModel, adam: AdamState | None = None, rng_state: dict | None = None,
                    extra: dict | None = None) -> None:
    doc = checkpoint_dict(model, adam, rng_state, extra)
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path) -> Checkpoint:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    config = SvaeConfig.from_dict(doc["config"])
    reg = config.registry()
    stored = {e["name"]: tuple(e["shape"]) for e in doc["registry"]}
    if stored != reg.shapes:
        raise ValueError("checkpoint registry does not match its config")
    params = {k: decode_array(doc["params"][k], reg.shapes[k]) for k in reg}
    adam = None
    if doc.get("optimizer"):
        o = doc["optimizer"]
        adam = AdamState(decode_array(o["m"], (reg.size,)), decode_array(o["v"], (reg.size,)), int(o["step"]))
    return Checkpoint(SvaeModel(config, params), adam, doc.get("rng_state"), doc.get("extra", {}))
