"""On-disk dataset layout.

Each split ``<name>`` has a JSON header ``<name>.json`` and one raw
little-endian float64 file per array (``<name>.<array>.f64``), stored
sequence-major, row-major.  A top-level ``dataset.json`` records the dataset
kind, its generating config, and (for LDS data) the true parameters.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .datasets import Dataset, Split

LAYOUT = "seq-major row-major"


def _write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _write_json(path: Path, doc) -> None:
    _write_bytes(path, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode())


def write_split(out: Path, name: str, split: Split) -> None:
    arrays = {"y": split.y, **split.latents}
    n_seq, T, N = split.y.shape
    header = {
        "dims": {"obs": N},
        "T": T,
        "n_seq": n_seq,
        "dtype": "f64",
        "layout": LAYOUT,
        "arrays": {},
    }
    for key, arr in arrays.items():
        fname = f"{name}.{key}.f64"
        arr = np.ascontiguousarray(arr, dtype="<f8")
        _write_bytes(out / fname, arr.tobytes())
        header["arrays"][key] = {"file": fname, "shape": list(arr.shape)}
    _write_json(out / f"{name}.json", header)


def read_split(root: Path, name: str) -> Split:
    header = json.loads((root / f"{name}.json").read_text())
    if header["dtype"] != "f64" or header["layout"] != LAYOUT:
        raise ValueError(f"unsupported split encoding in {name}.json")
    arrays = {}
    for key, spec in header["arrays"].items():
        raw = np.fromfile(root / spec["file"], dtype="<f8")
        arrays[key] = raw.reshape(spec["shape"]).astype(np.float64)
    y = arrays.pop("y")
    return Split(y, arrays)


def write_dataset(ds: Dataset, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name, split in ds.splits.items():
        write_split(out, name, split)
    doc = {
        "kind": ds.kind,
        "config": ds.config,
        "splits": sorted(ds.splits),
        "truth": None if ds.truth is None else {k: np.asarray(v).tolist() for k, v in ds.truth.items()},
    }
    _write_json(out / "dataset.json", doc)
    return out


def read_dataset(root) -> Dataset:
    root = Path(root)
    doc = json.loads((root / "dataset.json").read_text())
    splits = {name: read_split(root, name) for name in doc["splits"]}
    truth = None if doc["truth"] is None else {k: np.asarray(v, dtype=np.float64) for k, v in doc["truth"].items()}
    return Dataset(doc["kind"], doc["config"], splits, truth)
