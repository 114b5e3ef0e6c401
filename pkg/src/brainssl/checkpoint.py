"""Deterministic checkpoint container.

A checkpoint is a ZIP file (stored, fixed timestamps, entries sorted by
name) holding raw little-endian tensor payloads under ``tensors/<name>``
and a ``manifest.json`` with the tensor name/shape/dtype table plus the
model config and training metadata. Writing the same content twice
produces byte-identical files, and the manifest makes the parameter tree
loadable without this package.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

FORMAT_NAME = "brainssl-checkpoint-v1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, config: dict, meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    table = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        # astype (not ascontiguousarray) keeps 0-d arrays 0-d
        arr = arr.astype(arr.dtype.newbyteorder("<"), order="C", copy=False)
        arrays[name] = arr
        table.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str})
    manifest = {
        "format": FORMAT_NAME,
        "tensors": table,
        "config": config,
        "meta": meta,
    }
    blob = json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8")
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", date_time=_EPOCH), blob)
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"tensors/{name}", date_time=_EPOCH)
            zf.writestr(info, arrays[name].tobytes(order="C"))


def load_checkpoint(path) -> tuple[dict, dict, dict]:
    """Returns (tensors, config, meta)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path, "r") as zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing manifest.json") from exc
        if manifest.get("format") != FORMAT_NAME:
            raise CheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
        tensors = {}
        for entry in manifest["tensors"]:
            raw = zf.read(f"tensors/{entry['name']}")
            arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
            tensors[entry["name"]] = arr.copy()
    return tensors, manifest["config"], manifest["meta"]


def checkpoint_manifest(path) -> list[dict]:
    """The tensor name/shape/dtype table without loading payloads."""
    with zipfile.ZipFile(Path(path), "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
    return manifest["tensors"]
