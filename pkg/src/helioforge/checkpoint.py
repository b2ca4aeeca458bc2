"""Checkpoint files: one line of JSON manifest, a newline, then raw values.

The payload holds every tensor of a :class:`ModelParams`, little-endian, in
manifest order; each manifest entry carries its element offset and count.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .models import ModelParams, SunsetConfig, parameter_specs

FORMAT = "helioforge-checkpoint"
VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, path) -> None:
    arrays = params.arrays()
    kinds = {a.dtype for a in arrays.values()}
    if len(kinds) != 1:
        raise CheckpointError(f"mixed tensor dtypes {sorted(map(str, kinds))}")
    dtype = kinds.pop()
    precision = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}.get(dtype)
    if precision is None:
        raise CheckpointError(f"unsupported dtype {dtype}")

    entries, offset = [], 0
    for name, arr in arrays.items():
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "group": params.groups[name],
            "buffer": name in params.buffers,
            "offset": offset,
            "count": int(arr.size),
        })
        offset += int(arr.size)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "precision": precision,
        "byte_order": "little",
        "seed": params.seed,
        "config": params.config.to_dict(),
        "tensors": entries,
        "payload_bytes": offset * dtype.itemsize,
    }
    le = np.dtype(_DTYPES[precision])
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype=le).tobytes())


def read_manifest(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    cut = raw.find(b"\n")
    if cut < 0:
        raise CheckpointError(f"{path}: no manifest line")
    try:
        manifest = json.loads(raw[:cut].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: not a {FORMAT} v{VERSION} file")
    return manifest, raw[cut + 1:]


def load_checkpoint(path, expected_config: SunsetConfig | None = None) -> ModelParams:
    """Read a checkpoint; shapes are validated against the manifest's config and,
    if given, ``expected_config``. Errors name the first offending tensor."""
    manifest, payload = read_manifest(path)
    precision = manifest["precision"]
    if precision not in _DTYPES:
        raise CheckpointError(f"{path}: unknown precision {precision!r}")
    le = np.dtype(_DTYPES[precision])
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"{path}: payload has {len(payload)} bytes, manifest declares {manifest['payload_bytes']} (truncated?)"
        )
    config = SunsetConfig.from_dict(manifest["config"])
    if expected_config is not None and expected_config != config:
        diff = [k for k, v in expected_config.to_dict().items() if config.to_dict()[k] != v]
        raise CheckpointError(f"{path}: config mismatch in {', '.join(diff)}")
    specs = {s.name: s for s in parameter_specs(config)}

    entries = manifest["tensors"]
    names = [e["name"] for e in entries]
    for name in names:
        if name not in specs:
            raise CheckpointError(f"{path}: unexpected tensor {name}")
    for name in specs:
        if name not in names:
            raise CheckpointError(f"{path}: missing tensor {name}")

    tensors, groups, buffers = {}, {}, set()
    values = np.frombuffer(payload, dtype=le)
    for e in entries:
        name, shape = e["name"], tuple(e["shape"])
        spec = specs[name]
        if shape != spec.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {shape}, config implies {spec.shape}")
        if e["count"] != int(np.prod(shape)) or e["offset"] + e["count"] > values.size:
            raise CheckpointError(f"{path}: tensor {name} has inconsistent offset/count")
        arr = values[e["offset"]:e["offset"] + e["count"]].reshape(shape).astype(le.newbyteorder("="))
        tensors[name] = Tensor(arr, dtype=arr.dtype)
        groups[name] = e["group"]
        if e["buffer"]:
            buffers.add(name)
    tensors = dict(sorted(tensors.items()))
    return ModelParams(config, tensors, groups, frozenset(buffers), manifest.get("seed"))
