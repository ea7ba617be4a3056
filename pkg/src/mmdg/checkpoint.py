"""Checkpoint files: a JSON header followed by blob-framed float32 tensors.

Layout::

    b"MMCK" | u32 header length | header JSON (utf-8) | blob frame per tensor

Each frame uses the dataset blob header ("MMDG", version, rows, dim); scalars
are stored as 1x1 and vectors as 1xn, with true shapes listed in the header.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .datamodel import DatasetError, blob_size, parse_blob
from .model import EncoderParams, ModelConfig, ModelParams
from .numerics import AdamState, BatchNormStats, Tensor

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1
_PREFIX = struct.Struct("<4sI")


class CheckpointError(DatasetError):
    pass


def _frame(arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f4")
    rows, dim = (1, a.size) if a.ndim < 2 else a.shape
    return struct.pack("<4sIII", b"MMDG", 1, rows, dim) + a.tobytes()


def save_checkpoint(path, params: ModelParams, header: dict, adam: AdamState | None = None) -> None:
    tensors: list[tuple[str, np.ndarray]] = [(k, t.data) for k, t in params.named_tensors().items()]
    tensors += [(f"buffer:{k}", b) for k, b in params.named_buffers().items()]
    if adam is not None:
        tensors += [(f"adam_m:{k}", m) for k, m in adam.m.items()]
        tensors += [(f"adam_v:{k}", v) for k, v in adam.v.items()]
    head = dict(header)
    head.update(
        format="mmdg-checkpoint",
        version=CKPT_VERSION,
        model_config=params.config.to_json(),
        tensors=[{"name": k, "shape": list(a.shape)} for k, a in tensors],
    )
    if adam is not None:
        head["adam"] = {"step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}
    hbytes = json.dumps(head, sort_keys=True).encode()
    payload = b"".join([_PREFIX.pack(CKPT_MAGIC, len(hbytes)), hbytes, *(_frame(a) for _, a in tensors)])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ModelParams, dict, AdamState | None]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated")
    magic, hlen = _PREFIX.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    try:
        head = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: bad header: {e}") from e
    if head.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {head.get('version')}")
    off = _PREFIX.size + hlen
    arrays: dict[str, np.ndarray] = {}
    for spec in head["tensors"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        rows, dim = (1, n) if len(shape) < 2 else shape
        a = parse_blob(raw, f"{path}:{spec['name']}", offset=off)
        off += blob_size(rows, dim)
        arrays[spec["name"]] = a.reshape(shape).copy()

    config = ModelConfig(**head["model_config"])
    names = list(config.encoder_inputs()) + ["text"]
    encoders = {}
    for name in names:
        kw = {k: Tensor(arrays[f"{name}.{k}"], requires_grad=True) for k in EncoderParams.TRAINABLE}
        encoders[name] = EncoderParams(
            **kw,
            bn1=BatchNormStats(arrays[f"buffer:{name}.bn1_mean"], arrays[f"buffer:{name}.bn1_var"]),
            bn2=BatchNormStats(arrays[f"buffer:{name}.bn2_mean"], arrays[f"buffer:{name}.bn2_var"]),
        )
    params = ModelParams(
        config,
        encoders,
        Tensor(arrays["classifier.w"], requires_grad=True),
        Tensor(arrays["classifier.b"], requires_grad=True),
        Tensor(arrays["log_tau"], requires_grad=True),
        config.bn_before_relu,
    )
    adam = None
    if "adam" in head:
        a = head["adam"]
        adam = AdamState(step=a["step"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
        for k in params.named_tensors():
            adam.m[k] = arrays[f"adam_m:{k}"]
            adam.v[k] = arrays[f"adam_v:{k}"]
    return params, head, adam
