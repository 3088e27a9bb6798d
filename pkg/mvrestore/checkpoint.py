# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

"""Versioned single-file checkpoints.

Layout: 8-byte magic, u32 format version, u64 metadata length, UTF-8 JSON
metadata (sorted keys), then the raw little-endian bytes of every tensor in
metadata order. Equal inputs give byte-identical files.
"""

from __future__ import (  # Required for forward references in older Python versions
    annotations,
)

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
import torch

from .exceptions import CheckpointError

MAGIC = b"MVRCKPT\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<IQ")

_DTYPES: Dict[torch.dtype, str] = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
}


@dataclass
class Checkpoint:
    metadata: Dict[str, Any] = field(default_factory=dict)
    tensors: Dict[str, torch.Tensor] = field(default_factory=dict)


def _numpy_dtype(dtype: torch.dtype) -> str:
    try:
        return _DTYPES[dtype]
    except KeyError:
        raise CheckpointError(f"Unsupported tensor dtype {dtype} in checkpoint")


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> None:
    index: List[Dict[str, Any]] = []
    payload = bytearray()
    for name, tensor in checkpoint.tensors.items():
        code = _numpy_dtype(tensor.dtype)
        data = tensor.detach().cpu().contiguous().numpy().astype(code).tobytes()
        index.append(
            {
                "name": name,
                "dtype": code,
                "shape": list(tensor.shape),
                "offset": len(payload),
                "nbytes": len(data),
            }
        )
        payload.extend(data)

    meta = json.dumps(
        {"metadata": checkpoint.metadata, "tensors": index}, sort_keys=True
    ).encode("utf-8")
    try:
        with open(path, "wb") as handle:
            handle.write(MAGIC)
            handle.write(_HEADER.pack(FORMAT_VERSION, len(meta)))
            handle.write(meta)
            handle.write(bytes(payload))
    except OSError as e:
        raise CheckpointError(f"Could not write checkpoint '{path}': {e}") from e


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Could not read checkpoint '{path}': {e}") from e
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"'{path}' is not an mvrestore checkpoint")
    start = len(MAGIC)
    if len(raw) < start + _HEADER.size:
        raise CheckpointError(f"Checkpoint '{path}' is truncated")
    version, meta_size = _HEADER.unpack(raw[start : start + _HEADER.size])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint '{path}' has format version {version}, expected {FORMAT_VERSION}"
        )
    meta_start = start + _HEADER.size
    try:
        header = json.loads(raw[meta_start : meta_start + meta_size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Checkpoint '{path}' has corrupt metadata: {e}") from e

    payload = raw[meta_start + meta_size :]
    tensors: Dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(
                f"Checkpoint '{path}' is truncated inside tensor '{entry['name']}'"
            )
        values = np.frombuffer(payload[entry["offset"] : end], dtype=entry["dtype"])
        tensors[entry["name"]] = torch.from_numpy(
            values.astype(values.dtype.newbyteorder("="))
        ).reshape(entry["shape"])
    return Checkpoint(metadata=header["metadata"], tensors=tensors)
