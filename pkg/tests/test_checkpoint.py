# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).

import struct
from pathlib import Path

import pytest
import torch

from mvrestore import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from mvrestore.checkpoint import FORMAT_VERSION, MAGIC


def sample_checkpoint() -> Checkpoint:
    return Checkpoint(
        metadata={"step": 12, "task": {"kind": "sr"}, "losses": [0.5, 0.25]},
        tensors={
            "model/w": torch.arange(6, dtype=torch.float32).reshape(2, 3) / 7.0,
            "model/b": torch.tensor([1e-300, -2.5], dtype=torch.float64),
            "counts": torch.tensor([[3, -4]], dtype=torch.int64),
        },
    )


def test_round_trip(tmp_path: Path) -> None:
    original = sample_checkpoint()
    save_checkpoint(original, tmp_path / "a.ckpt")
    loaded = load_checkpoint(tmp_path / "a.ckpt")

    assert loaded.metadata == original.metadata
    assert list(loaded.tensors) == list(original.tensors)
    for name, tensor in original.tensors.items():
        assert loaded.tensors[name].dtype == tensor.dtype
        assert torch.equal(loaded.tensors[name], tensor)


def test_equal_inputs_give_identical_bytes(tmp_path: Path) -> None:
    save_checkpoint(sample_checkpoint(), tmp_path / "a.ckpt")
    save_checkpoint(sample_checkpoint(), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_header_layout(tmp_path: Path) -> None:
    save_checkpoint(sample_checkpoint(), tmp_path / "a.ckpt")
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    assert struct.unpack("<I", raw[8:12]) == (FORMAT_VERSION,)


def test_rejects_foreign_files(tmp_path: Path) -> None:
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"PK\x03\x04 not a checkpoint")
    with pytest.raises(CheckpointError, match="not an mvrestore checkpoint"):
        load_checkpoint(path)


def test_rejects_other_versions(tmp_path: Path) -> None:
    path = tmp_path / "a.ckpt"
    save_checkpoint(sample_checkpoint(), path)
    raw = bytearray(path.read_bytes())
    raw[8:12] = struct.pack("<I", FORMAT_VERSION + 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="format version 2"):
        load_checkpoint(path)


def test_truncated_files(tmp_path: Path) -> None:
    path = tmp_path / "a.ckpt"
    save_checkpoint(sample_checkpoint(), path)
    raw = path.read_bytes()

    path.write_bytes(raw[:10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(raw[:-4])
    with pytest.raises(CheckpointError, match="truncated inside tensor 'counts'"):
        load_checkpoint(path)


def test_corrupt_metadata(tmp_path: Path) -> None:
    path = tmp_path / "a.ckpt"
    path.write_bytes(MAGIC + struct.pack("<IQ", FORMAT_VERSION, 5) + b"{oops")
    with pytest.raises(CheckpointError, match="corrupt metadata"):
        load_checkpoint(path)


def test_unsupported_dtype(tmp_path: Path) -> None:
    half = Checkpoint(tensors={"w": torch.zeros(2, dtype=torch.float16)})
    with pytest.raises(CheckpointError, match="Unsupported tensor dtype"):
        save_checkpoint(half, tmp_path / "a.ckpt")


def test_missing_file(tmp_path: Path) -> None:
    with pytest.raises(CheckpointError, match="Could not read"):
        load_checkpoint(tmp_path / "missing.ckpt")
