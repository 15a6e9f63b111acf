"""On-disk formats.

Tensor archive
    One UTF-8 header line ``FFTENSOR <json>\\n`` with at least ``shape``
    (plus optional ``fps``, ``preset`` and free-form metadata), followed by
    the tensor as little-endian float32, C order.

Checkpoint
    8-byte magic ``FFCKPT01``, little-endian u32 format version, u64 header
    length, a JSON manifest (configs, seed, counters and a list of
    ``{name, shape, offset, nbytes}`` entries), then the float32 payloads.
    ``offset`` is relative to the start of the payload section.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Any, Mapping

import numpy as np

TENSOR_MAGIC = "FFTENSOR"
CKPT_MAGIC = b"FFCKPT01"
CKPT_VERSION = 1


class TensorFileError(IOError):
    pass


class CheckpointError(IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def write_tensor(path: str | Path, array, **meta: Any) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = {"shape": list(arr.shape), **meta}
    with open(path, "wb") as fh:
        fh.write(f"{TENSOR_MAGIC} {json.dumps(header, sort_keys=True)}\n".encode("utf-8"))
        fh.write(arr.tobytes())


def read_tensor(path: str | Path) -> tuple[np.ndarray, dict[str, Any]]:
    with open(path, "rb") as fh:
        line = fh.readline().decode("utf-8")
        if not line.startswith(TENSOR_MAGIC + " "):
            raise TensorFileError(f"{path}: not a tensor archive")
        header = json.loads(line[len(TENSOR_MAGIC) + 1:])
        data = fh.read()
    shape = tuple(header["shape"])
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(data) != expected:
        raise TensorFileError(f"{path}: payload has {len(data)} bytes, header implies {expected}")
    return np.frombuffer(data, dtype="<f4").reshape(shape).copy(), header


def save_checkpoint_file(path: str | Path, tensors: Mapping[str, np.ndarray],
                         meta: Mapping[str, Any]) -> None:
    """Write named float32 tensors plus JSON metadata."""
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    header = dict(meta)
    header.update(format_version=CKPT_VERSION, tensors=entries, payload_bytes=len(payload),
                  payload_crc32=zlib.crc32(payload))
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    tmp.replace(path)


def load_checkpoint_file(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != CKPT_MAGIC:
        if len(raw) < 20 and raw[:len(raw)] == CKPT_MAGIC[:len(raw)]:
            raise CheckpointTruncatedError(f"{path}: file ends inside the preamble")
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, this build reads version {CKPT_VERSION}")
    if len(raw) < 20 + hlen:
        raise CheckpointTruncatedError(f"{path}: file ends inside the manifest")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    payload = raw[20 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointTruncatedError(
            f"{path}: payload is {len(payload)} bytes, manifest declares {header['payload_bytes']}")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointCorruptError(f"{path}: payload checksum mismatch")
    tensors = {}
    for e in header.pop("tensors"):
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).copy()
    return tensors, header


def checkpoint_manifest(path: str | Path) -> dict[str, Any]:
    """Header only (including the tensor list), without reading payloads into arrays."""
    with open(path, "rb") as fh:
        pre = fh.read(20)
        if pre[:8] != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<IQ", pre[8:20])
        if version != CKPT_VERSION:
            raise CheckpointVersionError(f"{path}: format version {version}")
        return json.loads(fh.read(hlen).decode("utf-8"))
