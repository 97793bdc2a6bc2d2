"""Versioned binary checkpoint container for embedding and similarity models.

Layout (all integers little-endian)::

    magic      8 bytes   b"TBRCKPT\\0"
    version    u16       1
    hdr_len    u32
    header     hdr_len bytes of UTF-8 JSON (sorted keys)
    n_blobs    u32
    n_blobs x:
        name_len u16, name (UTF-8)
        ndim     u8,  ndim x u32 dims
        payload  prod(dims) float64 LE, row-major
    crc32      u32 over every preceding byte

Files are written to a temporary sibling and renamed into place, so a
reader never sees a partial checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np

from .autodiff import BatchNormStats
from .branches import BranchParams, EmbeddingModel, SimilarityModel

MAGIC = b"TBRCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    category = "checkpoint"


def model_blobs(model) -> dict[str, np.ndarray]:
    blobs = dict(model.parameters())
    blobs.update(model.state())
    return dict(sorted(blobs.items()))


def model_header(model) -> dict:
    dims = {
        "image_in": model.image.in_dim,
        "text_in": model.text.in_dim,
        "image_hidden": model.image.fc1_w.shape[1],
        "text_hidden": model.text.fc1_w.shape[1],
        "embed": model.image.embed_dim,
    }
    if isinstance(model, SimilarityModel):
        dims["head_hidden"] = [model.head[0][0].shape[1], model.head[1][0].shape[1]]
    return {
        "kind": model.kind,
        "nonlinear": model.nonlinear,
        "bn_eps": model.bn_eps,
        "bn_momentum": model.bn_momentum,
        "dims": dims,
    }


def encode(model, header: dict | None = None) -> bytes:
    head = model_header(model)
    head["extra"] = header or {}
    head_bytes = json.dumps(head, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(head_bytes)), head_bytes]
    blobs = model_blobs(model)
    parts.append(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to a temporary file next to ``path`` and rename it into place."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def save_checkpoint(model, path: str | os.PathLike, header: dict | None = None) -> None:
    atomic_write(path, encode(model, header))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes):
    """Inverse of :func:`encode`; returns ``(model, header)``."""
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(len(MAGIC))
    version, hdr_len = r.unpack("<HI")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(r.take(hdr_len).decode())
    (count,) = r.unpack("<I")
    blobs = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        blobs[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after the last blob")
    return _rebuild(header, blobs), header


def _branch(blobs: dict, prefix: str, nonlinear: bool) -> BranchParams:
    def get(name):
        key = f"{prefix}.{name}"
        if key not in blobs:
            raise CheckpointError(f"checkpoint is missing blob {key!r}")
        return blobs[key]

    if not nonlinear:
        return BranchParams(get("fc1_w"), get("fc1_b"))
    embed = get("fc2_w").shape[1]
    return BranchParams(get("fc1_w"), get("fc1_b"), get("fc2_w"), get("fc2_b"),
                        get("bn_gamma"), get("bn_beta"),
                        BatchNormStats(embed, get("bn_mean"), get("bn_var")))


def _rebuild(header: dict, blobs: dict):
    nonlinear = bool(header["nonlinear"])
    image, text = _branch(blobs, "image", nonlinear), _branch(blobs, "text", nonlinear)
    common = dict(bn_eps=header["bn_eps"], bn_momentum=header["bn_momentum"])
    try:
        if header["kind"] == "embedding":
            return EmbeddingModel(image, text, **common)
        if header["kind"] == "similarity":
            head = [(blobs[f"head.{i}.w"], blobs[f"head.{i}.b"]) for i in range(3)]
            return SimilarityModel(image, text, head=head, **common)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing blob {exc.args[0]!r}") from None
    except ValueError as exc:
        raise CheckpointError(f"inconsistent checkpoint: {exc}") from None
    raise CheckpointError(f"unknown network kind {header['kind']!r}")


def load_checkpoint(path: str | os.PathLike):
    """Read a checkpoint; returns ``(model, header)``."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return decode(data)
