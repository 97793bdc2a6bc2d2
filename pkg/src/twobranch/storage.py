"""Feature files and the JSON dataset manifest.

A feature file holds one float64 matrix::

    magic    8 bytes  b"TBRFEAT\\0"
    version  u16      1
    dtype    u8       1 = float64 little-endian
    ndim     u8       2
    dims     ndim x u64
    payload  row-major data
    crc32    u32 over every preceding byte

The manifest lists records in order; the i-th row of each feature file
belongs to the i-th record of its kind (see ``docs/formats.md``).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib

import numpy as np

from .checkpoint import atomic_write
from .dataset import (
    ChecksumError,
    DatasetError,
    DimensionError,
    GroundedDataset,
    GroundTruthRegion,
    ImageRecord,
    MissingFileError,
    PhraseRecord,
    Proposal,
    SentenceRecord,
)
from .geometry import Box

FEATURE_MAGIC = b"TBRFEAT\0"
FEATURE_VERSION = 1
DTYPE_F64 = 1
SCHEMA_VERSION = 1
FEATURE_KINDS = ("images", "regions", "phrases", "sentences")


def encode_features(matrix: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(matrix, dtype="<f8")
    if arr.ndim != 2:
        raise DimensionError(f"feature matrices are 2-D, got shape {arr.shape}")
    body = (FEATURE_MAGIC + struct.pack("<HBB", FEATURE_VERSION, DTYPE_F64, arr.ndim)
            + struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.tobytes())
    return body + struct.pack("<I", zlib.crc32(body))


def decode_features(data: bytes, path: str = "<bytes>") -> np.ndarray:
    head = len(FEATURE_MAGIC) + 4
    if len(data) < head + 4 or data[:len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise ChecksumError(f"{path}: not a feature file (bad magic)")
    if zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise ChecksumError(f"{path}: feature file checksum mismatch")
    version, dtype, ndim = struct.unpack("<HBB", data[len(FEATURE_MAGIC):head])
    if version != FEATURE_VERSION or dtype != DTYPE_F64:
        raise DatasetError(f"{path}: unsupported feature file version {version} / dtype {dtype}")
    shape = struct.unpack(f"<{ndim}Q", data[head:head + 8 * ndim])
    payload = data[head + 8 * ndim:-4]
    if len(payload) != 8 * int(np.prod(shape)):
        raise ChecksumError(f"{path}: payload length does not match shape {shape}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def write_features(path: str | os.PathLike, matrix: np.ndarray) -> str:
    """Write a feature file atomically; returns its sha256."""
    data = encode_features(matrix)
    atomic_write(path, data)
    return hashlib.sha256(data).hexdigest()


def read_features(path: str | os.PathLike, sha256: str | None = None) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise MissingFileError(f"missing feature file: {path}") from None
    if sha256 is not None and hashlib.sha256(data).hexdigest() != sha256:
        raise ChecksumError(f"{path}: sha256 does not match the manifest")
    return decode_features(data, os.fspath(path))


# -- manifest ---------------------------------------------------------------


def _feature_matrices(ds: GroundedDataset) -> dict[str, np.ndarray]:
    def stack(rows):
        rows = list(rows)
        return np.array(rows, dtype=np.float64) if rows else np.zeros((0, 0))

    out = {"regions": stack([p.feature for im in ds.images for p in im.proposals]
                            + [r.feature for im in ds.images for r in im.regions])}
    if any(im.global_feature is not None for im in ds.images):
        out["images"] = stack([im.global_feature for im in ds.images])
    if ds.phrases:
        out["phrases"] = stack([p.feature for p in ds.phrases])
    if ds.sentences:
        out["sentences"] = stack([s.feature for s in ds.sentences])
    return {k: v for k, v in out.items() if v.size}


def save_dataset(ds: GroundedDataset, directory: str | os.PathLike, name: str = "manifest.json") -> str:
    """Write feature files and a manifest into ``directory``; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    features = {}
    for kind, matrix in _feature_matrices(ds).items():
        fname = f"{kind}.feat"
        digest = write_features(os.path.join(directory, fname), matrix)
        features[kind] = {"path": fname, "rows": int(matrix.shape[0]),
                          "dim": int(matrix.shape[1]), "sha256": digest}
    dims = {}
    if "regions" in features:
        dims["region"] = features["regions"]["dim"]
    if "images" in features:
        dims["image"] = features["images"]["dim"]
    for kind in ("phrases", "sentences"):
        if kind in features:
            dims["text"] = features[kind]["dim"]
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "task": ds.task,
        "dims": dims,
        "features": features,
        "images": [
            {
                "id": im.image_id,
                "split": im.split,
                "has_global": im.global_feature is not None,
                "sentences": list(im.sentences),
                "proposals": [list(p.box.as_tuple()) for p in im.proposals],
                "regions": [{"chain": r.chain_id, "box": list(r.box.as_tuple())} for r in im.regions],
            }
            for im in ds.images
        ],
        "phrases": [{"id": p.phrase_id, "image": p.image_id, "chain": p.chain_id,
                     "sentence": p.sentence_id} for p in ds.phrases],
        "sentences": [{"id": s.sentence_id, "image": s.image_id} for s in ds.sentences],
    }
    path = os.path.join(directory, name)
    atomic_write(path, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return path


def _read_manifest(path) -> dict:
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise MissingFileError(f"missing manifest: {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: manifest is not valid JSON ({exc})") from None
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"{path}: unsupported schema_version {manifest.get('schema_version')!r}")
    unknown = set(manifest) - {"schema_version", "task", "dims", "features", "images", "phrases", "sentences"}
    if unknown:
        raise DatasetError(f"{path}: unknown manifest keys {sorted(unknown)}")
    return manifest


def _rows(features: dict, kind: str, expected: int, base: str, declared: int | None) -> np.ndarray | None:
    ref = features.get(kind)
    if ref is None:
        if expected:
            raise MissingFileError(f"manifest needs a {kind!r} feature file for {expected} rows")
        return None
    matrix = read_features(os.path.join(base, ref["path"]), ref.get("sha256"))
    if matrix.shape[0] != expected:
        raise DimensionError(f"{ref['path']}: {matrix.shape[0]} rows for {expected} {kind} records")
    for dim in (ref.get("dim"), declared):
        if dim is not None and matrix.shape[1] != dim:
            raise DimensionError(f"{ref['path']}: feature dim {matrix.shape[1]} does not match declared {dim}")
    return matrix


def load_dataset(path: str | os.PathLike) -> GroundedDataset:
    """Read and validate a manifest plus its feature files.

    Fails with :class:`MissingFileError`, :class:`ChecksumError`,
    :class:`DimensionError` or :class:`DanglingIdError` naming the offending
    path or id; no partially built dataset is ever returned.
    """
    path = os.fspath(path)
    m = _read_manifest(path)
    base = os.path.dirname(os.path.abspath(path))
    features, dims = m.get("features", {}), m.get("dims", {})
    try:
        images = m["images"]
        n_regions = sum(len(im["proposals"]) + len(im["regions"]) for im in images)
        region = _rows(features, "regions", n_regions, base, dims.get("region"))
        n_global = sum(1 for im in images if im.get("has_global"))
        glob = _rows(features, "images", n_global if n_global else 0, base, dims.get("image"))
        if glob is not None and n_global != len(images):
            raise DatasetError("global features must be present for all images or none")
        phrases = _rows(features, "phrases", len(m.get("phrases", [])), base, dims.get("text"))
        sentences = _rows(features, "sentences", len(m.get("sentences", [])), base, dims.get("text"))

        records = []
        prop_row = 0
        gt_row = sum(len(im["proposals"]) for im in images)
        for i, im in enumerate(images):
            props = []
            for box in im["proposals"]:
                props.append(Proposal(Box.of(box), region[prop_row]))
                prop_row += 1
            regions = []
            for r in im["regions"]:
                regions.append(GroundTruthRegion(r["chain"], Box.of(r["box"]), region[gt_row]))
                gt_row += 1
            records.append(ImageRecord(im["id"], glob[i] if glob is not None else None, props, regions,
                                       list(im.get("sentences", [])), im.get("split", "train")))
        phrase_records = [PhraseRecord(p["id"], phrases[k], p["image"], p["chain"], p.get("sentence"))
                          for k, p in enumerate(m.get("phrases", []))]
        sentence_records = [SentenceRecord(s["id"], sentences[k], s["image"])
                            for k, s in enumerate(m.get("sentences", []))]
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"{path}: malformed manifest entry ({exc!r})") from None
    return GroundedDataset(m["task"], records, phrase_records, sentence_records)
