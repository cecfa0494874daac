"""Binary checkpoint container.

Layout: magic "ABF1", format version (u16 LE), u32 LE byte length of a
UTF-8 JSON header, the header, then raw little-endian float64 blobs in
header order, and finally CRC32 (u32 LE) of every preceding byte.
The JSON header carries a section tag ("MODEL", "ADVSET", ...), free-form
metadata, and the name/shape list describing the blobs.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .models import ModelSpec, TrainedModel

MAGIC = b"ABF1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Base for unreadable checkpoint files."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def write_container(path, section: str, meta: dict, blobs: dict) -> None:
    """Write named float64 arrays plus metadata. Blob order is preserved."""
    entries = []
    payload = bytearray()
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        entries.append({"name": name, "shape": list(arr.shape)})
        payload += arr.astype("<f8", copy=False).tobytes()
    header = json.dumps({"section": section, "meta": meta, "blobs": entries},
                        sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<HI", FORMAT_VERSION, len(header)) + header + payload
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_container(path, expect_section: str | None = None):
    """Returns (section, meta, {name: array}). Raises CheckpointError family."""
    raw = Path(path).read_bytes()
    if len(raw) < 10:
        raise CheckpointChecksumError(f"{path}: truncated (only {len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {raw[:4]!r}")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version > FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version} is newer than supported {FORMAT_VERSION}")
    if len(raw) < 10 + hlen + 4:
        raise CheckpointChecksumError(f"{path}: truncated header")
    try:
        header = json.loads(raw[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointChecksumError(f"{path}: corrupt header ({e})") from None

    sizes = [int(np.prod(b["shape"])) * 8 for b in header["blobs"]]
    expected = 10 + hlen + sum(sizes) + 4
    if len(raw) != expected:
        raise CheckpointChecksumError(
            f"{path}: size {len(raw)} != expected {expected} (truncated or padded)")
    (crc_stored,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc_stored:
        raise CheckpointChecksumError(f"{path}: CRC mismatch")

    blobs = {}
    offset = 10 + hlen
    for entry, size in zip(header["blobs"], sizes):
        flat = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=offset)
        blobs[entry["name"]] = flat.reshape(entry["shape"]).astype(np.float64)
        offset += size
    section = header["section"]
    if expect_section is not None and section != expect_section:
        raise CheckpointError(f"{path}: section {section!r}, expected {expect_section!r}")
    return section, header["meta"], blobs


def save_model(model: TrainedModel, path) -> None:
    order = sorted(model.graph.param_shapes())
    meta = {
        "spec": model.spec.to_json(),
        "provenance": model.provenance,
        "params": [[k, bool(model.store.is_trainable(k))] for k in order],
    }
    write_container(path, "MODEL", meta, {k: model.store[k] for k in order})


def load_model(path) -> TrainedModel:
    _, meta, blobs = read_container(path, expect_section="MODEL")
    spec = ModelSpec.from_json(meta["spec"])
    graph = spec.build_graph()
    shapes = graph.param_shapes()
    store = ad.ParameterStore()
    for key, trainable in meta["params"]:
        if key not in shapes:
            raise CheckpointError(f"{path}: parameter {key!r} not in architecture")
        arr = blobs[key]
        if arr.shape != tuple(shapes[key]):
            raise CheckpointError(
                f"{path}: parameter {key!r} shape {arr.shape} != {shapes[key]}")
        store.add(key, arr, trainable)
    return TrainedModel(spec, graph, store, meta["provenance"])
