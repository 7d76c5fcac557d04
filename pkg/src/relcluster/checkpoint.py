"""Versioned binary checkpoint format.

Layout: magic, 4-byte little-endian header length, UTF-8 JSON header, then the
raw array bytes in header order.  The header carries metadata (versions,
dimensions, config snapshot, RNG seed lineage) plus name/dtype/shape for every
array.  Writing is atomic (temp file + rename) and byte-deterministic for
identical inputs.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import CheckpointError

MAGIC = b"RCCKPT01"
FORMAT_VERSION = 1


def save_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    names = sorted(arrays)
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta,
        "arrays": [
            {"name": name, "dtype": arrays[name].dtype.str, "shape": list(arrays[name].shape)}
            for name in names
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf8")
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for name in names:
                fh.write(np.ascontiguousarray(arrays[name]).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"not a checkpoint file: {path}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(header_len).decode("utf8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header in {path}: {exc}") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {header.get('format_version')!r} in {path}")
        arrays = {}
        for spec in header["arrays"]:
            dtype = np.dtype(spec["dtype"])
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise CheckpointError(f"truncated checkpoint: {path}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return header["meta"], arrays
