"""Single-file tensor archive.

One container format backs every artifact on disk: generator checkpoints,
latent codes, segmenter weights, representation spills and distillation
targets. Layout:

    magic "GSAR" | version u32 | header_len u64 | header JSON | payload | crc32 u32

The header carries a `kind` string, a free-form `meta` dict (e.g. the layer
manifest of a checkpoint) and per-tensor records (name, dtype, shape, offset).
Tensors are stored C-contiguous little-endian; the trailing CRC-32 covers the
raw payload bytes.
"""

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ArchiveError

MAGIC = b"GSAR"
FORMAT_VERSION = 1

_HEADER_FMT = "<4sIQ"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)


def save_archive(path, kind: str, tensors: dict, meta: dict | None = None):
    """Write named arrays to `path`.

    Tensor insertion order is preserved. Arrays are converted to
    little-endian C-contiguous form before writing.
    """
    records = []
    chunks = []
    offset = 0
    for name, array in tensors.items():
        arr = np.ascontiguousarray(array)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        records.append({
            "name": name,
            "dtype": arr.dtype.str.lstrip("<=|"),
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)

    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "tensors": records,
    }).encode("utf-8")
    payload = b"".join(chunks)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack(_HEADER_FMT, MAGIC, FORMAT_VERSION, len(header)))
        f.write(header)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    tmp.replace(path)
    return path


def load_archive(path, expect_kind: str | None = None):
    """Read an archive back as (kind, meta, {name: array}).

    Raises ArchiveError on a bad magic, unsupported version, truncation,
    checksum mismatch, or kind mismatch. No partial result is returned.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise ArchiveError(f"cannot read archive {path}: {e}") from e

    if len(blob) < _HEADER_SIZE:
        raise ArchiveError(f"truncated archive {path}: {len(blob)} bytes")
    magic, version, header_len = struct.unpack_from(_HEADER_FMT, blob, 0)
    if magic != MAGIC:
        raise ArchiveError(f"{path} is not a tensor archive (bad magic)")
    if version != FORMAT_VERSION:
        raise ArchiveError(
            f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})")

    header_end = _HEADER_SIZE + header_len
    if len(blob) < header_end + 4:
        raise ArchiveError(f"truncated archive {path}")
    try:
        header = json.loads(blob[_HEADER_SIZE:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArchiveError(f"{path}: corrupt header: {e}") from e

    payload = blob[header_end:-4]
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise ArchiveError(f"{path}: payload checksum mismatch")

    kind = header.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise ArchiveError(f"{path}: archive kind {kind!r}, expected {expect_kind!r}")

    tensors = {}
    for rec in header["tensors"]:
        start, nbytes = rec["offset"], rec["nbytes"]
        if start + nbytes > len(payload):
            raise ArchiveError(f"{path}: tensor {rec['name']!r} extends past payload")
        arr = np.frombuffer(
            payload, dtype=np.dtype(rec["dtype"]).newbyteorder("<"),
            count=nbytes // np.dtype(rec["dtype"]).itemsize, offset=start,
        ).reshape(rec["shape"])
        tensors[rec["name"]] = arr.copy()
    return kind, header.get("meta", {}), tensors
