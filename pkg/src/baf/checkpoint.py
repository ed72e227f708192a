"""Checkpoint wire format: read and write safetensors-layout files.

Layout: an unsigned 64-bit little-endian header length N, then N bytes of a
JSON header mapping tensor names to {dtype, shape, data_offsets}, then the
contiguous data region.  Offsets are relative to the start of the data
region.  An optional "__metadata__" entry in the header carries string
key/value pairs and is not a tensor.

Payload bytes are preserved exactly on read; writes canonicalize the header
(lexicographic key order, no whitespace, 8-byte space padding) so identical
tensor maps always produce identical files.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CorruptFile, ParseError, UnsupportedDtype

DTYPE_WIDTH = {"f64": 8, "f32": 4, "f16": 2, "bf16": 2}
_TO_WIRE = {"f64": "F64", "f32": "F32", "f16": "F16", "bf16": "BF16"}
_FROM_WIRE = {wire: name for name, wire in _TO_WIRE.items()}


def element_count(shape: tuple[int, ...]) -> int:
    return math.prod(shape) if shape else 1


@dataclass(frozen=True)
class TensorRecord:
    """One named tensor: dtype, shape, and its raw little-endian payload."""

    name: str
    dtype: str
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self) -> None:
        if self.dtype not in DTYPE_WIDTH:
            raise UnsupportedDtype(f"{self.name}: unsupported dtype {self.dtype!r}")
        expected = element_count(self.shape) * DTYPE_WIDTH[self.dtype]
        if len(self.data) != expected:
            raise CorruptFile(
                f"{self.name}: payload is {len(self.data)} bytes, "
                f"expected {expected} for shape {self.shape} dtype {self.dtype}"
            )

    @property
    def nbytes(self) -> int:
        return len(self.data)


def read_checkpoint(path) -> dict[str, TensorRecord]:
    """Parse a checkpoint file into named tensor records.

    Raises ParseError for a malformed header, CorruptFile for offsets that
    overlap or fall outside the data region, and UnsupportedDtype for dtypes
    beyond {f64, f32, f16, bf16}.
    """
    header, data = _split_file(Path(path))
    records: dict[str, TensorRecord] = {}
    spans: list[tuple[int, int, str]] = []
    for name, desc in header.items():
        if name == "__metadata__":
            continue
        dtype, shape, (start, end) = _parse_tensor_desc(name, desc)
        if not (0 <= start <= end <= len(data)):
            raise CorruptFile(f"{name}: offsets [{start}, {end}) outside data region")
        if end - start != element_count(shape) * DTYPE_WIDTH[dtype]:
            raise CorruptFile(f"{name}: offsets span {end - start} bytes, shape disagrees")
        spans.append((start, end, name))
        records[name] = TensorRecord(name=name, dtype=dtype, shape=shape, data=data[start:end])

    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CorruptFile(f"tensors {n0!r} and {n1!r} have overlapping offsets")
    return records


def read_metadata(path) -> dict[str, str] | None:
    """Return the header's __metadata__ entry, if any."""
    header, _ = _split_file(Path(path))
    meta = header.get("__metadata__")
    if meta is None:
        return None
    if not isinstance(meta, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in meta.items()
    ):
        raise ParseError("__metadata__ must map strings to strings")
    return dict(meta)


def write_checkpoint(
    tensors: Mapping[str, TensorRecord],
    path,
    metadata: Mapping[str, str] | None = None,
) -> None:
    """Serialize tensor records to a checkpoint file.

    Tensors are laid out in lexicographic name order and the header is
    canonical JSON, so the same map always yields the same bytes.
    """
    header: dict[str, object] = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in sorted(metadata.items())}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        rec = tensors[name]
        header[name] = {
            "dtype": _TO_WIRE[rec.dtype],
            "shape": list(rec.shape),
            "data_offsets": [offset, offset + rec.nbytes],
        }
        chunks.append(rec.data)
        offset += rec.nbytes

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    pad = (8 - (len(header_bytes) + 8) % 8) % 8
    header_bytes += b" " * pad

    out = Path(path)
    try:
        with open(out, "wb") as fh:
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            for chunk in chunks:
                fh.write(chunk)
    except OSError as exc:
        raise CorruptFile(f"cannot write checkpoint {out}: {exc}") from exc


# --- array codecs -----------------------------------------------------------

def record_to_array(rec: TensorRecord) -> np.ndarray:
    """Decode a record's payload to a float64 array of its stored shape."""
    if rec.dtype == "f64":
        arr = np.frombuffer(rec.data, dtype="<f8").astype(np.float64)
    elif rec.dtype == "f32":
        arr = np.frombuffer(rec.data, dtype="<f4").astype(np.float64)
    elif rec.dtype == "f16":
        arr = np.frombuffer(rec.data, dtype="<f2").astype(np.float64)
    else:  # bf16
        bits = np.frombuffer(rec.data, dtype="<u2").astype(np.uint32) << 16
        arr = bits.view(np.float32).astype(np.float64)
    return arr.reshape(rec.shape)


def array_to_record(name: str, values: np.ndarray, dtype: str) -> TensorRecord:
    """Encode an array into a record, rounding to the target dtype."""
    arr = np.asarray(values, dtype=np.float64)
    if dtype == "f64":
        data = arr.astype("<f8").tobytes()
    elif dtype == "f32":
        data = arr.astype("<f4").tobytes()
    elif dtype == "f16":
        data = arr.astype("<f2").tobytes()
    elif dtype == "bf16":
        data = _bf16_bits(arr).tobytes()
    else:
        raise UnsupportedDtype(f"unsupported dtype {dtype!r}")
    return TensorRecord(name=name, dtype=dtype, shape=tuple(arr.shape), data=data)


def quantize_roundtrip(values: np.ndarray, dtype: str) -> np.ndarray:
    """Round float64 values through a storage dtype and back."""
    if dtype == "f64":
        return np.asarray(values, dtype=np.float64)
    rec = array_to_record("_", np.atleast_1d(np.asarray(values, dtype=np.float64)), dtype)
    out = record_to_array(rec)
    return out.reshape(np.shape(values))


def _bf16_bits(arr: np.ndarray) -> np.ndarray:
    # Round-to-nearest-even truncation of f32 to its high 16 bits.
    bits32 = arr.astype(np.float32).view(np.uint32)
    rounding = np.uint32(0x7FFF) + ((bits32 >> 16) & np.uint32(1))
    return ((bits32 + rounding) >> 16).astype("<u2")


# --- internals ---------------------------------------------------------------

def _split_file(path: Path) -> tuple[dict, bytes]:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CorruptFile(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 8:
        raise CorruptFile(f"{path}: file too short for a header length")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise CorruptFile(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: malformed header JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ParseError(f"{path}: header must be a JSON object")
    return header, raw[8 + header_len :]


def _parse_tensor_desc(name: str, desc) -> tuple[str, tuple[int, ...], tuple[int, int]]:
    if not isinstance(desc, dict):
        raise ParseError(f"{name}: tensor entry must be an object")
    try:
        wire_dtype = desc["dtype"]
        shape = desc["shape"]
        offsets = desc["data_offsets"]
    except KeyError as exc:
        raise ParseError(f"{name}: missing header field {exc}") from exc
    if not isinstance(wire_dtype, str):
        raise ParseError(f"{name}: dtype must be a string")
    if wire_dtype not in _FROM_WIRE:
        raise UnsupportedDtype(f"{name}: unsupported dtype {wire_dtype!r}")
    if not isinstance(shape, list) or not all(isinstance(d, int) and d > 0 for d in shape):
        raise ParseError(f"{name}: shape must be a list of positive integers")
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(isinstance(o, int) for o in offsets)
    ):
        raise ParseError(f"{name}: data_offsets must be a pair of integers")
    return _FROM_WIRE[wire_dtype], tuple(shape), (offsets[0], offsets[1])
