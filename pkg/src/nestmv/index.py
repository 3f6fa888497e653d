"""Prefix-nested candidate index: build, truncate, persist, account, search.

On-disk layouts (all little-endian):

index file ``MVI1``::

    magic "MVI1" | version u16 = 1 | dtype u8 (0 f32, 1 bf16) | reserved u8
    N u64 | R_c u32 | D u32
    N doc ids (u64)
    N*R_c*D values, candidate-major, row-major
    CRC32 (u32) of every preceding byte

embedding file ``MVE1``::

    magic "MVE1" | version u16 = 1 | dtype u8 = 0 | reserved u8
    count u64 | R u32 | D u32
    count records of: doc_id u64, R*D float32
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .core import WORK_DTYPE, Budget, MetaEmbeddingSet, Side, l2_normalize_rows
from .errors import (
    BadMagic,
    BudgetExceedsVectors,
    ChecksumMismatch,
    DuplicateDocId,
    InconsistentDimension,
    NonFinite,
    OutOfRange,
    TruncatedFile,
    VersionUnsupported,
)
from .lateint import RankedList, score_batch, top_k

INDEX_MAGIC = b"MVI1"
EMBED_MAGIC = b"MVE1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBBQII")
_DTYPE_CODES = {"f32": 0, "bf16": 1}
_DTYPE_NAMES = {v: k for k, v in _DTYPE_CODES.items()}
_STORAGE = {"f32": np.dtype("<f4"), "bf16": np.dtype("<u2")}
BYTES_PER_VALUE = {"f32": 4, "bf16": 2}


# -- bfloat16 -------------------------------------------------------------

def quantize_bf16(x) -> np.ndarray:
    """Round float32 values to the nearest bfloat16 (ties to even).

    Returns the raw 16-bit patterns as uint16. Values whose rounding
    overflows to infinity are rejected along with NaN/Inf input.
    """
    x = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise NonFinite("cannot quantize NaN or Inf")
    bits = x.view(np.uint32).astype(np.uint64)
    rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
    out = rounded.astype(np.uint16)
    if np.any((out & 0x7F80) == 0x7F80):
        raise NonFinite("value overflows bfloat16 range")
    return out


def dequantize_bf16(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.uint16)
    return (h.astype(np.uint32) << 16).view(np.float32)


# -- index ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NestedIndex:
    """N candidates x R_c unit vectors x D, stored as f32 or bf16 bit patterns."""

    doc_ids: np.ndarray     # (N,) uint64
    data: np.ndarray        # (N, R_c, D) float32 or uint16
    dtype: str = "bf16"

    def __post_init__(self):
        if self.dtype not in _STORAGE:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        ids = np.ascontiguousarray(self.doc_ids, dtype=np.uint64)
        data = np.ascontiguousarray(self.data, dtype=_STORAGE[self.dtype])
        if data.ndim != 3:
            raise ValueError(f"data must be N x R_c x D, got {data.shape}")
        if ids.shape != (data.shape[0],):
            raise InconsistentDimension("doc_ids length differs from N")
        if len(np.unique(ids)) != len(ids):
            raise DuplicateDocId("doc ids must be unique")
        ids.setflags(write=False)
        data.setflags(write=False)
        object.__setattr__(self, "doc_ids", ids)
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def r_c(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def dequantize(self, rows=slice(None), r_c: int | None = None) -> np.ndarray:
        """Float32 copy of candidates ``rows``, keeping the first ``r_c`` vectors."""
        block = self.data[rows, : (self.r_c if r_c is None else r_c)]
        if self.dtype == "bf16":
            return dequantize_bf16(block)
        return np.array(block, dtype=WORK_DTYPE)

    def identical(self, other: "NestedIndex") -> bool:
        return (
            self.dtype == other.dtype
            and self.data.shape == other.data.shape
            and np.array_equal(self.doc_ids, other.doc_ids)
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self):
        return f"NestedIndex(N={self.n}, R_c={self.r_c}, D={self.dim}, dtype={self.dtype})"


def build_index(candidates: Iterable[tuple[int, MetaEmbeddingSet]], r_c: int,
                dtype: str = "bf16") -> NestedIndex:
    candidates = list(candidates)
    if dtype not in _STORAGE:
        raise ValueError(f"unknown dtype {dtype!r}")
    if r_c < 1:
        raise OutOfRange("r_c must be >= 1")
    ids = [int(d) for d, _ in candidates]
    if len(set(ids)) != len(ids):
        raise DuplicateDocId("duplicate doc id in candidates")
    dims = {s.D for _, s in candidates}
    if len(dims) > 1:
        raise InconsistentDimension(f"candidate sets disagree on D: {sorted(dims)}")
    short = [d for d, s in candidates if s.R < r_c]
    if short:
        raise BudgetExceedsVectors(f"doc {short[0]} has fewer than r_c={r_c} vectors")
    dim = dims.pop() if dims else 1
    block = np.empty((len(candidates), r_c, dim), dtype=WORK_DTYPE)
    for n, (_, s) in enumerate(candidates):
        block[n] = s.vectors[:r_c]
    data = quantize_bf16(block) if dtype == "bf16" else block
    return NestedIndex(np.array(ids, dtype=np.uint64), data, dtype)


def truncate_index(idx: NestedIndex, r_c_new: int) -> NestedIndex:
    if not 1 <= r_c_new <= idx.r_c:
        raise OutOfRange(f"r_c={r_c_new} outside [1, {idx.r_c}]")
    return NestedIndex(idx.doc_ids, idx.data[:, :r_c_new], idx.dtype)


@dataclass(frozen=True)
class MemoryReport:
    bytes: int

    @property
    def gib(self) -> float:
        # half-up on the exact rational value; float rounding would misplace .xx5 cases
        q = Fraction(self.bytes, 2**30) * 100
        return float((q + Fraction(1, 2)).__floor__()) / 100


def payload_bytes(n: int, r_c: int, d: int, dtype: str = "bf16") -> int:
    return n * r_c * d * BYTES_PER_VALUE[dtype]


def memory_report(idx: NestedIndex) -> MemoryReport:
    """Payload-only footprint (ids and header excluded)."""
    return MemoryReport(payload_bytes(idx.n, idx.r_c, idx.dim, idx.dtype))


def search(idx: NestedIndex, queries: Sequence[MetaEmbeddingSet], b: Budget, k: int,
           batch_size: int = 1000, query_ids: Sequence | None = None) -> list[RankedList]:
    return top_k(score_batch(queries, idx, b, batch_size, query_ids), k)


# -- persistence ----------------------------------------------------------

def _write_atomic(path, payload: bytes):
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _parse_header(buf: bytes, magic: bytes):
    if len(buf) < 4 or buf[:4] != magic:
        raise BadMagic(f"expected magic {magic!r}, found {bytes(buf[:4])!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFile(f"file has {len(buf)} bytes, header needs {_HEADER.size}")
    _, version, dtype_code, _reserved, count, r, d = _HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"format version {version} not supported")
    return dtype_code, count, r, d


def index_to_bytes(idx: NestedIndex) -> bytes:
    head = _HEADER.pack(INDEX_MAGIC, FORMAT_VERSION, _DTYPE_CODES[idx.dtype], 0,
                        idx.n, idx.r_c, idx.dim)
    body = head + idx.doc_ids.astype("<u8").tobytes() + idx.data.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def index_from_bytes(buf: bytes) -> NestedIndex:
    dtype_code, n, r_c, d = _parse_header(buf, INDEX_MAGIC)
    if dtype_code not in _DTYPE_NAMES:
        raise VersionUnsupported(f"unknown dtype code {dtype_code}")
    dtype = _DTYPE_NAMES[dtype_code]
    ids_end = _HEADER.size + 8 * n
    data_end = ids_end + n * r_c * d * BYTES_PER_VALUE[dtype]
    if len(buf) < data_end + 4:
        raise TruncatedFile(f"file has {len(buf)} bytes, header declares {data_end + 4}")
    if len(buf) > data_end + 4:
        raise ChecksumMismatch("trailing bytes after checksum")
    (stored,) = struct.unpack_from("<I", buf, data_end)
    if zlib.crc32(memoryview(buf)[:data_end]) != stored:
        raise ChecksumMismatch("CRC32 does not match file contents")
    ids = np.frombuffer(buf, dtype="<u8", count=n, offset=_HEADER.size)
    data = np.frombuffer(buf, dtype=_STORAGE[dtype], count=n * r_c * d, offset=ids_end)
    return NestedIndex(ids.copy(), data.reshape(n, r_c, d).copy(), dtype)


def save_index(idx: NestedIndex, path) -> None:
    _write_atomic(path, index_to_bytes(idx))


def load_index(path) -> NestedIndex:
    with open(path, "rb") as fh:
        return index_from_bytes(fh.read())


def write_embeddings(path, records: Sequence[tuple[int, np.ndarray]]) -> None:
    """Write (doc_id, R x D matrix) records as an MVE1 file (float32 payload)."""
    if not records:
        raise ValueError("no records to write")
    shapes = {np.shape(m) for _, m in records}
    if len(shapes) != 1:
        raise InconsistentDimension(f"records disagree on shape: {sorted(shapes)}")
    r, d = shapes.pop()
    parts = [_HEADER.pack(EMBED_MAGIC, FORMAT_VERSION, 0, 0, len(records), r, d)]
    for doc_id, m in records:
        parts.append(struct.pack("<Q", int(doc_id)))
        parts.append(np.asarray(m, dtype="<f4").tobytes())
    _write_atomic(path, b"".join(parts))


def read_embeddings(path, side: Side = Side.CANDIDATE) -> list[tuple[int, MetaEmbeddingSet]]:
    """Read an MVE1 file; rows are L2-normalized on ingestion."""
    with open(path, "rb") as fh:
        buf = fh.read()
    dtype_code, count, r, d = _parse_header(buf, EMBED_MAGIC)
    if dtype_code != 0:
        raise VersionUnsupported("embedding files must carry float32 (dtype 0)")
    rec = np.dtype([("id", "<u8"), ("v", "<f4", (r, d))])
    need = _HEADER.size + count * rec.itemsize
    if len(buf) < need:
        raise TruncatedFile(f"file has {len(buf)} bytes, header declares {need}")
    arr = np.frombuffer(buf, dtype=rec, count=count, offset=_HEADER.size)
    return [(int(a["id"]), MetaEmbeddingSet(l2_normalize_rows(a["v"]), side)) for a in arr]
