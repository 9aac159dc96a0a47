"""Fixed-size, alignment-padded on-disk records for pooled embeddings.

File layout (all little-endian)::

    [0, 4096)                header, zero padded
    4096 + i * record_size   record i: C*k payload values in dtype,
                             then (i8 only) float32 min, max; zero padded

Every document occupies exactly ``record_size`` bytes, so locating a
record is one multiplication and every record starts on an alignment
boundary.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

HEADER_SIZE = 4096
INDEX_MAGIC = b"CBIX"
INDEX_VERSION = 1
EMB_MAGIC = b"CBEM"

# magic, version, C, k, dtype, num_docs, alignment, normalize
_HEADER = struct.Struct("<4sHIIBQIB")
_EMB_HEADER = struct.Struct("<4sIII")

DTYPES = {"f32": 0, "f16": 1, "i8": 2}
_DTYPE_NAMES = {v: k for k, v in DTYPES.items()}
_DTYPE_BYTES = {"f32": 4, "f16": 2, "i8": 1}
_QUANT_PARAM_BYTES = 8


class IndexFileError(Exception):
    """Base class for unreadable index files."""


class IndexFormatError(IndexFileError):
    pass


class UnsupportedVersionError(IndexFileError):
    pass


class TruncatedIndexError(IndexFileError):
    pass


def _dtype_name(dtype) -> str:
    if isinstance(dtype, int):
        if dtype not in _DTYPE_NAMES:
            raise ValueError(f"unknown dtype code {dtype}")
        return _DTYPE_NAMES[dtype]
    if dtype not in DTYPES:
        raise ValueError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}")
    return dtype


def _check_alignment(alignment: int) -> None:
    if alignment < 1 or alignment & (alignment - 1):
        raise ValueError(f"alignment must be a power of two, got {alignment}")


def payload_bytes(c_vectors: int, dim: int, dtype="f32") -> int:
    name = _dtype_name(dtype)
    extra = _QUANT_PARAM_BYTES if name == "i8" else 0
    return c_vectors * dim * _DTYPE_BYTES[name] + extra


def record_size(c_vectors: int, dim: int, dtype="f32", alignment: int = 4096) -> int:
    _check_alignment(alignment)
    raw = payload_bytes(c_vectors, dim, dtype)
    return -(-raw // alignment) * alignment


def _i8_scale(lo: np.float32, hi: np.float32) -> np.float32:
    return np.float32(max(abs(lo), abs(hi))) / np.float32(127.0)


def _encode_record(mat: np.ndarray, dtype: str, size: int) -> bytes:
    buf = bytearray(size)
    flat = mat.reshape(-1)
    if dtype == "f32":
        raw = flat.astype("<f4").tobytes()
    elif dtype == "f16":
        half = flat.astype("<f2")
        if not np.all(np.isfinite(half)):
            raise ValueError("value out of float16 range")
        raw = half.tobytes()
    else:
        lo = np.float32(flat.min()) if flat.size else np.float32(0)
        hi = np.float32(flat.max()) if flat.size else np.float32(0)
        scale = _i8_scale(lo, hi)
        if scale > 0:
            q = np.clip(np.rint(flat / scale), -127, 127).astype(np.int8)
        else:
            q = np.zeros(flat.size, dtype=np.int8)
        raw = q.tobytes() + struct.pack("<ff", lo, hi)
    buf[: len(raw)] = raw
    return bytes(buf)


def docid_map_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".ids.tsv")


def write_docid_map(path, ids: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, ext in enumerate(ids):
            fh.write(f"{i}\t{ext}\n")


def read_docid_map(path) -> list[str]:
    ids: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].isdigit() or int(parts[0]) != len(ids):
                raise IndexFormatError(f"{path}:{lineno}: expected '{len(ids)}<TAB>external_id'")
            ids.append(parts[1])
    if len(set(ids)) != len(ids):
        raise IndexFormatError(f"{path}: duplicate external ids")
    return ids


def _check_external_id(ext: str) -> str:
    ext = str(ext)
    if not ext or any(c in ext for c in "\t\n\r"):
        raise ValueError(f"invalid external id {ext!r}")
    return ext


@dataclass(frozen=True)
class IndexHeader:
    c_vectors: int
    dim: int
    dtype: str = "f32"
    num_docs: int = 0
    alignment: int = 4096
    normalize_flag: bool = False
    version: int = INDEX_VERSION

    @property
    def record_size(self) -> int:
        return record_size(self.c_vectors, self.dim, self.dtype, self.alignment)

    def pack(self) -> bytes:
        head = _HEADER.pack(
            INDEX_MAGIC,
            self.version,
            self.c_vectors,
            self.dim,
            DTYPES[self.dtype],
            self.num_docs,
            self.alignment,
            int(self.normalize_flag),
        )
        return head.ljust(HEADER_SIZE, b"\0")

    @classmethod
    def unpack(cls, raw: bytes, path="<index>") -> "IndexHeader":
        if len(raw) < _HEADER.size:
            raise TruncatedIndexError(f"{path}: file shorter than the header")
        magic, version, c, k, dt, n, align, norm = _HEADER.unpack_from(raw)
        if magic != INDEX_MAGIC:
            raise IndexFormatError(f"{path}: bad magic {magic!r}, expected {INDEX_MAGIC!r}")
        if version != INDEX_VERSION:
            raise UnsupportedVersionError(f"{path}: unsupported index version {version}")
        if dt not in _DTYPE_NAMES:
            raise IndexFormatError(f"{path}: unknown dtype code {dt}")
        return cls(c, k, _DTYPE_NAMES[dt], n, align, bool(norm), version)


def validate_layout(c_vectors: int, dim: int, alignment: int) -> None:
    if c_vectors < 1 or dim < 1:
        raise ValueError(f"C and k must be >= 1, got C={c_vectors} k={dim}")
    _check_alignment(alignment)
    if not 64 <= alignment <= HEADER_SIZE:
        # records start right after the 4096-byte header
        raise ValueError(f"alignment must be between 64 and {HEADER_SIZE}, got {alignment}")


def build_index(
    path,
    pooled: Iterable[tuple[str, np.ndarray]],
    *,
    c_vectors: int,
    dim: int,
    dtype: str = "f32",
    alignment: int = 4096,
    normalize_flag: bool = False,
) -> IndexHeader:
    """Stream ``(external_id, (C, k) matrix)`` pairs into an index file.

    Single pass; the document count is patched into the header at the end.
    The DocIdMap is written next to the index (see ``docid_map_path``).
    A failed build leaves no file behind.
    """
    dtype = _dtype_name(dtype)
    validate_layout(c_vectors, dim, alignment)
    header = IndexHeader(c_vectors, dim, dtype, 0, alignment, normalize_flag)
    size = header.record_size
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    ids_path = docid_map_path(path)
    ids_tmp = ids_path.with_name(ids_path.name + ".tmp")
    n = 0
    seen: set[str] = set()
    try:
        with open(tmp, "wb") as fh, open(ids_tmp, "w", encoding="utf-8", newline="\n") as idfh:
            fh.write(header.pack())
            for ext, mat in pooled:
                ext = _check_external_id(ext)
                if ext in seen:
                    raise ValueError(f"duplicate external id {ext!r}")
                seen.add(ext)
                arr = np.asarray(mat, dtype=np.float32)
                if arr.shape != (c_vectors, dim):
                    raise ValueError(f"document {ext!r} has shape {arr.shape}, expected ({c_vectors}, {dim})")
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"document {ext!r} contains non-finite values")
                try:
                    fh.write(_encode_record(arr, dtype, size))
                except ValueError as exc:
                    raise ValueError(f"document {ext!r}: {exc}") from exc
                idfh.write(f"{n}\t{ext}\n")
                n += 1
            header = IndexHeader(c_vectors, dim, dtype, n, alignment, normalize_flag)
            fh.seek(0)
            fh.write(header.pack())
        os.replace(tmp, path)
        os.replace(ids_tmp, ids_path)
    finally:
        for p in (tmp, ids_tmp):
            if p.exists():
                p.unlink()
    return header


class Index:
    """Read-only handle over an index file; records are decoded on demand.

    ``decoded`` counts records decoded through this handle.
    """

    def __init__(self, path, header: IndexHeader, ids: list[str] | None):
        self.path = Path(path)
        self.header = header
        self.record_size = header.record_size
        self.decoded = 0
        self._ids = ids
        self._lookup: dict[str, int] | None = None
        n = header.num_docs
        if n:
            mm = np.memmap(self.path, dtype=np.uint8, mode="r")
            self._records = mm[HEADER_SIZE:].reshape(n, self.record_size)
        else:
            self._records = np.zeros((0, self.record_size), dtype=np.uint8)

    # header passthroughs
    @property
    def num_docs(self) -> int:
        return self.header.num_docs

    @property
    def c_vectors(self) -> int:
        return self.header.c_vectors

    @property
    def dim(self) -> int:
        return self.header.dim

    @property
    def dtype(self) -> str:
        return self.header.dtype

    @property
    def ids(self) -> list[str]:
        if self._ids is None:
            self._ids = [str(i) for i in range(self.num_docs)]
        return self._ids

    def internal_id(self, external_id: str) -> int | None:
        if self._lookup is None:
            self._lookup = {e: i for i, e in enumerate(self.ids)}
        return self._lookup.get(external_id)

    def offset(self, doc_id: int) -> int:
        return HEADER_SIZE + doc_id * self.record_size

    def _decode(self, rows: np.ndarray) -> np.ndarray:
        c, k = self.c_vectors, self.dim
        ck = c * k
        n = rows.shape[0]
        if self.dtype == "f32":
            out = rows[:, : 4 * ck].view("<f4").astype(np.float32)
        elif self.dtype == "f16":
            out = rows[:, : 2 * ck].view("<f2").astype(np.float32)
        else:
            q = rows[:, :ck].view(np.int8).astype(np.float32)
            params = np.ascontiguousarray(rows[:, ck : ck + 8]).view("<f4")
            scale = np.maximum(np.abs(params[:, 0]), np.abs(params[:, 1])) / np.float32(127.0)
            out = q * scale[:, None]
        self.decoded += n
        return out.reshape(n, c, k)

    def decode_range(self, start: int, stop: int) -> np.ndarray:
        """Records ``start..stop-1`` as a ``(n, C, k)`` float32 array."""
        return self._decode(self._records[start:stop])

    def decode_ids(self, doc_ids) -> np.ndarray:
        idx = np.asarray(doc_ids, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_docs):
            raise IndexError(f"doc_id out of range [0, {self.num_docs})")
        return self._decode(self._records[idx])

    def get_doc(self, doc_id: int) -> np.ndarray:
        if not 0 <= doc_id < self.num_docs:
            raise IndexError(f"doc_id {doc_id} out of range [0, {self.num_docs})")
        return self._decode(self._records[doc_id : doc_id + 1])[0]

    def close(self) -> None:
        self._records = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __len__(self) -> int:
        return self.num_docs


def open_index(path, *, ids: bool = True) -> Index:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    if len(raw) < 4 or raw[:4] != INDEX_MAGIC:
        raise IndexFormatError(f"{path}: bad magic {raw[:4]!r}, expected {INDEX_MAGIC!r}")
    header = IndexHeader.unpack(raw, path)
    expected = HEADER_SIZE + header.num_docs * header.record_size
    actual = path.stat().st_size
    if len(raw) < HEADER_SIZE or actual != expected:
        raise TruncatedIndexError(f"{path}: size {actual} bytes, header implies {expected}")
    id_list = None
    if ids and docid_map_path(path).exists():
        id_list = read_docid_map(docid_map_path(path))
        if len(id_list) != header.num_docs:
            raise IndexFormatError(
                f"{docid_map_path(path)}: {len(id_list)} ids for {header.num_docs} documents"
            )
    return Index(path, header, id_list)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# CBEM multi-vector interchange
# --------------------------------------------------------------------------


def write_embeddings(path, ids: list[str], data: np.ndarray) -> None:
    """``CBEM``: magic, u32 count, u32 rows-per-item, u32 k, float32 payload; ids in ``<path>.ids.tsv``."""
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"expected (count, rows, k) array, got shape {arr.shape}")
    if len(ids) != arr.shape[0]:
        raise ValueError(f"{len(ids)} ids for {arr.shape[0]} items")
    ids = [_check_external_id(e) for e in ids]
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMB_MAGIC, *arr.shape))
        fh.write(arr.tobytes())
    write_docid_map(docid_map_path(path), ids)


def read_embeddings(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _EMB_HEADER.size:
        raise IndexFormatError(f"{path}: too short for an embeddings header")
    magic, count, rows, k = _EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise IndexFormatError(f"{path}: bad magic {magic!r}, expected {EMB_MAGIC!r}")
    n = count * rows * k
    if len(raw) != _EMB_HEADER.size + 4 * n:
        raise TruncatedIndexError(f"{path}: expected {_EMB_HEADER.size + 4 * n} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=_EMB_HEADER.size)
    data = data.reshape(count, rows, k).astype(np.float32)
    ids_path = docid_map_path(path)
    ids = read_docid_map(ids_path) if ids_path.exists() else [str(i) for i in range(count)]
    if len(ids) != count:
        raise IndexFormatError(f"{ids_path}: {len(ids)} ids for {count} items")
    return ids, data
