"""Binary model/delta files and client-side chain reconstruction.

All integers and floats are little-endian.

Model file (``.srm``)::

    offset  size  field
    0       4     magic  b"EMTM"
    4       2     version (u16) = 1
    6       1     arch code (u8): 0 espcn, 1 srcnn, 2 edsr1
    7       1     scale (u8)
    8       1     provenance (u8): 0 random, 1 pretrained, 2 meta, 3 adapted
    9       1     reserved, 0
    10      4     chunk index (u32), meaningful for provenance "adapted"
    14      4     parameter count P (u32)
    18      4P    parameters, f32
    18+4P   8     FNV-1a 64 hash of the parameter bytes (u64)

Delta file (``.srd``)::

    offset  size  field
    0       4     magic  b"EMTD"
    4       2     version (u16) = 1
    6       1     arch code (u8)
    7       1     scale (u8)
    8       4     chunk id (u32)
    12      8     parent hash (u64)
    20      4     parent parameter count P (u32)
    24      4     entry count K (u32)
    28      8K    entries: index (u32), new value (f32), indices ascending

A delta stores the *new absolute value* of each stored coordinate, so
applying it never re-rounds anything.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import fnv_c
import numpy as np

from .backbones import ARCH_IDS, PROVENANCE, ModelParams, get_arch

MODEL_MAGIC = b"EMTM"
DELTA_MAGIC = b"EMTD"
VERSION = 1
MODEL_HEADER = struct.Struct("<4sHBBBxII")
DELTA_HEADER = struct.Struct("<4sHBBIQII")
ENTRY_DTYPE = np.dtype([("index", "<u4"), ("value", "<f4")])

PathLike = Union[str, os.PathLike]


class CodecError(ValueError):
    """Malformed file or violated delta contract."""


class ChainError(CodecError):
    """Delta applied to the wrong parent model."""


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a of ``data``."""
    return fnv_c.fnv1a_64(bytes(data))


def param_bytes(theta: np.ndarray) -> bytes:
    return np.asarray(theta, dtype="<f4").tobytes()


def model_hash(model: ModelParams) -> int:
    return fnv1a64(param_bytes(model.theta))


@dataclass(frozen=True)
class SparseDelta:
    chunk_id: int
    parent_hash: int
    parent_count: int
    indices: np.ndarray  # uint32, strictly ascending
    values: np.ndarray  # float32
    arch_id: str
    scale: int

    def __post_init__(self):
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise CodecError("indices and values must be 1-D arrays of equal length")
        if self.indices.size:
            if np.any(np.diff(self.indices.astype(np.int64)) <= 0):
                raise CodecError("delta indices must be strictly ascending")
            if int(self.indices[-1]) >= self.parent_count:
                raise CodecError(
                    f"delta index {int(self.indices[-1])} out of range for P={self.parent_count}"
                )

    def __len__(self) -> int:
        return int(self.indices.size)

    @property
    def nbytes(self) -> int:
        return DELTA_HEADER.size + ENTRY_DTYPE.itemsize * len(self)


def encode_delta(parent: ModelParams, adapted: ModelParams, mask_indices=None,
                 chunk_id: int = 0) -> SparseDelta:
    """Sparse delta taking ``parent`` to ``adapted``.

    With ``mask_indices`` (e.g. ``GradientMask.indices``) every masked
    coordinate is stored, changed or not, so the entry count equals the
    private-parameter count; a difference outside the mask raises
    :class:`CodecError`.  Without a mask only the changed coordinates are
    stored.  Differences are detected on the raw float32 bit patterns.
    """
    if parent.arch != adapted.arch:
        raise CodecError(
            f"architecture mismatch: {parent.arch.arch_id}x{parent.arch.scale} vs "
            f"{adapted.arch.arch_id}x{adapted.arch.scale}"
        )
    a = np.asarray(parent.theta, dtype=np.float32).view(np.uint32)
    b = np.asarray(adapted.theta, dtype=np.float32).view(np.uint32)
    changed = np.flatnonzero(a != b)
    if mask_indices is not None:
        stored = np.unique(np.asarray(mask_indices, dtype=np.int64))
        outside = np.setdiff1d(changed, stored, assume_unique=True)
        if outside.size:
            raise CodecError(
                f"masking contract violated: {outside.size} changed coordinates outside "
                f"the mask (first: {int(outside[0])})"
            )
    else:
        stored = changed
    return SparseDelta(
        chunk_id=chunk_id,
        parent_hash=model_hash(parent),
        parent_count=parent.P,
        indices=stored.astype(np.uint32),
        values=np.asarray(adapted.theta, dtype=np.float32)[stored],
        arch_id=parent.arch.arch_id,
        scale=parent.arch.scale,
    )


def apply_delta(parent: ModelParams, delta: SparseDelta, check_hash: bool = True) -> ModelParams:
    """Return ``parent`` with the delta's coordinates overwritten."""
    if (delta.arch_id, delta.scale) != (parent.arch.arch_id, parent.arch.scale):
        raise ChainError(
            f"delta for chunk {delta.chunk_id} targets {delta.arch_id}x{delta.scale}, "
            f"parent is {parent.arch.arch_id}x{parent.arch.scale}"
        )
    if delta.parent_count != parent.P:
        raise ChainError(f"delta for chunk {delta.chunk_id} expects P={delta.parent_count}, got {parent.P}")
    if check_hash:
        h = model_hash(parent)
        if h != delta.parent_hash:
            raise ChainError(
                f"hash mismatch applying delta for chunk {delta.chunk_id}: parent hash "
                f"{h:016x} != expected {delta.parent_hash:016x} (wrong chain order?)"
            )
    theta = np.array(parent.theta, dtype=np.float32, copy=True)
    if len(delta):
        theta[delta.indices.astype(np.int64)] = delta.values
    return parent.with_theta(theta, provenance="adapted", chunk=delta.chunk_id)


def reconstruct_chain(root: ModelParams, deltas: Sequence[SparseDelta]) -> List[ModelParams]:
    """Apply ``deltas`` in order; returns the model after each step."""
    out, model = [], root
    for d in deltas:
        model = apply_delta(model, d)
        out.append(model)
    return out


# ---------------------------------------------------------------------------
# storage accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StorageReport:
    P: int
    entries: int
    fraction: float
    delta_bytes: int
    model_bytes: int

    def label(self) -> str:
        return f"{self.fraction:.2f}P"


def storage_report(deltas: Iterable[SparseDelta], P: int) -> StorageReport:
    deltas = list(deltas)
    entries = sum(len(d) for d in deltas)
    return StorageReport(
        P=P,
        entries=entries,
        fraction=entries / P if P else 0.0,
        delta_bytes=sum(d.nbytes for d in deltas),
        model_bytes=MODEL_HEADER.size + 4 * P + 8,
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _atomic_write(path: PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def model_to_bytes(model: ModelParams) -> bytes:
    payload = param_bytes(model.theta)
    header = MODEL_HEADER.pack(
        MODEL_MAGIC, VERSION, ARCH_IDS.index(model.arch.arch_id), model.arch.scale,
        PROVENANCE.index(model.provenance), model.chunk, model.P,
    )
    return header + payload + struct.pack("<Q", fnv1a64(payload))


def model_from_bytes(data: bytes) -> ModelParams:
    if len(data) < MODEL_HEADER.size + 8:
        raise CodecError(f"model file truncated ({len(data)} bytes)")
    magic, version, arch_code, scale, prov, chunk, P = MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise CodecError(f"bad model magic {magic!r}")
    if version != VERSION:
        raise CodecError(f"unsupported model file version {version}")
    if arch_code >= len(ARCH_IDS) or prov >= len(PROVENANCE):
        raise CodecError(f"bad arch code {arch_code} or provenance {prov}")
    arch = get_arch(ARCH_IDS[arch_code], scale)
    if P != arch.param_count:
        raise CodecError(f"P={P} does not match {arch.arch_id}x{scale} (P={arch.param_count})")
    end = MODEL_HEADER.size + 4 * P
    if len(data) != end + 8:
        raise CodecError(f"model file size {len(data)} != expected {end + 8}")
    payload = data[MODEL_HEADER.size:end]
    (stored,) = struct.unpack_from("<Q", data, end)
    if fnv1a64(payload) != stored:
        raise CodecError("model content hash mismatch (corrupt file)")
    theta = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return ModelParams(arch, theta, PROVENANCE[prov], chunk)


def delta_to_bytes(delta: SparseDelta) -> bytes:
    header = DELTA_HEADER.pack(
        DELTA_MAGIC, VERSION, ARCH_IDS.index(delta.arch_id), delta.scale, delta.chunk_id,
        delta.parent_hash, delta.parent_count, len(delta),
    )
    entries = np.empty(len(delta), dtype=ENTRY_DTYPE)
    entries["index"] = delta.indices
    entries["value"] = delta.values
    return header + entries.tobytes()


def delta_from_bytes(data: bytes) -> SparseDelta:
    if len(data) < DELTA_HEADER.size:
        raise CodecError(f"delta file truncated ({len(data)} bytes)")
    magic, version, arch_code, scale, chunk, parent_hash, P, count = DELTA_HEADER.unpack_from(data)
    if magic != DELTA_MAGIC:
        raise CodecError(f"bad delta magic {magic!r}")
    if version != VERSION:
        raise CodecError(f"unsupported delta file version {version}")
    if arch_code >= len(ARCH_IDS):
        raise CodecError(f"bad arch code {arch_code}")
    expected = DELTA_HEADER.size + ENTRY_DTYPE.itemsize * count
    if len(data) != expected:
        raise CodecError(f"delta file size {len(data)} != header + 8*{count} = {expected}")
    entries = np.frombuffer(data, dtype=ENTRY_DTYPE, offset=DELTA_HEADER.size, count=count)
    return SparseDelta(
        chunk_id=chunk, parent_hash=parent_hash, parent_count=P,
        indices=entries["index"].astype(np.uint32), values=entries["value"].astype(np.float32),
        arch_id=ARCH_IDS[arch_code], scale=scale,
    )


def write_model(path: PathLike, model: ModelParams) -> None:
    _atomic_write(path, model_to_bytes(model))


def read_model(path: PathLike) -> ModelParams:
    return model_from_bytes(Path(path).read_bytes())


def write_delta(path: PathLike, delta: SparseDelta) -> None:
    _atomic_write(path, delta_to_bytes(delta))


def read_delta(path: PathLike) -> SparseDelta:
    return delta_from_bytes(Path(path).read_bytes())


def delta_filename(chunk_id: int) -> str:
    return f"chunk_{chunk_id:04d}.srd"


def read_delta_dir(directory: PathLike) -> List[SparseDelta]:
    """All ``*.srd`` files in ``directory`` ordered by chunk id."""
    deltas = [read_delta(p) for p in sorted(Path(directory).glob("*.srd"))]
    return sorted(deltas, key=lambda d: d.chunk_id)


def chain_hashes(models: Iterable[ModelParams]) -> List[Tuple[int, str]]:
    return [(m.chunk, f"{model_hash(m):016x}") for m in models]
