"""Tensor plumbing: seeded random streams, fp16 storage and 8-bit block codecs.

Tensors are plain ``numpy`` arrays. Production runs compute in float32; the
``fp64`` verification precision runs every numeric path in float64 so that
finite-difference checks and bit-exact reruns are meaningful.
"""

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
from rich.console import Console

from .errors import CorruptFileError, ValidationError

console = Console()

FP16_MAX = 65504.0
TNS_MAGIC = b"TNS1"

# TNS1 dtype tags; tag 2 carries fp64 verification-mode tensors
DTYPE_TAGS = {"fp32": 0, "fp16": 1, "fp64": 2}
TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f2"), 2: np.dtype("<f8")}

PRECISIONS = ("fp32", "fp64", "fp16-store")

StreamKey = Union[int, str]


def compute_dtype(precision: str) -> np.dtype:
    """Array dtype used for arithmetic under a run precision."""
    if precision not in PRECISIONS:
        raise ValidationError(
            f"unknown precision '{precision}', expected one of {', '.join(PRECISIONS)}"
        )
    return np.dtype(np.float64 if precision == "fp64" else np.float32)


def storage_precision(precision: str) -> str:
    """Checkpoint storage precision for a run precision."""
    compute_dtype(precision)
    return {"fp32": "fp32", "fp64": "fp64", "fp16-store": "fp16"}[precision]


def _stream_word(part: StreamKey) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValidationError(f"stream ids must be non-negative, got {part}")
    return int(part)


def make_rng(seed: int, *stream: StreamKey) -> np.random.Generator:
    """Counter-based generator for the substream ``(seed, *stream)``.

    Philox is keyed through a ``SeedSequence`` whose spawn key is the stream
    path, so substreams never share state and need no coordination.
    """
    if seed < 0:
        raise ValidationError(f"seed must be non-negative, got {seed}")
    key = tuple(_stream_word(p) for p in stream)
    seq = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


def gaussian(
    rng: np.random.Generator, shape: Sequence[int], dtype: np.dtype = np.float64
) -> np.ndarray:
    """I.i.d. standard normal tensor drawn from ``rng``."""
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValidationError("gaussian() needs a non-empty shape")
    return rng.standard_normal(shape, dtype=np.dtype(dtype).type)


@dataclass
class CodecStats:
    """Counters for lossy conversions."""

    fp16_overflows: int = 0


def fp16_roundtrip(x: np.ndarray, stats: CodecStats = None) -> np.ndarray:
    """Encode to IEEE binary16 and back, saturating out-of-range values."""
    x = np.asarray(x)
    overflow = int(np.count_nonzero(np.abs(x) > FP16_MAX))
    if overflow:
        console.print(
            f"⚠️  fp16 saturation: {overflow} value(s) clipped to ±{FP16_MAX:g}",
            style="yellow",
        )
        if stats is not None:
            stats.fp16_overflows += overflow
    clipped = np.clip(x, -FP16_MAX, FP16_MAX)
    return clipped.astype(np.float16).astype(x.dtype if x.dtype.kind == "f" else np.float32)


@dataclass
class QuantBlock8:
    """Blockwise absmax 8-bit encoding of a tensor."""

    shape: Tuple[int, ...]
    block_size: int
    scales: np.ndarray  # float32, one per block
    codes: np.ndarray  # int8, padded to a whole number of blocks
    dtype: str = "float32"

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


def q8_encode(x: np.ndarray, block_size: int = 64) -> QuantBlock8:
    """Quantize to signed codes in [-127, 127] with one absmax scale per block."""
    if block_size < 1:
        raise ValidationError(f"block_size must be >= 1, got {block_size}")
    x = np.asarray(x)
    flat = x.astype(np.float64).ravel()
    n_blocks = max(1, -(-flat.size // block_size))
    padded = np.zeros(n_blocks * block_size, dtype=np.float64)
    padded[: flat.size] = flat
    blocks = padded.reshape(n_blocks, block_size)

    scales = np.abs(blocks).max(axis=1).astype(np.float32)
    divisor = np.where(scales > 0, scales, 1.0).astype(np.float64)
    codes = np.clip(np.rint(blocks / divisor[:, None] * 127.0), -127, 127)
    return QuantBlock8(
        shape=tuple(x.shape),
        block_size=block_size,
        scales=scales,
        codes=codes.astype(np.int8).ravel(),
        dtype=str(x.dtype) if x.dtype.kind == "f" else "float32",
    )


def q8_decode(q: QuantBlock8) -> np.ndarray:
    """Inverse of :func:`q8_encode`; zero blocks decode to exact zeros."""
    blocks = q.codes.astype(np.float64).reshape(-1, q.block_size)
    values = blocks * q.scales.astype(np.float64)[:, None] / 127.0
    return values.ravel()[: q.size].reshape(q.shape).astype(q.dtype)


def encode_tensor(x: np.ndarray, precision: str = "fp32", stats: CodecStats = None) -> bytes:
    """Serialize one tensor to the TNS1 layout; fp16 overflows are added to ``stats``."""
    if precision not in DTYPE_TAGS:
        raise ValidationError(f"unsupported tensor precision '{precision}'")
    x = np.asarray(x)
    tag = DTYPE_TAGS[precision]
    if precision == "fp16":
        payload = fp16_roundtrip(x.astype(np.float64), stats).astype(TAG_DTYPES[tag])
    else:
        payload = x.astype(TAG_DTYPES[tag])
    header = TNS_MAGIC + struct.pack("<BB", tag, x.ndim)
    header += struct.pack(f"<{x.ndim}I", *x.shape)
    return header + payload.tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Parse one TNS1 tensor at ``offset``; returns the array and the end offset."""
    if buf[offset : offset + 4] != TNS_MAGIC:
        raise CorruptFileError("bad TNS1 magic", offset)
    pos = offset + 4
    if len(buf) < pos + 2:
        raise CorruptFileError("truncated TNS1 header", pos)
    tag, rank = struct.unpack_from("<BB", buf, pos)
    if tag not in TAG_DTYPES:
        raise CorruptFileError(f"unknown TNS1 dtype tag {tag}", pos)
    pos += 2
    if len(buf) < pos + 4 * rank:
        raise CorruptFileError("truncated TNS1 dims", pos)
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dtype = TAG_DTYPES[tag]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise CorruptFileError(
            f"truncated TNS1 payload: need {nbytes} bytes, have {len(buf) - pos}", pos
        )
    data = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    array = data.reshape(dims).astype(np.float64 if tag == 2 else np.float32)
    return array, pos + nbytes


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write through a temporary sibling so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def save_tensor(path: Path, x: np.ndarray, precision: str = "fp32") -> None:
    atomic_write_bytes(path, encode_tensor(x, precision))


def load_tensor(path: Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    array, end = decode_tensor(buf)
    if end != len(buf):
        raise CorruptFileError("trailing bytes after TNS1 tensor", end)
    return array
