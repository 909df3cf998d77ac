"""Dense weight tensors, activation matrices and the ``.ubpt`` container.

Container layout (all fields little-endian)::

    b"UBPT" | version u32 = 1 | ndim u32 (2 or 4) | dims u32 * ndim | dtype u32 (0 = f32) | payload

The payload is the row-major float32 data. A 4-d file decodes to a
:class:`WeightTensor` and a 2-d file to an :class:`ActivationMatrix`.

Synthetic tensors come from numpy's ``PCG64`` bit generator
(``numpy.random.default_rng(seed)``): uniform samples are
``2 * rng.random(dtype=float32) - 1`` and gaussian samples are
``rng.standard_normal(dtype=float32)``, both drawn in row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"UBPT"
VERSION = 1
DTYPE_F32 = 0


class TensorFormatError(ValueError):
    """Base class for malformed ``.ubpt`` files."""


class BadMagicError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class DimensionError(TensorFormatError):
    """Zero dimensions, an unsupported ndim, or data length that disagrees with dims."""


def _as_f32(data, size: int) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float32).reshape(-1)
    if arr.size != size:
        raise DimensionError(f"data length {arr.size} does not match dims product {size}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class WeightTensor:
    """A (c_out, c_in, kh, kw) convolution weight stored row-major as float32."""

    c_out: int
    c_in: int
    kh: int
    kw: int
    data: np.ndarray

    def __post_init__(self):
        dims = (self.c_out, self.c_in, self.kh, self.kw)
        if any(int(d) < 1 for d in dims):
            raise DimensionError(f"all dimensions must be >= 1, got {dims}")
        object.__setattr__(self, "data", _as_f32(self.data, int(np.prod(dims))))

    @classmethod
    def from_array(cls, arr) -> WeightTensor:
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None, None]
        if arr.ndim != 4:
            raise DimensionError(f"expected a 2-d or 4-d array, got ndim={arr.ndim}")
        return cls(*arr.shape, data=arr)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.c_out, self.c_in, self.kh, self.kw)

    @property
    def kernel_size(self) -> int:
        return self.kh * self.kw

    def array(self) -> np.ndarray:
        """Read-only 4-d view of the data."""
        return self.data.reshape(self.shape)

    def __getitem__(self, idx):
        return self.array()[idx]

    def __eq__(self, other):
        if not isinstance(other, WeightTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class ActivationMatrix:
    """Input/output operand of a 1x1 convolution: channels x flattened spatial positions."""

    rows: int
    cols: int
    data: np.ndarray

    def __post_init__(self):
        if int(self.rows) < 1 or int(self.cols) < 1:
            raise DimensionError(f"all dimensions must be >= 1, got {(self.rows, self.cols)}")
        object.__setattr__(self, "data", _as_f32(self.data, self.rows * self.cols))

    @classmethod
    def from_array(cls, arr) -> ActivationMatrix:
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 2:
            raise DimensionError(f"expected a 2-d array, got ndim={arr.ndim}")
        return cls(*arr.shape, data=arr)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def __eq__(self, other):
        if not isinstance(other, ActivationMatrix):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)


def encode_tensor(t: WeightTensor | ActivationMatrix) -> bytes:
    dims = t.shape
    header = MAGIC + struct.pack(f"<II{len(dims)}II", VERSION, len(dims), *dims, DTYPE_F32)
    return header + t.data.astype("<f4", copy=False).tobytes()


def decode_tensor(buf: bytes) -> WeightTensor | ActivationMatrix:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("missing UBPT magic")
    pos = 4
    if len(buf) < pos + 8:
        raise TruncatedPayloadError("header truncated")
    version, ndim = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if ndim not in (2, 4):
        raise DimensionError(f"ndim must be 2 or 4, got {ndim}")
    if len(buf) < pos + 4 * ndim + 4:
        raise TruncatedPayloadError("header truncated")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    (dtype,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if dtype != DTYPE_F32:
        raise TensorFormatError(f"unsupported dtype code {dtype}")
    if any(d == 0 for d in dims):
        raise DimensionError(f"all dimensions must be >= 1, got {dims}")
    size = int(np.prod(dims, dtype=np.int64))
    payload = buf[pos:]
    if len(payload) < 4 * size:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, expected {4 * size}")
    if len(payload) > 4 * size:
        raise DimensionError(f"payload has {len(payload)} bytes, dims imply {4 * size}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    if ndim == 4:
        return WeightTensor(*dims, data=data)
    return ActivationMatrix(*dims, data=data)


def load_tensor(path) -> WeightTensor | ActivationMatrix:
    return decode_tensor(Path(path).read_bytes())


def store_tensor(t: WeightTensor | ActivationMatrix, path) -> None:
    Path(path).write_bytes(encode_tensor(t))


def gen_tensor(shape, seed: int, dist: str = "gaussian") -> WeightTensor:
    """Deterministic synthetic weights; see the module docstring for the generator."""
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4 or any(d < 1 for d in shape):
        raise DimensionError(f"shape must be 4 positive integers, got {shape}")
    rng = np.random.default_rng(seed)
    size = int(np.prod(shape))
    if dist == "uniform":
        data = np.float32(2) * rng.random(size, dtype=np.float32) - np.float32(1)
    elif dist == "gaussian":
        data = rng.standard_normal(size, dtype=np.float32)
    else:
        raise ValueError(f"unknown distribution {dist!r}")
    return WeightTensor(*shape, data=data)


def gen_activations(rows: int, cols: int, seed: int) -> ActivationMatrix:
    """Uniform [-1, 1) activation matrix from the same generator as :func:`gen_tensor`."""
    rng = np.random.default_rng(seed)
    data = np.float32(2) * rng.random(rows * cols, dtype=np.float32) - np.float32(1)
    return ActivationMatrix(rows, cols, data)


def parse_shape(text: str) -> tuple[int, ...]:
    """Parse ``"64x32x1x1"`` into a tuple of ints."""
    try:
        return tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"bad shape {text!r}, expected e.g. 64x32x1x1") from None
