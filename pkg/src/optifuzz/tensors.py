"""4-D NCHW tensor values, their binary file format, and the tensor mutation rules.

Tensors carry their values at the declared precision: an F32 or BF16 tensor
holds only values exactly representable in that type, whatever width the
surrounding arithmetic uses.  BF16 has no native numpy dtype, so BF16 tensors
are stored as float32 arrays whose low 16 mantissa bits are zero; the file
format stores them as the raw upper 16 bits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import BinaryIO

import numpy as np

MAX_ELEMENTS = 1 << 24

_MAGIC = b"DLJT"
_FORMAT_VERSION = 1


class ShapeTooLarge(Exception):
    """Element count exceeds the desk-scale bound."""


class FormatError(Exception):
    """Base for tensor file format violations."""


class BadMagic(FormatError):
    pass


class BadDType(FormatError):
    pass


class TruncatedData(FormatError):
    pass


class DType(Enum):
    F32 = "f32"
    F64 = "f64"
    BF16 = "bf16"

    @property
    def width(self) -> int:
        """Element width in bytes."""
        return {DType.F32: 4, DType.F64: 8, DType.BF16: 2}[self]

    @property
    def code(self) -> int:
        """Wire code used by the DLJT header."""
        return {DType.F32: 0, DType.F64: 1, DType.BF16: 2}[self]

    @property
    def storage(self) -> np.dtype:
        """In-memory numpy dtype (BF16 values live in a float32 carrier)."""
        return np.dtype(np.float64) if self is DType.F64 else np.dtype(np.float32)


_DTYPE_BY_CODE = {d.code: d for d in DType}
_DTYPE_BY_NAME = {d.value: d for d in DType}


def dtype_from_name(name: str) -> DType:
    try:
        return _DTYPE_BY_NAME[name]
    except KeyError:
        raise BadDType(f"unknown dtype name {name!r}") from None


@dataclass(frozen=True, order=True)
class Shape:
    """Extents of a rank-4 tensor in (batch, channels, height, width) order."""

    n: int
    c: int
    h: int
    w: int

    def __post_init__(self) -> None:
        for name, extent in zip("nchw", self.dims):
            if extent < 1:
                raise ValueError(f"extent {name}={extent} must be >= 1")
        if self.element_count > MAX_ELEMENTS:
            raise ShapeTooLarge(
                f"{self.dims} has {self.element_count} elements, bound is {MAX_ELEMENTS}"
            )

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.n, self.c, self.h, self.w)

    @property
    def element_count(self) -> int:
        return self.n * self.c * self.h * self.w

    @staticmethod
    def of(dims: tuple[int, ...]) -> "Shape":
        if len(dims) != 4:
            raise ValueError(f"expected rank 4, got {dims}")
        return Shape(*(int(d) for d in dims))


def _f32_to_bf16_bits(values: np.ndarray) -> np.ndarray:
    """Round float32 values to the nearest BF16 bit pattern (ties to even)."""
    values = np.ascontiguousarray(values, dtype=np.float32)
    bits = values.view(np.uint32)
    rounded = ((bits + np.uint32(0x7FFF) + ((bits >> 16) & 1)) >> 16).astype(np.uint16)
    return np.where(np.isnan(values), np.uint16(0x7FC0), rounded)


def _bf16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    return (np.ascontiguousarray(bits, dtype=np.uint16).astype(np.uint32) << 16).view(
        np.float32
    )


def quantize_array(values: np.ndarray, dtype: DType) -> np.ndarray:
    """Round an array to `dtype`'s representable values (round-to-nearest-even).

    The result is in the carrier dtype: float64 for F64, float32 otherwise.
    BF16 quantization of float64 input goes through float32 first.
    """
    values = np.asarray(values)
    if dtype is DType.F64:
        return np.ascontiguousarray(values, dtype=np.float64)
    values32 = np.ascontiguousarray(values, dtype=np.float32)
    if dtype is DType.F32:
        return values32
    return _bf16_bits_to_f32(_f32_to_bf16_bits(values32))


class Tensor:
    """Immutable rank-4 value container at a declared precision."""

    __slots__ = ("shape", "dtype", "data")

    shape: Shape
    dtype: DType
    data: np.ndarray

    def __init__(self, shape: Shape, dtype: DType, data: np.ndarray) -> None:
        data = np.ascontiguousarray(data, dtype=dtype.storage).reshape(shape.dims)
        if dtype is not DType.F64 and data.dtype != np.float32:
            raise ValueError("F32/BF16 tensors must carry float32 storage")
        if dtype is DType.BF16:
            requantized = quantize_array(data, DType.BF16)
            same = (requantized.view(np.uint32) == data.view(np.uint32)) | (
                np.isnan(requantized) & np.isnan(data)
            )
            if not bool(np.all(same)):
                raise ValueError("BF16 tensor holds values not representable in bfloat16")
        data.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "dtype", dtype)
        object.__setattr__(self, "data", data)

    def __setattr__(self, name: str, value: object) -> None:
        raise AttributeError("Tensor is immutable")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape.dims}, dtype={self.dtype.value})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.dtype == other.dtype
            and bool(np.array_equal(self.data, other.data))
        )

    def __hash__(self) -> int:
        return hash((self.shape, self.dtype, self.data.tobytes()))

    @property
    def element_count(self) -> int:
        return self.shape.element_count

    @property
    def nbytes(self) -> int:
        return self.element_count * self.dtype.width

    @staticmethod
    def quantize(values: np.ndarray, dtype: DType) -> "Tensor":
        """Build a tensor by rounding arbitrary values into `dtype`."""
        values = np.asarray(values)
        return Tensor(Shape.of(values.shape), dtype, quantize_array(values, dtype))

    def astype(self, dtype: DType) -> "Tensor":
        """Convert to another precision; converting to the current dtype is the identity."""
        if dtype is self.dtype:
            return self
        return Tensor(self.shape, dtype, quantize_array(self.data, dtype))

    def to_f64(self) -> np.ndarray:
        """Values widened to float64 (exact for all three precisions)."""
        return np.asarray(self.data, dtype=np.float64)

    def bit_equal(self, other: "Tensor") -> bool:
        if self.shape != other.shape or self.dtype != other.dtype:
            return False
        return self.data.tobytes() == other.data.tobytes()


def random_seed_tensor(shape: Shape, dtype: DType, rng: np.random.Generator) -> Tensor:
    """Fresh tensor with values i.i.d. uniform on [-1, 1], quantized to `dtype`."""
    if shape.element_count > MAX_ELEMENTS:
        raise ShapeTooLarge(f"{shape.dims} exceeds the element bound")
    values = rng.uniform(-1.0, 1.0, size=shape.dims)
    return Tensor(shape, dtype, quantize_array(values, dtype))


# --- DLJT binary format -----------------------------------------------------
#
# magic "DLJT" | u8 version=1 | u8 dtype code | u8 rank=4 | u8 reserved=0 |
# four u32 little-endian extents (N, C, H, W) | raw little-endian elements.

_HEADER = struct.Struct("<4sBBBB4I")


def tensor_to_bytes(t: Tensor) -> bytes:
    header = _HEADER.pack(
        _MAGIC, _FORMAT_VERSION, t.dtype.code, 4, 0, *t.shape.dims
    )
    if t.dtype is DType.BF16:
        payload = _f32_to_bf16_bits(t.data).astype("<u2").tobytes()
    elif t.dtype is DType.F32:
        payload = t.data.astype("<f4").tobytes()
    else:
        payload = t.data.astype("<f8").tobytes()
    return header + payload


def tensor_from_bytes(blob: bytes) -> Tensor:
    if len(blob) < _HEADER.size:
        raise TruncatedData(f"header needs {_HEADER.size} bytes, got {len(blob)}")
    magic, version, dtype_code, rank, reserved, n, c, h, w = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != _FORMAT_VERSION or rank != 4 or reserved != 0:
        raise BadMagic(
            f"unsupported header: version={version} rank={rank} reserved={reserved}"
        )
    dtype = _DTYPE_BY_CODE.get(dtype_code)
    if dtype is None:
        raise BadDType(f"unknown dtype code {dtype_code}")
    shape = Shape(n, c, h, w)
    expected = shape.element_count * dtype.width
    payload = blob[_HEADER.size :]
    if len(payload) < expected:
        raise TruncatedData(f"need {expected} data bytes, got {len(payload)}")
    payload = payload[:expected]
    if dtype is DType.BF16:
        data = _bf16_bits_to_f32(np.frombuffer(payload, dtype="<u2"))
    elif dtype is DType.F32:
        data = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    else:
        data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return Tensor(shape, dtype, data.reshape(shape.dims))


def write_tensor(path: str, t: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def read_tensor(path_or_stream: str | BinaryIO) -> Tensor:
    if isinstance(path_or_stream, str):
        with open(path_or_stream, "rb") as fh:
            return tensor_from_bytes(fh.read())
    return tensor_from_bytes(path_or_stream.read())


# --- Mutation rules ----------------------------------------------------------


class TensorMutationRule(Enum):
    """The thirteen shape/precision mutations applied to test input tensors."""

    WDC = "wdc"  # copy, concatenated along W
    HDC = "hdc"
    CDC = "cdc"
    BDC = "bdc"
    WDP = "wdp"  # zero padding appended along W
    HDP = "hdp"
    CDP = "cdp"
    BDP = "bdp"
    HWDT = "hwdt"  # H/W transpose
    RC = "rc"  # random crop
    FT = "ft"  # cast to F32
    DT = "dt"  # cast to F64
    BFT = "bft"  # cast to BF16


_COPY_AXIS = {
    TensorMutationRule.BDC: 0,
    TensorMutationRule.CDC: 1,
    TensorMutationRule.HDC: 2,
    TensorMutationRule.WDC: 3,
}
_PAD_AXIS = {
    TensorMutationRule.BDP: 0,
    TensorMutationRule.CDP: 1,
    TensorMutationRule.HDP: 2,
    TensorMutationRule.WDP: 3,
}
_CAST_TARGET = {
    TensorMutationRule.FT: DType.F32,
    TensorMutationRule.DT: DType.F64,
    TensorMutationRule.BFT: DType.BF16,
}

MAX_PAD = 4


def mutate_tensor(t: Tensor, rule: TensorMutationRule, rng: np.random.Generator) -> Tensor:
    """Apply one mutation rule; raises ShapeTooLarge when a growth rule overflows.

    rng consumption order is part of the contract: padding draws one k in
    [1, MAX_PAD]; cropping draws four extents (n, c, h, w) then four offsets.
    """
    if rule in _COPY_AXIS:
        axis = _COPY_AXIS[rule]
        data = np.concatenate([t.data, t.data], axis=axis)
        return Tensor(Shape.of(data.shape), t.dtype, data)

    if rule in _PAD_AXIS:
        axis = _PAD_AXIS[rule]
        k = int(rng.integers(1, MAX_PAD + 1))
        pad = [(0, 0)] * 4
        pad[axis] = (0, k)
        data = np.pad(t.data, pad)
        return Tensor(Shape.of(data.shape), t.dtype, data)

    if rule is TensorMutationRule.HWDT:
        data = np.transpose(t.data, (0, 1, 3, 2))
        return Tensor(Shape.of(data.shape), t.dtype, data)

    if rule is TensorMutationRule.RC:
        extents = [int(rng.integers(1, d + 1)) for d in t.shape.dims]
        offsets = [
            int(rng.integers(0, old - new + 1))
            for old, new in zip(t.shape.dims, extents)
        ]
        slices = tuple(slice(o, o + e) for o, e in zip(offsets, extents))
        return Tensor(Shape.of(tuple(extents)), t.dtype, t.data[slices])

    if rule in _CAST_TARGET:
        return t.astype(_CAST_TARGET[rule])

    raise ValueError(f"unhandled rule {rule}")
