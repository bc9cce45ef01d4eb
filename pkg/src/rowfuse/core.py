"""Row-major matrix containers and layout guards shared by every kernel.

Everything in this library runs on dense 2D row-major buffers. The
containers here are deliberately thin: a flat numpy buffer plus shape,
dtype and layout metadata. Strided views are modeled by a single
`contiguous` flag instead of full stride support; kernels refuse flagged
views up front rather than silently reading memory in the wrong order.

Index arithmetic is always done in Python integers (arbitrary precision),
so buffers whose element count exceeds the signed 32-bit range never see
offset wraparound. `check_index_width` reports which regime a shape is in.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

INT32_MAX = 2**31 - 1


class SizeMismatch(ValueError):
    """Buffer length or dimension does not match the declared shape."""


class ShapeMismatch(ValueError):
    """Two operands disagree on shape (or compute dtype)."""


class NonContiguousInput(ValueError):
    """A kernel received a view flagged non-contiguous.

    The caller must materialize a contiguous copy first. Computing on the
    raw buffer of a strided view reads elements in the wrong order.
    """


class OddHeadDim(ValueError):
    """Rotary embedding requires an even head dimension."""


class TargetOutOfRange(IndexError):
    """A class index falls outside [0, vocab)."""


class DType(enum.Enum):
    """Compute precision of a buffer. No mixed precision within one op call."""

    F32 = "f32"
    F64 = "f64"

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(np.float32) if self is DType.F32 else np.dtype(np.float64)

    @property
    def byte_width(self) -> int:
        return 4 if self is DType.F32 else 8

    @classmethod
    def parse(cls, name: str) -> "DType":
        name = name.strip().lower()
        for member in cls:
            if member.value == name:
                return member
        raise ValueError(f"unknown dtype {name!r}, expected one of: f32, f64")

    @classmethod
    def from_numpy(cls, dt: np.dtype) -> "DType":
        dt = np.dtype(dt)
        if dt == np.float32:
            return cls.F32
        if dt == np.float64:
            return cls.F64
        raise ValueError(f"unsupported numpy dtype {dt}, expected float32 or float64")


class IndexWidth(enum.Enum):
    NARROW32 = "narrow32"
    WIDE64 = "wide64"


def check_index_width(rows: int, cols: int) -> IndexWidth:
    """Classify a shape by whether its last flat offset fits in int32.

    The boundary is exact: a matrix needs 64-bit offsets as soon as
    rows*cols - 1 exceeds 2**31 - 1.
    """
    if rows < 1 or cols < 1:
        raise SizeMismatch(f"rows and cols must be >= 1, got {rows}x{cols}")
    return IndexWidth.WIDE64 if rows * cols - 1 > INT32_MAX else IndexWidth.NARROW32


def flat_offset(row: int, col: int, cols: int) -> int:
    """Flat row-major offset of element (row, col), exact at any size."""
    if col >= cols or row < 0 or col < 0:
        raise SizeMismatch(f"index ({row}, {col}) invalid for row width {cols}")
    return row * cols + col


@dataclass
class Vector:
    """Dense 1D buffer with an explicit compute dtype."""

    data: np.ndarray
    dtype: DType

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 1:
            raise ShapeMismatch(f"Vector needs 1D data, got ndim={self.data.ndim}")
        if self.data.shape[0] < 1:
            raise SizeMismatch("Vector must hold at least one element")
        if self.data.dtype != self.dtype.np_dtype:
            self.data = self.data.astype(self.dtype.np_dtype)

    @classmethod
    def of(cls, values, dtype: DType = DType.F64) -> "Vector":
        return cls(np.asarray(values, dtype=dtype.np_dtype), dtype)

    @property
    def length(self) -> int:
        return self.data.shape[0]


@dataclass
class Matrix2D:
    """rows x cols matrix over a flat row-major buffer.

    `data` holds the physical buffer. When `contiguous` is true, element
    (i, j) lives at flat offset i*cols + j. When false the object models a
    strided view: the logical shape is still rows x cols but the physical
    order is something else, and every kernel must reject it.

    Matrices are immutable by convention once built; the one sanctioned
    exception is cross entropy, which overwrites its logits buffer with
    the gradient in place.
    """

    rows: int
    cols: int
    data: np.ndarray
    dtype: DType
    contiguous: bool = True

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise SizeMismatch(f"rows and cols must be >= 1, got {self.rows}x{self.cols}")
        self.data = np.asarray(self.data)
        if self.data.ndim != 1:
            raise SizeMismatch("Matrix2D data must be a flat 1D buffer")
        if self.data.shape[0] != self.rows * self.cols:
            raise SizeMismatch(
                f"buffer holds {self.data.shape[0]} elements, "
                f"shape {self.rows}x{self.cols} needs {self.rows * self.cols}"
            )
        if self.data.dtype != self.dtype.np_dtype:
            raise SizeMismatch(
                f"buffer dtype {self.data.dtype} does not match declared {self.dtype.value}"
            )

    @classmethod
    def from_rows(cls, rows_data, dtype: DType = DType.F64) -> "Matrix2D":
        arr = np.asarray(rows_data, dtype=dtype.np_dtype)
        if arr.ndim != 2:
            raise ShapeMismatch(f"expected 2D input, got ndim={arr.ndim}")
        return cls(arr.shape[0], arr.shape[1], np.ascontiguousarray(arr).ravel(), dtype)

    @classmethod
    def from_array(cls, arr: np.ndarray, dtype: DType | None = None) -> "Matrix2D":
        """Wrap a 2D numpy array. A non C-contiguous array (a transposed or
        otherwise strided view) is wrapped in physical order and flagged."""
        if arr.ndim != 2:
            raise ShapeMismatch(f"expected 2D array, got ndim={arr.ndim}")
        dt = dtype or DType.from_numpy(arr.dtype)
        if arr.dtype != dt.np_dtype:
            arr = arr.astype(dt.np_dtype)
        if arr.flags.c_contiguous:
            return cls(arr.shape[0], arr.shape[1], arr.reshape(-1), dt)
        # ravel in memory order: keeps the physical layout, flags the lie
        return cls(arr.shape[0], arr.shape[1], arr.ravel(order="K"), dt, contiguous=False)

    @classmethod
    def zeros(cls, rows: int, cols: int, dtype: DType = DType.F64) -> "Matrix2D":
        return cls(rows, cols, np.zeros(rows * cols, dtype=dtype.np_dtype), dtype)

    @property
    def view2d(self) -> np.ndarray:
        """Zero-copy (rows, cols) view. Only meaningful on contiguous buffers."""
        if not self.contiguous:
            raise NonContiguousInput(
                "cannot view a non-contiguous matrix as rows x cols; materialize first"
            )
        return self.data.reshape(self.rows, self.cols)

    @property
    def nbytes(self) -> int:
        return self.rows * self.cols * self.dtype.byte_width

    def row(self, i: int) -> np.ndarray:
        return self.view2d[i]

    def copy(self) -> "Matrix2D":
        return Matrix2D(self.rows, self.cols, self.data.copy(), self.dtype, self.contiguous)


def assert_contiguous(m: Matrix2D) -> None:
    """Reject flagged strided views before any kernel touches the buffer."""
    if not m.contiguous:
        raise NonContiguousInput(
            f"{m.rows}x{m.cols} input is a strided view; materialize a contiguous copy"
        )


def flatten(batch: int, seq: int, hidden: int, buffer) -> Matrix2D:
    """Reinterpret a (batch, seq, hidden) activation buffer as (batch*seq) x hidden.

    Zero-copy: the returned matrix shares storage with `buffer`.
    """
    if batch < 1 or seq < 1 or hidden < 1:
        raise SizeMismatch(f"dimensions must be >= 1, got ({batch}, {seq}, {hidden})")
    arr = np.asarray(buffer)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    if not arr.flags.c_contiguous:
        raise NonContiguousInput("flatten needs a contiguous buffer to reshape in place")
    flat = arr.reshape(-1)
    if flat.shape[0] != batch * seq * hidden:
        raise SizeMismatch(
            f"buffer holds {flat.shape[0]} elements, "
            f"({batch}, {seq}, {hidden}) needs {batch * seq * hidden}"
        )
    return Matrix2D(batch * seq, hidden, flat, DType.from_numpy(arr.dtype))


# CSV fixture format: a name header, one line of shape metadata, then one
# line of values per matrix row. Text keeps fixtures diffable; the float
# formats below round-trip both precisions exactly.

_FLOAT_FMT = {DType.F32: "%.9g", DType.F64: "%.17g"}


def write_matrix_csv(m: Matrix2D, path) -> None:
    assert_contiguous(m)
    fmt = _FLOAT_FMT[m.dtype]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rows", "cols", "dtype"])
        writer.writerow([m.rows, m.cols, m.dtype.value])
        for i in range(m.rows):
            writer.writerow([fmt % v for v in m.row(i)])


def read_matrix_csv(path) -> Matrix2D:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["rows", "cols", "dtype"]:
            raise SizeMismatch(f"bad matrix csv header: {header!r}")
        meta = next(reader, None)
        if meta is None or len(meta) != 3:
            raise SizeMismatch(f"bad matrix csv shape line: {meta!r}")
        rows, cols, dtype = int(meta[0]), int(meta[1]), DType.parse(meta[2])
        out = np.empty((rows, cols), dtype=dtype.np_dtype)
        for i in range(rows):
            line = next(reader, None)
            if line is None or len(line) != cols:
                raise SizeMismatch(f"row {i}: expected {cols} values, got {line!r}")
            out[i] = [float(v) for v in line]
    return Matrix2D(rows, cols, out.reshape(-1), dtype)
