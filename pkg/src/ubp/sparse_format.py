"""Packed unaligned block-sparse weights (``PackedSparse``) and the ``.ubps`` container.

Blocks are grouped CSR-style by their start row: ``indptr[t]:indptr[t+1]``
addresses the blocks whose first output channel is ``t`` (for the aligned
variant, row ``g`` means start channel ``g * N``). ``indices`` holds the
input channel of each block and ``data`` holds ``N * kh * kw`` floats per
block, one ``kh * kw`` kernel per slot.

Slot order depends on the dataflow:

* ``aligned`` / ``naive``: slot ``s`` holds output channel ``t + s``.
* ``wros``: output channel ``i`` sits in slot ``i mod N``, so the
  accumulator that owns a channel never moves between start rows.

``.ubps`` layout, little-endian::

    b"UBPS" | version u32 = 1 | c_out c_in kh kw u32 | n u32 | dataflow u32 |
    block count u32 | indptr u32[rows + 1] | indices u32[blocks] | data f32[blocks * n * kh * kw]

with ``dataflow`` 0 = aligned, 1 = naive, 2 = wros.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .selection import BlockSelection
from .tensor_io import TensorFormatError, WeightTensor

DATAFLOWS = ("aligned", "naive", "wros")
MAGIC = b"UBPS"
VERSION = 1


class PackError(ValueError):
    pass


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str

    def __str__(self):
        return f"{self.code}: {self.message}"


@dataclass(frozen=True, eq=False)
class PackedSparse:
    c_out: int
    c_in: int
    kh: int
    kw: int
    n: int
    dataflow: str
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        if self.dataflow not in DATAFLOWS:
            raise PackError(f"unknown dataflow {self.dataflow!r}")
        for name, dtype in (("indptr", np.int64), ("indices", np.int64), ("data", np.float32)):
            arr = np.ascontiguousarray(getattr(self, name), dtype=dtype).reshape(-1)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.c_out, self.c_in, self.kh, self.kw)

    @property
    def kernel_size(self) -> int:
        return self.kh * self.kw

    @property
    def nblocks(self) -> int:
        return self.indices.size

    @property
    def nrows(self) -> int:
        """Number of indptr rows: every output channel, or every aligned group."""
        return self.c_out // self.n if self.dataflow == "aligned" else self.c_out

    def start_rows(self) -> np.ndarray:
        """First output channel of every block, in storage order."""
        counts = np.diff(self.indptr)
        if counts.size == 0 or (counts < 0).any():
            raise PackError("indptr is malformed")
        rows = np.repeat(np.arange(counts.size), counts)
        return rows * self.n if self.dataflow == "aligned" else rows

    def blocks(self) -> np.ndarray:
        """Block data as a (blocks, n, kh*kw) view in stored slot order."""
        return self.data.reshape(self.nblocks, self.n, self.kernel_size)

    def rotated_blocks(self) -> int:
        """Blocks whose stored slot order differs from natural order."""
        if self.dataflow != "wros" or self.nblocks == 0:
            return 0
        return int((self.start_rows() % self.n != 0).sum())

    def with_dataflow(self, dataflow: str) -> PackedSparse:
        """Re-lay the block data for another unaligned dataflow; metadata is shared."""
        if dataflow == self.dataflow:
            return self
        if "aligned" in (dataflow, self.dataflow):
            raise PackError("only naive <-> wros conversion is supported")
        natural = _natural_blocks(self)
        return PackedSparse(*self.shape, self.n, dataflow, self.indptr, self.indices,
                            _lay_out(natural, self.start_rows(), self.n, dataflow))


def _slots(start_rows: np.ndarray, n: int) -> np.ndarray:
    # slot that holds natural position s of each block under wros
    return (start_rows[:, None] + np.arange(n)[None, :]) % n


def _lay_out(natural: np.ndarray, start_rows: np.ndarray, n: int, dataflow: str) -> np.ndarray:
    if dataflow != "wros" or natural.shape[0] == 0:
        return natural.reshape(-1)
    out = np.empty_like(natural)
    blk = np.arange(natural.shape[0])[:, None]
    out[blk, _slots(start_rows, n)] = natural
    return out.reshape(-1)


def _natural_blocks(p: PackedSparse) -> np.ndarray:
    stored = p.blocks()
    if p.dataflow != "wros" or p.nblocks == 0:
        return stored.copy()
    blk = np.arange(p.nblocks)[:, None]
    return stored[blk, _slots(p.start_rows(), p.n)]


def pack(w: WeightTensor, sel: BlockSelection, dataflow: str) -> PackedSparse:
    """Gather the kernels covered by ``sel`` into a :class:`PackedSparse`."""
    if dataflow not in DATAFLOWS:
        raise PackError(f"unknown dataflow {dataflow!r}")
    if (sel.c_out, sel.c_in) != (w.c_out, w.c_in):
        raise PackError(f"selection is for a {sel.c_out}x{sel.c_in} layer, weights are {w.c_out}x{w.c_in}")
    n = sel.n
    rows, cols = sel.rows_cols()
    if dataflow == "aligned" and (rows % n != 0).any():
        raise PackError("aligned dataflow requires every block start to be a multiple of N")
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    nrows = w.c_out // n if dataflow == "aligned" else w.c_out
    row_ids = rows // n if dataflow == "aligned" else rows
    indptr = np.zeros(nrows + 1, dtype=np.int64)
    np.cumsum(np.bincount(row_ids, minlength=nrows), out=indptr[1:])
    kernels = w.array().reshape(w.c_out, w.c_in, -1)
    natural = kernels[rows[:, None] + np.arange(n)[None, :], cols[:, None]]
    packed = PackedSparse(*w.shape, n, dataflow, indptr, cols, _lay_out(natural, rows, n, dataflow))
    problems = validate(packed)
    if problems:
        raise PackError("; ".join(map(str, problems)))
    return packed


def validate(p: PackedSparse) -> list[Diagnostic]:
    """Every violated structural invariant of ``p`` (empty list when valid)."""
    out = []
    nrows = p.nrows
    if p.indptr.size != nrows + 1:
        out.append(Diagnostic("indptr-length", f"expected {nrows + 1} entries, got {p.indptr.size}"))
        return out
    if p.indptr[0] != 0:
        out.append(Diagnostic("indptr-start", f"indptr[0] is {p.indptr[0]}, expected 0"))
        return out
    steps = np.diff(p.indptr)
    if (steps < 0).any():
        out.append(Diagnostic("indptr-monotone", f"indptr decreases after row {int(np.argmax(steps < 0))}"))
        return out
    if p.indptr[-1] != p.nblocks:
        out.append(Diagnostic("indptr-total", f"indptr ends at {p.indptr[-1]} but there are {p.nblocks} blocks"))
        return out
    expected = p.nblocks * p.n * p.kernel_size
    if p.data.size != expected:
        out.append(Diagnostic("data-length", f"expected {expected} values, got {p.data.size}"))
    if p.nblocks == 0:
        return out
    bad = (p.indices < 0) | (p.indices >= p.c_in)
    if bad.any():
        out.append(Diagnostic("index-range", f"{int(bad.sum())} input-channel indices outside [0, {p.c_in})"))
    for r in range(nrows):
        seg = p.indices[p.indptr[r]:p.indptr[r + 1]]
        if seg.size > 1 and (np.diff(seg) <= 0).any():
            out.append(Diagnostic("index-order", f"indices of row {r} are not strictly increasing"))
    starts = p.start_rows()
    over = starts + p.n - 1 >= p.c_out
    if over.any():
        out.append(Diagnostic("row-bound", f"{int(over.sum())} blocks run past output channel {p.c_out - 1}"))
    if p.dataflow == "aligned" and (starts % p.n != 0).any():
        out.append(Diagnostic("alignment", "aligned pack holds unaligned starts"))
    order = np.lexsort((starts, p.indices))
    col, row = p.indices[order], starts[order]
    clash = (np.diff(col) == 0) & (np.diff(row) < p.n)
    for at in np.flatnonzero(clash):
        out.append(Diagnostic("overlap", f"blocks at rows {row[at]} and {row[at + 1]} of input channel {col[at]} overlap"))
    return out


def densify(p: PackedSparse) -> WeightTensor:
    """Scatter ``p`` back to a dense tensor (zeros outside the kept blocks)."""
    problems = validate(p)
    if problems:
        raise PackError("; ".join(map(str, problems)))
    out = np.zeros((p.c_out, p.c_in, p.kernel_size), dtype=np.float32)
    if p.nblocks:
        rows = p.start_rows()
        out[rows[:, None] + np.arange(p.n)[None, :], p.indices[:, None]] = _natural_blocks(p)
    return WeightTensor(*p.shape, data=out)


def encode_packed(p: PackedSparse) -> bytes:
    head = MAGIC + struct.pack("<IIIIIIII", VERSION, *p.shape, p.n, DATAFLOWS.index(p.dataflow), p.nblocks)
    return b"".join([
        head,
        p.indptr.astype("<u4").tobytes(),
        p.indices.astype("<u4").tobytes(),
        p.data.astype("<f4").tobytes(),
    ])


def decode_packed(buf: bytes) -> PackedSparse:
    """Parse a ``.ubps`` buffer; framing errors raise TensorFormatError, invariant violations PackError."""
    if buf[:4] != MAGIC:
        raise TensorFormatError("missing UBPS magic")
    if len(buf) < 36:
        raise TensorFormatError("UBPS header truncated")
    version, c_out, c_in, kh, kw, n, flow, nb = struct.unpack_from("<IIIIIIII", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if flow >= len(DATAFLOWS):
        raise TensorFormatError(f"unknown dataflow code {flow}")
    if min(c_out, c_in, kh, kw, n) == 0 or n > c_out:
        raise TensorFormatError("invalid dimensions in UBPS header")
    dataflow = DATAFLOWS[flow]
    nrows = c_out // n if dataflow == "aligned" else c_out
    sizes = (nrows + 1, nb, nb * n * kh * kw)
    if len(buf) != 36 + 4 * sum(sizes):
        raise TensorFormatError(f"UBPS payload is {len(buf) - 36} bytes, expected {4 * sum(sizes)}")
    pos = 36
    indptr = np.frombuffer(buf, "<u4", sizes[0], pos)
    pos += 4 * sizes[0]
    indices = np.frombuffer(buf, "<u4", sizes[1], pos)
    pos += 4 * sizes[1]
    data = np.frombuffer(buf, "<f4", sizes[2], pos)
    p = PackedSparse(c_out, c_in, kh, kw, n, dataflow, indptr, indices, data)
    problems = validate(p)
    if problems:
        raise PackError("; ".join(map(str, problems)))
    return p


def store_packed(p: PackedSparse, path) -> None:
    Path(path).write_bytes(encode_packed(p))


def load_packed(path) -> PackedSparse:
    return decode_packed(Path(path).read_bytes())
