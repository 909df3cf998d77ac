"""Sparse x dense products for 1x1 convolutions under three dataflows.

``O = W_sparse @ I`` with ``W`` packed as :class:`~ubp.sparse_format.PackedSparse`
and ``I`` a (c_in, cols) :class:`~ubp.tensor_io.ActivationMatrix`.

Every kernel walks column tiles of width ``nr`` outermost and block start
rows innermost, accumulating into an ``N x nr`` register file:

* ``spmm_abp`` steps N rows at a time and stores the whole file per step.
* ``spmm_ubp_naive`` steps one row at a time; after each row it stores the
  first accumulator row and shifts the rest down (``N - 1`` register copies).
* ``spmm_ubp_wros`` steps one row at a time on rotated weights, so output
  channel ``r`` always accumulates in slot ``r mod N``; only that slot is
  stored, and an epilogue flushes the last ``N - 1`` rows of each strip.

The compiled backend (``_spmm``, Cython, GIL released) is used when it imports;
otherwise, or with ``UBP_PURE_PYTHON=1``, the numpy fallback runs. Both
produce bit-identical outputs and counters.
"""

from __future__ import annotations

import importlib
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..sparse_format import PackedSparse, densify
from ..tensor_io import ActivationMatrix, WeightTensor
from . import _spmm_py


def _load_backends():
    found = {"python": _spmm_py}
    try:
        found["cython"] = importlib.import_module("._spmm", __name__)
    except ImportError:
        pass
    return found


BACKENDS = _load_backends()
BACKEND = "cython" if "cython" in BACKENDS and not os.environ.get("UBP_PURE_PYTHON") else "python"

_FLOW_CODES = {"aligned": 0, "naive": 1, "wros": 2}


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class TileConfig:
    mr: int | None = None  # output rows per tile; always the block size N
    nr: int = 64  # tile width in output columns; one strip per thread at 196 cols x 4 threads
    threads: int = 1

    def __post_init__(self):
        if self.nr < 1:
            raise KernelError(f"nr must be >= 1, got {self.nr}")
        if self.threads < 1:
            raise KernelError(f"threads must be >= 1, got {self.threads}")


@dataclass(frozen=True, eq=False)
class KernelReport:
    output: ActivationMatrix
    register_copies: int = 0
    epilogue_stores: int = 0
    row_stores: int = 0
    elapsed: float = 0.0
    flops: int = 0
    column_tiles: int = 0

    @property
    def gflops(self) -> float:
        return self.flops / self.elapsed / 1e9 if self.elapsed > 0 else 0.0

    def counters(self) -> dict:
        return {
            "register_copies": self.register_copies,
            "epilogue_stores": self.epilogue_stores,
            "row_stores": self.row_stores,
            "column_tiles": self.column_tiles,
        }


def dense_ref(w: WeightTensor, i: ActivationMatrix) -> ActivationMatrix:
    """Dense float32 product accumulated over input rows in ascending order.

    For ``kh * kw > 1`` the input is read as an im2col matrix with
    ``c_in * kh * kw`` rows, row ``(j * kh + y) * kw + x``.
    """
    k = w.c_in * w.kernel_size
    if i.rows != k:
        raise KernelError(f"weights expect {k} input rows, activation has {i.rows}")
    w2 = w.data.reshape(w.c_out, k)
    x = i.array()
    out = np.zeros((w.c_out, i.cols), dtype=np.float32)
    for j in range(k):
        out += w2[:, j, None] * x[j]
    return ActivationMatrix(w.c_out, i.cols, out)


def column_bounds(cols: int, parts: int) -> np.ndarray:
    """Contiguous split of ``cols`` into ``parts`` ranges (some empty if parts > cols)."""
    if parts < 1:
        raise KernelError(f"parts must be >= 1, got {parts}")
    return np.array([p * cols // parts for p in range(parts + 1)], dtype=np.int64)


_pool = None
_pool_lock = threading.Lock()


def _get_pool(workers: int) -> ThreadPoolExecutor:
    global _pool
    with _pool_lock:
        if _pool is None or _pool._max_workers < workers:
            old, _pool = _pool, ThreadPoolExecutor(max_workers=workers, thread_name_prefix="ubp-spmm")
            if old is not None:
                old.shutdown(wait=False)
        return _pool


def _check_bounds(p: PackedSparse) -> None:
    # the compiled cores index raw buffers, so refuse anything that would read out of range
    ip = p.indptr
    if ip.size != p.nrows + 1 or ip[0] != 0 or (np.diff(ip) < 0).any() or ip[-1] != p.nblocks:
        raise KernelError("malformed indptr; run sparse_format.validate for details")
    if p.data.size != p.nblocks * p.n * p.kernel_size:
        raise KernelError("block data length does not match the block count")
    if p.nblocks and (p.indices.min() < 0 or p.indices.max() >= p.c_in):
        raise KernelError("input-channel index out of range")


def _execute(p: PackedSparse, i: ActivationMatrix, flow: str, cfg: TileConfig | None,
             parts: int | None, backend: str | None) -> KernelReport:
    cfg = cfg or TileConfig()
    parts = cfg.threads if parts is None else parts
    if p.dataflow != flow:
        raise KernelError(f"kernel expects a {flow!r} pack, got {p.dataflow!r}")
    if cfg.mr is not None and cfg.mr != p.n:
        raise KernelError(f"tile height {cfg.mr} must equal the block size {p.n}")
    if p.kernel_size > 1:
        t0 = time.perf_counter()
        out = dense_ref(densify(p), i)
        return KernelReport(out, elapsed=time.perf_counter() - t0,
                            flops=2 * p.nblocks * p.n * p.kernel_size * i.cols)
    if i.rows != p.c_in:
        raise KernelError(f"pack expects {p.c_in} input rows, activation has {i.rows}")
    _check_bounds(p)
    impl = BACKENDS[backend or BACKEND]
    bounds = column_bounds(i.cols, parts)
    x = np.ascontiguousarray(i.array())
    out = np.zeros((p.c_out, i.cols), dtype=np.float32)
    indptr = np.ascontiguousarray(p.indptr, dtype=np.int64)
    indices = np.ascontiguousarray(p.indices, dtype=np.int64)
    code = _FLOW_CODES[flow]

    def work(part):
        return impl.spmm_range(code, indptr, indices, p.data, p.n, p.c_out, x, out,
                               int(bounds[part]), int(bounds[part + 1]), cfg.nr)

    t0 = time.perf_counter()
    if parts == 1:
        counters = [work(0)]
    else:
        # the calling thread takes part 0 while the pool runs the rest
        futures = [_get_pool(parts - 1).submit(work, k) for k in range(1, parts)]
        counters = [work(0)] + [f.result() for f in futures]
    elapsed = time.perf_counter() - t0
    totals = np.sum(counters, axis=0)
    widths = np.diff(bounds)
    tiles = int(((widths + cfg.nr - 1) // cfg.nr).sum())
    return KernelReport(
        ActivationMatrix(p.c_out, i.cols, out),
        register_copies=int(totals[0]),
        epilogue_stores=int(totals[1]),
        row_stores=int(totals[2]),
        elapsed=elapsed,
        flops=2 * p.nblocks * p.n * i.cols,
        column_tiles=tiles,
    )


def spmm_abp(p: PackedSparse, i: ActivationMatrix, cfg: TileConfig | None = None,
             backend: str | None = None) -> KernelReport:
    return _execute(p, i, "aligned", cfg, None, backend)


def spmm_ubp_naive(p: PackedSparse, i: ActivationMatrix, cfg: TileConfig | None = None,
                   backend: str | None = None) -> KernelReport:
    return _execute(p, i, "naive", cfg, None, backend)


def spmm_ubp_wros(p: PackedSparse, i: ActivationMatrix, cfg: TileConfig | None = None,
                  backend: str | None = None) -> KernelReport:
    return _execute(p, i, "wros", cfg, None, backend)


KERNELS = {"aligned": spmm_abp, "naive": spmm_ubp_naive, "wros": spmm_ubp_wros}
_KERNEL_FLOW = {fn: flow for flow, fn in KERNELS.items()}


def run_threaded(kernel, p: PackedSparse, i: ActivationMatrix, parts: int,
                 cfg: TileConfig | None = None, backend: str | None = None) -> KernelReport:
    """Run ``kernel`` with output columns split into ``parts`` contiguous ranges, one worker each.

    Workers share the pack and input read-only and own disjoint output
    columns; counters are summed after the join.
    """
    if kernel not in _KERNEL_FLOW:
        raise KernelError(f"{kernel!r} is not one of the sparse kernels")
    return _execute(p, i, _KERNEL_FLOW[kernel], cfg, parts, backend)


def run(p: PackedSparse, i: ActivationMatrix, cfg: TileConfig | None = None,
        backend: str | None = None) -> KernelReport:
    """Dispatch on the pack's dataflow tag."""
    return KERNELS[p.dataflow](p, i, cfg, backend)


def relative_error(out: ActivationMatrix, ref: ActivationMatrix) -> float:
    """``max|out - ref| / max|ref|`` (0 when both are exactly zero)."""
    a, b = out.array().astype(np.float64), ref.array().astype(np.float64)
    diff = float(np.abs(a - b).max(initial=0.0))
    scale = float(np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / scale
