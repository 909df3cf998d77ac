"""Pure-Python/numpy implementation of the SpMM cores.

Mirrors ``_spmm.pyx`` operation for operation (float32 multiply, then
float32 add, blocks in storage order) so outputs match the compiled
backend exactly. Lanes of a column tile are vectorised with numpy; the
tile, row and block loops run in Python.
"""

import numpy as np

FLOW_ALIGNED, FLOW_NAIVE, FLOW_WROS = 0, 1, 2


def _accumulate(acc, indptr, indices, blocks, row, xs):
    n = acc.shape[0]
    for b in range(indptr[row], indptr[row + 1]):
        xv = xs[indices[b]]
        for s in range(n):
            acc[s] += blocks[b, s] * xv


def run_range(flow, indptr, indices, data, n, c_out, x, out, lo, hi, nr):
    copies = epilogue = stores = 0
    blocks = data.reshape(-1, n)
    nrows = indptr.size - 1
    last = c_out - n
    for c0 in range(lo, hi, nr):
        c1 = min(c0 + nr, hi)
        xs = x[:, c0:c1]
        acc = np.zeros((n, c1 - c0), dtype=np.float32)
        if flow == FLOW_ALIGNED:
            for g in range(nrows):
                _accumulate(acc, indptr, indices, blocks, g, xs)
                out[g * n:(g + 1) * n, c0:c1] = acc
                acc[:] = 0
                stores += n
            continue
        for t in range(last + 1):
            _accumulate(acc, indptr, indices, blocks, t, xs)
            if flow == FLOW_NAIVE:
                out[t, c0:c1] = acc[0]
                stores += 1
                if t < last:
                    acc[:-1] = acc[1:].copy()
                    acc[-1] = 0
                    copies += n - 1
                else:
                    out[t + 1:t + n, c0:c1] = acc[1:]
                    epilogue += n - 1
                    stores += n - 1
            else:
                slot = t % n
                out[t, c0:c1] = acc[slot]
                acc[slot] = 0
                stores += 1
        if flow == FLOW_WROS:
            for t in range(last + 1, c_out):
                out[t, c0:c1] = acc[t % n]
            epilogue += n - 1
            stores += n - 1
    return copies, epilogue, stores


spmm_range = run_range
