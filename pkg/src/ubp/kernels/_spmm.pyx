# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled SpMM cores for the aligned, naive-unaligned and WROS dataflows.

The accumulator file is an ``n x nr`` float buffer per call. Arithmetic is
single precision with one rounding per multiply and per add, in the same
order as the pure-Python fallback, so both backends agree bit for bit.
``spmm_range`` releases the GIL; the caller supplies the threads.
"""

from libc.stdlib cimport malloc, free

cdef enum:
    FLOW_ALIGNED = 0
    FLOW_NAIVE = 1
    FLOW_WROS = 2


cdef inline void _accumulate(const long long* indptr, const long long* indices,
                             const float* data, const float* x, Py_ssize_t ldx,
                             float* acc, Py_ssize_t row, Py_ssize_t n, Py_ssize_t nr,
                             Py_ssize_t w) noexcept nogil:
    cdef Py_ssize_t b, s, c
    cdef const float* xrow
    cdef const float* wb
    cdef float* a
    cdef float* a1
    cdef float* a2
    cdef float* a3
    cdef float ws, w1, w2, w3, xv
    for b in range(indptr[row], indptr[row + 1]):
        xrow = x + indices[b] * ldx
        wb = data + b * n
        if n == 4:
            # common case: load each input lane once for all four rows
            a, a1, a2, a3 = acc, acc + nr, acc + 2 * nr, acc + 3 * nr
            ws, w1, w2, w3 = wb[0], wb[1], wb[2], wb[3]
            for c in range(w):
                xv = xrow[c]
                a[c] = a[c] + ws * xv
                a1[c] = a1[c] + w1 * xv
                a2[c] = a2[c] + w2 * xv
                a3[c] = a3[c] + w3 * xv
        elif n == 2:
            a, a1 = acc, acc + nr
            ws, w1 = wb[0], wb[1]
            for c in range(w):
                xv = xrow[c]
                a[c] = a[c] + ws * xv
                a1[c] = a1[c] + w1 * xv
        else:
            for s in range(n):
                ws = wb[s]
                a = acc + s * nr
                for c in range(w):
                    a[c] = a[c] + ws * xrow[c]


cdef inline void _store(float* dst, float* src, Py_ssize_t w, bint clear) noexcept nogil:
    cdef Py_ssize_t c
    for c in range(w):
        dst[c] = src[c]
    if clear:
        for c in range(w):
            src[c] = 0.0


cdef int _run_range(int flow, const long long* indptr, Py_ssize_t nrows, const long long* indices,
                    const float* data, Py_ssize_t n, Py_ssize_t c_out,
                    const float* x, float* out, Py_ssize_t ld,
                    Py_ssize_t lo, Py_ssize_t hi, Py_ssize_t nr,
                    long long* copies, long long* epilogue, long long* stores) noexcept nogil:
    cdef Py_ssize_t c0, w, t, s, c, g, last, slot
    cdef float* a
    cdef float* acc = <float*> malloc(n * nr * sizeof(float))
    if acc == NULL:
        return -1
    c0 = lo
    while c0 < hi:
        w = nr if hi - c0 > nr else hi - c0
        for c in range(n * nr):
            acc[c] = 0.0
        if flow == FLOW_ALIGNED:
            for g in range(nrows):
                _accumulate(indptr, indices, data, x + c0, ld, acc, g, n, nr, w)
                for s in range(n):
                    _store(out + (g * n + s) * ld + c0, acc + s * nr, w, True)
                stores[0] += n
        else:
            last = c_out - n
            slot = 0  # t mod n, kept incrementally to stay off the divider
            for t in range(last + 1):
                _accumulate(indptr, indices, data, x + c0, ld, acc, t, n, nr, w)
                if flow == FLOW_NAIVE:
                    _store(out + t * ld + c0, acc, w, False)
                    stores[0] += 1
                    if t < last:
                        # shift the register file down one row
                        for s in range(n - 1):
                            a = acc + s * nr
                            for c in range(w):
                                a[c] = a[c + nr]
                        a = acc + (n - 1) * nr
                        for c in range(w):
                            a[c] = 0.0
                        copies[0] += n - 1
                    else:
                        for s in range(1, n):
                            _store(out + (t + s) * ld + c0, acc + s * nr, w, False)
                        epilogue[0] += n - 1
                        stores[0] += n - 1
                else:
                    _store(out + t * ld + c0, acc + slot * nr, w, True)
                    stores[0] += 1
                    slot += 1
                    if slot == n:
                        slot = 0
            if flow == FLOW_WROS:
                for t in range(last + 1, c_out):
                    _store(out + t * ld + c0, acc + slot * nr, w, False)
                    slot += 1
                    if slot == n:
                        slot = 0
                epilogue[0] += n - 1
                stores[0] += n - 1
        c0 += nr
    free(acc)
    return 0


def spmm_range(int flow, const long long[::1] indptr, const long long[::1] indices,
               const float[::1] data, Py_ssize_t n, Py_ssize_t c_out,
               const float[:, ::1] x, float[:, ::1] out,
               Py_ssize_t lo, Py_ssize_t hi, Py_ssize_t nr):
    """Run one dataflow over output columns ``lo:hi``.

    Returns ``(register_copies, epilogue_stores, row_stores)``.
    """
    cdef long long copies = 0, epilogue = 0, stores = 0
    cdef int rc
    cdef const long long* ip = &indptr[0]
    cdef const long long* ix = &indices[0] if indices.shape[0] else NULL
    cdef const float* dp = &data[0] if data.shape[0] else NULL
    if hi <= lo:
        return 0, 0, 0
    with nogil:
        rc = _run_range(flow, ip, indptr.shape[0] - 1, ix, dp, n, c_out,
                        &x[0, 0], &out[0, 0], x.shape[1], lo, hi, nr,
                        &copies, &epilogue, &stores)
    if rc:
        raise MemoryError("could not allocate the accumulator buffer")
    return copies, epilogue, stores
