# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled neighbour-search and gather/scatter kernels.

The pair builders work on linearized coordinates ``((b*S0 + c0)*S1 + c1)...``
held in an open-addressing hash table. Results must match ``_fallback``
exactly, row for row.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, uint64_t

cnp.import_array()

DEF MAXD = 4


cdef inline uint64_t _mix(int64_t key) nogil:
    cdef uint64_t z = <uint64_t>key
    z = (z ^ (z >> 30)) * <uint64_t>0xbf58476d1ce4e5b9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94d049bb133111ebULL
    return z ^ (z >> 31)


cdef class _Table:
    cdef int64_t[::1] keys
    cdef int64_t[::1] vals
    cdef uint64_t mask
    cdef int64_t size

    def __cinit__(self, int64_t n):
        cdef int64_t cap = 16
        while cap < 2 * n + 1:
            cap <<= 1
        self.keys = np.full(cap, -1, dtype=np.int64)
        self.vals = np.empty(cap, dtype=np.int64)
        self.mask = <uint64_t>(cap - 1)
        self.size = 0

    cdef inline int64_t find(self, int64_t key) nogil:
        cdef uint64_t h = _mix(key) & self.mask
        while True:
            if self.keys[h] == key:
                return self.vals[h]
            if self.keys[h] == -1:
                return -1
            h = (h + 1) & self.mask

    cdef inline int64_t insert(self, int64_t key, int64_t val) nogil:
        """Insert if absent; return the stored value."""
        cdef uint64_t h = _mix(key) & self.mask
        while True:
            if self.keys[h] == key:
                return self.vals[h]
            if self.keys[h] == -1:
                self.keys[h] = key
                self.vals[h] = val
                self.size += 1
                return val
            h = (h + 1) & self.mask


def subm_pairs(const int[:, ::1] coords, shape, kernel_dims):
    """Pairs ``(in_row, out_row)`` per kernel offset for a stride-1 conv
    whose output set equals the input set."""
    cdef Py_ssize_t n = coords.shape[0]
    cdef int d = coords.shape[1]
    cdef int nsp = d - 1
    cdef int a, o
    cdef Py_ssize_t j
    cdef int64_t ext[MAXD]
    cdef int kd[MAXD]
    cdef int off[MAXD]
    cdef int64_t key, i, c, cnt = 0
    cdef int nk = 1
    cdef bint ok

    for a in range(nsp):
        ext[a] = shape[a]
        kd[a] = kernel_dims[a]
        nk *= kd[a]

    cdef _Table table = _Table(n)
    for j in range(n):
        key = coords[j, 0]
        for a in range(nsp):
            key = key * ext[a] + coords[j, a + 1]
        table.insert(key, j)

    in_np = np.empty(n * nk, dtype=np.int64)
    out_np = np.empty(n * nk, dtype=np.int64)
    ptr_np = np.zeros(nk + 1, dtype=np.int64)
    cdef int64_t[::1] in_rows = in_np
    cdef int64_t[::1] out_rows = out_np
    cdef int64_t[::1] ptr = ptr_np

    with nogil:
        for o in range(nk):
            # row-major decomposition of o into centered per-axis offsets
            c = o
            for a in range(nsp - 1, -1, -1):
                off[a] = <int>(c % kd[a]) - kd[a] // 2
                c = c // kd[a]
            for j in range(n):
                key = coords[j, 0]
                ok = True
                for a in range(nsp):
                    c = coords[j, a + 1] + off[a]
                    if c < 0 or c >= ext[a]:
                        ok = False
                        break
                    key = key * ext[a] + c
                if not ok:
                    continue
                i = table.find(key)
                if i >= 0:
                    in_rows[cnt] = i
                    out_rows[cnt] = j
                    cnt += 1
            ptr[o + 1] = cnt
    return in_np[:cnt].copy(), out_np[:cnt].copy(), ptr_np


def strided_candidates(const int[:, ::1] coords, out_shape, kernel_dims, stride, pad):
    """Every (offset, input row, output site) incidence of a regular conv.

    Output sites are returned as linear keys in first-seen order together
    with the pair list (offset-major, input rows ascending) that references
    them by that first-seen index.
    """
    cdef Py_ssize_t n = coords.shape[0]
    cdef int d = coords.shape[1]
    cdef int nsp = d - 1
    cdef int a, o
    cdef Py_ssize_t i
    cdef int64_t oext[MAXD]
    cdef int kd[MAXD]
    cdef int st[MAXD]
    cdef int pd[MAXD]
    cdef int kk[MAXD]
    cdef int64_t key, c, t, q, cnt = 0, nout = 0, jj
    cdef int nk = 1
    cdef bint ok

    for a in range(nsp):
        oext[a] = out_shape[a]
        kd[a] = kernel_dims[a]
        st[a] = stride[a]
        pd[a] = pad[a]
        nk *= kd[a]

    cdef _Table table = _Table(n * 2)
    # worst case one output per (row, offset); grown on demand below
    cdef Py_ssize_t cap = max(n * 2, 16)
    keys_np = np.empty(cap, dtype=np.int64)
    cdef int64_t[::1] okeys = keys_np
    in_np = np.empty(n * nk, dtype=np.int64)
    out_np = np.empty(n * nk, dtype=np.int64)
    ptr_np = np.zeros(nk + 1, dtype=np.int64)
    cdef int64_t[::1] in_rows = in_np
    cdef int64_t[::1] out_rows = out_np
    cdef int64_t[::1] ptr = ptr_np

    for o in range(nk):
        c = o
        for a in range(nsp - 1, -1, -1):
            kk[a] = <int>(c % kd[a])
            c = c // kd[a]
        for i in range(n):
            key = coords[i, 0]
            ok = True
            for a in range(nsp):
                t = coords[i, a + 1] + pd[a] - kk[a]
                if t < 0 or t % st[a] != 0:
                    ok = False
                    break
                q = t // st[a]
                if q >= oext[a]:
                    ok = False
                    break
                key = key * oext[a] + q
            if not ok:
                continue
            jj = table.insert(key, nout)
            if jj == nout:
                if nout == cap:
                    cap *= 2
                    keys_np = np.resize(keys_np, cap)
                    okeys = keys_np
                    # table capacity was sized for 2n entries; rebuild when exceeded
                okeys[nout] = key
                nout += 1
                if table.size * 2 > <int64_t>(table.mask + 1):
                    table = _rehash(table, okeys, nout)
            in_rows[cnt] = i
            out_rows[cnt] = jj
            cnt += 1
        ptr[o + 1] = cnt
    return keys_np[:nout].copy(), in_np[:cnt].copy(), out_np[:cnt].copy(), ptr_np


cdef _Table _rehash(_Table old, int64_t[::1] okeys, int64_t nout):
    cdef _Table table = _Table(nout * 2)
    cdef int64_t j
    for j in range(nout):
        table.insert(okeys[j], j)
    return table


ctypedef fused real_t:
    float
    double


def scatter_add(real_t[:, ::1] out, const int64_t[::1] rows, const float[:, ::1] vals):
    """``out[rows[r]] += vals[r]``; ``rows`` must not repeat."""
    cdef Py_ssize_t r, c, dst
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t m = vals.shape[1]
    with nogil:
        for r in range(n):
            dst = rows[r]
            for c in range(m):
                out[dst, c] += vals[r, c]


def gather_rows(const float[:, ::1] src, const int64_t[::1] rows, float[:, ::1] out):
    """``out[:len(rows)] = src[rows]``."""
    cdef Py_ssize_t r, c, s
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t m = src.shape[1]
    with nogil:
        for r in range(n):
            s = rows[r]
            for c in range(m):
                out[r, c] = src[s, c]


def segment_max(const float[:, ::1] vals, const int64_t[::1] order, const int64_t[::1] starts):
    """Row-wise max of ``vals[order]`` over the segments beginning at ``starts``."""
    cdef Py_ssize_t g, r, c, a, b, src
    cdef Py_ssize_t ng = starts.shape[0]
    cdef Py_ssize_t n = order.shape[0]
    cdef Py_ssize_t m = vals.shape[1]
    out_np = np.empty((ng, m), dtype=np.float32)
    cdef float[:, ::1] out = out_np
    cdef float v
    with nogil:
        for g in range(ng):
            a = starts[g]
            b = starts[g + 1] if g + 1 < ng else n
            src = order[a]
            for c in range(m):
                out[g, c] = vals[src, c]
            for r in range(a + 1, b):
                src = order[r]
                for c in range(m):
                    v = vals[src, c]
                    if v > out[g, c]:
                        out[g, c] = v
    return out_np
