# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel core.

Bit-identical mirror of ``specache._kernels_py``; see that module's
docstring for the numeric contract.  Keep op order in lockstep with the
pure version; the build disables FMA contraction for the same reason.
"""

from libc.math cimport exp

import numpy as np

BACKEND_NAME = "compiled"

ctypedef unsigned long long u64

cdef u64 _M64 = 0xFFFFFFFFFFFFFFFFULL
cdef u64 _GAMMA = 0x9E3779B97F4A7C15ULL
cdef u64 _MIX_C1 = 0xBF58476D1CE4E5B9ULL
cdef u64 _MIX_C2 = 0x94D049BB133111EBULL
cdef u64 _SEED_SALT = 0xD1B54A32D192ED03ULL
cdef double _INV_2_53 = 1.0 / 9007199254740992.0
cdef double _NEG_INF = float("-inf")


cdef inline u64 _mix64(u64 z) noexcept nogil:
    z = (z ^ (z >> 30)) * _MIX_C1
    z = (z ^ (z >> 27)) * _MIX_C2
    return z ^ (z >> 31)


cdef inline double _to_unit(u64 v) noexcept nogil:
    return <double> (v >> 11) * _INV_2_53


cdef u64 _stream_state(object seed, tuple tail):
    cdef u64 s = _mix64((<u64> (seed & 0xFFFFFFFFFFFFFFFF)) + _SEED_SALT)
    cdef object t
    for t in tail:
        s = _mix64(s ^ _mix64(<u64> (t + 1)))
    return s


def kgram_dist(object seed, object seed2, double mix_weight, tuple tail,
               int vocab_size, double sharpness, double temperature):
    """See ``_kernels_py.kgram_dist``."""
    cdef int n = vocab_size
    cdef u64 s1 = _stream_state(seed, tail)
    cdef u64 s2
    cdef int i, best
    cdef double a, v, e, z, m, best_v

    u_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] u = u_arr
    for i in range(n):
        u[i] = _to_unit(_mix64(s1 + (<u64> (i + 1)) * _GAMMA))
    if mix_weight != 0.0:
        s2 = _stream_state(seed2, tail)
        for i in range(n):
            u[i] = u[i] + mix_weight * _to_unit(_mix64(s2 + (<u64> (i + 1)) * _GAMMA))

    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr

    if temperature == 0.0:
        best = 0
        best_v = sharpness * u[0]
        for i in range(1, n):
            a = sharpness * u[i]
            if a > best_v:
                best_v = a
                best = i
        for i in range(n):
            out[i] = 0.0
        out[best] = 1.0
        return out_arr

    b_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] b = b_arr
    m = _NEG_INF
    for i in range(n):
        v = (sharpness * u[i]) / temperature
        b[i] = v
        if v > m:
            m = v
    z = 0.0
    for i in range(n):
        e = exp(b[i] - m)
        b[i] = e
        z = z + e
    for i in range(n):
        out[i] = b[i] / z
    return out_arr


def rows_topk(object dists, int k):
    """See ``_kernels_py.rows_topk``."""
    d_arr = np.ascontiguousarray(dists, dtype=np.float64)
    cdef const double[:, ::1] d = d_arr
    cdef Py_ssize_t nrows = d.shape[0]
    cdef Py_ssize_t ncols = d.shape[1]
    cdef Py_ssize_t kk = k if k < ncols else ncols
    cdef Py_ssize_t i, t, j, pos, m_sz
    cdef double p

    out = []
    if kk <= 0:
        for i in range(nrows):
            out.append([])
        return out

    pbuf_arr = np.empty(kk, dtype=np.float64)
    tbuf_arr = np.empty(kk, dtype=np.int64)
    cdef double[::1] pbuf = pbuf_arr
    cdef long long[::1] tbuf = tbuf_arr

    for i in range(nrows):
        m_sz = 0
        for t in range(ncols):
            p = d[i, t]
            if p <= 0.0:
                continue
            # entries rank by (p desc, token asc); scan order makes ties
            # resolve to the earlier (lower) token automatically
            pos = m_sz
            for j in range(m_sz):
                if pbuf[j] < p:
                    pos = j
                    break
            if pos >= kk:
                continue
            j = m_sz if m_sz < kk else kk - 1
            while j > pos:
                pbuf[j] = pbuf[j - 1]
                tbuf[j] = tbuf[j - 1]
                j -= 1
            pbuf[pos] = p
            tbuf[pos] = t
            if m_sz < kk:
                m_sz += 1
        row = []
        for j in range(m_sz):
            row.append((int(tbuf[j]), pbuf[j]))
        out.append(row)
    return out
