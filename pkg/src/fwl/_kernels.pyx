# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-waveform loops.  Signatures mirror ``fwl._kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, exp, ceil, floor

cnp.import_array()

cdef double MAX_APEX_GAIN = 1.5


cdef inline void _apex(double a, double b, double r, double* d, double* apex) noexcept nogil:
    cdef double la, lb, lr, den
    if a > 0 and r > 0:
        la = log(a); lb = log(b); lr = log(r)
        den = la - 2.0 * lb + lr
        if den < 0:
            d[0] = 0.5 * (la - lr) / den
            apex[0] = exp(lb - 0.25 * (la - lr) * d[0])
            # a sampled Gaussian never overshoots its top sample this much
            if apex[0] <= MAX_APEX_GAIN * b:
                return
    den = a - 2.0 * b + r
    d[0] = 0.5 * (a - r) / den
    apex[0] = b - 0.25 * (a - r) * d[0]


def detect_peaks_batch(const double[:, ::1] x, double threshold):
    """Strict local maxima above ``threshold`` for every row of ``x``.

    Returns (row_index, position, amplitude, fwhm) arrays ordered by row then position.
    """
    cdef Py_ssize_t n = x.shape[0], T = x.shape[1]
    cdef Py_ssize_t i, k, j, cap = 16, count = 0
    cdef double a, b, r, d, apex, half, left, right
    idx = np.empty(cap, dtype=np.int64)
    pos = np.empty(cap, dtype=np.float64)
    amp = np.empty(cap, dtype=np.float64)
    wid = np.empty(cap, dtype=np.float64)
    cdef cnp.int64_t[::1] vi = idx
    cdef double[::1] vp = pos, va = amp, vw = wid
    for i in range(n):
        for k in range(1, T - 1):
            b = x[i, k]
            if b <= threshold:
                continue
            a = x[i, k - 1]
            r = x[i, k + 1]
            if not (b > a and b > r):
                continue
            _apex(a, b, r, &d, &apex)
            half = 0.5 * apex
            j = k
            while j > 0 and x[i, j - 1] >= half:
                j -= 1
            if j == 0:
                left = 0.0
            else:
                left = (j - 1) + (half - x[i, j - 1]) / (x[i, j] - x[i, j - 1])
            j = k
            while j < T - 1 and x[i, j + 1] >= half:
                j += 1
            if j == T - 1:
                right = T - 1.0
            else:
                right = j + (x[i, j] - half) / (x[i, j] - x[i, j + 1])
            if count == cap:
                cap *= 2
                idx = np.resize(idx, cap); pos = np.resize(pos, cap)
                amp = np.resize(amp, cap); wid = np.resize(wid, cap)
                vi = idx; vp = pos; va = amp; vw = wid
            vi[count] = i
            vp[count] = k + d
            va[count] = apex
            vw[count] = right - left
            count += 1
    return idx[:count].copy(), pos[:count].copy(), amp[:count].copy(), wid[:count].copy()


def expand_labels(const cnp.int64_t[::1] pixel, const double[::1] position, const double[::1] width,
                  const cnp.uint8_t[::1] label, Py_ssize_t npix, Py_ssize_t T,
                  unsigned char fill):
    """Paint ``[p - w/2, p + w/2]`` per peak; the smaller position wins contested voxels."""
    out = np.full((npix, T), fill, dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] vo = out
    cdef Py_ssize_t m = position.shape[0], q, t, lo, hi, pix
    order = np.argsort(-np.asarray(position), kind="stable")
    cdef cnp.int64_t[::1] vorder = order.astype(np.int64)
    cdef double p, hw
    for q in range(m):
        pix = pixel[vorder[q]]
        p = position[vorder[q]]
        hw = 0.5 * width[vorder[q]]
        lo = <Py_ssize_t>ceil(p - hw)
        hi = <Py_ssize_t>floor(p + hw)
        if lo < 0:
            lo = 0
        if hi > T - 1:
            hi = T - 1
        for t in range(lo, hi + 1):
            vo[pix, t] = label[vorder[q]]
    return out
