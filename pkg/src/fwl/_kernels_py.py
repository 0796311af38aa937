"""Pure-Python/numpy implementations of the compiled kernels in ``_kernels.pyx``."""
import math

import numpy as np

MAX_APEX_GAIN = 1.5


def _apex(a, b, r):
    if a > 0 and r > 0:
        la, lb, lr = math.log(a), math.log(b), math.log(r)
        den = la - 2.0 * lb + lr
        if den < 0:
            d = 0.5 * (la - lr) / den
            apex = math.exp(lb - 0.25 * (la - lr) * d)
            # a sampled Gaussian never overshoots its top sample this much
            if apex <= MAX_APEX_GAIN * b:
                return d, apex
    den = a - 2.0 * b + r
    d = 0.5 * (a - r) / den
    return d, b - 0.25 * (a - r) * d


def detect_peaks_batch(x, threshold):
    x = np.ascontiguousarray(x, dtype=np.float64)
    n, T = x.shape
    if T < 3:
        z = np.zeros(0)
        return z.astype(np.int64), z, z.copy(), z.copy()
    mid = x[:, 1:-1]
    hit = (mid > threshold) & (mid > x[:, :-2]) & (mid > x[:, 2:])
    rows, ks = np.nonzero(hit)
    ks = ks + 1
    pos = np.empty(rows.size)
    amp = np.empty(rows.size)
    wid = np.empty(rows.size)
    for q, (i, k) in enumerate(zip(rows.tolist(), ks.tolist())):
        w = x[i]
        d, apex = _apex(w[k - 1], w[k], w[k + 1])
        half = 0.5 * apex
        j = k
        while j > 0 and w[j - 1] >= half:
            j -= 1
        left = 0.0 if j == 0 else (j - 1) + (half - w[j - 1]) / (w[j] - w[j - 1])
        j = k
        while j < T - 1 and w[j + 1] >= half:
            j += 1
        right = T - 1.0 if j == T - 1 else j + (w[j] - half) / (w[j] - w[j + 1])
        pos[q] = k + d
        amp[q] = apex
        wid[q] = right - left
    return rows.astype(np.int64), pos, amp, wid


def expand_labels(pixel, position, width, label, npix, T, fill):
    out = np.full((npix, T), fill, dtype=np.uint8)
    position = np.asarray(position, dtype=np.float64)
    order = np.argsort(-position, kind="stable")
    for q in order:
        p = position[q]
        hw = 0.5 * width[q]
        lo = max(int(math.ceil(p - hw)), 0)
        hi = min(int(math.floor(p + hw)), T - 1)
        if hi >= lo:
            out[pixel[q], lo:hi + 1] = label[q]
    return out
