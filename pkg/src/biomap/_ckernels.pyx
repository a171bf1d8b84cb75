# cython: language_level=3
"""Compiled per-cell kernels.

Loop order mirrors ``_kernels_py`` exactly (sequential over species/inputs,
double accumulators, no FMA contraction), so both backends return
bit-identical arrays.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def affine(const double[:, ::1] x, const double[:, ::1] weight, const double[::1] bias):
    cdef Py_ssize_t n = x.shape[0], n_in = x.shape[1], n_out = weight.shape[0]
    cdef Py_ssize_t i, j, o
    cdef double xv
    out = np.empty((n, n_out), dtype=np.float64)
    cdef double[:, ::1] res = out
    with nogil:
        for i in range(n):
            for o in range(n_out):
                res[i, o] = bias[o]
            for j in range(n_in):
                xv = x[i, j]
                for o in range(n_out):
                    res[i, o] = res[i, o] + xv * weight[o, j]
    return out


def count_moments(const double[:, ::1] probs, const long long[::1] species):
    cdef Py_ssize_t n = probs.shape[0], m = species.shape[0]
    cdef Py_ssize_t i, k
    cdef double p, acc_m, acc_v
    mean = np.empty(n, dtype=np.float64)
    var = np.empty(n, dtype=np.float64)
    cdef double[::1] mv = mean
    cdef double[::1] vv = var
    with nogil:
        for i in range(n):
            acc_m = 0.0
            acc_v = 0.0
            for k in range(m):
                p = probs[i, species[k]]
                acc_m = acc_m + p
                acc_v = acc_v + p * (1.0 - p)
            mv[i] = acc_m
            vv[i] = acc_v
    return mean, var


def at_least_one(const double[:, ::1] probs, const long long[::1] species):
    cdef Py_ssize_t n = probs.shape[0], m = species.shape[0]
    cdef Py_ssize_t i, k
    cdef double absent
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            absent = 1.0
            for k in range(m):
                absent = absent * (1.0 - probs[i, species[k]])
            ov[i] = 1.0 - absent
    return out


def max_status(const double[:, ::1] probs, const double[::1] thresholds,
               const long long[::1] ranks):
    cdef Py_ssize_t n = probs.shape[0], n_sp = probs.shape[1]
    cdef Py_ssize_t i, s
    cdef long long best
    out = np.empty(n, dtype=np.int64)
    cdef long long[::1] ov = out
    with nogil:
        for i in range(n):
            best = -1
            for s in range(n_sp):
                if ranks[s] > best and probs[i, s] >= thresholds[s]:
                    best = ranks[s]
            ov[i] = best
    return out


def habitat_scores(const unsigned char[:, ::1] present, const double[:, ::1] log_rates,
                   const double[::1] log_prior):
    cdef Py_ssize_t n = present.shape[0], n_sp = present.shape[1]
    cdef Py_ssize_t n_h = log_rates.shape[0]
    cdef Py_ssize_t i, s, h
    out = np.empty((n, n_h), dtype=np.float64)
    cdef double[:, ::1] sv = out
    with nogil:
        for i in range(n):
            for h in range(n_h):
                sv[i, h] = log_prior[h]
            for s in range(n_sp):
                if present[i, s]:
                    for h in range(n_h):
                        sv[i, h] = sv[i, h] + log_rates[h, s]
    return out


def nearest_land(mask):
    """Expanding square-ring search; exact integer distances, row-major ties."""
    cdef cnp.uint8_t[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1]
    cdef Py_ssize_t r, c, rad, rr, cc, k, side
    cdef long long best_d2, d2, best_idx, idx
    if not np.any(mask):
        raise ValueError("mask has no land cells")
    out = np.arange(h * w, dtype=np.int64)
    cdef long long[::1] ov = out
    cdef Py_ssize_t max_rad = h if h > w else w
    with nogil:
        for r in range(h):
            for c in range(w):
                if m[r, c]:
                    continue
                best_d2 = -1
                best_idx = -1
                rad = 1
                while rad <= max_rad:
                    if best_d2 >= 0 and <long long>rad * rad > best_d2:
                        break
                    side = 2 * rad + 1
                    for k in range(side):
                        # top and bottom edges of the ring
                        cc = c - rad + k
                        if 0 <= cc < w:
                            rr = r - rad
                            if rr >= 0 and m[rr, cc]:
                                d2 = (r - rr) * (r - rr) + (c - cc) * (c - cc)
                                idx = rr * w + cc
                                if best_d2 < 0 or d2 < best_d2 or (d2 == best_d2 and idx < best_idx):
                                    best_d2 = d2
                                    best_idx = idx
                            rr = r + rad
                            if rr < h and m[rr, cc]:
                                d2 = (r - rr) * (r - rr) + (c - cc) * (c - cc)
                                idx = rr * w + cc
                                if best_d2 < 0 or d2 < best_d2 or (d2 == best_d2 and idx < best_idx):
                                    best_d2 = d2
                                    best_idx = idx
                    for k in range(1, side - 1):
                        # left and right edges, corners excluded
                        rr = r - rad + k
                        if 0 <= rr < h:
                            cc = c - rad
                            if cc >= 0 and m[rr, cc]:
                                d2 = (r - rr) * (r - rr) + (c - cc) * (c - cc)
                                idx = rr * w + cc
                                if best_d2 < 0 or d2 < best_d2 or (d2 == best_d2 and idx < best_idx):
                                    best_d2 = d2
                                    best_idx = idx
                            cc = c + rad
                            if cc < w and m[rr, cc]:
                                d2 = (r - rr) * (r - rr) + (c - cc) * (c - cc)
                                idx = rr * w + cc
                                if best_d2 < 0 or d2 < best_d2 or (d2 == best_d2 and idx < best_idx):
                                    best_d2 = d2
                                    best_idx = idx
                    rad += 1
                ov[r * w + c] = best_idx
    return out
