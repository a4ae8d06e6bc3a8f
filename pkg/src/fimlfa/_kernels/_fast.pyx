# Compiled kernels: per-pattern factorizations, per-case O(p_obs m^2) work.
# Mirrors _pyref.py; see that module for the algebra. Signatures and
# accumulation semantics are identical so the dispatcher can swap backends.

import numpy as np

cimport numpy as cnp
from libc.math cimport log, sqrt

cnp.import_array()

cdef double LOG_2PI = 1.8378770664093453


cdef int _chol(double[:, ::1] a, Py_ssize_t m) noexcept nogil:
    # in-place lower Cholesky of the symmetric matrix stored in the lower
    # triangle of a; returns -1 on a non-positive pivot
    cdef Py_ssize_t i, j, k
    cdef double s
    for j in range(m):
        s = a[j, j]
        for k in range(j):
            s -= a[j, k] * a[j, k]
        if s <= 0.0:
            return -1
        a[j, j] = sqrt(s)
        for i in range(j + 1, m):
            s = a[i, j]
            for k in range(j):
                s -= a[i, k] * a[j, k]
            a[i, j] = s / a[j, j]
    return 0


cdef void _chol_solve(double[:, ::1] l, Py_ssize_t m, double* x) noexcept nogil:
    # solve (L L') x = rhs with rhs supplied in x
    cdef Py_ssize_t i, k
    cdef double s
    for i in range(m):
        s = x[i]
        for k in range(i):
            s -= l[i, k] * x[k]
        x[i] = s / l[i, i]
    for i in range(m - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, m):
            s -= l[k, i] * x[k]
        x[i] = s / l[i, i]


cdef void _chol_inverse(double[:, ::1] l, Py_ssize_t m, double[:, ::1] out,
                        double* work) noexcept nogil:
    cdef Py_ssize_t i, j
    for j in range(m):
        for i in range(m):
            work[i] = 1.0 if i == j else 0.0
        _chol_solve(l, m, work)
        for i in range(m):
            out[i, j] = work[i]


cdef int _group_core(const cnp.int32_t[::1] pat_idx, Py_ssize_t base, Py_ssize_t k,
                     const double[::1] mu, const double[:, ::1] lam,
                     const double[::1] psi, Py_ssize_t m,
                     double[::1] muo, double[::1] psio, double[:, ::1] lamo,
                     double[:, ::1] b, double[:, ::1] a,
                     double* sum_log_psi) noexcept nogil:
    cdef Py_ssize_t i, j, r, s
    cdef Py_ssize_t oi
    cdef double acc, slp
    slp = 0.0
    for i in range(k):
        oi = pat_idx[base + i]
        muo[i] = mu[oi]
        psio[i] = psi[oi]
        slp += log(psi[oi])
        for j in range(m):
            lamo[i, j] = lam[oi, j]
            b[i, j] = lam[oi, j] / psi[oi]
    sum_log_psi[0] = slp
    for r in range(m):
        for s in range(r + 1):
            acc = 0.0
            for i in range(k):
                acc += lamo[i, r] * b[i, s]
            if r == s:
                acc += 1.0
            a[r, s] = acc
    return _chol(a, m)


def loglik_range(const cnp.int64_t[::1] case_group, const cnp.int64_t[::1] group_ptr,
                 const cnp.int32_t[::1] pat_idx, const cnp.int64_t[::1] pat_ptr,
                 const double[::1] xobs, const cnp.int64_t[::1] xoff,
                 const double[::1] mu, const double[:, ::1] lam, const double[::1] psi,
                 Py_ssize_t c0, Py_ssize_t c1):
    cdef Py_ssize_t p = mu.shape[0]
    cdef Py_ssize_t m = lam.shape[1]
    cdef double[::1] muo = np.empty(p)
    cdef double[::1] psio = np.empty(p)
    cdef double[:, ::1] lamo = np.empty((p, m))
    cdef double[:, ::1] b = np.empty((p, m))
    cdef double[:, ::1] a = np.empty((m, m))
    cdef double[::1] d = np.empty(p)
    cdef double[::1] t = np.empty(m)
    cdef double[::1] w = np.empty(m)
    cdef double total = 0.0
    cdef double sum_log_psi, logdet_a, const_g, quad, acc, x
    cdef Py_ssize_t c, ce, g, k, base, n, i, j
    cdef cnp.int64_t off
    cdef int err = 0

    with nogil:
        c = c0
        while c < c1:
            g = case_group[c]
            ce = group_ptr[g + 1]
            if ce > c1:
                ce = c1
            base = pat_ptr[g]
            k = pat_ptr[g + 1] - base
            err = _group_core(pat_idx, base, k, mu, lam, psi, m,
                              muo, psio, lamo, b, a, &sum_log_psi)
            if err != 0:
                break
            logdet_a = 0.0
            for j in range(m):
                logdet_a += log(a[j, j])
            const_g = k * LOG_2PI + sum_log_psi + 2.0 * logdet_a
            for n in range(c, ce):
                off = xoff[n]
                for i in range(k):
                    d[i] = xobs[off + i] - muo[i]
                for j in range(m):
                    acc = 0.0
                    for i in range(k):
                        acc += d[i] * b[i, j]
                    t[j] = acc
                    w[j] = acc
                _chol_solve(a, m, &w[0])
                quad = 0.0
                for i in range(k):
                    quad += d[i] * d[i] / psio[i]
                for j in range(m):
                    quad -= t[j] * w[j]
                total += -0.5 * (const_g + quad)
            c = ce
    if err != 0:
        raise np.linalg.LinAlgError("factor precision factorization failed in kernel")
    return total


def loglik_grad_range(const cnp.int64_t[::1] case_group, const cnp.int64_t[::1] group_ptr,
                      const cnp.int32_t[::1] pat_idx, const cnp.int64_t[::1] pat_ptr,
                      const double[::1] xobs, const cnp.int64_t[::1] xoff,
                      const double[::1] mu, const double[:, ::1] lam, const double[::1] psi,
                      Py_ssize_t c0, Py_ssize_t c1,
                      double[::1] gmu_out, double[:, ::1] glam_out, double[::1] gpsi_out):
    cdef Py_ssize_t p = mu.shape[0]
    cdef Py_ssize_t m = lam.shape[1]
    cdef double[::1] muo = np.empty(p)
    cdef double[::1] psio = np.empty(p)
    cdef double[:, ::1] lamo = np.empty((p, m))
    cdef double[:, ::1] b = np.empty((p, m))
    cdef double[:, ::1] a = np.empty((m, m))
    cdef double[:, ::1] sil = np.empty((p, m))      # Sigma_o^-1 Lambda_o
    cdef double[::1] dsi = np.empty(p)              # diag of Sigma_o^-1
    cdef double[::1] d = np.empty(p)
    cdef double[::1] u = np.empty(p)
    cdef double[::1] t = np.empty(m)
    cdef double[::1] w = np.empty(m)
    cdef double[::1] pvec = np.empty(m)
    cdef double total = 0.0
    cdef double sum_log_psi, logdet_a, const_g, quad, acc, usum
    cdef Py_ssize_t c, ce, g, k, base, n, i, j, oi, n_run
    cdef cnp.int64_t off
    cdef int err = 0

    with nogil:
        c = c0
        while c < c1:
            g = case_group[c]
            ce = group_ptr[g + 1]
            if ce > c1:
                ce = c1
            n_run = ce - c
            base = pat_ptr[g]
            k = pat_ptr[g + 1] - base
            err = _group_core(pat_idx, base, k, mu, lam, psi, m,
                              muo, psio, lamo, b, a, &sum_log_psi)
            if err != 0:
                break
            logdet_a = 0.0
            for j in range(m):
                logdet_a += log(a[j, j])
            const_g = k * LOG_2PI + sum_log_psi + 2.0 * logdet_a
            for i in range(k):
                for j in range(m):
                    w[j] = b[i, j]
                _chol_solve(a, m, &w[0])
                acc = 0.0
                for j in range(m):
                    sil[i, j] = w[j]
                    acc += b[i, j] * w[j]
                dsi[i] = 1.0 / psio[i] - acc
            for n in range(c, ce):
                off = xoff[n]
                for i in range(k):
                    d[i] = xobs[off + i] - muo[i]
                for j in range(m):
                    acc = 0.0
                    for i in range(k):
                        acc += d[i] * b[i, j]
                    t[j] = acc
                    w[j] = acc
                _chol_solve(a, m, &w[0])
                quad = 0.0
                for i in range(k):
                    quad += d[i] * d[i] / psio[i]
                for j in range(m):
                    quad -= t[j] * w[j]
                total += -0.5 * (const_g + quad)
                for i in range(k):
                    acc = d[i] / psio[i]
                    for j in range(m):
                        acc -= b[i, j] * w[j]
                    u[i] = acc
                for j in range(m):
                    acc = 0.0
                    for i in range(k):
                        acc += u[i] * lamo[i, j]
                    pvec[j] = acc
                for i in range(k):
                    oi = pat_idx[base + i]
                    gmu_out[oi] += u[i]
                    for j in range(m):
                        glam_out[oi, j] += u[i] * pvec[j]
                    gpsi_out[oi] += 0.5 * u[i] * u[i]
            for i in range(k):
                oi = pat_idx[base + i]
                for j in range(m):
                    glam_out[oi, j] -= n_run * sil[i, j]
                gpsi_out[oi] -= 0.5 * n_run * dsi[i]
            c = ce
    if err != 0:
        raise np.linalg.LinAlgError("factor precision factorization failed in kernel")
    return total


def modified_suffstats_range(const cnp.int64_t[::1] case_group, const cnp.int64_t[::1] group_ptr,
                             const cnp.int32_t[::1] pat_idx, const cnp.int64_t[::1] pat_ptr,
                             const double[::1] xobs, const cnp.int64_t[::1] xoff,
                             const double[::1] mu, const double[:, ::1] lam, const double[::1] psi,
                             Py_ssize_t c0, Py_ssize_t c1,
                             double[:, :, ::1] gram_out, double[:, ::1] resp_out):
    cdef Py_ssize_t p = mu.shape[0]
    cdef Py_ssize_t m = lam.shape[1]
    cdef double[::1] muo = np.empty(p)
    cdef double[::1] psio = np.empty(p)
    cdef double[:, ::1] lamo = np.empty((p, m))
    cdef double[:, ::1] b = np.empty((p, m))
    cdef double[:, ::1] a = np.empty((m, m))
    cdef double[:, ::1] vhat = np.empty((m, m))
    cdef double[:, ::1] hsum = np.empty((m + 1, m + 1))
    cdef double[::1] d = np.empty(p)
    cdef double[::1] t = np.empty(m)
    cdef double[::1] w = np.empty(m)
    cdef double[::1] work = np.empty(m)
    cdef double total = 0.0
    cdef double sum_log_psi, logdet_a, const_g, quad, acc, x
    cdef Py_ssize_t c, ce, g, k, base, n, i, j, r, oi, n_run
    cdef cnp.int64_t off
    cdef int err = 0

    with nogil:
        c = c0
        while c < c1:
            g = case_group[c]
            ce = group_ptr[g + 1]
            if ce > c1:
                ce = c1
            n_run = ce - c
            base = pat_ptr[g]
            k = pat_ptr[g + 1] - base
            err = _group_core(pat_idx, base, k, mu, lam, psi, m,
                              muo, psio, lamo, b, a, &sum_log_psi)
            if err != 0:
                break
            logdet_a = 0.0
            for j in range(m):
                logdet_a += log(a[j, j])
            const_g = k * LOG_2PI + sum_log_psi + 2.0 * logdet_a
            _chol_inverse(a, m, vhat, &work[0])
            for i in range(m + 1):
                for j in range(m + 1):
                    hsum[i, j] = 0.0
            for n in range(c, ce):
                off = xoff[n]
                for i in range(k):
                    d[i] = xobs[off + i] - muo[i]
                for j in range(m):
                    acc = 0.0
                    for i in range(k):
                        acc += d[i] * b[i, j]
                    t[j] = acc
                    w[j] = acc
                _chol_solve(a, m, &w[0])
                quad = 0.0
                for i in range(k):
                    quad += d[i] * d[i] / psio[i]
                for j in range(m):
                    quad -= t[j] * w[j]
                total += -0.5 * (const_g + quad)
                hsum[0, 0] += 1.0
                for j in range(m):
                    hsum[0, j + 1] += w[j]
                    hsum[j + 1, 0] += w[j]
                    for r in range(m):
                        hsum[j + 1, r + 1] += w[j] * w[r]
                for i in range(k):
                    oi = pat_idx[base + i]
                    x = xobs[off + i]
                    resp_out[oi, 0] += x
                    for j in range(m):
                        resp_out[oi, j + 1] += x * w[j]
            for j in range(m):
                for r in range(m):
                    hsum[j + 1, r + 1] += n_run * vhat[j, r]
            for i in range(k):
                oi = pat_idx[base + i]
                for j in range(m + 1):
                    for r in range(m + 1):
                        gram_out[oi, j, r] += hsum[j, r]
            c = ce
    if err != 0:
        raise np.linalg.LinAlgError("factor precision factorization failed in kernel")
    return total


def ordinary_suffstats_range(const cnp.int64_t[::1] case_group, const cnp.int64_t[::1] group_ptr,
                             const cnp.int32_t[::1] pat_idx, const cnp.int64_t[::1] pat_ptr,
                             const double[::1] xobs, const cnp.int64_t[::1] xoff,
                             const double[::1] mu, const double[:, ::1] lam, const double[::1] psi,
                             Py_ssize_t c0, Py_ssize_t c1,
                             double[:, ::1] sxx_out, double[:, ::1] szx_out, double[:, ::1] szz_out):
    cdef Py_ssize_t p = mu.shape[0]
    cdef Py_ssize_t m = lam.shape[1]
    cdef double[::1] muo = np.empty(p)
    cdef double[::1] psio = np.empty(p)
    cdef double[:, ::1] lamo = np.empty((p, m))
    cdef double[:, ::1] b = np.empty((p, m))
    cdef double[:, ::1] a = np.empty((m, m))
    cdef double[:, ::1] vhat = np.empty((m, m))
    cdef double[::1] d = np.empty(p)
    cdef double[::1] t = np.empty(m)
    cdef double[::1] w = np.empty(m)
    cdef double[::1] work = np.empty(m)
    cdef double[::1] xhat = np.empty(p)
    cdef char[::1] obs_flag = np.zeros(p, dtype=np.int8)
    cdef cnp.int32_t[::1] mis_idx = np.empty(p, dtype=np.int32)
    cdef double[:, ::1] lv = np.empty((p, m))       # Lambda_mis V
    cdef double total = 0.0
    cdef double sum_log_psi, logdet_a, const_g, quad, acc, xv
    cdef Py_ssize_t c, ce, g, k, base, n, i, j, r, s, oi, mi, mj, n_run, n_mis
    cdef cnp.int64_t off
    cdef int err = 0

    with nogil:
        c = c0
        while c < c1:
            g = case_group[c]
            ce = group_ptr[g + 1]
            if ce > c1:
                ce = c1
            n_run = ce - c
            base = pat_ptr[g]
            k = pat_ptr[g + 1] - base
            err = _group_core(pat_idx, base, k, mu, lam, psi, m,
                              muo, psio, lamo, b, a, &sum_log_psi)
            if err != 0:
                break
            logdet_a = 0.0
            for j in range(m):
                logdet_a += log(a[j, j])
            const_g = k * LOG_2PI + sum_log_psi + 2.0 * logdet_a
            _chol_inverse(a, m, vhat, &work[0])

            for i in range(k):
                obs_flag[pat_idx[base + i]] = 1
            n_mis = 0
            for i in range(p):
                if obs_flag[i] == 0:
                    mis_idx[n_mis] = i
                    n_mis += 1
            for i in range(n_mis):
                mi = mis_idx[i]
                for j in range(m):
                    acc = 0.0
                    for r in range(m):
                        acc += lam[mi, r] * vhat[r, j]
                    lv[i, j] = acc

            for n in range(c, ce):
                off = xoff[n]
                for i in range(k):
                    d[i] = xobs[off + i] - muo[i]
                for j in range(m):
                    acc = 0.0
                    for i in range(k):
                        acc += d[i] * b[i, j]
                    t[j] = acc
                    w[j] = acc
                _chol_solve(a, m, &w[0])
                quad = 0.0
                for i in range(k):
                    quad += d[i] * d[i] / psio[i]
                for j in range(m):
                    quad -= t[j] * w[j]
                total += -0.5 * (const_g + quad)

                for i in range(k):
                    xhat[pat_idx[base + i]] = xobs[off + i]
                for i in range(n_mis):
                    mi = mis_idx[i]
                    acc = mu[mi]
                    for j in range(m):
                        acc += lam[mi, j] * w[j]
                    xhat[mi] = acc
                # upper triangle only; mirrored once at the end of the range
                for r in range(p):
                    xv = xhat[r]
                    for s in range(r, p):
                        sxx_out[r, s] += xv * xhat[s]
                for r in range(p):
                    xv = xhat[r]
                    szx_out[0, r] += xv
                    for j in range(m):
                        szx_out[j + 1, r] += w[j] * xv
                szz_out[0, 0] += 1.0
                for j in range(m):
                    szz_out[0, j + 1] += w[j]
                    szz_out[j + 1, 0] += w[j]
                    for r in range(m):
                        szz_out[j + 1, r + 1] += w[j] * w[r]

            # pattern-constant second-moment corrections, once per run
            for i in range(n_mis):
                mi = mis_idx[i]
                for j in range(i, n_mis):
                    mj = mis_idx[j]
                    acc = 0.0
                    for r in range(m):
                        acc += lv[i, r] * lam[mj, r]
                    if i == j:
                        acc += psi[mi]
                    sxx_out[mi, mj] += n_run * acc
                for j in range(m):
                    szx_out[j + 1, mi] += n_run * lv[i, j]
            for j in range(m):
                for r in range(m):
                    szz_out[j + 1, r + 1] += n_run * vhat[j, r]

            for i in range(k):
                obs_flag[pat_idx[base + i]] = 0
            c = ce
        if err == 0:
            for r in range(p):
                for s in range(r + 1, p):
                    sxx_out[s, r] = sxx_out[r, s]
    if err != 0:
        raise np.linalg.LinAlgError("factor precision factorization failed in kernel")
    return total
