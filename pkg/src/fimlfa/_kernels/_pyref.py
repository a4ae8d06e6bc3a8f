"""Pure numpy fallback kernels.

Each function processes the sorted-case range [c0, c1) of a pattern-grouped
dataset (see model.PackedData for the layout) and accumulates into the
caller's zeroed output buffers. Cases sharing a missingness pattern sit in
contiguous runs, so per-pattern matrices are formed once per run and the
per-case work is vectorized over the run.

All per-case algebra runs through the factor-space identities

    A = I + L_o' Psi_o^-1 L_o            (m x m)
    Sigma_o^-1 = Psi_o^-1 - Psi_o^-1 L_o A^-1 L_o' Psi_o^-1
    log det Sigma_o = sum log psi_o + log det A
    Sigma_o^-1 L_o = Psi_o^-1 L_o A^-1

so no p x p matrix is ever formed or factorized.
"""

import numpy as np

LOG_2PI = 1.8378770664093453


def _iter_runs(case_group, group_ptr, c0, c1):
    """Yield (group_id, run_start, run_stop) for sorted cases in [c0, c1)."""
    c = c0
    while c < c1:
        g = case_group[c]
        stop = min(group_ptr[g + 1], c1)
        yield g, c, stop
        c = stop


def _group_core(pat_idx, pat_ptr, g, mu, lam, psi):
    o = pat_idx[pat_ptr[g] : pat_ptr[g + 1]]
    lam_o = lam[o]
    psi_o = psi[o]
    b = lam_o / psi_o[:, None]
    a = lam_o.T @ b
    a[np.diag_indices_from(a)] += 1.0
    chol = np.linalg.cholesky(a)
    return o, mu[o], lam_o, psi_o, b, a, chol


def loglik_range(case_group, group_ptr, pat_idx, pat_ptr, xobs, xoff, mu, lam, psi, c0, c1):
    total = 0.0
    for g, cs, ce in _iter_runs(case_group, group_ptr, c0, c1):
        o, mu_o, lam_o, psi_o, b, a, chol = _group_core(pat_idx, pat_ptr, g, mu, lam, psi)
        k = o.size
        n_run = ce - cs
        d = xobs[xoff[cs] : xoff[ce]].reshape(n_run, k) - mu_o
        t = d @ b
        w = np.linalg.solve(a, t.T).T
        quad = np.einsum("ij,ij->i", d, d / psi_o) - np.einsum("ij,ij->i", t, w)
        logdet = np.sum(np.log(psi_o)) + 2.0 * np.sum(np.log(np.diag(chol)))
        total += -0.5 * (n_run * (k * LOG_2PI + logdet) + np.sum(quad))
    return total


def loglik_grad_range(
    case_group, group_ptr, pat_idx, pat_ptr, xobs, xoff, mu, lam, psi, c0, c1,
    gmu_out, glam_out, gpsi_out,
):
    total = 0.0
    for g, cs, ce in _iter_runs(case_group, group_ptr, c0, c1):
        o, mu_o, lam_o, psi_o, b, a, chol = _group_core(pat_idx, pat_ptr, g, mu, lam, psi)
        k = o.size
        n_run = ce - cs
        d = xobs[xoff[cs] : xoff[ce]].reshape(n_run, k) - mu_o
        t = d @ b
        w = np.linalg.solve(a, t.T).T
        quad = np.einsum("ij,ij->i", d, d / psi_o) - np.einsum("ij,ij->i", t, w)
        logdet = np.sum(np.log(psi_o)) + 2.0 * np.sum(np.log(np.diag(chol)))
        total += -0.5 * (n_run * (k * LOG_2PI + logdet) + np.sum(quad))

        u = d / psi_o - w @ b.T                       # rows are Sigma_o^-1 (x - mu)
        sig_inv_lam = np.linalg.solve(a, b.T).T       # Sigma_o^-1 L_o, k x m
        diag_sig_inv = 1.0 / psi_o - np.einsum("ij,ij->i", b, sig_inv_lam)
        gmu_out[o] += u.sum(axis=0)
        glam_out[o] += u.T @ (u @ lam_o) - n_run * sig_inv_lam
        gpsi_out[o] += 0.5 * (np.einsum("ij,ij->j", u, u) - n_run * diag_sig_inv)
    return total


def factor_moments_range(
    case_group, group_ptr, pat_idx, pat_ptr, xobs, xoff, mu, lam, psi, c0, c1,
    fhat_out, vhat_out,
):
    m = lam.shape[1]
    eye = np.eye(m)
    for g, cs, ce in _iter_runs(case_group, group_ptr, c0, c1):
        o, mu_o, lam_o, psi_o, b, a, chol = _group_core(pat_idx, pat_ptr, g, mu, lam, psi)
        k = o.size
        n_run = ce - cs
        d = xobs[xoff[cs] : xoff[ce]].reshape(n_run, k) - mu_o
        fhat_out[cs:ce] = np.linalg.solve(a, (d @ b).T).T
        vhat_out[cs:ce] = np.linalg.solve(a, eye)


def modified_suffstats_range(
    case_group, group_ptr, pat_idx, pat_ptr, xobs, xoff, mu, lam, psi, c0, c1,
    gram_out, resp_out,
):
    """Accumulate per-variable Gram and response blocks for the factor E-step.

    gram_out[i] sums [[1, f'], [f, f f' + V]] over cases observing variable i;
    resp_out[i] sums x_ni (1, f')'. Returns the log-likelihood of the input
    model, a free byproduct of the same factorizations.
    """
    m = lam.shape[1]
    total = 0.0
    for g, cs, ce in _iter_runs(case_group, group_ptr, c0, c1):
        o, mu_o, lam_o, psi_o, b, a, chol = _group_core(pat_idx, pat_ptr, g, mu, lam, psi)
        k = o.size
        n_run = ce - cs
        x = xobs[xoff[cs] : xoff[ce]].reshape(n_run, k)
        d = x - mu_o
        t = d @ b
        w = np.linalg.solve(a, t.T).T
        vhat = np.linalg.solve(a, np.eye(m))

        quad = np.einsum("ij,ij->i", d, d / psi_o) - np.einsum("ij,ij->i", t, w)
        logdet = np.sum(np.log(psi_o)) + 2.0 * np.sum(np.log(np.diag(chol)))
        total += -0.5 * (n_run * (k * LOG_2PI + logdet) + np.sum(quad))

        h = np.empty((m + 1, m + 1))
        h[0, 0] = n_run
        fs = w.sum(axis=0)
        h[0, 1:] = fs
        h[1:, 0] = fs
        h[1:, 1:] = w.T @ w + n_run * vhat
        gram_out[o] += h
        z = np.empty((n_run, m + 1))
        z[:, 0] = 1.0
        z[:, 1:] = w
        resp_out[o] += x.T @ z
    return total


def ordinary_suffstats_range(
    case_group, group_ptr, pat_idx, pat_ptr, xobs, xoff, mu, lam, psi, c0, c1,
    sxx_out, szx_out, szz_out,
):
    """Accumulate full-data sufficient statistics for the classic E-step.

    z = (1, f) is the regression vector; missing coordinates of x are filled
    with their conditional means and the second-moment corrections are added
    once per pattern run. Returns the log-likelihood of the input model.
    """
    p, m = lam.shape
    eye = np.eye(m)
    full = np.arange(p)
    total = 0.0
    for g, cs, ce in _iter_runs(case_group, group_ptr, c0, c1):
        o, mu_o, lam_o, psi_o, b, a, chol = _group_core(pat_idx, pat_ptr, g, mu, lam, psi)
        k = o.size
        n_run = ce - cs
        x = xobs[xoff[cs] : xoff[ce]].reshape(n_run, k)
        d = x - mu_o
        t = d @ b
        w = np.linalg.solve(a, t.T).T
        vhat = np.linalg.solve(a, eye)

        quad = np.einsum("ij,ij->i", d, d / psi_o) - np.einsum("ij,ij->i", t, w)
        logdet = np.sum(np.log(psi_o)) + 2.0 * np.sum(np.log(np.diag(chol)))
        total += -0.5 * (n_run * (k * LOG_2PI + logdet) + np.sum(quad))

        obs_flag = np.zeros(p, dtype=bool)
        obs_flag[o] = True
        mis = full[~obs_flag]
        lam_m = lam[mis]

        xhat = np.empty((n_run, p))
        xhat[:, o] = x
        xhat[:, mis] = mu[mis] + w @ lam_m.T

        sxx_out += xhat.T @ xhat
        if mis.size:
            lv = lam_m @ vhat
            corr = lv @ lam_m.T
            corr[np.diag_indices_from(corr)] += psi[mis]
            sxx_out[np.ix_(mis, mis)] += n_run * corr
            szx_out[1:, mis] += n_run * (vhat @ lam_m.T)
        szx_out[0] += xhat.sum(axis=0)
        szx_out[1:] += w.T @ xhat
        szz_out[0, 0] += n_run
        fs = w.sum(axis=0)
        szz_out[0, 1:] += fs
        szz_out[1:, 0] += fs
        szz_out[1:, 1:] += w.T @ w + n_run * vhat
    return total
