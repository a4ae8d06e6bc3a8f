"""Kernel dispatch: compiled extension when available, numpy fallback otherwise.

Set FIML_KERNELS=python (or =compiled) to force a backend, and FIML_THREADS
(or set_threads) to run chunks of cases on a thread pool. Work is always split
into fixed-size chunks whose partial results are combined in chunk order, so
results are bit-identical for any thread count.
"""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _pyref

# fixed chunk size; changing it changes floating-point summation order
CHUNK = 2048

_FORCED = os.environ.get("FIML_KERNELS", "").strip().lower()
if _FORCED not in ("", "python", "compiled"):
    raise ImportError(f"FIML_KERNELS must be 'python' or 'compiled', got {_FORCED!r}")

if _FORCED == "python":
    _impl = _pyref
    BACKEND = "python"
else:
    try:
        from . import _fast as _impl

        BACKEND = "compiled"
    except ImportError:
        if _FORCED == "compiled":
            raise
        _impl = _pyref
        BACKEND = "python"

_threads = max(1, int(os.environ.get("FIML_THREADS", "1") or 1))


def set_threads(n: int) -> None:
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = int(n)


def get_threads() -> int:
    return _threads


def _chunks(n_cases):
    return [(c, min(c + CHUNK, n_cases)) for c in range(0, n_cases, CHUNK)]


def _data_args(packed):
    return (
        packed.case_group, packed.group_ptr, packed.pat_idx, packed.pat_ptr,
        packed.xobs, packed.xoff,
    )


def _run_chunks(tasks):
    """Run chunk closures, each returning its partial, in deterministic order."""
    if _threads == 1 or len(tasks) == 1:
        return [t() for t in tasks]
    with ThreadPoolExecutor(max_workers=min(_threads, len(tasks))) as pool:
        futures = [pool.submit(t) for t in tasks]
        return [f.result() for f in futures]


def loglik(packed, mu, lam, psi):
    args = _data_args(packed)

    def task(c0, c1):
        return lambda: _impl.loglik_range(*args, mu, lam, psi, c0, c1)

    parts = _run_chunks([task(c0, c1) for c0, c1 in _chunks(packed.n_cases)])
    total = 0.0
    for part in parts:
        total += part
    return total


def loglik_grad(packed, mu, lam, psi):
    args = _data_args(packed)
    p, m = lam.shape

    def task(c0, c1):
        def run():
            gmu = np.zeros(p)
            glam = np.zeros((p, m))
            gpsi = np.zeros(p)
            ll = _impl.loglik_grad_range(*args, mu, lam, psi, c0, c1, gmu, glam, gpsi)
            return ll, gmu, glam, gpsi

        return run

    parts = _run_chunks([task(c0, c1) for c0, c1 in _chunks(packed.n_cases)])
    total = 0.0
    gmu = np.zeros(p)
    glam = np.zeros((p, m))
    gpsi = np.zeros(p)
    for ll, a, b, c in parts:
        total += ll
        gmu += a
        glam += b
        gpsi += c
    return total, gmu, glam, gpsi


def modified_suffstats(packed, mu, lam, psi):
    """Returns (loglik of the input model, per-variable gram, per-variable response)."""
    args = _data_args(packed)
    p, m = lam.shape

    def task(c0, c1):
        def run():
            gram = np.zeros((p, m + 1, m + 1))
            resp = np.zeros((p, m + 1))
            ll = _impl.modified_suffstats_range(*args, mu, lam, psi, c0, c1, gram, resp)
            return ll, gram, resp

        return run

    parts = _run_chunks([task(c0, c1) for c0, c1 in _chunks(packed.n_cases)])
    total = 0.0
    gram = np.zeros((p, m + 1, m + 1))
    resp = np.zeros((p, m + 1))
    for ll, a, b in parts:
        total += ll
        gram += a
        resp += b
    return total, gram, resp


def ordinary_suffstats(packed, mu, lam, psi):
    """Returns (loglik of the input model, sum_xx, sum_zx, sum_zz)."""
    args = _data_args(packed)
    p, m = lam.shape

    def task(c0, c1):
        def run():
            sxx = np.zeros((p, p))
            szx = np.zeros((m + 1, p))
            szz = np.zeros((m + 1, m + 1))
            ll = _impl.ordinary_suffstats_range(*args, mu, lam, psi, c0, c1, sxx, szx, szz)
            return ll, sxx, szx, szz

        return run

    parts = _run_chunks([task(c0, c1) for c0, c1 in _chunks(packed.n_cases)])
    total = 0.0
    sxx = np.zeros((p, p))
    szx = np.zeros((m + 1, p))
    szz = np.zeros((m + 1, m + 1))
    for ll, a, b, c in parts:
        total += ll
        sxx += a
        szx += b
        szz += c
    return total, sxx, szx, szz


def factor_moments(packed, mu, lam, psi):
    """Posterior factor mean and covariance per sorted case (map, no reduction)."""
    args = _data_args(packed)
    m = lam.shape[1]
    n = packed.n_cases
    fhat = np.empty((n, m))
    vhat = np.empty((n, m, m))

    def task(c0, c1):
        def run():
            _pyref.factor_moments_range(*args, mu, lam, psi, c0, c1, fhat, vhat)
            return None

        return run

    _run_chunks([task(c0, c1) for c0, c1 in _chunks(n)])
    return fhat, vhat
