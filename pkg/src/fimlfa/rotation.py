"""Orthogonal (varimax) and oblique (promax) rotation of loading matrices.

Rotation is presentation only: the varimax transform is orthogonal, so the
implied covariance is untouched, and the promax pattern P with factor
correlations F satisfies P F P' = L L' exactly, preserving it as well.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import EstimationError


@dataclass(frozen=True)
class RotationResult:
    """Rotated pattern, the transform that produced it, and, for oblique
    rotations, the factor correlation matrix (identity when orthogonal)."""

    loadings: np.ndarray
    transform: np.ndarray
    factor_correlations: np.ndarray


def varimax_criterion(loadings: np.ndarray) -> float:
    """Raw varimax criterion: summed column variance of squared loadings."""
    sq = np.asarray(loadings) ** 2
    return float(np.sum(sq.var(axis=0)))


def _canonical_order(pattern, transform, phi):
    """Sort columns by decreasing sum of squares; flip signs so the largest
    magnitude loading in each column is positive. phi is permuted/flipped
    coherently so pattern @ phi @ pattern' is unchanged."""
    ss = (pattern**2).sum(axis=0)
    perm = np.argsort(-ss, kind="stable")
    pattern = pattern[:, perm]
    transform = transform[:, perm]
    phi = phi[np.ix_(perm, perm)]
    anchor = np.abs(pattern).argmax(axis=0)
    signs = np.where(pattern[anchor, np.arange(pattern.shape[1])] < 0, -1.0, 1.0)
    pattern = pattern * signs
    transform = transform * signs
    phi = phi * np.outer(signs, signs)
    return pattern, transform, phi


def varimax(loadings: np.ndarray, max_iter: int = 100, tol: float = 1e-12) -> RotationResult:
    """Varimax rotation by pairwise planar rotations.

    Kaiser row normalization is applied before the sweeps and undone after.
    Each planar angle maximizes the criterion for its column pair in closed
    form, so the criterion never decreases within a sweep. Sweeps stop when
    the largest rotation angle of a full sweep falls below ``tol``.
    """
    loadings = np.asarray(loadings, dtype=np.float64)
    if loadings.ndim != 2:
        raise ValueError("loadings must be a 2-d array")
    p, m = loadings.shape
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if m == 1:
        pattern, transform, phi = _canonical_order(
            loadings.copy(), np.eye(1), np.eye(1)
        )
        return RotationResult(pattern, transform, phi)

    h = np.sqrt((loadings**2).sum(axis=1))
    h[h == 0.0] = 1.0
    b = loadings / h[:, None]
    transform = np.eye(m)
    for _ in range(max_iter):
        max_angle = 0.0
        for i in range(m - 1):
            for j in range(i + 1, m):
                x = b[:, i]
                y = b[:, j]
                u = x**2 - y**2
                v = 2.0 * x * y
                usum = u.sum()
                vsum = v.sum()
                numer = 2.0 * (u @ v - usum * vsum / p)
                denom = u @ u - v @ v - (usum**2 - vsum**2) / p
                theta = 0.25 * np.arctan2(numer, denom)
                if abs(theta) > max_angle:
                    max_angle = abs(theta)
                c, s = np.cos(theta), np.sin(theta)
                rot = np.array([[c, -s], [s, c]])
                b[:, [i, j]] = b[:, [i, j]] @ rot
                transform[:, [i, j]] = transform[:, [i, j]] @ rot
        if max_angle < tol:
            break
    pattern = b * h[:, None]
    pattern, transform, phi = _canonical_order(pattern, transform, np.eye(m))
    return RotationResult(pattern, transform, phi)


def promax(loadings: np.ndarray, power: int = 4) -> RotationResult:
    """Promax oblique rotation.

    A varimax solution V is sharpened into the target sign(V) |V|^power; the
    oblique transform is the least-squares fit of the target on V, with
    columns scaled so the factor correlation matrix has a unit diagonal.
    The returned pattern P and correlations F reproduce V V' as P F P'.
    """
    if power < 1:
        raise ValueError("power must be >= 1")
    vm = varimax(loadings)
    v = vm.loadings
    m = v.shape[1]
    target = np.sign(v) * np.abs(v) ** power
    vtv = v.T @ v
    try:
        u = np.linalg.solve(vtv, v.T @ target)
        scale = np.diag(np.linalg.inv(u.T @ u))
    except np.linalg.LinAlgError as exc:
        raise EstimationError(f"singular promax target system: {exc}") from exc
    u = u * np.sqrt(scale)
    pattern = v @ u
    try:
        phi = np.linalg.inv(u.T @ u)
    except np.linalg.LinAlgError as exc:
        raise EstimationError(f"singular promax transform: {exc}") from exc
    phi = (phi + phi.T) / 2.0
    np.fill_diagonal(phi, 1.0)
    transform = vm.transform @ u
    pattern, transform, phi = _canonical_order(pattern, transform, phi)
    return RotationResult(pattern, transform, phi)
