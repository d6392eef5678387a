"""Spectral analysis of friction matrices.

Cyclic Jacobi eigendecomposition, effective rank and retention counts,
column-pivoted Householder QR for proxy selection, and PCA for exporting
embeddings.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def n(self):
        return self.eigenvalues.size

    def reconstruct(self):
        u = self.eigenvectors
        return (u * self.eigenvalues) @ u.T


def _as_square(F, name="F"):
    F = np.array(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] != F.shape[1]:
        raise ShapeError(f"{name} must be square", F.shape)
    if not np.all(np.isfinite(F)):
        raise DomainError(f"{name} contains non-finite entries")
    return F


def eig_sym(F, tol=1e-12, max_sweeps=60, sym_tol=1e-10):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps stop once the off-diagonal Frobenius norm drops below
    ``tol * ||F||_F``. Eigenpairs come back sorted by ``|lambda|`` descending.
    """
    A = _as_square(F)
    scale = max(1.0, float(np.abs(A).max(initial=0.0)))
    if np.abs(A - A.T).max(initial=0.0) > sym_tol * scale:
        raise DomainError("eig_sym needs a symmetric matrix (symmetrize first)")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    V = np.eye(n)
    fro = math.sqrt(float((A * A).sum()))
    if fro > 0:
        for _ in range(max_sweeps):
            off = math.sqrt(float(np.square(A - np.diag(np.diag(A))).sum()))
            if off < tol * fro:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = float(A[p, q])
                    if apq == 0.0:
                        continue
                    diff = float(A[q, q] - A[p, p])
                    if abs(diff) > 1e150 * abs(apq):
                        t = apq / diff
                    else:
                        theta = diff / (2.0 * apq)
                        t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                    c = 1.0 / math.sqrt(t * t + 1.0)
                    s = t * c
                    cp, cq = A[:, p].copy(), A[:, q].copy()
                    A[:, p] = c * cp - s * cq
                    A[:, q] = s * cp + c * cq
                    rp, rq = A[p, :].copy(), A[q, :].copy()
                    A[p, :] = c * rp - s * rq
                    A[q, :] = s * rp + c * rq
                    A[p, q] = A[q, p] = 0.0
                    vp, vq = V[:, p].copy(), V[:, q].copy()
                    V[:, p] = c * vp - s * vq
                    V[:, q] = s * vp + c * vq
    lam = np.diag(A).copy()
    order = np.argsort(-np.abs(lam), kind="stable")
    return Spectrum(lam[order], V[:, order])


def effective_rank(spectrum, tau_rel=0.01):
    """Number of eigenvalues with ``|lambda| >= tau_rel * |lambda_1|``."""
    if not 0 < tau_rel < 1:
        raise DomainError(f"tau_rel must lie in (0, 1), got {tau_rel}")
    lam = np.abs(np.asarray(getattr(spectrum, "eigenvalues", spectrum), dtype=np.float64))
    top = lam.max(initial=0.0)
    if top == 0:
        warnings.warn("zero spectrum: effective rank is 0", RuntimeWarning, stacklevel=2)
        return 0
    return int(np.count_nonzero(lam >= tau_rel * top))


def retention_curve(spectrum, mode="energy"):
    """Cumulative retained fraction after 1, 2, ... leading eigenvalues.

    ``energy`` accumulates squared eigenvalues; ``abs`` accumulates ``|lambda|``.
    """
    lam = np.abs(np.asarray(getattr(spectrum, "eigenvalues", spectrum), dtype=np.float64))
    lam = np.sort(lam)[::-1]
    if mode == "energy":
        w = lam * lam
    elif mode == "abs":
        w = lam
    else:
        raise DomainError(f"unknown retention mode {mode!r}")
    total = w.sum()
    if total == 0:
        raise DomainError("retention undefined for a zero spectrum")
    return np.cumsum(w) / total


def retention_size(spectrum, retention, mode="energy"):
    """Smallest k whose leading eigenvalues retain at least ``retention``."""
    if not 0 < retention <= 1:
        raise DomainError(f"retention must lie in (0, 1], got {retention}")
    curve = retention_curve(spectrum, mode)
    hit = np.nonzero(curve >= retention - 1e-12)[0]
    return int(hit[0]) + 1 if hit.size else int(curve.size)


@dataclass(frozen=True)
class PivotedQR:
    """Leading pivots of a column-pivoted QR factorization."""

    indices: list
    residual_norms: np.ndarray
    r_diag: np.ndarray


def rrqr_select(F, k):
    """First ``k`` pivot columns of Householder QR with column pivoting.

    At each step the column with the largest residual norm (after removing
    the span of already chosen columns) is pivoted in; ties go to the lowest
    original column index. ``residual_norms[i]`` is that largest norm at
    step ``i`` and is non-increasing.
    """
    R = np.array(F, dtype=np.float64)
    if R.ndim != 2:
        raise ShapeError("rrqr_select needs a matrix", R.shape)
    m, n = R.shape
    if not 1 <= k <= min(m, n):
        raise DomainError(f"budget k={k} outside [1, {min(m, n)}]")
    if not np.all(np.isfinite(R)):
        raise DomainError("rrqr_select needs a complete matrix (impute first)")
    perm = np.arange(n)
    norms = []
    for j in range(k):
        tail = np.sqrt((R[j:, j:] ** 2).sum(axis=0))
        best = tail.max()
        ties = np.nonzero(tail >= best * (1 - 1e-13))[0]
        pick = j + int(ties[np.argmin(perm[j + ties])])
        R[:, [j, pick]] = R[:, [pick, j]]
        perm[[j, pick]] = perm[[pick, j]]
        norms.append(float(best))
        x = R[j:, j]
        alpha = math.sqrt(float(x @ x))
        if alpha == 0.0:
            continue
        v = x.copy()
        v[0] += math.copysign(alpha, x[0]) if x[0] != 0 else alpha
        v /= math.sqrt(float(v @ v))
        R[j:, j:] -= 2.0 * np.outer(v, v @ R[j:, j:])
    r_diag = np.abs(np.diag(R)[:k]).copy()
    return PivotedQR([int(p) for p in perm[:k]], np.array(norms), r_diag)


def projection_residual(F, cols):
    """Largest entry of ``F`` minus its projection onto span(F[:, cols])."""
    F = np.asarray(F, dtype=np.float64)
    Q, _ = np.linalg.qr(F[:, list(cols)])
    return float(np.abs(F - Q @ (Q.T @ F)).max())


def column_volume(F, cols):
    """sqrt(det(G)) with G the Gram matrix of the selected columns."""
    C = np.asarray(F, dtype=np.float64)[:, list(cols)]
    return math.sqrt(max(float(np.linalg.det(C.T @ C)), 0.0))


def impute_mean(values, mask):
    """Fill missing entries with the mean of their row and column averages."""
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DomainError("cannot impute a matrix with no observed entries")
    glob = values[mask].mean()
    cnt_r, cnt_c = mask.sum(axis=1), mask.sum(axis=0)
    sum_r = np.where(mask, values, 0.0).sum(axis=1)
    sum_c = np.where(mask, values, 0.0).sum(axis=0)
    row = np.where(cnt_r > 0, sum_r / np.maximum(cnt_r, 1), glob)
    col = np.where(cnt_c > 0, sum_c / np.maximum(cnt_c, 1), glob)
    fill = 0.5 * (row[:, None] + col[None, :])
    return np.where(mask, values, fill)


def impute_lowrank(values, mask, rank, iters=100, tol=1e-10):
    """Hard-impute: alternately refill missing entries from a rank-``rank`` fit.

    Starts from ``impute_mean``; observed entries are never changed. Stops when
    the largest change in a filled entry drops below ``tol``.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    X = impute_mean(values, mask)
    if mask.all():
        return X
    for _ in range(iters):
        lam, vec = np.linalg.eigh(0.5 * (X + X.T))
        top = np.argsort(-np.abs(lam), kind="stable")[:rank]
        fill = (vec[:, top] * lam[top]) @ vec[:, top].T
        step = float(np.abs(fill[~mask] - X[~mask]).max())
        X = np.where(mask, values, fill)
        if step < tol:
            break
    return X


def completion_rank(values, mask, retention, mode="energy", iters=100):
    """Smallest k whose rank-k completion retains ``retention`` of its own spectrum.

    Returns (k, completed matrix). With nothing missing this equals
    ``retention_size`` of the matrix itself.
    """
    mask = np.asarray(mask, dtype=bool)
    n = mask.shape[0]
    if mask.all():
        X = np.asarray(values, dtype=np.float64)
        return retention_size(eig_sym(X), retention, mode), X
    for k in range(1, n + 1):
        X = impute_lowrank(values, mask, k, iters)
        if retention_size(np.linalg.eigvalsh(X), retention, mode) <= k:
            return k, X
    return n, X


@dataclass(frozen=True)
class Projection:
    coords: np.ndarray
    explained: np.ndarray
    components: np.ndarray
    mean: np.ndarray


def pca_project(Z, dims):
    """Project rows of ``Z`` onto the top ``dims`` principal axes.

    ``explained`` holds each kept component's share of total variance.
    Component signs are fixed so the largest-magnitude loading is positive.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ShapeError("pca_project needs an m x d matrix", Z.shape)
    m, d = Z.shape
    if m < 2:
        raise DomainError("pca_project needs at least two rows")
    if not 1 <= dims <= d:
        raise DomainError(f"dims={dims} outside [1, {d}]")
    mean = Z.mean(axis=0)
    X = Z - mean
    spec = eig_sym(X.T @ X / (m - 1))
    lam = np.clip(spec.eigenvalues, 0.0, None)
    order = np.argsort(-lam, kind="stable")
    lam, U = lam[order], spec.eigenvectors[:, order]
    flip = np.sign(U[np.abs(U).argmax(axis=0), np.arange(d)])
    U = U * np.where(flip == 0, 1.0, flip)
    total = lam.sum()
    explained = lam[:dims] / total if total > 0 else np.zeros(dims)
    return Projection(X @ U[:, :dims], explained, U[:, :dims], mean)
