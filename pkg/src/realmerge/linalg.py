"""
realmerge - training-free checkpoint merging
Copyright (C) 2026 realmerge maintainers

Dense linear algebra kernel
===========================
Thin SVD, rank truncation, tail energy, projectors and angles.

:codeauthor:    realmerge maintainers
:maturity:      new
:depends:       numpy
:platform:      all

The SVD is a one-sided (Hestenes) Jacobi iteration. Column pairs are visited in round-robin
order so that every round rotates ``n/2`` disjoint pairs at once. Matrices in this package are
small (toy layers and ``N x N`` Gram matrices), so robustness matters more than speed.

Right singular vectors follow a fixed sign convention: the entry of largest magnitude of every
column of ``V`` is nonnegative (ties resolve to the lowest index).
"""
import logging
from dataclasses import dataclass

import numpy as np

from realmerge.exceptions import ConvergenceError
from realmerge.exceptions import DegenerateError
from realmerge.exceptions import RankError

# Globals
log = logging.getLogger(__name__)

JACOBI_TOL = 1e-12
JACOBI_ROTATE_TOL = 1e-15
JACOBI_MAX_SWEEPS = 100
GRAM_RANK_CUTOFF = 1e-12


@dataclass(frozen=True)
class SvdResult:
    """
    ``A = U diag(S) V^T`` with ``q = min(m, n)`` columns.
    """

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def reconstruct(self, rank=None):
        rank = self.S.size if rank is None else rank
        return (self.U[:, :rank] * self.S[:rank]) @ self.V[:, :rank].T


@dataclass(frozen=True)
class Projector:
    """
    Orthogonal projector onto the span of ``basis`` (``D x k`` orthonormal columns).
    """

    basis: np.ndarray

    @property
    def rank(self):
        return self.basis.shape[1]

    @classmethod
    def empty(cls, dim):
        return cls(np.zeros((dim, 0)))


def _round_robin(n):
    """
    Round-robin tournament schedule: ``n - 1`` rounds (``n`` rounded up to even) of disjoint
    column pairs covering every pair exactly once.
    """
    players = list(range(n + n % 2))
    rounds = []
    for _ in range(len(players) - 1):
        half = len(players) // 2
        pairs = [(players[i], players[-1 - i]) for i in range(half)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < n and b < n]
        if pairs:
            rounds.append((np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_columns(A):
    """
    Orthogonalize the columns of ``A`` (``m >= n``). Returns the rotated columns and ``V``.
    """
    U = np.array(A, dtype=np.float64)
    n = U.shape[1]
    V = np.eye(n)
    schedule = _round_robin(n)
    residual = 0.0
    for sweep in range(JACOBI_MAX_SWEEPS):
        residual = 0.0
        for left, right in schedule:
            ui = U[:, left]
            uj = U[:, right]
            alpha = np.sum(ui * ui, axis=0)
            beta = np.sum(uj * uj, axis=0)
            gamma = np.sum(ui * uj, axis=0)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(scale > 0.0, np.abs(gamma) / scale, 0.0)
            residual = max(residual, float(np.max(rel)))
            rotate = rel > JACOBI_ROTATE_TOL
            if not np.any(rotate):
                continue
            safe_gamma = np.where(rotate, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_gamma)
            t = np.where(zeta >= 0.0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = np.where(rotate, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(rotate, c * t, 0.0)
            U[:, left], U[:, right] = c * ui - s * uj, s * ui + c * uj
            vi = V[:, left]
            vj = V[:, right]
            V[:, left], V[:, right] = c * vi - s * vj, s * vi + c * vj
        if residual <= JACOBI_TOL:
            log.debug(f"Jacobi converged after {sweep + 1} sweeps (residual {residual:.3e})")
            return U, V
    message = f"Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps (residual {residual:.3e})"
    log.error(message)
    raise ConvergenceError(message, residual)


def _complete_basis(Q, good):
    """
    Replace the columns of ``Q`` not flagged in ``good`` by an orthonormal completion.
    """
    if np.all(good):
        return Q
    m = Q.shape[0]
    kept = Q[:, good]
    full, _ = np.linalg.qr(np.hstack([kept, np.eye(m)]))
    extra = full[:, kept.shape[1] : kept.shape[1] + int(np.sum(~good))]
    out = Q.copy()
    out[:, ~good] = extra
    return out


def _fix_signs(U, V):
    pivots = np.argmax(np.abs(V), axis=0)
    signs = np.where(V[pivots, np.arange(V.shape[1])] < 0.0, -1.0, 1.0)
    return U * signs, V * signs


def thin_svd(A):
    """
    Thin SVD of a finite ``m x n`` matrix.

    A
        2-D array with ``m, n >= 1``.

    Returns a :class:`SvdResult` with singular values sorted nonincreasing.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or min(A.shape) < 1:
        raise ValueError(f"thin_svd expects a non-empty 2-D matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("thin_svd expects finite entries")

    transpose = A.shape[0] < A.shape[1]
    work = A.T if transpose else A
    cols, V = _jacobi_columns(work)
    S = np.sqrt(np.sum(cols * cols, axis=0))
    order = np.argsort(-S, kind="stable")
    S = S[order]
    cols = cols[:, order]
    V = V[:, order]

    tiny = S <= max(work.shape) * np.finfo(np.float64).eps * (S[0] if S.size else 0.0)
    tiny |= S == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        U = np.where(tiny, 0.0, cols / np.where(S > 0.0, S, 1.0))
    U = _complete_basis(U, ~tiny)

    if transpose:
        U, V = V, U
    U, V = _fix_signs(U, V)
    return SvdResult(U, S, V)


def gram_right_singular(rows, k):
    """
    Top-``k`` right singular vectors of a short, wide matrix through its ``N x N`` Gram matrix.

    rows
        ``N x D`` array (``N`` small, typically ``N <= 64``).

    k
        Number of directions.

    Eigenvalues below ``1e-12 * trace(G)`` are treated as rank-deficient and excluded.
    Returns ``(V_k, S_k)`` with ``V_k`` of shape ``D x k``.
    """
    rows = np.asarray(rows, dtype=np.float64)
    gram = rows @ rows.T
    trace = float(np.trace(gram))
    eig = thin_svd(gram)
    lam = eig.S
    rank = int(np.sum(lam > GRAM_RANK_CUTOFF * trace)) if trace > 0.0 else 0
    log.debug(f"Gram route: N={rows.shape[0]}, numerical rank {rank}, requested k={k}")
    if k > rank:
        message = f"Requested k={k} exceeds the numerical rank {rank}"
        log.error(message)
        raise RankError(message)
    S_k = np.sqrt(lam[:k])
    V_k = (rows.T @ eig.U[:, :k]) / S_k
    # re-normalize against rounding in the Gram eigenvectors
    V_k = V_k / np.linalg.norm(V_k, axis=0)
    _, V_k = _fix_signs(np.zeros((1, k)), V_k)
    return V_k, S_k


def _check_rank(A, r_abs, low):
    q = min(A.shape)
    if not low <= r_abs <= q:
        raise RankError(f"Rank {r_abs} outside [{low}, {q}] for a {A.shape[0]}x{A.shape[1]} matrix")


def truncate_rank(A, r_abs, svd=None):
    """
    Best Frobenius rank-``r_abs`` approximation of ``A``.

    A
        ``m x n`` matrix.

    r_abs
        Retained rank, ``1 <= r_abs <= min(m, n)``. Retaining the full rank returns ``A``
        unchanged.

    svd
        Optional precomputed :class:`SvdResult` of ``A``.
    """
    A = np.asarray(A, dtype=np.float64)
    _check_rank(A, r_abs, 1)
    if r_abs == min(A.shape):
        return A.copy()
    svd = thin_svd(A) if svd is None else svd
    return svd.reconstruct(r_abs)


def tail_energy(A, r_abs, svd=None):
    """
    ``sqrt(sum_{l > r} sigma_l^2)``; ``tail_energy(A, 0)`` is the Frobenius norm.
    """
    A = np.asarray(A, dtype=np.float64)
    _check_rank(A, r_abs, 0)
    svd = thin_svd(A) if svd is None else svd
    tail = svd.S[r_abs:]
    return float(np.sqrt(np.sum(tail * tail)))


def sin_angle(a, b):
    """
    Sine of the angle between two nonzero vectors, in ``[0, 1]``.

    Computed from the rejection of ``b`` from ``a`` so that nearly collinear inputs do not lose
    half of their digits to ``sqrt(1 - cos^2)``.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise DegenerateError("sin_angle is undefined for a zero vector")
    a_hat = a / norm_a
    b_hat = b / norm_b
    rejection = b_hat - np.dot(a_hat, b_hat) * a_hat
    return float(min(1.0, max(0.0, np.linalg.norm(rejection))))


def _check_dim(projector, x):
    if x.shape[0] != projector.basis.shape[0]:
        raise ValueError(f"Dimension mismatch: {x.shape[0]} vs {projector.basis.shape[0]}")


def project(projector, x):
    x = np.asarray(x, dtype=np.float64)
    _check_dim(projector, x)
    return projector.basis @ (projector.basis.T @ x)


def reject(projector, x):
    x = np.asarray(x, dtype=np.float64)
    return x - project(projector, x)


def unit_projector(u):
    """
    Projector onto the line spanned by ``u``.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(u)
    if norm == 0.0:
        raise DegenerateError("Cannot build a projector from a zero vector")
    return Projector((u / norm)[:, None])
