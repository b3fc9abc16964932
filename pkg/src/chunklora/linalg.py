"""Minimal dense linear algebra for rank-ladder construction.

Matrices are plain row-major float64 numpy arrays, validated finite on
construction via :func:`matrix`. The SVD is a one-sided Jacobi
implementation with a fixed cyclic sweep order and a deterministic sign
convention, so a given input always factors bit-identically. It is meant
for the desk-scale matrices this runtime works with (up to a few hundred
rows/columns), where robustness and reproducibility matter more than
speed: the factorization runs once per adapter site.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DomainError, RangeError, ShapeError

# One-sided Jacobi: sweep until every normalized off-diagonal column dot
# falls below the tolerance, or give up after the cap.
JACOBI_SWEEP_CAP = 60
JACOBI_TOL = 1e-12
# Columns whose norm collapses below this fraction of the input's
# Frobenius norm carry no reconstructable signal; they are excluded from
# further rotations and reported as exact zeros (orthonormal basis
# completion fills their left singular vectors).
JACOBI_NULL_REL = 1e-15


def matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate and return a 2-D float64 matrix.

    ``data`` may be nested sequences or an ndarray; with ``rows``/``cols``
    a flat sequence is reshaped. Raises ShapeError on inconsistent
    dimensions and DomainError on non-finite entries.
    """
    arr = np.asarray(data, dtype=np.float64)
    if rows is not None or cols is not None:
        if rows is None or cols is None:
            raise ShapeError("matrix() needs both rows and cols or neither")
        if arr.size != rows * cols:
            raise ShapeError(f"got {arr.size} values for a {rows}x{cols} matrix")
        arr = arr.reshape(rows, cols)
    if arr.ndim != 2:
        raise ShapeError(f"matrix must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("matrix entries must be finite")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul operands must be 2-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius(m: np.ndarray) -> float:
    """Frobenius norm with float64 accumulation."""
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = u @ diag(sigma) @ v.T`` with k = min(m, n) columns.

    ``sigma`` is non-increasing and non-negative; the columns of ``u`` and
    ``v`` are orthonormal.
    """

    u: np.ndarray      # (m, k)
    sigma: np.ndarray  # (k,)
    v: np.ndarray      # (n, k)

    @property
    def k(self) -> int:
        return int(self.sigma.shape[0])


def _round_robin_pairs(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Fixed tournament schedule: each round pairs disjoint columns, every
    pair appears exactly once per full cycle. Deterministic by construction."""
    players = list(range(n))
    if n % 2:
        players.append(-1)  # bye slot
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        ps, qs = [], []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a >= 0 and b >= 0:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps), np.array(qs)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def svd(m: np.ndarray) -> SvdResult:
    """One-sided Jacobi SVD.

    Cyclic sweeps rotate column pairs of a working copy until every
    column dot product is negligible relative to the column norms;
    singular values are then the column norms. Pairs are visited in a
    fixed round-robin order whose rounds touch disjoint columns, so the
    rotations of a round batch into single vectorized updates while
    staying numerically identical to processing them one at a time.
    Deterministic: fixed sweep order, no pivoting, and each left singular
    vector is flipped so its largest-magnitude entry is non-negative.
    """
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] == 0:
        raise ShapeError(f"svd input must be a non-empty 2-D matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError("svd input must be finite")

    transposed = a.shape[0] < a.shape[1]
    work = a.T.copy() if transposed else a.copy()
    n_cols = work.shape[1]

    v = np.eye(n_cols)
    rounds = _round_robin_pairs(n_cols) if n_cols > 1 else []
    converged = n_cols == 1
    # Rotations are orthogonal, so total column energy is invariant and the
    # null-column floor can be fixed once up front.
    null_floor = (JACOBI_NULL_REL**2) * float(np.sum(work * work))
    worst = 0.0
    for _ in range(JACOBI_SWEEP_CAP):
        worst = 0.0
        for ps, qs in rounds:
            bp = work[:, ps]
            bq = work[:, qs]
            app = np.einsum("ij,ij->j", bp, bp)
            aqq = np.einsum("ij,ij->j", bq, bq)
            apq = np.einsum("ij,ij->j", bp, bq)
            live = (app > null_floor) & (aqq > null_floor)
            denom = np.sqrt(app * aqq)
            ratio = np.zeros_like(denom)
            np.divide(np.abs(apq), denom, out=ratio, where=live)
            round_worst = float(ratio.max(initial=0.0))
            if round_worst > worst:
                worst = round_worst
            rotate = ratio > JACOBI_TOL
            if not rotate.any():
                continue
            theta = 0.5 * np.arctan2(2.0 * apq, app - aqq)
            c = np.where(rotate, np.cos(theta), 1.0)
            s = np.where(rotate, np.sin(theta), 0.0)
            work[:, ps] = bp * c + bq * s
            work[:, qs] = bq * c - bp * s
            vp = v[:, ps]
            vq = v[:, qs]
            v[:, ps] = vp * c + vq * s
            v[:, qs] = vq * c - vp * s
        if worst <= JACOBI_TOL:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"jacobi svd did not converge within {JACOBI_SWEEP_CAP} sweeps "
            f"(residual {worst:.3e})",
            residual=worst,
        )

    sigma2 = np.sum(work * work, axis=0)
    sigma = np.where(sigma2 > null_floor, np.sqrt(sigma2), 0.0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]

    u = np.zeros_like(work)
    nonzero = sigma > 0.0
    u[:, nonzero] = work[:, nonzero] / sigma[nonzero]
    _complete_basis(u, np.flatnonzero(~nonzero))

    # Sign convention: largest-magnitude entry of each u column non-negative.
    for j in range(u.shape[1]):
        i = int(np.argmax(np.abs(u[:, j])))
        if u[i, j] < 0.0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]

    if transposed:
        u, v = v, u
    return SvdResult(u=u, sigma=sigma, v=v)


def _complete_basis(u: np.ndarray, empty_cols: np.ndarray) -> None:
    """Fill zero-norm columns of u with a deterministic orthonormal complement.

    For each empty column, starts from the canonical vector farthest from
    the span of the current columns: with orthonormal columns, e_i's
    residual norm squared is exactly 1 - |row i of u|^2, so the best
    candidate is the row with the smallest norm (first index on ties).
    """
    for j in empty_cols:
        row_mass = np.einsum("ij,ij->i", u, u)
        i = int(np.argmin(row_mass))
        e = np.zeros(u.shape[0])
        e[i] = 1.0
        e -= u @ (u.T @ e)
        # second orthogonalization pass guards against cancellation
        e -= u @ (u.T @ e)
        norm = float(np.linalg.norm(e))
        if norm <= 1e-6:
            raise ConvergenceError("could not complete orthonormal basis", residual=norm)
        u[:, j] = e / norm


def truncated_reconstruct(s: SvdResult, r: int) -> np.ndarray:
    """Rank-r reconstruction ``sum_{i<r} sigma_i u_i v_i^T``; r = 0 gives zeros."""
    if r < 0 or r > s.k:
        raise RangeError(f"rank {r} outside [0, {s.k}]")
    if r == 0:
        return np.zeros((s.u.shape[0], s.v.shape[0]))
    return (s.u[:, :r] * s.sigma[:r]) @ s.v[:, :r].T
