"""Dense real linear-algebra kernels: thin SVD, subspace alignment, rank-1 sums.

All computation is done in float64 regardless of how the inputs were stored;
adapter weights frequently arrive as f16/bf16 and the squared projection sums
used downstream lose precision in anything narrower.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyChannelSet,
    InvalidMatrix,
    NotUnitVector,
    SvdNoConvergence,
)

# Iteration cap for the Jacobi fallback path, in full sweeps.
MAX_JACOBI_SWEEPS = 100

# Unit-norm admission tolerance for vectors fed to subspace_alignment.
UNIT_NORM_TOL = 1e-8


def as_matrix(values) -> np.ndarray:
    """Coerce to a finite 2-D float64 array, raising InvalidMatrix otherwise."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise InvalidMatrix(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidMatrix("matrix contains NaN or Inf entries")
    return m


@dataclass(frozen=True)
class ThinSvd:
    """Thin SVD M = U @ diag(s) @ V.T with k = min(m, n).

    U is m-by-k and V is n-by-k, both with orthonormal columns; s is
    non-negative and non-increasing.
    """

    U: np.ndarray
    s: np.ndarray
    V: np.ndarray

    @property
    def rank_bound(self) -> int:
        return self.s.shape[0]


def thin_svd(matrix) -> ThinSvd:
    """Thin SVD of a real matrix.

    Uses LAPACK's divide-and-conquer driver; on the (rare) non-convergence
    of that driver, falls back to a one-sided Jacobi iteration capped at
    MAX_JACOBI_SWEEPS sweeps.

    Raises InvalidMatrix for non-finite input and SvdNoConvergence if the
    fallback also fails to converge.
    """
    m = as_matrix(matrix)
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
        return ThinSvd(U=u, s=s, V=vt.T)
    except np.linalg.LinAlgError:
        return jacobi_svd(m, max_sweeps=MAX_JACOBI_SWEEPS)


def jacobi_svd(matrix, max_sweeps: int = MAX_JACOBI_SWEEPS) -> ThinSvd:
    """One-sided Jacobi thin SVD.

    Orthogonalizes the columns of the tall orientation of the matrix by
    plane rotations until all column pairs are numerically orthogonal.
    Slow but has no failure modes other than exceeding the sweep cap.
    """
    m = as_matrix(matrix)
    transposed = m.shape[0] < m.shape[1]
    a = (m.T if transposed else m).astype(np.float64, copy=True)
    rows, cols = a.shape
    v = np.eye(cols)

    converged = False
    for _ in range(max_sweeps):
        rotated = False
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                app = float(a[:, p] @ a[:, p])
                aqq = float(a[:, q] @ a[:, q])
                apq = float(a[:, p] @ a[:, q])
                if abs(apq) <= 1e-15 * np.sqrt(app * aqq) or apq == 0.0:
                    continue
                rotated = True
                tau = (aqq - app) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.hypot(1.0, tau)) if tau != 0 else 1.0
                c = 1.0 / np.hypot(1.0, t)
                s_ = t * c
                gp = c * a[:, p] - s_ * a[:, q]
                gq = s_ * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = gp, gq
                hp = c * v[:, p] - s_ * v[:, q]
                hq = s_ * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = hp, hq
        if not rotated:
            converged = True
            break
    if not converged:
        raise SvdNoConvergence(
            f"one-sided Jacobi SVD did not converge within {max_sweeps} sweeps"
        )

    norms = np.linalg.norm(a, axis=0)
    order = np.argsort(-norms, kind="stable")
    norms = norms[order]
    a = a[:, order]
    v = v[:, order]

    u = np.zeros_like(a)
    tiny = np.finfo(np.float64).tiny
    positive = norms > tiny
    u[:, positive] = a[:, positive] / norms[positive]
    if not np.all(positive):
        # Complete zero-norm columns to keep U orthonormal.
        n_pos = int(np.count_nonzero(positive))
        q_full, _ = np.linalg.qr(
            np.hstack([u[:, :n_pos], np.eye(rows)]) if n_pos else np.eye(rows)
        )
        u[:, n_pos:] = q_full[:, n_pos:cols]
        norms = norms.copy()
        norms[~positive] = 0.0

    if transposed:
        return ThinSvd(U=v, s=norms, V=u)
    return ThinSvd(U=u, s=norms, V=v)


def subspace_alignment(x, basis) -> float:
    """Squared norm of the projection of unit vector x onto span(basis).

    ``basis`` must be d-by-K with orthonormal columns; the score is
    ||basis.T @ x||^2 clamped to [0, 1].  The d-by-d projector is never
    formed.  A square basis spans the whole space, where the projector is
    the identity and the score of any unit vector is exactly 1.
    """
    vec = np.asarray(x, dtype=np.float64).reshape(-1)
    b = np.asarray(basis, dtype=np.float64)
    if b.ndim != 2:
        raise DimensionMismatch(f"basis must be 2-D, got shape {b.shape}")
    d, k = b.shape
    if k > d:
        raise DimensionMismatch(f"basis has more columns ({k}) than rows ({d})")
    if vec.shape[0] != d:
        raise DimensionMismatch(f"vector has dim {vec.shape[0]}, basis rows {d}")
    norm = float(np.linalg.norm(vec))
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        raise NotUnitVector(f"||x|| = {norm!r} is not 1 within {UNIT_NORM_TOL}")
    if k == d:
        return 1.0
    coeff = b.T @ vec
    return float(min(max(float(coeff @ coeff), 0.0), 1.0))


def reconstruct(channels, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Sum of gated rank-1 terms sigma_i * g_i * u_i v_i^T.

    Channels with an unset gate contribute at full weight (g = 1).  An empty
    channel sequence is only representable when ``shape`` supplies the output
    dimensions; otherwise EmptyChannelSet is raised.
    """
    channels = list(channels)
    if not channels:
        if shape is None:
            raise EmptyChannelSet("no channels and no output shape given")
        return np.zeros(shape, dtype=np.float64)

    m = channels[0].left.shape[0]
    n = channels[0].right.shape[0]
    if shape is not None and shape != (m, n):
        raise DimensionMismatch(f"channels are {m}x{n}, requested shape {shape}")
    for ch in channels:
        if ch.left.shape[0] != m or ch.right.shape[0] != n:
            raise DimensionMismatch("channels disagree on matrix dimensions")

    left = np.column_stack([ch.left for ch in channels])
    right = np.column_stack([ch.right for ch in channels])
    weights = np.array(
        [ch.sigma * (1.0 if ch.gate is None else ch.gate) for ch in channels],
        dtype=np.float64,
    )
    return (left * weights) @ right.T
