from __future__ import annotations

import numpy as np


def jacobi_svd(M: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD by one-sided Jacobi rotations.

    Returns ``U (m, p)``, ``s (p,)`` descending and ``Vt (p, n)`` with
    ``p = min(m, n)`` and ``M = U @ diag(s) @ Vt``. Columns of ``U`` that
    belong to zero singular values are zero vectors.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("jacobi_svd expects a matrix")
    m, n = M.shape
    if m < n:
        U, s, Vt = jacobi_svd(M.T, tol, max_sweeps)
        return Vt.T, s, U.T
    A = M.copy()
    V = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap, aq = A[:, p], A[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                sn = c * t
                A[:, [p, q]] = np.column_stack((c * ap - sn * aq, sn * ap + c * aq))
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - sn * vq
                V[:, q] = sn * vp + c * vq
        if not rotated:
            break
    s = np.sqrt((A * A).sum(axis=0))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    A = A[:, order]
    V = V[:, order]
    U = np.zeros_like(A)
    nz = s > 0
    U[:, nz] = A[:, nz] / s[nz]
    return U, s, V.T
