"""Lifted vectorial total variation.

The dual set of the lifted TV is described by finitely many spectral-norm
bounds, one per simplex, on ``D_q^i = Q_iD (T_iD)^{-1}``.  This module
assembles those matrices, offers a sampling oracle for the underlying
Lipschitz constraints, and evaluates the nuclear-norm TV of an unlifted
field for energy reporting.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .label_space import Triangulation

__all__ = ["dq_matrix", "check_K_membership", "tv_unlifted", "forward_gradient", "dq_operator"]


def dq_matrix(tri: Triangulation, q_pixel, i):
    """``Q_iD (T_iD)^{-1}`` for one pixel.

    Parameters
    ----------
    q_pixel : array_like, shape (d, |V|)
        Dual vectors ``q^j`` as columns.
    i : int
        Simplex index.
    """
    q = np.asarray(q_pixel, dtype=float)
    idx = tri.simplices[i]
    QD = q[:, idx[:-1]] - q[:, idx[-1:]]
    return QD @ tri.TD_inv[i]


def dq_operator(tri: Triangulation):
    """Sparse map ``(|V|, S*n)`` taking the rows of ``q`` to all ``D_q^i``.

    For ``q`` of shape (..., |V|), ``q @ Dmat`` reshaped to (..., S, n) gives
    the rows of every ``D_q^i``.
    """
    S, n = tri.n_simplices, tri.dim
    Dm = np.vstack([np.eye(n), -np.ones((1, n))])  # (n+1, n)
    blocks = Dm[None] @ tri.TD_inv  # (S, n+1, n)
    rows = np.repeat(tri.simplices[:, :, None], n, axis=2)
    cols = np.arange(S)[:, None, None] * n + np.arange(n)[None, None, :]
    cols = np.broadcast_to(cols, rows.shape)
    return sp.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(tri.n_vertices, S * n))


def _segment_gap(q, tri, i, j, alpha, beta):
    Qa = q[:, tri.simplices[i]] @ alpha
    Qb = q[:, tri.simplices[j]] @ beta
    Ta = tri.T[i] @ alpha
    Tb = tri.T[j] @ beta
    return np.linalg.norm(Qa - Qb, axis=0) - np.linalg.norm(Ta - Tb, axis=0)


def check_K_membership(tri: Triangulation, q_pixel, num_samples, rng=None, directed=True):
    """Sample the Lipschitz constraints ``|Q_i a - Q_j b| <= |T_i a - T_j b|``.

    Random simplex pairs (including ``i == j`` and cross-simplex pairs) with
    random barycentric coordinates are tested.  With ``directed`` the top
    singular direction of every ``D_q^i`` is also probed with a short
    segment inside simplex ``i``.

    Returns
    -------
    ok : bool
        True when the worst violation is at most ``1e-7``.
    worst : float
        Maximum of ``|Q_i a - Q_j b| - |T_i a - T_j b|`` over the samples.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be positive")
    rng = np.random.default_rng(rng)
    q = np.asarray(q_pixel, dtype=float)
    S, n = tri.n_simplices, tri.dim
    worst = -np.inf
    ii = rng.integers(S, size=num_samples)
    jj = np.where(rng.random(num_samples) < 0.5, ii, rng.integers(S, size=num_samples))
    alpha = rng.dirichlet(np.ones(n + 1), size=num_samples)
    beta = rng.dirichlet(np.ones(n + 1), size=num_samples)
    for i in range(S):
        for j in range(S):
            sel = (ii == i) & (jj == j)
            if np.any(sel):
                gap = _segment_gap(q, tri, i, j, alpha[sel].T, beta[sel].T)
                worst = max(worst, float(gap.max()))
    if directed:
        bary = np.full(n + 1, 1.0 / (n + 1))
        for i in range(S):
            D = dq_matrix(tri, q, i)
            _, sv, Vt = np.linalg.svd(D)
            if sv[0] == 0:
                continue
            # chord through the barycenter along the top right-singular vector
            step = tri.A[i] @ Vt[0]
            with np.errstate(divide="ignore"):
                lim = -bary / step
            t_hi = np.min(lim[step < 0]) if np.any(step < 0) else 0.0
            t_lo = np.max(lim[step > 0]) if np.any(step > 0) else 0.0
            a = np.clip(bary + t_hi * step, 0.0, None)
            b = np.clip(bary + t_lo * step, 0.0, None)
            gap = _segment_gap(q, tri, i, i, a[:, None], b[:, None])
            worst = max(worst, float(gap[0]))
    return bool(worst <= 1e-7), worst


def forward_gradient(u):
    """Forward differences of a (H, W, m) field, Neumann boundary; (H, W, 2, m)."""
    u = np.asarray(u, dtype=float)
    g = np.zeros(u.shape[:2] + (2,) + u.shape[2:])
    g[:-1, :, 0] = u[1:] - u[:-1]
    g[:, :-1, 1] = u[:, 1:] - u[:, :-1]
    return g


def tv_unlifted(u, weight=1.0):
    """``sum_x lambda(x) |grad u(x)|_{S1}`` for a field of shape (H, W) or (H, W, n)."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 2:
        u = u[..., None]
    J = forward_gradient(u)  # (H, W, 2, n)
    if J.shape[-1] == 1:
        nuc = np.linalg.norm(J[..., 0], axis=-1)
    else:
        nuc = np.linalg.svd(J, compute_uv=False).sum(axis=-1)
    return float(np.sum(np.broadcast_to(weight, nuc.shape) * nuc))
