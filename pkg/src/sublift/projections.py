"""Euclidean projections used inside the primal-dual iterations.

All epigraph projections act on points ``(x, y)`` with ``x in R^n`` and a
scalar height ``y``.  The batched kernels are compiled with numba and loop
over independent instances, so the caller can hand them whole pixel/simplex
stacks at once.
"""

from __future__ import annotations

import itertools
import math

import numba
import numpy as np
from scipy.optimize import brentq

__all__ = [
    "ProjectionError",
    "project_epigraph_quadratic",
    "project_epigraph_quadratic_batch",
    "project_epigraph_pwl",
    "project_epigraph_pwl_batch",
    "project_epigraph_sum",
    "nearest_point_in_simplex",
    "project_epigraph_intersection",
    "project_spectral_ball",
    "quadratic_conjugate",
    "pwl_conjugate",
]

PWL_MAX_ITER = 100


class ProjectionError(RuntimeError):
    """An iterative projection did not terminate."""


def quadratic_conjugate(x, a, b, c):
    """Conjugate of ``a/2 |u|^2 + <b, u> + c``: ``|x - b|^2 / (2a) - c``."""
    x = np.asarray(x, dtype=float)
    return np.sum((x - b) ** 2, axis=-1) / (2.0 * a) - c


def pwl_conjugate(x, taus, values):
    """``max_k <tau_k, x> - values_k``."""
    x = np.asarray(x, dtype=float)
    return np.max(np.asarray(taus) @ x - np.asarray(values), axis=-1)


# ---------------------------------------------------------------------------
# quadratic epigraph


@numba.njit(cache=True)
def _parabola_root(r0, eta, a):
    # root of t^3/(2a^2) + t (1 - eta/a) - r0 on (0, r0); convex there
    lo = 0.0
    hi = r0
    t = r0
    k1 = 1.0 / (2.0 * a * a)
    k2 = 1.0 - eta / a
    for _ in range(100):
        h = k1 * t * t * t + k2 * t - r0
        if h > 0.0:
            hi = t
        else:
            lo = t
        dh = 3.0 * k1 * t * t + k2
        step_ok = dh > 0.0
        if step_ok:
            t_new = t - h / dh
            if t_new <= lo or t_new >= hi:
                t_new = 0.5 * (lo + hi)
        else:
            t_new = 0.5 * (lo + hi)
        if abs(t_new - t) <= 1e-15 * (1.0 + r0):
            return t_new
        t = t_new
    return t


@numba.njit(cache=True)
def _quad_project_kernel(p, eta, a, b, c, out_x, out_y):
    N, n = p.shape
    for k in range(N):
        ak = a[k]
        r0sq = 0.0
        for j in range(n):
            d = p[k, j] - b[k, j]
            r0sq += d * d
        yk = eta[k] + c[k]
        if r0sq <= 2.0 * ak * yk:
            for j in range(n):
                out_x[k, j] = p[k, j]
            out_y[k] = eta[k]
            continue
        r0 = math.sqrt(r0sq)
        if r0 <= 1e-300:
            for j in range(n):
                out_x[k, j] = b[k, j]
            out_y[k] = -c[k]
            continue
        t = _parabola_root(r0, yk, ak)
        s = t / r0
        for j in range(n):
            out_x[k, j] = b[k, j] + s * (p[k, j] - b[k, j])
        out_y[k] = t * t / (2.0 * ak) - c[k]


def project_epigraph_quadratic_batch(p, eta, a, b, c):
    """Batched projection onto ``{(x, y) : |x - b|^2/(2a) - c <= y}``.

    Parameters
    ----------
    p : ndarray, shape (N, n)
    eta, a, c : ndarray, shape (N,)
    b : ndarray, shape (N, n)
    """
    p = np.ascontiguousarray(p, dtype=float)
    eta = np.ascontiguousarray(eta, dtype=float)
    a = np.ascontiguousarray(np.broadcast_to(a, eta.shape), dtype=float)
    b = np.ascontiguousarray(np.broadcast_to(b, p.shape), dtype=float)
    c = np.ascontiguousarray(np.broadcast_to(c, eta.shape), dtype=float)
    if np.any(a <= 0):
        raise ValueError("quadratic curvature a must be positive")
    out_x = np.empty_like(p)
    out_y = np.empty_like(eta)
    _quad_project_kernel(p, eta, a, b, c, out_x, out_y)
    return out_x, out_y


def project_epigraph_quadratic(p, eta, a, b=None, c=0.0):
    """Project ``(p, eta)`` onto the epigraph of the conjugate of a quadratic.

    The quadratic is ``rho(u) = a/2 |u|^2 + <b, u> + c`` with ``a > 0``; its
    conjugate is ``|x - b|^2 / (2a) - c``.  By symmetry about the paraboloid
    axis the problem reduces to projecting onto a parabola in the plane
    spanned by the axis and ``p - b``, which is a cubic in the radial
    coordinate solved by safeguarded Newton.

    >>> project_epigraph_quadratic([0.0], -1.0, a=1.0)
    (array([0.]), 0.0)
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if a <= 0:
        raise ValueError("quadratic curvature a must be positive")
    b = np.zeros_like(p) if b is None else np.atleast_1d(np.asarray(b, dtype=float))
    x, y = project_epigraph_quadratic_batch(p[None], np.array([eta], float), np.array([a], float), b[None], np.array([c], float))
    return x[0], float(y[0])


# ---------------------------------------------------------------------------
# piecewise linear epigraph: primal active set


@numba.njit(cache=True)
def _small_solve(G, rhs, nw, M, x):
    # Gaussian elimination with partial pivoting on the leading nw x nw block;
    # M (>= nw x nw+1) and x are scratch buffers
    for i in range(nw):
        for j in range(nw):
            M[i, j] = G[i, j]
        M[i, nw] = rhs[i]
    for col in range(nw):
        piv = col
        best = abs(M[col, col])
        for r in range(col + 1, nw):
            if abs(M[r, col]) > best:
                best = abs(M[r, col])
                piv = r
        if best < 1e-14:
            return False
        if piv != col:
            for j in range(nw + 1):
                tmp = M[col, j]
                M[col, j] = M[piv, j]
                M[piv, j] = tmp
        for r in range(col + 1, nw):
            f = M[r, col] / M[col, col]
            for j in range(col, nw + 1):
                M[r, j] -= f * M[col, j]
    for i in range(nw - 1, -1, -1):
        s = M[i, nw]
        for j in range(i + 1, nw):
            s -= M[i, j] * x[j]
        x[i] = s / M[i, i]
    return True


@numba.njit(cache=True)
def _pwl_project_one(p, eta, tau, h, m, out, max_iter, fwork, W, inW):
    """Returns the number of active-set iterations, or -1 on failure.

    ``fwork`` (n+1, 2n+8) and ``W`` (n+1,), ``inW`` (>= m,) are scratch.
    """
    n = p.shape[0]
    best = -np.inf
    kbest = 0
    for k in range(m):
        v = -h[k]
        for j in range(n):
            v += tau[k, j] * p[j]
        if v > best:
            best = v
            kbest = k
    scale = 1.0 + abs(eta)
    for j in range(n):
        scale += abs(p[j])
    tol = 1e-13 * scale
    if best <= eta + tol:
        for j in range(n):
            out[j] = p[j]
        out[n] = eta
        return 0
    z0 = fwork[:, 0]
    z = fwork[:, 1]
    rhs = fwork[:, 2]
    d = fwork[:, 3]
    lam = fwork[:, 4]
    gram = fwork[:, 5:n + 6]
    M = fwork[:, n + 6:2 * n + 8]
    for j in range(n):
        z0[j] = p[j]
        z[j] = p[j]
    z0[n] = eta
    z[n] = best
    # feasible start: the vertical lift (p, f(p)) or a single-halfspace
    # projection lifted onto the epigraph, whichever is closest to z0
    dbest = (best - eta) ** 2
    for k in range(m):
        gz = -eta - h[k]
        gn = 1.0
        for j in range(n):
            gz += tau[k, j] * p[j]
            gn += tau[k, j] * tau[k, j]
        if gz <= 0.0:
            continue
        t = gz / gn
        for j in range(n):
            d[j] = p[j] - t * tau[k, j]
        yk = eta + t
        fk = -np.inf
        kk = k
        for k2 in range(m):
            v = -h[k2]
            for j in range(n):
                v += tau[k2, j] * d[j]
            if v > fk:
                fk = v
                kk = k2
        if fk <= yk + tol:
            # the halfspace projection is feasible, hence optimal
            for j in range(n):
                out[j] = d[j]
            out[n] = yk
            return 1
        dist = (fk - eta) ** 2
        for j in range(n):
            dist += (d[j] - p[j]) ** 2
        if dist < dbest:
            dbest = dist
            kbest = kk
            for j in range(n):
                z[j] = d[j]
            z[n] = fk
    for k in range(m):
        inW[k] = False
    W[0] = kbest
    inW[kbest] = True
    nw = 1
    for it in range(1, max_iter + 1):
        for a in range(nw):
            ka = W[a]
            s = z[n] - z0[n]  # g = (tau, -1), r = z0 - z
            for j in range(n):
                s += tau[ka, j] * (z0[j] - z[j])
            rhs[a] = s
            for bb in range(nw):
                kb = W[bb]
                g = 1.0
                for j in range(n):
                    g += tau[ka, j] * tau[kb, j]
                gram[a, bb] = g
        if not _small_solve(gram, rhs, nw, M, lam):
            return -1
        dn = 0.0
        for j in range(n + 1):
            d[j] = z0[j] - z[j]
        lsum = 0.0
        for a in range(nw):
            ka = W[a]
            for j in range(n):
                d[j] -= lam[a] * tau[ka, j]
            d[n] += lam[a]
            lsum += abs(lam[a]) * math.sqrt(gram[a, a])
        rn = 0.0
        for j in range(n + 1):
            rn += (z0[j] - z[j]) ** 2
            dn += d[j] * d[j]
        # a full working set pins z; the residual direction is pure roundoff,
        # which grows with the cancelling terms lam_a g_a on near-parallel sets
        if nw == n + 1 or math.sqrt(dn) <= tol + 1e-10 * (math.sqrt(rn) + lsum):
            if nw == 0:
                for j in range(n + 1):
                    out[j] = z[j]
                return it
            if nw == n + 1:
                for j in range(n + 1):
                    d[j] = 0.0
            amin = 0
            lmin = lam[0]
            for a in range(1, nw):
                if lam[a] < lmin:
                    lmin = lam[a]
                    amin = a
            if lmin >= -tol:
                for j in range(n + 1):
                    out[j] = z[j] + d[j]
                return it
            inW[W[amin]] = False
            for a in range(amin, nw - 1):
                W[a] = W[a + 1]
            nw -= 1
            continue
        step = 1.0
        block = -1
        # d carries absolute roundoff of order eps * |z0 - z|
        dnoise = 1e-11 * math.sqrt(dn) + 1e-13 * math.sqrt(rn)
        for k in range(m):
            if inW[k]:
                continue
            gd = -d[n]
            gz = -z[n]
            gn = 1.0
            for j in range(n):
                gd += tau[k, j] * d[j]
                gz += tau[k, j] * z[j]
                gn += tau[k, j] * tau[k, j]
            # gradients dependent on the working set give gd = 0 up to roundoff
            if gd > math.sqrt(gn) * dnoise:
                sk = (h[k] - gz) / gd
                if sk < 0.0:
                    sk = 0.0
                if sk < step:
                    step = sk
                    block = k
        for j in range(n + 1):
            z[j] += step * d[j]
        if block >= 0:
            if nw == n + 1:
                return -1
            W[nw] = block
            inW[block] = True
            nw += 1
    return -1


@numba.njit(cache=True)
def _pwl_project_kernel(p, eta, taus, h, counts, out_x, out_y, iters, max_iter):
    N, n = p.shape
    out = np.empty(n + 1)
    fwork = np.empty((n + 1, 2 * n + 8))
    W = np.empty(n + 1, dtype=np.int64)
    inW = np.zeros(taus.shape[1], dtype=np.bool_)
    status = 0
    for k in range(N):
        it = _pwl_project_one(p[k], eta[k], taus[k], h[k], counts[k], out, max_iter, fwork, W, inW)
        iters[k] = it
        if it < 0:
            status = -1
            for j in range(n):
                out_x[k, j] = p[k, j]
            out_y[k] = eta[k]
            continue
        for j in range(n):
            out_x[k, j] = out[j]
        out_y[k] = out[n]
    return status


def project_epigraph_pwl_batch(p, eta, taus, values, counts=None, return_iterations=False):
    """Batched projection onto ``{(x, y) : <tau_k, x> - values_k <= y for all k}``.

    Parameters
    ----------
    p : ndarray, shape (N, n)
    eta : ndarray, shape (N,)
    taus : ndarray, shape (N, m, n)
    values : ndarray, shape (N, m)
    counts : ndarray of int, shape (N,), optional
        Number of valid constraints per instance; rows beyond it are ignored.
    """
    p = np.ascontiguousarray(p, dtype=float)
    eta = np.ascontiguousarray(eta, dtype=float)
    taus = np.ascontiguousarray(taus, dtype=float)
    values = np.ascontiguousarray(values, dtype=float)
    if counts is None:
        counts = np.full(len(p), taus.shape[1], dtype=np.int64)
    counts = np.ascontiguousarray(counts, dtype=np.int64)
    if np.any(counts < 1):
        raise ValueError("every instance needs at least one constraint")
    out_x = np.empty_like(p)
    out_y = np.empty_like(eta)
    iters = np.empty(len(p), dtype=np.int64)
    status = _pwl_project_kernel(p, eta, taus, values, counts, out_x, out_y, iters, PWL_MAX_ITER)
    if status < 0:
        bad = np.flatnonzero(iters < 0)
        k = int(bad[0])
        err = ProjectionError(
            f"active-set method failed on {len(bad)} instance(s) within {PWL_MAX_ITER} iterations; "
            f"first: p={p[k].tolist()}, eta={eta[k]}, m={counts[k]}"
        )
        err.instances = (p[bad], eta[bad], taus[bad], values[bad], counts[bad])
        raise err
    if return_iterations:
        return out_x, out_y, iters
    return out_x, out_y


def project_epigraph_pwl(p, eta, taus, values):
    """Project onto the epigraph of ``x -> max_k <tau_k, x> - values_k``.

    Solved as a small quadratic program by a primal active-set method started
    from the feasible point ``(p, f(p))``.
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    taus = np.asarray(taus, dtype=float).reshape(-1, p.size)
    values = np.asarray(values, dtype=float).reshape(-1)
    x, y = project_epigraph_pwl_batch(p[None], np.array([eta], float), taus[None], values[None])
    return x[0], float(y[0])


# ---------------------------------------------------------------------------
# composite sets


def _face_subsets(k):
    out = []
    for size in range(1, k + 1):
        out.extend(itertools.combinations(range(k), size))
    return out


def nearest_point_in_simplex(z, verts):
    """Euclidean projection of points ``z`` (N, n) onto the simplex with
    vertex rows ``verts`` (n + 1, n), by enumerating its faces."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    best = None
    best_d = np.full(len(z), np.inf)
    for face in _face_subsets(len(verts)):
        V = verts[list(face)]
        if len(face) == 1:
            cand = np.broadcast_to(V[0], z.shape)
            lam_ok = np.ones(len(z), dtype=bool)
        else:
            base = V[-1]
            E = (V[:-1] - base).T  # n x (k-1)
            coef, *_ = np.linalg.lstsq(E, (z - base).T, rcond=None)
            coef = coef.T
            lam_ok = np.all(coef >= -1e-12, axis=1) & (coef.sum(axis=1) <= 1 + 1e-12)
            cand = base + coef @ E.T
        d = np.sum((cand - z) ** 2, axis=1)
        take = lam_ok & (d < best_d)
        if best is None:
            best = np.array(cand, dtype=float, copy=True)
        best[take] = cand[take]
        best_d[take] = d[take]
    return best


def project_epigraph_sum(p, eta, a, b, c, vertices, return_components=False):
    """Project onto the Minkowski sum of two epigraphs.

    The set is ``epi(rho^*) + epi(sigma)`` with ``rho`` the quadratic
    ``(a, b, c)`` and ``sigma(x) = max_j <t_j, x>`` the support function of
    the simplex with the given vertices; it equals the epigraph of
    ``h^*`` with ``h = rho + indicator of the simplex``.

    The projection ``(x, y)`` satisfies ``x = p - lam u`` and ``y = eta + lam``
    with ``u`` the maximizer in ``h^*(x)``.  For fixed ``lam`` that maximizer
    is the nearest simplex point to ``(p - b) / (a + lam)``, which leaves a
    scalar equation in ``lam``.  The summands are recovered as
    ``x_f = a u + b`` (a gradient of ``rho``) and ``x_g = x - x_f`` (a normal
    of the simplex at ``u``), both on the boundary of their epigraph.

    Returns ``(x, y)``, or ``((x, y), (x_f, y_f), (x_g, y_g))`` when
    ``return_components`` is set.
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    verts = np.asarray(vertices, dtype=float).reshape(-1, p.size)
    b = np.zeros_like(p) if b is None else np.atleast_1d(np.asarray(b, dtype=float))
    if not a > 0:
        raise ValueError("quadratic curvature must be positive")
    rho = lambda u: 0.5 * a * (u @ u) + b @ u + c

    def maximizer(lam):
        return nearest_point_in_simplex(((p - b) / (a + lam))[None], verts)[0]

    def excess(lam):
        u = maximizer(lam)
        x = p - lam * u
        return x @ u - rho(u) - eta - lam

    u = maximizer(0.0)
    if excess(0.0) <= 1e-14 * (1.0 + abs(eta)):
        lam = 0.0
    else:
        hi = 1.0
        while excess(hi) > 0:
            hi *= 2.0
            if hi > 1e300:
                raise ProjectionError("Minkowski-sum projection: no bracket for the multiplier")
        lam = brentq(excess, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        u = maximizer(lam)
    x = p - lam * u
    y = float(eta + lam)
    if not return_components:
        return x, y
    xf = a * u + b
    yf = float(xf @ u - rho(u))
    xg = x - xf
    return (x, y), (xf, yf), (xg, y - yf)


def project_epigraph_intersection(p, eta, project_first, project_second, tol=1e-7, max_sweeps=200):
    """Dykstra's alternating projection onto the intersection of two sets.

    ``project_first`` and ``project_second`` map ``(p, eta)`` to the
    projection onto the respective epigraph.  Plain alternation would only
    find some point of the intersection.
    """
    z = np.append(np.atleast_1d(np.asarray(p, dtype=float)), eta)
    inc1 = np.zeros_like(z)
    inc2 = np.zeros_like(z)
    x = z.copy()
    for sweep in range(max_sweeps):
        t = x + inc1
        y1, s1 = project_first(t[:-1], t[-1])
        y = np.append(y1, s1)
        inc1 = t - y
        t = y + inc2
        x1, s2 = project_second(t[:-1], t[-1])
        x_new = np.append(x1, s2)
        inc2 = t - x_new
        change = np.linalg.norm(x_new - x)
        gap = np.linalg.norm(x_new - y)
        x = x_new
        if change <= tol and gap <= tol:
            return x[:-1], float(x[-1])
    raise ProjectionError(f"Dykstra did not converge in {max_sweeps} sweeps (change {change:.3g}, gap {gap:.3g})")


# ---------------------------------------------------------------------------
# spectral norm ball


@numba.njit(cache=True)
def _clamp_2x2_kernel(M, radius, out):
    for k in range(M.shape[0]):
        a, b = M[k, 0, 0], M[k, 0, 1]
        c, d = M[k, 1, 0], M[k, 1, 1]
        E = 0.5 * (a + d)
        F = 0.5 * (a - d)
        G = 0.5 * (c + b)
        H = 0.5 * (c - b)
        Q = math.hypot(E, H)
        R = math.hypot(F, G)
        s1 = Q + R
        r = radius[k]
        if s1 <= r:
            out[k] = M[k]
            continue
        s2 = Q - R  # signed; |s2| is the smaller singular value
        a1 = math.atan2(G, F)
        a2 = math.atan2(H, E)
        theta = 0.5 * (a2 - a1)
        phi = 0.5 * (a2 + a1)
        s1c = min(s1, r)
        s2c = math.copysign(min(abs(s2), r), s2)
        cp, sp = math.cos(phi), math.sin(phi)
        ct, st = math.cos(theta), math.sin(theta)
        # M = Rot(phi) diag(s1, s2) Rot(theta)
        out[k, 0, 0] = cp * s1c * ct - sp * s2c * st
        out[k, 0, 1] = -cp * s1c * st - sp * s2c * ct
        out[k, 1, 0] = sp * s1c * ct + cp * s2c * st
        out[k, 1, 1] = -sp * s1c * st + cp * s2c * ct


def _clamp_2x2(M, radius):
    lead = M.shape[:-2]
    flat = np.ascontiguousarray(M.reshape(-1, 2, 2))
    r = np.ascontiguousarray(np.broadcast_to(radius, lead), dtype=float).reshape(-1)
    out = np.empty_like(flat)
    _clamp_2x2_kernel(flat, r, out)
    return out.reshape(M.shape)


def project_spectral_ball(M, radius=1.0):
    """Clamp the singular values of ``M`` (shape ``(..., d, n)``) to ``radius``.

    ``radius`` broadcasts against the leading dimensions.  2x2 blocks use the
    closed-form rotation decomposition; other shapes fall back to LAPACK.
    """
    M = np.asarray(M, dtype=float)
    radius = np.asarray(radius, dtype=float)
    d, n = M.shape[-2:]
    if d == 2 and n == 2:
        return _clamp_2x2(M, radius)
    if n == 1 or d == 1:
        nrm = np.sqrt(np.sum(M * M, axis=(-2, -1)))
        scale = np.where(nrm > radius, radius / np.maximum(nrm, 1e-300), 1.0)
        return M * scale[..., None, None]
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    sc = np.minimum(s, radius[..., None] if radius.ndim else radius)
    out = (U * sc[..., None, :]) @ Vt
    inside = s[..., 0] <= radius
    out[inside] = M[inside]
    return out
