"""Independent brute-force references and shared instances for the tests."""

import itertools

import numpy as np

from sublift.dataterm import BaselineLinear, Quadratic, SampledConvexified, TruncatedQuadratic


def triangle_projection(z, verts):
    """Nearest point of a triangle/segment/tetrahedron (vertex rows) via
    exhaustive face search with a dense local check."""
    z = np.atleast_2d(z)
    verts = np.asarray(verts, float)
    best = np.empty_like(z)
    bestd = np.full(len(z), np.inf)
    k = len(verts)
    for r in range(1, k + 1):
        for face in itertools.combinations(range(k), r):
            V = verts[list(face)]
            # minimize |sum_j l_j V_j - z| with sum l = 1 by KKT
            G = np.block([[2 * V @ V.T, np.ones((r, 1))], [np.ones((1, r)), np.zeros((1, 1))]])
            rhs = np.concatenate([2 * z @ V.T, np.ones((len(z), 1))], axis=1)
            sol = np.linalg.lstsq(G, rhs.T, rcond=None)[0].T[:, :r]
            ok = np.all(sol >= -1e-12, axis=1)
            cand = sol @ V
            d = np.sum((cand - z) ** 2, axis=1)
            take = ok & (d < bestd)
            best[take] = cand[take]
            bestd[take] = d[take]
    return best


def grad2(u):
    g = np.zeros(u.shape[:2] + (2,) + u.shape[2:])
    g[:-1, :, 0] = u[1:] - u[:-1]
    g[:, :-1, 1] = u[:, 1:] - u[:, :-1]
    return g


def div2(p):
    out = np.zeros(p.shape[:2] + p.shape[3:])
    out[:-1] += p[:-1, :, 0]
    out[1:] -= p[:-1, :, 0]
    out[:, :-1] += p[:, :-1, 1]
    out[:, 1:] -= p[:, :-1, 1]
    return out


def nuclear_tv(u, lam):
    J = grad2(u)
    return float(np.sum(lam * np.linalg.svd(J, compute_uv=False).sum(-1)))


def direct_rof(I, lam, verts, iters=20000, tol=1e-12):
    """Unlifted vectorial ROF with labels restricted to a simplex, by PDHG
    with the accelerated (strongly convex) step rule."""
    H, W, n = I.shape
    u = I.copy()
    u_bar = u.copy()
    p = np.zeros((H, W, 2, n))
    L = np.sqrt(8.0)
    tau = sigma = 1.0 / L
    for k in range(iters):
        p = p + sigma * grad2(u_bar)
        U, s, Vt = np.linalg.svd(p, full_matrices=False)
        p = (U * np.minimum(s, lam)[..., None, :]) @ Vt
        u_old = u
        z = u + tau * div2(p)
        u = triangle_projection(((z + tau * I) / (1 + tau)).reshape(-1, n), verts).reshape(H, W, n)
        theta = 1.0 / np.sqrt(1 + 2 * tau)
        tau, sigma = tau * theta, sigma / theta
        u_bar = u + theta * (u - u_old)
        if np.linalg.norm(u - u_old) <= tol * max(np.linalg.norm(u), 1e-300):
            break
    return u


def rof_energy(u, I, lam):
    return 0.5 * float(np.sum((u - I) ** 2)) + nuclear_tv(u, lam)


def quad_oracle(p, eta, a, b, c, k=61, levels=7):
    """Zoomed grid search over the paraboloid surface (x, f(x))."""
    p = np.asarray(p, float)
    f = lambda x: np.sum((x - b) ** 2, axis=-1) / (2 * a) - c
    if f(p) <= eta:
        return p, eta
    n = len(p)
    R = np.linalg.norm(p - b) + abs(eta) + 2
    lo, hi = b - R, b + R
    for _ in range(levels):
        axes = [np.linspace(lo[j], hi[j], k) for j in range(n)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, n)
        d = np.sum((grid - p) ** 2, axis=1) + (f(grid) - eta) ** 2
        x = grid[np.argmin(d)]
        h = (hi - lo) / (k - 1)
        lo, hi = x - 3 * h, x + 3 * h
    return x, f(x)


def pwl_oracle(p, eta, taus, h):
    """Solve the equality-constrained QP for every active subset, keep the
    best feasible KKT point."""
    z0 = np.append(p, eta)
    G = np.column_stack([taus, -np.ones(len(taus))])
    m = len(taus)
    if np.all(G @ z0 <= h + 1e-12):
        return z0
    best, bestd = None, np.inf
    for r in range(1, min(m, len(z0)) + 1):
        for S in itertools.combinations(range(m), r):
            Gs = G[list(S)]
            M = Gs @ Gs.T
            if abs(np.linalg.det(M)) < 1e-12:
                continue
            lam = np.linalg.solve(M, Gs @ z0 - h[list(S)])
            if np.any(lam < -1e-10):
                continue
            z = z0 - Gs.T @ lam
            if np.any(G @ z > h + 1e-9):
                continue
            dd = np.sum((z - z0) ** 2)
            if dd < bestd:
                best, bestd = z, dd
    return best


def _zoom_max(f, lo, hi, k=101, levels=6):
    """max of f over [lo, hi] by repeated grid zooming; f maps (K, N) grids."""
    lo = np.broadcast_to(np.asarray(lo, float), np.shape(f.batch)).copy()
    hi = np.broadcast_to(np.asarray(hi, float), lo.shape).copy()
    for _ in range(levels):
        t = np.linspace(0, 1, k)[:, None]
        g = lo + t * (hi - lo)
        vals = f(g)
        j = np.argmax(vals, axis=0)
        h = (hi - lo) / (k - 1)
        best = g[j, np.arange(g.shape[1])]
        lo = np.maximum(lo, best - 2 * h)
        hi = np.minimum(hi, best + 2 * h)
    return np.max(vals, axis=0)


def conj_simplex_quad_1d(x, a, b, c, lo, hi):
    """(rho + indicator[lo, hi])^* by brute-force maximization over u."""
    x = np.atleast_1d(np.asarray(x, float))

    def obj(u):
        return x[None, :] * u - (0.5 * a * u ** 2 + b * u + c)

    obj.batch = x
    return _zoom_max(obj, lo, hi)


def grid_epigraph_projection_1d(p, eta, conj, lo=-6.0, hi=6.0, k=401, levels=6):
    """Project onto {(x, y): conj(x) <= y} in the plane by zoomed grid search
    over the boundary graph."""
    if conj(np.array([p]))[0] <= eta:
        return np.array([p, eta])
    for _ in range(levels):
        xs = np.linspace(lo, hi, k)
        d = (xs - p) ** 2 + (conj(xs) - eta) ** 2
        j = int(np.argmin(d))
        h = xs[1] - xs[0]
        lo, hi = xs[j] - 2 * h, xs[j] + 2 * h
    x = xs[j]
    return np.array([x, conj(np.array([x]))[0]])


def svd_clamp(M, r=1.0):
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    return U @ np.diag(np.minimum(s, r)) @ Vt


def simplex_grid(tri, i, k):
    """Barycentric grid with k intervals per edge (about k^2/2 points for n=2)."""
    n = tri.dim
    combos = [c for c in itertools.product(range(k + 1), repeat=n) if sum(c) <= k]
    a = np.array(combos, float) / k
    alpha = np.column_stack([a, 1 - a.sum(1)])
    return alpha, alpha @ tri.T[i].T


def brute_conjugate(tri, i, v, rho, k=140):
    """sup over a dense grid of the simplex of <E_i alpha, v> - rho(T_i alpha)."""
    alpha, u = simplex_grid(tri, i, k)
    return float(np.max(alpha @ v[tri.simplices[i]] - rho(u)))


def brute_lower_hull_2d(pts, vals, tol=1e-9):
    """Envelope at the samples from every plane through three samples that
    minorizes all samples (exhaustive, O(m^4))."""
    m = len(pts)
    env = np.full(m, -np.inf)
    X = np.column_stack([pts, np.ones(m)])
    for tri_idx in itertools.combinations(range(m), 3):
        M = X[list(tri_idx)]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        coef = np.linalg.solve(M, vals[list(tri_idx)])
        plane = X @ coef
        if np.all(plane <= vals + tol):
            env = np.maximum(env, plane)
    return env


def make_terms(tri, rng, P=4):
    I = rng.random((P, 2))
    a = rng.uniform(0.5, 2.0, P)
    b = -a[:, None] * I
    c = 0.5 * a * np.sum(I * I, 1)
    quad = Quadratic(a, b, c)
    trunc = TruncatedQuadratic(a, b, c, rng.uniform(0.01, 0.2, P))
    pts = np.array(list(itertools.product(np.linspace(0, 1, 9), repeat=2)))
    vals = np.abs(np.sin(3 * pts[None, :, 0] + 5 * pts[None, :, 1] + rng.random((P, 1)) * 3))
    sampled = SampledConvexified.from_samples(tri, pts, vals)
    base = BaselineLinear(rng.random((P, tri.n_vertices)))
    return quad, trunc, sampled, base
