"""Pointwise dataterms, their per-simplex conjugates and convex envelopes.

Every dataterm stores its parameters densely per pixel (pixels are flattened
row-major).  A dataterm knows

* its value ``rho(u)``,
* the conjugate of its restriction to one simplex, ``(rho + delta_i)^*``,
* the lifted conjugate ``<E_i b_i, v> + (rho + delta_i)^*(A_i^T E_i^T v)``,
* the per-simplex convex envelope ``(rho + delta_i)^**`` (for reporting),
* how to express the epigraph of ``(rho + delta_i)^*`` through the simple
  epigraphs the solver can project onto.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .label_space import Triangulation
from .projections import nearest_point_in_simplex

__all__ = [
    "LowerHull",
    "convexify_sampled",
    "Quadratic",
    "TruncatedQuadratic",
    "SampledConvexified",
    "BaselineLinear",
    "EpigraphPieces",
    "rho_i_star",
    "evaluate_rho",
    "evaluate_convexified",
    "simplex_sample_points",
]

HULL_TOL = 1e-9


# ---------------------------------------------------------------------------
# lower convex hulls


@dataclass
class LowerHull:
    """Lower convex hull of a sampled function on a simplex.

    ``facets`` holds one affine minorant per row as ``(w, offset)`` so that
    the envelope is ``max_f <w_f, u> + offset_f`` on the sampled domain.
    ``vertices`` indexes the samples that lie on the envelope (ties
    included); ``extreme`` is the subset of extreme points, which alone
    determines the envelope and its conjugate.
    """

    points: np.ndarray
    values: np.ndarray
    facets: np.ndarray
    vertices: np.ndarray
    extreme: Optional[np.ndarray] = None

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return np.max(u @ self.facets[:, :-1].T + self.facets[:, -1], axis=-1)

    @property
    def hull_points(self):
        return self.points[self.vertices]

    @property
    def hull_values(self):
        return self.values[self.vertices]


def convexify_sampled(points, values, tol=HULL_TOL) -> LowerHull:
    """Tightest convex minorant of samples ``(tau, rho(tau))`` on their hull.

    Parameters
    ----------
    points : array_like, shape (m, n)
        Sample locations; should include the simplex vertices and affinely
        span the simplex.
    values : array_like, shape (m,)

    Samples lying on the envelope within ``tol`` are all kept as hull
    vertices.  A sample set that is coplanar in graph space yields the single
    affine function through it.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    vals = np.asarray(values, dtype=float).reshape(-1)
    m, n = pts.shape
    if m < n + 1:
        raise ValueError("need at least n + 1 samples")
    scale = 1.0 + np.max(np.abs(vals))
    lifted = np.column_stack([pts, vals])
    facets = None
    extreme = None
    try:
        hull = ConvexHull(lifted)
        eq = hull.equations
        lower = eq[:, n] < -1e-12
        if np.any(lower):
            eq = eq[lower]
            facets = np.column_stack([-eq[:, :n] / eq[:, n:n + 1], -eq[:, n + 1] / eq[:, n]])
            extreme = np.unique(hull.simplices[lower])
    except QhullError:
        facets = None
    if facets is None:
        X = np.column_stack([pts, np.ones(m)])
        coef, *_ = np.linalg.lstsq(X, vals, rcond=None)
        if np.max(np.abs(X @ coef - vals)) > 1e-7 * scale:
            # flat in the label domain: fall back to the lowest sample
            coef = np.zeros(n + 1)
            coef[-1] = vals.min()
        facets = coef[None, :]
        extreme = _domain_extreme_points(pts)
    env = np.max(pts @ facets[:, :n].T + facets[:, n], axis=1)
    on_hull = np.flatnonzero(vals <= env + tol * scale)
    extreme = np.intersect1d(extreme, on_hull)
    if len(extreme) == 0:
        extreme = on_hull
    return LowerHull(pts, vals, facets, on_hull, extreme)


def _domain_extreme_points(pts):
    if pts.shape[1] == 1:
        return np.unique([np.argmin(pts[:, 0]), np.argmax(pts[:, 0])])
    try:
        return np.sort(ConvexHull(pts).vertices)
    except QhullError:
        return np.arange(len(pts))


def simplex_sample_points(T, resolution):
    """Barycentric grid with ``resolution`` intervals per edge of a simplex.

    ``T`` has the vertices as columns, shape (n, n + 1).
    """
    n = T.shape[0]
    combos = [c for c in itertools.product(range(resolution + 1), repeat=n) if sum(c) <= resolution]
    k = np.array(combos, dtype=float) / resolution
    alpha = np.column_stack([k, 1.0 - k.sum(axis=1)])
    return alpha @ T.T


# ---------------------------------------------------------------------------
# solver-facing description of epigraphs


@dataclass
class EpigraphPieces:
    """Decomposition of every constraint ``(rho + delta_i)^*(r) <= s``.

    The constraint set of simplex ``i`` is the intersection over the blocks
    ``b`` with ``block_simplex[b] == i``; each block is the Minkowski sum of
    its components.  Components are either conjugate-quadratic epigraphs
    (parameters per pixel) or piecewise-linear epigraphs
    ``max_k <tau_k, r> - h_k <= s``.
    """

    block_simplex: np.ndarray
    quad_block: np.ndarray
    quad_a: Optional[np.ndarray]
    quad_b: Optional[np.ndarray]
    quad_c: Optional[np.ndarray]
    pwl_block: np.ndarray
    pwl_taus: np.ndarray  # (P, Cp, m, n)
    pwl_h: np.ndarray  # (P, Cp, m)
    pwl_counts: np.ndarray  # (P, Cp)


def _vertex_pwl(tri, n_pixels, heights):
    """PWL components on the simplex vertices; ``heights`` (P, S, n+1)."""
    S = tri.n_simplices
    verts = np.transpose(tri.T, (0, 2, 1))  # (S, n+1, n)
    taus = np.broadcast_to(verts[None], (n_pixels, S) + verts.shape[1:]).copy()
    counts = np.full((n_pixels, S), tri.dim + 1, dtype=np.int64)
    return taus, np.ascontiguousarray(heights, dtype=float), counts


# ---------------------------------------------------------------------------
# dataterm classes


class _Dataterm:
    n_pixels: int
    dim: int

    def evaluate(self, u, pixels=None):
        raise NotImplementedError

    def inner_conjugate(self, tri, i, r, pixel=0):
        raise NotImplementedError

    def convexified(self, tri, u, simplex, alpha, pixels):
        raise NotImplementedError

    def epigraph_pieces(self, tri) -> EpigraphPieces:
        raise NotImplementedError

    def _pixels(self, pixels, count):
        if pixels is None:
            if count != self.n_pixels:
                raise ValueError("one label per pixel expected")
            return np.arange(self.n_pixels)
        return np.broadcast_to(np.asarray(pixels, dtype=np.int64), (count,))

    def conjugate(self, tri, i, v, pixel=0):
        """Lifted conjugate ``<E_i b_i, v> + (rho + delta_i)^*(A_i^T E_i^T v)``."""
        v = np.asarray(v, dtype=float)
        sub = v[tri.simplices[i]]
        return float(sub @ tri.b[i] + self.inner_conjugate(tri, i, sub @ tri.A[i], pixel))


@dataclass
class Quadratic(_Dataterm):
    """``rho(u) = a/2 |u|^2 + <b, u> + c`` per pixel, ``a > 0``."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.b = np.atleast_2d(np.asarray(self.b, dtype=float))
        P = len(self.b)
        self.a = np.broadcast_to(np.asarray(self.a, dtype=float), (P,)).copy()
        self.c = np.broadcast_to(np.asarray(self.c, dtype=float), (P,)).copy()
        if np.any(self.a <= 0):
            raise ValueError("quadratic dataterm requires a > 0")
        self.n_pixels = P
        self.dim = self.b.shape[1]

    def evaluate(self, u, pixels=None):
        u = np.asarray(u, dtype=float).reshape(-1, self.dim)
        px = self._pixels(pixels, len(u))
        return 0.5 * self.a[px] * np.sum(u * u, axis=1) + np.sum(self.b[px] * u, axis=1) + self.c[px]

    def inner_conjugate(self, tri, i, r, pixel=0):
        r = np.atleast_2d(np.asarray(r, dtype=float))
        px = self._pixels(pixel, len(r))
        z = (r - self.b[px]) / self.a[px, None]
        u = nearest_point_in_simplex(z, tri.T[i].T)
        val = np.sum(r * u, axis=1) - self.evaluate(u, px)
        return val if val.size > 1 else float(val[0])

    def convexified(self, tri, u, simplex, alpha, pixels):
        return self.evaluate(u, pixels)

    def epigraph_pieces(self, tri):
        S, P, n = tri.n_simplices, self.n_pixels, self.dim
        taus, h, counts = _vertex_pwl(tri, P, np.zeros((P, S, n + 1)))
        blocks = np.arange(S)
        return EpigraphPieces(blocks, blocks.copy(), self.a, self.b, self.c, blocks.copy(), taus, h, counts)


@dataclass
class TruncatedQuadratic(_Dataterm):
    """``rho(u) = min(nu, a/2 |u|^2 + <b, u> + c)`` per pixel."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    nu: np.ndarray
    hull_resolution: int = 24
    _hull_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.quadratic = Quadratic(self.a, self.b, self.c)
        self.a, self.b, self.c = self.quadratic.a, self.quadratic.b, self.quadratic.c
        P = self.quadratic.n_pixels
        self.nu = np.broadcast_to(np.asarray(self.nu, dtype=float), (P,)).copy()
        self.n_pixels = P
        self.dim = self.quadratic.dim

    def evaluate(self, u, pixels=None):
        u = np.asarray(u, dtype=float).reshape(-1, self.dim)
        px = self._pixels(pixels, len(u))
        return np.minimum(self.nu[px], self.quadratic.evaluate(u, px))

    def inner_conjugate(self, tri, i, r, pixel=0):
        r = np.atleast_2d(np.asarray(r, dtype=float))
        px = self._pixels(pixel, len(r))
        flat = np.max(r @ tri.T[i], axis=1) - self.nu[px]
        quad = np.atleast_1d(self.quadratic.inner_conjugate(tri, i, r, px))
        val = np.maximum(flat, quad)
        return val if val.size > 1 else float(val[0])

    def _hull(self, tri, i, pixel):
        key = (id(tri), int(i), int(pixel))
        hull = self._hull_cache.get(key)
        if hull is None:
            T = tri.T[i]
            pts = simplex_sample_points(T, self.hull_resolution)
            vals = self.quadratic.evaluate(pts, int(pixel))
            # the constant branch is affine: its vertices span its epigraph
            pts = np.vstack([pts, T.T])
            vals = np.concatenate([vals, np.full(T.shape[1], self.nu[pixel])])
            hull = convexify_sampled(pts, vals)
            # chords overshoot the quadratic between samples: lower every
            # facet by its exact worst violation so it minorizes rho on the simplex
            w, off = hull.facets[:, :-1], hull.facets[:, -1]
            a, b, c = self.a[pixel], self.b[pixel], self.c[pixel]
            u = nearest_point_in_simplex((w - b) / a, T.T)
            gap_q = np.sum(w * u, axis=1) + off - (0.5 * a * np.sum(u * u, axis=1) + u @ b + c)
            gap_nu = np.max(w @ T, axis=1) + off - self.nu[pixel]
            shift = np.maximum(0.0, np.maximum(gap_q, gap_nu))
            hull.facets = np.column_stack([w, off - shift])
            self._hull_cache[key] = hull
        return hull

    def convexified(self, tri, u, simplex, alpha, pixels):
        out = np.empty(len(u))
        for k, (uk, i, px) in enumerate(zip(u, simplex, pixels)):
            if self.nu[px] <= self._quad_min(tri, i, px):
                out[k] = self.nu[px]
            else:
                out[k] = self._hull(tri, i, px)(uk)
        return out

    def _quad_min(self, tri, i, px):
        z = -self.b[px] / self.a[px]
        u = nearest_point_in_simplex(z[None], tri.T[i].T)
        return float(self.quadratic.evaluate(u, px)[0])

    def epigraph_pieces(self, tri):
        S, P, n = tri.n_simplices, self.n_pixels, self.dim
        h_flat = np.broadcast_to(self.nu[:, None, None], (P, S, n + 1))
        taus_f, h_f, cnt_f = _vertex_pwl(tri, P, h_flat)
        taus_q, h_q, cnt_q = _vertex_pwl(tri, P, np.zeros((P, S, n + 1)))
        return EpigraphPieces(
            block_simplex=np.concatenate([np.arange(S), np.arange(S)]),
            quad_block=np.arange(S, 2 * S),
            quad_a=self.a,
            quad_b=self.b,
            quad_c=self.c,
            pwl_block=np.concatenate([np.arange(S), np.arange(S, 2 * S)]),
            pwl_taus=np.concatenate([taus_f, taus_q], axis=1),
            pwl_h=np.concatenate([h_f, h_q], axis=1),
            pwl_counts=np.concatenate([cnt_f, cnt_q], axis=1),
        )


def _pad_stack(arrays, width, fill_first=True):
    """Stack ragged (m_k, ...) arrays into (K, width, ...) repeating row 0."""
    first = arrays[0]
    out = np.empty((len(arrays), width) + first.shape[1:])
    for k, arr in enumerate(arrays):
        m = len(arr)
        out[k, :m] = arr
        out[k, m:] = arr[0] if fill_first else 0.0
    return out


@dataclass
class SampledConvexified(_Dataterm):
    """Dataterm known on sampled sublabels, convexified on every simplex.

    Attributes
    ----------
    taus, values : ndarray, shapes (P, S, m, n) and (P, S, m)
        Extreme lower-hull vertices per pixel and simplex, padded by
        repeating the first vertex; ``counts`` gives the valid length.
        Samples inside a hull facet are dropped: their constraints in the
        conjugate epigraph are redundant.
    facets : ndarray, shape (P, S, F, n + 1)
        Affine pieces of the per-simplex envelope, padded likewise.
    rho_fn : callable, optional
        ``rho_fn(pixels, labels)`` evaluates the original dataterm; without
        it :meth:`evaluate` interpolates the envelope.

    The hull arrays dominate memory: ``P * S * m * (n + 1)`` floats.
    """

    taus: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    facets: np.ndarray
    facet_counts: np.ndarray
    rho_fn: Optional[Callable] = None

    def __post_init__(self):
        self.n_pixels = self.taus.shape[0]
        self.dim = self.taus.shape[3]

    @classmethod
    def from_samples(cls, tri: Triangulation, points, values, rho_fn=None):
        """Convexify samples per simplex.

        Parameters
        ----------
        points : ndarray, shape (K, n)
            Sample locations shared by all pixels.
        values : ndarray, shape (P, K)
            Dataterm values at the samples for every pixel.
        """
        points = np.asarray(points, dtype=float).reshape(len(points), -1)
        values = np.atleast_2d(np.asarray(values, dtype=float))
        P, S, n = values.shape[0], tri.n_simplices, tri.dim
        # samples per simplex (boundary samples belong to every incident simplex)
        alpha = np.einsum("sjn,kn->skj", tri.A, points) + tri.b[:, None, :]
        members = [np.flatnonzero(alpha[i].min(axis=1) >= -1e-9) for i in range(S)]
        for i, mem in enumerate(members):
            if len(mem) < n + 1:
                raise ValueError(f"simplex {i} contains fewer than n + 1 samples")
        hulls = [[convexify_sampled(points[members[i]], values[p, members[i]]) for i in range(S)] for p in range(P)]
        width = max(len(h.extreme) for row in hulls for h in row)
        fwidth = max(len(h.facets) for row in hulls for h in row)
        taus = np.empty((P, S, width, n))
        vals = np.empty((P, S, width))
        counts = np.empty((P, S), dtype=np.int64)
        facets = np.empty((P, S, fwidth, n + 1))
        fcounts = np.empty((P, S), dtype=np.int64)
        for p in range(P):
            row = hulls[p]
            taus[p] = _pad_stack([h.points[h.extreme] for h in row], width)
            vals[p] = _pad_stack([h.values[h.extreme] for h in row], width)
            facets[p] = _pad_stack([h.facets for h in row], fwidth)
            counts[p] = [len(h.extreme) for h in row]
            fcounts[p] = [len(h.facets) for h in row]
        return cls(taus, vals, counts, facets, fcounts, rho_fn)

    def evaluate(self, u, pixels=None):
        u = np.asarray(u, dtype=float).reshape(-1, self.dim)
        px = self._pixels(pixels, len(u))
        if self.rho_fn is not None:
            return np.asarray(self.rho_fn(px, u), dtype=float)
        raise ValueError("no original dataterm attached; use evaluate_convexified")

    def inner_conjugate(self, tri, i, r, pixel=0):
        r = np.atleast_2d(np.asarray(r, dtype=float))
        px = self._pixels(pixel, len(r))
        val = np.max(np.einsum("kmn,kn->km", self.taus[px, i], r) - self.values[px, i], axis=1)
        return val if val.size > 1 else float(val[0])

    def convexified(self, tri, u, simplex, alpha, pixels):
        F = self.facets[pixels, simplex]
        return np.max(np.einsum("kfn,kn->kf", F[..., :-1], u) + F[..., -1], axis=1)

    def epigraph_pieces(self, tri):
        S = tri.n_simplices
        blocks = np.arange(S)
        return EpigraphPieces(blocks, np.zeros(0, dtype=np.int64), None, None, None, blocks.copy(),
                              self.taus, self.values, self.counts)


@dataclass
class BaselineLinear(_Dataterm):
    """Vertex-only relaxation: ``rho`` is known on the labels alone.

    ``s[p, k] = rho_p(t^k)``; the relaxed dataterm is ``<u, s>`` on the
    standard simplex, i.e. linear interpolation on each simplex.
    """

    s: np.ndarray
    rho_fn: Optional[Callable] = None

    def __post_init__(self):
        self.s = np.atleast_2d(np.asarray(self.s, dtype=float))
        if not np.all(np.isfinite(self.s)):
            raise ValueError("baseline costs must be finite")
        self.n_pixels = self.s.shape[0]
        self.dim = None

    def evaluate(self, u, pixels=None):
        u = np.asarray(u, dtype=float)
        u = u.reshape(len(u), -1) if u.ndim > 1 else u.reshape(1, -1)
        px = self._pixels(pixels, len(u))
        if self.rho_fn is not None:
            return np.asarray(self.rho_fn(px, u), dtype=float)
        raise ValueError("no original dataterm attached; use evaluate_convexified")

    def inner_conjugate(self, tri, i, r, pixel=0):
        r = np.atleast_2d(np.asarray(r, dtype=float))
        px = self._pixels(pixel, len(r))
        val = np.max(r @ tri.T[i] - self.s[px][:, tri.simplices[i]], axis=1)
        return val if val.size > 1 else float(val[0])

    def convexified(self, tri, u, simplex, alpha, pixels):
        return np.sum(alpha * self.s[pixels[:, None], tri.simplices[simplex]], axis=1)

    def epigraph_pieces(self, tri):
        S, P = tri.n_simplices, self.n_pixels
        taus, h, counts = _vertex_pwl(tri, P, self.s[:, tri.simplices])
        blocks = np.arange(S)
        return EpigraphPieces(blocks, np.zeros(0, dtype=np.int64), None, None, None, blocks.copy(), taus, h, counts)


# ---------------------------------------------------------------------------
# module-level helpers


def rho_i_star(dataterm, tri, i, v, pixel=0):
    """Lifted conjugate of the dataterm restricted to simplex ``i`` at ``v in R^|V|``."""
    if not 0 <= i < tri.n_simplices:
        raise IndexError(f"simplex index {i} out of range")
    return dataterm.conjugate(tri, i, v, pixel)


def evaluate_rho(dataterm, u, pixels=None):
    """Original dataterm value at labels ``u`` (one row per pixel)."""
    return dataterm.evaluate(u, pixels)


def evaluate_convexified(dataterm, tri, u, pixels=None):
    """Per-simplex convex envelope ``(rho + delta_i)^**`` at labels ``u``,
    where ``i`` is the simplex containing each label."""
    u = np.asarray(u, dtype=float).reshape(-1, tri.dim)
    px = dataterm._pixels(pixels, len(u))
    simplex, alpha = tri.locate(u)
    return dataterm.convexified(tri, u, simplex, alpha, px)
