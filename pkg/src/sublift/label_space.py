"""Simplicial partitions of the label space and the lifting map.

A label ``u in Gamma`` (a compact convex subset of R^n) is written as a convex
combination ``T_i alpha`` of the vertices of one simplex.  The lifted
representation places the same barycentric weights on the corresponding
entries of a vector in R^|V|.
"""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np

__all__ = [
    "Triangulation",
    "build_uniform_triangulation",
    "project_simplex",
    "DomainError",
]

BOUNDS_TOL = 1e-9
_FACET_TOL = 1e-12
_MAX_COND = 1e12


class DomainError(ValueError):
    """A label lies outside the triangulated label space."""


def _freeze(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def project_simplex(u, axis=-1):
    """Euclidean projection onto the standard simplex along ``axis``.

    Sort-based; exact up to floating point rounding.
    """
    u = np.asarray(u, dtype=float)
    x = np.moveaxis(u, axis, -1)
    m = x.shape[-1]
    srt = -np.sort(-x, axis=-1)
    css = np.cumsum(srt, axis=-1) - 1.0
    k = np.arange(1, m + 1)
    cond = srt - css / k > 0
    rho = m - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1.0)
    out = np.maximum(x - theta, 0.0)
    return np.moveaxis(out, -1, axis)


class Triangulation:
    """A non-degenerate simplicial partition of a convex label space.

    Parameters
    ----------
    vertices : array_like, shape (V, n)
        The labels ``t^k``.
    simplices : array_like of int, shape (S, n + 1)
        Vertex indices of every simplex.  The last vertex of each simplex is
        the pivot used for the difference matrices ``T_iD``.

    Attributes
    ----------
    T : ndarray, shape (S, n, n + 1)
        Vertex coordinates as columns.
    A, b : ndarray, shapes (S, n + 1, n) and (S, n + 1)
        Barycentric map ``alpha = A_i u + b_i``; together they form the inverse
        of ``[T_i; 1^T]``.
    TD, TD_inv : ndarray, shape (S, n, n)
        Edge matrix ``(t^{i_1} - t^{i_{n+1}}, ...)`` and its inverse.

    The object is read-only after construction and may be shared between
    threads.
    """

    def __init__(self, vertices, simplices, *, grid=None):
        vertices = np.asarray(vertices, dtype=float)
        if vertices.ndim == 1:
            vertices = vertices[:, None]
        simplices = np.asarray(simplices, dtype=np.int64)
        n = vertices.shape[1]
        if not 1 <= n <= 3:
            raise ValueError(f"unsupported label dimension {n}; expected 1 <= n <= 3")
        if simplices.ndim != 2 or simplices.shape[1] != n + 1:
            raise ValueError(f"simplices must have shape (S, {n + 1})")
        if simplices.min() < 0 or simplices.max() >= len(vertices):
            raise ValueError("simplex references a missing vertex")
        rounded = np.round(vertices, 12)
        if len(np.unique(rounded, axis=0)) != len(vertices):
            raise ValueError("duplicated coincident vertices")

        T = np.transpose(vertices[simplices], (0, 2, 1))
        K = np.concatenate([T, np.ones((len(simplices), 1, n + 1))], axis=1)
        cond = np.linalg.cond(K)
        if not np.all(np.isfinite(cond)) or np.any(cond > _MAX_COND):
            bad = int(np.argmax(np.where(np.isfinite(cond), cond, np.inf)))
            raise ValueError(f"simplex {bad} is degenerate (cond={cond[bad]:.3g})")
        M = np.linalg.inv(K)
        TD = T[:, :, :n] - T[:, :, n:]
        det = np.linalg.det(TD)
        if np.any(np.abs(det) <= 0):
            raise ValueError("degenerate simplex with zero volume")

        self.dim = n
        self.vertices = _freeze(vertices)
        self.simplices = _freeze(simplices)
        self.T = _freeze(T)
        self.A = _freeze(M[:, :, :n])
        self.b = _freeze(M[:, :, n])
        self.TD = _freeze(TD)
        self.TD_inv = _freeze(np.linalg.inv(TD))
        self._grid = grid
        self._bary_scale = np.abs(self.A).sum(axis=2).max(axis=1)
        self.lower = vertices.min(axis=0)
        self.upper = vertices.max(axis=0)

    # -- sizes -------------------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_simplices(self) -> int:
        return len(self.simplices)

    def __repr__(self):
        return f"Triangulation(dim={self.dim}, n_vertices={self.n_vertices}, n_simplices={self.n_simplices})"

    # -- location ----------------------------------------------------------
    def barycentric(self, i, point):
        """Barycentric coordinates of ``point`` with respect to simplex ``i``."""
        return self.A[i] @ np.asarray(point, dtype=float) + self.b[i]

    def locate(self, points):
        """Find a containing simplex and barycentric coordinates.

        Parameters
        ----------
        points : array_like, shape (..., n)

        Returns
        -------
        idx : ndarray of int, shape (...)
        alpha : ndarray, shape (..., n + 1)
            Nonnegative and summing to one.  On shared facets the lowest
            simplex index wins.

        Raises
        ------
        DomainError
            If a point lies outside the label space by more than 1e-9.
        """
        pts = np.asarray(points, dtype=float)
        n = self.dim
        if n == 1 and (pts.ndim == 0 or pts.shape[-1] != 1):
            pts = pts[..., None]
        if pts.shape[-1] != n:
            raise ValueError(f"points must have trailing dimension {n}")
        shape = pts.shape[:-1]
        flat = pts.reshape(-1, n)
        if self._grid is not None:
            idx, alpha = self._locate_grid(flat)
            amb = np.flatnonzero(np.any(alpha <= _FACET_TOL, axis=1))
        else:
            idx = np.zeros(len(flat), dtype=np.int64)
            alpha = np.zeros((len(flat), n + 1))
            amb = np.arange(len(flat))
        if len(amb):
            idx[amb], alpha[amb] = self._locate_scan(flat[amb])
        alpha = np.maximum(alpha, 0.0)
        alpha /= alpha.sum(axis=1, keepdims=True)
        return idx.reshape(shape), alpha.reshape(shape + (n + 1,))

    def _locate_grid(self, pts):
        lo, hi, counts = self._grid
        n = self.dim
        if np.any(pts < lo - BOUNDS_TOL) or np.any(pts > hi + BOUNDS_TOL):
            raise DomainError("label outside the label space bounds")
        pts = np.clip(pts, lo, hi)
        h = (hi - lo) / (counts - 1)
        s = np.clip((pts - lo) / h, 0.0, counts - 1)
        cell = np.minimum(np.floor(s), counts - 2).astype(np.int64)
        f = s - cell
        perm = np.argsort(-f, axis=1, kind="stable")
        fs = np.take_along_axis(f, perm, axis=1)
        alpha = np.empty((len(pts), n + 1))
        alpha[:, 0] = 1.0 - fs[:, 0]
        alpha[:, 1:n] = fs[:, :-1] - fs[:, 1:]
        alpha[:, n] = fs[:, -1]
        cell_flat = np.ravel_multi_index(cell.T, tuple(counts - 1))
        perm_code = np.zeros(len(pts), dtype=np.int64)
        for j in range(n):
            perm_code = perm_code * n + perm[:, j]
        perm_index = self._perm_lookup[perm_code]
        return cell_flat * math.factorial(n) + perm_index, alpha

    def _locate_scan(self, pts, chunk=4096):
        n_s = self.n_simplices
        idx = np.empty(len(pts), dtype=np.int64)
        alpha = np.empty((len(pts), self.dim + 1))
        step = max(1, chunk * 64 // max(n_s, 1))
        for start in range(0, len(pts), step):
            p = pts[start:start + step]
            al = np.einsum("sjn,qn->qsj", self.A, p) + self.b[None]
            worst = al.min(axis=2)
            # a label-space tolerance maps to |A_i| times it in barycentric terms
            inside = worst >= -BOUNDS_TOL * self._bary_scale[None]
            if not np.all(inside.any(axis=1)):
                raise DomainError("label outside the triangulated label space")
            # lowest index among simplices containing the point exactly;
            # otherwise the one with the least violation
            exact = worst >= -_FACET_TOL
            has_exact = exact.any(axis=1)
            first_exact = np.argmax(exact, axis=1)
            best = np.argmax(worst, axis=1)
            sel = np.where(has_exact, first_exact, best)
            idx[start:start + step] = sel
            alpha[start:start + step] = al[np.arange(len(p)), sel]
        return idx, alpha

    # -- lifting -----------------------------------------------------------
    def lift(self, points):
        """Sparse lifted representation ``E_i alpha`` of labels, shape (..., V)."""
        idx, alpha = self.locate(points)
        out = np.zeros(idx.shape + (self.n_vertices,))
        flat = out.reshape(-1, self.n_vertices)
        rows = np.arange(flat.shape[0])[:, None]
        np.add.at(flat, (rows, self.simplices[idx.reshape(-1)]), alpha.reshape(-1, self.dim + 1))
        return out

    def unlift(self, u):
        """Vertex-weighted average ``sum_k t^k u_k`` of lifted vectors.

        Vectors that are not on the standard simplex (entries summing to one
        within 1e-6 and nonnegative) are projected onto it first.
        """
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.n_vertices:
            raise ValueError(f"lifted vectors must have trailing dimension {self.n_vertices}")
        if np.any(np.all(u == 0.0, axis=-1)):
            raise ValueError("cannot unlift an all-zero vector")
        sums = u.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(u < 0.0):
            u = project_simplex(u)
        return u @ self.vertices

    # -- serialization -----------------------------------------------------
    def dumps(self) -> str:
        """Plain-text dump: vertex list followed by simplex list."""
        lines = [f"dim {self.dim}", f"vertices {self.n_vertices}"]
        lines += [" ".join(repr(float(c)) for c in v) for v in self.vertices]
        lines.append(f"simplices {self.n_simplices}")
        lines += [" ".join(str(int(k)) for k in s) for s in self.simplices]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Triangulation":
        rows = [ln.split() for ln in text.strip().splitlines()]
        n = int(rows[0][1])
        nv = int(rows[1][1])
        verts = np.array([[float(c) for c in r] for r in rows[2:2 + nv]]).reshape(nv, n)
        ns = int(rows[2 + nv][1])
        simp = np.array([[int(k) for k in r] for r in rows[3 + nv:3 + nv + ns]], dtype=np.int64)
        return cls(verts, simp)


def build_uniform_triangulation(bounds: Sequence[Sequence[float]], labels_per_dim: Sequence[int]) -> Triangulation:
    """Kuhn triangulation of an axis-aligned label grid.

    Each grid cell is split into n! simplices, one per ordering of the axes.
    The simplex of ordering ``pi`` visits ``corner, corner + e_pi0, ...`` up to
    the opposite corner.

    >>> tri = build_uniform_triangulation([(0.0, 1.0)], [3])
    >>> tri.vertices.ravel().tolist(), tri.simplices.tolist()
    ([0.0, 0.5, 1.0], [[0, 1], [1, 2]])
    """
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    counts = np.asarray(labels_per_dim, dtype=np.int64).reshape(-1)
    n = len(bounds)
    if n != len(counts):
        raise ValueError("bounds and labels_per_dim differ in length")
    if not 1 <= n <= 3:
        raise ValueError(f"unsupported label dimension {n}; expected 1 <= n <= 3")
    if np.any(bounds[:, 1] - bounds[:, 0] <= 0):
        raise ValueError("label interval must have positive length")
    if np.any(counts < 2):
        raise ValueError("at least two labels per dimension are required")

    axes = [np.linspace(lo, hi, int(k)) for (lo, hi), k in zip(bounds, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    vertices = np.stack([m.ravel() for m in mesh], axis=1)

    perms = list(itertools.permutations(range(n)))
    cells = np.stack(np.meshgrid(*[np.arange(k - 1) for k in counts], indexing="ij"), -1).reshape(-1, n)
    simplices = np.empty((len(cells), len(perms), n + 1), dtype=np.int64)
    for p_idx, perm in enumerate(perms):
        pos = cells.copy()
        simplices[:, p_idx, 0] = np.ravel_multi_index(pos.T, tuple(counts))
        for k, axis in enumerate(perm):
            pos[:, axis] += 1
            simplices[:, p_idx, k + 1] = np.ravel_multi_index(pos.T, tuple(counts))
    tri = Triangulation(vertices, simplices.reshape(-1, n + 1), grid=(bounds[:, 0], bounds[:, 1], counts))

    lookup = np.full(n ** n, -1, dtype=np.int64)
    for p_idx, perm in enumerate(perms):
        code = 0
        for a in perm:
            code = code * n + a
        lookup[code] = p_idx
    tri._perm_lookup = lookup
    tri.labels_per_dim = tuple(int(k) for k in counts)
    return tri
