"""Experiment problems and seeded synthetic inputs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .dataterm import BaselineLinear, Quadratic, SampledConvexified, TruncatedQuadratic
from .label_space import Triangulation, build_uniform_triangulation

__all__ = [
    "Problem",
    "rof_problem",
    "robust_rof_problem",
    "flow_problem",
    "adaptive_denoising_problem",
    "baseline_problem",
    "flow_lambda",
    "warp_cost",
    "bilinear_sample",
    "sample_grid",
    "piecewise_constant_image",
    "shifted_texture_pair",
    "gaussian_noise_image",
]


@dataclass
class Problem:
    """A lifted labeling problem on an ``H x W`` grid.

    ``rho_fn(pixels, labels)`` evaluates the original (possibly nonconvex)
    dataterm; ``meta`` records every constructor parameter and default so a
    run can be reproduced from its manifest.
    """

    tri: Triangulation
    dataterm: object
    lam: np.ndarray
    shape: tuple
    kind: str = "custom"
    rho_fn: Optional[object] = None
    meta: dict = field(default_factory=dict)
    config: Optional[object] = None
    initial_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.lam = np.broadcast_to(np.asarray(self.lam, dtype=float), self.shape).copy()
        if np.any(self.lam < 0):
            raise ValueError("regularization weight must be nonnegative")
        if self.dataterm.n_pixels != self.shape[0] * self.shape[1]:
            raise ValueError("dataterm must be defined for every pixel")

    @property
    def n_pixels(self):
        return self.shape[0] * self.shape[1]

    def rho(self, labels, pixels=None):
        """Original dataterm at one label per pixel (rows in pixel order)."""
        labels = np.asarray(labels, dtype=float).reshape(-1, self.tri.dim)
        if pixels is None:
            pixels = np.arange(len(labels))
        if self.rho_fn is not None:
            return np.asarray(self.rho_fn(np.asarray(pixels), labels), dtype=float)
        return self.dataterm.evaluate(labels, pixels)


def _as_channels(image, n):
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[2] != n:
        raise ValueError(f"image has {img.shape[2]} channels, label space has dimension {n}")
    return img


# ---------------------------------------------------------------------------
# denoising


def rof_problem(image, lam, tri: Triangulation):
    """``rho(x, u) = 1/2 |u - I(x)|^2`` with TV weight ``lam``."""
    img = _as_channels(image, tri.dim)
    H, W, n = img.shape
    I = img.reshape(-1, n)
    dt = Quadratic(np.ones(H * W), -I, 0.5 * np.sum(I * I, axis=1))
    meta = {"kind": "rof", "lambda": float(np.mean(lam)), "labels": tri.n_vertices}
    return Problem(tri, dt, lam, (H, W), kind="rof", meta=meta)


def robust_rof_problem(image, lam, nu, tri: Triangulation, hull_resolution=24):
    """``rho(x, u) = min(1/2 |u - I(x)|^2, nu)``; ``nu = inf`` gives plain ROF values."""
    img = _as_channels(image, tri.dim)
    H, W, n = img.shape
    I = img.reshape(-1, n)
    nu_arr = np.broadcast_to(np.asarray(nu, dtype=float), (H * W,))
    dt = TruncatedQuadratic(np.ones(H * W), -I, 0.5 * np.sum(I * I, axis=1), nu_arr,
                            hull_resolution=hull_resolution)
    meta = {"kind": "robust-rof", "lambda": float(np.mean(lam)), "nu": float(np.mean(nu_arr)),
            "labels": tri.n_vertices, "hull_resolution": hull_resolution}
    return Problem(tri, dt, lam, (H, W), kind="robust-rof", meta=meta)


# ---------------------------------------------------------------------------
# optical flow


def sample_grid(tri: Triangulation, samples_per_dim):
    """Axis-aligned sublabel grid over the label box, vertices included.

    The grid is refined to contain every label: ``samples_per_dim`` must
    satisfy ``(samples - 1) % (labels - 1) == 0`` per dimension for the
    label grid to be a subgrid; otherwise the labels are merged in.
    """
    counts = np.broadcast_to(np.asarray(samples_per_dim, dtype=int), (tri.dim,))
    axes = []
    for j in range(tri.dim):
        ax = np.linspace(tri.lower[j], tri.upper[j], counts[j])
        lab = np.unique(tri.vertices[:, j])
        ax = np.unique(np.round(np.concatenate([ax, lab]), 12))
        axes.append(ax)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def bilinear_sample(image, rows, cols):
    """Bilinear interpolation with coordinates clamped to the image."""
    img = np.asarray(image, dtype=float)
    H, W = img.shape
    r = np.clip(rows, 0.0, H - 1.0)
    c = np.clip(cols, 0.0, W - 1.0)
    r0 = np.minimum(np.floor(r).astype(int), H - 2) if H > 1 else np.zeros_like(r, dtype=int)
    c0 = np.minimum(np.floor(c).astype(int), W - 2) if W > 1 else np.zeros_like(c, dtype=int)
    fr = r - r0
    fc = c - c0
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
    bot = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def warp_cost(I1, I2, flows):
    """``|I2(x) - I1(x + v)|`` for flows of shape (K, 2) at every pixel.

    ``v = (horizontal, vertical)``: the first component moves along columns.
    Returns an array of shape (H*W, K).
    """
    I1 = np.asarray(I1, dtype=float)
    I2 = np.asarray(I2, dtype=float)
    H, W = I1.shape
    rr, cc = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    flows = np.atleast_2d(np.asarray(flows, dtype=float))
    rows = rr.reshape(-1, 1) + flows[None, :, 1]
    cols = cc.reshape(-1, 1) + flows[None, :, 0]
    return np.abs(I2.reshape(-1, 1) - bilinear_sample(I1, rows, cols))


def _pixel_warp_cost(I1, I2, pixels, flows):
    H, W = I1.shape
    r = pixels // W + flows[:, 1]
    c = pixels % W + flows[:, 0]
    return np.abs(I2.reshape(-1)[pixels] - bilinear_sample(I1, r, c))


def flow_lambda(I1, mu):
    """Edge-aware weight ``mu * exp(-|grad I1|)`` with forward differences."""
    I1 = np.asarray(I1, dtype=float)
    gr = np.zeros_like(I1)
    gc = np.zeros_like(I1)
    gr[:-1] = I1[1:] - I1[:-1]
    gc[:, :-1] = I1[:, 1:] - I1[:, :-1]
    return mu * np.exp(-np.hypot(gr, gc))


def flow_problem(I1, I2, d, tri: Optional[Triangulation] = None, samples_per_dim=33, mu=0.5,
                 labels_per_dim=5):
    """Sublabel optical flow with the warping cost convexified per triangle.

    Labels are flows ``(horizontal, vertical)`` in ``[-d, d]^2``.
    """
    I1 = np.asarray(I1, dtype=float)
    I2 = np.asarray(I2, dtype=float)
    if I1.shape != I2.shape or I1.ndim != 2:
        raise ValueError("flow needs two grayscale images of equal size")
    if d <= 0:
        raise ValueError("maximum displacement must be positive")
    if tri is None:
        tri = build_uniform_triangulation([(-d, d), (-d, d)], [labels_per_dim] * 2)
    if tri.dim != 2:
        raise ValueError("flow labels are two-dimensional")
    labels_grid = getattr(tri, "labels_per_dim", None)
    if labels_grid is not None and np.any(np.asarray(samples_per_dim) < np.asarray(labels_grid)):
        raise ValueError("sampling resolution must not be coarser than the label grid")
    pts = sample_grid(tri, samples_per_dim)
    values = warp_cost(I1, I2, pts)

    def rho_fn(pixels, labels):
        return _pixel_warp_cost(I1, I2, np.asarray(pixels), np.asarray(labels).reshape(-1, 2))

    dt = SampledConvexified.from_samples(tri, pts, values, rho_fn=rho_fn)
    lam = flow_lambda(I1, mu)
    meta = {"kind": "flow", "d": float(d), "mu": float(mu), "samples_per_dim": samples_per_dim,
            "labels": tri.n_vertices, "lambda_formula": "mu*exp(-|grad I1|)",
            "interpolation": "bilinear, clamped"}
    return Problem(tri, dt, lam, I1.shape, kind="flow", rho_fn=rho_fn, meta=meta)


# ---------------------------------------------------------------------------
# adaptive denoising


def _gauss_nll(I, mean, std):
    return (mean - I) ** 2 / (2.0 * std ** 2) + 0.5 * np.log(2.0 * np.pi * std ** 2)


def adaptive_denoising_problem(image, lam, tri: Optional[Triangulation] = None, samples_per_dim=29,
                               labels_per_dim=3, mean_range=(0.0, 255.0), std_range=(1.0, 10.0)):
    """Joint estimation of a mean and a standard deviation per pixel.

    ``rho(x, m, s) = (m - I(x))^2 / (2 s^2) + log(2 pi s^2) / 2`` sampled on
    the sublabel grid and convexified per triangle.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("adaptive denoising expects a grayscale image")
    if std_range[0] < 1.0:
        raise ValueError("the standard-deviation range must start at 1 or above")
    if tri is None:
        tri = build_uniform_triangulation([mean_range, std_range], [labels_per_dim] * 2)
    pts = sample_grid(tri, samples_per_dim)
    I = img.reshape(-1)
    values = _gauss_nll(I[:, None], pts[None, :, 0], pts[None, :, 1])

    def rho_fn(pixels, labels):
        labels = np.asarray(labels).reshape(-1, 2)
        return _gauss_nll(I[np.asarray(pixels)], labels[:, 0], labels[:, 1])

    dt = SampledConvexified.from_samples(tri, pts, values, rho_fn=rho_fn)
    meta = {"kind": "adaptive", "lambda": float(np.mean(lam)), "samples_per_dim": samples_per_dim,
            "labels": tri.n_vertices, "mean_range": list(mean_range), "std_range": list(std_range)}
    return Problem(tri, dt, lam, img.shape, kind="adaptive", rho_fn=rho_fn, meta=meta)


# ---------------------------------------------------------------------------
# baseline


def baseline_problem(problem: Problem, tri: Optional[Triangulation] = None):
    """Replace the dataterm by its values at the labels, ``s_k = rho(t^k)``."""
    tri = tri or problem.tri
    P = problem.n_pixels
    V = tri.n_vertices
    pixels = np.repeat(np.arange(P), V)
    labels = np.tile(tri.vertices, (P, 1))
    s = problem.rho(labels, pixels).reshape(P, V)
    rho_fn = problem.rho_fn
    if rho_fn is None:
        orig = problem.dataterm

        def rho_fn(px, u):
            return orig.evaluate(u, px)

    dt = BaselineLinear(s, rho_fn=rho_fn)
    meta = dict(problem.meta, baseline=True)
    return Problem(tri, dt, problem.lam, problem.shape, kind=problem.kind + "-baseline", rho_fn=rho_fn,
                   meta=meta, config=problem.config)


# ---------------------------------------------------------------------------
# synthetic inputs


def piecewise_constant_image(shape, values, rng=None, noise=0.0):
    """Image split into a 2x2 arrangement of constant regions (4 regions)
    or vertical stripes (other counts), plus optional Gaussian noise.

    Returns ``(image, region_map)``.
    """
    rng = np.random.default_rng(rng)
    H, W = shape
    values = np.atleast_2d(np.asarray(values, dtype=float))
    K = len(values)
    rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    if K == 4:
        region = (rr >= H // 2).astype(int) * 2 + (cc >= W // 2).astype(int)
    else:
        region = np.minimum(cc * K // W, K - 1)
    img = values[region]
    if noise > 0:
        img = img + noise * rng.standard_normal(img.shape)
    return img, region


def shifted_texture_pair(shape=(32, 32), shift=(2.5, -1.5), rng=None, smooth=1.0, pad=8):
    """Smooth random texture ``I1`` and ``I2(x) = I1(x + v)``.

    ``shift = (horizontal, vertical)``.  ``I1`` is built on a padded canvas
    so the warped samples stay inside real texture.
    Returns ``(I1, I2, flow)`` with ``flow`` of shape (H, W, 2).
    """
    rng = np.random.default_rng(rng)
    H, W = shape
    big = rng.random((H + 2 * pad, W + 2 * pad))
    big = ndimage.gaussian_filter(big, smooth)
    big = (big - big.min()) / (big.max() - big.min())
    rr, cc = np.meshgrid(np.arange(H, dtype=float) + pad, np.arange(W, dtype=float) + pad, indexing="ij")
    I1 = big[pad:pad + H, pad:pad + W].copy()
    I2 = bilinear_sample(big, rr + shift[1], cc + shift[0])
    flow = np.broadcast_to(np.asarray(shift, dtype=float), (H, W, 2)).copy()
    return I1, I2, flow


def gaussian_noise_image(shape, mean, std, rng=None):
    """Constant-mean image with i.i.d. Gaussian noise (not clipped)."""
    rng = np.random.default_rng(rng)
    return mean + std * rng.standard_normal(shape)
