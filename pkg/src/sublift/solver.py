"""Primal-dual solver for the lifted saddle-point problem.

Primal variables
    ``u`` (P, V) lifted field, ``al`` (P, B, n) and ``be`` (P, B) multipliers
    for the splitting of every simplex constraint into its components, and
    ``mu`` (P, 2, S*n) multipliers for ``g = D_q``.
Dual variables
    ``v`` (P, V), ``w`` (P,), component epigraph points ``(rq, sq)`` and
    ``(rp, sp)``, ``q`` (P, 2, V) and ``g`` (P, 2, S*n).

The Lagrangian is::

    sum_x <u, v> - w + <Div q, u>
        + sum_b <al_b, sum_c r_c - A_i^T v_i> + be_b (sum_c s_c - w + <b_i, v_i>)
        + <mu, g - D q>

with ``(r_c, s_c)`` in the epigraph of component ``c`` and the singular
values of every ``g^i(x)`` bounded by ``lambda(x)``.  Iterations take one
projection per dual block; nothing is solved in an inner loop.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .dataterm import evaluate_convexified
from .label_space import project_simplex
from .projections import (
    ProjectionError,
    project_epigraph_pwl_batch,
    project_epigraph_quadratic_batch,
    project_spectral_ball,
)
from .regularizer import dq_operator, tv_unlifted

__all__ = [
    "gradient",
    "divergence",
    "SolverConfig",
    "SolverResult",
    "SolverDivergence",
    "solve",
    "energy_report",
    "write_diagnostics",
]

log = logging.getLogger(__name__)


class SolverDivergence(RuntimeError):
    """Raised when the iterates or energies become non-finite."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# finite differences


def gradient(f):
    """Forward differences with Neumann boundary.

    Parameters
    ----------
    f : ndarray, shape (H, W) or (H, W, m)

    Returns
    -------
    ndarray, shape (H, W, 2, m)
        Component 0 differentiates along rows (axis 0), component 1 along
        columns; the last row/column difference is zero.
    """
    f = np.asarray(f, dtype=float)
    if f.ndim == 2:
        f = f[..., None]
    if f.ndim != 3:
        raise ValueError(f"expected a (H, W[, m]) field, got shape {f.shape}")
    g = np.zeros(f.shape[:2] + (2,) + f.shape[2:])
    g[:-1, :, 0] = f[1:] - f[:-1]
    g[:, :-1, 1] = f[:, 1:] - f[:, :-1]
    return g


def divergence(p):
    """Negative adjoint of :func:`gradient`; input (H, W, 2, m), output (H, W, m)."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 4 or p.shape[2] != 2:
        raise ValueError(f"expected a (H, W, 2, m) field, got shape {p.shape}")
    out = np.zeros(p.shape[:2] + p.shape[3:])
    px, py = p[:, :, 0], p[:, :, 1]
    out[:-1] += px[:-1]
    out[1:] -= px[:-1]
    out[:, :-1] += py[:, :-1]
    out[:, 1:] -= py[:, :-1]
    return out


def _abs_gradient(f):
    g = np.zeros(f.shape[:2] + (2,) + f.shape[2:])
    g[:-1, :, 0] = f[1:] + f[:-1]
    g[:, :-1, 1] = f[:, 1:] + f[:, :-1]
    return g


def _abs_divergence(p):
    out = np.zeros(p.shape[:2] + p.shape[3:])
    px, py = p[:, :, 0], p[:, :, 1]
    out[:-1] += px[:-1]
    out[1:] += px[:-1]
    out[:, :-1] += py[:, :-1]
    out[:, 1:] += py[:, :-1]
    return out


# ---------------------------------------------------------------------------
# configuration and results


@dataclass
class SolverConfig:
    """Iteration control.

    ``tol`` bounds the normalized primal change ``|u_k+1 - u_k| / |u_k|``
    tested every ``check_interval`` iterations.  ``step_scale`` multiplies
    both step sizes (``tau sigma |L|^2 <= step_scale^2``); ``step_ratio``
    multiplies the primal and divides the dual steps.  With
    ``preconditioning`` diagonal steps from absolute row and column sums of
    the coupling operator replace the global ones.  ``label_scaling``
    expresses the dual slopes of piecewise-linear dataterm blocks in box
    coordinates of the label space (ignored when a quadratic block is
    present); it helps when the label axes have very different extents.
    """

    max_iterations: int = 10000
    tol: float = 1e-6
    check_interval: int = 50
    theta: float = 1.0
    step_scale: float = 0.99
    step_ratio: float = 1.0
    preconditioning: bool = False
    label_scaling: bool = False
    power_iterations: int = 60
    min_iterations: int = 0
    seed: int = 0
    verbose: bool = False

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.max_iterations < 1 or self.check_interval < 1:
            raise ValueError("iteration counts must be positive")
        if not 0.0 < self.step_scale <= 1.0:
            raise ValueError("step_scale must lie in (0, 1]")
        if not self.step_ratio > 0:
            raise ValueError("step_ratio must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class SolverResult:
    u: np.ndarray  # (H, W, V), simplex-projected
    labels: np.ndarray  # (H, W, n) unlifted
    iterations: int
    converged: bool
    diagnostics: list = field(default_factory=list)
    energy: dict = field(default_factory=dict)
    step_sizes: dict = field(default_factory=dict)
    runtime: float = 0.0
    raw_u: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# the coupling operator


class _Operator:
    """Linear coupling ``L`` between primal and dual blocks."""

    def __init__(self, problem, label_scaling=False):
        tri = problem.tri
        self.H, self.W = problem.shape
        self.P = self.H * self.W
        self.V, self.S, self.n = tri.n_vertices, tri.n_simplices, tri.dim
        pieces = problem.dataterm.epigraph_pieces(tri)
        self.pieces = pieces
        self.B = len(pieces.block_simplex)
        for blocks in (pieces.quad_block, pieces.pwl_block):
            if len(np.unique(blocks)) != len(blocks):
                raise ValueError("a block may hold at most one component of each kind")
        self.has_quad = len(pieces.quad_block) > 0
        n, B = self.n, self.B
        simp = tri.simplices[pieces.block_simplex]  # (B, n+1)
        A = tri.A[pieces.block_simplex]  # (B, n+1, n)
        bvec = tri.b[pieces.block_simplex]  # (B, n+1)
        self.pwl_taus = pieces.pwl_taus
        self.label_scaled = bool(label_scaling and not self.has_quad)
        if self.label_scaled:
            # dual slopes in box coordinates x = lower + ext * x': the block
            # constraints are unchanged, the conjugate points lie in [0, 1]^n
            lower = np.asarray(tri.lower, dtype=float)
            ext = np.asarray(tri.upper, dtype=float) - lower
            bvec = bvec + np.einsum("bjn,n->bj", A, lower)
            A = A * ext
            self.pwl_taus = (pieces.pwl_taus - lower) / ext
        rows = np.repeat(simp[:, :, None], n, axis=2)
        cols = np.broadcast_to(np.arange(B)[:, None, None] * n + np.arange(n), rows.shape)
        self.Amat = sp.csr_matrix((A.ravel(), (rows.ravel(), cols.ravel())), shape=(self.V, B * n))
        self.bmat = sp.csr_matrix(
            (bvec.ravel(), (simp.ravel(), np.repeat(np.arange(B), n + 1))), shape=(self.V, B)
        )
        self.Dmat = dq_operator(tri)
        self.AmatT = self.Amat.T.tocsr()
        self.bmatT = self.bmat.T.tocsr()
        self.DmatT = self.Dmat.T.tocsr()
        self.absAmat, self.absAmatT = abs(self.Amat), abs(self.AmatT)
        self.absbmat, self.absbmatT = abs(self.bmat), abs(self.bmatT)
        self.absDmat, self.absDmatT = abs(self.Dmat), abs(self.DmatT)

    # shapes ---------------------------------------------------------------
    def primal_zeros(self):
        P, V, B, n, S = self.P, self.V, self.B, self.n, self.S
        return {
            "u": np.zeros((P, V)),
            "al": np.zeros((P, B, n)),
            "be": np.zeros((P, B)),
            "mu": np.zeros((P, 2, S * n)),
        }

    def dual_zeros(self):
        P, V, n, S = self.P, self.V, self.n, self.S
        Cq, Cp = len(self.pieces.quad_block), len(self.pieces.pwl_block)
        return {
            "v": np.zeros((P, V)),
            "w": np.zeros(P),
            "rq": np.zeros((P, Cq, n)),
            "sq": np.zeros((P, Cq)),
            "rp": np.zeros((P, Cp, n)),
            "sp": np.zeros((P, Cp)),
            "q": np.zeros((P, 2, V)),
            "g": np.zeros((P, 2, S * n)),
        }

    # forward --------------------------------------------------------------
    def apply(self, x, absolute=False):
        P, V, B, n = self.P, self.V, self.B, self.n
        pc = self.pieces
        sgn = 1.0 if absolute else -1.0
        Am = self.absAmatT if absolute else self.AmatT
        bm = self.absbmatT if absolute else self.bmatT
        Dm = self.absDmatT if absolute else self.DmatT
        al = x["al"].reshape(P, B * n)
        be = x["be"]
        y = {}
        y["v"] = x["u"] + sgn * (Am.T @ al.T).T + (bm.T @ be.T).T
        y["w"] = sgn * be.sum(axis=1)
        y["rq"] = x["al"][:, pc.quad_block]
        y["sq"] = be[:, pc.quad_block]
        y["rp"] = x["al"][:, pc.pwl_block]
        y["sp"] = be[:, pc.pwl_block]
        u_img = x["u"].reshape(self.H, self.W, V)
        grad = _abs_gradient(u_img) if absolute else gradient(u_img)
        grad = grad.reshape(P, 2, V)
        mu = x["mu"].reshape(P * 2, -1)
        y["q"] = sgn * grad + sgn * (Dm.T @ mu.T).T.reshape(P, 2, V)
        y["g"] = x["mu"].copy()
        return y

    # adjoint --------------------------------------------------------------
    def adjoint(self, y, absolute=False):
        P, V, B, n = self.P, self.V, self.B, self.n
        pc = self.pieces
        sgn = 1.0 if absolute else -1.0
        Am = self.absAmat if absolute else self.Amat
        bm = self.absbmat if absolute else self.bmat
        Dm = self.absDmat if absolute else self.Dmat
        q_img = y["q"].reshape(self.H, self.W, 2, V)
        d = _abs_divergence(q_img) if absolute else divergence(q_img)
        x = {"u": y["v"] + d.reshape(P, V)}
        al = np.zeros((P, B, n))
        al[:, pc.quad_block] += y["rq"]
        al[:, pc.pwl_block] += y["rp"]
        al += sgn * (Am.T @ y["v"].T).T.reshape(P, B, n)
        x["al"] = al
        be = np.zeros((P, B))
        be[:, pc.quad_block] += y["sq"]
        be[:, pc.pwl_block] += y["sp"]
        be += sgn * y["w"][:, None] + (bm.T @ y["v"].T).T
        x["be"] = be
        qf = y["q"].reshape(P * 2, V)
        x["mu"] = y["g"] + sgn * (Dm.T @ qf.T).T.reshape(P, 2, -1)
        return x

    # helpers --------------------------------------------------------------
    @staticmethod
    def sqnorm(z):
        return math.fsum(float(np.sum(a * a)) for _, a in sorted(z.items()))

    def norm_estimate(self, iterations, seed):
        rng = np.random.default_rng(seed)
        x = {k: rng.standard_normal(a.shape) for k, a in self.primal_zeros().items()}
        nrm = math.sqrt(self.sqnorm(x))
        x = {k: a / nrm for k, a in x.items()}
        est = 0.0
        for _ in range(iterations):
            z = self.adjoint(self.apply(x))
            nrm = math.sqrt(self.sqnorm(z))
            if nrm == 0:
                return 0.0
            est = nrm
            x = {k: a / nrm for k, a in z.items()}
        return math.sqrt(est)


def _dual_project(op, problem, y, lam_px):
    pc = op.pieces
    P, n = op.P, op.n
    if op.has_quad:
        Cq = len(pc.quad_block)
        a = np.repeat(pc.quad_a, Cq)
        b = np.repeat(pc.quad_b, Cq, axis=0)
        c = np.repeat(pc.quad_c, Cq)
        x, s = project_epigraph_quadratic_batch(y["rq"].reshape(-1, n), y["sq"].reshape(-1), a, b, c)
        y["rq"] = x.reshape(P, Cq, n)
        y["sq"] = s.reshape(P, Cq)
    Cp = len(pc.pwl_block)
    if Cp:
        m = op.pwl_taus.shape[2]
        x, s = project_epigraph_pwl_batch(
            y["rp"].reshape(-1, n),
            y["sp"].reshape(-1),
            op.pwl_taus.reshape(-1, m, n),
            pc.pwl_h.reshape(-1, m),
            pc.pwl_counts.reshape(-1),
        )
        y["rp"] = x.reshape(P, Cp, n)
        y["sp"] = s.reshape(P, Cp)
    S = op.S
    g = y["g"].reshape(P, 2, S, n).transpose(0, 2, 1, 3)
    g = project_spectral_ball(g, lam_px[:, None])
    y["g"] = np.ascontiguousarray(g.transpose(0, 2, 1, 3)).reshape(P, 2, S * n)
    return y


def _residuals(op, x, y):
    """Constraint residuals of the multiplier blocks."""
    Lx = op.adjoint(y)
    res = {}
    scale_v = 1.0 + math.sqrt(float(np.sum(y["v"] ** 2)) + float(np.sum(y["w"] ** 2)))
    res["epigraph"] = math.sqrt(float(np.sum(Lx["al"] ** 2)) + float(np.sum((Lx["be"] + 0.0) ** 2))) / scale_v
    res["coupling"] = math.sqrt(float(np.sum(Lx["mu"] ** 2))) / (1.0 + math.sqrt(float(np.sum(y["g"] ** 2))))
    return res


# ---------------------------------------------------------------------------
# energies


def _unlift_field(tri, u):
    return project_simplex(u) @ tri.vertices


def energy_report(problem, u):
    """Energies of a lifted field.

    Parameters
    ----------
    problem : Problem
    u : ndarray, shape (H, W, V) or (P, V)

    Returns
    -------
    dict
        ``lifted_data`` (per-simplex convexified dataterm at the unlifted
        labels), ``unlifted_data`` (original dataterm), ``tv`` (weighted
        nuclear-norm TV of the unlifted field), and the totals
        ``lifted_energy`` and ``unlifted_energy``.
    """
    tri = problem.tri
    H, W = problem.shape
    u = np.asarray(u, dtype=float).reshape(H * W, tri.n_vertices)
    labels = _unlift_field(tri, u)
    labels = np.clip(labels, tri.lower, tri.upper)
    dt = problem.dataterm
    lifted_data = float(np.sum(evaluate_convexified(dt, tri, labels)))
    try:
        unlifted_data = float(np.sum(problem.rho(labels)))
    except ValueError:
        unlifted_data = float("nan")
    tv = tv_unlifted(labels.reshape(H, W, tri.dim), problem.lam)
    return {
        "lifted_data": lifted_data,
        "unlifted_data": unlifted_data,
        "tv": tv,
        "lifted_energy": lifted_data + tv,
        "unlifted_energy": unlifted_data + tv,
    }


def write_diagnostics(rows, path):
    """Write diagnostic rows as CSV."""
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# main loop


def _init_primal(op, problem):
    x = op.primal_zeros()
    init = getattr(problem, "initial_labels", None)
    if init is not None:
        x["u"] = problem.tri.lift(np.asarray(init).reshape(op.P, op.n))
    else:
        x["u"][:] = 1.0 / op.V
    return x


def solve(problem, config: Optional[SolverConfig] = None) -> SolverResult:
    """Run the primal-dual iterations on a lifted problem.

    Parameters
    ----------
    problem : Problem
        Provides ``tri``, ``dataterm``, ``lam`` (H, W) and ``shape``.
    config : SolverConfig, optional
        Defaults to the problem's own configuration.

    Returns
    -------
    SolverResult
        The simplex-projected lifted field, its unlifted labels and the
        diagnostic rows recorded at every check.
    """
    cfg = config or getattr(problem, "config", None) or SolverConfig()
    t0 = time.perf_counter()
    op = _Operator(problem, cfg.label_scaling)
    lam_px = np.ascontiguousarray(np.broadcast_to(problem.lam, problem.shape), dtype=float).reshape(-1)
    if np.any(lam_px < 0):
        raise ValueError("regularization weights must be nonnegative")

    if cfg.preconditioning:
        ones_x = {k: np.ones_like(a) for k, a in op.primal_zeros().items()}
        ones_y = {k: np.ones_like(a) for k, a in op.dual_zeros().items()}
        row = op.apply(ones_x, absolute=True)
        col = op.adjoint(ones_y, absolute=True)
        r = cfg.step_ratio
        sigma = {k: cfg.step_scale / (r * np.maximum(a, 1e-12)) for k, a in row.items()}
        tau = {k: r * cfg.step_scale / np.maximum(a, 1e-12) for k, a in col.items()}
        steps = {"kind": "diagonal"}
    else:
        L = op.norm_estimate(cfg.power_iterations, cfg.seed)
        # power iteration underestimates; keep a margin
        L *= 1.02
        s = cfg.step_scale / max(L, 1e-12)
        sigma = {k: s / cfg.step_ratio for k in op.dual_zeros()}
        tau = {k: s * cfg.step_ratio for k in op.primal_zeros()}
        steps = {"kind": "global", "norm_L": L, "tau": s * cfg.step_ratio, "sigma": s / cfg.step_ratio}

    x = _init_primal(op, problem)
    xbar = {k: a.copy() for k, a in x.items()}
    y = op.dual_zeros()
    trace = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        Kx = op.apply(xbar)
        Kx["w"] = Kx["w"] - 1.0
        for k in y:
            y[k] = y[k] + sigma[k] * Kx[k]
        try:
            y = _dual_project(op, problem, y, lam_px)
        except ProjectionError:
            if not all(np.all(np.isfinite(a)) for a in y.values()):
                raise SolverDivergence(f"non-finite dual iterate at iteration {it}", trace) from None
            raise
        KTy = op.adjoint(y)
        check = it % cfg.check_interval == 0 or it == cfg.max_iterations
        if check:
            u_old = x["u"].copy()
        for k in x:
            new = x[k] - tau[k] * KTy[k]
            xbar[k] = new + cfg.theta * (new - x[k])
            x[k] = new

        if check:
            change = float(np.linalg.norm(x["u"] - u_old)) / max(float(np.linalg.norm(u_old)), 1e-300)
            if not np.all(np.isfinite(x["u"])):
                raise SolverDivergence(f"non-finite iterate at iteration {it}", trace)
            en = energy_report(problem, x["u"])
            if not (math.isfinite(en["lifted_energy"])):
                raise SolverDivergence(f"non-finite energy at iteration {it}", trace)
            res = _residuals(op, x, y)
            row = {
                "iteration": it,
                "lifted_energy": en["lifted_energy"],
                "unlifted_energy": en["unlifted_energy"],
                "lifted_data": en["lifted_data"],
                "tv": en["tv"],
                "epigraph_residual": res["epigraph"],
                "coupling_residual": res["coupling"],
                "primal_change": change,
            }
            trace.append(row)
            if cfg.verbose:
                log.info("iter %d  E=%.8g  change=%.3e", it, en["lifted_energy"], change)
            if change <= cfg.tol and it >= cfg.min_iterations:
                converged = True
                break

    tri = problem.tri
    u_final = project_simplex(x["u"])
    labels = u_final @ tri.vertices
    H, W = problem.shape
    return SolverResult(
        u=u_final.reshape(H, W, op.V),
        labels=labels.reshape(H, W, op.n),
        iterations=it,
        converged=converged,
        diagnostics=trace,
        energy=energy_report(problem, u_final),
        step_sizes=steps,
        runtime=time.perf_counter() - t0,
        raw_u=x["u"].reshape(H, W, op.V),
    )
