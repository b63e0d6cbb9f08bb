import itertools

import numpy as np
import pytest

from sublift.dataterm import (
    BaselineLinear,
    Quadratic,
    SampledConvexified,
    TruncatedQuadratic,
    convexify_sampled,
    evaluate_convexified,
    evaluate_rho,
    rho_i_star,
)
from sublift.label_space import build_uniform_triangulation

from oracles import brute_conjugate, brute_lower_hull_2d, make_terms, simplex_grid


@pytest.fixture
def tri2():
    return build_uniform_triangulation([(0, 1), (0, 1)], [3, 3])


def test_convexify_peak_removed():
    h = convexify_sampled([[0.0], [0.5], [1.0]], [0.0, 10.0, 0.0])
    assert sorted(h.vertices.tolist()) == [0, 2]
    assert h(np.array([[0.5]]))[0] == pytest.approx(0.0)


def test_convexify_convex_input_unchanged():
    g = np.linspace(0, 1, 6)
    pts = np.array([(x, y) for x in g for y in g if x + y <= 1 + 1e-12])
    vals = pts[:, 0] ** 2 + 2 * pts[:, 1] ** 2
    h = convexify_sampled(pts, vals)
    assert len(h.vertices) == len(pts)


def test_convexify_degenerate_affine():
    pts = np.array([[0, 0], [1, 0], [0, 1], [0.3, 0.3]], float)
    vals = 2 * pts[:, 0] - pts[:, 1] + 1
    h = convexify_sampled(pts, vals)
    np.testing.assert_allclose(h(pts), vals, atol=1e-12)
    assert len(h.vertices) == 4


def test_convexify_matches_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(15):
        m = rng.integers(6, 21)
        inner = rng.dirichlet(np.ones(3), size=m - 3)
        alpha = np.vstack([np.eye(3), inner])
        pts = alpha @ np.array([[0, 0], [1, 0], [0, 1.0]])
        vals = rng.normal(size=m)
        h = convexify_sampled(pts, vals)
        ref = brute_lower_hull_2d(pts, vals)
        np.testing.assert_allclose(h(pts), ref, atol=1e-9)
        assert np.all(h(pts) <= vals + 1e-9)
        on = np.flatnonzero(np.abs(ref - vals) <= 1e-9)
        assert set(on.tolist()) == set(h.vertices.tolist())


def test_convexify_hull_is_convex_minorant():
    rng = np.random.default_rng(1)
    pts = rng.random((30, 2))
    pts = np.vstack([pts, [[0, 0], [1, 0], [0, 1], [1, 1]]])
    vals = rng.normal(size=len(pts))
    h = convexify_sampled(pts, vals)
    # every sample lies on or above every facet
    planes = pts @ h.facets[:, :2].T + h.facets[:, 2]
    assert np.all(planes <= vals[:, None] + 1e-9)


def test_baseline_conjugate_at_zero(tri2):
    rng = np.random.default_rng(2)
    s = rng.random((1, tri2.n_vertices))
    dt = BaselineLinear(s)
    for i in range(tri2.n_simplices):
        val = rho_i_star(dt, tri2, i, np.zeros(tri2.n_vertices))
        assert val == pytest.approx(-s[0, tri2.simplices[i]].min())


def test_quadratic_self_conjugate_at_zero():
    tri = build_uniform_triangulation([(-1, 1), (-1, 1)], [2, 2])
    dt = Quadratic(1.0, np.zeros((1, 2)), 0.0)
    rng = np.random.default_rng(3)
    for i in range(tri.n_simplices):
        # choose v with A_i^T E_i^T v = 0: v_i proportional to the ones vector
        v = np.zeros(tri.n_vertices)
        v[tri.simplices[i]] = rng.normal()
        inner = dt.inner_conjugate(tri, i, tri.A[i].T @ v[tri.simplices[i]])
        assert inner == pytest.approx(0.0, abs=1e-14)
        assert rho_i_star(dt, tri, i, v) == pytest.approx(v[tri.simplices[i]] @ tri.b[i])


def test_rho_i_star_index_error(tri2):
    dt = Quadratic(1.0, np.zeros((1, 2)), 0.0)
    with pytest.raises(IndexError):
        rho_i_star(dt, tri2, tri2.n_simplices, np.zeros(tri2.n_vertices))


@pytest.mark.parametrize("which", [0, 1, 2, 3])
def test_conjugate_matches_dense_sup(tri2, which):
    rng = np.random.default_rng(10 + which)
    terms = make_terms(tri2, rng)
    dt = terms[which]
    for _ in range(25):
        i = int(rng.integers(tri2.n_simplices))
        p = int(rng.integers(dt.n_pixels))
        v = rng.normal(size=tri2.n_vertices)
        if which in (0, 1):
            rho = lambda u: dt.evaluate(u, p)
        else:
            # the relaxed conjugate sees the stored envelope on simplex i
            rho = lambda u: dt.convexified(tri2, u, np.full(len(u), i),
                                           u @ tri2.A[i].T + tri2.b[i], np.full(len(u), p))
        assert rho_i_star(dt, tri2, i, v, p) == pytest.approx(brute_conjugate(tri2, i, v, rho), abs=1e-3)


def test_conjugate_1d_quadratic():
    tri = build_uniform_triangulation([(0.0, 2.0)], [4])
    dt = Quadratic(np.array([1.5]), np.array([[-0.7]]), np.array([0.2]))
    rng = np.random.default_rng(4)
    for _ in range(30):
        i = int(rng.integers(tri.n_simplices))
        v = rng.normal(size=tri.n_vertices) * 3
        ref = brute_conjugate(tri, i, v, lambda u: dt.evaluate(u, 0), k=20000)
        assert rho_i_star(dt, tri, i, v) == pytest.approx(ref, abs=1e-6)


def test_quadratic_minimizer_value(tri2):
    a, b, c = 2.0, np.array([[-0.6, -1.0]]), 0.7
    dt = Quadratic(a, b, c)
    u = -b / a
    expected = c - np.sum(b ** 2) / (2 * a)
    assert evaluate_rho(dt, u)[0] == pytest.approx(expected)
    assert evaluate_convexified(dt, tri2, u)[0] == pytest.approx(expected)


def test_quadratic_requires_positive_curvature():
    with pytest.raises(ValueError):
        Quadratic(0.0, np.zeros((1, 2)), 0.0)


def test_truncation_active_everywhere(tri2):
    dt = TruncatedQuadratic(1.0, np.array([[-5.0, -5.0]]), 25.0, 0.01)
    rng = np.random.default_rng(5)
    u = rng.random((20, 2))
    np.testing.assert_allclose(evaluate_convexified(dt, tri2, u, np.zeros(20, int)), 0.01)


def test_truncated_envelope_against_dense_hull(tri2):
    I = np.array([[0.3, 0.2]])
    dt = TruncatedQuadratic(1.0, -I, 0.5 * np.sum(I ** 2), 0.02)
    i = 0
    alpha, u = simplex_grid(tri2, i, 80)
    vals = dt.evaluate(u, 0)
    ref = convexify_sampled(u, vals)
    idx, _ = tri2.locate(u)
    mask = idx == i
    got = evaluate_convexified(dt, tri2, u[mask], np.zeros(mask.sum(), int))
    np.testing.assert_allclose(got, ref(u[mask]), atol=1e-3)


def test_fenchel_young_and_minorant(tri2):
    rng = np.random.default_rng(6)
    for dt in make_terms(tri2, rng):
        P = dt.n_pixels
        g = np.linspace(0, 1, 21)
        pts = np.array(list(itertools.product(g, g)))
        for p in range(P):
            px = np.full(len(pts), p)
            env = evaluate_convexified(dt, tri2, pts, px)
            if not isinstance(dt, (SampledConvexified, BaselineLinear)):
                assert np.all(env <= dt.evaluate(pts, px) + 1e-9)
            for _ in range(10):
                k = rng.integers(len(pts))
                i, _ = tri2.locate(pts[k])
                v = rng.normal(size=tri2.n_vertices)
                conj = rho_i_star(dt, tri2, int(i), v, p)
                lifted = tri2.lift(pts[k])
                assert env[k] + conj >= lifted @ v - 1e-6


def test_sampled_minorizes_samples(tri2):
    rng = np.random.default_rng(7)
    pts = np.array(list(itertools.product(np.linspace(0, 1, 7), repeat=2)))
    vals = rng.random((3, len(pts)))
    dt = SampledConvexified.from_samples(tri2, pts, vals)
    for p in range(3):
        env = evaluate_convexified(dt, tri2, pts, np.full(len(pts), p))
        assert np.all(env <= vals[p] + 1e-9)
        # tightness at hull vertices
        for i in range(tri2.n_simplices):
            c = dt.counts[p, i]
            tv = dt.taus[p, i, :c]
            idx, _ = tri2.locate(tv)
            own = idx == i
            e = dt.convexified(tri2, tv[own], np.full(own.sum(), i), None, np.full(own.sum(), p))
            np.testing.assert_allclose(e, dt.values[p, i, :c][own], atol=1e-9)


def test_baseline_exact_at_vertices(tri2):
    rng = np.random.default_rng(8)
    s = rng.random((2, tri2.n_vertices))
    dt = BaselineLinear(s)
    for p in range(2):
        env = evaluate_convexified(dt, tri2, tri2.vertices, np.full(tri2.n_vertices, p))
        np.testing.assert_allclose(env, s[p], atol=1e-12)


def test_baseline_rejects_nonfinite():
    with pytest.raises(ValueError):
        BaselineLinear(np.array([[0.0, np.inf]]))
