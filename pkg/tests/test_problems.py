import itertools

import numpy as np
import pytest

from sublift import (
    SolverConfig,
    adaptive_denoising_problem,
    baseline_problem,
    build_uniform_triangulation,
    flow_problem,
    rof_problem,
    robust_rof_problem,
    solve,
)
from sublift.dataterm import BaselineLinear, SampledConvexified, evaluate_convexified
from sublift.problems import (
    bilinear_sample,
    flow_lambda,
    gaussian_noise_image,
    piecewise_constant_image,
    sample_grid,
    shifted_texture_pair,
    warp_cost,
)


@pytest.fixture(scope="module")
def tri2():
    return build_uniform_triangulation([(0, 1), (0, 1)], [3, 3])


def test_rof_zero_at_data(tri2):
    rng = np.random.default_rng(0)
    img = rng.random((3, 4, 2))
    prob = rof_problem(img, 0.1, tri2)
    np.testing.assert_allclose(prob.rho(img.reshape(-1, 2)), 0.0, atol=1e-15)


def test_rof_coefficients_expand(tri2):
    rng = np.random.default_rng(1)
    img = rng.random((2, 2, 2))
    prob = rof_problem(img, 0.1, tri2)
    for p in range(4):
        u = rng.normal(size=(10, 2))
        ref = 0.5 * np.sum((u - img.reshape(-1, 2)[p]) ** 2, axis=1)
        np.testing.assert_allclose(prob.rho(u, np.full(10, p)), ref, atol=1e-12)


def test_rof_channel_mismatch(tri2):
    with pytest.raises(ValueError):
        rof_problem(np.zeros((3, 3)), 0.1, tri2)


def test_robust_rof_infinite_nu_matches_rof(tri2):
    rng = np.random.default_rng(2)
    img = rng.random((3, 3, 2))
    a = rof_problem(img, 0.1, tri2)
    b = robust_rof_problem(img, 0.1, np.inf, tri2)
    u = rng.random((9, 2)) * 3 - 1
    np.testing.assert_allclose(b.rho(u), a.rho(u), atol=1e-15)


def test_robust_rof_far_from_data_is_nu(tri2):
    img = np.full((2, 2, 2), 0.1)
    prob = robust_rof_problem(img, 0.1, 0.05, tri2)
    np.testing.assert_allclose(prob.rho(np.full((4, 2), 0.9)), 0.05)


def test_bilinear_sample_exact_on_affine():
    rr, cc = np.meshgrid(np.arange(5.0), np.arange(6.0), indexing="ij")
    img = 2 * rr - 0.5 * cc + 1
    r = np.array([0.3, 2.7, 3.99])
    c = np.array([4.5, 0.2, 1.0])
    np.testing.assert_allclose(bilinear_sample(img, r, c), 2 * r - 0.5 * c + 1, atol=1e-12)
    # clamped outside
    assert bilinear_sample(img, np.array([-3.0]), np.array([10.0]))[0] == pytest.approx(img[0, 5])


def test_flow_identical_images():
    rng = np.random.default_rng(3)
    I = rng.random((8, 8))
    prob = flow_problem(I, I, 2.0, samples_per_dim=9, labels_per_dim=3)
    np.testing.assert_allclose(prob.rho(np.zeros((64, 2))), 0.0, atol=1e-15)
    # zero flow minimizes the sampled cost at every pixel
    pts = sample_grid(prob.tri, 9)
    vals = warp_cost(I, I, pts)
    assert np.all(vals.min(axis=1) >= 0)
    zero = np.flatnonzero(np.all(pts == 0, axis=1))[0]
    np.testing.assert_allclose(vals[:, zero], vals.min(axis=1))


def test_flow_true_shift_beats_integer_shifts():
    I1, I2, flow = shifted_texture_pair((32, 32), (2.5, -1.5), rng=0)
    shifts = np.array(list(itertools.product(range(-4, 5), repeat=2)), float)
    cost_true = warp_cost(I1, I2, flow[0, 0][None])[:, 0].reshape(32, 32)
    cost_int = warp_cost(I1, I2, shifts).reshape(32, 32, -1)
    # pixels whose warped position lies inside I1
    rows, cols = np.meshgrid(np.arange(32) - 1.5, np.arange(32) + 2.5, indexing="ij")
    inside = (rows >= 0) & (rows <= 31) & (cols >= 0) & (cols <= 31)
    assert inside.sum() > 500
    assert np.all(cost_true[inside][:, None] <= cost_int[inside] + 1e-12)


def test_flow_errors():
    I = np.zeros((4, 4))
    with pytest.raises(ValueError):
        flow_problem(I, np.zeros((4, 5)), 2.0)
    with pytest.raises(ValueError):
        flow_problem(I, I, 0.0)
    with pytest.raises(ValueError):
        flow_problem(I, I, 2.0, samples_per_dim=3, labels_per_dim=5)


def test_flow_lambda_formula():
    rng = np.random.default_rng(4)
    I = rng.random((5, 6))
    lam = flow_lambda(I, 0.5)
    r, c = 2, 3
    g = np.hypot(I[r + 1, c] - I[r, c], I[r, c + 1] - I[r, c])
    assert lam[r, c] == pytest.approx(0.5 * np.exp(-g))
    # Neumann edge: the last row has no vertical difference
    assert lam[4, 5] == pytest.approx(0.5)


def test_flow_at_label_resolution_matches_baseline():
    I1, I2, _ = shifted_texture_pair((6, 6), (1.0, 0.5), rng=1)
    prob = flow_problem(I1, I2, 2.0, samples_per_dim=5, labels_per_dim=5)
    base = baseline_problem(prob)
    tri = prob.tri
    P = prob.n_pixels
    for p in range(P):
        env = evaluate_convexified(prob.dataterm, tri, tri.vertices, np.full(tri.n_vertices, p))
        np.testing.assert_allclose(env, base.dataterm.s[p], atol=1e-12)


def test_adaptive_mean_equals_data():
    img = np.full((2, 2), 100.0)
    prob = adaptive_denoising_problem(img, 1.0)
    sig = np.linspace(1, 10, 7)
    labels = np.column_stack([np.full(7, 100.0), sig])
    vals = prob.rho(labels, np.zeros(7, int))
    np.testing.assert_allclose(vals, 0.5 * np.log(2 * np.pi * sig ** 2), atol=1e-12)
    assert np.argmin(vals) == 0


def test_adaptive_sampled_values_match_formula():
    rng = np.random.default_rng(5)
    img = rng.uniform(0, 255, (3, 3))
    prob = adaptive_denoising_problem(img, 1.0, samples_per_dim=9)
    pts = sample_grid(prob.tri, 9)
    for _ in range(20):
        p = int(rng.integers(9))
        k = int(rng.integers(len(pts)))
        m, s = pts[k]
        ref = (m - img.ravel()[p]) ** 2 / (2 * s * s) + 0.5 * np.log(2 * np.pi * s * s)
        assert prob.rho(pts[k][None], np.array([p]))[0] == pytest.approx(ref, abs=1e-12)


def test_adaptive_rejects_small_sigma():
    with pytest.raises(ValueError):
        adaptive_denoising_problem(np.zeros((2, 2)), 1.0, std_range=(0.5, 10))


def test_convexified_minorizes_samples():
    rng = np.random.default_rng(6)
    img = rng.uniform(0, 255, (3, 3))
    prob = adaptive_denoising_problem(img, 1.0, samples_per_dim=13)
    pts = sample_grid(prob.tri, 13)
    for p in range(9):
        env = evaluate_convexified(prob.dataterm, prob.tri, pts, np.full(len(pts), p))
        assert np.all(env <= prob.rho(pts, np.full(len(pts), p)) + 1e-9)
    I1, I2, _ = shifted_texture_pair((5, 5), (0.7, -0.3), rng=2)
    fp = flow_problem(I1, I2, 2.0, samples_per_dim=9, labels_per_dim=3)
    pts = sample_grid(fp.tri, 9)
    for p in range(25):
        env = evaluate_convexified(fp.dataterm, fp.tri, pts, np.full(len(pts), p))
        assert np.all(env <= fp.rho(pts, np.full(len(pts), p)) + 1e-9)


def test_baseline_values_at_vertices(tri2):
    rng = np.random.default_rng(7)
    img = rng.random((3, 3, 2))
    prob = robust_rof_problem(img, 0.1, 0.03, tri2)
    base = baseline_problem(prob)
    assert isinstance(base.dataterm, BaselineLinear)
    for p in range(9):
        ref = np.minimum(0.5 * np.sum((tri2.vertices - img.reshape(-1, 2)[p]) ** 2, axis=1), 0.03)
        np.testing.assert_allclose(base.dataterm.s[p], ref, atol=1e-15)
    assert base.kind == "robust-rof-baseline"


def test_baseline_equals_sampled_with_vertex_samples(tri2):
    # a convex PWL dataterm with kinks only at the labels is represented
    # identically by both variants
    rng = np.random.default_rng(8)
    s = rng.random((16, tri2.n_vertices))
    base = BaselineLinear(s)
    sampled = SampledConvexified.from_samples(tri2, tri2.vertices, s)
    img = np.zeros((4, 4, 2))
    pa = rof_problem(img, 0.2, tri2)
    pb = rof_problem(img, 0.2, tri2)
    pa.dataterm, pb.dataterm = base, sampled
    cfg = SolverConfig(max_iterations=2000, tol=1e-12)
    ra, rb = solve(pa, cfg), solve(pb, cfg)
    np.testing.assert_allclose(ra.u, rb.u, atol=1e-9)


def test_baseline_label_bias(tri2):
    # data halfway between labels: the baseline relaxation has no incentive
    # to leave the grid, the sublabel one recovers the value
    img, _ = piecewise_constant_image((8, 8), [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)])
    img = img + 0.02
    tri = build_uniform_triangulation([(0, 1), (0, 1)], [2, 2])
    # small weight: contrast shrinkage lambda * perimeter / area stays below 0.002
    prob = rof_problem(img, 0.005, tri)
    cfg = SolverConfig(max_iterations=3000, tol=1e-9, preconditioning=True)
    sub = solve(prob, cfg)
    base = solve(baseline_problem(prob), cfg)
    assert np.abs(sub.labels - img).max() < 0.01
    assert np.abs(base.labels - img).min() > 0.2


def test_generators_are_seeded():
    a = gaussian_noise_image((4, 4), 100, 5, rng=3)
    b = gaussian_noise_image((4, 4), 100, 5, rng=3)
    np.testing.assert_array_equal(a, b)
    i1, i2, f = shifted_texture_pair((8, 8), (1.0, 2.0), rng=4)
    j1, j2, g = shifted_texture_pair((8, 8), (1.0, 2.0), rng=4)
    np.testing.assert_array_equal(i2, j2)
    assert f.shape == (8, 8, 2) and np.all(f[..., 0] == 1.0)
