import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from kpseg import kpkernel as kp
from kpseg.nncore import finite_diff_check, relative_error
from kpseg.pccore import NeighborTable, radius_search


def random_instance(rng, M=4, S=6, K=15, c_in=3, c_out=3, r=1.0):
    kd = kp.generate_kernel_points(K, r, seed=0)
    supports = rng.uniform(-r, r, (S, 3))
    queries = supports[rng.choice(S, M, replace=False)] + rng.normal(0, 0.1 * r, (M, 3))
    nb = radius_search(queries, supports, 2 * r, max_neighbors=S)
    feats = np.vstack([rng.normal(size=(S, c_in)), np.zeros((1, c_in))])
    W = rng.normal(size=(K, c_in, c_out))
    return queries, supports, nb, feats, W, kd


# -- kernel points -----------------------------------------------------------------


def test_kernel_two_points():
    kd = kp.generate_kernel_points(2, 0.7)
    np.testing.assert_array_equal(kd.points[0], 0.0)
    assert abs(np.linalg.norm(kd.points[1]) - 0.7) < 1e-12
    assert kd.influence == pytest.approx(1.05)


def test_kernel_rejects_small_K():
    with pytest.raises(ValueError):
        kp.generate_kernel_points(1, 1.0)


def test_kernel_seven_points_norms_and_determinism():
    a = kp.generate_kernel_points(7, 1.0, seed=3)
    b = kp.generate_kernel_points(7, 1.0, seed=3)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_allclose(np.linalg.norm(a.points[1:], axis=1), 1.0, atol=1e-9)


def _coulomb(flat):
    x = flat.reshape(-1, 3)
    u = x / np.linalg.norm(x, axis=1, keepdims=True)
    d = np.sqrt(((u[:, None] - u[None]) ** 2).sum(-1))
    iu = np.triu_indices(len(u), 1)
    return (1.0 / d[iu]).sum()


def _min_angle(u):
    u = u / np.linalg.norm(u, axis=1, keepdims=True)
    c = u @ u.T
    np.fill_diagonal(c, -1)
    return np.arccos(np.clip(c.max(), -1, 1))


def test_kernel_fifteen_points_reaches_repulsion_optimum():
    kd = kp.generate_kernel_points(15, 1.0, seed=0)
    np.testing.assert_allclose(np.linalg.norm(kd.points[1:], axis=1), 1.0, atol=1e-9)
    assert np.count_nonzero(np.linalg.norm(kd.points, axis=1) == 0) == 1
    again = kp.generate_kernel_points(15, 1.0, seed=0)
    np.testing.assert_array_equal(kd.points, again.points)
    # independent oracle: BFGS on the unconstrained energy from 10 random starts, keep the best
    rng = np.random.default_rng(123)
    best = None
    for _ in range(10):
        res = minimize(_coulomb, rng.normal(size=42), method="BFGS", options={"gtol": 1e-10, "maxiter": 5000})
        if best is None or res.fun < best.fun:
            best = res
    optimum_angle = _min_angle(best.x.reshape(-1, 3))
    assert abs(kp.shell_min_angle(kd) - optimum_angle) < 1e-3
    assert abs(_coulomb(kd.points[1:].ravel()) - best.fun) < 1e-6


# -- influence -------------------------------------------------------------------


def test_influence_analytic_values():
    kd = kp.KernelDisposition(np.array([[0.0, 0, 0], [0.5, 0, 0]]), 0.5, 0.75)
    d = kd.influence
    rel = np.array([[0.5, 0, 0], [0.5 + d / 2, 0, 0], [0.5, d, 0], [0.5, 2 * d, 0]])
    h = kp.kernel_influence(rel, kd)
    assert abs(h[0, 1] - 1.0) < 1e-12
    assert abs(h[1, 1] - 0.5) < 1e-12
    assert abs(h[2, 1] - 0.0) < 1e-12
    assert h[3, 1] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_influence_range_and_support(seed):
    rng = np.random.default_rng(seed)
    kd = kp.generate_kernel_points(15, 1.0)
    rel = rng.normal(0, 1.5, (40, 3))
    h = kp.kernel_influence(rel, kd)
    assert np.all((h >= 0) & (h <= 1))
    dist = np.linalg.norm(rel[:, None] - kd.points[None], axis=-1)
    assert np.all(h[dist >= kd.influence] == 0)


# -- forward ---------------------------------------------------------------------


def test_forward_zero_features():
    rng = np.random.default_rng(0)
    q, s, nb, f, W, kd = random_instance(rng)
    out = kp.kpconv_forward(q, s, nb, np.zeros_like(f), W, kd)
    assert np.all(out == 0)


def test_forward_single_kernel_identity():
    # K = 1 at the origin with a huge influence distance, so h is 1 for a coincident neighbor
    kd = kp.KernelDisposition(np.zeros((1, 3)), 1.0, 1e9)
    q = np.array([[1.0, 2.0, 3.0]])
    nb = NeighborTable(np.array([[0]]), 1.0, 1)
    f = np.array([[0.3, -1.2, 4.0], [0, 0, 0]])
    W = np.eye(3)[None]
    out = kp.kpconv_forward(q, q.copy(), nb, f, W, kd)
    np.testing.assert_allclose(out, f[:1], rtol=1e-15)


def test_forward_far_neighbor_has_no_effect():
    kd = kp.generate_kernel_points(15, 0.1)
    q = np.zeros((1, 3))
    s = np.array([[0.05, 0, 0], [10.0, 0, 0]])
    rng = np.random.default_rng(0)
    f = np.vstack([rng.normal(size=(2, 4)), np.zeros((1, 4))])
    W = rng.normal(size=(15, 4, 2))
    both = kp.kpconv_forward(q, s, NeighborTable(np.array([[0, 1]]), 0.1, 2), f, W, kd)
    near = kp.kpconv_forward(q, s, NeighborTable(np.array([[0, 2]]), 0.1, 2), f, W, kd)
    np.testing.assert_array_equal(both, near)


def test_forward_matches_direct_sum():
    rng = np.random.default_rng(7)
    q, s, nb, f, W, kd = random_instance(rng, M=5, S=9, c_in=2, c_out=4)
    out = kp.kpconv_forward(q, s, nb, f, W, kd)
    expected = np.zeros((5, 4))
    for m in range(5):
        for i in nb.indices[m]:
            if i == len(s):
                continue
            h = kp.kernel_influence((s[i] - q[m])[None], kd)[0]
            for k in range(kd.K):
                expected[m] += h[k] * (f[i] @ W[k])
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_forward_shape_mismatch():
    rng = np.random.default_rng(0)
    q, s, nb, f, W, kd = random_instance(rng)
    with pytest.raises(ValueError):
        kp.kpconv_forward(q, s, nb, f, W[:, :2], kd)
    with pytest.raises(ValueError):
        kp.kpconv_forward(q, s, nb, f[:-1], W, kd)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_forward_linearity(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    q, s, nb, f1, W, kd = random_instance(rng)
    f2 = np.vstack([rng.normal(size=f1[:-1].shape), np.zeros((1, f1.shape[1]))])
    lhs = kp.kpconv_forward(q, s, nb, alpha * f1 + beta * f2, W, kd)
    rhs = alpha * kp.kpconv_forward(q, s, nb, f1, W, kd) + beta * kp.kpconv_forward(q, s, nb, f2, W, kd)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_forward_translation_invariance(seed):
    rng = np.random.default_rng(seed)
    q, s, nb, f, W, kd = random_instance(rng)
    shift = rng.uniform(-100, 100, 3)
    a = kp.kpconv_forward(q, s, nb, f, W, kd)
    b = kp.kpconv_forward(q + shift, s + shift, nb, f, W, kd)
    np.testing.assert_allclose(a, b, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_forward_neighbor_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    q, s, nb, f, W, kd = random_instance(rng, M=5, S=10)
    perm = np.array([rng.permutation(row) for row in nb.indices])
    a = kp.kpconv_forward(q, s, nb, f, W, kd)
    b = kp.kpconv_forward(q, s, NeighborTable(perm, nb.radius, nb.n_supports), f, W, kd)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_compact_support_point_gets_no_gradient():
    kd = kp.generate_kernel_points(15, 0.2)
    q = np.zeros((1, 3))
    s = np.array([[0.1, 0, 0], [5.0, 0, 0]])
    nb = NeighborTable(np.array([[0, 1]]), 0.2, 2)
    rng = np.random.default_rng(1)
    f = np.vstack([rng.normal(size=(2, 3)), np.zeros((1, 3))])
    W = rng.normal(size=(15, 3, 2))
    gf, _ = kp.kpconv_backward(q, s, nb, f, W, kd, rng.normal(size=(1, 2)))
    assert np.all(gf[1] == 0)
    assert np.any(gf[0] != 0)


# -- backward --------------------------------------------------------------------


def test_backward_zero_grad():
    rng = np.random.default_rng(0)
    q, s, nb, f, W, kd = random_instance(rng)
    gf, gW = kp.kpconv_backward(q, s, nb, f, W, kd, np.zeros((len(q), W.shape[2])))
    assert np.all(gf == 0) and np.all(gW == 0)


def test_backward_single_kernel_outer_product():
    kd = kp.KernelDisposition(np.zeros((1, 3)), 1.0, 1e9)
    q = np.zeros((1, 3))
    nb = NeighborTable(np.array([[0]]), 1.0, 1)
    f = np.array([[0.5, -2.0], [0, 0]])
    W = np.array([[[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]])
    g = np.array([[1.0, -0.5, 2.0]])
    gf, gW = kp.kpconv_backward(q, q.copy(), nb, f, W, kd, g)
    np.testing.assert_allclose(gW[0], np.outer(f[0], g[0]), rtol=1e-15)
    np.testing.assert_allclose(gf[0], W[0] @ g[0], rtol=1e-15)
    assert np.all(gf[1] == 0)


def _fd_errors(rng):
    q, s, nb, f, W, kd = random_instance(rng, M=4, S=6, K=15, c_in=3, c_out=3)
    feats = f[:-1].copy()

    def fwd():
        return kp.kpconv_forward(q, s, nb, np.vstack([feats, np.zeros((1, 3))]), W, kd)

    def bwd(G):
        gf, gW = kp.kpconv_backward(q, s, nb, np.vstack([feats, np.zeros((1, 3))]), W, kd, G)
        return {"features": gf[:-1], "W": gW}

    return finite_diff_check(fwd, bwd, {"features": feats, "W": W}, eps=1e-6, per_tensor=True)


def test_backward_finite_differences_twenty_instances():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        errs = _fd_errors(rng)
        worst = max(worst, *errs.values())
    assert worst < 1e-6


def test_relative_error_helper():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)
