import itertools
import math

import numpy as np
import pytest

from rbstein.stein import (
    KernelKind,
    KernelSpec,
    MEDIAN,
    NonFiniteError,
    OptimizerState,
    dual_to_simplex,
    kernel_eval,
    kernel_terms,
    median_bandwidth,
    msvgd_batch_step,
    msvgd_step,
    project_simplex,
    psvgd_step,
    read_particles_csv,
    rmsprop_step,
    svgd_step,
    write_particles_csv,
)

RBF = KernelSpec(KernelKind.RBF, 1.0)
IMQ = KernelSpec()


def test_kernel_eval_at_equal_points():
    x = np.array([0.3, -1.2])
    for spec, val in [(RBF, 1.0), (KernelSpec("imq", 1.0, c=2.0, beta=-0.5), 2.0 ** (-1.0))]:
        k, g = kernel_eval(spec, x, x)
        assert k == pytest.approx(val)
        assert not g.any()


def test_kernel_eval_direct_formula():
    x, y = np.array([1.0, 1.0]), np.zeros(2)  # squared distance 2
    assert kernel_eval(RBF, x, y)[0] == pytest.approx(math.exp(-2))
    assert math.exp(-2) == pytest.approx(0.13534, abs=1e-5)
    x3 = np.array([1.0, 1.0, 1.0])
    assert kernel_eval(IMQ, x3, np.zeros(3))[0] == pytest.approx(0.5)


@pytest.mark.parametrize("spec", [RBF, IMQ, KernelSpec("rbf", 2.5), KernelSpec("imq", 0.7, c=1.5, beta=-0.3)])
def test_kernel_gradient_finite_differences(spec):
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal(3), rng.standard_normal(3)
    _, g = kernel_eval(spec, x, y)
    h = 1e-6
    fd = [(kernel_eval(spec, x + h * e, y)[0] - kernel_eval(spec, x - h * e, y)[0]) / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(g, fd, atol=1e-8)


def test_kernel_spec_validation():
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            KernelSpec("rbf", bad)
    with pytest.raises(ValueError):
        KernelSpec("imq", 1.0, beta=-1.5)
    with pytest.raises(ValueError):
        kernel_eval(RBF, np.zeros(2), np.zeros(2), bandwidth=0.0)


def test_median_bandwidth():
    assert median_bandwidth(np.zeros((1, 3))) == 1.0
    assert median_bandwidth(np.array([[0.0], [2.0]])) == pytest.approx(4 / math.log(3))
    assert 4 / math.log(3) == pytest.approx(3.64096, abs=1e-5)
    assert median_bandwidth(np.ones((5, 2))) == 1.0


@pytest.mark.parametrize("spec", [RBF, IMQ, KernelSpec("rbf", MEDIAN)])
def test_gram_matrix_symmetric_psd(spec):
    rng = np.random.default_rng(1)
    for _ in range(10):
        X = rng.standard_normal((30, 4)) * rng.uniform(0.1, 3)
        K, _ = kernel_terms(spec, X)
        np.testing.assert_allclose(K, K.T, atol=1e-14)
        assert np.linalg.eigvalsh(K).min() >= -1e-10


def test_kernel_terms_match_pointwise():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((4, 3))
    K, G = kernel_terms(IMQ, X)
    for j, i in itertools.product(range(4), repeat=2):
        k, g = kernel_eval(IMQ, X[j], X[i])
        assert K[j, i] == pytest.approx(k)
        np.testing.assert_allclose(G[j, i], g, atol=1e-14)


def test_rmsprop_examples():
    _, step = rmsprop_step(OptimizerState(lr=0.1), np.array([1.0]))
    assert step[0] == pytest.approx(0.1 / math.sqrt(0.1), rel=1e-6)
    assert step[0] == pytest.approx(0.31623, abs=1e-5)
    opt = OptimizerState(v=np.array([2.0]))
    opt2, step = rmsprop_step(opt, np.array([0.0]))
    assert step[0] == 0.0 and opt2.v[0] == pytest.approx(1.8)
    opt = OptimizerState(lr=0.1)
    for _ in range(500):
        opt, step = rmsprop_step(opt, np.array([3.0, -2.0]))
    np.testing.assert_allclose(np.abs(step), 0.1, rtol=1e-6)
    assert np.all(opt.v >= 0)


def test_rmsprop_decay():
    opt = OptimizerState(lr=1.0, decay=1.0, t=3)
    _, step = rmsprop_step(opt, np.array([1.0]))
    assert step[0] == pytest.approx(0.25 / math.sqrt(0.1), rel=1e-6)


def test_single_particle_svgd_is_rmsprop_gradient_step():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((3, 3))
    score = lambda x: -A @ x + 1.0
    for _ in range(100):
        x = rng.standard_normal(3)
        v0 = rng.uniform(0, 2, 3)
        new, _ = svgd_step(x[None], score, RBF, OptimizerState(v=v0[None]))
        _, step = rmsprop_step(OptimizerState(v=v0), score(x))
        assert np.abs(new[0] - (x + step)).max() <= 1e-12


def test_zero_score_single_particle_unchanged():
    x = np.array([[0.4, -0.1]])
    new, _ = svgd_step(x, lambda p: np.zeros(2), IMQ, OptimizerState())
    np.testing.assert_array_equal(new, x)


def test_two_mirrored_particles_stay_mirrored():
    X = np.array([[0.5, -0.3], [-0.5, 0.3]])
    score = lambda x: -x  # symmetric about the origin
    new, _ = svgd_step(X, score, RBF, OptimizerState())
    np.testing.assert_allclose(new[0], -new[1], atol=1e-15)
    # direct evaluation of the two-term sum for particle 0
    k01 = math.exp(-np.sum((X[0] - X[1]) ** 2))
    phi0 = 0.5 * (score(X[0]) + k01 * score(X[1]) + k01 * 2 * (X[0] - X[1]))
    _, step = rmsprop_step(OptimizerState(), np.stack([phi0, -phi0]))
    np.testing.assert_allclose(new[0], X[0] + step[0], atol=1e-14)


def test_svgd_permutation_equivariant():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((7, 2))
    score = lambda x: -2 * x + np.array([1.0, 0.0])
    perm = rng.permutation(7)
    a, _ = svgd_step(X, score, IMQ, OptimizerState())
    b, _ = svgd_step(X[perm], score, IMQ, OptimizerState())
    np.testing.assert_allclose(a[perm], b, atol=1e-14)


def test_nonfinite_score_reports_particle():
    X = np.array([[0.0], [1.0], [2.0]])
    score = lambda x: np.array([np.nan]) if x[0] == 1.0 else -x
    with pytest.raises(NonFiniteError) as err:
        svgd_step(X, score, RBF, OptimizerState())
    assert err.value.index == 1


def test_gaussian_target_smoke():
    rng = np.random.default_rng(5)
    mu, sd = 2.0, 0.5
    X = rng.uniform(-1, 1, size=(50, 1))
    opt = OptimizerState()
    spec = KernelSpec("rbf", MEDIAN)
    for _ in range(500):
        X, opt = svgd_step(X, lambda x: -(x - mu) / sd**2, spec, opt)
    assert abs(X.mean() - mu) <= 0.1 * mu
    assert abs(X.var() - sd**2) <= 0.1 * sd**2


# -- mirror and projected variants --------------------------------------------------------


def grid_mode(alpha, step=1e-3):
    """Dense grid search for the maximiser of prod x_j^alpha_j on the 2-simplex."""
    g = np.arange(step, 1, step)
    a, b = np.meshgrid(g, g, indexing="ij")
    c = 1 - a - b
    ok = c > 0
    logd = np.where(ok, alpha[0] * np.log(a) + alpha[1] * np.log(b) + alpha[2] * np.log(np.where(ok, c, 1)), -np.inf)
    i = np.unravel_index(np.argmax(logd), logd.shape)
    return np.array([a[i], b[i], 1 - a[i] - b[i]])


def test_msvgd_dirichlet_single_particle_mode():
    alpha = np.array([3.0, 2.0, 2.0])
    # pushforward of Dir(alpha) to dual coordinates has density prop. to prod x^alpha
    oracle = grid_mode(alpha)
    score = lambda X: (alpha - 1) / X
    nu = np.zeros((1, 2))
    opt = OptimizerState(decay=0.01)
    for _ in range(5000):
        nu, opt = msvgd_step(nu, score, IMQ, opt, 3)
    x = dual_to_simplex(nu.reshape(1, 2))[0]
    assert 0.5 * np.abs(x - oracle).sum() <= 1e-3


def test_msvgd_zero_score_stationary_at_uniform():
    nu = np.zeros((1, 4))
    new, _ = msvgd_step(nu, lambda X: np.zeros_like(X), IMQ, OptimizerState(), 3)
    np.testing.assert_allclose(new, nu, atol=1e-15)


def test_msvgd_outputs_interior_rows():
    rng = np.random.default_rng(6)
    nu = rng.standard_normal((5, 2 * 3))
    counts = rng.integers(0, 20, size=(2, 4))
    opt = OptimizerState(lr=0.5)
    for _ in range(50):
        nu, opt = msvgd_step(nu, lambda X: counts / X, IMQ, opt, 4)
        P = dual_to_simplex(nu.reshape(5, 2, 3))
        assert np.all(P > 0)
        assert np.abs(P.sum(axis=-1) - 1).max() <= 1e-9


def test_msvgd_batch_matches_single():
    rng = np.random.default_rng(7)
    nu = rng.standard_normal((2, 3, 2, 2))
    W = rng.uniform(1, 5, size=(2, 1, 2, 3))
    a, _ = msvgd_batch_step(nu, lambda X: W / X, IMQ, OptimizerState())
    for i in range(2):
        b, _ = msvgd_step(nu[i].reshape(3, -1), lambda X: W[i, 0] / X, IMQ, OptimizerState(), 3)
        np.testing.assert_allclose(a[i].reshape(3, -1), b, atol=1e-13)


def test_project_simplex_examples():
    np.testing.assert_allclose(project_simplex([0.6, 0.6]), [0.5, 0.5])
    np.testing.assert_allclose(project_simplex([2.0, 0.0]), [1.0, 0.0])
    x = np.array([0.2, 0.3, 0.5])
    np.testing.assert_allclose(project_simplex(x), x, atol=1e-15)


def active_set_projection(v):
    """Exhaustive active-set search: for every support, solve the equality-constrained
    projection and keep the best feasible one."""
    best, best_d = None, np.inf
    d = len(v)
    for r in range(1, d + 1):
        for supp in itertools.combinations(range(d), r):
            u = np.zeros(d)
            idx = list(supp)
            u[idx] = v[idx] - (v[idx].sum() - 1) / r
            if np.all(u >= -1e-12):
                dist = np.sum((u - v) ** 2)
                if dist < best_d:
                    best, best_d = u, dist
    return best


def test_project_simplex_matches_active_set_oracle():
    rng = np.random.default_rng(8)
    for _ in range(200):
        v = rng.normal(0, 2, 3)
        np.testing.assert_allclose(project_simplex(v), active_set_projection(v), atol=1e-12)
    V = rng.normal(size=(10, 3))
    np.testing.assert_allclose(project_simplex(V), [active_set_projection(v) for v in V], atol=1e-12)


def test_psvgd_step_keeps_rows_on_simplex():
    rng = np.random.default_rng(9)
    X = rng.dirichlet(np.ones(3), size=(4, 2)).reshape(4, 6)
    counts = rng.integers(1, 10, size=6)
    opt = OptimizerState(lr=0.3)
    for _ in range(30):
        X, opt = psvgd_step(X, lambda x: counts / np.maximum(x, 1e-3), IMQ, opt, 3)
        rows = X.reshape(4, 2, 3)
        assert np.all(rows >= 0)
        assert np.abs(rows.sum(axis=-1) - 1).max() <= 1e-9


def test_psvgd_inside_step_is_plain_svgd():
    X = np.array([[0.3, 0.7]])
    score = lambda x: np.array([0.01, -0.01])
    a, _ = psvgd_step(X, score, RBF, OptimizerState(lr=0.01), 2)
    b, _ = svgd_step(X, score, RBF, OptimizerState(lr=0.01))
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_particles_csv_roundtrip(tmp_path):
    X = np.random.default_rng(10).standard_normal((3, 4))
    write_particles_csv(X, tmp_path / "p.csv")
    np.testing.assert_array_equal(read_particles_csv(tmp_path / "p.csv"), X)
