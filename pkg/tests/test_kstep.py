import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from rbstein.kstep import (
    UNLABELED,
    AugmentedState,
    KFamily,
    KStepCounts,
    KStepModel,
    RunLengthError,
    SupportError,
    Trajectory,
    TransitionParams,
    augment,
    dual_to_simplex,
    entry_gradient,
    extract_counts,
    fit_eta,
    kstep_pmf,
    log_likelihood,
    read_trajectories_csv,
    score_entries,
    score_transition,
    simplex_to_dual,
    solve_ztp_rate,
    split_augmented,
    split_long_gaps,
    transition_loglik,
    write_trajectories_csv,
)

from oracles import brute_counts, fd_dual_gradient, random_gappy

U = UNLABELED


def test_extract_counts_examples():
    c = extract_counts([Trajectory([0, 1, 0])], k_max=3, n_states=2)
    assert c.table == {(0, 1, 1): 1, (1, 0, 1): 1}
    c = extract_counts([Trajectory([0, U, 1])], k_max=3, n_states=2)
    assert c.table == {(0, 1, 2): 1}
    c = extract_counts([Trajectory(np.array([], dtype=int))], k_max=3, n_states=2)
    assert c.total == 0 and not c.dense().any()


def test_extract_counts_ignores_edge_runs():
    c = extract_counts([Trajectory([U, U, 1, U, 0, U])], k_max=3, n_states=2)
    assert c.table == {(1, 0, 2): 1}


def test_extract_counts_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        S = int(rng.integers(2, 5))
        k_max = int(rng.integers(1, 6))
        trajs = [random_gappy(rng, S, k_max, int(rng.integers(1, 40))) for _ in range(3)]
        c = extract_counts(trajs, k_max, S)
        assert c.table == brute_counts(trajs, k_max)
        assert c.total == sum(max(int(t.observed.sum()) - 1, 0) for t in trajs)


def test_run_length_error_names_position():
    traj = Trajectory([0, U, U, U, 1], entity_id="farm7")
    with pytest.raises(RunLengthError, match="farm7.*position 0"):
        extract_counts([traj], k_max=3, n_states=2)


def test_split_long_gaps():
    traj = Trajectory([U, 0, U, 1, U, U, U, 1, 0, U])
    parts = split_long_gaps(traj, k_max=3)
    assert [p.states.tolist() for p in parts] == [[0, U, 1], [1, 0]]
    assert all(p.max_unlabeled_run() <= 2 for p in parts)


def test_augmented_bijection():
    for s in range(5):
        for a in (0, 1):
            z = augment(s, a)
            assert z == s * 2 + a
            assert split_augmented(z) == (s, a)
            assert AugmentedState.from_flat(z) == AugmentedState(s, a)


def test_augmented_counts():
    traj = Trajectory([0, 1, U, 1], actions=[1, 0, 0, 1])
    c = extract_counts([traj], k_max=2, n_states=2)
    assert c.n_states == 4
    assert c.table == {(augment(0, 1), augment(1, 0), 1): 1, (augment(1, 0), augment(1, 1), 2): 1}


def test_counts_merge_and_csv(tmp_path):
    a = extract_counts([Trajectory([0, 1, 0])], 2, 2)
    b = extract_counts([Trajectory([0, U, 1])], 2, 2)
    m = a.merge(b)
    assert m.table == {(0, 1, 1): 1, (1, 0, 1): 1, (0, 1, 2): 1}
    m.to_csv(tmp_path / "c.csv")
    assert KStepCounts.from_csv(tmp_path / "c.csv", 2, 2).table == m.table
    np.testing.assert_array_equal(KStepCounts.from_dense(m.dense()).table.keys(), m.table.keys())


def test_trajectory_csv_roundtrip(tmp_path):
    trajs = [Trajectory([0, U, 2], entity_id="a"), Trajectory([1, 1], entity_id="b")]
    write_trajectories_csv(trajs, tmp_path / "t.csv")
    back = read_trajectories_csv(tmp_path / "t.csv")
    assert [t.entity_id for t in back] == ["a", "b"]
    assert [t.states.tolist() for t in back] == [[0, U, 2], [1, 1]]


# -- likelihood ---------------------------------------------------------------------


def loop_loglik(M, P, logf):
    total = 0.0
    n, _, K = M.shape
    for i in range(n):
        for j in range(n):
            for k in range(1, K + 1):
                c = M[i, j, k - 1]
                if c:
                    total += c * (logf[i, k - 1] + math.log(np.linalg.matrix_power(P, k)[i, j]))
    return total


def test_log_likelihood_zero_counts():
    c = KStepCounts(3, 2)
    assert log_likelihood(c, KStepModel("ztpoisson", np.zeros(3)), TransitionParams.uniform(3)) == 0.0


def test_log_likelihood_single_term():
    lam = brentq(lambda x: x / math.expm1(x) - 0.5, 1e-6, 10)  # f(1) = 0.5
    model = KStepModel("ztpoisson", [math.log(lam), 0.0])
    assert kstep_pmf(model, 0, 1) == pytest.approx(0.5, abs=1e-12)
    params = TransitionParams.from_matrix([[0.6, 0.4], [0.5, 0.5]])
    c = KStepCounts(2, 1, {(0, 1, 1): 1})
    assert log_likelihood(c, model, params) == pytest.approx(math.log(0.2), abs=1e-12)
    assert math.log(0.2) == pytest.approx(-1.60944, abs=1e-5)


def test_log_likelihood_matches_triple_loop():
    rng = np.random.default_rng(4)
    for family in ("ztpoisson", "poisson"):
        M = rng.integers(0, 4, size=(3, 3, 3)).astype(float)
        c = KStepCounts.from_dense(M)
        model = KStepModel(family, rng.uniform(0.1, 1.0, 3))
        P = rng.dirichlet(np.ones(3), size=3)
        params = TransitionParams.from_matrix(P)
        logf = model.log_pmf(np.arange(1, 4))
        assert log_likelihood(c, model, params) == pytest.approx(loop_loglik(M, params.matrix(), logf), abs=1e-12)


def test_log_likelihood_impossible_is_minus_inf():
    c = KStepCounts(2, 1, {(0, 1, 1): 1})
    model = KStepModel("poisson", [0.0, 0.0])  # all gaps equal 1
    P = np.array([[1.0, 0.0], [0.5, 0.5]])
    assert transition_loglik(c.dense(), P) == -math.inf
    c2 = KStepCounts(2, 2, {(0, 0, 2): 1})
    assert log_likelihood(c2, model, TransitionParams.uniform(2)) == -math.inf


def test_log_likelihood_concatenation_order():
    rng = np.random.default_rng(5)
    trajs = [random_gappy(rng, 3, 3, 30) for _ in range(5)]
    model = KStepModel("ztpoisson", np.zeros(3))
    params = TransitionParams(rng.standard_normal((3, 2)))
    a = log_likelihood(extract_counts(trajs, 3, 3), model, params)
    b = log_likelihood(extract_counts(trajs[::-1], 3, 3), model, params)
    assert a == pytest.approx(b, abs=1e-12)


# -- gradients ----------------------------------------------------------------------------


def test_score_k1_reduces_to_ratio():
    rng = np.random.default_rng(6)
    M = rng.integers(0, 5, size=(3, 3, 1)).astype(float)
    P = rng.dirichlet(np.ones(3), size=3)
    params = TransitionParams.from_matrix(P)
    np.testing.assert_allclose(score_entries(KStepCounts.from_dense(M), params), M[..., 0] / params.matrix(), rtol=1e-12)


def test_score_zero_counts():
    params = TransitionParams(np.random.default_rng(0).standard_normal((4, 3)))
    g = score_transition(KStepCounts(4, 5), KStepModel("ztpoisson", np.zeros(4)), params)
    assert not g.any()


@pytest.mark.parametrize("S", [2, 3, 4])
@pytest.mark.parametrize("k_max", [1, 3, 5])
def test_score_matches_finite_differences(S, k_max):
    rng = np.random.default_rng(100 * S + k_max)
    for _ in range(3):
        M = rng.integers(0, 4, size=(S, S, k_max)).astype(float)
        counts = KStepCounts.from_dense(M)
        model = KStepModel("ztpoisson", rng.uniform(-1, 1, S))
        params = TransitionParams(rng.standard_normal((S, S - 1)))
        g = score_transition(counts, model, params)
        fd = fd_dual_gradient(counts, model, params)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-8)


def test_entry_gradient_batches_and_restricts_rows():
    rng = np.random.default_rng(7)
    P = rng.dirichlet(np.ones(3), size=(4, 2, 3))
    M = np.zeros((4, 1, 3, 3, 5))
    M[:, :, 0] = rng.integers(0, 3, size=(4, 1, 3, 5))
    G = entry_gradient(M, P)
    assert G.shape == (4, 2, 3, 3)
    for a in range(4):
        for b in range(2):
            np.testing.assert_allclose(G[a, b], entry_gradient(M[a, 0], P[a, b]), atol=1e-12)


def test_entry_gradient_zero_probability_raises():
    M = np.zeros((2, 2, 1))
    M[0, 1, 0] = 1
    with pytest.raises(SupportError):
        entry_gradient(M, np.array([[1.0, 0.0], [0.5, 0.5]]))


def test_gradient_zero_at_empirical_frequencies():
    rng = np.random.default_rng(8)
    P = rng.dirichlet(np.ones(3), size=3)
    s = [0]
    for _ in range(3000):
        s.append(int(rng.choice(3, p=P[s[-1]])))
    counts = extract_counts([Trajectory(s)], 1, 3)
    M = counts.dense()[..., 0]
    emp = M / M.sum(axis=1, keepdims=True)
    g = score_transition(counts, KStepModel("ztpoisson", np.zeros(3)), TransitionParams.from_matrix(emp))
    assert np.abs(g).max() <= 1e-8


# -- gap model --------------------------------------------------------------------------------


def test_fit_eta_poisson():
    c = KStepCounts(2, 3, {(0, 1, 2): 2, (0, 0, 2): 1})
    m = fit_eta(c, "poisson")
    assert m.eta[0] == pytest.approx(math.log(2), abs=1e-12)
    assert m.eta[0] == pytest.approx(0.69315, abs=1e-5)
    # unseen source falls back to the pooled fit by default, or the given prior
    assert m.eta[1] == pytest.approx(math.log(2))
    assert fit_eta(c, "poisson", prior_eta=0.3).eta[1] == 0.3


def test_ztp_rate_mean_two_bisection_oracle():
    f = lambda lam: lam / (1 - math.exp(-lam)) - 2.0
    lo, hi = 1e-9, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if f(mid) > 0 else (mid, hi)
    oracle = 0.5 * (lo + hi)
    assert solve_ztp_rate(2.0) == pytest.approx(oracle, abs=1e-9)
    assert oracle == pytest.approx(1.59362, abs=1e-5)
    c = KStepCounts(1, 3, {(0, 0, 1): 1, (0, 0, 3): 1})
    assert math.exp(fit_eta(c, "ztpoisson").eta[0]) == pytest.approx(oracle, abs=1e-9)


def test_ztp_rate_limit_and_error():
    assert solve_ztp_rate(1.0 + 1e-6) < 1e-5
    assert solve_ztp_rate(1.0) == 0.0
    with pytest.raises(SupportError):
        solve_ztp_rate(0.9)


@settings(max_examples=40, deadline=None)
@given(st.floats(1.0 + 1e-6, 30.0))
def test_ztp_newton_residual(mean_k):
    lam = solve_ztp_rate(mean_k)
    assert abs(lam / -math.expm1(-lam) - mean_k) <= 1e-10 * max(1.0, mean_k)


def test_kstep_pmf_examples():
    m = KStepModel("ztpoisson", [0.0])  # lam = 1
    oracle = math.exp(-1) / (1 - math.exp(-1))
    assert kstep_pmf(m, 0, 1) == pytest.approx(oracle, abs=1e-12)
    assert oracle == pytest.approx(0.58198, abs=1e-5)
    assert kstep_pmf(KStepModel("poisson", [0.0]), 0, 1) == pytest.approx(1.0)
    assert kstep_pmf(KStepModel("poisson", [1e-9]), 0, 1) == pytest.approx(1.0, abs=1e-8)
    with pytest.warns(RuntimeWarning):
        assert kstep_pmf(m, 0, 0) == 0.0


@pytest.mark.parametrize("family", ["ztpoisson", "poisson"])
@pytest.mark.parametrize("lam", [0.01, 1.0, 4.0, 10.0])
def test_kstep_pmf_normalised(family, lam):
    eta = math.log(lam) if family == "ztpoisson" else math.log1p(lam)
    m = KStepModel(family, [eta])
    assert m.rate[0] == pytest.approx(lam)
    total = np.exp(m.log_pmf(np.arange(1, 201))).sum()
    assert 1 - 1e-9 <= total <= 1 + 1e-9


# -- dual coordinates -------------------------------------------------------------------------


def test_dual_examples():
    np.testing.assert_allclose(dual_to_simplex(np.zeros(3)), np.full(4, 0.25))
    np.testing.assert_allclose(dual_to_simplex([math.log(2)]), [2 / 3, 1 / 3])
    with pytest.raises(ValueError):
        simplex_to_dual([1.0, 0.0])


def test_dual_round_trip():
    rng = np.random.default_rng(9)
    X = rng.dirichlet(np.ones(5), size=100)
    np.testing.assert_allclose(dual_to_simplex(simplex_to_dual(X)), X, atol=1e-12)
    nu = rng.standard_normal((100, 4))
    np.testing.assert_allclose(simplex_to_dual(dual_to_simplex(nu)), nu, atol=1e-12)


def test_kfamily_values():
    assert KFamily("poisson") is KFamily.POISSON
    with pytest.raises(ValueError):
        KStepModel("poisson", [-0.1])
