import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from waitlist_lab.lottery import horizon_weights, lottery_from_rol
from waitlist_lab.policy import (
    SUCCINCT,
    EnumerationTooLarge,
    ParameterError,
    PolicyProblem,
    Theta,
    approx_optimal_pair,
    best_single_period_rol,
    brute_force_optimal_pair,
    brute_force_solution,
    draw_utilities,
    flow_utility,
    mia_benchmark,
    objective_mode_agreement,
    single_period_value,
    solve_pair,
    total_value,
)

V_EX = np.array([7.0, 2.0])
PI1_EX = np.array([0.1, 0.5])
PI2_EX = np.array([0.5, 0.9])


def example(delta=0.99, **kw):
    # entry at age 4 leaves exactly two periods
    return PolicyProblem(V_EX, np.zeros(6), 4, PI1_EX, PI2_EX, delta=delta, K=2, **kw)


def hand_value(R1, R2, delta=0.99):
    """Two-period arithmetic written out by hand: enrol in period 1 and stay,
    or get waitlisted and try again with the period-2 chances."""
    def parts(pi, R):
        surv, ev = 1.0, 0.0
        for j in R:
            ev += surv * pi[j] * V_EX[j]
            surv *= 1 - pi[j]
        return ev, surv
    ev1, p1 = parts(PI1_EX, R1)
    ev2, _ = parts(PI2_EX, R2)
    return (1 + delta) * ev1 + p1 * delta * ev2


def test_flow_utility_examples():
    th = Theta(alpha=[0.0], beta=[0.0], sigma=[[0.0]])
    assert flow_utility(th, 26, [1], [0]).tolist() == [-1.0]
    th = Theta(alpha=[2.0], beta=[0.1], sigma=[[0.0]])
    assert flow_utility(th, 26, [0], [0])[0] == pytest.approx(4.6, abs=1e-12)
    with pytest.raises(ValueError):
        flow_utility(th, 26, [0, 1], [0])


def test_degenerate_draw_equals_means():
    th = Theta(alpha=[1.0, 2.0], beta=[0.0, 0.1], sigma=np.zeros((1, 1)),
               mu0=[0, 1, 2, 3, 4, 5])
    d = draw_utilities(th, 20, [1, 0], [0, 0], np.random.default_rng(0))
    assert d.v.tolist() == [0.0, 4.0]
    assert d.v0.tolist() == [0, 1, 2, 3, 4, 5]


def test_draw_is_deterministic_and_matches_covariance():
    sig = np.array([[1.0, 0.3], [0.3, 0.5]])
    th = Theta(alpha=np.zeros(3), beta=np.zeros(3), sigma=sig, idio_var=0.2)
    a = draw_utilities(th, 25, [0, 0, 0], [0, 1, 1], np.random.default_rng(3))
    b = draw_utilities(th, 25, [0, 0, 0], [0, 1, 1], np.random.default_rng(3))
    assert np.array_equal(a.v, b.v)
    rng = np.random.default_rng(4)
    X = np.array([draw_utilities(th, 25, [0, 0, 0], [0, 1, 1], rng).v for _ in range(100_000)])
    C = np.cov(X.T)
    target = th.full_covariance([0, 1, 1])
    assert np.linalg.norm(C - target) / np.linalg.norm(target) < 0.05


def test_sigma_not_psd_rejected():
    th = Theta(alpha=[0.0, 0.0], beta=[0.0, 0.0], sigma=[[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ParameterError):
        th.validate()


def test_theta_roundtrip():
    th = Theta(alpha=[1.0, 2.0], beta=[0.1, 0.0], sigma=[[0.5, 0.1], [0.1, 0.4]],
               mu0=[0, -1, -1, -1, -1, -1], sigma0sq=np.ones(6))
    back = Theta.from_dict(th.to_dict())
    for k in ("alpha", "beta", "sigma", "mu0", "sigma0sq"):
        assert np.allclose(getattr(back, k), getattr(th, k))


# -- illustrative example ---------------------------------------------------


def test_example_values():
    p = example()
    assert total_value(p, (0, 1), (0, 1)) == pytest.approx(5.1442, abs=1e-9)
    assert total_value(p, (0,), (0, 1)) == pytest.approx(5.3134, abs=1e-9)
    for R1 in [(), (0,), (1,), (0, 1)]:
        for R2 in [(), (0,), (1,), (0, 1)]:
            assert total_value(p, R1, R2) == pytest.approx(hand_value(R1, R2), abs=1e-12)


def test_example_choice():
    p = example()
    sol = brute_force_solution(p)
    assert (sol.R1, sol.R2) == ((0,), (0, 1))
    assert sol.value == pytest.approx(5.3134, abs=1e-9)
    assert approx_optimal_pair(p) == ((0,), (0, 1))


def test_empty_pair_is_zero():
    assert total_value(example(), (), ()) == 0.0


def test_single_period_reduces_to_flow():
    p = PolicyProblem(V_EX, np.zeros(6), 5, PI1_EX, PI2_EX, delta=0.99, K=2)
    assert total_value(p, (0, 1), (0, 1)) == pytest.approx(1.60, abs=1e-12)
    assert horizon_weights(5, 0.99)[0] == 0.0


def test_myopic_list():
    assert best_single_period_rol(V_EX, 0.0, PI1_EX, K=2) == (0, 1)
    assert single_period_value(V_EX, 0.0, PI1_EX, (0, 1)) == pytest.approx(1.60, abs=1e-12)
    assert best_single_period_rol(V_EX, 8.0, PI1_EX, K=2) == ()


def test_no_future_keeps_mia_list():
    rng = np.random.default_rng(1)
    for _ in range(50):
        v = rng.standard_normal(5)
        pi1, pi2 = rng.uniform(size=5), rng.uniform(size=5)
        p = PolicyProblem(v, np.zeros(6), 5, pi1, pi2, K=3)
        assert approx_optimal_pair(p)[0] == best_single_period_rol(v, 0.0, pi1, 3)


def test_same_chances_period2_is_myopic():
    # a second try still has option value, so R1 may be shorter than the
    # myopic list; R2 is the myopic list and the pair matches the oracle
    rng = np.random.default_rng(2)
    for _ in range(50):
        v = rng.standard_normal(5)
        pi = rng.uniform(size=5)
        p = PolicyProblem(v, np.zeros(6), 0, pi, pi, K=3)
        sol = solve_pair(p)
        assert sol.R2 == best_single_period_rol(v, 0.0, pi, 3)
        assert sol.value == pytest.approx(brute_force_solution(p).value, abs=1e-9)


def test_enumeration_guard():
    p = PolicyProblem(np.zeros(30), np.zeros(6), 0, np.full(30, .5), np.full(30, .5), K=5)
    with pytest.raises(EnumerationTooLarge):
        brute_force_optimal_pair(p)


def test_one_center_sign_rule():
    for v in (-1.0, 1.0):
        p = PolicyProblem([v], np.zeros(6), 0, [0.5], [0.5], K=1)
        R1, _ = brute_force_optimal_pair(p)
        assert R1 == ((0,) if v > 0 else ())


# -- MIA against exhaustive search -------------------------------------------


def exhaustive_single(v, v0, pi, K):
    best = v0
    for k in range(1, K + 1):
        for S in itertools.combinations(range(len(v)), k):
            R = sorted(S, key=lambda j: -v[j])
            lot = lottery_from_rol(dict(enumerate(pi)), R)
            best = max(best, lot.expected(dict(enumerate(v))) + lot.waitlist * v0)
    return best


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mia_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    J, K = int(rng.integers(1, 9)), int(rng.integers(1, 5))
    v, pi = rng.standard_normal(J), rng.uniform(size=J)
    R = best_single_period_rol(v, 0.0, pi, K)
    assert len(R) <= K and list(R) == sorted(R, key=lambda j: -v[j])
    assert single_period_value(v, 0.0, pi, R) == pytest.approx(exhaustive_single(v, 0.0, pi, K), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_appending_valuable_center_raises_value(seed):
    rng = np.random.default_rng(seed)
    J = 6
    v, pi = rng.standard_normal(J), rng.uniform(0.05, 1, size=J)
    R = list(best_single_period_rol(v, 0.0, pi, 2))
    cont = 0.0
    rest = [j for j in range(J) if j not in R and v[j] > cont]
    if not rest or len(R) == 0:
        return
    # append below the current tail: only centers worse than the tail qualify
    tail = [j for j in rest if v[j] < v[R[-1]]]
    for j in tail:
        assert single_period_value(v, 0.0, pi, R + [j]) > single_period_value(v, 0.0, pi, R)


# -- pair search -------------------------------------------------------------


def exhaustive_pair(p: PolicyProblem):
    J, K = p.n_centers, p.K
    lists = [()]
    for k in range(1, K + 1):
        lists += [tuple(sorted(S, key=lambda j: (-p.v[j], j))) for S in itertools.combinations(range(J), k)]
    return max(total_value(p, a, b) for a in lists for b in lists)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_brute_force_matches_plain_enumeration(seed):
    rng = np.random.default_rng(seed)
    J = int(rng.integers(1, 6))
    p = PolicyProblem(rng.standard_normal(J), rng.standard_normal(6) * 0.5, int(rng.integers(0, 6)),
                      rng.uniform(size=J), rng.uniform(size=J), delta=0.9, K=int(rng.integers(1, 4)))
    sol = brute_force_solution(p)
    assert sol.value == pytest.approx(exhaustive_pair(p), abs=1e-9)
    assert total_value(p, sol.R1, sol.R2) == pytest.approx(sol.value, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_approx_never_beats_brute_force(seed):
    rng = np.random.default_rng(seed)
    J = int(rng.integers(1, 7))
    p = PolicyProblem(rng.standard_normal(J), rng.standard_normal(6) * 0.5, int(rng.integers(0, 6)),
                      rng.uniform(size=J), rng.uniform(size=J), K=3)
    sol = solve_pair(p)
    assert sol.value == pytest.approx(total_value(p, sol.R1, sol.R2), abs=1e-9)
    assert sol.value <= brute_force_solution(p).value + 1e-9


def test_dropping_incentive_direction():
    # raising the period-2 chance at the top center weakly raises period-1 waitlist risk
    p1_prev = -1.0
    for a in np.linspace(0.0, 1.0, 21):
        p = PolicyProblem(V_EX, np.zeros(6), 4, PI1_EX, np.array([a, 0.9]), delta=0.99, K=2)
        R1, _ = brute_force_optimal_pair(p)
        p1 = lottery_from_rol(dict(enumerate(PI1_EX)), R1).waitlist
        assert p1 >= p1_prev - 1e-12
        p1_prev = p1


def test_succinct_mode_is_computed():
    p = example(mode=SUCCINCT)
    assert np.isfinite(total_value(p, (0,), (0, 1)))
    rate = objective_mode_agreement(n=60, seed=0)
    assert 0.0 <= rate <= 1.0


def test_benchmark_rows():
    rows = mia_benchmark(J=6, K=2, M=50, seed=0)
    assert [r["c"] for r in rows] == [0.0, 1.0, 2.0]
    for r in rows:
        tot = sum(r[f"updates_{k}"] for k in range(5)) + r["updates_5plus"]
        assert tot == pytest.approx(1.0)
        assert 0 <= r["fraction_correct"] <= 1


def test_benchmark_trivial_when_certain():
    rows = mia_benchmark(J=5, K=2, M=100, c_list=(0.0,), pi1=np.ones(5), pi2=np.ones(5))
    assert rows[0]["fraction_correct"] == 1.0
