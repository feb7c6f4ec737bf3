import logging

import numpy as np
import pytest

from waitlist_lab.counterfactual import (
    Scenario,
    cutoff_histogram_report,
    iterate_equilibrium,
    pooled_cutoff_histogram,
    run_scenarios,
    sentinel_support,
    welfare_report,
)
from waitlist_lab.lottery import LotteryBelief, horizon_weights
from waitlist_lab.market import MarketConfig, default_market_config, generate_market
from waitlist_lab.mechanism import CLOSED_CODE, OPEN_CODE
from waitlist_lab.policy import Theta, lookup_beliefs

logging.getLogger("waitlist_lab").setLevel(logging.ERROR)


def slack(n=30, alpha=(8.0, 8.0), cap=None, sigma=0.1):
    c = np.full((2, 6), -1)
    c[:, 0] = n if cap is None else cap
    c[:, 1] = n if cap is None else cap
    return MarketConfig(
        years=2, ages=(0, 1), center_area=[0, 1], capacity=c,
        applicants=np.array([[n, 0, 0, 0, 0, 0], [n, 0, 0, 0, 0, 0]]),
        theta_true=Theta(alpha=list(alpha), beta=[0.0, 0.0], sigma=np.eye(2) * sigma,
                         mu0=np.zeros(6), sigma0sq=np.zeros(6)),
        seed=3,
    )


def ones(cfg):
    return LotteryBelief.constant(list(range(cfg.n_centers)), cfg.structure().cells(), 1.0)


@pytest.fixture(scope="module")
def small_sweep():
    cfg = default_market_config(n_entrants=120, years=2, seed=1, tightness=1.0)
    p = generate_market(cfg)
    outs = run_scenarios(cfg.theta_true, cfg, [Scenario(b=b, M=2, B=100, seed=1, damping=0.5, max_iters=15)
                                               for b in (0, 2)], p.belief)
    return cfg, p, outs


def test_slack_market_converges_at_once():
    cfg = slack()
    out = iterate_equilibrium(cfg.theta_true, cfg, Scenario(b=2, M=1, B=50), ones(cfg))
    assert out.converged and out.iterations == 1 and out.changes == [0.0]
    assert all((t == 1.0).all() for t in out.belief.tables.values())


def test_infinite_epsilon_stops_after_one_round():
    cfg = default_market_config(n_entrants=60, years=2, seed=0)
    out = iterate_equilibrium(cfg.theta_true, cfg, Scenario(b=2, epsilon=np.inf, B=30), ones(cfg))
    assert out.converged and out.iterations == 1


def test_nonconvergence_is_reported_not_raised():
    cfg = default_market_config(n_entrants=60, years=2, seed=0)
    out = iterate_equilibrium(cfg.theta_true, cfg, Scenario(b=2, epsilon=1e-12, max_iters=2, B=30), ones(cfg))
    assert not out.converged and out.iterations == 2 and len(out.changes) == 2


def test_scenario_validation():
    for bad in (Scenario(b=0, M=0), Scenario(b=0, epsilon=0.0), Scenario(b=0, damping=1.0)):
        with pytest.raises(ValueError):
            bad.validate()


def test_always_assigned_value():
    # one center worth 10 with a seat for everyone: V = 10 * (1 + delta + ... + delta^5)
    cfg = slack(n=1, alpha=(10.0, -50.0), sigma=0.0)
    out = iterate_equilibrium(cfg.theta_true, cfg, Scenario(b=2, M=1, B=10), ones(cfg))
    _, D = horizon_weights(0, cfg.theta_true.delta)
    # the same-area term is -1 for applicants living in area A
    expect = np.where(out.population.area == 0, 9.0, 10.0) * D
    assert np.allclose(out.V, expect, atol=1e-12)


def test_welfare_identity_and_report(small_sweep):
    cfg, _, outs = small_sweep
    for o in outs:
        ok = ~np.isnan(o.V)
        assert np.array_equal(o.V[ok], o.V1[ok] + o.delta * o.V2[ok])
    rep = welfare_report(outs)
    assert {r["b"] for r in rep.by_cell} == {0, 2}
    assert {r["bucket"] for r in rep.by_bucket} == {"<=25", "26", "27", ">=28"}
    for r in rep.by_cell:
        assert r["draws"] == 2


def test_histograms_encode_sentinels(small_sweep):
    _, _, outs = small_sweep
    for o in outs:
        tot = {}
        for r in o.cutoff_hist:
            assert r["cutoff"] in sentinel_support()
            tot[(r["year"], r["age"])] = tot.get((r["year"], r["age"]), 0.0) + r["frequency"]
        assert all(v == pytest.approx(1.0) for v in tot.values())
    pooled = pooled_cutoff_histogram(outs)
    assert {r["b"] for r in pooled} == {0, 2}


def test_all_open_and_all_closed_histograms(small_sweep):
    _, _, outs = small_sweep
    o = outs[0]
    keys = list(o.sim.cutoffs)
    J = o.sim.cutoffs[keys[0]].size
    for code, sentinel in ((OPEN_CODE, 11), (CLOSED_CODE, 35)):
        o.sim.cutoffs = {k: np.full(J, code) for k in keys}
        rows = cutoff_histogram_report(o)
        assert {r["cutoff"] for r in rows} == {sentinel}
        assert all(r["frequency"] == 1.0 for r in rows)


def test_reproducible():
    cfg = default_market_config(n_entrants=60, years=2, seed=0)
    sc = Scenario(b=1, M=1, B=30, max_iters=3)
    a = iterate_equilibrium(cfg.theta_true, cfg, sc, ones(cfg))
    b = iterate_equilibrium(cfg.theta_true, cfg, sc, ones(cfg))
    assert a.changes == b.changes
    assert np.array_equal(a.V, b.V, equal_nan=True)
    assert all(np.array_equal(a.belief.tables[k], b.belief.tables[k]) for k in a.belief.keys())


def test_bonus_zero_is_neutral(small_sweep):
    # with b = 0 a reapplicant faces the same chances as a fresh applicant
    # with the same score in the same cell
    _, _, outs = small_sweep
    o = next(o for o in outs if o.b == 0)
    s = np.arange(20, 36)
    n = s.size
    fresh, _ = lookup_beliefs(o.belief, np.tile([1, 1], (n, 1)), [None] * n, s, 0)
    _, again = lookup_beliefs(o.belief, np.tile([0, 0], (n, 1)), [(1, 1)] * n, s, 0)
    assert np.array_equal(fresh, again)
