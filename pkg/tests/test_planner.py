import csv
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from diffplan.gridopt import InvestmentVector, lp_structure, solve_batch
from diffplan.gridopt.case import case_from_dict
from diffplan.planner import (CoPlanner, DemandScaling, PlanConfig, PlanDivergedError, PlanState, ScenarioBatch,
                              estimate_gradients, has_converged, moving_average, run, scenario_batch, step)
from diffplan.simkit import HOURS

HOUR = np.arange(HOURS)
BUMP = np.exp(-0.5 * ((HOUR - 18) / 2.0) ** 2)


class PeakGenerator:
    """Deterministic stand-in: an evening peak that the flexibility component removes."""

    norm_ = SimpleNamespace(load_min=0.0, load_max=2.0)

    def sample_with_grad(self, policy, context, eps):
        pol = np.atleast_2d(policy)
        n = np.asarray(context[1]).shape[0]
        prof = np.broadcast_to(0.8 + 0.8 * (1.0 - pol[:, 1:2]) * BUMP, (n, HOURS)).copy()
        jac = np.zeros((n, HOURS, 4))
        jac[:, :, 1] = -0.8 * BUMP
        return prof, jac


def one_bus(cap=100.0, demand=150.0):
    return case_from_dict({"buses": [{"id": 1, "demand": demand}], "branches": [],
                           "generators": [{"name": "g1", "bus": 1, "cost": 10.0, "p_max": cap}],
                           "penalties": {"generation": 1000.0, "flow": 1000.0}})


def fixed_batch(demand, n_bus=1):
    d = np.broadcast_to(np.asarray(demand, float).reshape(-1, HOURS, n_bus), (2, HOURS, n_bus)).copy()
    return ScenarioBatch(d, np.zeros(d.shape + (4,)), np.zeros((2, HOURS)), np.zeros(2, int))


def test_scaling_bounds(small_model, case, day_pool):
    scaling = DemandScaling.from_model(small_model)
    batch = scenario_batch(small_model, [1.0, 1.0, 1.0, 1.0], day_pool, 20, np.random.default_rng(0), case, scaling)
    assert np.all(batch.demand <= 1.3 * case.base_demand + 1e-9)
    assert np.all(batch.demand >= 0.0)
    assert scaling(scaling.hi) == pytest.approx(1.3) and scaling(scaling.lo) == 0.0
    assert scaling(scaling.hi + 5.0) == 1.3 and scaling.derivative(scaling.hi + 5.0) == 0.0


def test_same_seed_same_batch(small_model, case, day_pool):
    a = scenario_batch(small_model, np.full(4, 0.4), day_pool, 5, np.random.default_rng(3), case)
    b = scenario_batch(small_model, np.full(4, 0.4), day_pool, 5, np.random.default_rng(3), case)
    assert a.demand.tobytes() == b.demand.tobytes() and a.jacobian.tobytes() == b.jacobian.tobytes()


def test_empty_day_pool(small_model, case):
    with pytest.raises(ValueError, match="empty"):
        scenario_batch(small_model, np.zeros(4), [], 5, np.random.default_rng(0), case)


def test_jacobian_chain_matches_finite_differences(small_model, case, day_pool):
    pi = np.array([0.6, 0.4, 0.3, 0.5])
    batch = scenario_batch(small_model, pi, day_pool, 3, np.random.default_rng(7), case)
    h = 1e-4
    for k in range(4):
        up, dn = pi.copy(), pi.copy()
        up[k] += h
        dn[k] -= h
        dp = scenario_batch(small_model, up, day_pool, 3, np.random.default_rng(7), case).demand
        dm = scenario_batch(small_model, dn, day_pool, 3, np.random.default_rng(7), case).demand
        fd = (dp - dm) / (2 * h)
        an = batch.jacobian[..., k]
        mask = np.abs(fd) > 1e-3 * np.abs(fd).max()
        np.testing.assert_allclose(an[mask], fd[mask], rtol=1e-3)


def test_zero_demand_gradient_is_investment_cost():
    c = one_bus()
    cfg = PlanConfig()
    state = PlanState(0, InvestmentVector.zeros(c), np.zeros(1))
    g_eta, _, J, _ = estimate_gradients(state, fixed_batch(np.zeros(HOURS)), c, cfg)
    np.testing.assert_array_equal(g_eta, [cfg.gamma_gen])
    assert J == pytest.approx(0.0, abs=1e-3)


def test_penalty_regime_investment_gradient_is_negative():
    c = one_bus()
    cfg = PlanConfig()
    demand = np.full(HOURS, 80.0)
    demand[6:18] = 150.0
    state = PlanState(0, InvestmentVector.zeros(c), np.zeros(1))
    g_eta, _, _, _ = estimate_gradients(state, fixed_batch(demand), c, PlanConfig(reg=0.0))
    expected = cfg.gamma_gen - 365.0 * (1000.0 - 10.0) * 12
    assert g_eta[0] == pytest.approx(expected, rel=1e-6)
    assert g_eta[0] < 0


def test_step_fixed_point_and_projection():
    eta = InvestmentVector(np.array([0.0, 2.0]), np.array([1.0]))
    state = PlanState(4, eta, np.array([0.3]))
    same = step(state, np.zeros(3), np.zeros(1), 1.0)
    np.testing.assert_array_equal(same.eta.to_array(), eta.to_array())
    np.testing.assert_array_equal(same.policy_free, [0.3])
    assert same.iteration == 5
    pushed = step(state, np.array([5.0, 1.0, -1.0]), np.array([10.0]), 1.0)
    np.testing.assert_array_equal(pushed.eta.to_array(), [0.0, 1.0, 2.0])
    np.testing.assert_array_equal(pushed.policy_free, [0.0])
    assert step(state, np.zeros(3), np.array([-10.0]), 1.0).policy_free[0] == 1.0


@settings(max_examples=100, deadline=None)
@given(eta=arrays(np.float64, 4, elements=st.floats(0, 1e3)), pi=arrays(np.float64, 2, elements=st.floats(0, 1)),
       g=arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)), lr=st.floats(0, 10))
def test_projection_is_feasible_and_idempotent(eta, pi, g, lr):
    state = PlanState(0, InvestmentVector(eta[:2], eta[2:]), pi)
    once = step(state, g[:4], g[4:], lr)
    assert np.all(once.eta.to_array() >= 0) and np.all((once.policy_free >= 0) & (once.policy_free <= 1))
    twice = step(once, np.zeros(4), np.zeros(2), lr)
    np.testing.assert_array_equal(twice.eta.to_array(), once.eta.to_array())
    np.testing.assert_array_equal(twice.policy_free, once.policy_free)


def test_moving_average_and_convergence():
    v = np.arange(30.0)
    np.testing.assert_allclose(moving_average(v, 20), np.convolve(v, np.ones(20) / 20, mode="valid"))
    assert moving_average(v[:5], 20).size == 0
    assert has_converged(np.full(21, 7.0), 20, 1e-4)
    assert not has_converged(np.full(20, 7.0), 20, 1e-4)
    assert not has_converged(np.linspace(100, 50, 40), 20, 1e-4)


def test_zero_rate_keeps_initial_state(small_model, case, day_pool):
    cfg = PlanConfig(learning_rate=0.0, max_iter=6, window=50, initial_policy={"ev_flex": 0.25})
    traj = run(cfg, small_model, case, day_pool)
    assert len(traj) == 6
    np.testing.assert_array_equal(traj.policy("ev_flex"), 0.25)
    np.testing.assert_array_equal(traj.eta_gen, 0.0)
    np.testing.assert_array_equal(traj.eta_line, 0.0)


def test_run_is_reproducible_and_feasible(small_model, case, day_pool, tmp_path):
    cfg = PlanConfig(max_iter=12, window=50, seed=4)
    seen = []
    traj = run(cfg, small_model, case, day_pool, callback=lambda it, row: seen.append(row))
    again = run(cfg, small_model, case, day_pool)
    assert len(seen) == len(traj) == 12
    for row in seen:
        assert np.all(row["eta_gen"] >= 0) and np.all(row["eta_line"] >= 0)
        assert np.all((row["policy"] >= 0) & (row["policy"] <= 1))
    traj.to_csv(tmp_path / "a.csv")
    again.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    with open(tmp_path / "a.csv") as fh:
        header = next(csv.reader(fh))
    assert header == (["iter", "J_hat", "pi_ev_flex"] + [f"eta_g{i}" for i in range(1, 6)]
                      + [f"eta_b{i}" for i in range(1, 7)] + ["grad_norm_eta", "grad_norm_pi"])


def test_prohibitive_policy_cost_keeps_flexibility_at_zero(day_pool):
    cfg = PlanConfig(gamma_gen=1e12, gamma_policy=1e15, max_iter=30, window=50)
    traj = run(cfg, PeakGenerator(), one_bus(), day_pool)
    np.testing.assert_array_equal(traj.policy("ev_flex"), 0.0)


def test_free_flexibility_rises_toward_one(day_pool):
    cfg = PlanConfig(gamma_gen=1e12, gamma_policy=0.0, lr_policy=2e-8, max_iter=40, window=100)
    traj = run(cfg, PeakGenerator(), one_bus(), day_pool)
    pi = traj.policy("ev_flex")
    assert np.all(np.diff(pi) >= 0) and pi[1] > 0
    assert traj.final_policy[0] == 1.0


def test_divergence_is_detected(day_pool):
    cfg = PlanConfig(lr_eta=1.0, max_iter=10, window=50)
    with pytest.raises(PlanDivergedError, match="exceeds"):
        run(cfg, PeakGenerator(), one_bus(), day_pool)


def test_policy_estimator_matches_finite_differences_of_batch_mean(small_model, case, day_pool):
    """Mean pathwise gradient over 50 frozen batches vs differences of the 50-batch mean objective."""
    c = case
    cfg = PlanConfig()
    st_ = lp_structure(c)
    scaling = DemandScaling.from_model(small_model)
    free = np.array([0.35])
    state = PlanState(0, InvestmentVector.zeros(c), free)
    h = 1e-4
    grads, diffs = [], []
    for b in range(50):
        def batch(v):
            return scenario_batch(small_model, cfg.full_policy(v), day_pool, cfg.batch_size,
                                  np.random.default_rng(1000 + b), c, scaling)

        _, g, _, _ = estimate_gradients(state, batch(free), c, cfg, st_)
        grads.append(g[0])
        costs = [np.mean([s.cost for s in solve_batch(c, state.eta, batch(free + d).demand, structure=st_)])
                 for d in (h, -h)]
        diffs.append(cfg.gamma_policy + cfg.annualization * (costs[0] - costs[1]) / (2 * h))
    grads = np.array(grads)
    se = grads.std(ddof=1) / np.sqrt(grads.size)
    assert abs(grads.mean() - np.mean(diffs)) <= 3 * se


def test_coplanner_estimator(small_model, case, day_pool):
    est = CoPlanner(max_iter=3, window=50, seed=2)
    assert clone(est).get_params() == est.get_params()
    est.fit(day_pool, small_model, case)
    assert est.n_iter_ == 3 and not est.converged_
    assert est.eta_.eta_gen.shape == (5,) and est.policy_.shape == (1,)
    cfg = CoPlanner(pins={"ev_adopt": 1.0}).config()
    assert cfg.free == [1, 2, 3]


def test_config_validation():
    with pytest.raises(ValueError):
        PlanConfig(batch_size=0)
    with pytest.raises(ValueError):
        PlanConfig(learning_rate=-1.0)
    with pytest.raises(ValueError, match="unknown"):
        PlanConfig(pins={"ev_speed": 1.0})
