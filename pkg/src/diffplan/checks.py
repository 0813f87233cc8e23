"""Finite-difference self-checks for the sampler Jacobian, dispatch sensitivities and planner gradients."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .diffusion import DiffusionScenarioGenerator
from .gridopt.case import NetworkCase
from .gridopt.dispatch import DegenerateActiveSetWarning, InvestmentVector, lp_structure, sensitivities, solve_batch
from .planner import DemandScaling, PlanConfig, PlanState, ScenarioBatch, estimate_gradients
from .simkit import HOURS, DayContext


@dataclass
class CheckResult:
    name: str
    worst: float
    tol: float
    count: int

    @property
    def passed(self) -> bool:
        return bool(self.worst < self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: worst relative error {self.worst:.3e} " \
               f"(tol {self.tol:g}, {self.count} entries)"


def relative_error(analytic, numeric, floor: float = 1e-12) -> np.ndarray:
    a = np.asarray(analytic, float)
    f = np.asarray(numeric, float)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)


def sampler_jacobian_fd(model: DiffusionScenarioGenerator, policy, context, eps, step: float = 1e-4):
    """Central differences of ``model.sample`` in each policy component, shape (24, 4)."""
    policy = np.asarray(policy, float)
    jac = np.empty((HOURS, 4))
    for k in range(4):
        up, dn = policy.copy(), policy.copy()
        up[k] += step
        dn[k] -= step
        jac[:, k] = (model.sample(up, context, eps) - model.sample(dn, context, eps)) / (2 * step)
    return jac


def random_triples(n: int, days: list[DayContext], rng, margin: float = 0.01):
    """Random (policy, context, noise) triples with policies kept off the box boundary."""
    out = []
    for _ in range(n):
        pi = rng.uniform(margin, 1.0 - margin, size=4)
        out.append((pi, days[int(rng.integers(len(days)))], rng.standard_normal(HOURS)))
    return out


def check_sampler_jacobian(model, days, rng, n: int = 20, step: float = 1e-4, tol: float = 1e-3,
                           threshold: float = 1e-3) -> CheckResult:
    worst, count = 0.0, 0
    for pi, ctx, eps in random_triples(n, days, rng):
        _, jac = model.sample_with_grad(pi, ctx, eps)
        fd = sampler_jacobian_fd(model, pi, ctx, eps, step)
        mask = np.abs(fd) > threshold
        if mask.any():
            worst = max(worst, float(relative_error(jac[mask], fd[mask]).max()))
            count += int(mask.sum())
    return CheckResult("sampler Jacobian vs central differences", worst, tol, count)


def _cost(case, eta, demand, reg, st):
    sol = solve_batch(case, eta, demand[None], reg=reg, structure=st)[0]
    return sol.cost, sol.active


def check_dispatch_sensitivities(case: NetworkCase, demand, rng, n: int = 50, delta: float = 0.1,
                                 tol: float = 1e-3, reg: float = 1e-6, eta: InvestmentVector | None = None,
                                 max_tries: int = 2000) -> CheckResult:
    """Perturb one demand or capacity entry at a time; keep only perturbations that leave the active set unchanged."""
    st = lp_structure(case)
    eta = eta or InvestmentVector.zeros(case)
    base = solve_batch(case, eta, np.asarray(demand, float)[None], reg=reg, structure=st)[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateActiveSetWarning)
        d_dem, d_cap = sensitivities(base, case, structure=st)
    cap = d_cap.to_array()
    worst, kept, tries = 0.0, 0, 0
    n_inv = case.n_gen + case.n_branch
    while kept < n and tries < max_tries:
        tries += 1
        if rng.random() < 0.5:
            t, b = int(rng.integers(HOURS)), int(rng.integers(case.n_bus))
            dp = np.array(demand, float)
            dm = dp.copy()
            dp[t, b] += delta
            dm[t, b] -= delta
            (cp, ap), (cm, am) = _cost(case, eta, dp, reg, st), _cost(case, eta, dm, reg, st)
            analytic = d_dem[t, b]
        else:
            j = int(rng.integers(n_inv))
            v = eta.to_array()
            if v[j] < delta:
                v[j] = delta
            vp, vm = v.copy(), v.copy()
            vp[j] += delta
            vm[j] -= delta
            ep = InvestmentVector(vp[:case.n_gen], vp[case.n_gen:])
            em = InvestmentVector(vm[:case.n_gen], vm[case.n_gen:])
            ref = InvestmentVector(v[:case.n_gen], v[case.n_gen:])
            _, aref = _cost(case, ref, np.asarray(demand, float), reg, st)
            if not np.array_equal(aref, base.active):
                continue
            (cp, ap), (cm, am) = _cost(case, ep, demand, reg, st), _cost(case, em, demand, reg, st)
            analytic = cap[j]
        if not (np.array_equal(ap, base.active) and np.array_equal(am, base.active)):
            continue
        fd = (cp - cm) / (2 * delta)
        err = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6 * (abs(base.cost) / HOURS + 1.0))
        worst = max(worst, float(err))
        kept += 1
    return CheckResult("dispatch sensitivities vs finite differences", worst if kept else np.inf, tol, kept)


def check_policy_gradient(model: DiffusionScenarioGenerator, case: NetworkCase, days, rng, config: PlanConfig,
                          step: float = 1e-4, tol: float = 1e-2) -> CheckResult:
    """End-to-end: the operational part of the policy gradient vs differences of the batch objective.

    Days and noise are frozen so the batch objective is a deterministic function of the policy.
    """
    scaling = DemandScaling.from_model(model, config.scale_max)
    st = lp_structure(case)
    idx = rng.integers(len(days), size=config.batch_size)
    eps = rng.standard_normal((config.batch_size, HOURS))
    temp = np.array([days[i].temperature for i in idx])
    base = np.array([days[i].base_load for i in idx])
    free0 = rng.uniform(0.2, 0.8, size=len(config.free))
    worst, count = 0.0, 0

    def batch_for(free):
        pi = config.full_policy(free)
        prof, jac = model.sample_with_grad(pi, (temp, base), eps)
        demand = scaling(prof)[:, :, None] * case.base_demand
        jn = (scaling.derivative(prof)[:, :, None] * jac)[:, :, None, :] * case.base_demand[None, None, :, None]
        return ScenarioBatch(demand, jn, prof, idx)

    def op_cost(free):
        sols = solve_batch(case, InvestmentVector.zeros(case), batch_for(free).demand, reg=config.reg, structure=st)
        return config.annualization * np.mean([s.cost for s in sols])

    state = PlanState(0, InvestmentVector.zeros(case), free0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateActiveSetWarning)
        _, g_free, _, _ = estimate_gradients(state, batch_for(free0), case, config, st)
    analytic = g_free - config.gamma_policy
    for k in range(len(free0)):
        up, dn = free0.copy(), free0.copy()
        up[k] += step
        dn[k] -= step
        fd = (op_cost(up) - op_cost(dn)) / (2 * step)
        worst = max(worst, float(relative_error(analytic[k], fd, floor=1e-6)))
        count += 1
    return CheckResult("planner policy gradient vs batch-objective differences", worst, tol, count)
