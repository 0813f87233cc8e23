"""Projected stochastic gradient descent over capacity additions and policy.

Each iteration samples a batch of days, generates one differentiable load
scenario per day, solves the dispatch of every scenario, and combines the
dispatch sensitivities with the scenario Jacobians into gradient estimates
for the investments and the free policy components.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .diffusion import DiffusionScenarioGenerator
from .gridopt.case import NetworkCase
from .gridopt.dispatch import InvestmentVector, lp_structure, sensitivities, solve_batch
from .simkit import HOURS, POLICY_NAMES, DayContext

log = logging.getLogger(__name__)


class PlanDivergedError(RuntimeError):
    pass


@dataclass
class PlanConfig:
    gamma_gen: float = 1e6          # $/MW-yr
    gamma_line: float = 1e6         # $/MW-yr
    gamma_policy: float = 1.1e9     # $ for a free policy component at 1, linear
    learning_rate: float = 1e-9
    lr_eta: float | None = None     # per-block overrides of learning_rate
    lr_policy: float | None = None
    batch_size: int = 5
    max_iter: int = 400
    window: int = 20
    tol: float = 1e-4
    pins: dict = field(default_factory=lambda: {"ev_adopt": 1.0, "hp_adopt": 0.0, "hp_eff": 0.0})
    initial_policy: dict = field(default_factory=lambda: {"ev_flex": 0.0})
    scale_max: float = 1.3
    annualization: float = 365.0
    reg: float = 1e-6
    divergence_factor: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.scale_max < 0:
            raise ValueError("scaling interval must be nonnegative")
        unknown = (set(self.pins) | set(self.initial_policy)) - set(POLICY_NAMES)
        if unknown:
            raise ValueError(f"unknown policy components {sorted(unknown)}")

    @property
    def free(self) -> list[int]:
        return [i for i, n in enumerate(POLICY_NAMES) if n not in self.pins]

    def full_policy(self, free_values) -> np.ndarray:
        pi = np.zeros(4)
        for i, name in enumerate(POLICY_NAMES):
            if name in self.pins:
                pi[i] = self.pins[name]
        pi[self.free] = free_values
        return pi

    def initial_free(self) -> np.ndarray:
        return np.array([self.initial_policy.get(POLICY_NAMES[i], 0.0) for i in self.free], dtype=float)


@dataclass
class PlanState:
    iteration: int
    eta: InvestmentVector
    policy_free: np.ndarray
    objective: float = np.nan
    grad_eta: np.ndarray | None = None
    grad_policy: np.ndarray | None = None
    degenerate_hours: int = 0


@dataclass
class ScenarioBatch:
    demand: np.ndarray      # (N_B, 24, bus) MW
    jacobian: np.ndarray    # (N_B, 24, bus, 4) MW per unit policy
    profile: np.ndarray     # (N_B, 24) generated p.u. profile
    days: np.ndarray        # indices into the day pool


@dataclass
class DemandScaling:
    """Affine map from p.u. load onto ``[0, scale_max]``, frozen from corpus extremes."""

    lo: float
    hi: float
    scale_max: float = 1.3

    @property
    def slope(self) -> float:
        return self.scale_max / (self.hi - self.lo)

    def __call__(self, load):
        return np.clip(self.slope * (np.asarray(load) - self.lo), 0.0, self.scale_max)

    def derivative(self, load):
        u = self.slope * (np.asarray(load) - self.lo)
        return np.where((u > 0.0) & (u < self.scale_max), self.slope, 0.0)

    @classmethod
    def from_model(cls, model: DiffusionScenarioGenerator, scale_max: float = 1.3) -> "DemandScaling":
        return cls(model.norm_.load_min, model.norm_.load_max, scale_max)


def scenario_batch(model: DiffusionScenarioGenerator, policy, days: list[DayContext], batch_size: int, rng,
                   case: NetworkCase, scaling: DemandScaling | None = None) -> ScenarioBatch:
    """Sample days and noise, generate scenarios with Jacobians, and map them onto the network."""
    if not days:
        raise ValueError("day pool is empty")
    scaling = scaling or DemandScaling.from_model(model)
    idx = rng.integers(len(days), size=batch_size)
    eps = rng.standard_normal((batch_size, HOURS))
    chosen = [days[i] for i in idx]
    temp = np.array([d.temperature for d in chosen])
    base = np.array([d.base_load for d in chosen])
    profile, jac = model.sample_with_grad(np.asarray(policy, dtype=float), (temp, base), eps)
    u = scaling(profile)
    du = scaling.derivative(profile)
    demand = u[:, :, None] * case.base_demand[None, None, :]
    jac_nodal = (du[:, :, None] * jac)[:, :, None, :] * case.base_demand[None, None, :, None]
    return ScenarioBatch(demand, jac_nodal, profile, idx)


def objective(state_eta: InvestmentVector, policy_free, costs, config: PlanConfig) -> float:
    return float(config.gamma_gen * state_eta.eta_gen.sum() + config.gamma_line * state_eta.eta_line.sum()
                 + config.gamma_policy * np.sum(policy_free) + config.annualization * np.mean(costs))


def estimate_gradients(state: PlanState, batch: ScenarioBatch, case: NetworkCase, config: PlanConfig,
                       structure=None) -> tuple[np.ndarray, np.ndarray, float, int]:
    """Stochastic gradients of the planning objective.

    Returns ``(grad_eta, grad_policy_free, objective_estimate, degenerate_hours)``
    where ``grad_eta`` stacks generator then branch entries.
    """
    st = structure or lp_structure(case)
    sols = solve_batch(case, state.eta, batch.demand, reg=config.reg, structure=st)
    n_b = len(sols)
    scale = config.annualization / n_b
    g_eta = np.zeros(case.n_gen + case.n_branch)
    g_pi = np.zeros(4)
    degenerate = 0
    for sol, jac in zip(sols, batch.jacobian):
        d_dem, d_cap = sensitivities(sol, case, st.q, structure=st)
        g_eta += d_cap.to_array()
        g_pi += np.einsum("tb,tbk->k", d_dem, jac)
        degenerate += sol.n_degenerate
    g_eta = np.concatenate([np.full(case.n_gen, config.gamma_gen), np.full(case.n_branch, config.gamma_line)]) \
        + scale * g_eta
    g_free = config.gamma_policy + scale * g_pi[config.free]
    J = objective(state.eta, state.policy_free, [s.cost for s in sols], config)
    return g_eta, g_free, J, degenerate


def step(state: PlanState, grad_eta, grad_policy, lr_eta: float, lr_policy: float | None = None) -> PlanState:
    """Gradient step followed by projection onto eta >= 0 and policy in [0, 1]."""
    lr_policy = lr_eta if lr_policy is None else lr_policy
    eta = state.eta.to_array() - lr_eta * np.asarray(grad_eta)
    eta = np.maximum(eta, 0.0)
    n_gen = state.eta.eta_gen.size
    pol = np.clip(state.policy_free - lr_policy * np.asarray(grad_policy), 0.0, 1.0)
    return PlanState(state.iteration + 1, InvestmentVector(eta[:n_gen], eta[n_gen:]), pol,
                     degenerate_hours=state.degenerate_hours)


@dataclass
class Trajectory:
    gen_names: tuple
    branch_names: tuple
    free_names: tuple
    rows: list = field(default_factory=list)
    converged: bool = False
    wall_time: float = 0.0

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, it, J, policy_free, eta: InvestmentVector, g_eta, g_pi):
        self.rows.append({
            "iter": it, "J_hat": J, "policy": np.array(policy_free, dtype=float),
            "eta_gen": eta.eta_gen.copy(), "eta_line": eta.eta_line.copy(),
            "grad_norm_eta": float(np.linalg.norm(g_eta)), "grad_norm_pi": float(np.linalg.norm(g_pi)),
        })

    @property
    def objective(self) -> np.ndarray:
        return np.array([r["J_hat"] for r in self.rows])

    def policy(self, name: str = "ev_flex") -> np.ndarray:
        k = self.free_names.index(name)
        return np.array([r["policy"][k] for r in self.rows])

    @property
    def eta_gen(self) -> np.ndarray:
        return np.array([r["eta_gen"] for r in self.rows])

    @property
    def eta_line(self) -> np.ndarray:
        return np.array([r["eta_line"] for r in self.rows])

    def header(self) -> list[str]:
        return (["iter", "J_hat"] + [f"pi_{n}" for n in self.free_names]
                + [f"eta_{n}" for n in self.gen_names] + [f"eta_{n}" for n in self.branch_names]
                + ["grad_norm_eta", "grad_norm_pi"])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for r in self.rows:
                vals = [r["J_hat"], *r["policy"], *r["eta_gen"], *r["eta_line"], r["grad_norm_eta"], r["grad_norm_pi"]]
                w.writerow([r["iter"], *(repr(float(v)) for v in vals)])


def moving_average(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.size < window:
        return np.array([])
    c = np.cumsum(np.concatenate([[0.0], values]))
    return (c[window:] - c[:-window]) / window


def has_converged(objectives, window: int, tol: float) -> bool:
    """Relative change of consecutive ``window``-iteration moving averages below ``tol``."""
    ma = moving_average(objectives, window)
    if ma.size < 2:
        return False
    return abs(ma[-1] - ma[-2]) <= tol * abs(ma[-2])


def run(config: PlanConfig, model: DiffusionScenarioGenerator, case: NetworkCase, days: list[DayContext],
        callback=None) -> Trajectory:
    """Iterate sample -> dispatch -> gradient -> projected step until convergence or ``max_iter``."""
    if not days:
        raise ValueError("day pool is empty")
    rng = np.random.default_rng(config.seed)
    st = lp_structure(case)
    scaling = DemandScaling.from_model(model, config.scale_max)
    lr_eta = config.learning_rate if config.lr_eta is None else config.lr_eta
    lr_pi = config.learning_rate if config.lr_policy is None else config.lr_policy
    free_names = tuple(POLICY_NAMES[i] for i in config.free)
    traj = Trajectory(case.gen_names, case.branch_names, free_names)
    state = PlanState(0, InvestmentVector.zeros(case), config.initial_free())
    t0 = time.perf_counter()
    J0 = None
    for it in range(config.max_iter):
        batch = scenario_batch(model, config.full_policy(state.policy_free), days, config.batch_size, rng, case,
                               scaling)
        g_eta, g_pi, J, degenerate = estimate_gradients(state, batch, case, config, st)
        if not (np.all(np.isfinite(g_eta)) and np.all(np.isfinite(g_pi)) and np.isfinite(J)):
            raise PlanDivergedError(f"non-finite gradient or objective at iteration {it}")
        J0 = J if J0 is None else J0
        if J > config.divergence_factor * abs(J0):
            raise PlanDivergedError(f"objective {J:.4g} exceeds {config.divergence_factor}x initial {J0:.4g} "
                                    f"at iteration {it}")
        traj.append(it, J, state.policy_free, state.eta, g_eta, g_pi)
        if callback is not None:
            callback(it, traj.rows[-1])
        degenerate += state.degenerate_hours
        state = step(state, g_eta, g_pi, lr_eta, lr_pi)
        state.degenerate_hours = degenerate
        if has_converged(traj.objective, config.window, config.tol):
            traj.converged = True
            break
    traj.wall_time = time.perf_counter() - t0
    traj.final_eta = state.eta
    traj.final_policy = state.policy_free
    traj.degenerate_hours = state.degenerate_hours
    log.info("planner stopped after %d iterations (converged=%s)", len(traj), traj.converged)
    return traj


class CoPlanner(BaseEstimator):
    """Estimator wrapper around :func:`run`; hyperparameters mirror :class:`PlanConfig`."""

    def __init__(self, gamma_gen=1e6, gamma_line=1e6, gamma_policy=1.1e9, learning_rate=1e-9, batch_size=5,
                 max_iter=400, window=20, tol=1e-4, pins=None, scale_max=1.3, reg=1e-6, seed=0):
        self.gamma_gen = gamma_gen
        self.gamma_line = gamma_line
        self.gamma_policy = gamma_policy
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.window = window
        self.tol = tol
        self.pins = pins
        self.scale_max = scale_max
        self.reg = reg
        self.seed = seed

    def config(self) -> PlanConfig:
        params = self.get_params()
        pins = params.pop("pins")
        cfg = PlanConfig(**params)
        if pins is not None:
            cfg.pins = dict(pins)
        return cfg

    def fit(self, days, generator: DiffusionScenarioGenerator, case: NetworkCase):
        self.trajectory_ = run(self.config(), generator, case, days)
        self.eta_ = self.trajectory_.final_eta
        self.policy_ = self.trajectory_.final_policy
        self.n_iter_ = len(self.trajectory_)
        self.converged_ = self.trajectory_.converged
        return self


def config_to_dict(config: PlanConfig) -> dict:
    return asdict(config)
