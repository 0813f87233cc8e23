"""24-hour DC dispatch with soft generation and flow limits, and its KKT sensitivities.

Hours share only the investment vector, so every hour is an independent
small problem. All hours of all scenarios in a call are stacked and solved
together by a vectorized primal-dual interior-point method.

Output above a generator's cap is priced at the penalty rather than at fuel
cost plus penalty; cases with ``slack_fuel`` set charge both.

Per hour the variables are ``x = (p, s_G, s_F)`` and the problem is::

    min  c'(p - s_G) + rho_G's_G + rho_F's_F + reg/2 ||x||^2
    s.t. 1'p = 1'd
         p - s_G <= p_max + eta_G
         B(Cp - d) - s_F <= f_max + eta_L
        -B(Cp - d) - s_F <= f_max + eta_L
         p, s_G, s_F >= 0
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .case import NetworkCase

log = logging.getLogger(__name__)

HOURS = 24
ACTIVE_TOL = 1e-7


class SolverError(RuntimeError):
    """The interior-point iteration did not converge."""


class DegenerateActiveSetWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class InvestmentVector:
    eta_gen: np.ndarray
    eta_line: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.eta_gen, dtype=float)
        ln = np.asarray(self.eta_line, dtype=float)
        if np.any(g < 0) or np.any(ln < 0):
            raise ValueError("capacity additions must be nonnegative")
        object.__setattr__(self, "eta_gen", g)
        object.__setattr__(self, "eta_line", ln)

    @classmethod
    def zeros(cls, case: NetworkCase) -> "InvestmentVector":
        return cls(np.zeros(case.n_gen), np.zeros(case.n_branch))

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.eta_gen, self.eta_line])


class CapacityGradient(NamedTuple):
    """Gradient laid out like an :class:`InvestmentVector`; entries may be negative."""

    eta_gen: np.ndarray
    eta_line: np.ndarray

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.eta_gen, self.eta_line])


@dataclass(frozen=True)
class LPStructure:
    """Hour-invariant matrices of the dispatch problem."""

    n_gen: int
    n_branch: int
    q: np.ndarray   # linear cost on x
    A: np.ndarray   # (1, n) balance row
    G: np.ndarray   # (m, n) inequality rows

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.G.shape[0]

    # row blocks of G
    @property
    def rows_gen(self) -> slice:
        return slice(0, self.n_gen)

    @property
    def rows_up(self) -> slice:
        return slice(self.n_gen, self.n_gen + self.n_branch)

    @property
    def rows_dn(self) -> slice:
        return slice(self.n_gen + self.n_branch, self.n_gen + 2 * self.n_branch)


def lp_structure(case: NetworkCase) -> LPStructure:
    ng, nl = case.n_gen, case.n_branch
    n = 2 * ng + nl
    BC = case.ptdf @ case.gen_incidence
    I_g, I_l = np.eye(ng), np.eye(nl)
    Z = np.zeros
    G = np.vstack([
        np.hstack([I_g, -I_g, Z((ng, nl))]),
        np.hstack([BC, Z((nl, ng)), -I_l]),
        np.hstack([-BC, Z((nl, ng)), -I_l]),
        -np.eye(n),
    ])
    A = np.concatenate([np.ones(ng), np.zeros(ng + nl)])[None, :]
    slack_cost = case.rho_gen if case.slack_fuel else case.rho_gen - case.cost
    q = np.concatenate([case.cost, slack_cost, case.rho_flow])
    return LPStructure(ng, nl, q, A, G)


def lp_rhs(case: NetworkCase, eta: InvestmentVector, demand: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Balance rhs ``b`` (..., 1) and inequality rhs ``h`` (..., m) for nodal demand (..., bus)."""
    demand = np.asarray(demand, dtype=float)
    lead = demand.shape[:-1]
    bd = demand @ case.ptdf.T
    cap_f = case.f_max + eta.eta_line
    h = np.concatenate([
        np.broadcast_to(case.p_max + eta.eta_gen, lead + (case.n_gen,)),
        cap_f + bd,
        cap_f - bd,
        np.zeros(lead + (2 * case.n_gen + case.n_branch,)),
    ], axis=-1)
    return demand.sum(axis=-1, keepdims=True), h


def ipm_solve(q, A, G, b, h, reg=0.0, tol=1e-10, max_iter=80, z0=None, s0=None, dual_tol=1e-8,
              stall_factor=100.0):
    """Mehrotra predictor-corrector for a stack of QPs sharing q, A, G.

    Solves ``min q'x + reg/2 |x|^2 s.t. A x = b, G x <= h`` for every row of
    ``b`` (K, p) and ``h`` (K, m). Returns ``(x, y, z, s, iterations)`` with
    equality multipliers ``y`` and inequality multipliers ``z >= 0``.

    Primal residuals and the duality gap must fall below ``tol`` relative to
    the data scale, the dual residual below ``dual_tol``. When penalty prices
    tie, only ``reg`` curves the tied directions and the dual residual can stall
    near 1e-9 of the cost scale. A row already within ``stall_factor`` of every
    tolerance that then stops improving for three iterations keeps its best
    iterate.
    """
    K, m = h.shape
    n = q.size
    p = A.shape[0]
    # start multipliers and slacks at the scale of the data
    z0 = max(1.0, 0.1 * np.abs(q).max()) if z0 is None else z0
    # per-row scales keep each subproblem independent of the rest of the batch
    s0 = np.maximum(1.0, np.abs(h).mean(axis=1, keepdims=True)) if s0 is None else s0
    x = np.zeros((K, n))
    s = np.maximum(h - x @ G.T, s0)
    z = np.full((K, m), float(z0))
    y = np.zeros((K, p))
    scale_p = 1.0 + np.maximum(np.abs(h).max(axis=1), np.abs(b).max(axis=1, initial=0.0))
    scale_d = 1.0 + np.abs(q).max()

    GT = np.ascontiguousarray(G.T)

    def factor(W):
        KKT = np.zeros((K, n + p, n + p))
        KKT[:, :n, :n] = GT @ (W[:, :, None] * G)
        if reg:
            KKT[:, np.arange(n), np.arange(n)] += reg
        KKT[:, :n, n:] = A.T
        KKT[:, n:, :n] = A
        return KKT

    def solve_rows(KKT, rhs):
        try:
            return np.linalg.solve(KKT, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            pass
        # near the optimum z/s spans ~1e14 and a row's KKT can become numerically
        # singular; solve row by row and freeze the offenders at their best iterate
        sol = np.zeros_like(rhs)
        for k in range(K):
            try:
                sol[k] = np.linalg.solve(KKT[k], rhs[k])
            except np.linalg.LinAlgError:
                stuck[k] = True
        return sol

    def reduced_solve(KKT, W, rd, rp, rg, rc):
        rhs = np.concatenate([-rd - (W * rg - rc / s) @ G, -rp], axis=1)
        sol = solve_rows(KKT, rhs)
        dx, dy = sol[:, :n], sol[:, n:]
        dz = W * (dx @ GT + rg) - rc / s
        ds = (-rc - s * dz) / z
        return dx, dy, dz, ds

    def newton(KKT, W, rd, rp, rg, rc):
        d = reduced_solve(KKT, W, rd, rp, rg, rc)
        # one pass of iterative refinement on the unreduced system; the
        # elimination loses accuracy once z/s spans many orders of magnitude
        dx, dy, dz, ds = d
        e = (reg * dx + dy @ A + dz @ G + rd, dx @ A.T + rp, dx @ GT + ds + rg, s * dz + z * ds + rc)
        c = reduced_solve(KKT, W, *e)
        return tuple(a + b for a, b in zip(d, c))

    def max_step(v, dv):
        ratio = np.where(dv < 0, -v / np.where(dv < 0, dv, -1.0), np.inf)
        return np.minimum(1.0, ratio.min(axis=1))

    best = [x.copy(), y.copy(), z.copy(), s.copy()]
    best_merit = np.full(K, np.inf)
    best_parts = np.full((K, 3), np.inf)
    since_best = np.zeros(K, dtype=int)
    stuck = np.zeros(K, dtype=bool)
    it = 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for it in range(1, max_iter + 1):
            rd = reg * x + q + y @ A + z @ G
            rp = x @ A.T - b
            rg = x @ G.T + s - h
            mu = (s * z).sum(axis=1) / m
            obj = np.abs(x @ q)
            parts = np.stack([
                np.maximum(np.abs(rp).max(axis=1), np.abs(rg).max(axis=1)) / (tol * scale_p),
                np.abs(rd).max(axis=1) / (dual_tol * scale_d),
                mu / (tol * np.maximum(1.0, obj) / m),
            ], axis=1)
            merit = np.nan_to_num(parts.max(axis=1), nan=np.inf)
            improved = merit < best_merit
            for arr, cur in zip(best, (x, y, z, s)):
                arr[improved] = cur[improved]
            best_merit = np.where(improved, merit, best_merit)
            best_parts[improved] = parts[improved]
            since_best = np.where(improved, 0, since_best + 1)
            finished = (best_merit <= 1.0) | ((best_merit <= stall_factor) & (since_best >= 3)) | stuck
            if finished.all():
                break

            W = np.where(finished[:, None], 1.0, z / s)
            KKT = factor(W)
            KKT[finished] = np.eye(n + p)
            dx, dy, dz, ds = newton(KKT, W, rd, rp, rg, s * z)
            a_aff = np.minimum(max_step(s, ds), max_step(z, dz))[:, None]
            mu_aff = ((s + a_aff * ds) * (z + a_aff * dz)).sum(axis=1) / m
            sigma = (np.clip(mu_aff / np.maximum(mu, 1e-300), 0.0, 1.0) ** 3)[:, None]
            rc = s * z + ds * dz - sigma * mu[:, None]
            dx, dy, dz, ds = newton(KKT, W, rd, rp, rg, rc)
            alpha = np.minimum(1.0, 0.995 * np.minimum(max_step(s, ds), max_step(z, dz)))[:, None]
            # finished rows are frozen so the batch does not perturb them
            alpha = np.where((finished | stuck)[:, None], 0.0, alpha)
            x = x + alpha * np.nan_to_num(dx)
            y = y + alpha * np.nan_to_num(dy)
            z = z + alpha * np.nan_to_num(dz)
            s = s + alpha * np.nan_to_num(ds)

    failed = best_merit > stall_factor
    if failed.any():
        worst = int(np.argmax(np.where(failed, best_merit, -np.inf)))
        pr, du, gap = best_parts[worst]
        raise SolverError(
            f"interior point did not converge in {it} iterations: {int(failed.sum())}/{K} subproblems open; "
            f"worst has primal residual {pr * tol * scale_p[worst]:.3e}, dual residual {du * dual_tol * scale_d:.3e}, "
            f"gap/tolerance {gap:.3e}")
    return best[0], best[1], best[2], best[3], it


@dataclass
class DispatchSolution:
    """Optimal 24-hour dispatch of one scenario plus what is needed to differentiate it."""

    demand: np.ndarray          # (24, bus) MW
    p: np.ndarray               # (24, gen)
    s_gen: np.ndarray           # (24, gen)
    s_flow: np.ndarray          # (24, branch)
    flow: np.ndarray            # (24, branch)
    dual_balance: np.ndarray    # (24,)
    dual_gen_cap: np.ndarray    # (24, gen)
    dual_flow_up: np.ndarray    # (24, branch)
    dual_flow_dn: np.ndarray    # (24, branch)
    dual_bounds: np.ndarray     # (24, n) multipliers of x >= 0
    cost: float                 # sum over hours of q'x, without regularization
    hourly_cost: np.ndarray
    active: np.ndarray          # (24, m) bool
    slack: np.ndarray           # (24, m) inequality slacks h - Gx
    reg: float
    iterations: int
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(HOURS, dtype=bool))
    _x: np.ndarray | None = None
    _z: np.ndarray | None = None
    _y: np.ndarray | None = None

    @property
    def n_degenerate(self) -> int:
        return int(self.degenerate.sum())

    @property
    def labels(self) -> np.ndarray:
        return np.where(self.active, "active", "inactive")


def classify_active(z: np.ndarray, s: np.ndarray, tol: float = ACTIVE_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Active set by the larger of multiplier and slack; ties below ``tol`` are flagged."""
    active = z > s
    ambiguous = (np.maximum(z, s) < tol) | (np.minimum(z, s) > tol)
    return active, ambiguous


def solve_batch(case: NetworkCase, eta: InvestmentVector, demands, reg: float = 1e-6,
                tol: float = 1e-10, max_iter: int = 80, structure: LPStructure | None = None) -> list[DispatchSolution]:
    """Solve every scenario in ``demands`` (K, 24, bus); returns one solution per scenario."""
    demands = np.asarray(demands, dtype=float)
    if demands.ndim != 3 or demands.shape[1:] != (HOURS, case.n_bus):
        raise ValueError(f"demands must have shape (K, 24, {case.n_bus}), got {demands.shape}")
    if not np.all(np.isfinite(demands)):
        raise ValueError("demands must be finite")
    if reg < 0:
        raise ValueError("reg must be nonnegative")
    st = structure or lp_structure(case)
    K = demands.shape[0]
    b, h = lp_rhs(case, eta, demands.reshape(K * HOURS, case.n_bus))
    x, y, z, s, iters = ipm_solve(st.q, st.A, st.G, b, h, reg=reg, tol=tol, max_iter=max_iter)
    active, ambiguous = classify_active(z, s)

    ng, nl = case.n_gen, case.n_branch
    out = []
    for k in range(K):
        sl = slice(k * HOURS, (k + 1) * HOURS)
        xk, zk = x[sl], z[sl]
        p = xk[:, :ng]
        hourly = xk @ st.q
        degenerate = ambiguous[sl].any(axis=1)
        out.append(DispatchSolution(
            demand=demands[k], p=p, s_gen=xk[:, ng:2 * ng], s_flow=xk[:, 2 * ng:],
            flow=case.flows(p, demands[k]),
            dual_balance=-y[sl, 0], dual_gen_cap=zk[:, st.rows_gen], dual_flow_up=zk[:, st.rows_up],
            dual_flow_dn=zk[:, st.rows_dn], dual_bounds=zk[:, st.rows_dn.stop:],
            cost=float(hourly.sum()), hourly_cost=hourly, active=active[sl], slack=s[sl], reg=reg,
            iterations=iters, degenerate=degenerate, _x=xk, _z=zk, _y=y[sl],
        ))
    return out


def solve_operations(case: NetworkCase, eta: InvestmentVector, demand, reg: float = 1e-6, **kw) -> DispatchSolution:
    """Optimal dispatch for one 24-hour nodal demand matrix (24, bus) in MW."""
    return solve_batch(case, eta, np.asarray(demand, dtype=float)[None], reg=reg, **kw)[0]


# --- sensitivities --------------------------------------------------------------

def _adjoint(sol: DispatchSolution, st: LPStructure, grad_h) -> np.ndarray:
    """Solve the transposed reduced KKT system of every hour.

    Returns ``u`` (24, 1 + m): the gradient of ``grad_h . x*`` with respect to
    the balance right-hand side followed by the inequality right-hand sides
    (zero for inactive rows).
    """
    n, m = st.n, st.m
    w = np.broadcast_to(np.asarray(grad_h, dtype=float), (HOURS, n))
    mask = sol.active.astype(float)
    size = n + 1 + m
    Kmat = np.zeros((HOURS, size, size))
    Kmat[:, :n, :n] = sol.reg * np.eye(n)
    Kmat[:, :n, n] = st.A[0]
    Kmat[:, n, :n] = st.A[0]
    Kmat[:, :n, n + 1:] = st.G.T[None] * mask[:, None, :]
    Kmat[:, n + 1:, :n] = st.G[None] * mask[:, :, None]
    Kmat[:, n + 1 + np.arange(m), n + 1 + np.arange(m)] = 1.0 - mask
    rhs = np.zeros((HOURS, size))
    rhs[:, :n] = w

    KT = np.transpose(Kmat, (0, 2, 1))
    u = np.empty((HOURS, size))
    cond = np.linalg.cond(KT)
    bad = ~np.isfinite(cond) | (cond > 1e13)
    if np.any(~bad):
        u[~bad] = np.linalg.solve(KT[~bad], rhs[~bad][..., None])[..., 0]
    for t in np.flatnonzero(bad):
        u[t] = np.linalg.lstsq(KT[t], rhs[t], rcond=None)[0]
    if bad.any() or sol.degenerate.any():
        sol.degenerate = sol.degenerate | bad
        warnings.warn(f"{int(sol.degenerate.sum())} hour(s) with degenerate active set; "
                      "sensitivities use the classified active set", DegenerateActiveSetWarning, stacklevel=3)
    return u[:, n:] * np.hstack([np.ones((HOURS, 1)), mask])


def operations_cost_gradient(case: NetworkCase) -> np.ndarray:
    """Gradient of the (unregularized) operating cost with respect to x."""
    return lp_structure(case).q


def sensitivities(sol: DispatchSolution, case: NetworkCase, grad_h=None,
                  structure: LPStructure | None = None) -> tuple[np.ndarray, "CapacityGradient"]:
    """Gradients of ``grad_h . x*`` with respect to nodal demand (24, bus) and to the investments."""
    st = structure or lp_structure(case)
    if grad_h is None:
        grad_h = st.q
    u = _adjoint(sol, st, grad_h)
    u_bal = u[:, 0]
    u_ineq = u[:, 1:]
    u_gen, u_up, u_dn = u_ineq[:, st.rows_gen], u_ineq[:, st.rows_up], u_ineq[:, st.rows_dn]
    d_demand = u_bal[:, None] + (u_up - u_dn) @ case.ptdf
    return d_demand, CapacityGradient(u_gen.sum(axis=0), (u_up + u_dn).sum(axis=0))


def sensitivity_demand(sol: DispatchSolution, case: NetworkCase, grad_h=None) -> np.ndarray:
    return sensitivities(sol, case, grad_h)[0]


def sensitivity_capacity(sol: DispatchSolution, case: NetworkCase, grad_h=None) -> "CapacityGradient":
    return sensitivities(sol, case, grad_h)[1]
