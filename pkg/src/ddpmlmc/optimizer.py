"""Work-optimal MC and MLMC hierarchies by a primal-dual log-barrier method.

The three problems (single level; geometric hierarchy; free hierarchy) are
posed in logarithmic variables ``m_l = ln M_l``, ``eta = ln h0`` and
``rho_i = ln r_i``.  Objective and accuracy constraint are then sums of
exponentials of affine functions, i.e. smooth and convex, and the bound
constraints become linear.  The change of variables maps KKT points to KKT
points, so the continuous optimum is the same as in the original variables.

Newton steps solve the reduced KKT system

    [-H   J^T  ] [dx]   [grad f - J^T y     ]
    [ J   S/Y  ] [dy] = [-g + mu / y        ]

(through its Schur complement on ``dx``), with ``ds = J dx + g - s``, a
fraction-to-boundary rule on ``s`` and ``y`` and backtracking on the merit
function ``f - mu sum ln s + (nu/2) |g - s|``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .calibration import CostModel
from .estimators import ErrorModel, McPlan, MlmcPlan

XI = 2.0**-52
N_STARTS = 8


class InfeasibleError(ValueError):
    """The tolerance is below the reachable error floor."""

    def __init__(self, msg, floor=None):
        super().__init__(msg)
        self.floor = floor


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residuals=None):
        super().__init__(msg)
        self.residuals = residuals or {}


# smooth building blocks

class ExpSum:
    """``sum_j c_j exp(a_j . x)`` with non-negative ``c_j``."""

    def __init__(self, coef, A):
        coef = np.asarray(coef, dtype=float)
        A = np.asarray(A, dtype=float).reshape(len(coef), -1)
        keep = coef != 0.0
        self.c = coef[keep]
        self.A = A[keep]
        self.n = A.shape[1]

    def _e(self, x):
        return self.c * np.exp(self.A @ x)

    def value(self, x):
        return float(np.sum(self._e(x))) if len(self.c) else 0.0

    def grad(self, x):
        if not len(self.c):
            return np.zeros(self.n)
        return self.A.T @ self._e(x)

    def hess(self, x):
        if not len(self.c):
            return np.zeros((self.n, self.n))
        return (self.A * self._e(x)[:, None]).T @ self.A

    def scaled(self, s):
        out = ExpSum.__new__(ExpSum)
        out.c, out.A, out.n = self.c * s, self.A, self.n
        return out


@dataclass
class NlpProblem:
    """``min f(x)`` subject to ``g(x) >= 0``.

    ``lag_hess(x, y)`` returns ``sum_i y_i Hess g_i(x)``.
    """

    n: int
    f: callable
    grad: callable
    hess: callable
    g: callable
    jac: callable
    lag_hess: callable
    xi: float = XI
    names: tuple = ()

    @classmethod
    def from_expsums(cls, objective: ExpSum, budgets, lin_A, lin_b, xi=XI, names=()):
        """Objective ``objective``; constraints ``1 - b(x) >= 0`` for each budget ``b``
        followed by ``lin_A x + lin_b >= 0``."""
        lin_A = np.asarray(lin_A, dtype=float).reshape(-1, objective.n)
        lin_b = np.asarray(lin_b, dtype=float)

        def g(x):
            return np.concatenate([[1.0 - b.value(x) for b in budgets], lin_A @ x + lin_b])

        def jac(x):
            rows = [-b.grad(x) for b in budgets]
            return np.vstack(rows + [lin_A]) if rows else lin_A.copy()

        def lag_hess(x, y):
            H = np.zeros((objective.n, objective.n))
            for yi, b in zip(y, budgets):
                H -= yi * b.hess(x)
            return H

        return cls(objective.n, objective.value, objective.grad, objective.hess, g, jac,
                   lag_hess, xi, tuple(names))


@dataclass
class IpResult:
    x: np.ndarray
    f: float
    y: np.ndarray
    s: np.ndarray
    kkt: dict
    iterations: int
    trace: list = field(default_factory=list)


def _max_step(v, dv, tau):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


def interior_point_solve(problem: NlpProblem, x0, mu0=1.0, mu_min=1e-12, mu_factor=0.2,
                         tau=0.995, tol=1e-8, max_iter=1000, kappa=10.0):
    """Primal-dual barrier method from a strictly feasible start."""
    x = np.array(x0, dtype=float)
    s = problem.g(x)
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise ValueError("starting point is not strictly feasible")
    mu = mu0
    y = mu / s
    nu = 1.0
    total = 0
    trace = []
    feas_hist = []
    final = False
    while True:
        stage_tol = max(kappa * mu, 0.01 * tol) if not final else 0.01 * tol
        stage_iters = 0
        while True:
            gx = problem.g(x)
            J = problem.jac(x)
            gf = problem.grad(x)
            r_d = gf - J.T @ y
            r_p = gx - s
            r_c = s * y - mu
            err = max(np.abs(r_d).max(initial=0.0), np.abs(r_p).max(initial=0.0),
                      np.abs(r_c).max(initial=0.0))
            if err <= stage_tol:
                break
            if total >= max_iter:
                raise ConvergenceError(f"interior point did not converge in {max_iter} steps",
                                       {"stationarity": float(np.abs(r_d).max()),
                                        "primal": float(np.abs(r_p).max()),
                                        "complementarity": float(np.abs(r_c).max()),
                                        "mu": mu})
            total += 1
            stage_iters += 1
            H = problem.hess(x) - problem.lag_hess(x, y)
            D = y / s
            rhs2 = -gx + mu / y
            Kc = H + J.T @ (D[:, None] * J)
            b = J.T @ (D * rhs2) - r_d
            dx = _solve_spd(Kc, b)
            dy = D * (rhs2 - J @ dx)
            ds = J @ dx + gx - s

            a_s = _max_step(s, ds, tau)
            a_y = _max_step(y, dy, tau)
            cnorm = float(np.linalg.norm(r_p))
            barrier_slope = float(gf @ dx - mu * np.sum(ds / s))
            if cnorm > 0:
                need = 2.0 * (barrier_slope + 1e-12) / (0.5 * cnorm)
                nu = max(nu, need, 2.0 * float(np.linalg.norm(y + dy)) + 1.0)
            feas_hist.append(cnorm)
            if len(feas_hist) > 5 and cnorm > 0.9 * feas_hist[-6] and cnorm > tol:
                nu *= 10.0  # feasibility stalls: push harder on the penalty
            slope = barrier_slope - 0.5 * nu * cnorm

            def merit(xx, ss):
                if np.any(ss <= 0):
                    return math.inf
                gg = problem.g(xx)
                val = problem.f(xx) - mu * float(np.sum(np.log(ss))) + 0.5 * nu * float(
                    np.linalg.norm(gg - ss))
                return val if math.isfinite(val) else math.inf

            phi0 = merit(x, s)
            a = a_s
            accepted = False
            if slope < 0:
                for _ in range(60):
                    if merit(x + a * dx, s + a * ds) <= phi0 + 1e-4 * a * slope:
                        accepted = True
                        break
                    a *= 0.5
            if not accepted:
                # not a descent direction for the merit (or no decrease found):
                # take the safeguarded Newton step on the KKT conditions
                a = a_s
                while a > 1e-16 and (not np.all(np.isfinite(problem.g(x + a * dx)))
                                     or not math.isfinite(problem.f(x + a * dx))):
                    a *= 0.5
            x = x + a * dx
            s = s + a * ds
            y = y + a_y * dy
            # keep the duals consistent with the barrier level (safeguard)
            y = np.clip(y, mu / (1e10 * s), 1e10 * mu / s)
        trace.append({"mu": mu, "iterations": stage_iters, "error": float(err)})
        if final:
            break
        mu *= mu_factor
        if mu <= mu_min:
            mu = mu_min
            final = True
    gx = problem.g(x)
    J = problem.jac(x)
    kkt = {
        "stationarity": float(np.abs(problem.grad(x) - J.T @ y).max(initial=0.0)),
        "primal": float(np.abs(np.minimum(gx, 0.0)).max(initial=0.0)),
        "complementarity": float(np.abs(s * y).max(initial=0.0)),
        "slack_residual": float(np.abs(gx - s).max(initial=0.0)),
        "mu": mu,
    }
    if max(kkt["stationarity"], kkt["primal"], kkt["complementarity"]) > tol:
        raise ConvergenceError("KKT residuals above tolerance at the final barrier level", kkt)
    return IpResult(x, float(problem.f(x)), y, s, kkt, total, trace)


def _solve_spd(K, b):
    n = len(b)
    scale = np.sqrt(np.maximum(np.abs(np.diag(K)), 1e-300))
    Ks = K / scale[:, None] / scale[None, :]
    bs = b / scale
    reg = 0.0
    for _ in range(12):
        try:
            L = np.linalg.cholesky(Ks + reg * np.eye(n))
            z = np.linalg.solve(L, bs)
            return np.linalg.solve(L.T, z) / scale
        except np.linalg.LinAlgError:
            reg = 1e-12 if reg == 0.0 else reg * 100.0
    return np.linalg.lstsq(Ks, bs, rcond=None)[0] / scale


# problem assembly

def _weights(cost):
    if isinstance(cost, CostModel):
        return cost.weights
    return [(float(w), float(g)) for w, g in cost]


def per_sample_cost(cost, h):
    return math.fsum(w * h ** (-g) for w, g in _weights(cost))


def error_floor(error: ErrorModel, xi=XI):
    return error.C1 * xi**error.alpha


def _check_eps(error, eps, xi):
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    floor = error_floor(error, xi)
    if eps <= floor:
        raise InfeasibleError(f"epsilon {eps:g} is at or below the error floor {floor:g}", floor)


def _level_layout(L, variant):
    """Indices: m_0..m_L, eta, then rho (geometric: 1, free: L)."""
    n_rho = 0 if L == 0 else (1 if variant == "geo" else L)
    return L + 1, L + 2 + n_rho


def _log_h_rows(L, variant):
    """Rows ``R`` with ``ln h_l = R[l] . x``."""
    nm, n = _level_layout(L, variant)
    R = np.zeros((L + 1, n))
    R[:, nm] = 1.0
    for l in range(1, L + 1):
        if variant == "geo":
            R[l, nm + 1] = -l
        else:
            R[l, nm + 1:nm + 1 + l] = -1.0
    return R


def _build(cost, error, eps, L, variant, xi, h_max, fix_h=None):
    """Objective ExpSum, budget ExpSum and linear bounds for the level problem."""
    nm, n = _level_layout(L, variant)
    R = _log_h_rows(L, variant)
    coef, rows = [], []
    for l in range(L + 1):
        for w, g in _weights(cost):
            a = -g * R[l].copy()
            a[l] += 1.0
            coef.append(w)
            rows.append(a)
    obj = ExpSum(coef, np.array(rows))
    bc, brows = [], []
    a = np.zeros(n)
    a[0] = -0.5
    bc.append(error.C00 / eps)
    brows.append(a)
    for l in range(1, L + 1):
        a = error.beta * R[l - 1].copy()
        a[l] -= 0.5
        bc.append(error.C0 / eps)
        brows.append(a)
    bc.append(error.C1 / eps)
    brows.append(error.alpha * R[L])
    budget = ExpSum(bc, np.array(brows))
    lin_A, lin_b = [], []
    for l in range(L + 1):
        a = np.zeros(n)
        a[l] = 1.0
        lin_A.append(a)
        lin_b.append(0.0)
    a = np.zeros(n)
    a[nm] = 1.0
    lin_A.append(a)
    lin_b.append(-math.log(xi))
    if h_max is not None:
        lin_A.append(-a)
        lin_b.append(math.log(h_max))
    for k in range(nm + 1, n):
        a = np.zeros(n)
        a[k] = 1.0
        lin_A.append(a)
        lin_b.append(0.0)
    return obj, budget, np.array(lin_A), np.array(lin_b)


def _start(error, eps, L, variant, xi, h_max):
    """Feasible start: discretization share below eps/2, statistical budget split evenly."""
    nm, n = _level_layout(L, variant)
    r = 2.0
    hL_target = (eps / (2 * error.C1)) ** (1 / error.alpha) if error.C1 > 0 else 1.0
    h0 = hL_target * r**L
    if h_max is not None:
        h0 = min(h0, h_max / 1.5)
    if h0 * r ** (-L) <= xi or h0 <= xi:
        # tolerance close to the floor: sit geometrically between floor and eps
        h0 = xi * (eps / error_floor(error, xi)) ** (1 / (2 * error.alpha))
        r = 1.0 + 1e-3
    hs = [h0 * r ** (-l) for l in range(L + 1)]
    disc = error.C1 * hs[-1] ** error.alpha
    share = 0.9 * (eps - disc) / (L + 1)
    M = [max((error.C00 / share) ** 2, math.e)]
    for l in range(1, L + 1):
        M.append(max((error.C0 * hs[l - 1] ** error.beta / share) ** 2, math.e))
    x = np.zeros(n)
    x[:nm] = np.log(M)
    x[nm] = math.log(h0)
    x[nm + 1:] = math.log(r)
    return x


def _names(L, variant):
    nm, n = _level_layout(L, variant)
    names = [f"ln_M{l}" for l in range(L + 1)] + ["ln_h0"]
    if n > nm + 1:
        names += ["ln_r"] if variant == "geo" else [f"ln_r{i}" for i in range(1, L + 1)]
    return names


@dataclass
class OptResult:
    variant: str
    L: int
    epsilon: float
    h0: float
    ratios: object
    M_continuous: list
    objective: float
    plan: object
    work: float
    kkt: dict
    iterations: int
    trace: list
    starts: int

    @property
    def mesh_sizes(self):
        if self.variant == "mc":
            return [self.h0]
        return self.plan.mesh_sizes

    def to_dict(self):
        plan = ({"h": self.plan.h, "M": self.plan.M} if self.variant == "mc"
                else self.plan.to_dict())
        return {
            "variant": self.variant,
            "L": self.L,
            "epsilon": self.epsilon,
            "continuous": {
                "h0": self.h0,
                "ratios": self.ratios,
                "M": list(self.M_continuous),
                "objective": self.objective,
            },
            "plan": plan,
            "work": self.work,
            "kkt": self.kkt,
            "iterations": self.iterations,
            "trace": self.trace,
            "starts": self.starts,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _solve_levels(cost, error, eps, L, variant, xi=XI, h_max=None, starts=N_STARTS, seed=0):
    _check_eps(error, eps, xi)
    if L < 0:
        raise ValueError("L must be non-negative")
    mc_like = L == 0
    fix_h = mc_like and error.C1 == 0
    if fix_h and h_max is None:
        h_max = 1.0
    nm, n = _level_layout(L, variant)
    obj, budget, lin_A, lin_b = _build(cost, error, eps, L, variant, xi, h_max)
    x0 = _start(error, eps, L, variant, xi, h_max)
    if fix_h:
        # no discretization error: h only makes samples dearer, pin it at the box bound
        x0[nm] = math.log(h_max)
        keep = [i for i in range(n) if i != nm]
        obj = _restrict(obj, keep, nm, x0[nm])
        budget = _restrict(budget, keep, nm, x0[nm])
        lin_b = lin_b + lin_A[:, nm] * x0[nm]
        lin_A = lin_A[:, keep]
        rows = np.any(lin_A != 0, axis=1)
        lin_A, lin_b = lin_A[rows], lin_b[rows]
        x0 = x0[keep]
    f0 = obj.value(x0)
    obj_s = obj.scaled(1.0 / f0)
    problem = NlpProblem.from_expsums(obj_s, [budget], lin_A, lin_b, xi, _names(L, variant))
    rng = np.random.default_rng(seed)
    best = None
    failures = []
    for k in range(starts):
        xs = x0.copy()
        if k:
            d = rng.uniform(-0.7, 0.7, len(xs))
            for _ in range(30):
                cand = x0 + d
                if np.all(problem.g(cand) > 0):
                    xs = cand
                    break
                d *= 0.5
        try:
            res = interior_point_solve(problem, xs)
        except ConvergenceError as exc:
            failures.append(exc)
            continue
        if best is None or res.f < best.f * (1 - 1e-12):
            best = res
    if best is None:
        raise ConvergenceError("all interior-point starts failed",
                               failures[-1].residuals if failures else {})
    x = best.x
    if fix_h:
        x = np.insert(x, nm, math.log(h_max))
    M = [float(v) for v in np.exp(x[:nm])]
    h0 = float(math.exp(x[nm]))
    rho = np.exp(x[nm + 1:])
    if L == 0:
        ratios = None
    elif variant == "geo":
        ratios = float(rho[0])
    else:
        ratios = [float(v) for v in rho]
    return dict(M=M, h0=h0, ratios=ratios, objective=best.f * f0, kkt=best.kkt,
                iterations=best.iterations, trace=best.trace, starts=starts)


def _restrict(es: ExpSum, keep, idx, val):
    out = ExpSum.__new__(ExpSum)
    out.c = es.c * np.exp(es.A[:, idx] * val)
    out.A = es.A[:, keep]
    out.n = len(keep)
    return out


def optimize_mc(cost, error: ErrorModel, epsilon, xi=XI, h_max=None, starts=N_STARTS) -> OptResult:
    """Cheapest single-level ``(h, M)`` with ``C1 h^alpha + C00 M^-1/2 <= eps``.

    The sample count is rounded up, which keeps the constraint satisfied.
    """
    r = _solve_levels(cost, error, epsilon, 0, "geo", xi, h_max, starts)
    h = r["h0"]
    # round up, ignoring solver-level excess above an integer
    M = max(1, math.ceil(r["M"][0] * (1 - 1e-9)))
    plan = McPlan(h, M)
    if error.C1 * h**error.alpha + error.C00 / math.sqrt(M) > epsilon * (1 + 1e-9):
        M += 1
        plan = McPlan(h, M)
    return OptResult("mc", 0, epsilon, h, None, r["M"], r["objective"], plan,
                     M * per_sample_cost(cost, h), r["kkt"], r["iterations"], r["trace"],
                     r["starts"])


def continuous_plan(L, h0, ratios, samples):
    """An :class:`MlmcPlan` holding real-valued sample counts, as input to :func:`floor_samples`."""
    cont = MlmcPlan.__new__(MlmcPlan)
    object.__setattr__(cont, "L", int(L))
    object.__setattr__(cont, "h0", float(h0))
    object.__setattr__(cont, "ratios", tuple(ratios) if isinstance(ratios, list) else ratios)
    object.__setattr__(cont, "samples", tuple(float(m) for m in samples))
    return cont


def _mlmc(cost, error, epsilon, L, variant, xi, h_max, starts):
    r = _solve_levels(cost, error, epsilon, L, variant, xi, h_max, starts)
    if L == 0:
        ratios = 1.0 if variant == "geo" else ()
    else:
        ratios = r["ratios"] if variant == "geo" else tuple(r["ratios"])
    plan = floor_samples(continuous_plan(L, r["h0"], ratios, r["M"]), error, epsilon, cost)
    work = plan_work(cost, plan)
    return OptResult(variant, L, epsilon, r["h0"], r["ratios"], r["M"], r["objective"], plan,
                     work, r["kkt"], r["iterations"], r["trace"], r["starts"])


def optimize_mlmc_geometric(cost, error, epsilon, L, xi=XI, h_max=None, starts=N_STARTS):
    """Cheapest hierarchy with ``h_l = h0 r^-l``."""
    return _mlmc(cost, error, epsilon, L, "geo", xi, h_max, starts)


def optimize_mlmc_free(cost, error, epsilon, L, xi=XI, h_max=None, starts=N_STARTS):
    """Cheapest hierarchy with free ratios ``h_l = h_{l-1} / r_l``."""
    return _mlmc(cost, error, epsilon, L, "free", xi, h_max, starts)


def plan_work(cost, plan):
    if isinstance(plan, McPlan):
        return plan.M * per_sample_cost(cost, plan.h)
    return math.fsum(M * per_sample_cost(cost, h) for M, h in zip(plan.samples, plan.mesh_sizes))


def accuracy_margin(error: ErrorModel, epsilon, hs, Ms):
    """``g_1``: epsilon minus the RMSE bound for mesh sizes ``hs`` and samples ``Ms``."""
    stat = error.C00 / math.sqrt(Ms[0])
    for l in range(1, len(hs)):
        stat += error.C0 * hs[l - 1] ** error.beta / math.sqrt(Ms[l])
    return epsilon - error.C1 * hs[-1] ** error.alpha - stat


def floor_samples(plan: MlmcPlan, error: ErrorModel, epsilon, cost=None) -> MlmcPlan:
    """Round sample counts down, then repair the accuracy constraint greedily.

    While the constraint is violated, the level whose extra sample buys the
    largest constraint improvement per unit work gets one more sample.
    """
    hs = plan.mesh_sizes
    M = [max(1, math.floor(m + 1e-9)) for m in plan.samples]
    w = [per_sample_cost(cost, h) if cost is not None else 1.0 for h in hs]
    coef = [error.C00] + [error.C0 * hs[l - 1] ** error.beta for l in range(1, len(hs))]
    while accuracy_margin(error, epsilon, hs, M) < 0:
        gains = [c * (1 / math.sqrt(m) - 1 / math.sqrt(m + 1)) / wk
                 for c, m, wk in zip(coef, M, w)]
        k = int(np.argmax(gains))
        if gains[k] <= 0:
            break
        M[k] += 1
    return MlmcPlan(plan.L, plan.h0, plan.ratios, tuple(M))


def select_levels(cost, error, epsilon, variant="geo", L_max=8, xi=XI, h_max=None,
                  starts=N_STARTS):
    """Solve for every ``L`` in ``0..L_max``; pick the cheapest floored plan."""
    if L_max < 0:
        raise ValueError("L_max must be non-negative")
    curve = []
    best = None
    for L in range(L_max + 1):
        try:
            res = _mlmc(cost, error, epsilon, L, variant, xi, h_max, starts)
        except (InfeasibleError, ConvergenceError) as exc:
            curve.append({"L": L, "objective": math.inf, "work": math.inf,
                          "status": type(exc).__name__})
            continue
        curve.append({"L": L, "objective": res.objective, "work": res.work, "status": "ok"})
        if best is None or res.work < best.work:
            best = res
    if best is None:
        raise InfeasibleError(f"no level count up to {L_max} is feasible for eps={epsilon:g}",
                              error_floor(error, xi))
    return best, curve


def write_curve_csv(curve, path, epsilon=None, variant=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon", "variant", "L", "objective", "work", "status"])
        for row in curve:
            w.writerow([repr(epsilon), variant, row["L"], repr(row["objective"]),
                        repr(row["work"]), row["status"]])


# grid-search oracles (independent of the interior-point code)

def _allocate(costs, coefs, budget):
    """Minimize ``sum c_l M_l`` s.t. ``sum v_l M_l^-1/2 <= budget``, ``M_l >= 1``."""
    costs = np.asarray(costs, float)
    coefs = np.asarray(coefs, float)
    if budget <= 0:
        return None
    clamped = coefs == 0
    for _ in range(len(costs) + 1):
        free = ~clamped
        B = budget - np.sum(coefs[clamped])
        if B <= 0:
            return None
        lam13 = np.sum(coefs[free] ** (2 / 3) * (2 * costs[free]) ** (1 / 3)) / B
        M = np.ones_like(costs)
        M[free] = (lam13**3 * coefs[free] / (2 * costs[free])) ** (2 / 3)
        newly = free & (M < 1)
        if not np.any(newly):
            return M
        clamped |= newly
    return M


def _oracle_work(cost, error, eps, hs):
    hs = np.asarray(hs, float)
    B = eps - error.C1 * hs[-1] ** error.alpha
    c = [per_sample_cost(cost, h) for h in hs]
    v = [error.C00] + [error.C0 * hs[l - 1] ** error.beta for l in range(1, len(hs))]
    M = _allocate(c, v, B)
    if M is None:
        return math.inf, None
    return float(np.dot(M, c)), M


def oracle_mc(cost, error, eps, xi=XI, h_max=None, n_grid=400):
    """Dense 1D search over h with the optimal M in closed form, then local refinement."""
    return oracle_mlmc(cost, error, eps, 0, "geo", xi, h_max, n_grid=n_grid)


def oracle_mlmc(cost, error, eps, L, variant="geo", xi=XI, h_max=None, n_grid=None):
    """Grid over ``(ln h0, ln r...)`` plus Nelder-Mead refinement; M by Lagrange allocation."""
    _check_eps(error, eps, xi)
    hstar = (eps / error.C1) ** (1 / error.alpha) if error.C1 > 0 else (h_max or 1.0)
    lo = max(math.log(xi), math.log(hstar) - 8.0)
    hi = math.log(h_max) if h_max is not None else math.log(hstar) + 8.0
    dims = 0 if L == 0 else (1 if variant == "geo" else L)

    def hs_of(z):
        h0 = math.exp(z[0])
        if L == 0:
            return [h0]
        if variant == "geo":
            r = math.exp(abs(z[1]))
            return [h0 / r**l for l in range(L + 1)]
        out = [h0]
        for rr in z[1:]:
            out.append(out[-1] / math.exp(abs(rr)))
        return out

    def F(z):
        if z[0] > hi or z[0] < lo:
            return math.inf
        return _oracle_work(cost, error, eps, hs_of(z))[0]

    if n_grid is None:
        n_grid = {0: 400, 1: 80}.get(dims, 22)
    g0 = np.linspace(lo, hi, n_grid)
    axes = [g0] + [np.linspace(0.0, 3.0, max(8, n_grid // 2))] * dims
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    vals = np.array([F(p) for p in pts])
    order = np.argsort(vals)[:3]
    best_z, best_v = pts[order[0]], vals[order[0]]
    for k in order:
        if not math.isfinite(vals[k]):
            continue
        res = minimize(F, pts[k], method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000 * (dims + 1)})
        if res.fun < best_v:
            best_z, best_v = res.x, res.fun
    hs = hs_of(best_z)
    W, M = _oracle_work(cost, error, eps, hs)
    return W, hs, (None if M is None else [float(m) for m in M])


# inversion of published optimum rows

def invert_mc_optimum(epsilon, h, M, alpha, C00):
    """Constants that make ``(h, M)`` the continuous single-level optimum.

    With one cost term the active constraint gives ``C1`` and stationarity gives
    ``gamma = C1 alpha h^alpha / (C00 M^-1/2 / 2)``; ``mu`` does not affect the
    argmin.  Returns ``(C1, gamma)``.
    """
    stat = C00 / math.sqrt(M)
    if stat >= epsilon:
        raise InfeasibleError("statistical term alone exceeds epsilon")
    C1 = (epsilon - stat) / h**alpha
    gamma = C1 * alpha * h**alpha / (0.5 * stat)
    return C1, gamma


def fit_level_constants(cost, alpha, C1, C00, epsilon, target, L=2, variant="geo",
                        x0=(math.log(0.2), 1.0), h_max=None):
    """Fit ``(C0, beta)`` so the continuous hierarchy matches a target row.

    ``target`` is ``(h0, ratios, M)``; the misfit is the sum of squared log
    ratios of h0, the ratios and the level-0 and level-1 sample counts.
    Returns ``(C0, beta, misfit)``.
    """
    h0_t, r_t, M_t = target
    r_t = [r_t] if np.isscalar(r_t) else list(r_t)

    def misfit(z):
        C0, beta = math.exp(z[0]), z[1]
        if not 0.05 < beta < 10:
            return 1e6
        em = ErrorModel(alpha, C1, beta, C0, C00)
        try:
            r = _solve_levels(cost, em, epsilon, L, variant, XI, h_max, starts=1)
        except (ConvergenceError, InfeasibleError):
            return 1e6
        rr = [r["ratios"]] if variant == "geo" else r["ratios"]
        terms = [math.log(r["h0"] / h0_t)] + [math.log(a / b) for a, b in zip(rr, r_t)]
        terms += [math.log(r["M"][0] / M_t[0]), math.log(r["M"][1] / M_t[1])]
        return float(np.sum(np.square(terms)))

    res = minimize(misfit, np.asarray(x0, float), method="Nelder-Mead",
                   options={"xatol": 1e-6, "fatol": 1e-10, "maxiter": 400})
    return math.exp(res.x[0]), float(res.x[1]), float(res.fun)
