import json
import math

import numpy as np
import pytest

from ddpmlmc.calibration import CostModel, CostTerm
from ddpmlmc.estimators import ErrorModel, MlmcPlan, rmse_bound_mlmc
from ddpmlmc.optimizer import (XI, ConvergenceError, InfeasibleError, NlpProblem,
                               accuracy_margin, continuous_plan, error_floor, floor_samples,
                               interior_point_solve, optimize_mc, optimize_mlmc_free,
                               optimize_mlmc_geometric, oracle_mc, plan_work, select_levels,
                               write_curve_csv)

UNIT = ErrorModel(1.0, 1.0, 1.0, 1.0, 1.0)
SYN = ErrorModel(1.0, 1.0, 2.0, 0.5, 1.0)
COST = CostModel.single(1.0, 2.0)


def _quadratic():
    return NlpProblem(1, lambda x: float(x[0] ** 2), lambda x: 2 * x, lambda x: 2 * np.eye(1),
                      lambda x: np.array([x[0] - 1.0]), lambda x: np.eye(1),
                      lambda x, y: np.zeros((1, 1)))


def _product(a=1.0, b=1.0, c=1.0):
    return NlpProblem(
        2, lambda x: float(a * x[0] + b * x[1]), lambda x: np.array([a, b]),
        lambda x: np.zeros((2, 2)),
        lambda x: np.array([x[0] * x[1] - c, x[0] - 0.1, x[1] - 0.1]),
        lambda x: np.array([[x[1], x[0]], [1.0, 0.0], [0.0, 1.0]]),
        lambda x, y: y[0] * np.array([[0.0, 1.0], [1.0, 0.0]]))


def test_active_bound():
    r = interior_point_solve(_quadratic(), [3.0])
    assert r.x[0] == pytest.approx(1.0, abs=1e-8)
    assert max(r.kkt["stationarity"], r.kkt["primal"], r.kkt["complementarity"]) <= 1e-8


def test_geometric_mean_optimum():
    r = interior_point_solve(_product(), [3.0, 2.0])
    np.testing.assert_allclose(r.x, [1.0, 1.0], atol=1e-8)
    # barrier schedule: mu shrinks by 0.2 per stage down to 1e-12
    mus = [t["mu"] for t in r.trace]
    assert mus[0] == 1.0 and mus[-1] == pytest.approx(1e-12)
    assert all(b < a for a, b in zip(mus, mus[1:]))
    errs = [t["error"] for t in r.trace]
    assert errs[-1] <= errs[0]


@pytest.mark.parametrize("seed", range(5))
def test_random_convex_against_grid(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.uniform(0.5, 3.0, 3)
    r = interior_point_solve(_product(a, b, c), [5.0, 5.0])
    assert max(r.kkt["stationarity"], r.kkt["primal"], r.kkt["complementarity"]) <= 1e-8
    # grid on the active constraint x1 x2 = c, then local refinement
    x1 = np.linspace(0.1, c / 0.1, 200_001)
    f = a * x1 + b * c / x1
    k = int(np.argmin(f))
    fine = np.linspace(x1[max(k - 1, 0)], x1[min(k + 1, len(x1) - 1)], 200_001)
    oracle = float(np.min(a * fine + b * c / fine))
    assert abs(r.f - oracle) <= 1e-6 * oracle


def test_start_must_be_feasible_and_iteration_cap():
    with pytest.raises(ValueError):
        interior_point_solve(_quadratic(), [0.5])
    with pytest.raises(ConvergenceError) as exc:
        interior_point_solve(_product(), [3.0, 2.0], max_iter=2)
    assert "stationarity" in exc.value.residuals


def test_infeasible_below_floor():
    floor = error_floor(UNIT)
    assert floor == pytest.approx(XI)
    with pytest.raises(InfeasibleError) as exc:
        optimize_mc(COST, UNIT, floor / 2)
    assert exc.value.floor == floor
    with pytest.raises(InfeasibleError):
        select_levels(COST, UNIT, floor / 2, L_max=2)


def test_mc_synthetic_against_oracle():
    r = optimize_mc(COST, UNIT, 0.1)
    W, hs, M = oracle_mc(COST, UNIT, 0.1)
    assert abs(r.objective - W) <= 0.01 * W
    assert r.h0 == pytest.approx(0.05, rel=1e-6)
    assert r.M_continuous[0] == pytest.approx(400.0, rel=1e-6)
    # rounded up and re-verified
    assert r.plan.M == math.ceil(r.M_continuous[0] * (1 - 1e-9))
    assert UNIT.C1 * r.plan.h + UNIT.C00 / math.sqrt(r.plan.M) <= 0.1 * (1 + 1e-9)


def test_mc_without_discretization_error():
    em = ErrorModel(1.0, 0.0, 1.0, 1.0, 0.3)
    r = optimize_mc(CostModel.single(1.0, 1.0), em, 0.01, h_max=2.0)
    assert r.plan.M == math.ceil((0.3 / 0.01) ** 2)
    assert r.h0 == pytest.approx(2.0)


def test_level_zero_reduces_to_mc():
    mc = optimize_mc(COST, SYN, 0.1)
    geo = optimize_mlmc_geometric(COST, SYN, 0.1, 0)
    assert geo.objective == pytest.approx(mc.objective, rel=1e-8)
    assert geo.h0 == pytest.approx(mc.h0, rel=1e-6)
    assert geo.M_continuous[0] == pytest.approx(mc.M_continuous[0], rel=1e-6)


def test_one_level_free_equals_geometric():
    g = optimize_mlmc_geometric(COST, SYN, 0.05, 1)
    f = optimize_mlmc_free(COST, SYN, 0.05, 1)
    assert f.objective == pytest.approx(g.objective, rel=1e-7)
    assert f.ratios[0] == pytest.approx(g.ratios, rel=1e-5)


def test_free_not_worse_than_geometric():
    for eps in (0.1, 0.02):
        g = optimize_mlmc_geometric(COST, SYN, eps, 2)
        f = optimize_mlmc_free(COST, SYN, eps, 2)
        assert f.objective <= g.objective * (1 + 1e-6)
        assert max(f.kkt["stationarity"], f.kkt["primal"], f.kkt["complementarity"]) <= 1e-8


def test_argmin_invariance_under_cost_scaling():
    base = CostModel((CostTerm("a", 0.3, 1.5), CostTerm("b", 0.1, 2.5, 2)))
    g = optimize_mlmc_geometric(base, SYN, 0.05, 2)
    g2 = optimize_mlmc_geometric(base.scaled(37.0), SYN, 0.05, 2)
    assert g2.objective == pytest.approx(37.0 * g.objective, rel=1e-6)
    assert g2.h0 == pytest.approx(g.h0, rel=1e-6)
    assert g2.ratios == pytest.approx(g.ratios, rel=1e-6)
    np.testing.assert_allclose(g2.M_continuous, g.M_continuous, rtol=1e-6)


def test_work_monotone_in_eps():
    eps = [0.2, 0.1, 0.05, 0.02, 0.01]
    mc = [optimize_mc(COST, SYN, e).objective for e in eps]
    geo = [optimize_mlmc_geometric(COST, SYN, e, 2).objective for e in eps]
    assert all(b >= a for a, b in zip(mc, mc[1:]))
    assert all(b >= a for a, b in zip(geo, geo[1:]))


def test_floor_samples_examples():
    em = ErrorModel(0.96, 0.9, 2.1, 0.28, 0.197)
    cont = continuous_plan(2, 0.359, 2.65, (59.7, 4.2, 1.1))
    hs = cont.mesh_sizes
    eps = 1.001 * (0.1 + rmse_bound_mlmc(em, MlmcPlan(2, 0.359, 2.65, (59, 4, 1))) - 0.1)
    assert floor_samples(cont, em, eps).samples == (59, 4, 1)
    # integral input is returned unchanged
    ints = continuous_plan(2, 0.359, 2.65, (59, 4, 1))
    assert floor_samples(ints, em, eps).samples == (59, 4, 1)
    # infeasible by a hair after flooring: exactly one increment
    tight = rmse_bound_mlmc(em, MlmcPlan(2, 0.359, 2.65, (59, 4, 1))) * (1 - 1e-9)
    out = floor_samples(cont, em, tight, COST)
    assert sum(out.samples) == 59 + 4 + 1 + 1
    assert accuracy_margin(em, tight, hs, out.samples) >= 0


def test_select_levels_large_eps_and_unimodal():
    em = ErrorModel(1.0, 0.05, 2.0, 0.5, 1.0)
    best, curve = select_levels(COST, em, 0.9, "geo", L_max=3)
    assert best.L == 0
    best, curve = select_levels(COST, SYN, 0.01, "geo", L_max=6)
    w = [c["work"] for c in curve]
    k = int(np.argmin(w))
    assert k == best.L
    assert all(a >= b for a, b in zip(w[:k], w[1:k + 1]))
    assert all(a <= b for a, b in zip(w[k:], w[k + 1:]))


def test_plan_serialization(tmp_path):
    best, curve = select_levels(COST, SYN, 0.05, "free", L_max=3)
    doc = json.loads(best.to_json())
    assert doc["variant"] == "free" and doc["plan"]["L"] == best.L
    assert {"stationarity", "primal", "complementarity"} <= set(doc["kkt"])
    assert best.to_json() == json.dumps(doc, indent=2, sort_keys=True) + "\n"
    assert plan_work(COST, best.plan) == pytest.approx(best.work)
    path = tmp_path / "curve.csv"
    write_curve_csv(curve, path, 0.05, "free")
    assert path.read_text().splitlines()[0] == "epsilon,variant,L,objective,work,status"
