import math
import statistics
import time

import numpy as np
import pytest

from ddpmlmc import fem
from ddpmlmc.calibration import (COMPONENTS, CalibrationDataError, CalibrationReport, CostModel,
                                 CostTerm, MeasurementError, fit_cost_model, fit_discretization,
                                 fit_level_variance, fit_power_law, level_table, timing_study,
                                 write_error_csv, write_timing_csv)
from ddpmlmc.estimators import ErrorModel
from ddpmlmc.mesh import build_device_mesh
from ddpmlmc.stochastic import DeviceSampler

HS = [4.0, 2.0, 1.0, 0.5]


def test_fit_discretization_exact():
    a, c = fit_discretization([(h, 2 * h) for h in HS])
    assert a == pytest.approx(1.0, abs=1e-12) and c == pytest.approx(2.0, rel=1e-12)
    a, c = fit_discretization([(h, 3 * h**0.96) for h in HS])
    assert abs(a - 0.96) <= 1e-10 and c == pytest.approx(3.0, rel=1e-10)


def test_fit_discretization_rejects_bad_data():
    with pytest.raises(CalibrationDataError):
        fit_discretization([(1.0, 1.0), (2.0, 2.0)])
    with pytest.raises(CalibrationDataError):
        fit_discretization([(1.0, 1.0), (1.5, 2.0), (2.0, 3.0)])  # spans < 4
    with pytest.raises(CalibrationDataError):
        fit_discretization([(1.0, 1.0), (2.0, 0.0), (4.0, 3.0)])


@pytest.mark.parametrize("lam", [1e-3, 0.5, 7.0])
def test_rescaling_invariance(lam):
    pairs = [(h, 0.3 * h**1.3 * (1 + 0.1 * k)) for k, h in enumerate(HS)]
    a, c = fit_discretization(pairs)
    a2, c2 = fit_discretization([(h, lam * e) for h, e in pairs])
    assert a2 == pytest.approx(a, abs=1e-12) and c2 == pytest.approx(lam * c, rel=1e-10)
    b, c0, c00 = fit_level_variance(0.2, pairs[:3])
    b2, c02, _ = fit_level_variance(0.2 * lam, [(h, lam * s) for h, s in pairs[:3]])
    assert b2 == pytest.approx(b, abs=1e-12) and c02 == pytest.approx(lam * c0, rel=1e-10)


def test_fit_level_variance_exact():
    beta, C0, C00 = fit_level_variance(0.197, [(h, 0.5 * h) for h in HS[:3]])
    assert beta == pytest.approx(1.0, abs=1e-12) and C0 == pytest.approx(0.5, rel=1e-12)
    assert C00 == 0.197
    with pytest.raises(CalibrationDataError):
        fit_level_variance(0.1, [(1.0, 1.0), (0.5, 0.5)])


def test_cost_model_exact_and_round_trip():
    t = {"total": [(h, 10, 4 * 10 * h**-2) for h in HS]}
    m = fit_cost_model(t, multiplicity={"total": 1})
    assert m.terms[0].mu == pytest.approx(4.0, rel=1e-12)
    assert m.terms[0].gamma == pytest.approx(2.0, rel=1e-12)
    ref = CostModel((CostTerm("poisson_assembly", 0.03, 1.9, 1), CostTerm("poisson_solve", 0.2, 2.3, 1),
                     CostTerm("dd_assembly", 0.02, 2.0, 2), CostTerm("dd_solve", 0.07, 2.1, 2)))
    data = {t.label: [(h, 5, 5 * t.mu * h**-t.gamma) for h in HS] for t in ref.terms}
    fit = fit_cost_model(data)
    for a, b in zip(fit.terms, ref.terms):
        assert a.mu == pytest.approx(b.mu, rel=1e-8) and a.gamma == pytest.approx(b.gamma, rel=1e-8)
        assert a.multiplicity == b.multiplicity
    # W = W_P + 2 W_D
    h = 0.7
    assert ref.per_sample(h) == pytest.approx(
        0.03 * h**-1.9 + 0.2 * h**-2.3 + 2 * (0.02 * h**-2.0 + 0.07 * h**-2.1))
    assert CostModel.from_dict(ref.to_dict()) == ref


def test_cost_model_validation():
    with pytest.raises(ValueError):
        CostModel((CostTerm("x", 0.0, 2.0),))
    with pytest.raises(ValueError):
        CostModel((CostTerm("x", 1.0, -1.0),))
    with pytest.raises(MeasurementError):
        fit_cost_model({"x": [(h, 1, 1e-4) for h in HS]})
    with pytest.raises(CalibrationDataError):
        fit_cost_model({"x": [(1.0, 1, 1.0), (2.0, 1, 0.5)]})


def test_report_round_trip(tmp_path):
    r = CalibrationReport(ErrorModel(0.96, 0.9, 2.1, 0.28, 0.197),
                          CostModel.single(1.0, 2.3), {"note": [1, 2]})
    p = tmp_path / "r.json"
    r.save(p)
    text = p.read_text()
    assert CalibrationReport.load(p).to_json() == text


def test_level_table_and_csv(tmp_path):
    sam = DeviceSampler(seed=3)
    rows = []
    t = level_table(sam, [2.5, 5.0], [0, 1, 2], on_row=lambda s, v: rows.append((s, v)))
    assert t.hs == [5.0, 2.5] and t.q.shape == (3, 2)
    assert [r[0] for r in rows] == [0, 1, 2]
    again = level_table(DeviceSampler(seed=3), [5.0, 2.5], [0, 1, 2])
    np.testing.assert_array_equal(t.q, again.q)


def test_assembly_cost_scales_like_element_count(geometry):
    params = fem.PhysicalParams()
    hs = [2.5, 1.25, 0.625, 0.3125]
    ts = []
    for h in hs:
        m = build_device_mesh(geometry, h)
        A = fem.nominal_permittivity(m, params)
        reps = []
        for _ in range(5):
            t0 = time.perf_counter()
            fem._stiffness(m, A)
            reps.append(time.perf_counter() - t0)
        ts.append(statistics.median(reps))
    gamma = -fit_power_law(hs, ts).exponent
    assert 1.6 <= gamma <= 2.4


@pytest.mark.slow
def test_timing_model_predicts_held_out_octave():
    sam = DeviceSampler(seed=0)
    fit_hs = [5.0, 4.0, 3.2, 2.5]
    tim = timing_study(sam, fit_hs, samples=2, repeats=3)
    model = fit_cost_model(tim)
    held = timing_study(sam, [1.25], samples=2, repeats=3)
    measured = sum(rows[0][2] / 2 * (2 if c.startswith("dd") else 1) for c, rows in held.items())
    predicted = model.per_sample(1.25)
    assert abs(predicted - measured) <= 0.3 * measured


@pytest.mark.slow
def test_device_calibration(device_report, tmp_path):
    r = device_report
    d = r.diagnostics
    assert r.error_model.beta > 0 and d["level_variance"]["r2"] >= 0.9
    for comp in COMPONENTS:
        assert comp in d["cost"] and "r2" in d["cost"][comp]
    # the direct sparse solve is superlinear in the unknowns
    solve = {t.label: t for t in r.cost_model.terms}["poisson_solve"]
    assert solve.gamma >= 2.0
    write_error_csv(r, tmp_path / "e.csv")
    write_timing_csv(r, tmp_path / "t.csv")
    assert (tmp_path / "e.csv").read_text().startswith("table,h,value")
