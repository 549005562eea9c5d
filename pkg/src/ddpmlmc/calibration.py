"""Fitting the error model (alpha, C1, beta, C0, C00) and the cost model (mu_k, gamma_k).

All fits are least squares in log-log coordinates.  The device studies solve
a fixed set of seeds on a ladder of mesh sizes; the same table of QoI values
yields discretization errors (against the finest mesh), level-difference
standard deviations and the level-0 spread.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .estimators import ErrorModel, fit_sigma

COMPONENTS = ("poisson_assembly", "poisson_solve", "dd_assembly", "dd_solve")
# one Poisson solve and two continuity solves per Gummel step
MULTIPLICITY = {"poisson_assembly": 1, "poisson_solve": 1, "dd_assembly": 2, "dd_solve": 2}
MIN_MEASURABLE = 1e-3


class CalibrationDataError(ValueError):
    pass


class MeasurementError(CalibrationDataError):
    pass


@dataclass(frozen=True)
class PowerFit:
    exponent: float
    constant: float
    r2: float
    n: int
    x_range: tuple


def fit_power_law(x, y):
    """Least squares ``log y = log c + p log x``; returns a :class:`PowerFit`."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise CalibrationDataError("power-law fit needs positive finite data")
    lx, ly = np.log(x), np.log(y)
    A = np.column_stack([np.ones_like(lx), lx])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ coef
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return PowerFit(float(coef[1]), float(math.exp(coef[0])), r2, len(x),
                    (float(x.min()), float(x.max())))


def fit_discretization(pairs, return_fit=False):
    """``error ~ C1 h^alpha`` from ``(h, error)`` pairs; returns ``(alpha, C1)``."""
    pairs = [(float(h), float(e)) for h, e in pairs]
    hs = sorted({h for h, _ in pairs})
    if len(hs) < 3 or hs[-1] / hs[0] < 4 * (1 - 1e-12):
        raise CalibrationDataError("need >= 3 distinct h spanning a factor >= 4")
    if any(h <= 0 or e <= 0 for h, e in pairs):
        raise CalibrationDataError("errors and mesh sizes must be positive")
    fit = fit_power_law([p[0] for p in pairs], [p[1] for p in pairs])
    if fit.exponent <= 0:
        raise CalibrationDataError(f"fitted order {fit.exponent:.3g} is not positive")
    return (fit.exponent, fit.constant, fit) if return_fit else (fit.exponent, fit.constant)


def fit_level_variance(sigma0, pairs, return_fit=False):
    """``sigma_l ~ C0 h_{l-1}^beta`` from ``(h_{l-1}, sigma_l)``; ``C00 = sigma0``.

    Returns ``(beta, C0, C00)``.
    """
    pairs = [(float(h), float(s)) for h, s in pairs]
    if len(pairs) < 3:
        raise CalibrationDataError("need at least three level-difference deviations")
    if not sigma0 >= 0:
        raise CalibrationDataError("level-0 deviation must be non-negative")
    fit = fit_power_law([p[0] for p in pairs], [p[1] for p in pairs])
    if fit.exponent <= 0:
        raise CalibrationDataError(f"fitted variance order {fit.exponent:.3g} is not positive")
    out = (fit.exponent, fit.constant, float(sigma0))
    return out + (fit,) if return_fit else out


@dataclass(frozen=True)
class CostTerm:
    label: str
    mu: float
    gamma: float
    multiplicity: int = 1


@dataclass(frozen=True)
class CostModel:
    """Per-sample work ``sum_k m_k mu_k h^-gamma_k`` (``m_k`` the multiplicity)."""

    terms: tuple

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise ValueError("cost model needs at least one term")
        for t in self.terms:
            if not (t.mu > 0 and t.gamma > 0):
                raise ValueError(f"cost term {t.label}: mu and gamma must be positive")

    @classmethod
    def single(cls, mu, gamma):
        return cls((CostTerm("total", float(mu), float(gamma)),))

    def per_sample(self, h):
        return math.fsum(t.multiplicity * t.mu * h ** (-t.gamma) for t in self.terms)

    def work(self, M, h):
        return M * self.per_sample(h)

    def scaled(self, lam):
        return CostModel(tuple(CostTerm(t.label, t.mu * lam, t.gamma, t.multiplicity)
                               for t in self.terms))

    @property
    def weights(self):
        """Effective ``(m_k mu_k, gamma_k)`` pairs used by the optimizer."""
        return [(t.multiplicity * t.mu, t.gamma) for t in self.terms]

    def to_dict(self):
        return {"terms": [{"label": t.label, "mu": t.mu, "gamma": t.gamma,
                           "multiplicity": t.multiplicity} for t in self.terms]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(CostTerm(t["label"], float(t["mu"]), float(t["gamma"]),
                                  int(t.get("multiplicity", 1))) for t in d["terms"]))


def fit_cost_model(timings, multiplicity=None, return_fits=False):
    """Fit ``seconds / M = mu h^-gamma`` per component.

    ``timings`` maps a component label to a list of ``(h, M, seconds)`` where
    ``seconds`` is the total over ``M`` samples (per unit multiplicity).
    """
    multiplicity = MULTIPLICITY if multiplicity is None else multiplicity
    terms = []
    fits = {}
    for label, rows in timings.items():
        rows = [(float(h), int(M), float(s)) for h, M, s in rows]
        if len({h for h, _, _ in rows}) < 3:
            raise CalibrationDataError(f"{label}: need >= 3 mesh sizes")
        for h, M, s in rows:
            if s < MIN_MEASURABLE:
                raise MeasurementError(
                    f"{label} at h={h}: {s * 1e3:.3f} ms is below timer resolution; increase M")
        fit = fit_power_law([r[0] for r in rows], [r[2] / r[1] for r in rows])
        fits[label] = fit
        terms.append(CostTerm(label, fit.constant, -fit.exponent, int(multiplicity.get(label, 1))))
    model = CostModel(tuple(terms))
    return (model, fits) if return_fits else model


@dataclass
class CalibrationReport:
    error_model: ErrorModel
    cost_model: CostModel
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "error_model": self.error_model.to_dict(),
            "cost_model": self.cost_model.to_dict(),
            "diagnostics": self.diagnostics,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(ErrorModel.from_dict(d["error_model"]), CostModel.from_dict(d["cost_model"]),
                   d.get("diagnostics", {}))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


def _fit_dict(fit: PowerFit):
    return {"exponent": fit.exponent, "constant": fit.constant, "r2": fit.r2, "n": fit.n,
            "x_range": list(fit.x_range)}


# device studies

@dataclass
class LevelTable:
    """QoI values ``q[i][k]`` of seed ``i`` on mesh size ``hs[k]`` (same event per row)."""

    hs: list
    q: np.ndarray

    def discretization_errors(self):
        """``|mean_i (q_i(h) - q_i(h_ref))|`` for every h except the finest."""
        ref = self.q[:, -1]
        return [(h, abs(math.fsum(self.q[:, k] - ref)) / len(ref))
                for k, h in enumerate(self.hs[:-1])]

    def level_sigmas(self, n_levels):
        """Level-0 spread and ``(h_{l-1}, sigma_l)`` for consecutive meshes."""
        s0 = fit_sigma(self.q[:, 0])
        pairs = [(self.hs[l - 1], fit_sigma(self.q[:, l] - self.q[:, l - 1]))
                 for l in range(1, n_levels)]
        return s0, pairs


def level_table(sampler, hs, seeds, stream=0, on_row=None):
    """Solve each seed on every mesh size (coarsest first).

    ``on_row(seed, values)`` is called after each completed seed, so callers
    can persist partial tables.
    """
    hs = sorted(hs, reverse=True)
    q = np.empty((len(seeds), len(hs)))
    for i, s in enumerate(seeds):
        sample = sampler.draw((stream, s))
        for k, h in enumerate(hs):
            q[i, k] = sampler.solve(sample, h, level=k).qoi
        if on_row is not None:
            on_row(s, q[i].tolist())
    return LevelTable(hs, q)


def timing_study(sampler, hs, samples=2, repeats=3, stream=10**6):
    """Median-of-``repeats`` component times, summed over ``samples`` warm solves.

    Returns ``{component: [(h, samples, seconds per unit multiplicity)]}``.
    """
    out = {c: [] for c in COMPONENTS}
    for h in hs:
        sampler.mesh(h)
        warm = sampler.draw((stream, 0))
        sampler.solve(warm, h)
        per_rep = {c: [] for c in COMPONENTS}
        for _ in range(repeats):
            tot = {c: 0.0 for c in COMPONENTS}
            for i in range(samples):
                sol = sampler.solve(sampler.draw((stream, i + 1)), h)
                for c in COMPONENTS:
                    tot[c] += sol.timings[c]
            for c in COMPONENTS:
                per_rep[c].append(tot[c])
        for c in COMPONENTS:
            out[c].append((h, samples, statistics.median(per_rep[c])))
    return out


def calibrate_device(sampler, hs=(5.0, 2.5, 1.25, 0.625), h_ref=None, seeds=16,
                     variance_levels=4, timing_samples=2, timing_hs=None, log=None,
                     on_row=None):
    """Full calibration: discretization, level variance and cost studies."""
    hs = sorted(hs, reverse=True)
    h_ref = hs[-1] / 2 if h_ref is None else h_ref
    seed_ids = list(range(seeds))
    t0 = time.perf_counter()
    table = level_table(sampler, hs + [h_ref], seed_ids, on_row=on_row)
    if log:
        log(f"level table: {len(seed_ids)} seeds x {len(hs) + 1} meshes "
            f"in {time.perf_counter() - t0:.1f}s")
    errs = table.discretization_errors()
    alpha, C1, dfit = fit_discretization(errs, return_fit=True)
    s0, pairs = table.level_sigmas(min(variance_levels, len(hs)))
    beta, C0, C00, vfit = fit_level_variance(s0, pairs, return_fit=True)
    timings = timing_study(sampler, timing_hs or hs, samples=timing_samples)
    cost, cfits = fit_cost_model(timings, return_fits=True)
    diag = {
        "discretization": {**_fit_dict(dfit), "pairs": [list(p) for p in errs], "h_ref": h_ref,
                           "seeds": len(seed_ids)},
        "level_variance": {**_fit_dict(vfit), "sigma0": s0, "pairs": [list(p) for p in pairs]},
        "cost": {k: _fit_dict(f) for k, f in cfits.items()},
        "timings": {k: [list(r) for r in v] for k, v in timings.items()},
        "qoi_table": {"hs": list(table.hs), "values": table.q.tolist()},
    }
    return CalibrationReport(ErrorModel(alpha, C1, beta, C0, C00), cost, diag)


def write_error_csv(report: CalibrationReport, path):
    d = report.diagnostics
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["table", "h", "value"])
        for h, e in d["discretization"]["pairs"]:
            w.writerow(["discretization_error", repr(h), repr(e)])
        for h, s in d["level_variance"]["pairs"]:
            w.writerow(["level_sigma", repr(h), repr(s)])


def write_timing_csv(report: CalibrationReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "h", "M", "seconds"])
        for comp, rows in report.diagnostics["timings"].items():
            for h, M, s in rows:
                w.writerow([comp, repr(h), M, repr(s)])
