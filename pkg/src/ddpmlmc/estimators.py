"""Monte Carlo and multilevel Monte Carlo estimators, with their RMSE bounds.

A sampler is any callable ``sampler(key, h_fine, h_coarse) -> (q_fine, q_coarse)``
where ``key = (stream, index)`` identifies the random event and ``q_coarse`` is
None when ``h_coarse`` is None.  Sums use ``math.fsum`` so results do not
depend on evaluation order or thread count.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

RETRY_OFFSET = 2**40  # reserved index range for retried samples


class EstimationError(RuntimeError):
    def __init__(self, msg, level=None, index=None):
        super().__init__(msg)
        self.level = level
        self.index = index


class StatisticsError(ValueError):
    pass


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class ErrorModel:
    alpha: float
    C1: float
    beta: float
    C0: float
    C00: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be positive")
        if min(self.C1, self.C0, self.C00) < 0:
            raise ValueError("C1, C0, C00 must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(d[k]) for k in ("alpha", "C1", "beta", "C0", "C00")})


@dataclass(frozen=True)
class McPlan:
    h: float
    M: int

    def __post_init__(self):
        if self.M < 1 or not self.h > 0:
            raise PlanError("McPlan needs M >= 1 and h > 0")


@dataclass(frozen=True)
class MlmcPlan:
    """Hierarchy ``(L, h0, ratios, samples)``.

    ``ratios`` is a float for a geometric hierarchy (``h_l = h0 / r^l``) or a
    tuple of per-level factors ``r_1..r_L`` (``h_l = h0 / (r_1 ... r_l)``).
    """

    L: int
    h0: float
    ratios: float | tuple
    samples: tuple

    def __post_init__(self):
        if self.L < 0:
            raise PlanError("L must be non-negative")
        if len(self.samples) != self.L + 1:
            raise PlanError("need one sample count per level")
        if any(int(m) != m or m < 1 for m in self.samples):
            raise PlanError("sample counts must be integers >= 1")
        object.__setattr__(self, "samples", tuple(int(m) for m in self.samples))
        if isinstance(self.ratios, (list, tuple)):
            if len(self.ratios) != self.L:
                raise PlanError("free hierarchy needs L ratios")
            if any(r < 1 for r in self.ratios):
                raise PlanError("ratios must be >= 1")
            object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        elif self.ratios < 1:
            raise PlanError("ratio must be >= 1")
        if not self.h0 > 0:
            raise PlanError("h0 must be positive")

    @property
    def geometric(self):
        return not isinstance(self.ratios, tuple)

    @property
    def mesh_sizes(self):
        if self.geometric:
            return [self.h0 / self.ratios**l for l in range(self.L + 1)]
        out = [self.h0]
        for r in self.ratios:
            out.append(out[-1] / r)
        return out

    def to_dict(self):
        return {
            "L": self.L,
            "h0": self.h0,
            "ratios": self.ratios if self.geometric else list(self.ratios),
            "samples": list(self.samples),
        }

    @classmethod
    def from_dict(cls, d):
        r = d["ratios"]
        return cls(int(d["L"]), float(d["h0"]), tuple(r) if isinstance(r, list) else float(r),
                   tuple(d["samples"]))


def fit_sigma(values):
    """Unbiased sample standard deviation."""
    x = [float(v) for v in values]
    if len(x) < 2:
        raise StatisticsError("need at least two values for a standard deviation")
    mean = math.fsum(x) / len(x)
    return math.sqrt(math.fsum((v - mean) ** 2 for v in x) / (len(x) - 1))


def _run(sampler, keys, h_fine, h_coarse, threads, level, retry):
    def one(key):
        try:
            return sampler(key, h_fine, h_coarse)
        except Exception as exc:  # noqa: BLE001 - re-raised with identity
            if retry:
                try:
                    return sampler((key[0], key[1] + RETRY_OFFSET), h_fine, h_coarse)
                except Exception:  # noqa: BLE001
                    pass
            raise EstimationError(f"sample {key[1]} on level {level} failed: {exc}",
                                  level=level, index=key[1]) from exc

    if threads is None or threads <= 1:
        return [one(k) for k in keys]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, keys))


def mc_estimate(sampler, h, M, seed_stream=0, threads=None, retry=False):
    """Sample mean and standard deviation of ``M`` evaluations at mesh size ``h``."""
    if M < 1:
        raise PlanError("M must be >= 1")
    keys = [(seed_stream, i) for i in range(int(M))]
    vals = [r[0] for r in _run(sampler, keys, h, None, threads, 0, retry)]
    mean = math.fsum(vals) / len(vals)
    sigma = fit_sigma(vals) if len(vals) > 1 else 0.0
    return mean, sigma


@dataclass
class LevelStats:
    level: int
    h: float
    M: int
    mean: float
    sigma: float
    mean_fine: float
    wall_clock: float


@dataclass
class MlmcResult:
    mean: float
    levels: list = field(default_factory=list)
    plan: MlmcPlan | None = None

    def to_dict(self):
        return {
            "plan": None if self.plan is None else self.plan.to_dict(),
            "mean": self.mean,
            "levels": [asdict(s) for s in self.levels],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def mlmc_estimate(sampler, plan: MlmcPlan, shared_seeds=False, threads=None, retry=False):
    """Telescoping estimator over the plan's hierarchy.

    Level ``l`` draws its events from stream ``l`` (independent levels) or, with
    ``shared_seeds``, every level reuses stream 0.  Returns ``(mean, levels)``
    wrapped in an :class:`MlmcResult`.
    """
    hs = plan.mesh_sizes
    terms = []
    stats = []
    for l in range(plan.L + 1):
        M = plan.samples[l]
        stream = 0 if shared_seeds else l
        keys = [(stream, i) for i in range(M)]
        t0 = time.perf_counter()
        out = _run(sampler, keys, hs[l], hs[l - 1] if l else None, threads, l, retry)
        wall = time.perf_counter() - t0
        fine = [o[0] for o in out]
        coarse = [o[1] for o in out] if l else [0.0] * M
        diffs = [f - c for f, c in zip(fine, coarse)]
        # fine and coarse sums kept apart so shared-seed levels cancel exactly
        terms.append(math.fsum(fine) / M)
        if l:
            terms.append(-(math.fsum(coarse) / M))
        stats.append(LevelStats(
            level=l, h=hs[l], M=M,
            mean=math.fsum(diffs) / M,
            sigma=fit_sigma(diffs) if M > 1 else 0.0,
            mean_fine=math.fsum(fine) / M,
            wall_clock=wall,
        ))
    return MlmcResult(math.fsum(terms), stats, plan)


def rmse_bound_mc(model: ErrorModel, plan: McPlan):
    return model.C1 * plan.h**model.alpha + model.C00 / math.sqrt(plan.M)


def rmse_bound_mlmc(model: ErrorModel, plan: MlmcPlan):
    hs = plan.mesh_sizes
    stat = model.C00 / math.sqrt(plan.samples[0])
    for l in range(1, plan.L + 1):
        stat += model.C0 * hs[l - 1] ** model.beta / math.sqrt(plan.samples[l])
    return model.C1 * hs[-1] ** model.alpha + stat


# synthetic samplers used in tests and the acceptance suite

def _uniform(key, seed):
    ss = np.random.SeedSequence([int(seed), int(key[0]), int(key[1])])
    return float(np.random.Generator(np.random.Philox(ss)).random())


@dataclass(frozen=True)
class UniformSampler:
    """``q = U(0, 1)`` independent of the mesh."""

    seed: int = 0

    def __call__(self, key, h_fine, h_coarse=None):
        x = _uniform(key, self.seed)
        return x, (None if h_coarse is None else x)


@dataclass(frozen=True)
class BiasedSampler:
    """``q_h = X + bias * h^order + noise * h^decay * Z``.

    ``X`` and ``Z`` are independent uniforms centred to zero mean (``X`` has
    mean ``mean``); the bias is deterministic, so ``E[q_h] - E[q] = bias h^order``.
    """

    seed: int = 0
    mean: float = 0.5
    bias: float = 1.0
    order: float = 1.0
    noise: float = 0.0
    decay: float = 1.0

    def value(self, key, h):
        x = _uniform(key, self.seed) - 0.5 + self.mean
        z = _uniform((key[0] + 7919, key[1]), self.seed) - 0.5
        return x + self.bias * h**self.order + self.noise * h**self.decay * z

    def __call__(self, key, h_fine, h_coarse=None):
        return self.value(key, h_fine), (None if h_coarse is None else self.value(key, h_coarse))
