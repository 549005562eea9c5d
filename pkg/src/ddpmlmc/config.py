"""YAML run configuration: geometry, physics, sampling, solver and run settings."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from importlib import resources

import yaml

from .fem import ConfigurationError, PhysicalParams
from .mesh import Contact, DeviceGeometry, GeometryError
from .optimizer import XI

VARIANTS = ("mc", "geo", "free")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerSettings:
    depth: float = 60.0
    r_dop: float = 1.0
    tol: float = 1e-8
    qoi: str = "mean-potential"
    qoi_contact: str | None = None


@dataclass(frozen=True)
class CalibrationSettings:
    hs: tuple = (5.0, 2.5, 1.25, 0.625)
    h_ref: float = 0.3125
    seeds: int = 16
    variance_levels: int = 4
    timing_samples: int = 2


@dataclass(frozen=True)
class OptimizerSettings:
    h_max: float | None = 10.0
    xi: float = XI
    L_max: int = 8
    starts: int = 8


@dataclass(frozen=True)
class RunConfig:
    geometry: DeviceGeometry = field(default_factory=DeviceGeometry)
    params: PhysicalParams = field(default_factory=PhysicalParams)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    calibration: CalibrationSettings = field(default_factory=CalibrationSettings)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    seed: int = 0
    eps: tuple = (0.1,)
    eps_units: str = "absolute"
    variants: tuple = VARIANTS
    out: str = "results"
    threads: int | None = None

    def tolerances(self, c00=None):
        """Absolute tolerances, largest first."""
        if self.eps_units == "absolute":
            return tuple(self.eps)
        if c00 is None:
            raise ConfigError("tolerances are relative to C00 but no calibration report given")
        return tuple(e * c00 for e in self.eps)


def _take(section, cls, name):
    section = dict(section or {})
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(section) - known
    if extra:
        raise ConfigError(f"unknown keys in {name}: {sorted(extra)}")
    return section


def _coerce(section, types):
    """Cast values to the dataclass field types (YAML reads ``1e17`` as a string)."""
    out = {}
    for k, v in section.items():
        t = types.get(k, "")
        if v is None:
            out[k] = v
        elif "int" in t and "float" not in t:
            out[k] = int(v)
        elif "float" in t:
            out[k] = float(v)
        else:
            out[k] = v
    return out


def _types(cls):
    return {f.name: str(f.type) for f in dataclasses.fields(cls)}


def _tuple_floats(v, name):
    try:
        return tuple(float(x) for x in v)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be a list of numbers") from exc


def parse_variants(v):
    if v in (None, "all"):
        return VARIANTS
    items = [v] if isinstance(v, str) else list(v)
    out = []
    for it in items:
        for s in str(it).split(","):
            s = s.strip()
            if s == "all":
                return VARIANTS
            if s not in VARIANTS:
                raise ConfigError(f"unknown variant {s!r}; expected mc, geo, free or all")
            out.append(s)
    return tuple(dict.fromkeys(out))


def normalize_eps(eps):
    vals = _tuple_floats(eps, "eps")
    if not vals or any(not e > 0 for e in vals):
        raise ConfigError("tolerances must be strictly positive")
    return tuple(sorted(set(vals), reverse=True))


def from_dict(d) -> RunConfig:
    d = dict(d or {})
    allowed = {"geometry", "physics", "stochastic", "solver", "calibration", "optimizer", "run"}
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown top-level sections: {sorted(extra)}")
    try:
        g = dict(d.get("geometry") or {})
        contacts = g.pop("contacts", None)
        g = _take(g, DeviceGeometry, "geometry")
        if contacts is not None:
            g["contacts"] = tuple(Contact(**c) for c in contacts)
        geometry = DeviceGeometry(**{k: (float(v) if k != "contacts" else v) for k, v in g.items()})
        params = PhysicalParams(**_coerce(_take(d.get("physics"), PhysicalParams, "physics"),
                                          _types(PhysicalParams)))
        st = dict(d.get("stochastic") or {})
        st.update(d.get("solver") or {})
        sampler = SamplerSettings(**_coerce(_take(st, SamplerSettings, "stochastic/solver"),
                                            _types(SamplerSettings)))
        cal = _take(d.get("calibration"), CalibrationSettings, "calibration")
        if "hs" in cal:
            cal["hs"] = _tuple_floats(cal["hs"], "calibration.hs")
        cal = _coerce(cal, _types(CalibrationSettings))
        calibration = CalibrationSettings(**cal)
        optimizer = OptimizerSettings(**_coerce(_take(d.get("optimizer"), OptimizerSettings,
                                                      "optimizer"), _types(OptimizerSettings)))
        run = dict(d.get("run") or {})
        known = {"seed", "eps", "eps_units", "variant", "out", "threads"}
        if set(run) - known:
            raise ConfigError(f"unknown keys in run: {sorted(set(run) - known)}")
    except (TypeError, ValueError, GeometryError, ConfigurationError) as exc:
        raise ConfigError(str(exc)) from exc
    if sampler.qoi not in ("mean-potential", "contact-flux", "interface-field"):
        raise ConfigError(f"unknown qoi {sampler.qoi!r}")
    if sampler.depth <= 0 or sampler.r_dop <= 0 or sampler.tol <= 0:
        raise ConfigError("depth, r_dop and tol must be positive")
    if len(calibration.hs) < 3 or calibration.seeds < 2:
        raise ConfigError("calibration needs >= 3 mesh sizes and >= 2 seeds")
    units = run.get("eps_units", "absolute")
    if units not in ("absolute", "c00"):
        raise ConfigError("eps_units must be 'absolute' or 'c00'")
    threads = run.get("threads")
    if threads is not None and int(threads) < 1:
        raise ConfigError("threads must be >= 1")
    return RunConfig(
        geometry=geometry,
        params=params,
        sampler=sampler,
        calibration=calibration,
        optimizer=optimizer,
        seed=int(run.get("seed", 0)),
        eps=normalize_eps(run.get("eps", (0.1,))),
        eps_units=units,
        variants=parse_variants(run.get("variant", "all")),
        out=str(run.get("out", "results")),
        threads=None if threads is None else int(threads),
    )


def default_config_text():
    return resources.files("ddpmlmc").joinpath("data/default.yaml").read_text()


def load_config(path=None) -> RunConfig:
    """Read a YAML config; ``None`` gives the packaged default."""
    if path is None:
        text = default_config_text()
    else:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            text = fh.read()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return from_dict(data)
