"""Experiment configurations: parsing, fixtures and execution."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .alternator import RunConfig, Trace, detect_gap, run
from .em import (DSPECT_MAX_ITERS, DSPECT_PROJECTION, DiscreteEmProblem, ExpFamilySpec,
                 build_dspect_problem, run_dspect, run_em_discrete, run_em_expfam)
from .exceptions import ConfigError, TooShort
from .legendre import GENERATORS, Generator, get_generator
from .sets import PARAMETRIC_MAPS, ProjectionOptions, SetSpec, set_from_dict

KINDS = ("alternating", "em_discrete", "em_expfam", "dspect")
FIXTURE_ENV = "BREGALT_FIXTURES"

_STOP_KEYS = {f.name for f in fields(RunConfig)} - {"orientation", "projection"}
_PROJ_KEYS = {f.name for f in fields(ProjectionOptions)}


def fixture_dir() -> Path:
    """Directory of named configs; ``BREGALT_FIXTURES`` overrides the packaged one."""
    env = os.environ.get(FIXTURE_ENV)
    return Path(env) if env else Path(__file__).with_name("fixtures")


def list_fixtures() -> list:
    d = fixture_dir()
    return sorted(p.stem for p in d.glob("*.json")) if d.is_dir() else []


def _check_finite(obj, where="config"):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{where}.{k}")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _check_finite(v, f"{where}[{i}]")
    elif isinstance(obj, float) and not math.isfinite(obj):
        raise ConfigError(f"{where} is not finite")


def load_config(source) -> "ExperimentConfig":
    """Read a config from a path, or from a fixture name without the ``.json`` suffix."""
    path = Path(source)
    if not path.is_file():
        cand = fixture_dir() / f"{source}.json"
        if not cand.is_file():
            raise ConfigError(f"no config file or fixture named {source!r}")
        path = cand
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("a config must be a JSON object")
    raw.setdefault("name", path.stem)
    return ExperimentConfig.from_dict(raw)


@dataclass
class ExperimentConfig:
    """Validated experiment description.

    ``body`` keeps the problem-specific entries (sets, em data, starts);
    generator, orientation, stop rules and solver options are parsed into
    their own fields.
    """

    kind: str
    name: str = "experiment"
    generator: Optional[dict] = None
    orientation: str = "rl"
    stop: dict = field(default_factory=dict)
    projection: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    seed: int = 0
    body: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        _check_finite(raw)
        raw = dict(raw)
        kind = raw.pop("kind", "alternating")
        if kind not in KINDS:
            raise ConfigError(f"unknown kind {kind!r}; choose from {KINDS}")
        stop = raw.pop("stop", {}) or {}
        bad = set(stop) - _STOP_KEYS
        if bad:
            raise ConfigError(f"unknown stop-rule keys {sorted(bad)}")
        proj = raw.pop("projection", {}) or {}
        bad = set(proj) - _PROJ_KEYS
        if bad:
            raise ConfigError(f"unknown projection keys {sorted(bad)}")
        seed = raw.pop("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        gen = raw.pop("generator", None)
        if gen is not None:
            if isinstance(gen, str):
                gen = {"name": gen}
            base = gen.get("name", "").rstrip("*")
            if base not in GENERATORS:
                raise ConfigError(f"unknown generator {gen.get('name')!r}")
        for key in ("A", "B", "model"):
            spec = raw.get(key)
            if isinstance(spec, dict) and spec.get("variant") == "Parametric":
                if spec.get("name") not in PARAMETRIC_MAPS:
                    raise ConfigError(f"unknown parametric map {spec.get('name')!r}")
        cfg = cls(kind=kind, name=str(raw.pop("name", "experiment")), generator=gen,
                  orientation=raw.pop("orientation", "lr" if kind != "alternating" else "rl"),
                  stop=stop, projection=proj, diagnostics=raw.pop("diagnostics", {}) or {},
                  seed=seed, body=raw)
        cfg.run_config()  # validate early
        return cfg

    # -- builders -----------------------------------------------------------

    def run_config(self, max_iters: Optional[int] = None) -> RunConfig:
        stop = dict(self.stop)
        if max_iters is not None:
            stop["max_iters"] = int(max_iters)
        proj = {"seed": self.seed, **self.projection}
        try:
            return RunConfig(orientation=self.orientation, projection=ProjectionOptions(**proj),
                             **stop)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def dim(self) -> int:
        g = self.generator or {}
        if "dim" in g:
            return int(g["dim"])
        for key in ("A", "B", "model"):
            if key in self.body:
                return self.set(key).dim
        raise ConfigError("cannot infer the dimension; give generator.dim")

    def make_generator(self) -> Generator:
        if self.generator is None:
            raise ConfigError("the config needs a generator")
        g = dict(self.generator)
        name = g.pop("name")
        g.pop("dim", None)
        try:
            return get_generator(name, self.dim(), **g.get("params", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def set(self, key) -> SetSpec:
        if key not in self.body:
            raise ConfigError(f"the config needs a set {key!r}")
        try:
            return set_from_dict(self.body[key])
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid set {key!r}: {exc}") from None

    def starts(self) -> np.ndarray:
        """All start points: ``start``, ``starts`` or a tensor ``start_grid``."""
        b = self.body
        if "start_grid" in b:
            g = b["start_grid"]
            try:
                axes = [np.linspace(lo, hi, int(n))
                        for lo, hi, n in zip(g["lower"], g["upper"], g["num"])]
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"invalid start_grid: {exc}") from None
            mesh = np.meshgrid(*axes, indexing="ij")
            pts = np.stack([m.ravel() for m in mesh], axis=-1) if axes else np.zeros((0, 0))
        elif "starts" in b:
            pts = np.asarray(b["starts"], float)
        elif "start" in b:
            pts = np.asarray(b["start"], float)[None, :]
        else:
            raise ConfigError("the config needs start, starts or start_grid")
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ConfigError("the start grid is empty")
        return pts


# -- execution ------------------------------------------------------------------

@dataclass
class Outcome:
    """Result of one configured run: the trace and its summary."""

    trace: Trace
    summary: dict
    em: object = None


def _summary(cfg, trace, extra=None):
    n = len(trace)
    out = {"name": cfg.name, "kind": cfg.kind, "orientation": trace.orientation,
           "stop_reason": trace.stop_reason, "pairs": n,
           "final_divergence": float(trace.D_bk_ak[-1]) if n else None}
    try:
        gap = detect_gap(trace)
        out.update(r_star=gap.r_star, feasible=gap.feasible, r_star_uncertainty=gap.uncertainty)
        if gap.limit_pair is not None:
            out["limit_b"] = gap.limit_pair[0].tolist()
            out["limit_a"] = gap.limit_pair[1].tolist()
    except TooShort:
        r = float(np.sqrt(2 * max(trace.D_bk_ak[-1], 0.0))) if n else None
        out.update(r_star=r, feasible=None if r is None else r <= 1e-6,
                   r_star_uncertainty=None, gap_note="trace shorter than the gap window")
    if n:
        out["final_b"] = trace.b[-1].tolist()
        out["final_a"] = trace.a[-1].tolist()
    if trace.message:
        out["message"] = trace.message
    if extra:
        out.update(extra)
    return out


def execute(cfg: ExperimentConfig, start=None, max_iters: Optional[int] = None) -> Outcome:
    """Run the configured experiment from ``start`` (default: the first configured start)."""
    rc = cfg.run_config(max_iters)
    if cfg.kind == "alternating":
        gen = cfg.make_generator()
        A, B = cfg.set("A"), cfg.set("B")
        s = cfg.starts()[0] if start is None else np.asarray(start, float)
        tr = run(gen, A, B, s, rc)
        return Outcome(tr, _summary(cfg, tr))
    b = cfg.body
    try:
        if cfg.kind == "em_discrete":
            prob = DiscreteEmProblem(np.asarray(b["T"]), np.asarray(b["p_hat"], float),
                                     cfg.set("model"))
            s = cfg.starts()[0] if start is None else start
            et = run_em_discrete(prob, s, rc)
        elif cfg.kind == "em_expfam":
            spec = ExpFamilySpec(cfg.make_generator(), b["observed"], b["y_hat"], cfg.set("model"))
            s = cfg.starts()[0] if start is None else start
            et = run_em_expfam(spec, s, rc)
        else:
            prob = build_dspect_problem(b["n"], b["m"], b["K"], b["prony"], b["c"], b.get("y"))
            if not cfg.projection:
                rc = replace(rc, projection=DSPECT_PROJECTION)
            if "max_iters" not in cfg.stop and max_iters is None:
                rc = replace(rc, max_iters=DSPECT_MAX_ITERS)
            et = run_dspect(prob, b["start_params"], rc)
    except KeyError as exc:
        raise ConfigError(f"missing config entry {exc}") from None
    extra = {"fixed_point_residual": et.fixed_point_residual, "em_r_star": et.r_star,
             "monotone": et.is_monotone(), "roles": et.roles}
    if cfg.kind == "dspect":
        u = et.trace.a_param[-1]
        pred = prob.expected_counts(u)
        extra["count_relative_error"] = float(np.max(np.abs(pred - prob.y) / prob.y))
        extra["parameters"] = u.tolist()
    return Outcome(et.trace, _summary(cfg, et.trace, extra), et)
