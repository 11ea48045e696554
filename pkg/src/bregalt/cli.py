"""Command line experiment runner.

Subcommands: ``run``, ``rate``, ``diag``, ``sweep``, ``list-generators`` and
``list-fixtures``.  Exit codes: 0 on a clean stop, 1 for configuration and
input errors, 2 when an iterate leaves the domain, 3 when an inner solver
fails.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .alternator import TRACE_COLUMNS, Trace, detect_gap, format_float
from .config import ExperimentConfig, execute, list_fixtures, load_config
from .diagnostics import (angle_condition_probe, annotate, classify_transversality,
                          errors_to_final, fit_rate)
from .exceptions import ConfigError, DomainError, SolverFailure, TooShort
from .geometry import BregmanBall, curvature_bounds, estimate_reach
from .legendre import GENERATORS, get_generator

EXIT_OK, EXIT_CONFIG, EXIT_DOMAIN, EXIT_SOLVER = 0, 1, 2, 3
DIAG_COLUMNS = ("angle_rl", "angle_lr", "ell_rl")


# -- serialization ----------------------------------------------------------------

def _json_scalar(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if v is None:
        return "null"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "null" if not np.isfinite(v) else "%.17g" % float(v)
    return json.dumps(str(v))


def dump_json(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with floats written to 17 significant digits; nan and inf become null."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dump_json(v, indent, _level + 1)}"
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq):
            return "[" + ", ".join(_json_scalar(v) for v in seq) + "]"
        return "[\n" + ",\n".join(pad + dump_json(v, indent, _level + 1) for v in seq) \
            + "\n" + end + "]"
    return _json_scalar(obj)


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _cell(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format_float(v)
    return str(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def _read_csv(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise ConfigError(f"{path} is empty")
    return rows[0], rows[1:]


def _float(s):
    return float(s) if s.strip() else np.nan


# -- commands -------------------------------------------------------------------------

def _load(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = int(args.seed)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    res = execute(cfg, max_iters=args.max_iters)
    if res.em is not None:
        text = _csv_text(res.em.column_names(), res.em.rows())
    else:
        text = res.trace.to_csv()
    _write(out / "trace.csv", text)
    _write(out / "summary.json", dump_json(res.summary) + "\n")
    _say(args, dump_json({k: res.summary.get(k) for k in
                          ("name", "stop_reason", "pairs", "r_star", "feasible")}))
    return EXIT_DOMAIN if res.trace.stop_reason == "domain-violation" else EXIT_OK


def _errors_from_csv(header, rows):
    bcols = [i for i, h in enumerate(header) if h.startswith("b_") and h[2:].isdigit()]
    if bcols:
        pts = np.array([[_float(r[i]) for i in bcols] for r in rows])
        return errors_to_final(pts)
    for name in ("error", "e"):
        if name in header:
            i = header.index(name)
            return np.array([_float(r[i]) for r in rows])
    return np.array([_float(r[-1]) for r in rows])


def cmd_rate(args) -> int:
    if not args.trace:
        raise ConfigError("rate needs a trace CSV path")
    header, rows = _read_csv(args.trace)
    est = fit_rate(_errors_from_csv(header, rows))
    text = dump_json(est.to_dict()) + "\n"
    _write(Path(args.out) / "rate.json", text)
    _say(args, text.rstrip())
    return EXIT_OK


def _trace_from_csv(cfg, header, rows) -> Trace:
    gen = cfg.make_generator() if cfg.generator else None
    if gen is None:
        raise ConfigError("diag needs a config with a generator")
    d = gen.dim
    try:
        ai = [header.index(f"a_{i}") for i in range(d)]
        bi = [header.index(f"b_{i}") for i in range(d)]
    except ValueError:
        raise ConfigError("the trace CSV has no point columns a_i, b_i") from None
    A = np.array([[_float(r[i]) for i in ai] for r in rows]).reshape(-1, d)
    B = np.array([[_float(r[i]) for i in bi] for r in rows]).reshape(-1, d)
    start = None
    if cfg.orientation == "rl" and cfg.kind == "alternating":
        start = cfg.starts()[0]
    return Trace(gen, A, B, start=start, orientation=cfg.orientation)


def _merge_columns(header, rows, fresh: dict):
    """Fill empty diagnostic cells and insert missing columns at their documented place."""
    header = list(header)
    rows = [list(r) + [""] * (len(header) - len(r)) for r in rows]
    for name in DIAG_COLUMNS:
        if name not in header:
            # right after the closest documented column that precedes it
            order = list(TRACE_COLUMNS)
            earlier = [header.index(c) for c in order[:order.index(name)] if c in header]
            pos = max(earlier) + 1 if earlier else 0
            header.insert(pos, name)
            for r in rows:
                r.insert(pos, "")
        j = header.index(name)
        for k, r in enumerate(rows):
            if not r[j].strip():
                r[j] = format_float(fresh[name][k])
    return header, rows


def cmd_diag(args) -> int:
    if not args.trace:
        raise ConfigError("diag needs a trace CSV path")
    cfg = _load(args)
    header, rows = _read_csv(args.trace)
    tr = _trace_from_csv(cfg, header, rows)
    annotate(tr)
    header, rows = _merge_columns(header, rows, {n: getattr(tr, n) for n in DIAG_COLUMNS})
    out = Path(args.out) if args.out != "." else Path(args.trace).parent
    target = out / Path(args.trace).name
    _write(target, _csv_text(header, rows))
    probe = {"trace": str(target), "pairs": len(tr)}
    tail = tr.angle_rl[len(tr) // 2:]
    tail = tail[np.isfinite(tail)]
    probe["min_tail_angle_rl"] = float(np.min(tail)) if tail.size else None
    ell = tr.ell_rl[np.isfinite(tr.ell_rl) | np.isinf(tr.ell_rl)]
    probe["min_ell_rl"] = float(np.min(ell)) if ell.size else None
    probe["transversality"] = classify_transversality(tr)
    try:
        gap = detect_gap(tr)
        p = angle_condition_probe(tr, gap.r_star)
        probe.update(r_star=gap.r_star, feasible=gap.feasible,
                     angle_condition={"sigma_family": p.sigma_family, "theta": p.theta,
                                      "gamma_lower": p.gamma_lower, "violations": p.violations,
                                      "gamma_by_theta": {str(k): v for k, v in
                                                         p.gamma_by_theta.items()}})
    except TooShort as exc:
        probe["angle_condition"] = None
        probe["note"] = str(exc)
    probe.update(_geometry_diagnostics(cfg, out))
    _write(out / "probe.json", dump_json(probe) + "\n")
    _say(args, dump_json({k: probe.get(k) for k in
                          ("transversality", "min_tail_angle_rl", "min_ell_rl", "r_star")}))
    return EXIT_OK


def _geometry_diagnostics(cfg, out: Path) -> dict:
    res = {}
    diag = cfg.diagnostics
    gen = cfg.make_generator()
    if "curvature" in diag:
        c = diag["curvature"]
        cb = curvature_bounds(gen, BregmanBall("left", c["center"], c["radius"]),
                              boundary_samples=c.get("boundary_samples", 64), seed=cfg.seed)
        res["curvature"] = {"kappa_lo": cb.kappa_lo, "kappa_hi": cb.kappa_hi,
                            "inner_radius": cb.inner_radius, "outer_radius": cb.outer_radius}
    if "reach" in diag:
        r = diag["reach"]
        est = estimate_reach(gen, cfg.set(r.get("set", "B")), r["b_plus"], r["a_plus"],
                             grid=r.get("grid", 1000))
        rows = [(lam, rad, int(empty)) for lam, rad, empty in est.history]
        _write(out / "reach.csv", _csv_text(("lambda", "radius", "empty_interior_flag"), rows))
        res["reach"] = {"value": est.value, "parameter": est.parameter,
                        "direction": est.direction.tolist(), "samples_used": est.samples_used,
                        "method": est.method, "caveat": est.caveat}
    return res


def _sweep_one(payload):
    raw, start, max_iters = payload
    cfg = ExperimentConfig.from_dict(raw)
    try:
        res = execute(cfg, start=start, max_iters=max_iters)
    except DomainError as exc:
        return {"stop_reason": "domain-violation", "message": str(exc)}
    s = res.summary
    return {k: s.get(k) for k in ("stop_reason", "pairs", "r_star", "feasible", "final_b",
                                  "final_a", "message")}


def cluster_limits(points, tol: float = 1e-6) -> np.ndarray:
    """Greedy labels: a point joins the first cluster whose representative is within ``tol``."""
    reps, labels = [], []
    for p in points:
        if p is None or not np.all(np.isfinite(p)):
            labels.append(-1)
            continue
        for j, r in enumerate(reps):
            if np.linalg.norm(p - r) <= tol:
                labels.append(j)
                break
        else:
            reps.append(p)
            labels.append(len(reps) - 1)
    return np.array(labels, dtype=int)


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if cfg.kind != "alternating":
        raise ConfigError("sweeps run alternating-projection configs")
    starts = cfg.starts()
    raw = {"kind": cfg.kind, "name": cfg.name, "generator": cfg.generator,
           "orientation": cfg.orientation, "stop": cfg.stop, "projection": cfg.projection,
           "seed": cfg.seed, **{k: v for k, v in cfg.body.items()
                                if k not in ("start", "starts", "start_grid")}}
    raw["start"] = starts[0].tolist()
    jobs = [(raw, s, args.max_iters) for s in starts]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    tol = float(cfg.diagnostics.get("cluster_tol", 1e-6))
    limits = [np.asarray(r["final_b"]) if r.get("final_b") is not None else None
              for r in results]
    labels = cluster_limits(limits, tol)
    d = starts.shape[1]
    header = (["index"] + [f"start_{i}" for i in range(d)]
              + ["stop_reason", "pairs", "r_star", "feasible"]
              + [f"limit_b_{i}" for i in range(d)] + ["cluster"])
    rows = []
    for i, (s, r, lab) in enumerate(zip(starts, results, labels)):
        lim = limits[i] if limits[i] is not None else np.full(d, np.nan)
        rows.append([i, *s, r.get("stop_reason", ""), r.get("pairs", ""),
                     np.nan if r.get("r_star") is None else r["r_star"],
                     "" if r.get("feasible") is None else str(bool(r["feasible"])).lower(),
                     *lim, int(lab)])
    out = Path(args.out)
    _write(out / "sweep.csv", _csv_text(header, rows))
    sizes = np.bincount(labels[labels >= 0]) if np.any(labels >= 0) else np.zeros(0, int)
    summary = {"name": cfg.name, "starts": len(starts), "clusters": int(sizes.size),
               "cluster_sizes": sizes.tolist(), "cluster_tol": tol,
               "cluster_representatives": [limits[int(np.flatnonzero(labels == j)[0])].tolist()
                                           for j in range(sizes.size)],
               "failed": int(np.sum(labels < 0))}
    _write(out / "sweep_summary.json", dump_json(summary) + "\n")
    _say(args, dump_json({k: summary[k] for k in ("starts", "clusters", "cluster_sizes")}))
    return EXIT_OK


def cmd_list_generators(args) -> int:
    for name in sorted(GENERATORS):
        g = get_generator(name, 1)
        print(f"{name}\tdomain={g.domain.kind}\tone_coercive={str(g.one_coercive).lower()}")
    return EXIT_OK


def cmd_list_fixtures(args) -> int:
    for name in list_fixtures():
        try:
            kind = load_config(name).kind
        except ConfigError as exc:
            kind = f"invalid ({exc})"
        print(f"{name}\t{kind}")
    return EXIT_OK


def _say(args, text):
    if not getattr(args, "quiet", False):
        print(text)


# -- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file or fixture name")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, default=None, help="seed override")
    common.add_argument("--max-iters", type=int, default=None, help="iteration cap override")
    common.add_argument("--quiet", action="store_true", help="suppress console output")
    p = argparse.ArgumentParser(prog="bregalt",
                                description="Alternating Bregman projection experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run one experiment").set_defaults(func=cmd_run)
    r = sub.add_parser("rate", parents=[common], help="fit a convergence rate to a trace CSV")
    r.add_argument("trace", nargs="?")
    r.set_defaults(func=cmd_rate)
    d = sub.add_parser("diag", parents=[common], help="fill angle and three-point columns")
    d.add_argument("trace", nargs="?")
    d.set_defaults(func=cmd_diag)
    s = sub.add_parser("sweep", parents=[common], help="run from every start of a grid")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)
    sub.add_parser("list-generators", parents=[common]).set_defaults(func=cmd_list_generators)
    sub.add_parser("list-fixtures", parents=[common]).set_defaults(func=cmd_list_fixtures)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, TooShort) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DomainError as exc:
        print(f"domain violation: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
