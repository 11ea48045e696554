"""Alternating left / right Bregman projections, traces and gap detection.

With ``b_k`` in ``B`` and ``a_k`` in ``A`` the sequence is

    b_k = left projection of a_k onto B,
    a_{k+1} = right projection of b_k onto A.

An ``rl`` run starts from a point ``s`` (playing the role of ``b_{-1}``) and
first projects it onto ``A``; an ``lr`` run starts from ``a_0`` and first
projects onto ``B``.  Row ``k`` of a :class:`Trace` describes the pair
``(a_k, b_k)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._validation import check_vector
from .exceptions import ConfigError, DomainError, TooShort
from .legendre import Generator, conjugate, divergence_batch
from .sets import (DEFAULT_OPTIONS, Parametric, ProjectionOptions, SetSpec, left_project,
                   right_project)

STOP_REASONS = ("divergence-stagnation", "step-stagnation", "max-iterations", "domain-violation")
TRACE_COLUMNS = ("k", "D_bk_ak", "D_bkm1_ak", "step_b", "step_a", "angle_rl", "angle_lr", "ell_rl")


@dataclass(frozen=True)
class RunConfig:
    """Stop rules and driver options.

    ``check_interiority`` selects which iterates must stay interior to
    ``dom f``: ``"both"``, ``"a"`` (only the ``A`` side, whose points are
    second arguments of the divergence) or ``"none"``.  Stop rules are only
    checked once ``min_iters`` pairs have been produced.
    """

    orientation: str = "rl"
    max_iters: int = 100_000
    min_iters: int = 0
    step_tol: float = 1e-12
    div_tol: float = 1e-14
    div_patience: int = 10
    check_interiority: str = "both"
    interior_margin: float = 1e-12
    warm_start: bool = True
    projection: ProjectionOptions = DEFAULT_OPTIONS

    def __post_init__(self):
        if self.orientation not in ("rl", "lr"):
            raise ConfigError("orientation must be 'rl' or 'lr'")
        if self.check_interiority not in ("both", "a", "none"):
            raise ConfigError("check_interiority must be 'both', 'a' or 'none'")
        if self.max_iters < 0 or self.min_iters < 0:
            raise ConfigError("iteration counts must be nonnegative")


@dataclass
class Block:
    """Building block ``a -> b -> a+ -> b+`` with its divergences.

    ``a`` may be ``None`` for the first block of an ``rl`` run, whose ``b``
    is the start point.
    """

    a: Optional[np.ndarray]
    b: np.ndarray
    a_plus: np.ndarray
    b_plus: np.ndarray
    D_b_a: float
    D_b_aplus: float
    D_bplus_aplus: float
    orientation: str = "rl"

    def decrease_holds(self, tol: float = 1e-10) -> bool:
        first = self.D_bplus_aplus <= self.D_b_aplus + tol
        second = np.isnan(self.D_b_a) or self.D_b_aplus <= self.D_b_a + tol
        return bool(first and second)


@dataclass
class Trace:
    """Record of an alternating run.

    ``a[k]`` and ``b[k]`` are the ``k``-th pair.  ``start`` is the point the
    ``rl`` driver started from, or ``None``.  The diagnostics columns
    ``angle_rl``, ``angle_lr`` and ``ell_rl`` stay ``nan`` until filled by
    :func:`bregalt.diagnostics.annotate`.
    """

    gen: Generator
    a: np.ndarray
    b: np.ndarray
    start: Optional[np.ndarray] = None
    orientation: str = "rl"
    stop_reason: Optional[str] = None
    D_bk_ak: np.ndarray = None
    D_bkm1_ak: np.ndarray = None
    step_b: np.ndarray = None
    step_a: np.ndarray = None
    angle_rl: np.ndarray = None
    angle_lr: np.ndarray = None
    ell_rl: np.ndarray = None
    a_param: Optional[np.ndarray] = None
    b_param: Optional[np.ndarray] = None
    message: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.gen.dim
        self.a = np.asarray(self.a, float).reshape(-1, d)
        self.b = np.asarray(self.b, float).reshape(-1, d)
        if self.a.shape != self.b.shape:
            raise ValueError("a and b must hold the same number of points")
        if self.start is not None:
            self.start = np.asarray(self.start, float)
        n = len(self)
        if self.D_bk_ak is None:
            self._fill_columns()
        for name in ("angle_rl", "angle_lr", "ell_rl"):
            if getattr(self, name) is None:
                setattr(self, name, np.full(n, np.nan))

    def __len__(self):
        return self.a.shape[0]

    def _prev_b(self):
        """``b_{k-1}`` for every row; the start point (or nan) for row 0."""
        n, d = self.a.shape
        prev = np.full((n, d), np.nan)
        if n:
            prev[1:] = self.b[:-1]
            if self.start is not None:
                prev[0] = self.start
        return prev

    def _fill_columns(self):
        gen = self.gen
        n = len(self)
        self.D_bk_ak = divergence_batch(gen, self.b, self.a) if n else np.zeros(0)
        prev = self._prev_b()
        D_prev = np.full(n, np.nan)
        ok = ~np.isnan(prev).any(axis=1)
        if np.any(ok):
            D_prev[ok] = divergence_batch(gen, prev[ok], self.a[ok])
        self.D_bkm1_ak = D_prev
        self.step_b = np.full(n, np.nan)
        self.step_a = np.full(n, np.nan)
        if n > 1:
            self.step_b[1:] = np.linalg.norm(np.diff(self.b, axis=0), axis=1)
            self.step_a[1:] = np.linalg.norm(np.diff(self.a, axis=0), axis=1)
        if n and self.start is not None:
            self.step_b[0] = np.linalg.norm(self.b[0] - self.start)

    # -- blocks ---------------------------------------------------------------

    def blocks(self) -> list:
        """Building blocks ``(a_{k-1}, b_{k-1}, a_k, b_k)`` for ``k >= 1``.

        Row 0 has no block: the start of an ``rl`` run need not lie in ``B``.
        """
        out = []
        for k in range(1, len(self)):
            out.append(Block(self.a[k - 1].copy(), self.b[k - 1].copy(), self.a[k].copy(),
                             self.b[k].copy(), float(self.D_bk_ak[k - 1]),
                             float(self.D_bkm1_ak[k]), float(self.D_bk_ak[k]), self.orientation))
        return out

    def decrease_violations(self, tol: float = 1e-10) -> int:
        """Rows ``k >= 1`` breaking ``D(b_k,a_k) <= D(b_{k-1},a_k) <= D(b_{k-1},a_{k-1}) + tol``."""
        D, Dm = self.D_bk_ak, self.D_bkm1_ak
        bad = 0
        for k in range(1, len(self)):
            if D[k] > Dm[k] + tol or Dm[k] > D[k - 1] + tol:
                bad += 1
        return bad

    # -- serialization -----------------------------------------------------------

    def column_names(self, points: bool = True) -> list:
        names = list(TRACE_COLUMNS)
        if points:
            d = self.gen.dim
            names += [f"a_{i}" for i in range(d)] + [f"b_{i}" for i in range(d)]
        return names

    def rows(self, points: bool = True) -> list:
        out = []
        for k in range(len(self)):
            row = [k, self.D_bk_ak[k], self.D_bkm1_ak[k], self.step_b[k], self.step_a[k],
                   self.angle_rl[k], self.angle_lr[k], self.ell_rl[k]]
            if points:
                row += list(self.a[k]) + list(self.b[k])
            out.append(row)
        return out

    def to_csv(self, path=None, points: bool = True) -> str:
        """Write the trace as CSV with 17 significant digits; returns the text."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.column_names(points))
        for row in self.rows(points):
            w.writerow([format_float(v) if not isinstance(v, (int, np.integer)) else str(v)
                        for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def format_float(v) -> str:
    """Round-trip decimal form of a float; empty for nan."""
    v = float(v)
    if np.isnan(v):
        return ""
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return "%.17g" % v


# -- driver ------------------------------------------------------------------------

def _check_interior(gen, x, margin):
    if gen.domain.kind == "positive-orthant":
        return bool(np.min(x) > margin)
    return gen.domain.is_interior(x)


def _project_A(gen, A, b, warm, cfg):
    if isinstance(A, Parametric) and warm is not None and cfg.warm_start:
        return right_project(gen, A, b, warm=warm, options=cfg.projection)
    return right_project(gen, A, b, options=cfg.projection)


def _project_B(gen, B, a, warm, cfg):
    if isinstance(B, Parametric) and warm is not None and cfg.warm_start:
        return left_project(gen, B, a, warm=warm, options=cfg.projection)
    return left_project(gen, B, a, options=cfg.projection)


def step_rl(gen: Generator, A: SetSpec, B: SetSpec, b, warm_a=None, warm_b=None,
            config: RunConfig = None, a=None) -> Block:
    """One building block from ``b``: ``a+ = right projection onto A``, ``b+ = left projection onto B``.

    ``warm_a`` / ``warm_b`` are parameter vectors for parametric sets; the
    previous ``a`` (if known) is recorded so that the full decrease chain can
    be checked.
    """
    cfg = config or RunConfig()
    b = check_vector(b, "b", gen.dim)
    ra = _project_A(gen, A, b, warm_a, cfg)
    rb = _project_B(gen, B, ra.point, warm_b, cfg)
    D_b_a = float(divergence_batch(gen, b, a)) if a is not None else np.nan
    blk = Block(None if a is None else np.asarray(a, float), b, ra.point, rb.point,
                D_b_a, ra.divergence_value, rb.divergence_value, "rl")
    blk.a_plus_param, blk.b_plus_param = ra.parameter, rb.parameter
    return blk


def run(gen: Generator, A: SetSpec, B: SetSpec, start, config: RunConfig = None) -> Trace:
    """Alternate projections between ``A`` and ``B`` until a stop rule fires.

    Stop rules, checked in this order once ``min_iters`` pairs exist:

    * ``step-stagnation``: ``|b_k - b_{k-1}| + |a_k - a_{k-1}| < step_tol``;
    * ``divergence-stagnation``: ``|D_k - D_{k-1}| < div_tol (1 + D_0)`` on
      ``div_patience`` consecutive iterations while ``D_k`` itself is above
      that level (a vanishing divergence is left to the step rule);
    * ``max-iterations``.

    An iterate that leaves the interior of ``dom f`` ends the run with
    ``stop_reason = "domain-violation"``; the offending point is not kept.
    """
    cfg = config or RunConfig()
    start = check_vector(start, "start", gen.dim, copy=True)
    check_a = cfg.check_interiority in ("both", "a")
    check_b = cfg.check_interiority == "both"
    a_list, b_list, ap_list, bp_list = [], [], [], []
    reason, message = None, ""
    warm_a = warm_b = None

    def interior_ok(x, side):
        if side == "a" and check_a or side == "b" and check_b:
            return _check_interior(gen, x, cfg.interior_margin)
        return True

    def take_a(res):
        nonlocal warm_a
        a_list.append(res.point)
        ap_list.append(res.parameter)
        warm_a = res.parameter

    def take_b(res):
        nonlocal warm_b
        b_list.append(res.point)
        bp_list.append(res.parameter)
        warm_b = res.parameter

    rl = cfg.orientation == "rl"
    try:
        if rl:
            if not gen.domain.contains(start):
                raise DomainError("start lies outside dom f")
            res = _project_A(gen, A, start, None, cfg)
        else:
            if not gen.domain.is_interior(start):
                raise DomainError("an lr start must be interior to dom f")
            res = _initial_a(A, start)
        if not interior_ok(res.point, "a"):
            raise DomainError("first A iterate is not interior")
        take_a(res)
        resb = _project_B(gen, B, a_list[-1], None, cfg)
        if not interior_ok(resb.point, "b"):
            raise DomainError("first B iterate is not interior")
        take_b(resb)
        D0 = float(divergence_batch(gen, b_list[0], a_list[0]))
        dtol = cfg.div_tol * (1.0 + D0)
        D_prev = D0
        calm = 0
        k = 0
        if cfg.min_iters == 0 and D0 == 0 and np.array_equal(a_list[0], b_list[0]) \
                and (not rl or np.array_equal(a_list[0], start)):
            # the first pair is already a common point: every later block repeats it
            reason = "step-stagnation"
        while reason is None:
            if k >= cfg.max_iters:
                reason = "max-iterations"
                break
            ra = _project_A(gen, A, b_list[-1], warm_a, cfg)
            if not interior_ok(ra.point, "a"):
                reason, message = "domain-violation", f"a_{k + 1} left the interior of dom f"
                break
            rb = _project_B(gen, B, ra.point, warm_b, cfg)
            if not interior_ok(rb.point, "b"):
                reason, message = "domain-violation", f"b_{k + 1} left the interior of dom f"
                break
            step = np.linalg.norm(rb.point - b_list[-1]) + np.linalg.norm(ra.point - a_list[-1])
            take_a(ra)
            take_b(rb)
            k += 1
            D = rb.divergence_value
            calm = calm + 1 if abs(D - D_prev) < dtol and D > dtol else 0
            if k >= cfg.min_iters:
                if step < cfg.step_tol:
                    reason = "step-stagnation"
                    break
                if calm >= cfg.div_patience:
                    reason = "divergence-stagnation"
                    break
            D_prev = D
    except DomainError as exc:
        if not a_list or not b_list:
            raise
        reason, message = "domain-violation", str(exc)
    n = min(len(a_list), len(b_list))
    trace = Trace(gen, np.array(a_list[:n]), np.array(b_list[:n]),
                  start=start if rl else None, orientation=cfg.orientation,
                  stop_reason=reason, message=message,
                  a_param=_stack_params(ap_list[:n]), b_param=_stack_params(bp_list[:n]))
    return trace


def _initial_a(A, start):
    from .sets import ProjectionResult
    return ProjectionResult(point=np.asarray(start, float), divergence_value=0.0,
                            mode="start", parameter=None)


def _stack_params(params):
    """Stack projection parameters; rows without one (a given start point) become nan."""
    known = [p for p in params if p is not None]
    if not known:
        return None
    k = np.asarray(known[0]).size
    return np.array([np.full(k, np.nan) if p is None else np.asarray(p, float).ravel()
                     for p in params])


# -- gap -----------------------------------------------------------------------------

@dataclass
class GapEstimate:
    """Estimated gap ``r*`` with ``D(b_k, a_k) -> r*^2 / 2``.

    ``limit_pair`` is ``(b*, a*)`` when both step sequences stagnated, else
    ``None`` (the accumulation set may then be nontrivial).
    """

    r_star: float
    feasible: bool
    limit_pair: Optional[tuple] = None
    uncertainty: float = 0.0
    tail: tuple = (0, 0)


def detect_gap(trace: Trace, feas_tol: float = 1e-6, step_tol: float = 1e-8,
               min_length: int = 10, tail: int = 5) -> GapEstimate:
    """Gap of a trace from the mean of ``D(b_k, a_k)`` over its last ``tail`` rows.

    ``D(b_k, a_k)`` is nonincreasing, so the final rows are the sharpest
    estimate; ``uncertainty`` is the spread of ``r*`` over those rows.
    """
    n = len(trace)
    if n < min_length:
        raise TooShort(f"gap detection needs at least {min_length} pairs, got {n}")
    m = min(n, max(1, tail))
    D = np.maximum(np.asarray(trace.D_bk_ak[n - m:], float), 0.0)
    r_star = float(np.sqrt(2.0 * np.mean(D)))
    r = np.sqrt(2.0 * D)
    unc = float(np.max(r) - np.min(r))
    limit = None
    if trace.step_b[-1] <= step_tol and trace.step_a[-1] <= step_tol:
        limit = (trace.b[-1].copy(), trace.a[-1].copy())
    return GapEstimate(r_star, r_star <= feas_tol, limit, unc, (n - m, n))


# -- duality ---------------------------------------------------------------------------

def dual_transform(gen: Generator, trace: Trace) -> Trace:
    """Mirror a trace through ``grad f``.

    The image alternates between ``A* = grad f(B)`` and ``B* = grad f(A)``
    under the conjugate generator and reverses the orientation.  For an
    ``rl`` trace started at ``s``: ``a*_j = grad f(b_{j-1})`` (with
    ``b_{-1} = s``) and ``b*_j = grad f(a_j)``.  For an ``lr`` trace the
    dual starts at ``grad f(a_0)`` with ``a*_j = grad f(b_j)`` and
    ``b*_j = grad f(a_{j+1})``, so its last pair is dropped.
    """
    conj = conjugate(gen)
    n = len(trace)
    if n == 0:
        return Trace(conj, np.zeros((0, gen.dim)), np.zeros((0, gen.dim)),
                     orientation="lr" if trace.orientation == "rl" else "rl",
                     stop_reason=trace.stop_reason)
    pts = list(trace.a) + list(trace.b) + ([trace.start] if trace.start is not None else [])
    for x in pts:
        if not gen.domain.is_interior(x):
            raise DomainError("dual transform needs every trace point interior to dom f")
    Ga = np.array([gen.grad(x) for x in trace.a])
    Gb = np.array([gen.grad(x) for x in trace.b])
    if trace.orientation == "rl":
        if trace.start is None:
            raise ValueError("an rl trace needs its start point")
        s = gen.grad(trace.start)
        a_star = np.vstack([s[None, :], Gb[:-1]])
        return Trace(conj, a_star, Ga, orientation="lr", stop_reason=trace.stop_reason)
    return Trace(conj, Gb[:-1], Ga[1:], start=Ga[0], orientation="rl",
                 stop_reason=trace.stop_reason)


def euclidean_ap_reference(project_A, project_B, start, n_iter, orientation="rl"):
    """Classical alternating metric projections given the two projection maps."""
    x = np.asarray(start, float)
    a_seq, b_seq = [], []
    a = project_A(x) if orientation == "rl" else x
    for _ in range(n_iter):
        b = project_B(a)
        a_seq.append(a)
        b_seq.append(b)
        a = project_A(b)
    return np.array(a_seq), np.array(b_seq)
