"""Convergence diagnostics computed from traces.

Angles and three-point constants per building block, rate fits on error
sequences, transversality classification and a power-family probe of the
angle condition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .exceptions import TooShort
from .legendre import Generator, divergence_batch

ANGLE_FLOOR = 1e-14
ERROR_FLOOR = 1e-13
THETA_GRID = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


# -- angles ---------------------------------------------------------------------

def vector_angle(u, v, floor: float = ANGLE_FLOOR) -> float:
    """Angle between ``u`` and ``v`` in radians, ``nan`` if either is shorter than ``floor``.

    Uses ``2 atan2(|u|v| - v|u||, |u|v| + v|u||)``, which stays accurate for
    nearly parallel vectors.
    """
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if not (nu >= floor and nv >= floor) or not (np.isfinite(nu) and np.isfinite(nv)):
        return np.nan
    x, y = u * nv, v * nu
    return float(2 * np.arctan2(np.linalg.norm(x - y), np.linalg.norm(x + y)))


def angle_rl(block) -> float:
    """``angle(b - a+, b+ - a+)``."""
    return vector_angle(block.b - block.a_plus, block.b_plus - block.a_plus)


def angle_lr(gen: Generator, block) -> float:
    """``angle(grad f(a) - grad f(b), grad f(a+) - grad f(b))``."""
    if block.a is None:
        return np.nan
    with np.errstate(all="ignore"):
        u = gen.gradient_difference(block.a, block.b)
        v = gen.gradient_difference(block.a_plus, block.b)
    return vector_angle(u, v)


# -- three-point constants --------------------------------------------------

def _ell(D_left, D_right, D_base, inner, resolution):
    """``(D_left - D_right) / D_base`` evaluated through the three-point identity when possible."""
    if D_base == 0:
        return np.inf
    if D_base < resolution:
        return np.nan
    if np.isfinite(inner):
        return float(1.0 + inner / D_base)
    return float((D_left - D_right) / D_base)


def three_point_ell(gen: Generator, block, side: str = "rl", resolution: float = 1e-12) -> float:
    """Largest ``l`` in the three-point inequality of a block.

    ``rl``: ``D(b, a+) >= D(b+, a+) + l D(b, b+)``.
    ``lr``: ``D(b, a) >= D(b, a+) + l D(a+, a)``.

    ``+inf`` when the base divergence is exactly zero; ``nan`` when it is
    below ``resolution * max(1, D)`` and the quotient carries no digits.
    """
    if side == "rl":
        b, ap, bp = block.b, block.a_plus, block.b_plus
        D_base = float(divergence_batch(gen, b, bp)) if gen.domain.is_interior(bp) else np.nan
        if np.isnan(D_base):
            # b+ on the boundary: fall back to the divergences themselves
            return np.nan
        with np.errstate(all="ignore"):
            inner = -float(gen.gradient_difference(ap, bp) @ (b - bp))
        D_l, D_r = block.D_b_aplus, block.D_bplus_aplus
        scale = max(1.0, abs(D_r))
    elif side == "lr":
        if block.a is None:
            return np.nan
        a, b, ap = block.a, block.b, block.a_plus
        D_base = float(divergence_batch(gen, ap, a))
        with np.errstate(all="ignore"):
            inner = float(gen.gradient_difference(ap, a) @ (b - ap))
        D_l, D_r = block.D_b_a, block.D_b_aplus
        scale = max(1.0, abs(D_r))
    else:
        raise ValueError("side must be 'rl' or 'lr'")
    return _ell(D_l, D_r, D_base, inner, resolution * scale)


def annotate(trace, gen: Optional[Generator] = None):
    """Fill the ``angle_rl``, ``angle_lr`` and ``ell_rl`` columns of a trace in place."""
    gen = gen or trace.gen
    n = len(trace)
    rl = np.full(n, np.nan)
    lr = np.full(n, np.nan)
    ell = np.full(n, np.nan)
    for k, blk in enumerate(trace.blocks(), start=1):
        rl[k] = angle_rl(blk)
        lr[k] = angle_lr(gen, blk)
        ell[k] = three_point_ell(gen, blk, "rl")
    trace.angle_rl, trace.angle_lr, trace.ell_rl = rl, lr, ell
    return trace


# -- rate fits -------------------------------------------------------------------

@dataclass
class RateEstimate:
    """Fitted convergence speed.

    ``kind`` is ``finite-step``, ``R-linear`` (``q`` set) or ``sublinear``
    (``rho`` set, the exponent in ``O(k^-rho)``).
    """

    kind: str
    q: Optional[float] = None
    rho: Optional[float] = None
    fit_window: tuple = (0, 0)
    residual: float = 0.0
    offset: float = 0.0

    @property
    def theta(self) -> Optional[float]:
        """Exponent ``theta`` with ``rho = (1 - theta) / (2 theta - 1)``."""
        if self.rho is None:
            return None
        return (self.rho + 1) / (2 * self.rho + 1)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "q": self.q, "rho": self.rho,
                "fit_window": list(self.fit_window), "residual": self.residual,
                "offset": self.offset}


def _lsq(x, y):
    """Least-squares line; the residual is the rms error over the standard deviation of ``y``."""
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    r = y - A @ coef
    sd = float(np.std(y))
    return coef, float(np.sqrt(np.mean(r * r))) / sd if sd > 0 else 0.0


def _fit_with_offset(x, e, scale):
    """Fit ``log(e + delta)`` linearly in ``x`` with the best offset ``delta >= 0``.

    The offset absorbs the bias of measuring errors against the final
    iterate rather than the true limit.  Candidates are ``0`` and a log grid
    over ``[1e-6, 1e3] * scale``, refined around the best grid point.
    """
    def res(delta):
        return _lsq(x, np.log(e + delta))[1]

    grid = np.concatenate([[0.0], np.geomspace(1e-6, 1e3, 181) * scale])
    vals = np.array([res(d) for d in grid])
    i = int(np.argmin(vals))
    best_delta, best = float(grid[i]), float(vals[i])
    if 0 < i < grid.size - 1:
        out = minimize_scalar(res, bounds=(grid[i - 1], grid[i + 1]), method="bounded",
                              options={"xatol": grid[i] * 1e-8})
        if out.fun < best:
            best_delta, best = float(out.x), float(out.fun)
    coef, r = _lsq(x, np.log(e + best_delta))
    return coef, r, best_delta


def fit_rate(errors, min_length: int = 20, floor: float = ERROR_FLOOR,
             linear_margin: float = 1.05) -> RateEstimate:
    """Select between a linear and a power law for an error sequence.

    Entries at or below ``floor`` end the usable prefix.  The fit window is
    the last half of that prefix, at least ``min_length`` points (or all of
    it if shorter).  The linear model fits ``log e_k`` against ``k``, the
    power model against ``log(k + 1)``; the linear model wins unless its
    residual exceeds ``linear_margin`` times the power residual.  Both
    models carry a fitted offset (see :func:`_fit_with_offset`); residuals
    are rms log-errors relative to the spread of the fitted target.
    """
    e = np.asarray(errors, float).ravel()
    if e.size < min_length:
        raise TooShort(f"rate fitting needs at least {min_length} errors, got {e.size}")
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise ValueError("errors must be finite and nonnegative")
    low = np.flatnonzero(e <= floor)
    usable = int(low[0]) if low.size else e.size
    if usable < 5:
        return RateEstimate("finite-step", fit_window=(0, usable))
    start = max(0, min(usable - min_length, usable // 2))
    idx = np.arange(start, usable)
    y = e[idx]
    k = idx.astype(float)
    max_off = float(np.max(y))
    (slope_l, _), res_l, off_l = _fit_with_offset(k, y, max_off)
    (slope_p, _), res_p, off_p = _fit_with_offset(np.log(k + 1.0), y, max_off)
    window = (int(idx[0]), int(idx[-1]) + 1)
    if res_l <= linear_margin * res_p and slope_l < 0:
        return RateEstimate("R-linear", q=float(np.exp(slope_l)), fit_window=window,
                            residual=res_l, offset=off_l)
    return RateEstimate("sublinear", rho=float(-slope_p), fit_window=window,
                        residual=res_p, offset=off_p)


def errors_to_final(points) -> np.ndarray:
    """``|x_k - x_N|`` for the rows of ``points`` against the last row."""
    P = np.asarray(points, float)
    return np.linalg.norm(P - P[-1], axis=1)


# -- transversality ------------------------------------------------------------

def classify_transversality(trace, threshold: float = 1e-3, min_length: int = 10,
                            decay_slope: float = -0.1) -> str:
    """``transversal``, ``tangential`` or ``undetermined`` from the ``rl`` angles.

    The tail angles (last half) are regressed on ``log k``: a clearly
    negative slope means the angles vanish, ``tangential``.  Otherwise tail
    angles at or above ``threshold`` give ``transversal``.  A short trace is
    ``undetermined`` unless it reached an exact intersection point, which
    counts as ``transversal``.
    """
    if np.all(np.isnan(trace.angle_rl)):
        annotate(trace)
    k = np.arange(len(trace))
    ok = np.isfinite(trace.angle_rl) & (trace.angle_rl > 0)
    ang, kk = trace.angle_rl[ok], k[ok]
    if ang.size < min_length:
        # an exact intersection reached in finitely many steps is the extreme transversal case
        n = len(trace)
        if n >= 2 and trace.D_bk_ak[-1] == 0 and trace.step_b[-1] == 0 and trace.step_a[-1] == 0:
            return "transversal"
        return "undetermined"
    tail = slice(ang.size // 2, None)
    slope = np.polyfit(np.log(kk[tail] + 1.0), np.log(ang[tail]), 1)[0]
    if slope < decay_slope:
        return "tangential"
    if np.min(ang[tail]) >= threshold:
        return "transversal"
    return "undetermined"


# -- angle condition probe --------------------------------------------------------

@dataclass
class AngleConditionProbe:
    """Power-family witness of the angle condition along a trace.

    ``sigma_family`` is ``phi_prime_sq_inv_times_s_inv`` when the gap is
    zero and ``phi_prime_sq_inv`` otherwise.  ``gamma_by_theta`` maps every
    tested exponent to the smallest tail value; ``gamma_lower`` and
    ``theta`` are the best pair.
    """

    sigma_family: str
    theta_grid: list
    gamma_lower: float
    theta: float
    violations: int
    gamma_by_theta: dict = field(default_factory=dict)


def angle_condition_probe(trace, r_star: float, theta_grid=THETA_GRID, feas_tol: float = 1e-6,
                          min_length: int = 10, tail_fraction: float = 0.5) -> AngleConditionProbe:
    """Evaluate ``phi'(s)^2 D (1 - cos alpha)`` with ``phi'(s) = s^-theta`` on tail blocks.

    With zero gap ``s = D(b+, a+)`` and the quantity is ``(1 - cos alpha) s^(1 - 2 theta)``;
    with a positive gap ``s = D(b+, a+) - r*^2 / 2`` and the quantity is
    ``(1 - cos alpha) s^(-2 theta)``.  Blocks with undefined angle or
    ``s <= 0`` are skipped.
    """
    if len(trace) < min_length:
        raise TooShort(f"the probe needs at least {min_length} pairs")
    if np.all(np.isnan(trace.angle_rl)):
        annotate(trace)
    feasible = r_star <= feas_tol
    n = len(trace)
    lo = int(n * (1 - tail_fraction))
    alpha = trace.angle_rl[lo:]
    D = trace.D_bk_ak[lo:]
    s = D if feasible else D - 0.5 * r_star ** 2
    ok = np.isfinite(alpha) & (s > 0)
    alpha, s = alpha[ok], s[ok]
    one_minus_cos = 2.0 * np.sin(alpha / 2) ** 2
    grid = [float(t) for t in theta_grid]
    gammas = {}
    violations = 0
    for th in grid:
        with np.errstate(all="ignore"):
            q = one_minus_cos * (s ** (1 - 2 * th) if feasible else s ** (-2 * th))
        bad = ~np.isfinite(q) | (q <= 0)
        violations = max(violations, int(np.sum(bad)))
        gammas[th] = float(np.min(q[~bad])) if np.any(~bad) else 0.0
    best = max(grid, key=lambda t: gammas[t]) if grid else np.nan
    family = "phi_prime_sq_inv_times_s_inv" if feasible else "phi_prime_sq_inv"
    return AngleConditionProbe(family, grid, gammas.get(best, 0.0), best, violations, gammas)
