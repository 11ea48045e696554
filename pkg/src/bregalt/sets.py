"""Projectable sets and their left / right Bregman projection oracles.

Left projection of ``a`` onto ``B`` minimizes ``D(b', a)`` over ``b'`` in
``B``; right projection of ``b`` onto ``A`` minimizes ``D(b, a')`` over ``a'``
in ``A``.  Closed forms are used where they exist; parametric sets are
handled by a warm-started projected gradient solver on the parameter box.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import minimize

from ._validation import check_points, check_vector
from .exceptions import DomainError, SolverFailure
from .legendre import Generator, conjugate, divergence_batch

GLOBAL_CLOSED_FORM = "global-closed-form"
GLOBAL_ENUMERATION = "global-enumeration"
LOCAL_SOLVER = "local-solver"


# -- parametric maps ----------------------------------------------------------

@dataclass(frozen=True)
class ParamMap:
    """A smooth map ``g: R^k -> R^d`` with Jacobian.

    ``fun`` is vectorized over leading axes; ``jac`` takes a single point and
    returns a ``(d, k)`` matrix.
    """

    fun: Callable
    jac: Callable
    k: int
    d: int


PARAMETRIC_MAPS: dict[str, Callable[..., ParamMap]] = {}


def register_map(name):
    def deco(factory):
        PARAMETRIC_MAPS[name] = factory
        return factory
    return deco


def get_map(name, params) -> ParamMap:
    try:
        factory = PARAMETRIC_MAPS[name]
    except KeyError:
        raise ValueError(f"unknown parametric map {name!r}; "
                         f"registered: {sorted(PARAMETRIC_MAPS)}") from None
    return factory(**params)


@register_map("line")
def _line(point, direction):
    p = np.asarray(point, float)
    v = np.asarray(direction, float)
    return ParamMap(lambda u: p + np.asarray(u)[..., :1] * v,
                    lambda u: v[:, None].copy(), 1, p.size)


@register_map("affine_map")
def _affine_map(base, matrix):
    b = np.asarray(base, float)
    V = np.atleast_2d(np.asarray(matrix, float))
    return ParamMap(lambda u: b + np.asarray(u) @ V, lambda u: V.T.copy(), V.shape[0], b.size)


@register_map("identity")
def _identity(dim):
    return ParamMap(lambda u: np.array(u, dtype=float), lambda u: np.eye(dim), dim, dim)


@register_map("binomial")
def _binomial():
    return _line(point=[0.0, 1.0], direction=[1.0, -1.0])


@register_map("circle")
def _circle(center=(0.0, 0.0), radius=1.0):
    c = np.asarray(center, float)

    def fun(u):
        t = np.asarray(u)[..., 0]
        return c + radius * np.stack([np.cos(t), np.sin(t)], axis=-1)

    def jac(u):
        return radius * np.array([[-np.sin(u[0])], [np.cos(u[0])]])

    return ParamMap(fun, jac, 1, 2)


@register_map("parabola")
def _parabola(coef=1.0, shift=0.0, offset=0.0):
    def fun(u):
        x = np.asarray(u)[..., 0]
        return np.stack([x, coef * (x - shift) ** 2 + offset], axis=-1)

    return ParamMap(fun, lambda u: np.array([[1.0], [2 * coef * (u[0] - shift)]]), 1, 2)


@register_map("power_graph")
def _power_graph(power=1.5, coef=1.0):
    def fun(u):
        x = np.asarray(u)[..., 0]
        return np.stack([x, coef * np.abs(x) ** power], axis=-1)

    def jac(u):
        x = u[0]
        return np.array([[1.0], [coef * power * np.sign(x) * abs(x) ** (power - 1)]])

    return ParamMap(fun, jac, 1, 2)


@register_map("squeezed_curve")
def _squeezed_curve(coef=0.25, center=1.0):
    # graph z -> coef (z - center)^4, touching the axis x_2 = 0 only at z = center
    def fun(u):
        z = np.asarray(u)[..., 0]
        return np.stack([z, coef * (z - center) ** 4], axis=-1)

    return ParamMap(fun, lambda u: np.array([[1.0], [4 * coef * (u[0] - center) ** 3]]), 1, 2)


@register_map("double_well")
def _double_well(depth=1.0, offset=0.0):
    def fun(u):
        x = np.asarray(u)[..., 0]
        return np.stack([x, depth * (x * x - 1) ** 2 + offset], axis=-1)

    return ParamMap(fun, lambda u: np.array([[1.0], [4 * depth * u[0] * (u[0] ** 2 - 1)]]), 1, 2)


@register_map("mexican_hat")
def _mexican_hat(height=1.0):
    # graph over the unit disk of height (1 - r^2)^2, vanishing on r = 1
    def fun(u):
        u = np.asarray(u)
        r2 = u[..., 0] ** 2 + u[..., 1] ** 2
        return np.stack([u[..., 0], u[..., 1], height * (1 - r2) ** 2], axis=-1)

    def jac(u):
        r2 = u[0] ** 2 + u[1] ** 2
        dh = -4 * height * (1 - r2)
        return np.array([[1.0, 0.0], [0.0, 1.0], [dh * u[0], dh * u[1]]])

    return ParamMap(fun, jac, 2, 3)


@register_map("softmax_curve")
def _softmax_curve(slope, intercept=None):
    s = np.asarray(slope, float)
    c = np.zeros_like(s) if intercept is None else np.asarray(intercept, float)

    def fun(u):
        z = np.asarray(u)[..., :1] * s + c
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def jac(u):
        q = fun(u)
        return (q * (s - q @ s))[:, None]

    return ParamMap(fun, jac, 1, s.size)


# -- set variants -------------------------------------------------------------

class SetSpec:
    """Base class of projectable set descriptions."""

    variant = "SetSpec"
    tol: float = 1e-9

    def to_dict(self) -> dict:
        raise NotImplementedError

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def contains(self, x, tol=None) -> bool:
        raise NotImplementedError


def _lst(a):
    return np.asarray(a, float).tolist()


@dataclass(eq=False)
class Affine(SetSpec):
    """``{base + t @ directions}``; rows of ``directions`` span the set."""

    base: np.ndarray
    directions: np.ndarray
    tol: float = 1e-9
    variant = "Affine"

    def __post_init__(self):
        self.base = check_vector(self.base, "base", copy=True)
        self.directions = np.atleast_2d(np.asarray(self.directions, float)).reshape(-1, self.base.size)
        q, _ = np.linalg.qr(self.directions.T)
        self._basis = q.T  # orthonormal rows
        comp = null_space(self.directions) if self.directions.size else np.eye(self.base.size)
        self._normal = comp.T  # orthonormal rows spanning the complement

    @property
    def dim(self):
        return self.base.size

    def euclidean_projection(self, x):
        r = np.asarray(x, float) - self.base
        return self.base + (r @ self._basis.T) @ self._basis

    def contains(self, x, tol=None):
        tol = self.tol if tol is None else tol
        x = np.asarray(x, float)
        return bool(np.linalg.norm(self._normal @ (x - self.base)) <= tol * (1 + np.linalg.norm(x)))

    def to_dict(self):
        return {"variant": self.variant, "base": _lst(self.base),
                "directions": _lst(self.directions), "tol": self.tol}


@dataclass(eq=False)
class Polyhedron(SetSpec):
    """``{x : normals @ x <= offsets}``."""

    normals: np.ndarray
    offsets: np.ndarray
    tol: float = 1e-9
    variant = "Polyhedron"

    def __post_init__(self):
        self.normals = np.atleast_2d(np.asarray(self.normals, float))
        self.offsets = check_vector(self.offsets, "offsets", self.normals.shape[0], copy=True)

    @property
    def dim(self):
        return self.normals.shape[1]

    def contains(self, x, tol=None):
        tol = self.tol if tol is None else tol
        return bool(np.all(self.normals @ np.asarray(x, float) <= self.offsets + tol))

    def to_dict(self):
        return {"variant": self.variant, "normals": _lst(self.normals),
                "offsets": _lst(self.offsets), "tol": self.tol}


@dataclass(eq=False)
class Ball(SetSpec):
    """Closed euclidean ball."""

    center: np.ndarray
    radius: float
    tol: float = 1e-9
    variant = "Ball"

    def __post_init__(self):
        self.center = check_vector(self.center, "center", copy=True)
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    @property
    def dim(self):
        return self.center.size

    def euclidean_projection(self, x):
        x = np.asarray(x, float)
        r = x - self.center
        n = np.linalg.norm(r)
        return x.copy() if n <= self.radius else self.center + r * (self.radius / n)

    def contains(self, x, tol=None):
        tol = self.tol if tol is None else tol
        return bool(np.linalg.norm(np.asarray(x, float) - self.center) <= self.radius + tol)

    def to_dict(self):
        return {"variant": self.variant, "center": _lst(self.center),
                "radius": float(self.radius), "tol": self.tol}


@dataclass(eq=False)
class Parametric(SetSpec):
    """Image ``g(U)`` of a closed parameter box under a registered map."""

    name: str
    params: dict = field(default_factory=dict)
    lower: np.ndarray = None
    upper: np.ndarray = None
    tol: float = 1e-9
    variant = "Parametric"

    def __post_init__(self):
        self.map = get_map(self.name, self.params)
        self.lower = check_vector(self.lower, "lower", self.map.k, copy=True)
        self.upper = check_vector(self.upper, "upper", self.map.k, copy=True)
        if np.any(self.lower > self.upper):
            raise ValueError("parameter box has lower > upper")

    @property
    def dim(self):
        return self.map.d

    @property
    def k(self):
        return self.map.k

    def point(self, u):
        return np.asarray(self.map.fun(np.asarray(u, float)), float)

    def clip(self, u):
        return np.clip(u, self.lower, self.upper)

    def grid(self, size=10_000):
        n = max(2, int(np.floor(size ** (1.0 / self.k))))
        if n ** self.k > size:
            # too many axes for a tensor grid: use a fixed pseudo-random design
            rng = np.random.default_rng(0)
            return rng.uniform(self.lower, self.upper, size=(size, self.k))
        axes = [np.linspace(lo, hi, n if hi > lo else 1) for lo, hi in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def contains(self, x, tol=None):
        tol = self.tol if tol is None else tol
        x = np.asarray(x, float)
        U = self.grid(4096)
        i = int(np.argmin(np.sum((self.point(U) - x) ** 2, axis=-1)))
        obj = _EuclidObjective(self, x)
        u, *_ = _spg(obj, U[i], self.lower, self.upper, tol=1e-12, max_iter=2000, strict=False)
        return bool(np.linalg.norm(self.point(u) - x) <= tol * (1 + np.linalg.norm(x)))

    def to_dict(self):
        return {"variant": self.variant, "name": self.name, "params": _jsonable(self.params),
                "lower": _lst(self.lower), "upper": _lst(self.upper), "tol": self.tol}


@dataclass(eq=False)
class FiniteSet(SetSpec):
    points: np.ndarray
    tol: float = 1e-9
    variant = "FiniteSet"

    def __post_init__(self):
        self.points = check_points(self.points, "points").copy()

    @property
    def dim(self):
        return self.points.shape[1]

    def contains(self, x, tol=None):
        tol = self.tol if tol is None else tol
        return bool(np.min(np.linalg.norm(self.points - np.asarray(x, float), axis=1)) <= tol)

    def to_dict(self):
        return {"variant": self.variant, "points": _lst(self.points), "tol": self.tol}


@dataclass(eq=False)
class DataSetKL(SetSpec):
    """Data set ``{p >= 0 : sum_{T(i)=j} p_i = p_hat_j for all j}``.

    ``T[i]`` is the group (observed outcome) of index ``i``.  With
    ``normalized=True`` the targets must form a probability vector.
    """

    T: np.ndarray
    p_hat: np.ndarray
    normalized: bool = True
    tol: float = 1e-9
    variant = "DataSetKL"

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=int).ravel()
        self.p_hat = check_vector(self.p_hat, "p_hat", copy=True)
        if np.any(self.p_hat <= 0):
            raise ValueError("p_hat must be strictly positive")
        if self.normalized and abs(self.p_hat.sum() - 1) > 1e-12 * self.p_hat.size:
            raise ValueError("p_hat must sum to one")
        if self.T.min() < 0 or self.T.max() >= self.p_hat.size:
            raise ValueError("T maps outside the outcome index range")
        if np.any(np.bincount(self.T, minlength=self.p_hat.size) == 0):
            raise ValueError("every outcome needs at least one preimage under T")

    @property
    def dim(self):
        return self.T.size

    def group_sums(self, p):
        return np.bincount(self.T, weights=np.asarray(p, float), minlength=self.p_hat.size)

    def contains(self, x, tol=None):
        tol = self.tol if tol is None else tol
        x = np.asarray(x, float)
        return bool(np.all(x >= -tol) and np.max(np.abs(self.group_sums(x) - self.p_hat)) <= tol)

    def as_affine(self) -> Affine:
        """The same set written as an affine subspace (ignoring ``p >= 0``)."""
        C = np.zeros((self.p_hat.size, self.T.size))
        C[self.T, np.arange(self.T.size)] = 1.0
        counts = np.bincount(self.T)
        base = self.p_hat[self.T] / counts[self.T]
        return Affine(base, null_space(C).T, tol=self.tol)

    def to_dict(self):
        return {"variant": self.variant, "T": self.T.tolist(), "p_hat": _lst(self.p_hat),
                "normalized": self.normalized, "tol": self.tol}


@dataclass(eq=False)
class DualAffine(SetSpec):
    """``{x in G : grad f(x)[pinned] = values}``: affine in dual coordinates."""

    pinned: np.ndarray
    values: np.ndarray
    n: int
    tol: float = 1e-9
    variant = "DualAffine"

    def __post_init__(self):
        self.pinned = np.asarray(self.pinned, dtype=int).ravel()
        self.values = check_vector(self.values, "values", self.pinned.size, copy=True)
        self.free = np.setdiff1d(np.arange(self.n), self.pinned)

    @property
    def dim(self):
        return self.n

    def pin(self, eta):
        out = np.array(eta, dtype=float)
        out[self.pinned] = self.values
        return out

    def dual_affine(self, anchor) -> Affine:
        """The dual image ``grad f(A)`` as an :class:`Affine` set."""
        return Affine(self.pin(anchor), np.eye(self.n)[self.free], tol=self.tol)

    def contains(self, x, tol=None, gen: Optional[Generator] = None):
        tol = self.tol if tol is None else tol
        if gen is None:
            raise ValueError("DualAffine membership needs the generator")
        return bool(np.max(np.abs(gen.grad(x)[self.pinned] - self.values), initial=0.0) <= tol)

    def to_dict(self):
        return {"variant": self.variant, "pinned": self.pinned.tolist(),
                "values": _lst(self.values), "n": self.n, "tol": self.tol}


_VARIANTS = {cls.variant: cls for cls in
             (Affine, Polyhedron, Ball, Parametric, FiniteSet, DataSetKL, DualAffine)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return np.asarray(obj).tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def set_from_dict(d: dict) -> SetSpec:
    """Build a :class:`SetSpec` from its JSON form ``{"variant": ..., ...}``."""
    d = dict(d)
    try:
        cls = _VARIANTS[d.pop("variant")]
    except KeyError as exc:
        raise ValueError(f"unknown or missing set variant: {exc}") from None
    return cls(**d)


# -- results and options ----------------------------------------------------

@dataclass
class ProjectionResult:
    point: np.ndarray
    divergence_value: float
    mode: str
    iterations: int = 0
    grad_norm: float = 0.0
    parameter: Optional[np.ndarray] = None
    index: Optional[int] = None
    boundary: bool = False

    @property
    def solver_report(self) -> dict:
        return {"iterations": self.iterations, "final_gradient_norm": self.grad_norm,
                "boundary": self.boundary}


@dataclass(frozen=True)
class ProjectionOptions:
    """Inner solver settings.

    ``multistart`` random restarts are added to the grid search of global
    projections onto parametric sets; ``grid_size`` bounds that grid.  With
    ``strict=False`` the solver returns its last iterate after ``max_iter``
    steps instead of raising; accepted steps never increase the objective.
    ``method`` picks the box solver for parametric sets: ``spg`` (projected
    gradient with Barzilai-Borwein steps) or ``lbfgsb`` (scipy's bounded
    quasi-Newton method, better suited to many parameters).
    """

    tol: float = 1e-10
    max_iter: int = 10_000
    grid_size: int = 10_000
    multistart: int = 0
    seed: int = 0
    polish: bool = True
    strict: bool = True
    method: str = "spg"

    def __post_init__(self):
        if self.method not in ("spg", "lbfgsb"):
            raise ValueError("method must be 'spg' or 'lbfgsb'")


DEFAULT_OPTIONS = ProjectionOptions()


# -- inner solver -------------------------------------------------------------

class _Objective:
    """Objective over a parameter box returning value and gradient."""

    def __call__(self, u):
        raise NotImplementedError


class _EuclidObjective(_Objective):
    def __init__(self, S, x):
        self.S, self.x = S, x

    def __call__(self, u):
        r = self.S.point(u) - self.x
        return 0.5 * float(r @ r), self.S.map.jac(u).T @ r


class _LeftObjective(_Objective):
    """``u -> D(g(u), a)``."""

    def __init__(self, gen, S, a):
        self.gen, self.S, self.a = gen, S, a

    def __call__(self, u):
        x = self.S.point(u)
        if not self.gen.domain.contains(x):
            return np.inf, None
        val = float(divergence_batch(self.gen, x, self.a))
        with np.errstate(all="ignore"):
            gx = self.gen.gradient_difference(x, self.a)
        J = self.S.map.jac(u)
        # a boundary coordinate gives an infinite partial; it only matters where J is nonzero
        terms = np.where(J == 0, 0.0, J * gx[:, None])
        return val, terms.sum(axis=0)


class _RightObjective(_Objective):
    """``u -> D(b, g(u))``."""

    def __init__(self, gen, S, b):
        self.gen, self.S, self.b = gen, S, b

    def __call__(self, u):
        x = self.S.point(u)
        if not self.gen.domain.is_interior(x):
            return np.inf, None
        val = float(divergence_batch(self.gen, self.b, x))
        gx = -self.gen.hessian(x) @ (self.b - x)
        return val, self.S.map.jac(u).T @ gx


def _pg_norm(u, g, lo, hi):
    return float(np.linalg.norm(np.clip(u - g, lo, hi) - u))


def _spg(obj, u0, lo, hi, tol=1e-10, max_iter=10_000, strict=True):
    """Monotone projected gradient with Barzilai-Borwein steps and Armijo backtracking.

    Returns ``(u, value, iterations, projected_gradient_norm)``.  When the
    function value can no longer resolve progress, steps that reduce the
    projected gradient are still accepted.
    """
    u = np.clip(np.asarray(u0, float), lo, hi)
    f, g = obj(u)
    if not np.isfinite(f):
        raise DomainError("solver start lies outside the admissible region")
    pg = _pg_norm(u, g, lo, hi)
    step = 1.0 / max(np.linalg.norm(g), 1.0)
    it = 0
    while pg > tol and it < max_iter:
        it += 1
        t = step
        accepted = False
        while t > 1e-30:
            un = np.clip(u - t * g, lo, hi)
            d = un - u
            if not np.any(d):
                break
            fn, gn = obj(un)
            if np.isfinite(fn):
                if fn <= f + 1e-4 * float(g @ d):
                    accepted = True
                    break
                if abs(fn - f) <= 1e-13 * (1 + abs(f)) and _pg_norm(un, gn, lo, hi) < pg:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            break
        s, y = un - u, gn - g
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 0 else 10 * t
        step = min(max(step, 1e-20), 1e20)
        u, f, g = un, fn, gn
        pg = _pg_norm(u, g, lo, hi)
    if strict and pg > tol and it >= max_iter:
        raise SolverFailure(f"projected gradient stopped after {it} iterations, |pg| = {pg:.3e}")
    return u, f, it, pg


def _newton_polish(obj, u, lo, hi, f, steps=8):
    """A few projected Newton steps using a finite-difference Hessian of the gradient."""
    _, g = obj(u)
    pg = _pg_norm(u, g, lo, hi)
    k = u.size
    for _ in range(steps):
        if pg == 0:
            break
        free = ~(((u <= lo) & (g > 0)) | ((u >= hi) & (g < 0)))
        if not np.any(free):
            break
        H = np.empty((k, k))
        for i in range(k):
            h = 1e-6 * max(1.0, abs(u[i]))
            e = np.zeros(k)
            e[i] = h
            up, um = np.clip(u + e, lo, hi), np.clip(u - e, lo, hi)
            _, gp = obj(up)
            _, gm = obj(um)
            if gp is None or gm is None or up[i] == um[i]:
                return u, f, pg
            with np.errstate(invalid="ignore"):
                diff = gp - gm
            if not np.all(np.isfinite(diff)):
                return u, f, pg
            H[:, i] = diff / (up[i] - um[i])
        H = 0.5 * (H + H.T)
        Hf = H[np.ix_(free, free)]
        try:
            w = np.linalg.eigvalsh(Hf)
            if w.min() <= 0:
                break
            d = np.zeros(k)
            d[free] = -np.linalg.solve(Hf, g[free])
        except np.linalg.LinAlgError:
            break
        un = np.clip(u + d, lo, hi)
        fn, gn = obj(un)
        if gn is None or not np.isfinite(fn):
            break
        pgn = _pg_norm(un, gn, lo, hi)
        if pgn >= pg or fn > f + 1e-13 * (1 + abs(f)):
            break
        u, f, g, pg = un, fn, gn, pgn
    return u, f, pg


def _lbfgsb(obj, u0, lo, hi, opts):
    """Bounded quasi-Newton descent; never returns a point worse than ``u0``."""
    u0 = np.clip(np.asarray(u0, float), lo, hi)
    f0, g0 = obj(u0)
    if not np.isfinite(f0):
        raise DomainError("solver start lies outside the admissible region")

    def fun(u):
        f, g = obj(u)
        if not np.isfinite(f) or g is None:
            return np.inf, np.zeros_like(u)
        return f, g

    res = minimize(fun, u0, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                   options={"maxiter": opts.max_iter, "ftol": 0.0, "gtol": opts.tol,
                            "maxcor": 20})
    u = np.clip(res.x, lo, hi)
    f, g = obj(u)
    if not f <= f0:
        u, f, g = u0, f0, g0
    pg = _pg_norm(u, g, lo, hi)
    if opts.strict and pg > opts.tol and res.nit >= opts.max_iter:
        raise SolverFailure(f"L-BFGS-B stopped after {res.nit} iterations, |pg| = {pg:.3e}")
    return u, f, int(res.nit), pg


def _solve_box(obj, u0, lo, hi, opts):
    if opts.method == "lbfgsb":
        u, f, it, pg = _lbfgsb(obj, u0, lo, hi, opts)
    else:
        u, f, it, pg = _spg(obj, u0, lo, hi, opts.tol, opts.max_iter, opts.strict)
    if opts.polish and u.size <= 8:
        u, f, pg = _newton_polish(obj, u, lo, hi, f)
    return u, f, it, pg


# -- parametric projections -------------------------------------------------

def _grid_values(gen, S, x, side, U):
    P = S.point(U)
    if side == "left":
        return divergence_batch(gen, P, x[None, :])
    return divergence_batch(gen, x[None, :], P)


def _parametric_project(gen, S, x, side, warm, opts):
    obj = _LeftObjective(gen, S, x) if side == "left" else _RightObjective(gen, S, x)
    if warm is not None:
        u0 = S.clip(check_vector(warm, "warm_start", S.k))
        f0, _ = obj(u0)
        if not np.isfinite(f0):
            raise DomainError("warm start maps outside the generator domain")
        u, f, it, pg = _solve_box(obj, u0, S.lower, S.upper, opts)
        mode = LOCAL_SOLVER
    else:
        U = S.grid(opts.grid_size)
        vals = _grid_values(gen, S, x, side, U)
        order = np.argsort(vals, kind="stable")
        starts = [U[i] for i in order[:3] if np.isfinite(vals[i])]
        if opts.multistart:
            rng = np.random.default_rng(opts.seed)
            starts += list(rng.uniform(S.lower, S.upper, size=(opts.multistart, S.k)))
        if not starts:
            raise DomainError("no grid point of the parametric set lies in the domain")
        best = None
        for u0 in starts:
            try:
                cand = _solve_box(obj, u0, S.lower, S.upper, opts)
            except DomainError:
                continue
            if best is None or cand[1] < best[1]:
                best = cand
        u, f, it, pg = best
        mode = GLOBAL_ENUMERATION
    point = S.point(u)
    return ProjectionResult(point=point, divergence_value=float(f), mode=mode, iterations=it,
                            grad_norm=pg, parameter=u,
                            boundary=not gen.domain.is_interior(point))


# -- convex sets via dual Newton ----------------------------------------------

def _affine_left_dual(gen, C, c, a, tol=1e-14, max_iter=100):
    """Left projection onto ``{x : C x = c}`` by Newton's method on the dual.

    Requires ``f*`` to be finite everywhere so that every dual iterate maps
    back into the interior.
    """
    ga = gen.grad(a)
    mu = np.zeros(C.shape[0])

    def primal(mu):
        return gen.conj_grad(ga - C.T @ mu)

    def dual_obj(mu):
        return -gen.conj_value(ga - C.T @ mu) - float(mu @ c)

    x = primal(mu)
    it = 0
    for it in range(1, max_iter + 1):
        r = C @ x - c
        if np.linalg.norm(r) <= tol * (1 + np.linalg.norm(c)):
            break
        J = C @ gen.conj_hessian(ga - C.T @ mu) @ C.T
        step = np.linalg.solve(J, r)
        # dual ascent direction: grad psi = C x - c, Hessian -J
        t, base = 1.0, dual_obj(mu)
        while t > 1e-12:
            mun = mu + t * step
            if dual_obj(mun) >= base - 1e-15 * (1 + abs(base)):
                break
            t *= 0.5
        mu = mu + t * step
        x = primal(mu)
    return x, it


def _affine_left_primal(gen, S: Affine, a, opts):
    V = S._basis
    x0 = S.euclidean_projection(a)
    if not gen.domain.is_interior(x0):
        raise DomainError("cannot find an interior starting point on the affine set")
    t = np.zeros(V.shape[0])
    base = x0
    it = 0
    for it in range(1, 200):
        x = base + t @ V
        g = V @ gen.gradient_difference(x, a)
        if np.linalg.norm(g) <= opts.tol * 1e-3:
            break
        H = V @ gen.hessian(x) @ V.T
        d = -np.linalg.solve(H, g)
        f = float(divergence_batch(gen, x, a))
        s = 1.0
        while s > 1e-16:
            xn = base + (t + s * d) @ V
            if gen.domain.is_interior(xn) and divergence_batch(gen, xn, a) <= f + 1e-4 * s * float(g @ d) + 1e-15 * (1 + f):
                break
            s *= 0.5
        t = t + s * d
    return base + t @ V, it


def _polyhedron_left(gen, S: Polyhedron, a, opts):
    """Left projection onto a polyhedron through its dual over ``lambda >= 0``."""
    N, c = S.normals, S.offsets
    ga = gen.grad(a)
    m = N.shape[0]

    def negdual(lam):
        z = ga - N.T @ lam
        x = gen.conj_grad(z)
        return gen.conj_value(z) + float(lam @ c), -(N @ x - c)

    class _Obj(_Objective):
        def __call__(self, lam):
            return negdual(lam)

    lo, hi = np.zeros(m), np.full(m, np.inf)
    lam, _, it, _ = _spg(_Obj(), np.zeros(m), lo, hi, tol=1e-13, max_iter=opts.max_iter)
    x = gen.conj_grad(ga - N.T @ lam)
    active = (lam > 0) | (N @ x - c > -1e-9)
    if np.any(active):
        # refine on the active constraints: equality-constrained projection
        Ca, ca = N[active], c[active]
        xa, _ = _affine_left_dual(gen, Ca, ca, a)
        if np.all(N @ xa <= c + 1e-12):
            x = xa
    return x, it


def _slsqp(gen, S, x, side, warm, opts):
    """Local fallback for convex sets without a dual closed form."""
    if side == "left":
        def fun(z):
            return float(divergence_batch(gen, z, x))

        def jac(z):
            return gen.gradient_difference(z, x)
    else:
        def fun(z):
            return float(divergence_batch(gen, x, z))

        def jac(z):
            return -gen.hessian(z) @ (x - z)
    cons = []
    if isinstance(S, Polyhedron):
        cons.append({"type": "ineq", "fun": lambda z: S.offsets - S.normals @ z,
                     "jac": lambda z: -S.normals})
    elif isinstance(S, Ball):
        cons.append({"type": "ineq",
                     "fun": lambda z: np.array([S.radius ** 2 - np.sum((z - S.center) ** 2)]),
                     "jac": lambda z: -2 * (z - S.center)[None, :]})
    elif isinstance(S, Affine):
        cons.append({"type": "eq", "fun": lambda z: S._normal @ (z - S.base),
                     "jac": lambda z: S._normal})
    elif isinstance(S, DataSetKL):
        C = np.zeros((S.p_hat.size, S.T.size))
        C[S.T, np.arange(S.T.size)] = 1.0
        cons.append({"type": "eq", "fun": lambda z: C @ z - S.p_hat, "jac": lambda z: C})
    z0 = np.asarray(warm if warm is not None else x, float)
    bounds = None
    if gen.domain.kind == "positive-orthant":
        bounds = [(1e-12, None)] * z0.size
        z0 = np.maximum(z0, 1e-6)
    res = minimize(fun, z0, jac=jac, constraints=cons, bounds=bounds, method="SLSQP",
                   options={"ftol": 1e-16, "maxiter": 1000})
    if not res.success and res.status not in (4, 8):
        raise SolverFailure(f"SLSQP failed: {res.message}")
    return np.asarray(res.x, float), int(res.nit)


# -- public projections -------------------------------------------------------

def _result(gen, point, x, side, mode, it=0, **kw):
    point = np.asarray(point, float)
    if side == "left":
        val = float(divergence_batch(gen, point, x))
    else:
        val = float(divergence_batch(gen, x, point))
    return ProjectionResult(point=point, divergence_value=val, mode=mode, iterations=it,
                            boundary=not gen.domain.is_interior(point), **kw)


def _finite_project(gen, S: FiniteSet, x, side):
    vals = _grid_values(gen, _AsRows(S.points), x, side, None)
    if not np.any(np.isfinite(vals)):
        raise DomainError("no point of the finite set is admissible")
    i = int(np.argmin(vals))  # first minimizer: ties go to the lowest index
    return _result(gen, S.points[i], x, side, GLOBAL_ENUMERATION, index=i)


class _AsRows:
    def __init__(self, pts):
        self.pts = pts

    def point(self, _):
        return self.pts


def left_project(gen: Generator, B: SetSpec, a, warm=None,
                 options: ProjectionOptions = DEFAULT_OPTIONS) -> ProjectionResult:
    """Minimize ``D(b', a)`` over ``b'`` in ``B``.

    ``warm`` (parameter vector) switches parametric sets to a local descent
    started there; without it a grid search seeds the solver.
    """
    a = check_vector(a, "a", gen.dim)
    if not gen.domain.is_interior(a):
        raise DomainError("left projection needs a point in the interior of dom f")
    if B.dim != gen.dim:
        raise ValueError(f"set dimension {B.dim} does not match generator dimension {gen.dim}")
    if isinstance(B, FiniteSet):
        return _finite_project(gen, B, a, "left")
    if isinstance(B, Parametric):
        return _parametric_project(gen, B, a, "left", warm, options)
    if isinstance(B, DataSetKL):
        if gen.name == "negentropy":
            return _result(gen, e_step(B, a), a, "left", GLOBAL_CLOSED_FORM)
        return left_project(gen, B.as_affine(), a, options=options)
    if isinstance(B, DualAffine):
        if not gen.separable:
            raise NotImplementedError("dual-affine left projection needs a separable generator")
        # grad f(B) is affine; the conjugate right projection keeps the free coordinates
        eta = B.pin(gen.grad(a))
        if not gen.conj_domain.is_interior(eta):
            raise DomainError("pinned dual values leave the conjugate domain")
        return _result(gen, gen.conj_grad(eta), a, "left", GLOBAL_CLOSED_FORM)
    if gen.is_euclidean:
        if isinstance(B, (Affine, Ball)):
            return _result(gen, B.euclidean_projection(a), a, "left", GLOBAL_CLOSED_FORM)
    if isinstance(B, Affine):
        if gen.conj_domain.kind == "all-space":
            x, it = _affine_left_dual(gen, B._normal, B._normal @ B.base, a)
        else:
            x, it = _affine_left_primal(gen, B, a, options)
        return _result(gen, B.euclidean_projection(x), a, "left", GLOBAL_CLOSED_FORM, it)
    if isinstance(B, Polyhedron) and gen.conj_domain.kind == "all-space":
        x, it = _polyhedron_left(gen, B, a, options)
        return _result(gen, x, a, "left", GLOBAL_CLOSED_FORM, it)
    x, it = _slsqp(gen, B, a, "left", warm, options)
    return _result(gen, x, a, "left", LOCAL_SOLVER, it)


def right_project(gen: Generator, A: SetSpec, b, warm=None,
                  options: ProjectionOptions = DEFAULT_OPTIONS) -> ProjectionResult:
    """Minimize ``D(b, a')`` over ``a'`` in ``A``.

    Dual-affine sets use the dual route: map ``b`` by ``grad f``, left
    project under the conjugate onto the affine image, map back by
    ``grad f*``.
    """
    b = check_vector(b, "b", gen.dim)
    if not gen.domain.contains(b):
        raise DomainError("right projection needs a point in dom f")
    if A.dim != gen.dim:
        raise ValueError(f"set dimension {A.dim} does not match generator dimension {gen.dim}")
    if isinstance(A, FiniteSet):
        return _finite_project(gen, A, b, "right")
    if isinstance(A, Parametric):
        return _parametric_project(gen, A, b, "right", warm, options)
    if isinstance(A, DualAffine):
        if not gen.domain.is_interior(b):
            raise DomainError("the dual route needs b in the interior of dom f")
        u = gen.grad(b)
        conj = conjugate(gen)
        if gen.separable:
            eta = A.pin(u)
            mode, it = GLOBAL_CLOSED_FORM, 0
        else:
            res = left_project(conj, A.dual_affine(u), u, options=options)
            eta, mode, it = res.point, res.mode, res.iterations
        if not conj.domain.is_interior(eta):
            raise DomainError("pinned dual values leave the conjugate domain")
        return _result(gen, gen.conj_grad(eta), b, "right", mode, it)
    if gen.is_euclidean and isinstance(A, (Affine, Ball)):
        return _result(gen, A.euclidean_projection(b), b, "right", GLOBAL_CLOSED_FORM)
    if gen.is_euclidean and isinstance(A, Polyhedron):
        res = left_project(gen, A, b, options=options)
        return _result(gen, res.point, b, "right", res.mode, res.iterations)
    if isinstance(A, Affine):
        S = Parametric("affine_map", {"base": A.base, "matrix": A._basis},
                       lower=np.full(A._basis.shape[0], -1e12), upper=np.full(A._basis.shape[0], 1e12))
        x0 = A.euclidean_projection(b if warm is None else warm)
        if not gen.domain.is_interior(x0):
            # the left projection of an interior point is interior
            x0 = left_project(gen, A, b if gen.domain.is_interior(b) else A.base,
                              options=options).point
        t0 = (x0 - A.base) @ A._basis.T
        res = _parametric_project(gen, S, b, "right", t0, options)
        res.parameter = None
        return res
    x, it = _slsqp(gen, A, b, "right", warm, options)
    return _result(gen, x, b, "right", LOCAL_SOLVER, it)


def local_right_project(gen: Generator, A: Parametric, b, warm_start,
                        options: ProjectionOptions = DEFAULT_OPTIONS) -> ProjectionResult:
    """Right projection by descent from ``warm_start``.

    The result is a stationary point of ``u -> D(b, g(u))`` on the parameter
    box with ``D(b, result) <= D(b, g(warm_start))``.
    """
    if not isinstance(A, Parametric):
        raise TypeError("local projections need a Parametric set")
    return right_project(gen, A, b, warm=warm_start, options=options)


def local_left_project(gen: Generator, B: Parametric, a, warm_start,
                       options: ProjectionOptions = DEFAULT_OPTIONS) -> ProjectionResult:
    if not isinstance(B, Parametric):
        raise TypeError("local projections need a Parametric set")
    return left_project(gen, B, a, warm=warm_start, options=options)


def e_step(B: DataSetKL, q) -> np.ndarray:
    """Closed-form KL left projection onto a data set.

    ``p_i = p_hat[T(i)] * q_i / sum_{T(i') = T(i)} q_i'``.
    """
    q = np.asarray(q, float)
    if np.any(q <= 0):
        raise DomainError("q must be strictly positive")
    sums = B.group_sums(q)
    if np.any(sums <= 0):
        raise DomainError("a group of q has zero mass")
    return B.p_hat[B.T] * q / sums[B.T]
