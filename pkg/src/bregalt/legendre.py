"""Legendre-type generators, Bregman divergences and conjugate duality.

A :class:`Generator` bundles a convex function ``f`` of Legendre type with its
gradient, Hessian, conjugate ``f*`` and the conjugate gradient (the inverse of
the gradient map).  All shipped generators are separable and supplied in
closed form, so divergences can be evaluated in a cancellation-free way.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import xlogy

from ._validation import check_points, check_vector
from .exceptions import DomainError, EmptySample

DOMAIN_MARGIN = 1e-12

INTERIOR = "interior"
BOUNDARY = "boundary"
OUTSIDE = "outside"


@dataclass(frozen=True)
class DomainSpec:
    """Domain of a generator and membership test for its interior.

    ``kind`` is one of ``all-space``, ``positive-orthant``, ``box`` or
    ``open-convex-via-membership``.  For the last kind a callable
    ``membership(x) -> {"interior", "boundary", "outside"}`` must be given.
    Points closer than ``margin`` to the boundary count as boundary points.
    """

    kind: str = "all-space"
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    membership_fn: Optional[Callable[[np.ndarray], str]] = None
    margin: float = DOMAIN_MARGIN

    def membership(self, x) -> str:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            return OUTSIDE
        if self.kind == "all-space":
            return INTERIOR
        if self.kind == "positive-orthant":
            lo = x.min() if x.size else 1.0
            if lo > self.margin:
                return INTERIOR
            return BOUNDARY if lo >= 0 else OUTSIDE
        if self.kind == "box":
            gap = min(np.min(x - self.lower), np.min(self.upper - x))
            if gap > self.margin:
                return INTERIOR
            return BOUNDARY if gap >= 0 else OUTSIDE
        if self.kind == "open-convex-via-membership":
            return self.membership_fn(x)
        raise ValueError(f"unknown domain kind {self.kind!r}")

    def is_interior(self, x) -> bool:
        return self.membership(x) == INTERIOR

    def contains(self, x) -> bool:
        return self.membership(x) != OUTSIDE


@dataclass(frozen=True)
class Generator:
    """A Legendre-type function ``f`` together with its conjugate.

    ``value``, ``grad`` and ``hessian`` evaluate ``f``; ``conj_value``,
    ``conj_grad`` and ``conj_hessian`` evaluate ``f*``.  ``div`` and
    ``conj_div`` are optional cancellation-free divergence formulas, and
    ``grad_diff`` / ``conj_grad_diff`` evaluate gradient differences
    accurately when the arguments are close.
    """

    name: str
    dim: int
    value: Callable
    grad: Callable
    hessian: Callable
    conj_value: Callable
    conj_grad: Callable
    conj_hessian: Callable
    domain: DomainSpec
    conj_domain: DomainSpec
    one_coercive: bool = False
    lipschitz_hessian: bool = True
    separable: bool = True
    div: Optional[Callable] = field(default=None, repr=False)
    conj_div: Optional[Callable] = field(default=None, repr=False)
    grad_diff: Optional[Callable] = field(default=None, repr=False)
    conj_grad_diff: Optional[Callable] = field(default=None, repr=False)
    params: dict = field(default_factory=dict)

    def hessian_diag(self, x):
        return np.diag(self.hessian(x))

    def gradient_difference(self, x, y):
        """Return ``grad(x) - grad(y)`` without catastrophic cancellation."""
        if self.grad_diff is not None:
            return self.grad_diff(np.asarray(x, float), np.asarray(y, float))
        return self.grad(x) - self.grad(y)

    @property
    def is_euclidean(self) -> bool:
        return self.name == "euclidean" or (
            self.name == "gaussian" and self.params.get("sigma", 1.0) == 1.0
        )


# -- closed-form building blocks ---------------------------------------------

def _series_h_log(u):
    # t log t - t + 1 at t = 1 + u, summed as sum_{n>=2} (-1)^n u^n / (n(n-1))
    out = np.zeros_like(u)
    term = u * u
    for n in range(2, 16):
        out += (-1) ** n * term / (n * (n - 1))
        term = term * u
    return out


def _series_h_exp(d):
    # exp(d) - 1 - d summed as sum_{n>=2} d^n / n!
    out = np.zeros_like(d)
    term = d * d / 2.0
    for n in range(2, 16):
        out += term
        term = term * d / (n + 1)
    return out


def _xlogx_div(x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    t = x / y
    u = (x - y) / y
    small = np.abs(u) < 1e-2
    h = np.where(small, _series_h_log(np.where(small, u, 0.0)), xlogy(t, t) - t + 1.0)
    return np.sum(y * h, axis=-1)


def _xlogx_grad_diff(x, y):
    return np.log1p((x - y) / y)


def _exp_div(x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    d = x - y
    small = np.abs(d) < 1e-2
    h = np.where(small, _series_h_exp(np.where(small, d, 0.0)), np.expm1(d) - d)
    return np.sum(np.exp(y) * h, axis=-1)


def _exp_grad_diff(x, y):
    return np.exp(y) * np.expm1(x - y)


_ORTHANT = DomainSpec("positive-orthant")
_ALL = DomainSpec("all-space")


def _xlogx_parts():
    return dict(
        value=lambda x: float(np.sum(xlogy(x, x) - x)),
        grad=lambda x: np.log(x),
        hessian=lambda x: np.diag(1.0 / np.asarray(x, float)),
        div=_xlogx_div,
        grad_diff=_xlogx_grad_diff,
        domain=_ORTHANT,
    )


def _exp_parts():
    return dict(
        value=lambda x: float(np.sum(np.exp(x))),
        grad=lambda x: np.exp(x),
        hessian=lambda x: np.diag(np.exp(np.asarray(x, float))),
        div=_exp_div,
        grad_diff=_exp_grad_diff,
        domain=_ALL,
    )


def _quad_parts(scale):
    return dict(
        value=lambda x: 0.5 * scale * float(np.dot(x, x)),
        grad=lambda x: scale * np.asarray(x, float),
        hessian=lambda x: scale * np.eye(np.asarray(x).shape[0]),
        div=lambda x, y: 0.5 * scale * np.sum((np.asarray(x, float) - y) ** 2, axis=-1),
        grad_diff=lambda x, y: scale * (x - y),
        domain=_ALL,
    )


def _pair(name, dim, primal, dual, **kw) -> Generator:
    return Generator(
        name=name, dim=dim,
        value=primal["value"], grad=primal["grad"], hessian=primal["hessian"],
        conj_value=dual["value"], conj_grad=dual["grad"], conj_hessian=dual["hessian"],
        domain=primal["domain"], conj_domain=dual["domain"],
        div=primal["div"], conj_div=dual["div"],
        grad_diff=primal["grad_diff"], conj_grad_diff=dual["grad_diff"],
        **kw,
    )


def euclidean(dim: int) -> Generator:
    """``f(x) = ||x||^2 / 2``; self-conjugate, gradient is the identity."""
    return _pair("euclidean", dim, _quad_parts(1.0), _quad_parts(1.0), one_coercive=True)


def negentropy(dim: int) -> Generator:
    """``f(x) = sum x_i log x_i - x_i`` on the nonnegative orthant.

    Its divergence is the (unnormalized) Kullback-Leibler divergence and its
    conjugate is ``f*(y) = sum exp(y_i)``.
    """
    return _pair("negentropy", dim, _xlogx_parts(), _exp_parts(), one_coercive=True)


def poisson(dim: int) -> Generator:
    """Log-normalizer ``f(theta) = sum exp(theta_i)`` of a product Poisson family.

    Natural parameter ``theta = log(rate)``; the conjugate is the negentropy.
    Not 1-coercive: ``f*`` is finite only on the nonnegative orthant.
    """
    return _pair("poisson", dim, _exp_parts(), _xlogx_parts(), one_coercive=False)


def gaussian(dim: int, sigma: float = 1.0) -> Generator:
    """Log-normalizer ``||theta||^2 / (2 sigma^2)`` of a Gaussian with known variance.

    The parameter ``theta`` is the mean, the sufficient statistic is
    ``x / sigma^2``.
    """
    sigma = float(sigma)
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    s2 = sigma * sigma
    return _pair("gaussian", dim, _quad_parts(1.0 / s2), _quad_parts(s2),
                 one_coercive=True, params={"sigma": sigma})


def expfam(family: str, dim: int, **params) -> Generator:
    """Log-normalizer generator of a shipped exponential family."""
    if family == "poisson":
        return poisson(dim)
    if family == "gaussian":
        return gaussian(dim, **params)
    raise ValueError(f"unknown exponential family {family!r}")


GENERATORS = {
    "euclidean": euclidean,
    "negentropy": negentropy,
    "poisson": poisson,
    "gaussian": gaussian,
}


def get_generator(name: str, dim: int, **params) -> Generator:
    """Look up a generator by its registered name."""
    if name.endswith("*"):
        return conjugate(get_generator(name[:-1], dim, **params))
    try:
        factory = GENERATORS[name]
    except KeyError:
        raise ValueError(
            f"unknown generator {name!r}; choose from {sorted(GENERATORS)}"
        ) from None
    return factory(dim, **params)


def conjugate(gen: Generator) -> Generator:
    """Swap the roles of ``f`` and ``f*``."""
    name = gen.name[:-1] if gen.name.endswith("*") else gen.name + "*"
    return replace(
        gen, name=name,
        value=gen.conj_value, grad=gen.conj_grad, hessian=gen.conj_hessian,
        conj_value=gen.value, conj_grad=gen.grad, conj_hessian=gen.hessian,
        domain=gen.conj_domain, conj_domain=gen.domain,
        div=gen.conj_div, conj_div=gen.div,
        grad_diff=gen.conj_grad_diff, conj_grad_diff=gen.grad_diff,
        one_coercive=gen.conj_domain.kind == "all-space",
    )


# -- operations ---------------------------------------------------------------

def _require_interior(gen, y, name):
    if not gen.domain.is_interior(y):
        raise DomainError(f"{name} must lie in the interior of dom f for {gen.name}")


def _require_domain(gen, x, name):
    if not gen.domain.contains(x):
        raise DomainError(f"{name} lies outside dom f for {gen.name}")


def _raw_divergence(gen, x, y) -> float:
    if gen.div is not None:
        val = gen.div(x, y)
    else:
        val = gen.value(x) - gen.value(y) - float(np.dot(gen.grad(y), x - y))
    return max(float(val), 0.0)


def divergence_batch(gen: Generator, X, Y) -> np.ndarray:
    """Row-wise divergences ``D(X[i], Y[i])`` with broadcasting.

    No domain validation is done; rows with an invalid argument give ``inf``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    X, Y = np.broadcast_arrays(X, Y)
    ok = _rows_ok(gen.domain, X, interior=False) & _rows_ok(gen.domain, Y, interior=True)
    out = np.full(X.shape[:-1], np.inf)
    if not np.any(ok):
        return out
    with np.errstate(all="ignore"):
        if gen.div is not None:
            vals = gen.div(X[ok], Y[ok])
        else:
            vals = np.array([_raw_divergence(gen, x, y) for x, y in zip(X[ok], Y[ok])])
    out[ok] = np.maximum(vals, 0.0)
    return out


def _rows_ok(dom, X, interior):
    if dom.kind == "all-space":
        return np.all(np.isfinite(X), axis=-1)
    if dom.kind == "positive-orthant":
        lo = X.min(axis=-1)
        return lo > dom.margin if interior else lo >= 0
    want = (INTERIOR,) if interior else (INTERIOR, BOUNDARY)
    return np.array([dom.membership(x) in want for x in X.reshape(-1, X.shape[-1])]
                    ).reshape(X.shape[:-1])


def divergence(gen: Generator, x, y) -> float:
    """Bregman divergence ``D(x, y) = f(x) - f(y) - <grad f(y), x - y>``.

    ``x`` may lie on the boundary of ``dom f``; ``y`` must be interior.
    """
    x = check_vector(x, "x", gen.dim)
    y = check_vector(y, "y", gen.dim)
    _require_interior(gen, y, "y")
    _require_domain(gen, x, "x")
    return _raw_divergence(gen, x, y)


def dual_divergence(gen: Generator, u, v) -> float:
    """Divergence of the conjugate generator, ``D*(u, v)``.

    Satisfies ``D(x, y) = D*(grad f(y), grad f(x))``.
    """
    return divergence(conjugate(gen), u, v)


def mobile_norm(gen: Generator, base, v) -> float:
    """Norm of ``v`` in the metric ``<v, hessian(base) v>``."""
    base = check_vector(base, "base", gen.dim)
    v = check_vector(v, "v", gen.dim)
    _require_interior(gen, base, "base")
    return float(np.sqrt(max(float(v @ gen.hessian(base) @ v), 0.0)))


@dataclass(frozen=True)
class NormBounds:
    """Constants comparing divergences, gradients and euclidean distances.

    On the sampled set ``m^2 |x-y|^2 <= D(x,y) <= M^2 |x-y|^2`` and
    ``l |x-y| <= |grad f(x) - grad f(y)| <= L |x-y|``.  The Hessian eigenvalue
    range gives ``m = sqrt(lambda_min / 2)`` and ``M = sqrt(lambda_max / 2)``;
    the pairwise ratios widen these when the sample demands it.
    """

    m: float
    M: float
    l: float
    L: float
    lambda_min: float
    lambda_max: float
    note: str = "m = sqrt(lambda_min/2), M = sqrt(lambda_max/2), l = lambda_min, L = lambda_max"


def estimate_norm_bounds(gen: Generator, sample) -> NormBounds:
    """Estimate :class:`NormBounds` from a sample of interior points."""
    pts = np.asarray(sample, dtype=float)
    if pts.size == 0:
        raise EmptySample("need at least one sample point")
    pts = check_points(pts, "sample", gen.dim)
    for p in pts:
        _require_interior(gen, p, "sample point")
    eig = np.concatenate([np.linalg.eigvalsh(gen.hessian(p)) for p in pts])
    lam_min, lam_max = float(eig.min()), float(eig.max())
    m2, M2 = lam_min / 2.0, lam_max / 2.0
    l, L = lam_min, lam_max
    for x, y in itertools.combinations(pts, 2):
        d2 = float(np.dot(x - y, x - y))
        if d2 == 0:
            continue
        ratio = _raw_divergence(gen, x, y) / d2
        m2, M2 = min(m2, ratio), max(M2, ratio)
        g = float(np.linalg.norm(gen.gradient_difference(x, y))) / np.sqrt(d2)
        l, L = min(l, g), max(L, g)
    return NormBounds(m=float(np.sqrt(m2)), M=float(np.sqrt(M2)), l=l, L=L,
                      lambda_min=lam_min, lambda_max=lam_max)
