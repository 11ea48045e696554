"""Bregman balls, geodesics, proximal normals, curvature bounds and reach."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import brentq, minimize

from ._validation import check_positive_int, check_vector
from .exceptions import DegenerateBall, DomainError, NotProjectedOn
from .legendre import Generator, divergence_batch
from .sets import FiniteSet, Parametric, SetSpec

LAMBDA_CAP = 1e6


@dataclass(frozen=True)
class BregmanBall:
    """Left ball ``{x : D(x, center) <= r^2/2}`` or right ball ``{x : D(center, x) <= r^2/2}``."""

    side: str
    center: np.ndarray
    radius: float

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise ValueError("side must be 'left' or 'right'")
        if not self.radius >= 0:
            raise ValueError("radius must be nonnegative")
        object.__setattr__(self, "center", check_vector(self.center, "center", copy=True))

    @property
    def level(self) -> float:
        return 0.5 * self.radius ** 2

    def divergence_to(self, gen: Generator, X) -> np.ndarray:
        X = np.asarray(X, float)
        if self.side == "left":
            return divergence_batch(gen, X, self.center)
        return divergence_batch(gen, self.center, X)

    def contains(self, gen: Generator, X, tol: float = 1e-12):
        """Membership of one point or of the rows of ``X``."""
        return self.divergence_to(gen, X) <= self.level + tol


@dataclass(frozen=True)
class CurvatureBounds:
    kappa_lo: float
    kappa_hi: float

    @property
    def inner_radius(self) -> float:
        return 1.0 / self.kappa_hi

    @property
    def outer_radius(self) -> float:
        return 1.0 / self.kappa_lo


@dataclass
class ReachEstimate:
    """Sample-based estimate of a left Bregman reach.

    ``history`` lists ``(lambda, radius, empty_interior)`` for every tested
    geodesic parameter.  ``caveat`` is set when the estimate relies on
    assumptions the generator does not declare.
    """

    value: float
    direction: np.ndarray
    method: str = "bisection-on-geodesic"
    samples_used: int = 0
    parameter: float = np.nan
    history: list = field(default_factory=list)
    caveat: Optional[str] = None


# -- geodesics and normals ----------------------------------------------------

def left_geodesic(gen: Generator, b_plus, a_plus, lam: float) -> np.ndarray:
    """``grad f*(lam grad f(a+) + (1 - lam) grad f(b+))``.

    Straight in dual coordinates; ``lam = 0`` gives ``b+`` and ``lam = 1``
    gives ``a+``.
    """
    lam = float(lam)
    if not 0 <= lam <= LAMBDA_CAP:
        raise ValueError(f"lambda must lie in [0, {LAMBDA_CAP:g}]")
    b_plus = check_vector(b_plus, "b_plus", gen.dim)
    a_plus = check_vector(a_plus, "a_plus", gen.dim)
    if lam == 0:
        return b_plus.copy()
    if lam == 1:
        return a_plus.copy()
    gb, ga = gen.grad(b_plus), gen.grad(a_plus)
    z = gb + lam * (ga - gb)
    if not gen.conj_domain.is_interior(z):
        raise DomainError(f"the dual geodesic leaves the conjugate domain at lambda = {lam:g}")
    return gen.conj_grad(z)


def right_geodesic(b, a_plus, lam: float) -> np.ndarray:
    """``lam b + (1 - lam) a+``."""
    b = check_vector(b, "b")
    a_plus = check_vector(a_plus, "a_plus", b.size)
    return a_plus + float(lam) * (b - a_plus)


def proximal_normals(gen: Generator, block):
    """Proximal normals ``(n_B, n_A)`` of a building block.

    ``n_B = grad f(a+) - grad f(b+)`` is normal to ``B`` at ``b+`` and
    ``n_A = Hess f(a+) (b - a+)`` is normal to ``A`` at ``a+``.
    """
    for name in ("b", "a_plus", "b_plus"):
        if not gen.domain.is_interior(getattr(block, name)):
            raise DomainError(f"block point {name} is not interior to dom f")
    n_B = gen.gradient_difference(block.a_plus, block.b_plus)
    n_A = gen.hessian(block.a_plus) @ (np.asarray(block.b, float) - block.a_plus)
    return n_B, n_A


# -- curvature ------------------------------------------------------------------

def _sphere_directions(dim, count, rng):
    if dim == 1:
        return np.array([[1.0], [-1.0]])[:max(count, 1)]
    if dim == 2:
        t = 2 * np.pi * np.arange(count) / count
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    u = rng.standard_normal((count, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _ray_exit(gen, ball, u):
    """Distance ``t`` with ``D(center + t u, center) = level`` along direction ``u``."""
    c = ball.center

    def h(t):
        return float(divergence_batch(gen, c + t * u, c)) - ball.level

    lo, hi = 0.0, max(ball.radius, 1e-8)
    while True:
        if not gen.domain.is_interior(c + hi * u):
            # back off towards the last interior point
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if gen.domain.is_interior(c + mid * u) and h(mid) > 0:
                    hi = mid
                    break
                if gen.domain.is_interior(c + mid * u):
                    lo = mid
                else:
                    hi = mid
            else:
                raise DomainError("the ball is not contained in the interior of dom f")
            if hi - lo <= 0 or not gen.domain.is_interior(c + hi * u):
                raise DomainError("the ball is not contained in the interior of dom f")
            break
        if h(hi) > 0:
            break
        lo, hi = hi, 2 * hi
        if hi > 1e12:
            raise DomainError("the ball is unbounded along a sampled direction")
    return brentq(h, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)


def ball_boundary_points(gen: Generator, ball: BregmanBall, count: int, seed: int = 0):
    """Points on the boundary of a left ball, found along rays from its center."""
    if ball.side != "left":
        raise ValueError("boundary sampling is implemented for left balls")
    if ball.radius == 0:
        raise DegenerateBall("a ball of radius 0 has no curvature")
    rng = np.random.default_rng(seed)
    U = _sphere_directions(gen.dim, count, rng)
    return np.array([ball.center + _ray_exit(gen, ball, u) * u for u in U])


def curvature_bounds(gen: Generator, ball: BregmanBall, boundary_samples: int = 64,
                     directions: int = 32, seed: int = 0) -> CurvatureBounds:
    """Sampled extremes of the normal curvature of a left Bregman sphere.

    At a boundary point ``x`` with normal ``n = grad f(x) - grad f(center)``
    and unit tangent ``v`` the curvature is ``<v, Hess f(x) v> / |n|``.
    """
    check_positive_int(boundary_samples, "boundary_samples")
    check_positive_int(directions, "directions")
    if ball.radius == 0:
        raise DegenerateBall("a ball of radius 0 has no curvature")
    if not gen.domain.is_interior(ball.center):
        raise DomainError("the center must be interior to dom f")
    rng = np.random.default_rng(seed)
    X = ball_boundary_points(gen, ball, boundary_samples, seed)
    kappas = []
    for x in X:
        n = gen.gradient_difference(x, ball.center)
        nn = np.linalg.norm(n)
        T = null_space(n[None, :]).T
        if T.shape[0] == 1:
            V = T
        else:
            W = rng.standard_normal((directions, T.shape[0]))
            V = (W / np.linalg.norm(W, axis=1, keepdims=True)) @ T
        H = gen.hessian(x)
        kappas.extend(np.einsum("ij,jk,ik->i", V, H, V) / nn)
    return CurvatureBounds(float(np.min(kappas)), float(np.max(kappas)))


# -- reach --------------------------------------------------------------------

def _min_divergence(gen, B, center, grid, top=3):
    """Smallest ``D(b, center)`` over ``B``: enumeration, polished on parametric sets."""
    if isinstance(B, FiniteSet):
        vals = divergence_batch(gen, B.points, center)
        return float(np.min(vals)), len(vals)
    U = B.grid(grid)
    vals = divergence_batch(gen, B.point(U), center)
    best = float(np.min(vals))
    for i in np.argsort(vals, kind="stable")[:top]:
        if not np.isfinite(vals[i]):
            continue

        def fun(u):
            return float(divergence_batch(gen, B.point(u), center))

        res = minimize(fun, U[i], method="L-BFGS-B", bounds=list(zip(B.lower, B.upper)),
                       options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 200})
        if np.isfinite(res.fun):
            best = min(best, float(res.fun))
    return best, len(U)


def estimate_reach(gen: Generator, B: SetSpec, b_plus, a_plus, grid: int = 1000,
                   tol: float = 1e-6, rel_tol: float = 1e-10,
                   lambda_cap: float = LAMBDA_CAP) -> ReachEstimate:
    """Estimate how far the left geodesic from ``b+`` through ``a+`` keeps ``b+`` as projection.

    For ``lam >= 1`` the centre ``a_lam`` on the left geodesic defines the
    left ball through ``b+``; the ball has empty interior intersection with
    ``B`` when no point of ``B`` has a smaller divergence to ``a_lam`` than
    ``b+``.  The largest such radius is located by doubling then bisection
    until the radius bracket is narrower than ``tol``.  ``+inf`` is returned
    when the test still passes at ``lambda_cap`` or the geodesic stops
    existing before the first failure.
    """
    if not isinstance(B, (Parametric, FiniteSet)):
        raise TypeError("reach estimation needs a Parametric or FiniteSet")
    b_plus = check_vector(b_plus, "b_plus", gen.dim)
    a_plus = check_vector(a_plus, "a_plus", gen.dim)
    if not B.contains(b_plus, tol=1e-8):
        raise NotProjectedOn("b_plus does not lie on B")
    history = []
    samples = 0

    def radius_and_flag(lam):
        nonlocal samples
        c = left_geodesic(gen, b_plus, a_plus, lam)
        level = float(divergence_batch(gen, b_plus, c))
        best, used = _min_divergence(gen, B, c, grid)
        samples += used
        empty = best >= level - rel_tol * (1.0 + level)
        r = float(np.sqrt(2 * level))
        history.append((float(lam), r, bool(empty)))
        return r, empty

    r1, ok = radius_and_flag(1.0)
    if not ok:
        raise NotProjectedOn("b_plus is not the left projection of a_plus onto B")
    direction = gen.gradient_difference(a_plus, b_plus)
    nd = np.linalg.norm(direction)
    direction = direction / nd if nd > 0 else direction
    caveat = None if gen.lipschitz_hessian else "Hessian of the generator is not declared Lipschitz"

    lo, hi = 1.0, 2.0
    r_lo = r1
    while True:
        try:
            r_hi, ok = radius_and_flag(hi)
        except DomainError:
            return ReachEstimate(np.inf, direction, samples_used=samples, parameter=np.inf,
                                 history=history, caveat=caveat)
        if not ok:
            break
        lo, r_lo = hi, r_hi
        if hi >= lambda_cap:
            return ReachEstimate(np.inf, direction, samples_used=samples, parameter=np.inf,
                                 history=history, caveat=caveat)
        hi = min(2 * hi, lambda_cap)
    while r_hi - r_lo > tol:
        mid = 0.5 * (lo + hi)
        r_mid, ok = radius_and_flag(mid)
        if ok:
            lo, r_lo = mid, r_mid
        else:
            hi, r_hi = mid, r_mid
        if hi - lo <= 1e-15 * hi:
            break
    return ReachEstimate(r_lo, direction, samples_used=samples, parameter=lo,
                         history=history, caveat=caveat)
