"""The em-algorithm as alternating Kullback-Leibler projections.

Discrete problems alternate the closed-form e-step (left projection onto the
data set) with a right projection onto the model.  Exponential families work
in natural parameters: the m-step is a left projection onto the model and
the e-step a right projection onto the data set, taken through the dual
coordinates where the data set is affine.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import rel_entr

from ._validation import check_positive_int, check_vector
from .alternator import RunConfig, Trace, detect_gap, run
from .exceptions import DomainError, InvalidModel, TooShort
from .legendre import Generator, divergence, negentropy
from .sets import (DataSetKL, DualAffine, Parametric, ParamMap, ProjectionOptions,
                   ProjectionResult, e_step, register_map, right_project)


@dataclass
class EmTrace:
    """An alternating trace with em roles.

    ``roles`` labels the two projections of every row: the ``a`` side is
    produced by one step and the ``b`` side by the other.
    """

    trace: Trace
    roles: dict
    fixed_point_residual: float = np.nan
    r_star: float = np.nan

    @property
    def objective(self) -> np.ndarray:
        """``D(b_k, a_k)`` per row, the KL value being decreased."""
        return self.trace.D_bk_ak

    def is_monotone(self, tol: float = 1e-10) -> bool:
        d = np.diff(self.objective)
        return bool(np.all(d <= tol * (1 + np.abs(self.objective[:-1]))))

    def column_names(self):
        return self.trace.column_names() + ["step_role", "fixed_point_residual"]

    def rows(self):
        role = f"a:{self.roles['a']}|b:{self.roles['b']}"
        return [r + [role, self.fixed_point_residual] for r in self.trace.rows()]


def _gap(trace):
    try:
        return detect_gap(trace).r_star
    except TooShort:
        return float(np.sqrt(2 * trace.D_bk_ak[-1])) if len(trace) else np.nan


# -- discrete problems ---------------------------------------------------------------

@dataclass
class DiscreteEmProblem:
    """Incomplete data ``p_hat`` on ``J`` observed through ``T: I -> J``; model on the simplex of ``I``."""

    T: np.ndarray
    p_hat: np.ndarray
    model: Parametric

    def __post_init__(self):
        self.data_set = DataSetKL(self.T, self.p_hat)
        self.T = self.data_set.T
        self.p_hat = self.data_set.p_hat
        if self.model.dim != self.T.size:
            raise ValueError("the model must live on the index set I")

    @property
    def generator(self) -> Generator:
        return negentropy(self.T.size)


def e_step_discrete(q, problem: DiscreteEmProblem) -> np.ndarray:
    """``p_i = p_hat[T(i)] q_i / sum_{T(i') = T(i)} q_i'``."""
    q = check_vector(q, "q", problem.T.size)
    return e_step(problem.data_set, q)


def m_step_discrete(p, problem: DiscreteEmProblem, warm=None,
                    options: ProjectionOptions = ProjectionOptions()) -> ProjectionResult:
    """Right KL projection of ``p`` onto the model, warm-started at parameter ``warm``."""
    p = check_vector(p, "p", problem.T.size)
    if np.any(p <= 0):
        raise DomainError("p must be strictly positive")
    return right_project(problem.generator, problem.model, p, warm=warm, options=options)


def run_em_discrete(problem: DiscreteEmProblem, start, config: RunConfig = None) -> EmTrace:
    """Alternate e- and m-steps from a model point ``start``.

    The returned residual is ``|p* - e_step(m_step(p*))|`` at the final
    data point ``p*``.
    """
    cfg = config or RunConfig(orientation="lr")
    if cfg.orientation != "lr":
        raise ValueError("em runs start on the model side (orientation 'lr')")
    gen = problem.generator
    tr = run(gen, problem.model, problem.data_set, start, cfg)
    p_star = tr.b[-1]
    warm = tr.a_param[-1] if tr.a_param is not None else None
    q_next = m_step_discrete(p_star, problem, warm, cfg.projection).point
    res = float(np.linalg.norm(p_star - e_step_discrete(q_next, problem)))
    return EmTrace(tr, {"a": "m-step", "b": "e-step"}, res, _gap(tr))


# -- exponential families ------------------------------------------------------------

@dataclass
class ExpFamilySpec:
    """Exponential family with log-normalizer ``generator`` and observed statistics.

    ``observed`` indexes the observed block of the sufficient statistic;
    the data set is ``{theta : grad f(theta)[observed] = y_hat}``.
    ``model`` is a parametric set of natural parameters over a finite box.
    """

    generator: Generator
    observed: np.ndarray
    y_hat: np.ndarray
    model: Parametric

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=int).ravel()
        self.y_hat = check_vector(self.y_hat, "y_hat", self.observed.size, copy=True)
        if not (np.all(np.isfinite(self.model.lower)) and np.all(np.isfinite(self.model.upper))):
            raise ValueError("the model box must be bounded")
        if self.model.dim != self.generator.dim:
            raise ValueError("model and generator dimensions differ")
        probe = np.zeros(self.generator.dim)
        conj = self.generator.conj_domain
        eta = self.generator.grad(probe)
        eta[self.observed] = self.y_hat
        if not conj.contains(eta):
            raise DomainError("y_hat lies outside the closure of the expectation domain")
        self.data_set = DualAffine(self.observed, self.y_hat, self.generator.dim)

    def in_data_set(self, theta, tol=1e-9) -> bool:
        eta = self.generator.grad(theta)[self.observed]
        return bool(np.max(np.abs(eta - self.y_hat), initial=0.0) <= tol * (1 + np.max(np.abs(self.y_hat))))


def kl_expfam(spec, theta_prime, theta, check: bool = True) -> float:
    """``K(p_theta' || p_theta) = D_f(theta, theta')``.

    For the shipped families the distributional Kullback-Leibler divergence
    is computed independently and compared when ``check`` is set.
    """
    gen = spec.generator if isinstance(spec, ExpFamilySpec) else spec
    val = divergence(gen, theta, theta_prime)
    if check:
        ref = distribution_kl(gen, theta_prime, theta)
        if ref is not None and abs(ref - val) > 1e-9 * (1 + abs(ref)):
            raise AssertionError(f"KL mismatch: {val!r} against {ref!r}")
    return val


def distribution_kl(gen: Generator, theta_p, theta_q) -> Optional[float]:
    """``KL(p_theta_p || p_theta_q)`` from the distributions themselves, when known."""
    theta_p = np.asarray(theta_p, float)
    theta_q = np.asarray(theta_q, float)
    if gen.name == "poisson":
        lp, lq = np.exp(theta_p), np.exp(theta_q)
        return float(np.sum(rel_entr(lp, lq) - lp + lq))
    if gen.name == "gaussian":
        # N(theta_p, sigma^2) against N(theta_q, sigma^2), per coordinate
        s2 = gen.params["sigma"] ** 2
        return float(np.sum((theta_p - theta_q) ** 2) / (2 * s2))
    return None


def run_em_expfam(spec: ExpFamilySpec, start, config: RunConfig = None) -> EmTrace:
    """em-iterations ``theta' <- P_D(P_M(theta'))`` from a data-set point ``start``.

    A ``start`` outside the data set is first moved onto it by a right
    projection.
    """
    cfg = config or RunConfig(orientation="lr")
    if cfg.orientation != "lr":
        raise ValueError("em runs start on the data side (orientation 'lr')")
    gen = spec.generator
    start = check_vector(start, "start", gen.dim)
    if not spec.in_data_set(start):
        start = right_project(gen, spec.data_set, start).point
    tr = run(gen, spec.data_set, spec.model, start, cfg)
    theta_m = tr.b[-1]
    nxt = right_project(gen, spec.data_set, theta_m).point
    res = float(np.linalg.norm(nxt - tr.a[-1]))
    return EmTrace(tr, {"a": "e-step", "b": "m-step"}, res, _gap(tr))


# -- dSPECT with a Prony model --------------------------------------------------------

# gamma is kept away from 0 so every frame activity stays positive on the whole box
PRONY_BOX = ((0.0, 1.0), (0.0, 1.5), (1e-3, 10.0), (0.01, 100.0), (0.01, 100.0))
DESK_LIMITS = {"n": 9, "m": 4, "K": 8}
# inexact warm-started m-steps; each still never increases the divergence
DSPECT_MAX_ITERS = 5000
DSPECT_PROJECTION = ProjectionOptions(tol=1e-13, max_iter=50, strict=False, method="lbfgsb")


def prony_activities(params, K: int) -> np.ndarray:
    """Time activities ``x_k = alpha x_{k-2} + beta x_{k-1} + gamma`` per voxel.

    ``params`` has shape ``(..., n, 5)`` with columns ``alpha, beta, gamma,
    x0, x1``; the result has shape ``(..., n, K)``.
    """
    P = np.asarray(params, float)
    al, be, ga = P[..., 0], P[..., 1], P[..., 2]
    xs = [P[..., 3], P[..., 4]]
    for _ in range(2, K):
        xs.append(al * xs[-2] + be * xs[-1] + ga)
    return np.stack(xs[:K], axis=-1)


def _prony_jacobian(params, K):
    """``d x_ik / d params_i`` with shape ``(n, K, 5)``."""
    P = np.asarray(params, float)
    n = P.shape[0]
    x = prony_activities(P, K)
    J = np.zeros((n, K, 5))
    J[:, 0, 3] = 1.0
    if K > 1:
        J[:, 1, 4] = 1.0
    al, be = P[:, 0], P[:, 1]
    for k in range(2, K):
        J[:, k] = al[:, None] * J[:, k - 2] + be[:, None] * J[:, k - 1]
        J[:, k, 0] += x[:, k - 2]
        J[:, k, 1] += x[:, k - 1]
        J[:, k, 2] += 1.0
    return J


@register_map("prony")
def _prony_map(c, keep=None):
    """Expected complete counts ``c_ijk x_ik`` for the kept ``(i, j, k)`` entries."""
    C = np.asarray(c, float)
    n, m, K = C.shape
    keep = np.ones(C.size, bool) if keep is None else np.asarray(keep, bool).ravel()
    flat_c = C.ravel()[keep]
    # kept entry -> (voxel, frame)
    ii, _, kk = np.unravel_index(np.flatnonzero(keep), C.shape)

    def fun(u):
        u = np.asarray(u, float)
        x = prony_activities(u.reshape(u.shape[:-1] + (n, 5)), K)
        return flat_c * x[..., ii, kk]

    rows = np.repeat(np.arange(flat_c.size), 5)
    cols = (5 * ii[:, None] + np.arange(5)).ravel()

    def jac(u):
        Jx = _prony_jacobian(np.asarray(u, float).reshape(n, 5), K)
        out = np.zeros((flat_c.size, 5 * n))
        out[rows, cols] = (flat_c[:, None] * Jx[ii, kk]).ravel()
        return out

    return ParamMap(fun, jac, 5 * n, flat_c.size)


@dataclass
class DspectProblem:
    """Poisson complete-data instance of dynamic SPECT with Prony time activities.

    ``c[i, j, k]`` is the sensitivity of bin ``j`` to voxel ``i`` in frame
    ``k``, ``y[j, k]`` the counts.  The complete data ``z_ijk`` are Poisson
    with mean ``c_ijk x_ik`` and must satisfy ``sum_i z_ijk = y_jk``.
    Entries with ``c = 0`` or ``y = 0`` are removed (``keep`` is ``False``).
    """

    c: np.ndarray
    y: np.ndarray
    keep: np.ndarray
    data_set: DataSetKL
    model: Parametric
    true_params: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.c.shape

    @property
    def generator(self) -> Generator:
        return negentropy(int(self.keep.sum()))

    def expected_counts(self, params) -> np.ndarray:
        """``sum_i c_ijk x_ik`` for Prony parameters of shape ``(n, 5)`` or ``(5 n,)``."""
        n, m, K = self.c.shape
        x = prony_activities(np.asarray(params, float).reshape(n, 5), K)
        return np.einsum("ijk,ik->jk", self.c, x)

    def activities(self, params) -> np.ndarray:
        n, _, K = self.c.shape
        return prony_activities(np.asarray(params, float).reshape(n, 5), K)


def build_dspect_problem(n: int, m: int, K: int, prony, c, y=None, box=PRONY_BOX,
                         enforce_desk_scale: bool = True) -> DspectProblem:
    """Assemble a dSPECT instance; counts are synthesized from ``prony`` when ``y`` is omitted.

    ``prony`` has one row ``(alpha, beta, gamma, x0, x1)`` per voxel.
    """
    n, m, K = (check_positive_int(v, name) for v, name in ((n, "n"), (m, "m"), (K, "K")))
    if enforce_desk_scale and (n > DESK_LIMITS["n"] or m > DESK_LIMITS["m"] or K > DESK_LIMITS["K"]):
        raise ValueError(f"desk-scale instances need n <= 9, m <= 4, K <= 8; got {n}, {m}, {K}")
    if K < 2:
        raise ValueError("the Prony recursion needs at least two frames")
    P = np.asarray(prony, float).reshape(n, 5)
    C = np.asarray(c, float)
    if C.shape != (n, m, K):
        raise ValueError(f"c must have shape {(n, m, K)}, got {C.shape}")
    if np.any(C < 0) or not np.all(np.isfinite(C)):
        raise ValueError("c must be finite and nonnegative")
    x = prony_activities(P, K)
    if np.any(x <= 0):
        raise InvalidModel("the Prony recursion yields a nonpositive activity")
    Y = np.einsum("ijk,ik->jk", C, x) if y is None else np.asarray(y, float).reshape(m, K)
    if np.any(Y < 0):
        raise ValueError("counts must be nonnegative")
    keep = (C > 0) & (Y[None, :, :] > 0)
    if not keep.any():
        raise ValueError("no informative entries remain")
    # outcome index of every kept entry: the (j, k) bin it is summed into
    jk = np.ravel_multi_index(np.nonzero(keep)[1:], (m, K))
    groups, T = np.unique(jk, return_inverse=True)
    p_hat = Y.ravel()[groups]
    data = DataSetKL(T, p_hat, normalized=False)
    lo = np.tile([b[0] for b in box], n)
    hi = np.tile([b[1] for b in box], n)
    model = Parametric("prony", {"c": C, "keep": keep.ravel()}, lower=lo, upper=hi)
    return DspectProblem(C, Y, keep, data, model, P)


def run_dspect(problem: DspectProblem, start_params, config: RunConfig = None) -> EmTrace:
    """em iterations from the model point with Prony parameters ``start_params``."""
    cfg = config or RunConfig(orientation="lr", max_iters=DSPECT_MAX_ITERS,
                              projection=DSPECT_PROJECTION)
    gen = problem.generator
    u0 = problem.model.clip(np.asarray(start_params, float).ravel())
    q0 = problem.model.point(u0)
    tr = _run_from_param(gen, problem.model, problem.data_set, u0, q0, cfg)
    p_star = tr.b[-1]
    warm = tr.a_param[-1]
    q_next = right_project(gen, problem.model, p_star, warm=warm, options=cfg.projection).point
    res = float(np.linalg.norm(p_star - e_step(problem.data_set, q_next)))
    out = EmTrace(tr, {"a": "m-step", "b": "e-step"}, res, _gap(tr))
    return out


def _run_from_param(gen, model, data, u0, q0, cfg):
    """Run with the first model point given by its parameter, so every m-step is warm-started."""
    from .alternator import _stack_params
    from .sets import left_project

    a_list, b_list, params = [q0], [left_project(gen, data, q0).point], [u0]
    D_prev = float(divergence(gen, b_list[0], a_list[0]))
    dtol = cfg.div_tol * (1 + D_prev)
    reason, calm = "max-iterations", 0
    for k in range(1, cfg.max_iters + 1):
        ra = right_project(gen, model, b_list[-1], warm=params[-1], options=cfg.projection)
        b_new = left_project(gen, data, ra.point).point
        step = np.linalg.norm(b_new - b_list[-1]) + np.linalg.norm(ra.point - a_list[-1])
        a_list.append(ra.point)
        b_list.append(b_new)
        params.append(ra.parameter)
        D = float(divergence(gen, b_new, ra.point))
        calm = calm + 1 if abs(D - D_prev) < dtol and D > dtol else 0
        D_prev = D
        if k >= cfg.min_iters:
            if step < cfg.step_tol:
                reason = "step-stagnation"
                break
            if calm >= cfg.div_patience:
                reason = "divergence-stagnation"
                break
    return Trace(gen, np.array(a_list), np.array(b_list), orientation="lr",
                 stop_reason=reason, a_param=_stack_params(params))
