"""scikit-learn style wrappers around alternating projections and em runs.

The estimators follow the usual conventions: hyper-parameters are stored
unchanged by ``__init__``, ``fit`` validates its input and sets attributes
with a trailing underscore, and ``get_params`` / ``set_params`` come from
:class:`sklearn.base.BaseEstimator`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .alternator import RunConfig, detect_gap, run
from .em import DiscreteEmProblem, ExpFamilySpec, run_em_discrete, run_em_expfam
from .exceptions import TooShort
from .legendre import Generator, get_generator
from .sets import SetSpec


def _generator(gen, dim) -> Generator:
    return gen if isinstance(gen, Generator) else get_generator(gen, dim)


def _gap_or_last(trace):
    try:
        return detect_gap(trace).r_star
    except TooShort:
        return float(np.sqrt(2 * max(trace.D_bk_ak[-1], 0.0)))


class BregmanAlternatingProjections(TransformerMixin, BaseEstimator):
    """Alternating left/right Bregman projections from each row of ``X``.

    Parameters
    ----------
    generator : str or Generator
        Generator name (``"euclidean"``, ``"negentropy"``, ...) or instance.
    A, B : SetSpec
        The right-projection set ``A`` and left-projection set ``B``.
    orientation : {"rl", "lr"}
        Which projection is applied first.
    max_iters, step_tol, div_tol : stop rules, see :class:`RunConfig`.

    Attributes
    ----------
    traces_ : list of Trace
    limits_ : ndarray of shape (n_starts, d)
        Final ``b`` iterate of every run.
    gaps_ : ndarray of shape (n_starts,)
        Estimated gap ``r*`` of every run.
    """

    def __init__(self, generator="euclidean", A=None, B=None, orientation="rl",
                 max_iters=100_000, step_tol=1e-12, div_tol=1e-14):
        self.generator = generator
        self.A = A
        self.B = B
        self.orientation = orientation
        self.max_iters = max_iters
        self.step_tol = step_tol
        self.div_tol = div_tol

    def _config(self):
        return RunConfig(orientation=self.orientation, max_iters=self.max_iters,
                         step_tol=self.step_tol, div_tol=self.div_tol)

    def fit(self, X, y=None):
        if not isinstance(self.A, SetSpec) or not isinstance(self.B, SetSpec):
            raise TypeError("A and B must be SetSpec instances")
        X = check_array(X, dtype=float)
        self.n_features_in_ = X.shape[1]
        gen = _generator(self.generator, X.shape[1])
        cfg = self._config()
        self.traces_ = [run(gen, self.A, self.B, x, cfg) for x in X]
        self.limits_ = np.array([t.b[-1] for t in self.traces_])
        self.gaps_ = np.array([_gap_or_last(t) for t in self.traces_])
        return self

    def transform(self, X):
        """Final ``b`` iterate of a run started at every row of ``X``."""
        check_is_fitted(self, "traces_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        gen = _generator(self.generator, X.shape[1])
        cfg = self._config()
        return np.array([run(gen, self.A, self.B, x, cfg).b[-1] for x in X])


class DiscreteEM(BaseEstimator):
    """em-algorithm for incomplete discrete data observed through ``T``.

    ``fit`` takes the observed distribution ``p_hat`` on the outcome set.

    Attributes
    ----------
    q_ : ndarray
        Final model distribution.
    p_ : ndarray
        Final completed data distribution.
    em_trace_ : EmTrace
    """

    def __init__(self, T=None, model=None, start=None, max_iters=100_000):
        self.T = T
        self.model = model
        self.start = start
        self.max_iters = max_iters

    def fit(self, p_hat, y=None):
        p_hat = check_array(np.atleast_2d(p_hat), dtype=float).ravel()
        problem = DiscreteEmProblem(np.asarray(self.T), p_hat, self.model)
        start = self.start if self.start is not None else self.model.point(
            0.5 * (self.model.lower + self.model.upper))
        cfg = RunConfig(orientation="lr", max_iters=self.max_iters)
        self.em_trace_ = run_em_discrete(problem, start, cfg)
        self.q_ = self.em_trace_.trace.a[-1]
        self.p_ = self.em_trace_.trace.b[-1]
        return self


class ExpFamilyEM(BaseEstimator):
    """em-algorithm in natural parameters of an exponential family.

    ``fit`` takes the observed mean statistic ``y_hat``.

    Attributes
    ----------
    theta_ : ndarray
        Final model parameter.
    em_trace_ : EmTrace
    """

    def __init__(self, generator="gaussian", observed=None, model=None, start=None,
                 max_iters=100_000):
        self.generator = generator
        self.observed = observed
        self.model = model
        self.start = start
        self.max_iters = max_iters

    def fit(self, y_hat, y=None):
        y_hat = check_array(np.atleast_2d(y_hat), dtype=float).ravel()
        gen = _generator(self.generator, self.model.dim)
        spec = ExpFamilySpec(gen, self.observed, y_hat, self.model)
        start = self.start if self.start is not None else self.model.point(
            0.5 * (self.model.lower + self.model.upper))
        cfg = RunConfig(orientation="lr", max_iters=self.max_iters)
        self.em_trace_ = run_em_expfam(spec, start, cfg)
        self.theta_ = self.em_trace_.trace.b[-1]
        return self
