import numpy as np
import pytest
from scipy.integrate import quad
from scipy.optimize import minimize_scalar
from scipy.special import softmax
from scipy.stats import norm

from bregalt.alternator import RunConfig, euclidean_ap_reference
from bregalt.em import (DiscreteEmProblem, ExpFamilySpec, build_dspect_problem,
                        distribution_kl, e_step_discrete, kl_expfam, m_step_discrete,
                        prony_activities, run_dspect, run_em_discrete, run_em_expfam)
from bregalt.exceptions import DomainError, InvalidModel
from bregalt.legendre import divergence, gaussian, poisson
from bregalt.sets import Parametric, left_project

from conftest import fixture_outcome

SLOPE = np.array([0.0, 1.0, 0.5, -0.5, 1.0, -1.0])
T6 = np.array([0, 0, 1, 1, 2, 2])
SOFTMAX = Parametric("softmax_curve", {"slope": SLOPE.tolist(), "intercept": [0.0] * 6},
                     lower=[-3.0], upper=[3.0])
CIRCLE = Parametric("circle", {}, lower=[-3.0], upper=[3.0])


def grouped(p, T, n_groups):
    return np.bincount(T, weights=p, minlength=n_groups)


def reference_em(p_hat, u0, n_iter):
    """Textbook em for the softmax curve: conditional expectations, then 1-d likelihood maximization."""
    u, us = u0, []
    for _ in range(n_iter):
        q = softmax(SLOPE * u)
        p = p_hat[T6] * q / grouped(q, T6, 3)[T6]
        u = minimize_scalar(lambda t: -p @ np.log(softmax(SLOPE * t)), bounds=(-3, 3),
                            method="bounded", options={"xatol": 1e-13}).x
        us.append(u)
    return np.array(us)


class TestEStep:
    def test_closed_form_example(self):
        prob = DiscreteEmProblem([0, 0, 1], [0.6, 0.4],
                                 Parametric("softmax_curve", {"slope": [0.0, 1.0, 2.0]},
                                            lower=[-1.0], upper=[1.0]))
        np.testing.assert_allclose(e_step_discrete([0.2, 0.2, 0.6], prob), [0.3, 0.3, 0.4],
                                   atol=1e-15)

    def test_matches_solver_projection(self, rng):
        prob = DiscreteEmProblem(T6, [0.5, 0.3, 0.2], SOFTMAX)
        affine = prob.data_set.as_affine()
        for _ in range(20):
            q = rng.dirichlet(np.ones(6))
            solver = left_project(prob.generator, affine, q).point
            np.testing.assert_allclose(e_step_discrete(q, prob), solver, atol=1e-10)

    def test_group_sums_restored(self, rng):
        prob = DiscreteEmProblem(T6, [0.5, 0.3, 0.2], SOFTMAX)
        p = e_step_discrete(rng.dirichlet(np.ones(6)), prob)
        np.testing.assert_allclose(grouped(p, T6, 3), [0.5, 0.3, 0.2], atol=1e-15)

    def test_rejects_zero(self):
        prob = DiscreteEmProblem(T6, [0.5, 0.3, 0.2], SOFTMAX)
        with pytest.raises(DomainError):
            e_step_discrete([0.0, 0.2, 0.2, 0.2, 0.2, 0.2], prob)


class TestMStep:
    def test_binomial_normalizes(self):
        model = Parametric("binomial", {}, lower=[0.001], upper=[0.999])
        prob = DiscreteEmProblem([0, 1], [0.5, 0.5], model)
        res = m_step_discrete([0.15, 0.35], prob)
        assert res.parameter[0] == pytest.approx(0.3, abs=1e-9)
        np.testing.assert_allclose(res.point, [0.3, 0.7], atol=1e-9)

    def test_softmax_maximizes_likelihood(self, rng):
        prob = DiscreteEmProblem(T6, [0.5, 0.3, 0.2], SOFTMAX)
        for _ in range(5):
            p = rng.dirichlet(np.ones(6))
            u = minimize_scalar(lambda t: -p @ np.log(softmax(SLOPE * t)), bounds=(-3, 3),
                                method="bounded", options={"xatol": 1e-13}).x
            assert m_step_discrete(p, prob).parameter[0] == pytest.approx(u, abs=1e-7)

    def test_rejects_zero(self):
        prob = DiscreteEmProblem(T6, [0.5, 0.3, 0.2], SOFTMAX)
        with pytest.raises(DomainError):
            m_step_discrete([0.0, 0.2, 0.2, 0.2, 0.2, 0.2], prob)


class TestDiscreteEm:
    def test_feasible_fixture(self):
        out = fixture_outcome("em_discrete_feasible")
        assert out.em.is_monotone()
        assert out.em.fixed_point_residual <= 1e-8
        assert out.summary["r_star"] <= 1e-6

    def test_matches_textbook_em(self):
        p_hat = np.array([0.2, 0.2, 0.6])
        u0 = 0.4
        prob = DiscreteEmProblem(T6, p_hat, SOFTMAX)
        et = run_em_discrete(prob, SOFTMAX.point([u0]),
                             RunConfig(orientation="lr", min_iters=8, max_iters=8))
        ref = reference_em(p_hat, u0, 8)
        np.testing.assert_allclose(et.trace.a_param[1:, 0], ref, atol=1e-7)

    def test_infeasible_fixture(self):
        out = fixture_outcome("em_discrete_infeasible")
        assert out.em.is_monotone()
        assert out.summary["r_star"] == pytest.approx(0.253, abs=1e-3)
        assert not out.summary["feasible"]

    def test_fixed_point_start(self):
        u = 0.7
        q = SOFTMAX.point([u])
        prob = DiscreteEmProblem(T6, grouped(q, T6, 3), SOFTMAX)
        et = run_em_discrete(prob, q, RunConfig(orientation="lr", min_iters=3))
        np.testing.assert_allclose(et.trace.a_param[-1], [u], atol=1e-6)
        assert et.fixed_point_residual <= 1e-8

    def test_requires_lr(self):
        prob = DiscreteEmProblem(T6, [0.5, 0.3, 0.2], SOFTMAX)
        with pytest.raises(ValueError):
            run_em_discrete(prob, SOFTMAX.point([0.0]), RunConfig(orientation="rl"))

    def test_model_dimension(self):
        with pytest.raises(ValueError):
            DiscreteEmProblem([0, 1, 1], [0.5, 0.5], SOFTMAX)

    def test_trace_columns(self):
        et = fixture_outcome("em_discrete_feasible").em
        names = et.column_names()
        assert names[-2:] == ["step_role", "fixed_point_residual"]
        rows = et.rows()
        assert len(rows) == len(et.trace) and rows[0][-2] == "a:m-step|b:e-step"


class TestExpFamily:
    @pytest.mark.parametrize("gen", [poisson(3), gaussian(3), gaussian(3, sigma=0.5)],
                             ids=["poisson", "gaussian", "gaussian-0.5"])
    def test_kl_equals_divergence(self, gen, rng):
        for _ in range(1000):
            t1, t2 = rng.normal(0, 1, (2, 3))
            if gen.name == "poisson":
                lp, lq = np.exp(t1), np.exp(t2)
                ref = np.sum(lp * np.log(lp / lq) - lp + lq)
            else:
                ref = np.sum((t1 - t2) ** 2) / (2 * gen.params["sigma"] ** 2)
            assert abs(kl_expfam(gen, t1, t2) - ref) <= 1e-10
            assert abs(distribution_kl(gen, t1, t2) - ref) <= 1e-10

    def test_gaussian_kl_by_quadrature(self):
        gen = gaussian(1, sigma=0.7)
        mp, mq = 0.3, -0.4
        ref = quad(lambda x: norm.pdf(x, mp, 0.7) * (norm.logpdf(x, mp, 0.7)
                                                     - norm.logpdf(x, mq, 0.7)), -12, 12,
                   epsabs=1e-13)[0]
        assert kl_expfam(gen, [mp], [mq]) == pytest.approx(ref, rel=1e-8)

    def test_kl_swaps_arguments(self):
        gen = poisson(1)
        # K(Poi(1) || Poi(e)) = e - 2
        assert kl_expfam(gen, [0.0], [1.0]) == pytest.approx(np.e - 2, abs=1e-15)

    def test_gaussian_em_is_euclidean_ap(self):
        out = fixture_outcome("em_gaussian")
        tr = out.trace
        on_line = lambda x: np.array([1.5, x[1]])  # noqa: E731
        on_circle = lambda x: x / np.linalg.norm(x)  # noqa: E731
        a_ref, b_ref = euclidean_ap_reference(on_line, on_circle, tr.a[0], len(tr), "lr")
        np.testing.assert_allclose(tr.a, a_ref, atol=1e-10)
        np.testing.assert_allclose(tr.b, b_ref, atol=1e-10)
        assert out.summary["r_star"] == pytest.approx(0.5, abs=1e-8)

    def test_poisson_fixture(self):
        out = fixture_outcome("em_poisson")
        assert out.em.is_monotone()
        assert out.summary["r_star"] <= 1e-6
        spec_rate = np.exp(out.trace.a[-1][0])
        assert spec_rate == pytest.approx(2.0, rel=1e-10)

    def test_start_moved_onto_data_set(self):
        spec = ExpFamilySpec(gaussian(2), [0], [1.5], CIRCLE)
        et = run_em_expfam(spec, [0.2, 0.3], RunConfig(orientation="lr", max_iters=5))
        np.testing.assert_allclose(et.trace.a[0], [1.5, 0.3], atol=1e-12)

    def test_fixed_point(self):
        spec = ExpFamilySpec(gaussian(2), [0], [1.0], CIRCLE)
        et = run_em_expfam(spec, [1.0, 0.0], RunConfig(orientation="lr"))
        assert len(et.trace) <= 2
        np.testing.assert_allclose(et.trace.b[-1], [1.0, 0.0], atol=1e-12)
        assert et.fixed_point_residual == pytest.approx(0.0, abs=1e-12)

    def test_y_hat_outside_expectation_domain(self):
        with pytest.raises(DomainError):
            ExpFamilySpec(poisson(2), [0], [-1.0], CIRCLE)

    def test_in_data_set(self):
        spec = ExpFamilySpec(poisson(2), [0], [2.0], CIRCLE)
        assert spec.in_data_set([np.log(2.0), 5.0])
        assert not spec.in_data_set([0.0, 0.0])


class TestDspect:
    def test_prony_recursion(self):
        x = prony_activities([[0.5, 0.25, 1.0, 2.0, 3.0]], 4)
        np.testing.assert_allclose(x, [[2.0, 3.0, 0.5 * 2 + 0.25 * 3 + 1, 0.5 * 3 + 0.25 * 2.75 + 1]])

    def test_constant_activity(self):
        # alpha + beta = 0.5 with gamma = 0.5 c keeps x = c fixed
        x = prony_activities([[0.2, 0.3, 1.0, 2.0, 2.0]], 8)
        np.testing.assert_allclose(x, 2.0, atol=1e-15)

    def test_single_voxel_recovers_activities(self):
        prony = np.array([[0.3, 0.4, 0.5, 2.0, 1.0]])
        c = np.array([[[1.0, 0.7, 0.4]]])
        prob = build_dspect_problem(1, 1, 3, prony, c)
        et = run_dspect(prob, [0.5, 0.5, 1.0, 1.0, 1.0])
        u = et.trace.a_param[-1]
        np.testing.assert_allclose(prob.activities(u), prob.activities(prony), rtol=1e-4)
        assert et.is_monotone()

    def test_counts_synthesized(self):
        prony = np.array([[0.3, 0.4, 0.5, 2.0, 1.0]])
        c = np.array([[[1.0, 0.7, 0.4]]])
        prob = build_dspect_problem(1, 1, 3, prony, c)
        np.testing.assert_allclose(prob.y, c[0] * prony_activities(prony, 3)[0])

    def test_nonpositive_activity(self):
        with pytest.raises(InvalidModel):
            build_dspect_problem(1, 1, 3, [[-1.0, 0.0, 0.001, 1.0, 1.0]], np.ones((1, 1, 3)))

    def test_desk_scale(self):
        with pytest.raises(ValueError):
            build_dspect_problem(10, 1, 3, np.ones((10, 5)), np.ones((10, 1, 3)))

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            build_dspect_problem(1, 1, 3, [[0.3, 0.4, 0.5, 2.0, 1.0]], np.ones((1, 2, 3)))

    def test_zero_sensitivity_entries_dropped(self):
        c = np.array([[[1.0, 0.0, 0.4]], [[0.5, 0.5, 0.0]]])
        prob = build_dspect_problem(2, 1, 3, [[0.3, 0.4, 0.5, 2.0, 1.0]] * 2, c)
        assert prob.keep.sum() == 4
        assert prob.generator.dim == 4

    def test_prony_jacobian(self, rng):
        prob = build_dspect_problem(2, 2, 5, [[0.3, 0.4, 0.5, 2.0, 1.0], [0.1, 0.8, 0.2, 1.0, 3.0]],
                                    rng.uniform(0.1, 1.0, (2, 2, 5)))
        m = prob.model.map
        u = np.array([0.3, 0.4, 0.5, 2.0, 1.0, 0.1, 0.8, 0.2, 1.0, 3.0])
        fd = np.column_stack([(m.fun(u + 1e-6 * e) - m.fun(u - 1e-6 * e)) / 2e-6 for e in np.eye(10)])
        np.testing.assert_allclose(m.jac(u), fd, atol=1e-7)

    def test_model_counts_divergence(self):
        out = fixture_outcome("dspect_toy")
        tr = out.trace
        assert divergence(tr.gen, tr.b[-1], tr.a[-1]) == pytest.approx(tr.D_bk_ak[-1])
