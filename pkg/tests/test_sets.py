import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize

from bregalt.exceptions import DomainError, SolverFailure
from bregalt.legendre import divergence, divergence_batch, euclidean, negentropy, poisson
from bregalt.sets import (Affine, Ball, DataSetKL, DualAffine, FiniteSet, Parametric,
                          Polyhedron, ProjectionOptions, e_step, get_map, left_project,
                          local_right_project, right_project, set_from_dict)

E2 = euclidean(2)
KL2, KL3 = negentropy(2), negentropy(3)
CIRCLE = Parametric("circle", {}, lower=[-np.pi], upper=[np.pi])
DOUBLE_WELL = Parametric("double_well", {"depth": 1.0}, lower=[-2.0], upper=[2.0])


def kl_slsqp(q, C, c):
    """Generic constrained KL minimizer over {p > 0 : C p = c}."""
    cons = {"type": "eq", "fun": lambda p: C @ p - c}
    res = minimize(lambda p: divergence(negentropy(q.size), p, q), np.full(q.size, c.sum() / q.size),
                   method="SLSQP", constraints=[cons], bounds=[(1e-12, None)] * q.size,
                   options={"ftol": 1e-15, "maxiter": 500})
    return res.x


class TestLeftProject:
    def test_data_set_closed_form(self):
        B = DataSetKL([0, 0, 1], [0.6, 0.4])
        a = np.array([0.2, 0.2, 0.6])
        res = left_project(KL3, B, a)
        np.testing.assert_allclose(res.point, [0.3, 0.3, 0.4], atol=1e-15)
        oracle = kl_slsqp(a, np.array([[1, 1, 0], [0, 0, 1.0]]), np.array([0.6, 0.4]))
        np.testing.assert_allclose(res.point, oracle, atol=1e-7)
        assert res.mode == "global-closed-form"

    def test_euclidean_line(self):
        res = left_project(E2, Affine([0.0, 0.0], [[1.0, 0.0]]), [1.0, 1.0])
        np.testing.assert_allclose(res.point, [1.0, 0.0], atol=1e-15)
        assert res.divergence_value == pytest.approx(0.5)

    def test_singleton(self):
        a = np.array([0.3, 0.9])
        res = left_project(KL2, FiniteSet([a]), a)
        np.testing.assert_array_equal(res.point, a)
        assert res.divergence_value == 0.0

    def test_finite_set_ties_lowest_index(self):
        res = left_project(E2, FiniteSet([[1.0, 0.0], [-1.0, 0.0]]), [0.0, 0.0])
        assert res.index == 0

    def test_kl_affine_matches_generic_solver(self):
        B = Affine([0.2, 0.3, 0.5], [[1.0, -1.0, 0.0], [1.0, 0.0, -1.0]])
        a = np.array([0.7, 0.2, 0.4])
        res = left_project(KL3, B, a)
        oracle = kl_slsqp(a, np.ones((1, 3)), np.array([1.0]))
        np.testing.assert_allclose(res.point, oracle, atol=1e-7)
        # KL projection onto the simplex plane is normalization
        np.testing.assert_allclose(res.point, a / a.sum(), atol=1e-12)

    def test_kl_halfplane(self):
        B = Polyhedron([[1.0, 1.0]], [1.0])
        a = np.array([0.9, 0.8])
        res = left_project(KL2, B, a)
        np.testing.assert_allclose(res.point, a / a.sum(), atol=1e-10)
        inside = np.array([0.2, 0.3])
        np.testing.assert_allclose(left_project(KL2, B, inside).point, inside, atol=1e-12)

    def test_interior_input_required_for_data_set(self):
        with pytest.raises(DomainError):
            left_project(KL3, DataSetKL([0, 0, 1], [0.6, 0.4]), [0.0, 0.5, 0.5])

    def test_euclidean_ball(self):
        res = left_project(E2, Ball([0.0, 0.0], 1.0), [3.0, 4.0])
        np.testing.assert_allclose(res.point, [0.6, 0.8], atol=1e-15)


class TestRightProject:
    def test_circle_radial(self):
        res = right_project(E2, CIRCLE, [2.0, 0.0])
        np.testing.assert_allclose(res.point, [1.0, 0.0], atol=1e-10)

    def test_finite_set_enumeration(self):
        A = FiniteSet([[0.5, 0.5], [0.9, 0.1]])
        b = np.array([0.6, 0.4])
        vals = [divergence(KL2, b, p) for p in A.points]
        res = right_project(KL2, A, b)
        np.testing.assert_array_equal(res.point, A.points[int(np.argmin(vals))])
        np.testing.assert_array_equal(res.point, [0.5, 0.5])

    def test_poisson_dual_affine_route(self):
        gen = poisson(2)
        A = DualAffine([0], [2.0], 2)
        b = np.array([0.3, -0.4])
        res = right_project(gen, A, b)
        # oracle: minimize D(b, (log 2, t)) over the free coordinate
        oracle = minimize(lambda t: divergence(gen, b, [np.log(2.0), t[0]]), [0.0],
                          method="BFGS", options={"gtol": 1e-12}).x
        np.testing.assert_allclose(res.point, [np.log(2.0), oracle[0]], atol=1e-7)
        assert A.contains(res.point, gen=gen)

    def test_euclidean_polyhedron(self):
        A = Polyhedron([[0.0, 1.0]], [-1.0])
        np.testing.assert_allclose(right_project(E2, A, [2.0, 3.0]).point, [2.0, -1.0], atol=1e-12)

    def test_affine_under_kl(self):
        A = Affine([0.2, 0.3, 0.5], [[1.0, -1.0, 0.0], [1.0, 0.0, -1.0]])
        b = np.array([0.7, 0.2, 0.4])
        res = right_project(KL3, A, b)

        def obj(t):
            x = A.base + t @ A.directions
            return np.inf if np.any(x <= 0) else divergence(KL3, b, x)

        oracle = minimize(obj, [0.0, 0.0], method="Nelder-Mead",
                          options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 5000}).x
        np.testing.assert_allclose(res.point, A.base + oracle @ A.directions, atol=1e-6)


class TestLocalRightProject:
    def test_warm_start_at_global_minimum(self):
        res = local_right_project(E2, CIRCLE, [2.0, 0.0], warm_start=[0.0])
        np.testing.assert_allclose(res.point, [1.0, 0.0], atol=1e-12)

    def test_stays_in_warm_start_basin(self):
        b = np.array([0.2, 0.9])
        U = np.linspace(-2.0, 2.0, 400001)
        vals = 0.5 * np.sum((DOUBLE_WELL.point(U[:, None]) - b) ** 2, axis=1)
        right = (U > 1.1) & (U < 1.6)
        u_local = U[right][np.argmin(vals[right])]
        res = local_right_project(E2, DOUBLE_WELL, b, warm_start=[1.3])
        assert res.parameter[0] == pytest.approx(u_local, abs=2e-5)
        assert res.parameter[0] == pytest.approx(1.33990939, abs=1e-7)
        assert res.divergence_value <= divergence(E2, b, DOUBLE_WELL.point([1.3]))
        # the global minimizer lies in another basin
        assert vals.min() < res.divergence_value - 0.5
        assert res.mode == "local-solver"

    def test_point_of_set(self):
        b = DOUBLE_WELL.point([0.4])
        res = local_right_project(E2, DOUBLE_WELL, b, warm_start=[0.5])
        np.testing.assert_allclose(res.point, b, atol=1e-9)
        assert res.divergence_value == pytest.approx(0.0, abs=1e-18)

    def test_requires_parametric(self):
        with pytest.raises(TypeError):
            local_right_project(E2, FiniteSet([[0.0, 0.0]]), [1.0, 1.0], warm_start=[0.0])

    def test_strict_solver_failure(self):
        opts = ProjectionOptions(max_iter=1, polish=False)
        with pytest.raises(SolverFailure):
            local_right_project(E2, DOUBLE_WELL, [0.2, 0.9], warm_start=[1.9], options=opts)

    @given(st.floats(-1.9, 1.9), st.floats(-1.0, 2.0), st.floats(-1.5, 1.5))
    def test_decrease_certificate(self, x, y, u0):
        b = np.array([x, y])
        res = local_right_project(E2, DOUBLE_WELL, b, warm_start=[u0])
        assert res.divergence_value <= divergence(E2, b, DOUBLE_WELL.point([u0])) + 1e-14


class TestProjectionInvariants:
    def test_data_set_feasibility(self, rng):
        B = DataSetKL([0, 0, 1, 2, 2, 2], [0.5, 0.2, 0.3])
        for _ in range(200):
            q = rng.uniform(0.01, 2.0, 6)
            p = left_project(negentropy(6), B, q).point
            np.testing.assert_allclose(B.group_sums(p), B.p_hat, atol=1e-12)

    def test_result_divergence_consistent(self, rng):
        B = Parametric("squeezed_curve", {"coef": 0.1}, lower=[0.0], upper=[2.0])
        for a in rng.uniform(0.2, 2.0, (20, 2)):
            res = left_project(KL2, B, a)
            assert res.divergence_value == pytest.approx(divergence(KL2, res.point, a), abs=1e-12)
            res = right_project(E2, CIRCLE, a)
            assert res.divergence_value == pytest.approx(divergence(E2, a, res.point), abs=1e-12)

    @pytest.mark.parametrize("side", ["left", "right"])
    def test_finite_set_matches_enumeration(self, side, rng):
        P = rng.uniform(0.1, 2.0, (50, 2))
        S = FiniteSet(P)
        for x in rng.uniform(0.1, 2.0, (30, 2)):
            if side == "left":
                vals, res = divergence_batch(KL2, P, x), left_project(KL2, S, x)
            else:
                vals, res = divergence_batch(KL2, x, P), right_project(KL2, S, x)
            assert res.divergence_value == pytest.approx(vals.min(), abs=1e-12)

    @pytest.mark.parametrize("side", ["left", "right"])
    def test_parametric_matches_grid(self, side, rng):
        S = Parametric("parabola", {"coef": 1.0, "offset": 0.3}, lower=[-1.5], upper=[1.5])
        pts = S.point(S.grid(10_000))
        for x in rng.uniform(0.1, 1.5, (15, 2)):
            if side == "left":
                vals, res = divergence_batch(KL2, pts, x), left_project(KL2, S, x)
            else:
                vals, res = divergence_batch(KL2, x, pts), right_project(KL2, S, x)
            # the solver polishes the best grid point, so it can only be lower
            assert res.divergence_value <= vals.min() + 1e-8
            assert res.divergence_value >= vals.min() - 1e-5

    @pytest.mark.parametrize("S", [Affine([0.0, 1.0], [[1.0, 2.0]]), Ball([1.0, 1.0], 0.5),
                                   CIRCLE, Parametric("parabola", {}, lower=[-2.0], upper=[2.0])],
                             ids=["affine", "ball", "circle", "parabola"])
    def test_euclidean_left_equals_right(self, S, rng):
        for x in rng.normal(0, 2, (20, 2)):
            lv = left_project(E2, S, x).divergence_value
            rv = right_project(E2, S, x).divergence_value
            assert lv == pytest.approx(rv, abs=1e-10)

    def test_e_step_rejects_zero(self):
        with pytest.raises(DomainError):
            e_step(DataSetKL([0, 1], [0.5, 0.5]), [0.0, 1.0])


class TestSetSpecs:
    @pytest.mark.parametrize("S", [
        Affine([0.0, 1.0], [[1.0, 0.0]]), Polyhedron([[0.0, 1.0]], [1.0]), Ball([0.0, 0.0], 2.0),
        Parametric("circle", {"center": [0.0, 1.0], "radius": 2.0}, lower=[0.0], upper=[1.0]),
        FiniteSet([[1.0, 2.0], [3.0, 4.0]]), DataSetKL([0, 0, 1], [0.25, 0.75]),
        DualAffine([0], [2.0], 2)], ids=lambda s: s.variant)
    def test_json_round_trip(self, S):
        T = set_from_dict(S.to_dict())
        assert type(T) is type(S) and T.to_dict() == S.to_dict()

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            set_from_dict({"variant": "Torus"})

    def test_unknown_map(self):
        with pytest.raises(ValueError):
            get_map("spiral", {})

    def test_data_set_validation(self):
        with pytest.raises(ValueError):
            DataSetKL([0, 0], [0.5, 0.5])  # outcome 1 has no preimage
        with pytest.raises(ValueError):
            DataSetKL([0, 1], [0.6, 0.6])
        with pytest.raises(ValueError):
            DataSetKL([0, 1], [1.0, 0.0])

    def test_box_order(self):
        with pytest.raises(ValueError):
            Parametric("circle", {}, lower=[1.0], upper=[0.0])

    def test_membership(self):
        assert Affine([0.0, 1.0], [[1.0, 0.0]]).contains([5.0, 1.0])
        assert CIRCLE.contains([0.0, 1.0]) and not CIRCLE.contains([0.0, 0.5])
        assert DataSetKL([0, 0, 1], [0.6, 0.4]).contains([0.3, 0.3, 0.4])

    def test_data_set_as_affine(self):
        B = DataSetKL([0, 0, 1], [0.6, 0.4])
        assert B.as_affine().contains([0.1, 0.5, 0.4])

    def test_projection_options_method(self):
        with pytest.raises(ValueError):
            ProjectionOptions(method="newton")

    def test_jacobians_match_finite_differences(self, rng):
        maps = [("circle", {}, 1), ("parabola", {"coef": 2.0}, 1), ("power_graph", {}, 1),
                ("squeezed_curve", {"coef": 0.1}, 1), ("double_well", {}, 1),
                ("mexican_hat", {}, 2), ("softmax_curve", {"slope": [0.0, 1.0, -2.0],
                                                           "intercept": [0.1, 0.0, 0.2]}, 1),
                ("affine_map", {"base": [1.0, 0.0, 0.0], "matrix": [[1.0, 2.0, 0.0], [0.0, 1.0, 1.0]]}, 2)]
        for name, params, k in maps:
            m = get_map(name, params)
            for u in rng.uniform(0.2, 0.9, (5, k)):
                fd = np.column_stack([(m.fun(u + 1e-6 * e) - m.fun(u - 1e-6 * e)) / 2e-6
                                      for e in np.eye(k)])
                np.testing.assert_allclose(m.jac(u), fd, atol=1e-6, err_msg=name)
