from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bregalt.alternator import Block
from bregalt.exceptions import DegenerateBall, DomainError, NotProjectedOn
from bregalt.geometry import (BregmanBall, ball_boundary_points, curvature_bounds,
                              estimate_reach, left_geodesic, proximal_normals, right_geodesic)
from bregalt.legendre import divergence, euclidean, negentropy, poisson
from bregalt.sets import Affine, FiniteSet, Parametric, left_project, right_project

E2 = euclidean(2)
KL2 = negentropy(2)


def block(b, a_plus, b_plus, a=None):
    return Block(a, np.asarray(b, float), np.asarray(a_plus, float), np.asarray(b_plus, float),
                 np.nan, np.nan, np.nan)


class TestGeodesics:
    def test_euclidean_left_geodesic_is_segment(self):
        b, a = np.array([0.0, 0.0]), np.array([2.0, 4.0])
        np.testing.assert_allclose(left_geodesic(E2, b, a, 0.25), [0.5, 1.0], atol=1e-15)
        np.testing.assert_allclose(left_geodesic(E2, b, a, 3.0), [6.0, 12.0], atol=1e-14)

    def test_kl_left_geodesic_is_geometric_mean(self):
        b, a = np.array([1.0, 4.0]), np.array([4.0, 1.0])
        np.testing.assert_allclose(left_geodesic(KL2, b, a, 0.5), [2.0, 2.0], atol=1e-14)

    def test_endpoints_exact(self):
        b, a = np.array([0.3, 0.7]), np.array([0.6, 0.1])
        np.testing.assert_array_equal(left_geodesic(KL2, b, a, 0.0), b)
        np.testing.assert_array_equal(left_geodesic(KL2, b, a, 1.0), a)

    def test_right_geodesic(self):
        np.testing.assert_allclose(right_geodesic([2.0, 0.0], [0.0, 2.0], 0.5), [1.0, 1.0])
        np.testing.assert_array_equal(right_geodesic([2.0, 0.0], [0.0, 2.0], 0.0), [0.0, 2.0])

    def test_poisson_geodesic_leaves_conjugate_domain(self):
        with pytest.raises(DomainError):
            left_geodesic(poisson(2), [1.0, 1.0], [0.0, 0.0], 10.0)

    def test_lambda_range(self):
        with pytest.raises(ValueError):
            left_geodesic(E2, [0.0, 0.0], [1.0, 1.0], -0.5)


class TestNormals:
    def test_kl_normals(self):
        blk = block(b=[0.5, 1.5], a_plus=[1.0, 1.0], b_plus=[0.5, 1.5])
        n_B, n_A = proximal_normals(KL2, blk)
        np.testing.assert_allclose(n_B, [np.log(2.0), np.log(2.0 / 3.0)], atol=1e-15)
        np.testing.assert_allclose(n_A, [-0.5, 0.5], atol=1e-15)

    def test_euclidean_normals_are_differences(self):
        blk = block(b=[1.0, 2.0], a_plus=[0.0, 0.0], b_plus=[3.0, -1.0])
        n_B, n_A = proximal_normals(E2, blk)
        np.testing.assert_allclose(n_B, [-3.0, 1.0])
        np.testing.assert_allclose(n_A, [1.0, 2.0])

    def test_boundary_point_rejected(self):
        with pytest.raises(DomainError):
            proximal_normals(KL2, block(b=[0.0, 1.0], a_plus=[1.0, 1.0], b_plus=[1.0, 1.0]))

    def test_left_normal_on_line(self, rng):
        # the left normal of an affine B is orthogonal to its directions
        B = Affine([0.3, 0.2], [[1.0, 0.5]])
        for a in rng.uniform(0.2, 2.0, (20, 2)):
            b_plus = left_project(KL2, B, a).point
            n_B = KL2.gradient_difference(a, b_plus)
            assert abs(n_B @ B.directions[0]) < 1e-9

    def test_right_normal_on_circle(self, rng):
        A = Parametric("circle", {}, lower=[-np.pi], upper=[np.pi])
        for b in rng.normal(0.0, 2.0, (20, 2)):
            res = right_project(E2, A, b)
            _, n_A = proximal_normals(E2, block(b=b, a_plus=res.point, b_plus=res.point))
            tangent = np.array([-res.point[1], res.point[0]])
            assert abs(n_A @ tangent) < 1e-7

    def test_finite_set_normal_separates(self, rng):
        # every other point of a finite B lies outside the open left ball through b+
        pts = rng.uniform(0.2, 2.0, (30, 2))
        S = FiniteSet(pts)
        for a in rng.uniform(0.2, 2.0, (20, 2)):
            b_plus = left_project(KL2, S, a).point
            ball = BregmanBall("left", a, np.sqrt(2 * divergence(KL2, b_plus, a)))
            assert not np.any(ball.divergence_to(KL2, pts) < ball.level - 1e-12)


class TestBalls:
    def test_membership(self):
        ball = BregmanBall("left", [0.0, 0.0], 1.0)
        assert ball.contains(E2, [0.6, 0.8])
        assert not ball.contains(E2, [0.7, 0.8])
        np.testing.assert_array_equal(ball.contains(E2, [[0.0, 0.0], [2.0, 0.0]]), [True, False])

    def test_right_ball_side(self):
        ball = BregmanBall("right", [1.0, 1.0], 0.5)
        x = np.array([1.2, 1.1])
        assert ball.divergence_to(KL2, x) == pytest.approx(divergence(KL2, [1.0, 1.0], x))

    def test_validation(self):
        with pytest.raises(ValueError):
            BregmanBall("up", [0.0], 1.0)
        with pytest.raises(ValueError):
            BregmanBall("left", [0.0], -1.0)

    def test_boundary_points_on_sphere(self):
        ball = BregmanBall("left", [1.0, 1.0], 0.6)
        X = ball_boundary_points(KL2, ball, 16)
        D = np.array([divergence(KL2, x, ball.center) for x in X])
        np.testing.assert_allclose(D, ball.level, rtol=1e-12)


class TestCurvature:
    def test_euclidean_circle(self):
        cb = curvature_bounds(E2, BregmanBall("left", [0.3, -0.2], 2.0))
        assert cb.kappa_lo == pytest.approx(0.5, rel=1e-10)
        assert cb.kappa_hi == pytest.approx(0.5, rel=1e-10)
        assert cb.inner_radius == pytest.approx(2.0, rel=1e-10)

    def test_euclidean_three_dimensional(self):
        cb = curvature_bounds(euclidean(3), BregmanBall("left", [0.0, 0.0, 0.0], 0.5),
                              boundary_samples=16, directions=8)
        assert cb.kappa_lo == pytest.approx(2.0, rel=1e-10)
        assert cb.kappa_hi == pytest.approx(2.0, rel=1e-10)

    def test_small_kl_ball_is_nearly_round(self):
        # in the Hessian metric small balls look like circles of radius r
        center = np.array([1.0, 1.0])
        ratios = []
        for r in (0.1, 0.01, 0.001):
            cb = curvature_bounds(KL2, BregmanBall("left", center, r))
            ratios.append(cb.kappa_hi / cb.kappa_lo)
        assert ratios[0] > ratios[1] > ratios[2] > 1.0
        assert ratios[2] == pytest.approx(1.0, abs=0.01)

    def test_single_sample_equal_bounds(self):
        cb = curvature_bounds(KL2, BregmanBall("left", [1.0, 2.0], 0.5), boundary_samples=1)
        assert cb.kappa_lo == cb.kappa_hi

    def test_degenerate_ball(self):
        with pytest.raises(DegenerateBall):
            curvature_bounds(E2, BregmanBall("left", [0.0, 0.0], 0.0))

    def test_ball_must_fit_in_domain(self):
        with pytest.raises(DomainError):
            curvature_bounds(KL2, BregmanBall("left", [0.01, 1.0], 3.0))

    def test_rolling_inclusion(self, rng):
        # a euclidean disc of the inner radius, tangent inside at a boundary point, stays inside
        ball = BregmanBall("left", [1.0, 1.0], 0.6)
        rho = curvature_bounds(KL2, ball, boundary_samples=256).inner_radius
        X = ball_boundary_points(KL2, ball, 32)
        fails = 0
        for x in X:
            n = KL2.gradient_difference(x, ball.center)
            c = x - rho * n / np.linalg.norm(n)
            t = rng.uniform(0, 2 * np.pi, 32)
            s = np.sqrt(rng.uniform(0, 1, 32)) * rho * (1 - 1e-6)
            disc = c + s[:, None] * np.stack([np.cos(t), np.sin(t)], axis=1)
            fails += int(np.sum(~ball.contains(KL2, disc, tol=1e-10)))
        assert fails == 0


class TestReach:
    def test_line_has_infinite_reach(self):
        B = Parametric("affine_map", {"base": [0.0, 0.0], "matrix": [[1.0, 0.0]]},
                       lower=[-5.0], upper=[5.0])
        est = estimate_reach(E2, B, [0.0, 0.0], [0.0, 1.0])
        assert est.value == np.inf

    def test_circle_from_inside(self):
        B = Parametric("circle", {}, lower=[-np.pi], upper=[np.pi])
        est = estimate_reach(E2, B, [1.0, 0.0], [0.5, 0.0], grid=4000)
        assert est.value == pytest.approx(1.0, abs=1e-4)
        np.testing.assert_allclose(est.direction, [-1.0, 0.0], atol=1e-12)

    def test_history_monotone_flags(self):
        B = Parametric("circle", {}, lower=[-np.pi], upper=[np.pi])
        est = estimate_reach(E2, B, [1.0, 0.0], [0.5, 0.0], grid=4000)
        passed = [r for _, r, ok in est.history if ok]
        failed = [r for _, r, ok in est.history if not ok]
        assert max(passed) <= min(failed)

    def test_not_on_set(self):
        B = Parametric("circle", {}, lower=[-np.pi], upper=[np.pi])
        with pytest.raises(NotProjectedOn):
            estimate_reach(E2, B, [2.0, 0.0], [3.0, 0.0])

    def test_not_the_projection(self):
        B = Parametric("circle", {}, lower=[-np.pi], upper=[np.pi])
        with pytest.raises(NotProjectedOn):
            estimate_reach(E2, B, [1.0, 0.0], [0.0, 2.0])

    def test_caveat_without_lipschitz_hessian(self):
        B = FiniteSet([[1.0, 1.0], [3.0, 3.0]])
        est = estimate_reach(KL2, B, [1.0, 1.0], [1.2, 1.1])
        assert est.caveat is None and 0 < est.value < np.inf
        flagged = estimate_reach(replace(KL2, lipschitz_hessian=False), B, [1.0, 1.0], [1.2, 1.1])
        assert flagged.caveat is not None
        assert flagged.value == est.value

    def test_power_graph_exponent(self):
        # for y = |x|^1.5 the reach shrinks like sqrt(x) near the cusp at 0
        B = Parametric("power_graph", {"power": 1.5}, lower=[-1.0], upper=[1.0])
        xs = np.geomspace(0.01, 0.3, 8)
        reach = []
        for x in xs:
            b_plus = B.point([x])
            tangent = np.array([1.0, 1.5 * np.sqrt(x)])
            normal = np.array([-tangent[1], tangent[0]]) / np.linalg.norm(tangent)
            est = estimate_reach(E2, B, b_plus, b_plus + 0.01 * np.sqrt(x) * normal, tol=1e-7)
            reach.append(est.value)
        slope = np.polyfit(np.log(xs), np.log(reach), 1)[0]
        assert slope == pytest.approx(0.5, abs=0.1)


class TestInvariance:
    @given(st.floats(0.0, 1.0), st.floats(0.2, 2.0), st.floats(0.2, 2.0))
    def test_left_geodesic_invariance_on_convex_set(self, lam, x, y):
        # points of the left geodesic between b+ and a project to b+
        B = Parametric("affine_map", {"base": [1.0, 0.5], "matrix": [[1.0, -0.4]]},
                       lower=[-0.9], upper=[0.9])
        a = np.array([x, y])
        b_plus = left_project(KL2, B, a).point
        a_lam = left_geodesic(KL2, b_plus, a, lam)
        np.testing.assert_allclose(left_project(KL2, B, a_lam).point, b_plus, atol=1e-6)

    @given(st.floats(0.0, 1.0), st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
    def test_right_geodesic_invariance_on_circle(self, lam, x, y):
        A = Parametric("circle", {}, lower=[-np.pi], upper=[np.pi])
        b = np.array([x, y])
        if np.linalg.norm(b) < 0.1:
            return
        a_plus = right_project(E2, A, b).point
        b_lam = right_geodesic(b, a_plus, lam)
        if np.linalg.norm(b_lam) < 0.05:
            return
        np.testing.assert_allclose(right_project(E2, A, b_lam).point, a_plus, atol=1e-6)
