import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from featservo import dynamics as D, policy as P
from featservo.featurize import build_pyramid

from test_dynamics import toy_model, zero_model


def random_weights(rng, n_features, n_controls, b=0.0):
    return P.PolicyWeights(rng.uniform(0, 2, n_features), rng.uniform(0.1, 2, n_controls), b)


def random_setup(seed, scale=0.3):
    r = np.random.default_rng(seed)
    m = D.random_model(r, 2, 4, 4, 1, scale=scale)
    s = P.ServoState(build_pyramid(r.standard_normal((2, 4, 4)), 1), build_pyramid(r.standard_normal((2, 4, 4)), 1))
    return r, m, s


class TestPhi:
    def test_zero_error_at_goal(self, rng):
        m = zero_model()
        y = build_pyramid(rng.standard_normal((2, 8, 8)), 1)
        f = P.phi(P.ServoState(y, y), np.zeros(4), m)
        np.testing.assert_array_equal(f, 0.0)

    def test_null_action_control_block(self, small_model, small_state):
        f = P.phi(small_state, np.zeros(4), small_model)
        assert f.shape == (P.n_phi(small_model),)
        np.testing.assert_array_equal(f[-4:], 0.0)

    @pytest.mark.parametrize("goal, expected", [(3.1, 0.0), (4.1, 1.0)])
    def test_toy(self, goal, expected):
        s = P.ServoState([np.array([[[2.0]]])], [np.array([[[goal]]])])
        f = P.phi(s, [1.0], toy_model())
        assert f[0] == pytest.approx(expected, abs=1e-14)
        assert f[1] == 1.0

    def test_resolution_normaliser(self, small_model):
        # a unit error everywhere gives entry 1 at every level
        y = [np.zeros((2, 8, 8)), np.zeros((2, 4, 4))]
        g = [np.ones((2, 8, 8)), np.ones((2, 4, 4))]
        f = P.phi(P.ServoState(y, g), np.zeros(4), zero_model())
        np.testing.assert_allclose(f[:4], 1.0)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_non_negative(self, seed):
        r, m, s = random_setup(seed)
        assert np.all(P.phi(s, r.uniform(-1, 1, 4), m) >= 0)


class TestQValue:
    def test_zero_theta(self, small_model, small_state, rng):
        w = P.PolicyWeights(np.zeros(4), np.zeros(4), 5.0)
        assert P.q_value(w, small_state, rng.uniform(-1, 1, 4), small_model) == 5.0

    def test_one_hot(self, small_model, small_state, rng):
        u = rng.uniform(-1, 1, 4)
        f = P.phi(small_state, u, small_model)
        for i in range(8):
            theta = np.zeros(8)
            theta[i] = 1.0
            assert P.q_value(P.PolicyWeights.from_theta(theta, 4), small_state, u, small_model) == f[i]

    def test_linear(self, small_model, small_state, rng):
        w = random_weights(rng, 4, 4, b=0.7)
        u = rng.uniform(-1, 1, 4)
        q = P.q_value(w, small_state, u, small_model)
        assert P.q_value(w.scaled(2.0, 1.4), small_state, u, small_model) == pytest.approx(2 * q, rel=1e-12)

    def test_dimension_mismatch(self, small_model, small_state):
        with pytest.raises(ValueError):
            P.q_value(P.PolicyWeights.uniform(3, 4), small_state, np.zeros(4), small_model)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_monotone_in_theta(self, seed):
        r, m, s = random_setup(seed)
        w = random_weights(r, 4, 4)
        u = r.uniform(-1, 1, 4)
        bumped = P.PolicyWeights.from_theta(w.theta + r.uniform(0, 1, 8), 4)
        assert P.q_value(bumped, s, u, m) >= P.q_value(w, s, u, m)


class TestObjectiveQuadratic:
    def test_control_penalty_only(self, small_model, small_state):
        q = P.objective_quadratic(small_state, small_model, P.PolicyWeights(np.zeros(4), np.ones(4)))
        np.testing.assert_array_equal(q.A, np.eye(4))
        np.testing.assert_array_equal(q.g, 0.0)
        assert q.k == 0.0

    def test_matches_q_value(self, small_model, small_state, rng):
        w = random_weights(rng, 4, 4, b=-0.3)
        quad = P.objective_quadratic(small_state, small_model, w)
        for u in rng.uniform(-1, 1, (100, 4)):
            assert abs(P.q_value(w, small_state, u, small_model) - (quad(u) + w.b)) < 1e-9

    def test_scaling(self, small_model, small_state, rng):
        w = random_weights(rng, 4, 4)
        a = P.objective_quadratic(small_state, small_model, w)
        b = P.objective_quadratic(small_state, small_model, w.scaled(3.5))
        np.testing.assert_allclose(b.A, 3.5 * a.A, rtol=1e-12)
        np.testing.assert_allclose(b.g, 3.5 * a.g, rtol=1e-12)
        assert b.k == pytest.approx(3.5 * a.k, rel=1e-12)

    def test_k_is_null_action_error(self, small_model, small_state, rng):
        w = random_weights(rng, 4, 4)
        quad = P.objective_quadratic(small_state, small_model, w)
        f = P.phi(small_state, np.zeros(4), small_model)
        assert quad.k == pytest.approx(f[:4] @ w.w, rel=1e-12)

    def test_symmetric_psd(self, small_model, small_state, rng):
        quad = P.objective_quadratic(small_state, small_model, random_weights(rng, 4, 4))
        np.testing.assert_array_equal(quad.A, quad.A.T)
        assert np.linalg.eigvalsh(quad.A).min() > 0


class TestAct:
    def test_pure_control_penalty(self, small_model, small_state):
        u = P.act(small_state, small_model, P.PolicyWeights(np.zeros(4), np.ones(4)))
        np.testing.assert_array_equal(u, 0.0)

    def test_scalar_toy(self):
        # 2u^2 + 4u + 1, minimum at u = -1
        u = P.solve_quadratic(P.QuadraticForm(np.array([[2.0]]), np.array([4.0]), 1.0), np.array([1.0]))
        assert u[0] == pytest.approx(-1.0, abs=1e-15)

    def test_clipping(self):
        u = P.solve_quadratic(P.QuadraticForm(np.array([[0.5]]), np.array([4.0]), 0.0), np.array([0.5]))
        assert u[0] == -1.0

    def test_goal_reached_by_null_action(self, small_model, rng):
        y = build_pyramid(rng.standard_normal((2, 8, 8)), 1)
        goal = [D.predict(small_model, yl, np.zeros(4), l) for l, yl in enumerate(y)]
        u = P.act(P.ServoState(y, goal), small_model, random_weights(rng, 4, 4))
        np.testing.assert_allclose(u, 0.0, atol=1e-12)

    def test_degenerate_weights_use_jitter(self, small_model, small_state):
        u = P.act(small_state, small_model, P.PolicyWeights(np.zeros(4), np.zeros(4)))
        np.testing.assert_array_equal(u, 0.0)

    def test_singular_objective_reported(self):
        quad = P.QuadraticForm(-np.eye(2), np.zeros(2), 0.0)
        with pytest.raises(ValueError, match="degenerate"):
            P.solve_quadratic(quad, np.zeros(2))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), alpha=st.sampled_from([0.1, 1.0, 7.3]), b=st.floats(-10, 10))
    def test_argmin_invariant_to_scale_and_bias(self, seed, alpha, b):
        r, m, s = random_setup(seed)
        w = random_weights(r, 4, 4)
        ref = P.act(s, m, w)
        got = P.act(s, m, w.scaled(alpha, b))
        assert np.abs(got - ref).max() < 1e-9

    def test_grid_optimality(self):
        # large control penalties keep the minimiser inside the box
        r, m, s = random_setup(7, scale=0.2)
        w = P.PolicyWeights(r.uniform(0, 1, 4), np.full(4, 5.0))
        quad = P.objective_quadratic(s, m, w)
        u_star = P.act(s, m, w)
        A = 2 * quad.A
        assert np.all(np.abs(np.linalg.solve(A, -quad.g)) < 1)
        best = P.q_value(w, s, u_star, m)
        grid = np.linspace(-1, 1, 9)
        for u in itertools.product(grid, repeat=4):
            assert best <= P.q_value(w, s, np.array(u), m) + 1e-9


class TestMinQ:
    def test_control_penalty_only(self, small_model, small_state):
        u, q = P.min_q(P.PolicyWeights(np.zeros(4), np.ones(4)), small_state, small_model)
        np.testing.assert_array_equal(u, 0.0)
        assert q == 0.0

    def test_scalar_toy(self):
        # feature quadratic 1.5u^2 + 4u + 2, penalty 0.5u^2, bias -1: total 2u^2 + 4u + 1
        fq = P.FeatureQuadratics(np.array([[[1.5]]]), np.array([[4.0]]), np.array([2.0]))
        u, q = P.min_q_quadratics(fq, P.PolicyWeights([1.0], [0.5], -1.0))
        assert u[0] == pytest.approx(-1.0, abs=1e-15)
        assert q == pytest.approx(-1.0, abs=1e-14)

    def test_random_search(self, small_model, small_state, rng):
        w = random_weights(rng, 4, 4, b=0.2)
        u, q = P.min_q(w, small_state, small_model)
        assert q == pytest.approx(P.q_value(w, small_state, u, small_model), abs=1e-9)
        for v in rng.uniform(-1, 1, (1000, 4)):
            assert q <= P.q_value(w, small_state, v, small_model) + 1e-9


class TestWeights:
    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            P.PolicyWeights([1.0, -0.1], [1.0])

    def test_theta_order(self):
        w = P.PolicyWeights([1.0, 2.0, 3.0], [4.0, 5.0], 6.0)
        np.testing.assert_array_equal(w.theta, [1, 2, 3, 4, 5])

    def test_dict_round_trip(self, rng):
        w = random_weights(rng, 6, 4, b=1.25)
        v = P.PolicyWeights.from_dict(w.to_dict())
        np.testing.assert_array_equal(v.theta, w.theta)
        assert v.b == w.b


class TestServoPolicy:
    class FakeEnv:
        def __init__(self, goal, obs):
            self.goal, self._obs = goal, obs

        def observe(self):
            return self._obs

    def test_matches_direct_solve(self, rng):
        from featservo.featurize import Standardizer, featurize

        m = D.random_model(rng, 3, 4, 8, 1, scale=0.2)
        std = Standardizer.identity(3)
        goal, obs = rng.uniform(0, 1, (2, 3, 8, 8))
        w = random_weights(rng, 6, 4)
        pi = P.ServoPolicy(m, w, "pixel", std)
        env = self.FakeEnv(goal, obs)
        pi.reset(env)
        state = P.ServoState(build_pyramid(featurize(obs, "pixel", std), 1), build_pyramid(featurize(goal, "pixel", std), 1))
        np.testing.assert_allclose(pi(env), P.act(state, m, w), atol=1e-12)

    def test_noise_stays_in_box(self, rng):
        m = D.random_model(rng, 3, 4, 8, 0, scale=0.2)
        pi = P.ServoPolicy(m, random_weights(rng, 3, 4), "pixel", P.Standardizer.identity(3), noise=5.0, rng=rng)
        env = self.FakeEnv(*rng.uniform(0, 1, (2, 3, 8, 8)))
        pi.reset(env)
        for _ in range(20):
            assert np.all(np.abs(pi(env)) <= 1)

    def test_noise_needs_rng(self, small_model):
        with pytest.raises(ValueError, match="rng"):
            P.ServoPolicy(small_model, P.PolicyWeights.uniform(4, 4), "pixel", P.Standardizer.identity(3), noise=0.1)
