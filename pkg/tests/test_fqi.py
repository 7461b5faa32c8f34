import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from featservo import dynamics as D, fqi as F, policy as P, sim, solvers
from featservo.featurize import Standardizer


def random_batch(r, n=30, F_=3, J=2, terminal_frac=0.1, cost_scale=1.0):
    """Batch with random PSD next-state quadratics and non-negative phi."""
    M = r.standard_normal((n, F_, J, J))
    A = np.einsum("nfij,nfkj->nfik", M, M) * 0.1
    g = r.standard_normal((n, F_, J)) * 0.3
    k = r.uniform(0.5, 2.0, (n, F_))
    phi_t = np.concatenate([r.uniform(0, 2, (n, F_)), r.uniform(0, 1, (n, J))], axis=1)
    cost = r.uniform(0, cost_scale, n)
    terminal = r.uniform(size=n) < terminal_frac
    return F.BellmanBatch.from_arrays(phi_t, cost, terminal, A, g, k)


def random_weights(r, F_=3, J=2):
    return P.PolicyWeights(r.uniform(0, 2, F_), r.uniform(0.1, 2, J), r.normal())


class TestBellmanError:
    def test_zero(self, rng):
        b = random_batch(rng)
        b.cost[:] = 0
        assert F.bellman_error(b, P.PolicyWeights(np.zeros(3), np.zeros(2), 0.0), 0.9) == 0.0

    @pytest.mark.parametrize("gamma", [0.0, 0.5, 0.9])
    def test_constant_q(self, rng, gamma):
        b = random_batch(rng, terminal_frac=0.0)
        w = P.PolicyWeights(np.zeros(3), np.zeros(2), 2.5)
        expected = np.mean(((1 - gamma) * 2.5 - b.cost) ** 2)
        assert F.bellman_error(b, w, gamma) == pytest.approx(expected, rel=1e-12)

    def test_terminal_drops_bootstrap(self):
        b = F.BellmanBatch.from_arrays(
            [[1.0, 0.0]], [0.5], [True], np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 1)), np.zeros((1, 1))
        )
        w = P.PolicyWeights([2.0], [1.0], 0.25)
        assert F.bellman_error(b, w, 0.9) == pytest.approx((2.0 + 0.25 - 0.5) ** 2)

    def test_consistent_single_transition(self):
        # terminal sample whose Q equals its cost exactly
        b = F.BellmanBatch.from_arrays([[1.0, 0.0]], [2.5], [True], np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 1)), np.zeros((1, 1)))
        assert F.bellman_error(b, P.PolicyWeights([2.0], [1.0], 0.5), 0.9) == 0.0

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            F.BellmanBatch([])


class TestGreedy:
    def test_matches_per_sample_solve(self, rng):
        b = random_batch(rng)
        w = random_weights(rng)
        u, phi_next = b.greedy(w)
        for i in range(b.n):
            fq = P.FeatureQuadratics(b.A[i], b.g[i], b.k[i])
            ui, qi = P.min_q_quadratics(fq, w)
            np.testing.assert_allclose(u[i], ui, atol=1e-12)
            assert phi_next[i] @ w.theta + w.b == pytest.approx(qi, abs=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), alpha=st.floats(0.05, 20))
    def test_invariant_to_scale(self, seed, alpha):
        r = np.random.default_rng(seed)
        b = random_batch(r)
        w = random_weights(r)
        u1, _ = b.greedy(w)
        u2, _ = b.greedy(w.scaled(alpha, r.normal()))
        assert np.abs(u1 - u2).max() < 1e-9


class TestFitAlphaBias:
    def test_two_sample_solve(self):
        # gamma = 0 makes the bias coefficient 1; d_i = phi_i' theta = (1, 2)
        b = F.BellmanBatch.from_arrays(
            [[1.0, 0.0], [2.0, 0.0]], [2.0, 3.0], [False, False], np.zeros((2, 1, 1, 1)), np.zeros((2, 1, 1)), np.zeros((2, 1))
        )
        alpha, bias, _ = F.fit_alpha_bias(b, P.PolicyWeights([1.0], [0.0]), gamma=0.0, nu=0.0)
        assert alpha == pytest.approx(1.0, abs=1e-14)
        assert bias == pytest.approx(1.0, abs=1e-14)

    def test_zero_costs(self, rng):
        b = random_batch(rng)
        b.cost[:] = 0
        alpha, bias, _ = F.fit_alpha_bias(b, random_weights(rng), 0.9, 0.1)
        assert alpha == 0.0
        assert bias == 0.0

    def test_consistent_batch(self, rng):
        b = random_batch(rng, terminal_frac=0.0)
        w = random_weights(rng)
        b.cost[:] = b.phi_t @ w.theta + w.b - 0.9 * b.next_values(w)
        alpha, bias, fit = F.fit_alpha_bias(b, w, 0.9, 0.1)
        assert fit.objective <= 0.1 * float(w.theta @ w.theta) + 1e-12

    def test_undetermined_scale_warns(self):
        b = F.BellmanBatch.from_arrays(
            [[0.0, 0.0], [0.0, 0.0]], [1.0, 3.0], [True, True], np.zeros((2, 1, 1, 1)), np.zeros((2, 1, 1)), np.zeros((2, 1))
        )
        with pytest.warns(RuntimeWarning, match="undetermined"):
            alpha, bias, _ = F.fit_alpha_bias(b, P.PolicyWeights([1.0], [1.0]), 0.9, 0.0)
        assert alpha == 1.0
        assert bias == pytest.approx(2.0)


class TestFitThetaBias:
    def test_zero_features(self, rng):
        n = 12
        b = F.BellmanBatch.from_arrays(np.zeros((n, 3)), rng.uniform(0, 1, n), np.ones(n, bool), np.zeros((n, 1, 2, 2)), np.zeros((n, 1, 2)), np.zeros((n, 1)))
        w, fit, t = F.fit_theta_bias(b, P.PolicyWeights([1.0], [1.0, 1.0]), 0.9, 0.1)
        np.testing.assert_array_equal(w.theta, 0.0)
        assert w.b == pytest.approx(b.cost.mean())

    def test_realizable(self, rng):
        b = random_batch(rng, terminal_frac=1.0)
        star = P.PolicyWeights([0.5, 0.0, 1.5], [0.2, 0.0], 0.3)
        b.cost[:] = b.phi_t @ star.theta + star.b
        w, fit, _ = F.fit_theta_bias(b, star, 0.9, 0.0)
        assert fit.objective <= 1e-20

    def test_kkt(self, rng):
        b = random_batch(rng)
        w, fit, _ = F.fit_theta_bias(b, random_weights(rng), 0.9, 0.1)
        assert np.all(w.theta >= 0)
        assert fit.kkt_residual <= solvers.KKT_TOL


class TestFqiIteration:
    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), nu=st.sampled_from([0.0, 0.1, 1.0]))
    def test_feasibility_bounds(self, seed, nu):
        r = np.random.default_rng(seed)
        b = random_batch(r, cost_scale=r.uniform(0.1, 10))
        w = random_weights(r)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            for _ in range(3):
                w, rec = F.fqi_iteration(b, w, 0.9, nu)
                assert F.check_record(rec) == []
                assert np.all(w.theta >= 0)
                if np.min(w.lam) == 0 and np.max(w.w) == 0:
                    break

    def test_scale_step_not_worse_than_previous(self, rng):
        b = random_batch(rng)
        w = random_weights(rng)
        _, rec = F.fqi_iteration(b, w, 0.9, 0.0)
        assert rec["scale_objective"] <= rec["scale_objective_at_previous"] + 1e-12

    @pytest.mark.filterwarnings("ignore:scale is undetermined")
    def test_zero_cost_mdp(self, rng):
        b = random_batch(rng)
        b.cost[:] = 0
        w = random_weights(rng)
        for _ in range(3):
            w, rec = F.fqi_iteration(b, w, 0.9, 0.1)
        assert rec["bellman_error"] == 0.0
        np.testing.assert_array_equal(w.theta, 0.0)

    def test_check_record_flags(self):
        rec = dict(
            scale_objective=2.0, scale_objective_at_previous=1.0, ridge_objective=1.0, ridge_objective_at_half=2.0, theta_min=-1.0, kkt_residual=1.0
        )
        assert len(F.check_record(rec)) == 3


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"gamma": 1.0}, {"nu": -1.0}, {"exploration": -0.1}, {"trajectories": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            F.FqiConfig(**kwargs)


@pytest.fixture(scope="module")
def tiny_setup():
    env = sim.FollowEnv(sim.EnvConfig(horizon=8, resolution=16, supersample=1))
    model = D.random_model(np.random.default_rng(0), 5, 4, 16, 1, scale=0.01)
    std = Standardizer.identity(5)
    cfg = F.FqiConfig(sampling_iterations=2, fqi_iterations=3, trajectories=2, validation_trajectories=2)
    return env, model, std, cfg


class TestFqiRun:
    def run(self, setup, seed=0):
        env, model, std, cfg = setup
        w0 = P.PolicyWeights.uniform(10, 4)
        return F.fqi_run(env, model, w0, "chroma", std, cfg, seed=seed, validation_seeds=[1, 2])

    def test_history_and_selection(self, tiny_setup):
        res = self.run(tiny_setup)
        assert len(res.history) == 6
        assert [v["candidate"] for v in res.validation] == ["initial", "sampling-1", "sampling-2"]
        best = min(res.validation, key=lambda v: v["mean_cost"])
        np.testing.assert_array_equal(res.weights.theta, P.PolicyWeights.from_dict(best["weights"]).theta)
        for rec in res.history:
            assert min(rec["theta"]) >= 0
            assert rec["kkt_residual"] <= solvers.KKT_TOL
        assert res.n_training_trajectories == 4

    def test_deterministic(self, tiny_setup):
        a, b = self.run(tiny_setup, 5), self.run(tiny_setup, 5)
        assert [r["theta"] for r in a.history] == [r["theta"] for r in b.history]

    def test_negative_initial_weights(self, tiny_setup):
        env, model, std, cfg = tiny_setup
        w = P.PolicyWeights.uniform(10, 4)
        object.__setattr__(w, "w", -w.w)
        with pytest.raises(ValueError, match="non-negative"):
            F.fqi_run(env, model, w, "chroma", std, cfg)

    def test_gather_transitions(self, tiny_setup):
        env, model, std, _ = tiny_setup
        agent = P.ServoPolicy(model, P.PolicyWeights.uniform(10, 4), "chroma", std, 0.2, np.random.default_rng(0))
        trs = F.gather(env, agent, [3], "train")
        assert 1 <= len(trs) <= 8
        for tr in trs[:-1]:
            assert not tr.terminal and tr.next_quadratics is not None
        for tr in trs:
            assert np.all(np.abs(tr.u) <= 1) and tr.cost >= 0
