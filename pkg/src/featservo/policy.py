"""Weighted one-step servoing policy and its linear Q-function.

The Q-function is linear in ``theta = [w, lambda]``:

    Q(s, u) = phi(s, u) . theta + b

with one feature-error entry per (level, channel) pair, ordered levels outer
and channels inner, followed by one squared-control entry per action
coordinate. Because the dynamics are linear in ``u``, every feature-error
entry is an exact quadratic in ``u``; :class:`FeatureQuadratics` caches those
quadratics so the greedy action and ``phi`` at any action are cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dynamics
from .featurize import Standardizer, build_pyramid, featurize

JITTER = 1e-9


@dataclass(frozen=True)
class PolicyWeights:
    """Non-negative feature weights ``w``, control penalties ``lam`` and bias ``b``."""

    w: np.ndarray
    lam: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        lam = np.asarray(self.lam, dtype=np.float64).reshape(-1)
        if np.any(w < 0) or np.any(lam < 0):
            raise ValueError("policy weights must be non-negative")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(lam)) and np.isfinite(self.b)):
            raise ValueError("policy weights must be finite")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "b", float(self.b))

    @classmethod
    def uniform(cls, n_features: int, n_controls: int, w: float = 1.0, lam: float = 1.0, b: float = 0.0):
        return cls(np.full(n_features, w), np.full(n_controls, lam), b)

    @classmethod
    def from_theta(cls, theta, n_features: int, b: float = 0.0) -> "PolicyWeights":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(theta[:n_features], theta[n_features:], b)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.w, self.lam])

    def scaled(self, alpha: float, b: float | None = None) -> "PolicyWeights":
        return PolicyWeights(alpha * self.w, alpha * self.lam, self.b if b is None else b)

    def to_dict(self) -> dict:
        return {"w": self.w.tolist(), "lambda": self.lam.tolist(), "b": self.b}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyWeights":
        return cls(np.array(d["w"], dtype=np.float64), np.array(d["lambda"], dtype=np.float64), d.get("b", 0.0))


@dataclass(frozen=True)
class ServoState:
    """Current and goal feature pyramids (the observations are optional)."""

    y: list
    y_goal: list
    x: np.ndarray | None = None
    x_goal: np.ndarray | None = None

    def __post_init__(self):
        if len(self.y) != len(self.y_goal):
            raise ValueError("current and goal pyramids differ in depth")
        for a, g in zip(self.y, self.y_goal):
            if a.shape != g.shape:
                raise ValueError(f"current/goal level shapes differ: {a.shape} vs {g.shape}")


def make_state(
    x: np.ndarray,
    x_goal: np.ndarray,
    featurizer: str,
    standardizer: Standardizer,
    depth: int,
    goal_pyramid: list | None = None,
) -> ServoState:
    y = build_pyramid(featurize(x, featurizer, standardizer), depth)
    if goal_pyramid is None:
        goal_pyramid = build_pyramid(featurize(x_goal, featurizer, standardizer), depth)
    return ServoState(y, goal_pyramid, x, x_goal)


def n_phi(model: dynamics.BilinearModel) -> int:
    return model.n_channels * model.n_levels + model.n_controls


def phi(state: ServoState, u, model: dynamics.BilinearModel) -> np.ndarray:
    """Q-function features evaluated by running the dynamics forward."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    preds = dynamics.predict_pyramid(model, state.y, u)
    errs = []
    for pred, goal in zip(preds, state.y_goal):
        d = goal - pred
        errs.append(np.sum(d * d, axis=(1, 2)) / (d.shape[-1] * d.shape[-2]))
    return np.concatenate(errs + [u * u])


@dataclass(frozen=True)
class QuadraticForm:
    """``u' A u + g' u + k`` with symmetric ``A``."""

    A: np.ndarray
    g: np.ndarray
    k: float

    def __call__(self, u) -> float:
        u = np.asarray(u, dtype=np.float64)
        return float(u @ self.A @ u + self.g @ u + self.k)


@dataclass(frozen=True)
class FeatureQuadratics:
    """Per-feature quadratics: ``phi_f(u) = u' A[f] u + g[f]' u + k[f]``.

    Only the feature-error block is stored; the control block of ``phi`` is
    ``u**2`` and needs no cache.
    """

    A: np.ndarray  # (F, J, J)
    g: np.ndarray  # (F, J)
    k: np.ndarray  # (F,)

    @property
    def n_features(self) -> int:
        return self.k.shape[0]

    def phi(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        feat = np.einsum("i,fij,j->f", u, self.A, u) + self.g @ u + self.k
        return np.concatenate([feat, u * u])

    def objective(self, weights: PolicyWeights) -> QuadraticForm:
        w = weights.w
        if w.shape[0] != self.n_features:
            raise ValueError(f"{w.shape[0]} feature weights for {self.n_features} features")
        A = np.tensordot(w, self.A, axes=(0, 0)) + np.diag(weights.lam)
        g = w @ self.g
        k = float(w @ self.k)
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(g)) and np.isfinite(k)):
            raise ValueError("non-finite entries in the servoing objective")
        return QuadraticForm(0.5 * (A + A.T), g, k)


def feature_quadratics(state: ServoState, model: dynamics.BilinearModel) -> FeatureQuadratics:
    f0, jac = dynamics.linearize(model, state.y)
    As, gs, ks = [], [], []
    for l, (f, J) in enumerate(zip(f0, jac)):
        goal = state.y_goal[l].reshape(f.shape)
        e = goal - f
        n = f.shape[1]
        Jt = np.swapaxes(J, 1, 2)
        As.append(np.matmul(Jt, J) / n)
        gs.append(-2.0 * np.matmul(Jt, e[..., None])[..., 0] / n)
        ks.append(np.sum(e * e, axis=1) / n)
    return FeatureQuadratics(np.concatenate(As), np.concatenate(gs), np.concatenate(ks))


def q_value(weights: PolicyWeights, state: ServoState, u, model: dynamics.BilinearModel) -> float:
    theta = weights.theta
    f = phi(state, u, model)
    if f.shape != theta.shape:
        raise ValueError(f"theta has {theta.shape[0]} entries, phi has {f.shape[0]}")
    return float(f @ theta + weights.b)


def objective_quadratic(state: ServoState, model: dynamics.BilinearModel, weights: PolicyWeights) -> QuadraticForm:
    """Servoing objective (without the bias) as an explicit quadratic in ``u``."""
    return feature_quadratics(state, model).objective(weights)


def solve_quadratic(quad: QuadraticForm, lam: np.ndarray) -> np.ndarray:
    """Unconstrained minimiser of ``quad``, clipped to the unit action box."""
    A = quad.A
    if np.min(lam) == 0:
        A = A + JITTER * np.eye(A.shape[0])
    try:
        L = np.linalg.cholesky(2.0 * A)
    except np.linalg.LinAlgError:
        raise ValueError(
            "servoing objective is not positive definite; feature weights and control "
            f"penalties are degenerate (lambda={np.asarray(lam).tolist()})"
        ) from None
    z = np.linalg.solve(L, -quad.g)
    u = np.linalg.solve(L.T, z)
    return np.clip(u, -1.0, 1.0)


def act_quadratics(fq: FeatureQuadratics, weights: PolicyWeights) -> np.ndarray:
    return solve_quadratic(fq.objective(weights), weights.lam)


def min_q_quadratics(fq: FeatureQuadratics, weights: PolicyWeights):
    quad = fq.objective(weights)
    u = solve_quadratic(quad, weights.lam)
    return u, quad(u) + weights.b


def act(state: ServoState, model: dynamics.BilinearModel, weights: PolicyWeights) -> np.ndarray:
    return act_quadratics(feature_quadratics(state, model), weights)


def min_q(weights: PolicyWeights, state: ServoState, model: dynamics.BilinearModel):
    """Greedy action and its Q-value (evaluated at the clipped action)."""
    return min_q_quadratics(feature_quadratics(state, model), weights)


class ServoPolicy:
    """Closed-loop controller: featurize the live frame and act greedily.

    ``env`` only needs ``observe()`` and a ``goal`` observation, so the
    policy is independent of the simulator internals. With ``noise > 0``
    Gaussian exploration noise is added in action space and clipped.
    """

    needs_images = True

    def __init__(
        self,
        model: dynamics.BilinearModel,
        weights: PolicyWeights,
        featurizer: str,
        standardizer: Standardizer,
        noise: float = 0.0,
        rng: np.random.Generator | None = None,
    ):
        self.model = model
        self.weights = weights
        self.featurizer = featurizer
        self.standardizer = standardizer
        self.noise = noise
        self.rng = rng
        if noise > 0 and rng is None:
            raise ValueError("exploration noise needs an rng")
        self._goal = None

    def reset(self, env):
        self._goal = build_pyramid(featurize(env.goal, self.featurizer, self.standardizer), self.model.depth)

    def state(self, obs: np.ndarray) -> ServoState:
        y = build_pyramid(featurize(obs, self.featurizer, self.standardizer), self.model.depth)
        return ServoState(y, self._goal)

    def quadratics(self, obs: np.ndarray) -> FeatureQuadratics:
        return feature_quadratics(self.state(obs), self.model)

    def action(self, fq: FeatureQuadratics) -> np.ndarray:
        u = act_quadratics(fq, self.weights)
        if self.noise > 0:
            u = np.clip(u + self.rng.normal(0.0, self.noise, size=u.shape), -1.0, 1.0)
        return u

    def __call__(self, env) -> np.ndarray:
        return self.action(self.quadratics(env.observe()))
