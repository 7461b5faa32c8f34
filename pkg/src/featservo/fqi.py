"""Fitted Q-iteration for the servoing weights.

Each inner iteration is two convex fits on a fixed batch of transitions:

1. a joint fit of a non-negative scale ``alpha`` on the previous weights and
   a bias ``b``, for both the current and the bootstrapped Q-function (the
   greedy next action is unaffected by ``alpha`` and ``b``, so it is
   computed once);
2. a non-negative ridge fit of ``(theta, b)`` against targets bootstrapped
   from the step-1 parameters.

Samples are regathered for every sampling iteration with the current policy
plus clipped Gaussian exploration noise; the returned weights are the best
validation performer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import policy as pol
from . import solvers

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FqiConfig:
    sampling_iterations: int = 2
    fqi_iterations: int = 10
    trajectories: int = 10
    gamma: float = 0.9
    exploration: float = 0.2
    nu: float = 0.1
    validation_trajectories: int = 10

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if self.nu < 0 or self.exploration < 0:
            raise ValueError("regularisation and exploration noise must be non-negative")
        if min(self.sampling_iterations, self.fqi_iterations, self.trajectories) < 1:
            raise ValueError("iteration and trajectory counts must be positive")


@dataclass(frozen=True)
class Transition:
    """One step, stored through the per-feature quadratics of both states.

    ``next_quadratics`` is ``None`` for terminal transitions, whose
    bootstrap term is dropped.
    """

    quadratics: pol.FeatureQuadratics
    u: np.ndarray
    cost: float
    next_quadratics: pol.FeatureQuadratics | None
    terminal: bool


class BellmanBatch:
    """Stacked transitions with ``phi(s_t, u_t)`` precomputed.

    The next-state quadratics are kept so the greedy next action and its
    features can be recomputed in one batched solve for any weights.
    """

    def __init__(self, transitions: list[Transition]):
        if not transitions:
            raise ValueError("empty batch")
        self.n = len(transitions)
        self.phi_t = np.stack([tr.quadratics.phi(tr.u) for tr in transitions])
        self.cost = np.array([tr.cost for tr in transitions], dtype=np.float64)
        if not np.all(np.isfinite(self.cost)):
            raise ValueError("non-finite costs in batch")
        self.terminal = np.array([tr.terminal for tr in transitions], dtype=bool)
        ref = transitions[0].quadratics
        F, J = ref.g.shape
        self.n_features, self.n_controls = F, J
        self.A = np.zeros((self.n, F, J, J))
        self.g = np.zeros((self.n, F, J))
        self.k = np.zeros((self.n, F))
        for i, tr in enumerate(transitions):
            if tr.next_quadratics is not None:
                self.A[i], self.g[i], self.k[i] = tr.next_quadratics.A, tr.next_quadratics.g, tr.next_quadratics.k
            elif not tr.terminal:
                raise ValueError("non-terminal transition without a next state")
        self.continues = (~self.terminal).astype(np.float64)

    @classmethod
    def from_arrays(cls, phi_t, cost, terminal, A, g, k) -> "BellmanBatch":
        """Build a batch directly from arrays (used by tests and tools)."""
        self = cls.__new__(cls)
        self.phi_t = np.asarray(phi_t, dtype=np.float64)
        self.n = self.phi_t.shape[0]
        if self.n == 0:
            raise ValueError("empty batch")
        self.cost = np.asarray(cost, dtype=np.float64)
        self.terminal = np.asarray(terminal, dtype=bool)
        self.A, self.g, self.k = (np.asarray(a, dtype=np.float64) for a in (A, g, k))
        self.n_features, self.n_controls = self.g.shape[1:]
        self.continues = (~self.terminal).astype(np.float64)
        return self

    def greedy(self, weights: pol.PolicyWeights):
        """Greedy next actions ``(N, J)`` and their features ``(N, P)``."""
        w, lam = weights.w, weights.lam
        A = np.einsum("f,nfij->nij", w, self.A) + np.diag(lam)
        if np.min(lam) == 0:
            A = A + pol.JITTER * np.eye(self.n_controls)
        A = 0.5 * (A + np.swapaxes(A, 1, 2))
        g = np.einsum("f,nfi->ni", w, self.g)
        try:
            L = np.linalg.cholesky(2.0 * A)
        except np.linalg.LinAlgError:
            raise ValueError(f"degenerate weights: servoing objective not positive definite (lambda={lam.tolist()})") from None
        z = np.linalg.solve(L, -g[..., None])
        u = np.clip(np.linalg.solve(np.swapaxes(L, 1, 2), z)[..., 0], -1.0, 1.0)
        feat = np.einsum("ni,nfij,nj->nf", u, self.A, u) + np.einsum("nfi,ni->nf", self.g, u) + self.k
        return u, np.concatenate([feat, u * u], axis=1)

    def next_values(self, weights: pol.PolicyWeights, phi_next: np.ndarray | None = None) -> np.ndarray:
        """``min_u Q(s_{t+1}, u)``, zero at terminal samples."""
        if phi_next is None:
            _, phi_next = self.greedy(weights)
        return self.continues * (phi_next @ weights.theta + weights.b)


def bellman_error(batch: BellmanBatch, weights: pol.PolicyWeights, gamma: float) -> float:
    q = batch.phi_t @ weights.theta + weights.b
    target = batch.cost + gamma * batch.next_values(weights)
    r = q - target
    return float(r @ r / batch.n)


def _scale_bias_terms(batch: BellmanBatch, prev: pol.PolicyWeights, gamma: float, phi_next):
    theta = prev.theta
    d = (batch.phi_t - gamma * batch.continues[:, None] * phi_next) @ theta
    e = np.where(batch.terminal, 1.0, 1.0 - gamma)
    return d, e


def fit_alpha_bias(batch: BellmanBatch, prev: pol.PolicyWeights, gamma: float, nu: float, phi_next=None):
    """Scale/bias fit; returns ``(alpha, b, fit)`` with the solver details."""
    if phi_next is None:
        _, phi_next = batch.greedy(prev)
    d, e = _scale_bias_terms(batch, prev, gamma, phi_next)
    theta = prev.theta
    fit = solvers.scale_bias(d, e, batch.cost, nu * float(theta @ theta))
    return fit.alpha, fit.b, fit


def fit_theta_bias(batch: BellmanBatch, half: pol.PolicyWeights, gamma: float, nu: float, phi_next=None):
    """Non-negative ridge fit of ``(theta, b)`` against targets bootstrapped from ``half``."""
    targets = batch.cost + gamma * batch.next_values(half, phi_next)
    fit = solvers.nonneg_ridge(batch.phi_t, targets, nu)
    return pol.PolicyWeights.from_theta(fit.theta, batch.n_features, fit.b), fit, targets


def fqi_iteration(batch: BellmanBatch, prev: pol.PolicyWeights, gamma: float, nu: float):
    """One two-phase update; returns the new weights and a diagnostics record."""
    _, phi_next = batch.greedy(prev)
    alpha, b_half, sb = fit_alpha_bias(batch, prev, gamma, nu, phi_next)
    d, e = _scale_bias_terms(batch, prev, gamma, phi_next)
    theta_prev = prev.theta
    sb_feasible = solvers.scale_bias_objective(d, e, batch.cost, 1.0, prev.b, nu * float(theta_prev @ theta_prev))
    half = prev.scaled(alpha, b_half)
    # greedy actions are invariant to alpha > 0; at alpha = 0 the value is constant
    new, fit, targets = fit_theta_bias(batch, half, gamma, nu, phi_next)
    ridge_feasible = solvers.ridge_objective(batch.phi_t, targets, half.theta, half.b, nu)
    record = {
        "alpha": alpha,
        "b_half": b_half,
        "b": new.b,
        "scale_objective": sb.objective,
        "scale_objective_at_previous": sb_feasible,
        "ridge_objective": fit.objective,
        "ridge_objective_at_half": ridge_feasible,
        "kkt_residual": fit.kkt_residual,
        "theta_min": float(new.theta.min()),
        "bellman_error_previous": bellman_error(batch, prev, gamma),
        "bellman_error_half": bellman_error(batch, half, gamma),
        "bellman_error": bellman_error(batch, new, gamma),
        "theta": new.theta.tolist(),
    }
    return new, record


def check_record(record: dict, slack: float = 1e-9) -> list[str]:
    """Violated feasibility bounds of one iteration record (empty when all hold)."""
    bad = []
    tol_sb = slack * max(1.0, abs(record["scale_objective_at_previous"]))
    if record["scale_objective"] > record["scale_objective_at_previous"] + tol_sb:
        bad.append("scale/bias optimum above the (1, b_prev) objective")
    tol_r = slack * max(1.0, abs(record["ridge_objective_at_half"]))
    if record["ridge_objective"] > record["ridge_objective_at_half"] + tol_r:
        bad.append("ridge optimum above the objective at the half-step parameters")
    if record["theta_min"] < 0:
        bad.append("negative weight")
    if record["kkt_residual"] > solvers.KKT_TOL:
        bad.append("KKT residual above tolerance")
    return bad


# --- sampling loop ------------------------------------------------------------------


def gather(env, agent: pol.ServoPolicy, seeds, split: str = "train") -> list[Transition]:
    """Roll ``agent`` (exploration noise included) from each seed."""
    out = []
    for seed in seeds:
        env.reset(int(seed), split, "evaluation")
        agent.reset(env)
        fq = agent.quadratics(env.observe())
        while not env.done:
            u = agent.action(fq)
            rec = env.step(u)
            if not math.isfinite(rec.cost):
                raise FloatingPointError(f"non-finite cost at seed {seed}, step {env.world.t}")
            nxt = None if rec.terminated else agent.quadratics(env.observe())
            out.append(Transition(fq, u, rec.cost, nxt, rec.terminated))
            fq = nxt
    return out


def evaluate_weights(env, model, weights, featurizer, standardizer, seeds, split="train") -> np.ndarray:
    """Total cost of the noiseless policy on each seed."""
    from .sim import rollout

    agent = pol.ServoPolicy(model, weights, featurizer, standardizer)
    return np.array([rollout(agent, env, int(s), split)[1] for s in seeds])


@dataclass
class FqiResult:
    weights: pol.PolicyWeights
    history: list = field(default_factory=list)  # one record per inner iteration
    validation: list = field(default_factory=list)  # one record per candidate
    n_training_trajectories: int = 0

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.to_dict(),
            "history": self.history,
            "validation": self.validation,
            "n_training_trajectories": self.n_training_trajectories,
        }


def fqi_run(
    env,
    model,
    weights0: pol.PolicyWeights,
    featurizer: str,
    standardizer,
    config: FqiConfig = FqiConfig(),
    seed: int = 0,
    validation_seeds=None,
    split: str = "train",
) -> FqiResult:
    """Alternate sample gathering and fitted Q-iteration.

    Training seeds are drawn from ``seed``; ``validation_seeds`` are fixed
    and shared with other methods. The initial weights are evaluated too and
    compete for the final choice.
    """
    if np.any(weights0.theta < 0):
        raise ValueError("initial weights must be non-negative")
    rng = np.random.default_rng(seed)
    if validation_seeds is None:
        validation_seeds = range(config.validation_trajectories)
    validation_seeds = [int(s) for s in validation_seeds]

    def validate(weights, label):
        costs = evaluate_weights(env, model, weights, featurizer, standardizer, validation_seeds, split)
        rec = {"candidate": label, "mean_cost": float(costs.mean()), "weights": weights.to_dict()}
        log.info("validation %s: %.4f", label, rec["mean_cost"])
        return rec

    result = FqiResult(weights0)
    result.validation.append(validate(weights0, "initial"))
    current = weights0
    for s in range(config.sampling_iterations):
        traj_seeds = rng.integers(2**31, 2**62, size=config.trajectories)
        agent = pol.ServoPolicy(model, current, featurizer, standardizer, config.exploration, np.random.default_rng(rng.integers(2**63)))
        batch = BellmanBatch(gather(env, agent, traj_seeds, split))
        result.n_training_trajectories += config.trajectories
        for k in range(config.fqi_iterations):
            current, rec = fqi_iteration(batch, current, config.gamma, config.nu)
            rec = {"sampling_iteration": s + 1, "fqi_iteration": k + 1, "n_samples": batch.n, **rec}
            bad = check_record(rec)
            if bad:
                log.warning("iteration %d/%d: %s", s + 1, k + 1, "; ".join(bad))
            result.history.append(rec)
        result.validation.append(validate(current, f"sampling-{s + 1}"))
    best = min(result.validation, key=lambda r: r["mean_cost"])
    result.weights = pol.PolicyWeights.from_dict(best["weights"])
    return result


def config_dict(config: FqiConfig) -> dict:
    return asdict(config)
