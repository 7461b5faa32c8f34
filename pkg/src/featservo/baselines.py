"""Classical comparison controllers and derivative-free weight search.

IBVS servoes four ground-truth target points in the image, PBVS servoes the
ground-truth target pose; both optionally use the target's pose one step
ahead. CEM tunes policy weights by rollout cost, and ``gain_sweep`` picks a
controller gain on the validation set.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import sim

log = logging.getLogger(__name__)

GAIN_GRID = np.round(np.arange(1, 41) * 0.05, 10)


# --- image-based servoing -------------------------------------------------------------


def _check_points(points, depths):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    if len(points) != len(depths):
        raise ValueError("one depth per point is required")
    if np.any(depths <= 0):
        raise ValueError("interaction matrix needs positive depths")
    return points, depths


def interaction_matrix_6dof(points, depths) -> np.ndarray:
    """Classical point-feature Jacobian w.r.t. the camera twist (v, omega) in camera frame."""
    points, depths = _check_points(points, depths)
    rows = []
    for (x, y), Z in zip(points, depths):
        rows.append([-1.0 / Z, 0.0, x / Z, x * y, -(1.0 + x * x), y])
        rows.append([0.0, -1.0 / Z, y / Z, 1.0 + y * y, -x * y, -x])
    return np.array(rows)


def interaction_matrix(points, depths) -> np.ndarray:
    """``(2N, 4)`` Jacobian for camera-frame ``(v_x, v_y, v_z, omega_z)``.

    The rotation columns about the camera x and y axes are dropped.
    """
    return interaction_matrix_6dof(points, depths)[:, [0, 1, 2, 5]]


def rig_twist_map(pitch: float = sim.PITCH) -> np.ndarray:
    """``(6, 4)`` map from the rig's controls to the camera-frame twist.

    Controls are the robot-frame velocity (right, down, forward) and the yaw
    rate about the world vertical; the camera sits at the robot origin.
    """
    G = np.zeros((6, 4))
    G[:3, :3] = sim.robot_to_camera(pitch)
    G[3:, 3] = sim.robot_to_camera(pitch) @ np.array([0.0, -1.0, 0.0])  # world up in camera coords
    return G


def rig_interaction_matrix(points, depths, pitch: float = sim.PITCH) -> np.ndarray:
    """Point-feature Jacobian w.r.t. the pitched rig's four controls."""
    return interaction_matrix_6dof(points, depths) @ rig_twist_map(pitch)


def ibvs_control(current, depths, goal, gain: float, target_motion=None, pitch: float = sim.PITCH):
    """Classical IBVS law on normalised image points.

    Parameters
    ----------
    current, goal : (N, 2) normalised image coordinates.
    depths : (N,) ground-truth depths of the current points.
    target_motion : optional (N, 2) image displacement the target's own motion
        will cause over the next step; it is added to the error so the law
        anticipates it.

    Returns
    -------
    (action, ok)
        ``ok`` is False (and the action zero) when fewer than two points have
        positive depth.
    """
    if gain <= 0:
        raise ValueError("gain must be positive")
    current = np.asarray(current, dtype=np.float64).reshape(-1, 2)
    goal = np.asarray(goal, dtype=np.float64).reshape(-1, 2)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    visible = depths > 0
    if visible.sum() < 2:
        return np.zeros(4), False
    e = current - goal
    if target_motion is not None:
        e = e + np.asarray(target_motion, dtype=np.float64).reshape(-1, 2)
    e = e[visible].reshape(-1)
    L = rig_interaction_matrix(current[visible], depths[visible], pitch)
    disp = -gain * (np.linalg.pinv(L) @ e)
    return sim.twist_to_action(disp / sim.DT), True


def target_points(box: sim.Box) -> np.ndarray:
    """Four fixed feature points: the top-face corners of the target box."""
    c = box.corners()
    return c[c[:, 2] > box.center[2]]


def image_points(world: sim.WorldState, points_world: np.ndarray):
    """Normalised image coordinates and depths of world points."""
    pc = sim.project(world, points_world)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = pc[:, :2] / z[:, None]
    return xy, z


class IbvsPolicy:
    """IBVS on the ground-truth target corners; goal points come from the first frame."""

    needs_images = False

    def __init__(self, gain: float, next_frame: bool = False):
        self.gain = gain
        self.next_frame = next_frame
        self.failures = 0

    def reset(self, env):
        self.goal, _ = image_points(env.world, target_points(env.world.target_box()))

    def __call__(self, env) -> np.ndarray:
        world = env.world
        pts = target_points(world.target_box())
        s, z = image_points(world, pts)
        motion = None
        if self.next_frame:
            s_next, _ = image_points(world, target_points(env.peek_target(1)))
            motion = s_next - s
        u, ok = ibvs_control(s, z, self.goal, self.gain, motion)
        self.failures += not ok
        return u


# --- position-based servoing -----------------------------------------------------------


def _rotate_horizontal(v: np.ndarray, angle: float) -> np.ndarray:
    """Rotate a robot-frame (right, down, forward) vector by ``angle`` counter-clockwise seen from above."""
    c, s = math.cos(angle), math.sin(angle)
    r, d, f = v
    return np.array([c * r - s * f, d, s * r + c * f])


def target_pose_in_camera(world: sim.WorldState, box: sim.Box | None = None):
    """Target position in camera coordinates and its yaw relative to the camera."""
    box = world.target_box() if box is None else box
    p = world.camera.to_camera(box.center)
    return p, sim.wrap_angle(box.yaw - world.camera.yaw)


def pbvs_control(target, desired, gain: float, ignore_rotation: bool = False, pitch: float = sim.PITCH) -> np.ndarray:
    """Pose-error law for the translation + yaw rig.

    ``target`` and ``desired`` are ``(position in camera coordinates, yaw
    relative to the camera)`` pairs. The command moves the camera ``gain`` of
    the way to the pose at which the target would appear at ``desired``.
    With ``ignore_rotation`` only the translational error is used and the yaw
    command is zero.
    """
    if gain <= 0:
        raise ValueError("gain must be positive")
    (p, yaw), (p_star, yaw_star) = target, desired
    R = sim.robot_to_camera(pitch)
    q = R.T @ np.asarray(p, dtype=np.float64)
    q_star = R.T @ np.asarray(p_star, dtype=np.float64)
    if ignore_rotation:
        dyaw = 0.0
        disp = q - q_star
    else:
        dyaw = sim.wrap_angle(yaw - yaw_star)
        disp = q - _rotate_horizontal(q_star, dyaw)
    twist = gain * np.concatenate([disp, [dyaw]]) / sim.DT
    return sim.twist_to_action(twist)


class PbvsPolicy:
    needs_images = False

    def __init__(self, gain: float, next_frame: bool = False, ignore_rotation: bool = False):
        self.gain = gain
        self.next_frame = next_frame
        self.ignore_rotation = ignore_rotation

    def reset(self, env):
        self.desired = target_pose_in_camera(env.world)

    def __call__(self, env) -> np.ndarray:
        box = env.peek_target(1) if self.next_frame else None
        return pbvs_control(target_pose_in_camera(env.world, box), self.desired, self.gain, self.ignore_rotation)


# --- cross-entropy method -----------------------------------------------------------------


@dataclass
class CemResult:
    mean: np.ndarray
    std: np.ndarray
    history: list = field(default_factory=list)


def cem_population(d: int) -> tuple[int, int]:
    """Population size and elite count for a ``d``-dimensional search."""
    if d < 1:
        raise ValueError("parameter dimension must be >= 1")
    pop = 3 * d
    return pop, max(1, int(round(0.2 * pop)))


def cem_optimize(evaluate, d: int, iterations: int = 10, seed: int = 0, init_mean=1.0, init_std=0.5) -> CemResult:
    """Gaussian CEM over non-negative parameters.

    ``evaluate(params, iteration)`` returns the mean rollout cost of the
    (already projected) parameter vector; the iteration index lets callers
    share rollout seeds within an iteration. Returns the final-iteration
    mean, projected onto the non-negative orthant.
    """
    rng = np.random.default_rng(seed)
    pop, n_elite = cem_population(d)
    mean = np.broadcast_to(np.asarray(init_mean, dtype=np.float64), (d,)).copy()
    std = np.broadcast_to(np.asarray(init_std, dtype=np.float64), (d,)).copy()
    history = []
    for it in range(iterations):
        samples = np.maximum(mean + std * rng.standard_normal((pop, d)), 0.0)
        costs = np.array([evaluate(x, it) for x in samples])
        order = np.argsort(costs, kind="stable")
        elite = samples[order[:n_elite]]
        history.append(
            {
                "iteration": it + 1,
                "mean": mean.tolist(),
                "std": std.tolist(),
                "costs": costs.tolist(),
                "elite_mean_cost": float(costs[order[:n_elite]].mean()),
            }
        )
        mean = elite.mean(axis=0)
        std = elite.std(axis=0)
        log.info("cem iteration %d: elite cost %.4f", it + 1, history[-1]["elite_mean_cost"])
    return CemResult(np.maximum(mean, 0.0), std, history)


# --- gain selection -------------------------------------------------------------------------


def gain_sweep(evaluate, gains=GAIN_GRID):
    """Gain with the lowest validation cost; ties go to the smaller gain.

    ``evaluate(gain)`` returns the mean validation cost. Returns
    ``(best_gain, costs)`` with ``costs`` aligned to ``sorted(gains)``.
    """
    gains = np.sort(np.asarray(gains, dtype=np.float64))
    costs = np.array([evaluate(float(g)) for g in gains])
    best = int(np.flatnonzero(costs == costs.min())[0]) if np.all(np.isfinite(costs)) else int(np.nanargmin(costs))
    return float(gains[best]), costs
