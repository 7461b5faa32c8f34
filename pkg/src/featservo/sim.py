"""Target-following environment.

A 4-DOF camera (translation plus yaw, pitch fixed at pi/6 looking down)
flies above a ground plane and follows a box driving along a
piecewise-linear road at 1 m/s, among static and moving distractor boxes.
Frames are ray cast at a supersampled resolution and box-filtered down.

Frames and conventions
----------------------
World: x, y horizontal, z up. Camera: x right, y down, z forward (optical
axis). Actions are normalised to [-1, 1]^4 and map to a twist expressed in
the yaw-aligned robot frame (right, down, forward) plus a yaw rate about the
world vertical; a positive yaw rate turns left.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

DT = 0.1
HORIZON = 100
TAU = 4.0
PITCH = math.pi / 6
FOV = math.pi / 3
TAN_HALF_FOV = math.tan(FOV / 2)
MAX_SPEED = 10.0
MAX_YAW_RATE = math.pi / 2
TARGET_SPEED = 1.0
FOLLOW_HEIGHT = 12.0
TARGET_SIZE = (6.0, 3.5, 2.0)  # length, width, height
ROAD_HALF_WIDTH = 4.0

GROUND_COLOR = np.array([0.30, 0.50, 0.25])
ROAD_COLOR = np.array([0.35, 0.35, 0.35])
SKY_COLOR = np.array([0.70, 0.80, 0.95])

TRAIN_TARGET_COLORS = np.array(
    [
        [0.85, 0.12, 0.12],
        [0.75, 0.18, 0.15],
        [0.80, 0.20, 0.10],
        [0.90, 0.20, 0.20],
        [0.72, 0.10, 0.18],
    ]
)
NOVEL_TARGET_COLORS = np.array(
    [
        [0.88, 0.28, 0.10],
        [0.70, 0.10, 0.30],
        [0.95, 0.25, 0.25],
        [0.66, 0.16, 0.08],
        [0.80, 0.06, 0.26],
    ]
)
DISTRACTOR_COLORS = np.array(
    [
        [0.15, 0.25, 0.75],
        [0.20, 0.35, 0.85],
        [0.10, 0.20, 0.60],
        [0.85, 0.80, 0.20],
        [0.90, 0.90, 0.90],
        [0.60, 0.35, 0.20],
    ]
)
SPLITS = {"train": TRAIN_TARGET_COLORS, "novel": NOVEL_TARGET_COLORS}
N_STATIC_DISTRACTORS = 6


# --- geometry -------------------------------------------------------------------


def robot_axes(yaw: float):
    """Unit right, down and forward vectors of the yaw-aligned robot frame."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([s, -c, 0.0]), np.array([0.0, 0.0, -1.0]), np.array([c, s, 0.0])


def camera_rotation(yaw: float, pitch: float = PITCH) -> np.ndarray:
    """World-from-camera rotation; columns are the camera x, y, z axes.

    Camera x is the robot's right, y is down pitched toward forward, z is
    forward pitched down.
    """
    c, s = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    return np.array([[s, -sp * c, cp * c], [-c, -sp * s, cp * s], [0.0, -cp, -sp]])


def robot_to_camera(pitch: float = PITCH) -> np.ndarray:
    """Rotation taking robot-frame (right, down, forward) vectors to camera coordinates."""
    cp, sp = math.cos(pitch), math.sin(pitch)
    return np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])


@dataclass(frozen=True)
class CameraPose:
    x: float
    y: float
    z: float
    yaw: float

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @functools.cached_property
    def rotation(self) -> np.ndarray:
        return camera_rotation(self.yaw)

    def to_camera(self, p_world) -> np.ndarray:
        return self.rotation.T @ (np.asarray(p_world, dtype=np.float64) - self.position)

    def to_world(self, p_cam) -> np.ndarray:
        return self.rotation @ np.asarray(p_cam, dtype=np.float64) + self.position


@dataclass(frozen=True)
class Path:
    """Piecewise-linear route parameterised by arc length."""

    points: np.ndarray  # (M, 2)

    def __post_init__(self):
        seg = np.diff(self.points, axis=0)
        object.__setattr__(self, "_lengths", np.hypot(seg[:, 0], seg[:, 1]))
        object.__setattr__(self, "_cum", np.concatenate([[0.0], np.cumsum(self._lengths)]))

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def _segment(self, s: float) -> int:
        i = int(np.searchsorted(self._cum, s, side="right")) - 1
        return min(max(i, 0), len(self._lengths) - 1)

    def point(self, s: float) -> np.ndarray:
        i = self._segment(s)
        a, b = self.points[i], self.points[i + 1]
        return a + (b - a) * ((s - self._cum[i]) / self._lengths[i])

    def points_at(self, s: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`point` for an array of arc lengths."""
        s = np.asarray(s, dtype=np.float64)
        return np.column_stack([np.interp(s, self._cum, self.points[:, k]) for k in range(2)])

    def heading(self, s: float) -> float:
        i = self._segment(s)
        d = self.points[i + 1] - self.points[i]
        return math.atan2(d[1], d[0])

    def distance(self, xy: np.ndarray) -> np.ndarray:
        """Exact distance from each ``(..., 2)`` point to the polyline."""
        best = np.full(xy.shape[:-1], np.inf)
        for a, b, ln in zip(self.points[:-1], self.points[1:], self._lengths):
            d = (b - a) / ln
            rel = xy - a
            t = np.clip(rel @ d, 0.0, ln)
            np.minimum(best, np.hypot(rel[..., 0] - t * d[0], rel[..., 1] - t * d[1]), out=best)
        return best


ROAD_CELL = 0.25


@dataclass(frozen=True)
class RoadMap:
    """Road mask rasterised on a ground grid (cells of ``ROAD_CELL`` metres)."""

    origin: np.ndarray  # world xy of cell (0, 0)
    mask: np.ndarray  # (nx, ny) bool

    @classmethod
    def from_path(cls, path: Path, half_width: float = ROAD_HALF_WIDTH) -> "RoadMap":
        margin = half_width + 2.0
        lo = path.points.min(axis=0) - margin
        hi = path.points.max(axis=0) + margin
        shape = tuple(np.ceil((hi - lo) / ROAD_CELL).astype(int) + 1)
        seeds = np.ones(shape, dtype=bool)
        s = np.arange(0.0, path.length, ROAD_CELL / 2)
        pts = path.points_at(s)
        idx = np.rint((pts - lo) / ROAD_CELL).astype(int)
        seeds[idx[:, 0], idx[:, 1]] = False
        dist = ndimage.distance_transform_edt(seeds) * ROAD_CELL
        return cls(lo, dist <= half_width)

    def lookup(self, xy: np.ndarray) -> np.ndarray:
        idx = np.rint((xy - self.origin) / ROAD_CELL).astype(np.int64)
        nx, ny = self.mask.shape
        inside = (idx[:, 0] >= 0) & (idx[:, 0] < nx) & (idx[:, 1] >= 0) & (idx[:, 1] < ny)
        out = np.zeros(len(xy), dtype=bool)
        out[inside] = self.mask[idx[inside, 0], idx[inside, 1]]
        return out


@dataclass(frozen=True)
class Box:
    center: np.ndarray  # (3,)
    half: np.ndarray  # (3,) half extents along (heading, lateral, up)
    yaw: float
    color: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def moved(self, dt: float) -> "Box":
        if not np.any(self.velocity):
            return self
        c = self.center.copy()
        c[:2] += dt * self.velocity
        return replace(self, center=c)

    def corners(self) -> np.ndarray:
        return box_corners(self.center[None], self.half[None], np.array([self.yaw]))[0]


_CORNER_SIGNS = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], dtype=np.float64)


def box_corners(centers: np.ndarray, halves: np.ndarray, yaws: np.ndarray) -> np.ndarray:
    """Corners ``(B, 8, 3)`` of ``B`` yawed boxes."""
    local = _CORNER_SIGNS[None] * halves[:, None, :]
    c, s = np.cos(yaws)[:, None], np.sin(yaws)[:, None]
    x = c * local[..., 0] - s * local[..., 1]
    y = s * local[..., 0] + c * local[..., 1]
    return centers[:, None, :] + np.stack([x, y, local[..., 2]], axis=-1)


@dataclass(frozen=True)
class WorldState:
    camera: CameraPose
    path: Path
    s: float  # target arc length along the path
    target_color: np.ndarray
    distractors: tuple
    t: int = 0
    target_speed: float = TARGET_SPEED
    target_size: tuple = TARGET_SIZE
    p_star_z: float = 0.0
    show_target: bool = True
    road: RoadMap | None = None

    def target_box(self, s: float | None = None) -> Box:
        s = self.s if s is None else s
        L, W, H = self.target_size
        xy = self.path.point(s)
        return Box(np.array([xy[0], xy[1], H / 2]), np.array([L / 2, W / 2, H / 2]), self.path.heading(s), self.target_color)

    @property
    def target_position(self) -> np.ndarray:
        return self.target_box().center

    @property
    def target_heading(self) -> float:
        return self.path.heading(self.s)


@dataclass(frozen=True)
class CostRecord:
    cost: float
    terminated: bool
    reason: str | None  # "too-close", "out-of-fov", "horizon" or None


# --- kinematics and cost ----------------------------------------------------------


def action_to_twist(u) -> np.ndarray:
    """Normalised action to (v_right, v_down, v_forward, yaw_rate) in m/s and rad/s."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if u.shape != (4,):
        raise ValueError(f"actions have 4 coordinates, got {u.shape}")
    if np.any(np.abs(u) > 1.0):
        warnings.warn(f"action {u.tolist()} outside [-1, 1]; clipping", RuntimeWarning, stacklevel=2)
        u = np.clip(u, -1.0, 1.0)
    return np.array([MAX_SPEED * u[0], MAX_SPEED * u[1], MAX_SPEED * u[2], MAX_YAW_RATE * u[3]])


def twist_to_action(twist) -> np.ndarray:
    """Inverse scaling of :func:`action_to_twist`, clipped to the action box."""
    twist = np.asarray(twist, dtype=np.float64)
    return np.clip(twist / np.array([MAX_SPEED, MAX_SPEED, MAX_SPEED, MAX_YAW_RATE]), -1.0, 1.0)


def move_camera(cam: CameraPose, u, dt: float = DT) -> CameraPose:
    """Integrate one step; translation uses the yaw at the start of the step."""
    v = action_to_twist(u)
    r, d, f = robot_axes(cam.yaw)
    p = cam.position + dt * (v[0] * r + v[1] * d + v[2] * f)
    return CameraPose(float(p[0]), float(p[1]), float(p[2]), cam.yaw + dt * v[3])


def target_in_camera_frame(world: WorldState) -> np.ndarray:
    return world.camera.to_camera(world.target_position)


def in_fov(world: WorldState, p: np.ndarray | None = None) -> bool:
    """Closed image rectangle test on the target origin."""
    p = target_in_camera_frame(world) if p is None else p
    if p[2] <= 0:
        return False
    return abs(p[0] / p[2]) <= TAN_HALF_FOV and abs(p[1] / p[2]) <= TAN_HALF_FOV


def servo_cost(p, p_star_z: float) -> float:
    x, y, z = p
    return math.sqrt((x / z) ** 2 + (y / z) ** 2 + (1.0 / z - 1.0 / p_star_z) ** 2)


def step_cost(world: WorldState, p_star_z: float, t: int, horizon: int, tau: float, previous_cost: float) -> CostRecord:
    """Cost of the transition that produced ``world``.

    ``t`` is the 1-based index of the transition; ``previous_cost`` is the
    cost formula evaluated at the state the transition started from.
    """
    p = target_in_camera_frame(world)
    if np.linalg.norm(p) < tau:
        return CostRecord((horizon - t + 1) * previous_cost, True, "too-close")
    if not in_fov(world, p):
        return CostRecord((horizon - t + 1) * previous_cost, True, "out-of-fov")
    return CostRecord(servo_cost(p, p_star_z), False, "horizon" if t >= horizon else None)


# --- rendering --------------------------------------------------------------------


@dataclass(frozen=True)
class _RayGrid:
    dirs0: np.ndarray  # (n*n, 3) world ray directions at zero yaw (camera z component 1)
    ground_t: np.ndarray  # ray parameter of the ground hit per metre of camera height
    ground_xy: np.ndarray  # horizontal ground-hit offset per metre of camera height


@functools.lru_cache(maxsize=8)
def _rays(n: int) -> _RayGrid:
    c = ((np.arange(n) + 0.5) / n - 0.5) * 2.0 * TAN_HALF_FOV
    ys, xs = np.meshgrid(c, c, indexing="ij")
    cam_dirs = np.stack([xs, ys, np.ones_like(xs)], axis=-1).reshape(-1, 3)
    dirs0 = cam_dirs @ camera_rotation(0.0).T
    if np.any(dirs0[:, 2] >= 0):
        raise ValueError("frustum reaches the horizon; ground shortcut invalid")
    t = -1.0 / dirs0[:, 2]
    return _RayGrid(dirs0, t, dirs0[:, :2] * t[:, None])


FACE_SHADE = np.array([0.85, 0.75, 1.0])  # faces normal to box x, y, z axes


def _hit_box(box: Box, origin: np.ndarray, dirs: np.ndarray):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    Rt = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    o = Rt @ (origin - box.center)
    d = dirs @ Rt.T
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-box.half - o) * inv
        t2 = (box.half - o) * inv
    # fmin/fmax skip the NaNs produced by rays lying in a slab plane
    tlo = np.fmin(t1, t2)
    tnear = np.fmax.reduce(tlo, axis=1)
    tfar = np.fmin.reduce(np.fmax(t1, t2), axis=1)
    hit = (tfar >= tnear) & (tnear > 0)
    face = np.argmax(np.where(np.isnan(tlo), -np.inf, tlo), axis=1)
    return hit, tnear, face


def _screen_windows(boxes: list, cam: CameraPose, n: int) -> list:
    """Pixel row/column ranges covering each box, or ``None`` when off screen.

    A box with a corner at or behind the camera plane gets the whole frame.
    """
    if not boxes:
        return []
    centers = np.array([b.center for b in boxes])
    halves = np.array([b.half for b in boxes])
    yaws = np.array([b.yaw for b in boxes])
    pc = (box_corners(centers, halves, yaws) - cam.position) @ cam.rotation
    z = pc[..., 2]
    scale = n / (2.0 * TAN_HALF_FOV)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = pc[..., 0] / z * scale + n / 2
        v = pc[..., 1] / z * scale + n / 2
    out = []
    for i in range(len(boxes)):
        if np.all(z[i] <= 0):
            out.append(None)
        elif np.any(z[i] <= 1e-3):
            out.append((0, n, 0, n))
        else:
            c0, c1 = max(int(math.floor(u[i].min())) - 1, 0), min(int(math.ceil(u[i].max())) + 1, n)
            r0, r1 = max(int(math.floor(v[i].min())) - 1, 0), min(int(math.ceil(v[i].max())) + 1, n)
            out.append((r0, r1, c0, c1) if c0 < c1 and r0 < r1 else None)
    return out


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def render(world: WorldState, resolution: int = 32, supersample: int = 2) -> np.ndarray:
    """RGB observation ``(3, resolution, resolution)`` with values in [0, 1].

    Rays are cast through a ``supersample``-times finer grid and box-filtered.
    Ray elevations do not depend on yaw, so ground intersections reuse
    per-ray offsets computed once per resolution.
    """
    n = resolution * supersample
    cam = world.camera
    rays = _rays(n)
    origin = cam.position
    img = np.empty((n * n, 3))
    if cam.z > 0:
        # every ray of the pitched frustum points below the horizon
        depth = rays.ground_t * cam.z
        img[:] = GROUND_COLOR
        if world.road is not None:
            c, s = math.cos(cam.yaw), math.sin(cam.yaw)
            gx, gy = rays.ground_xy[:, 0], rays.ground_xy[:, 1]
            hits = np.empty((n * n, 2))
            hits[:, 0] = cam.x + cam.z * (c * gx - s * gy)
            hits[:, 1] = cam.y + cam.z * (s * gx + c * gy)
            img[world.road.lookup(hits)] = ROAD_COLOR
    else:
        depth = np.full(n * n, np.inf)
        img[:] = SKY_COLOR

    boxes = list(world.distractors)
    if world.show_target:
        boxes.append(world.target_box())
    img = img.reshape(n, n, 3)
    depth = depth.reshape(n, n)
    dirs0 = rays.dirs0.reshape(n, n, 3)
    Rz = _yaw_matrix(cam.yaw)
    for box, win in zip(boxes, _screen_windows(boxes, cam, n)):
        if win is None:
            continue
        r0, r1, c0, c1 = win
        dirs = dirs0[r0:r1, c0:c1].reshape(-1, 3) @ Rz.T
        hit, t, face = _hit_box(box, origin, dirs)
        shape = (r1 - r0, c1 - c0)
        hit, t, face = hit.reshape(shape), t.reshape(shape), face.reshape(shape)
        closer = hit & (t < depth[r0:r1, c0:c1])
        if not np.any(closer):
            continue
        rows, cols = np.nonzero(closer)
        depth[rows + r0, cols + c0] = t[rows, cols]
        img[rows + r0, cols + c0] = box.color * FACE_SHADE[face[rows, cols], None]

    if supersample > 1:
        img = img.reshape(resolution, supersample, resolution, supersample, 3).mean(axis=(1, 3))
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def project(world: WorldState, points_world: np.ndarray) -> np.ndarray:
    """Camera-frame coordinates of world points, ``(N, 3)``."""
    cam = world.camera
    return (np.asarray(points_world) - cam.position) @ cam.rotation


# --- scene generation ----------------------------------------------------------------


PATH_LENGTH = 120.0
PATH_STEP = 1.0
MAX_CURVATURE = 0.06  # rad per metre


def _random_path(rng: np.random.Generator) -> Path:
    """Smooth route: piecewise-constant curvature over stretches of 8-20 m."""
    heading = rng.uniform(-math.pi, math.pi)
    pts = [np.zeros(2)]
    travelled = 0.0
    while travelled < PATH_LENGTH:
        stretch = rng.uniform(8.0, 20.0)
        kappa = rng.uniform(-MAX_CURVATURE, MAX_CURVATURE)
        for _ in range(int(round(stretch / PATH_STEP))):
            heading += kappa * PATH_STEP
            pts.append(pts[-1] + PATH_STEP * np.array([math.cos(heading), math.sin(heading)]))
        travelled += stretch
    return Path(np.array(pts))


@functools.lru_cache(maxsize=512)
def _road_for_seed(seed: int):
    rng = np.random.default_rng(seed)
    path = _random_path(rng)
    return path, RoadMap.from_path(path), rng.bit_generator.state


def _distractors(rng: np.random.Generator, path: Path, s0: float) -> tuple:
    out = []
    for _ in range(N_STATIC_DISTRACTORS):
        s = float(np.clip(s0 + rng.uniform(-10.0, 30.0), 0.0, path.length))
        xy = path.point(s)
        h = path.heading(s)
        side = rng.choice([-1.0, 1.0])
        off = rng.uniform(ROAD_HALF_WIDTH + 1.0, 14.0)
        normal = np.array([-math.sin(h), math.cos(h)])
        pos = xy + side * off * normal
        color = DISTRACTOR_COLORS[rng.integers(len(DISTRACTOR_COLORS))]
        if rng.random() < 0.35:
            height = rng.uniform(5.0, 9.0)
            half = np.array([0.4, 0.4, height / 2])
        else:
            height = rng.uniform(1.5, 4.0)
            half = np.array([rng.uniform(1.0, 2.5), rng.uniform(1.0, 2.5), height / 2])
        out.append(Box(np.array([pos[0], pos[1], half[2]]), half, float(rng.uniform(-math.pi, math.pi)), color))
    # one moving distractor crossing the route ahead of the target
    s = float(np.clip(s0 + rng.uniform(5.0, 20.0), 0.0, path.length))
    xy = path.point(s)
    h = path.heading(s) + rng.choice([-1.0, 1.0]) * rng.uniform(math.pi / 3, 2 * math.pi / 3)
    start = xy - 12.0 * np.array([math.cos(h), math.sin(h)])
    vel = 1.5 * np.array([math.cos(h), math.sin(h)])
    color = DISTRACTOR_COLORS[rng.integers(3)]
    half = np.array([2.0, 1.0, 0.8])
    out.append(Box(np.array([start[0], start[1], half[2]]), half, h, color, vel))
    return tuple(out)


def follow_pose(target_center: np.ndarray, heading: float, height: float = FOLLOW_HEIGHT, azimuth: float = 0.0) -> CameraPose:
    """Camera pose that puts the target origin on the optical axis.

    ``azimuth`` is measured from the back of the target; the camera yaw
    faces the target.
    """
    horiz = (height - target_center[2]) / math.tan(PITCH)
    back = heading + math.pi + azimuth
    x = target_center[0] + horiz * math.cos(back)
    y = target_center[1] + horiz * math.sin(back)
    return CameraPose(float(x), float(y), float(height), float(back - math.pi))


def sample_cylindrical_pose(rng: np.random.Generator, target_center: np.ndarray, heading: float) -> CameraPose:
    h = rng.uniform(12.0, 18.0)
    az = rng.uniform(-math.pi / 2, math.pi / 2)
    return follow_pose(target_center, heading, h, az)


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = HORIZON
    tau: float = TAU
    resolution: int = 32
    supersample: int = 2
    target_speed: float = TARGET_SPEED


class FollowEnv:
    """Stateful wrapper around :class:`WorldState` for rollouts."""

    def __init__(self, config: EnvConfig = EnvConfig()):
        self.config = config
        self.world: WorldState | None = None
        self.goal: np.ndarray | None = None
        self._obs: np.ndarray | None = None
        self._prev_cost = 0.0
        self.done = False

    def reset(self, seed: int, split: str = "train", mode: str = "evaluation", render_goal: bool = True):
        """Place a fresh scene; returns ``(world, goal observation)``.

        The same seed gives the same route, layout and camera on both splits;
        only the target colour differs.
        """
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        if mode not in ("evaluation", "data"):
            raise ValueError(f"unknown reset mode {mode!r}")
        path, road, state = _road_for_seed(int(seed))
        rng = np.random.default_rng()
        rng.bit_generator.state = state
        s0 = float(rng.uniform(40.0, 50.0))
        color = SPLITS[split][rng.integers(5)]
        distractors = _distractors(rng, path, s0)
        world = WorldState(
            CameraPose(0.0, 0.0, FOLLOW_HEIGHT, 0.0), path, s0, color, distractors, 0, self.config.target_speed, road=road
        )
        box = world.target_box()
        if mode == "evaluation":
            cam = follow_pose(box.center, box.yaw)
        else:
            cam = sample_cylindrical_pose(rng, box.center, box.yaw)
        world = replace(world, camera=cam)
        p = target_in_camera_frame(world)
        world = replace(world, p_star_z=float(p[2]) if mode == "evaluation" else _canonical_depth())
        self.world = world
        self._rng = rng
        self._prev_cost = servo_cost(target_in_camera_frame(world), world.p_star_z)
        self.done = False
        self._obs = None
        self.goal = self.observe() if render_goal else None
        return world, self.goal

    def observe(self) -> np.ndarray:
        if self._obs is None:
            self._obs = render(self.world, self.config.resolution, self.config.supersample)
        return self._obs

    def advance(self, world: WorldState, u) -> WorldState:
        cam = move_camera(world.camera, u)
        s = world.s + world.target_speed * DT
        distractors = tuple(b.moved(DT) for b in world.distractors)
        return replace(world, camera=cam, s=s, distractors=distractors, t=world.t + 1)

    def peek_target(self, steps: int = 1) -> Box:
        """Ground-truth target box ``steps`` steps ahead (camera-independent)."""
        w = self.world
        return w.target_box(w.s + steps * w.target_speed * DT)

    def step(self, u) -> CostRecord:
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        world = self.advance(self.world, u)
        rec = step_cost(world, world.p_star_z, world.t, self.config.horizon, self.config.tau, self._prev_cost)
        self.world = world
        self._obs = None
        if not rec.terminated:
            self._prev_cost = rec.cost
        self.done = rec.terminated or world.t >= self.config.horizon
        return rec


def _canonical_depth() -> float:
    return (FOLLOW_HEIGHT - TARGET_SIZE[2] / 2) / math.sin(PITCH)


# --- rollouts and data ------------------------------------------------------------------


@dataclass
class Trajectory:
    actions: list = field(default_factory=list)
    costs: list = field(default_factory=list)
    terminated: bool = False
    reason: str | None = None

    @property
    def total_cost(self) -> float:
        return float(sum(self.costs))

    def __len__(self):
        return len(self.costs)

    def to_dict(self) -> dict:
        return {
            "actions": [list(map(float, a)) for a in self.actions],
            "costs": [float(c) for c in self.costs],
            "terminated": self.terminated,
            "reason": self.reason,
        }


def rollout(policy, env: FollowEnv, seed: int, split: str = "train", horizon: int | None = None):
    """Run ``policy`` for one episode; returns ``(trajectory, total cost)``.

    ``policy`` exposes ``reset(env)`` (called after the scene is placed) and
    ``__call__(env) -> action``.
    """
    if horizon is not None and horizon != env.config.horizon:
        env = FollowEnv(replace(env.config, horizon=horizon))
    env.reset(seed, split, "evaluation", render_goal=getattr(policy, "needs_images", True))
    policy.reset(env)
    traj = Trajectory()
    while not env.done:
        u = np.asarray(policy(env), dtype=np.float64)
        rec = env.step(u)
        traj.actions.append(u)
        traj.costs.append(rec.cost)
        if rec.terminated:
            traj.terminated = True
            traj.reason = rec.reason
    return traj, traj.total_cost


class HandCodedPolicy:
    """Proportional move toward a target pose held relative to the target.

    Used for dynamics data collection; the target pose is drawn with the same
    cylindrical scheme as the initial pose, once per trajectory.
    """

    needs_images = False

    def __init__(self, rng: np.random.Generator, noise: float = 0.2, gain: float = 0.3):
        self.rng = rng
        self.noise = noise
        self.gain = gain

    def reset(self, env: FollowEnv):
        w = env.world
        self.height = self.rng.uniform(12.0, 18.0)
        self.azimuth = self.rng.uniform(-math.pi / 2, math.pi / 2)

    def target_pose(self, env: FollowEnv) -> CameraPose:
        box = env.world.target_box()
        return follow_pose(box.center, box.yaw, self.height, self.azimuth)

    def __call__(self, env: FollowEnv) -> np.ndarray:
        cam = env.world.camera
        goal = self.target_pose(env)
        u = pose_error_action(cam, goal, self.gain)
        if self.noise > 0:
            u = u + self.rng.normal(0.0, self.noise, size=4)
        return np.clip(u, -1.0, 1.0)


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def pose_error_action(cam: CameraPose, goal: CameraPose, gain: float) -> np.ndarray:
    """Action moving ``gain`` of the way from ``cam`` to ``goal`` in one step."""
    r, d, f = robot_axes(cam.yaw)
    delta = goal.position - cam.position
    disp = gain * np.array([delta @ r, delta @ d, delta @ f])
    dyaw = gain * wrap_angle(goal.yaw - cam.yaw)
    twist = np.concatenate([disp, [dyaw]]) / DT
    return twist_to_action(twist)


def generate_dataset(n_traj: int = 100, horizon: int = HORIZON, seed: int = 0, config: EnvConfig = EnvConfig(), noise: float = 0.2):
    """Roll the hand-coded policy; returns ``(frames, actions)``.

    ``frames`` is ``(n_traj, horizon + 1, 3, R, R)`` float32, ``actions`` is
    ``(n_traj, horizon, 4)``; triplet ``i, t`` is
    ``(frames[i, t], actions[i, t], frames[i, t + 1])``. Data trajectories
    never terminate early.
    """
    R = config.resolution
    frames = np.empty((n_traj, horizon + 1, 3, R, R), dtype=np.float32)
    actions = np.empty((n_traj, horizon, 4))
    ss = np.random.SeedSequence(seed)
    for i, child in enumerate(ss.spawn(n_traj)):
        rng = np.random.default_rng(child)
        env = FollowEnv(config)
        env.reset(int(rng.integers(2**31)), "train", "data", render_goal=False)
        policy = HandCodedPolicy(rng, noise)
        policy.reset(env)
        world = env.world
        frames[i, 0] = render(world, R, config.supersample)
        for t in range(horizon):
            env.world = world
            u = policy(env)
            world = env.advance(world, u)
            actions[i, t] = u
            frames[i, t + 1] = render(world, R, config.supersample)
    return frames, actions
