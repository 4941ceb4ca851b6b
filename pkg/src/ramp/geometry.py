"""Workspace geometry: obstacles, point clouds, environments, collisions.

The workspace is the axis-aligned box [-1, 1]^d.  Obstacles are circles
(spheres in 3-D) or axis-aligned boxes; each carries a point cloud of 64
points, half sampled on the boundary and half uniformly in the interior.
Collision queries always test against the parametric shapes — the cloud
is a sensing abstraction for the planner, not collision ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

WORKSPACE_LO = -1.0
WORKSPACE_HI = 1.0
CLOUD_POINTS = 64


@dataclass(frozen=True)
class Circle:
    center: tuple[float, ...]
    radius: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64)
        if self.radius <= 0.0:
            raise ValueError("circle radius must be positive")
        if np.any(np.abs(c) + self.radius > WORKSPACE_HI):
            raise ValueError("circle extends outside the workspace")
        object.__setattr__(self, "center", tuple(float(v) for v in c))


@dataclass(frozen=True)
class Box:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or not np.all(lo < hi):
            raise ValueError("box needs lo < hi componentwise")
        if np.any(lo < WORKSPACE_LO) or np.any(hi > WORKSPACE_HI):
            raise ValueError("box extends outside the workspace")
        object.__setattr__(self, "lo", tuple(float(v) for v in lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in hi))


Obstacle = Union[Circle, Box]


def obstacle_distance(obstacle: Obstacle, points: np.ndarray) -> np.ndarray:
    """Signed distance from points (..., d) to the obstacle boundary.

    Negative inside, zero on the boundary, positive outside.
    """
    p = np.asarray(points, dtype=np.float64)
    if isinstance(obstacle, Circle):
        return np.linalg.norm(p - np.asarray(obstacle.center), axis=-1) - obstacle.radius
    lo = np.asarray(obstacle.lo)
    hi = np.asarray(obstacle.hi)
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    q = np.abs(p - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def inflate(obstacle: Obstacle, amount: float) -> Obstacle:
    """Grow an obstacle by a safety margin (robot radius folded in)."""
    if amount == 0.0:
        return obstacle
    if isinstance(obstacle, Circle):
        return Circle(obstacle.center, obstacle.radius + amount)
    lo = np.asarray(obstacle.lo) - amount
    hi = np.asarray(obstacle.hi) + amount
    return Box(tuple(lo), tuple(hi))


def sample_obstacle_points(obstacle: Obstacle, n: int, rng: np.random.Generator) -> np.ndarray:
    """n cloud points for one obstacle: floor(n/2) on the boundary, the
    rest uniform in the interior.  Deterministic given the generator."""
    if n < 1:
        raise ValueError("need at least one point")
    n_boundary = n // 2
    n_interior = n - n_boundary
    if isinstance(obstacle, Circle):
        c = np.asarray(obstacle.center)
        d = c.size
        dirs = rng.standard_normal((n_boundary, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        boundary = c + obstacle.radius * dirs
        dirs_i = rng.standard_normal((n_interior, d))
        dirs_i /= np.linalg.norm(dirs_i, axis=1, keepdims=True)
        radii = obstacle.radius * rng.uniform(0.0, 1.0, n_interior) ** (1.0 / d)
        interior = c + radii[:, None] * dirs_i
        return np.concatenate([boundary, interior], axis=0)

    lo = np.asarray(obstacle.lo)
    hi = np.asarray(obstacle.hi)
    size = hi - lo
    d = lo.size
    # Faces weighted by their area so boundary coverage is uniform.
    areas = np.array([np.prod(np.delete(size, i)) for i in range(d)])
    weights = np.repeat(areas, 2)
    weights = weights / weights.sum()
    faces = rng.choice(2 * d, size=n_boundary, p=weights)
    boundary = lo + rng.uniform(0.0, 1.0, (n_boundary, d)) * size
    for k in range(n_boundary):
        axis, side = divmod(int(faces[k]), 2)
        boundary[k, axis] = hi[axis] if side else lo[axis]
    interior = lo + rng.uniform(0.0, 1.0, (n_interior, d)) * size
    return np.concatenate([boundary, interior], axis=0)


@dataclass(frozen=True)
class Environment:
    """Immutable scene: obstacles plus their sampled point cloud.

    The cloud has shape (n_obstacles, points_per_obstacle, d_space) and
    is regenerable from the obstacles and ``cloud_seed``; environment
    files never store it.
    """

    env_id: str
    d_space: int
    obstacles: tuple[Obstacle, ...]
    cloud: np.ndarray
    cloud_seed: int

    def __post_init__(self):
        cloud = np.asarray(self.cloud, dtype=np.float64)
        cloud.setflags(write=False)
        object.__setattr__(self, "cloud", cloud)

    @property
    def n_obstacles(self) -> int:
        return len(self.obstacles)

    def flat_cloud(self) -> np.ndarray:
        if self.cloud.size == 0:
            return np.zeros((0, self.d_space))
        return self.cloud.reshape(-1, self.d_space)


def build_environment(
    obstacles: Sequence[Obstacle],
    env_id: str,
    cloud_seed: int,
    d_space: int = 2,
    points_per_obstacle: int = CLOUD_POINTS,
) -> Environment:
    rng = np.random.default_rng(cloud_seed)
    if obstacles:
        cloud = np.stack(
            [sample_obstacle_points(o, points_per_obstacle, rng) for o in obstacles]
        )
    else:
        cloud = np.zeros((0, points_per_obstacle, d_space))
    return Environment(env_id, d_space, tuple(obstacles), cloud, cloud_seed)


def merge_environments(a: Environment, b: Environment, env_id: str) -> Environment:
    """Union of two scenes (compositional evaluation needs the joint
    collision ground truth)."""
    if a.d_space != b.d_space:
        raise ValueError("environments have different dimensions")
    return build_environment(
        a.obstacles + b.obstacles, env_id, a.cloud_seed, d_space=a.d_space
    )


def min_distance(env: Environment, points: np.ndarray) -> np.ndarray:
    """Distance from points (..., d) to the nearest obstacle boundary."""
    p = np.asarray(points, dtype=np.float64)
    if not env.obstacles:
        return np.full(p.shape[:-1], np.inf)
    dists = np.stack([obstacle_distance(o, p) for o in env.obstacles])
    return np.min(dists, axis=0)


def in_collision(env: Environment, point: np.ndarray, margin: float = 0.0) -> bool:
    if margin < 0:
        raise ValueError("margin must be non-negative")
    return bool(min_distance(env, np.asarray(point)) <= margin)


def positions_in_collision(env: Environment, positions: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Vectorized collision mask for an array of positions (..., d)."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    return min_distance(env, positions) <= margin


def trajectory_collision_stats(
    env: Environment, trajectory: np.ndarray, margin: float = 0.0
) -> tuple[int, int]:
    """(colliding waypoints, total waypoints) for an H x d trajectory."""
    traj = np.asarray(trajectory, dtype=np.float64)
    positions = traj[:, : env.d_space]
    mask = positions_in_collision(env, positions, margin)
    return int(np.sum(mask)), int(traj.shape[0])


def segment_collides(env: Environment, a: np.ndarray, b: np.ndarray,
                     resolution: float = 0.01, margin: float = 0.0) -> bool:
    """Check a straight segment by sampling at the given resolution."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    length = float(np.linalg.norm(b - a))
    steps = max(2, int(np.ceil(length / resolution)) + 1)
    pts = a + np.linspace(0.0, 1.0, steps)[:, None] * (b - a)
    return bool(np.any(positions_in_collision(env, pts, margin)))


# ----------------------------------------------------------------------
# environment files
# ----------------------------------------------------------------------


def obstacle_to_dict(o: Obstacle) -> dict:
    if isinstance(o, Circle):
        return {"type": "circle", "center": list(o.center), "radius": o.radius}
    return {"type": "box", "min": list(o.lo), "max": list(o.hi)}


def obstacle_from_dict(d: dict) -> Obstacle:
    if d["type"] == "circle":
        return Circle(tuple(d["center"]), float(d["radius"]))
    if d["type"] == "box":
        return Box(tuple(d["min"]), tuple(d["max"]))
    raise ValueError(f"unknown obstacle type {d['type']!r}")


def env_to_dict(env: Environment) -> dict:
    return {
        "id": env.env_id,
        "d_space": env.d_space,
        "bounds": [WORKSPACE_LO, WORKSPACE_HI],
        "obstacles": [obstacle_to_dict(o) for o in env.obstacles],
        "cloud_seed": env.cloud_seed,
    }


def env_from_dict(d: dict) -> Environment:
    obstacles = [obstacle_from_dict(o) for o in d["obstacles"]]
    return build_environment(obstacles, d["id"], int(d["cloud_seed"]), d_space=int(d["d_space"]))


def save_environments(path, envs: Sequence[Environment], meta: dict | None = None) -> None:
    doc = {"environments": [env_to_dict(e) for e in envs]}
    if meta:
        doc["meta"] = meta
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_environments(path) -> list[Environment]:
    doc = json.loads(Path(path).read_text())
    return [env_from_dict(d) for d in doc["environments"]]
