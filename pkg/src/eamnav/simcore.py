"""Discrete agent simulator: pose kinematics, ray-cast sensing, geodesics.

The agent lives on the floor-plan grid with 8 compass headings and unit
steps (1 cell = 0.5 m nominal). Depth comes from DDA grid traversal; the
semantic detector is an oracle over ground-truth objects with configurable
miss and confusion noise. Geodesic distances use 8-connected Dijkstra with
sqrt(2) diagonal cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as _dijkstra

from .worldgen import FloorPlan, N_OBJECTS, N_ROOM_CATEGORIES

SQRT2 = math.sqrt(2.0)

# heading index i points at angle i * 45 degrees; y grows downward
HEADING_VECTORS: tuple[tuple[int, int], ...] = (
    (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1),
)
N_HEADINGS = 8

# margin subtracted when replaying a reported range back into cell steps;
# far below any crossing spacing, far above float rounding
_REPLAY_EPS = 1e-9


class Action(IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STOP = 3


@dataclass(frozen=True)
class AgentPose:
    cell: tuple[int, int]
    heading: int  # 0..7

    def angle(self) -> float:
        return self.heading * math.pi / 4.0


class Detection(NamedTuple):
    class_id: int
    cell: tuple[int, int]
    confidence: float


@dataclass(frozen=True)
class SensorConfig:
    fov_degrees: float = 90.0
    n_rays: int = 64
    max_range: float = 12.0
    p_detect: float = 0.9
    p_confuse: float = 0.05

    def validate(self) -> None:
        if not (0.0 < self.fov_degrees <= 360.0):
            raise ValueError("fov must be in (0, 360]")
        for p in (self.p_detect, self.p_confuse):
            if not (0.0 <= p <= 1.0):
                raise ValueError("probabilities must be in [0, 1]")


@dataclass
class Observation:
    depth: np.ndarray  # (n_rays,) center-to-center range per ray
    hits: np.ndarray  # (n_rays,) bool, False when truncated at max_range
    hit_cells: np.ndarray  # (n_rays, 2) blocking cell per hit ray, -1 otherwise
    detections: list[Detection]
    t: int
    pose: AgentPose
    sensors: SensorConfig


def is_free(plan: FloorPlan, cell: tuple[int, int]) -> bool:
    x, y = cell
    if not (0 <= x < plan.width and 0 <= y < plan.height):
        return False
    return bool(plan.cells[y, x] < N_ROOM_CATEGORIES)


def step(plan: FloorPlan, pose: AgentPose, action: Action) -> AgentPose:
    """Advance the pose. Forward into a blocked cell is a silent no-op."""
    if action == Action.FORWARD:
        dx, dy = HEADING_VECTORS[pose.heading]
        target = (pose.cell[0] + dx, pose.cell[1] + dy)
        if is_free(plan, target):
            return AgentPose(target, pose.heading)
        return pose
    if action == Action.TURN_LEFT:
        return AgentPose(pose.cell, (pose.heading - 1) % N_HEADINGS)
    if action == Action.TURN_RIGHT:
        return AgentPose(pose.cell, (pose.heading + 1) % N_HEADINGS)
    return pose


def ray_angles(pose: AgentPose, sensors: SensorConfig) -> np.ndarray:
    half = math.radians(sensors.fov_degrees) / 2.0
    return pose.angle() + np.linspace(-half, half, sensors.n_rays)


def trace_rays(
    origin: tuple[int, int],
    angles: np.ndarray,
    caps: np.ndarray,
    blocking: np.ndarray | None,
):
    """DDA grid traversal from the origin cell center along each angle.

    Walks every ray until it enters a cell at parameter t_enter >= its cap,
    or (when `blocking` is given) until it enters a blocking/out-of-grid
    cell. Returns (visited, end_cells, end_t) where `visited` is an (M, 3)
    array of [ray, x, y] rows entered strictly before the stop, `end_cells`
    an (n, 2) int array of the stopping cell per ray (-1 when the ray was
    capped while inside a visited cell), and `end_t` the entry parameter of
    the stopping cell (inf when capped).

    The walk is pure float arithmetic on (origin, angle): replaying a ray
    with a cap derived from a reported range visits exactly the cells the
    original cast visited.
    """
    n = len(angles)
    caps = np.broadcast_to(np.asarray(caps, dtype=np.float64), (n,)).copy()
    dx = np.cos(angles)
    dy = np.sin(angles)
    ix = np.full(n, origin[0], dtype=np.int64)
    iy = np.full(n, origin[1], dtype=np.int64)
    step_x = np.where(dx > 0, 1, np.where(dx < 0, -1, 0))
    step_y = np.where(dy > 0, 1, np.where(dy < 0, -1, 0))
    with np.errstate(divide="ignore"):
        t_delta_x = np.where(step_x != 0, np.abs(1.0 / dx), np.inf)
        t_delta_y = np.where(step_y != 0, np.abs(1.0 / dy), np.inf)
    # distance from the cell center (offset 0.5) to the first grid line
    t_max_x = np.where(step_x != 0, 0.5 * t_delta_x, np.inf)
    t_max_y = np.where(step_y != 0, 0.5 * t_delta_y, np.inf)

    if blocking is not None:
        h, w = blocking.shape
    alive = np.ones(n, dtype=bool)
    end_cells = np.full((n, 2), -1, dtype=np.int64)
    end_t = np.full(n, np.inf)
    visited_chunks = [np.column_stack([np.arange(n), ix, iy])]  # origin cells

    while alive.any():
        go_x = t_max_x <= t_max_y
        t_enter = np.where(go_x, t_max_x, t_max_y)
        nx = ix + np.where(go_x, step_x, 0)
        ny = iy + np.where(go_x, 0, step_y)

        capped = alive & (t_enter >= caps)
        alive = alive & ~capped

        entered = alive.copy()
        if blocking is not None:
            inside = (nx >= 0) & (nx < w) & (ny >= 0) & (ny < h)
            blocked = np.zeros(n, dtype=bool)
            blocked[entered] = ~inside[entered]
            safe = entered & inside
            blocked[safe] = blocking[ny[safe], nx[safe]]
            stop = entered & blocked
            if stop.any():
                end_cells[stop, 0] = nx[stop]
                end_cells[stop, 1] = ny[stop]
                end_t[stop] = t_enter[stop]
                alive = alive & ~stop
                entered = entered & ~stop
        if entered.any():
            rows = np.nonzero(entered)[0]
            visited_chunks.append(np.column_stack([rows, nx[rows], ny[rows]]))
        # advance DDA state for every ray that moved (entered or stopped)
        moved = ~capped
        ix = np.where(moved, nx, ix)
        iy = np.where(moved, ny, iy)
        t_max_x = np.where(moved & go_x, t_max_x + t_delta_x, t_max_x)
        t_max_y = np.where(moved & ~go_x, t_max_y + t_delta_y, t_max_y)
        if blocking is None:
            alive = alive & (np.minimum(t_max_x, t_max_y) < np.inf)

    visited = np.concatenate(visited_chunks, axis=0)
    return visited, end_cells, end_t


def blocking_mask(plan: FloorPlan) -> np.ndarray:
    return plan.cells >= N_ROOM_CATEGORIES


def observe(
    plan: FloorPlan,
    pose: AgentPose,
    sensors: SensorConfig,
    rng: np.random.Generator,
    t: int = 0,
) -> Observation:
    """Cast depth rays and report visible objects with detector noise.

    Reported range is the center-to-center distance to the first blocking
    cell (entry parameter + 0.5), capped at max_range. Each object within
    range, inside the field of view and with unobstructed line of sight is
    reported with probability p_detect; its class is resampled uniformly
    with probability p_confuse.
    """
    if not is_free(plan, pose.cell):
        raise ValueError(f"pose cell {pose.cell} is not free")
    angles = ray_angles(pose, sensors)
    block = blocking_mask(plan)
    _, end_cells, end_t = trace_rays(
        pose.cell, angles, np.full(len(angles), sensors.max_range - 0.5), block
    )
    hits = end_cells[:, 0] >= 0
    depth = np.where(hits, end_t + 0.5, sensors.max_range)
    hit_cells = np.where(hits[:, None], end_cells, -1)

    detections: list[Detection] = []
    ax, ay = pose.cell
    half_fov = math.radians(sensors.fov_degrees) / 2.0
    for obj in plan.objects:
        ox, oy = obj.cell
        dist = math.hypot(ox - ax, oy - ay)
        if dist > sensors.max_range:
            continue
        if dist > 0:
            ang = math.atan2(oy - ay, ox - ax)
            delta = (ang - pose.angle() + math.pi) % (2 * math.pi) - math.pi
            if abs(delta) > half_fov + 1e-12:
                continue
            _, hit_cell, _ = trace_rays(
                pose.cell,
                np.array([ang]),
                np.array([dist - 0.5 - _REPLAY_EPS]),
                block,
            )
            if hit_cell[0, 0] >= 0:
                continue  # line of sight blocked
        if rng.random() >= sensors.p_detect:
            continue
        cls = obj.class_id
        if rng.random() < sensors.p_confuse:
            cls = int(rng.integers(N_OBJECTS))
        conf = float(np.clip(1.0 - 0.5 * dist / sensors.max_range, 0.0, 1.0))
        detections.append(Detection(cls, obj.cell, conf))
    return Observation(depth, hits, hit_cells, detections, t, pose, sensors)


def replay_rays(obs: Observation):
    """Re-derive the cells each depth ray crossed, from the observation alone.

    Returns (free_cells, occupied_cells) as (M, 2) int arrays: cells crossed
    strictly before each reported range, and the blocking cell of each hit
    ray as reported by the sensor. The free-cell walk uses the identical
    traversal arithmetic as the original cast, with a small safety margin so
    float rounding can only drop trailing free cells, never add blocked ones.
    """
    angles = ray_angles(obs.pose, obs.sensors)
    caps = obs.depth - 0.5 - _REPLAY_EPS
    visited, _, _ = trace_rays(obs.pose.cell, angles, caps, None)
    free_cells = visited[:, 1:3]
    occ = obs.hit_cells[obs.hits]
    return free_cells, occ


# -- geodesics ----------------------------------------------------------------

def grid_graph(free: np.ndarray) -> csr_matrix:
    """8-connected sparse graph over free cells, diagonal edges cost sqrt(2)."""
    h, w = free.shape
    idx = np.arange(h * w).reshape(h, w)
    rows, cols, data = [], [], []
    shifts = [(1, 0, 1.0), (0, 1, 1.0), (1, 1, SQRT2), (1, -1, SQRT2)]
    for dy, dx, cost in shifts:
        src_y = slice(max(0, -dy), h - max(0, dy))
        src_x = slice(max(0, -dx), w - max(0, dx))
        dst_y = slice(max(0, dy), h + min(0, dy))
        dst_x = slice(max(0, dx), w + min(0, dx))
        a = idx[src_y, src_x]
        b = idx[dst_y, dst_x]
        ok = free[src_y, src_x] & free[dst_y, dst_x]
        rows.append(a[ok])
        cols.append(b[ok])
        data.append(np.full(int(ok.sum()), cost))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    data = np.concatenate(data)
    return csr_matrix(
        (np.concatenate([data, data]), (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
        shape=(h * w, h * w),
    )


def distance_field(
    free: np.ndarray,
    sources: list[tuple[int, int]],
    graph: csr_matrix | None = None,
) -> np.ndarray:
    """Geodesic distance from the nearest source to every free cell (inf elsewhere)."""
    h, w = free.shape
    for x, y in sources:
        if not free[y, x]:
            raise ValueError(f"source {(x, y)} is not free")
    if graph is None:
        graph = grid_graph(free)
    flat = [y * w + x for x, y in sources]
    d = _dijkstra(graph, indices=flat, min_only=True, directed=False)
    d = d.reshape(h, w)
    d[~free] = np.inf
    return d


def shortest_path_len(plan: FloorPlan, a: tuple[int, int], b: tuple[int, int]) -> float:
    """Geodesic length between two free cells; inf when disconnected."""
    for cell in (a, b):
        if not is_free(plan, cell):
            raise ValueError(f"endpoint {cell} is blocked")
    if a == b:
        return 0.0
    d = distance_field(plan.free_mask(), [a])
    return float(d[b[1], b[0]])
