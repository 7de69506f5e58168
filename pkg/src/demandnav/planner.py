"""Affordance-map planning over a 2D occupancy grid.

Observed 3D points are split by height into floor and obstacle evidence
and binned onto a grid.  Obstacles are dilated by the agent radius, then
two per-cell scores are fused: clearance from obstacles (zero inside a
safety band, normalized distance outside it) and proximity to the
current target.  A* runs on the fused map with a cost that penalizes
low-affordance cells; the resulting path is thinned to waypoints and
compiled into the discrete action vocabulary.

Cells with no observations are treated as traversable: plans may cross
unknown space and rely on feedback-driven correction when the optimism
turns out wrong.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .sim import STEP_SIZE, Action, AgentPose, Scene

H_FLOOR = 0.10        # points at or below this height are floor evidence
H_AGENT = 1.8         # points above this height are ignored
DEFAULT_RESOLUTION = 0.05
DEFAULT_DILATION = 0.2
A_OBS_FLOOR = 1e-9    # strictly positive floor so 0 uniquely marks the unsafe band
AFF_CLIP_LO = 0.1

_SQRT2 = math.sqrt(2.0)
_NEIGHBORS = [
    (1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
    (1, 1, _SQRT2), (1, -1, _SQRT2), (-1, 1, _SQRT2), (-1, -1, _SQRT2),
]


class PlannerError(Exception):
    pass


class EmptyInputError(PlannerError):
    pass


class ShapeMismatchError(PlannerError):
    pass


class NoPathError(PlannerError):
    pass


@dataclass(frozen=True)
class PlanningConfig:
    tau_obs: float = 0.25
    dilation_radius: float = DEFAULT_DILATION
    cost_weight: float = 4.0       # detour-vs-affordance tradeoff in the A* cost
    n_waypoint: int = 8            # waypoint spacing in motion steps
    n_block: int = 2               # fine spacing in motion steps
    fine_prefix_len: float = 2.0   # meters of path sampled at the fine rate
    h_floor: float = H_FLOOR
    h_agent: float = H_AGENT


@dataclass
class GridMap:
    resolution: float
    origin: tuple[float, float]
    navigable: np.ndarray  # (H, W) bool: observed floor, obstacle cells removed
    obstacle: np.ndarray   # (H, W) bool: obstacle evidence after dilation

    @property
    def shape(self) -> tuple[int, int]:
        return self.obstacle.shape

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        ix = int(math.floor((x - self.origin[0]) / self.resolution))
        iy = int(math.floor((y - self.origin[1]) / self.resolution))
        h, w = self.shape
        return min(max(ix, 0), w - 1), min(max(iy, 0), h - 1)

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (
            self.origin[0] + (ix + 0.5) * self.resolution,
            self.origin[1] + (iy + 0.5) * self.resolution,
        )


@dataclass
class AffordanceMap:
    grid: GridMap
    a_obs: np.ndarray
    a_tgt: np.ndarray
    a_final: np.ndarray
    target: tuple[float, float]
    d_min: float = 0.0
    d_max: float = 0.0
    dp_min: float = 0.0
    dp_max: float = 0.0


# ---------------------------------------------------------------------------
# grid construction

def classify_points(
    points: np.ndarray, h_floor: float = H_FLOOR, h_agent: float = H_AGENT
) -> tuple[np.ndarray, np.ndarray]:
    """Split world points into (floor, obstacle) by height; taller is dropped."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = points[:, 2]
    return points[z <= h_floor], points[(z > h_floor) & (z <= h_agent)]


def disc_structure(radius: float, resolution: float) -> np.ndarray:
    """Boolean disc footprint: offsets whose cell center lies within radius."""
    r = int(math.floor(radius / resolution + 1e-9))
    ax = np.arange(-r, r + 1)
    dx, dy = np.meshgrid(ax, ax)
    return (dx * dx + dy * dy) * resolution * resolution <= radius * radius + 1e-12


def dilate_obstacles(mask: np.ndarray, radius: float, resolution: float) -> np.ndarray:
    if not mask.any() or radius <= 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disc_structure(radius, resolution))


def _bin_points(points: np.ndarray, origin, resolution, shape) -> tuple[np.ndarray, np.ndarray]:
    ix = np.floor((points[:, 0] - origin[0]) / resolution).astype(np.int64)
    iy = np.floor((points[:, 1] - origin[1]) / resolution).astype(np.int64)
    h, w = shape
    ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    return ix[ok], iy[ok]


def build_grid(
    navigable_points: np.ndarray,
    obstacle_points: np.ndarray,
    resolution: float = DEFAULT_RESOLUTION,
    dilation_radius: float = DEFAULT_DILATION,
    origin: Optional[tuple[float, float]] = None,
    shape: Optional[tuple[int, int]] = None,
) -> GridMap:
    """Bin classified points to cells and dilate the obstacle mask.

    A cell holding both floor and obstacle evidence counts as obstacle.
    Grid geometry is derived from the data extent unless given.
    """
    nav = np.asarray(navigable_points, dtype=np.float64).reshape(-1, 3)
    obs = np.asarray(obstacle_points, dtype=np.float64).reshape(-1, 3)
    if len(nav) == 0 and len(obs) == 0:
        raise EmptyInputError("no points to build a grid from")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if origin is None or shape is None:
        allp = np.concatenate([nav, obs], axis=0)
        margin = dilation_radius + resolution
        x0 = math.floor((allp[:, 0].min() - margin) / resolution) * resolution
        y0 = math.floor((allp[:, 1].min() - margin) / resolution) * resolution
        origin = (x0, y0)
        w = int(math.ceil((allp[:, 0].max() + margin - x0) / resolution)) + 1
        h = int(math.ceil((allp[:, 1].max() + margin - y0) / resolution)) + 1
        shape = (h, w)
    nav_mask = np.zeros(shape, dtype=bool)
    obs_mask = np.zeros(shape, dtype=bool)
    ix, iy = _bin_points(nav, origin, resolution, shape)
    nav_mask[iy, ix] = True
    ix, iy = _bin_points(obs, origin, resolution, shape)
    obs_mask[iy, ix] = True
    obs_mask = dilate_obstacles(obs_mask, dilation_radius, resolution)
    nav_mask &= ~obs_mask
    return GridMap(resolution=resolution, origin=origin, navigable=nav_mask, obstacle=obs_mask)


# ---------------------------------------------------------------------------
# affordance

def _obstacle_affordance(grid: GridMap, tau_obs: float):
    free = ~grid.obstacle
    a = np.zeros(grid.shape, dtype=np.float64)
    if not grid.obstacle.any():
        a[free] = 1.0
        return a, 0.0, 0.0
    d = ndimage.distance_transform_edt(free) * grid.resolution
    passing = free & (d >= tau_obs)
    if not passing.any():
        return a, 0.0, 0.0
    d_min = float(d[passing].min())
    d_max = float(d[passing].max())
    if d_max == d_min:
        a[passing] = 1.0
    else:
        norm = (d[passing] - d_min) / (d_max - d_min)
        a[passing] = np.maximum(norm, A_OBS_FLOOR)
    return a, d_min, d_max


def obstacle_affordance(grid: GridMap, tau_obs: float = 0.25) -> np.ndarray:
    """Clearance score: 0 within tau_obs of an obstacle, else normalized
    distance to the nearest obstacle cell (kept strictly positive so the
    zero level uniquely marks the unsafe band)."""
    return _obstacle_affordance(grid, tau_obs)[0]


def _semantic_affordance(grid: GridMap, target: tuple[float, float]):
    if not (math.isfinite(target[0]) and math.isfinite(target[1])):
        raise ValueError("target must be finite")
    h, w = grid.shape
    xs = grid.origin[0] + (np.arange(w) + 0.5) * grid.resolution
    ys = grid.origin[1] + (np.arange(h) + 0.5) * grid.resolution
    dx = xs[None, :] - target[0]
    dy = ys[:, None] - target[1]
    d = np.sqrt(dx * dx + dy * dy)
    free = ~grid.obstacle
    a = np.zeros(grid.shape, dtype=np.float64)
    if not free.any():
        return a, 0.0, 0.0
    dp_min = float(d[free].min())
    dp_max = float(d[free].max())
    if dp_max == dp_min:
        a[free] = 1.0
    else:
        a[free] = 1.0 - (d[free] - dp_min) / (dp_max - dp_min)
    return a, dp_min, dp_max


def semantic_affordance(grid: GridMap, target: tuple[float, float]) -> np.ndarray:
    """Inverse normalized distance to the target point (1 at the nearest cell)."""
    return _semantic_affordance(grid, target)[0]


def fuse_affordance(a_obs: np.ndarray, a_tgt: np.ndarray) -> np.ndarray:
    """Zero where clearance is zero, else the target score clipped to [0.1, 1]."""
    if a_obs.shape != a_tgt.shape:
        raise ShapeMismatchError(f"{a_obs.shape} vs {a_tgt.shape}")
    return np.where(a_obs == 0.0, 0.0, np.clip(a_tgt, AFF_CLIP_LO, 1.0))


def build_affordance(
    grid: GridMap, target: tuple[float, float], tau_obs: float = 0.25
) -> AffordanceMap:
    a_obs, d_min, d_max = _obstacle_affordance(grid, tau_obs)
    a_tgt, dp_min, dp_max = _semantic_affordance(grid, target)
    a_final = fuse_affordance(a_obs, a_tgt)
    return AffordanceMap(
        grid=grid, a_obs=a_obs, a_tgt=a_tgt, a_final=a_final, target=tuple(target),
        d_min=d_min, d_max=d_max, dp_min=dp_min, dp_max=dp_max,
    )


def nearest_positive_cell(
    aff: AffordanceMap,
    point: tuple[float, float],
    within: Optional[np.ndarray] = None,
) -> Optional[tuple[int, int]]:
    """Closest plannable cell to a world point (row-major tie-break).

    `within` restricts candidates to an extra mask, e.g. observed floor.
    """
    mask = aff.a_final > 0.0
    if within is not None:
        mask = mask & within
    if not mask.any():
        return None
    h, w = aff.grid.shape
    xs = aff.grid.origin[0] + (np.arange(w) + 0.5) * aff.grid.resolution
    ys = aff.grid.origin[1] + (np.arange(h) + 0.5) * aff.grid.resolution
    d2 = (xs[None, :] - point[0]) ** 2 + (ys[:, None] - point[1]) ** 2
    d2 = np.where(mask, d2, np.inf)
    flat = int(np.argmin(d2))
    return flat % w, flat // w


def escape_to_positive(aff: AffordanceMap, start: tuple[int, int]) -> list[tuple[int, int]]:
    """Shortest cell path out of the zero-affordance band.

    Execution drift routinely strands the agent inside the safety band
    where A* cannot expand.  This breadth-first pass walks through
    zero cells (never through obstacle evidence) to the closest
    plannable cell.  Returns [start] when the start is already fine.
    """
    sx, sy = start
    a = aff.a_final
    h, w = a.shape
    if a[sy, sx] > 0.0:
        return [(sx, sy)]
    blocked = aff.grid.obstacle
    came: dict[tuple[int, int], tuple[int, int]] = {}
    seen = np.zeros((h, w), dtype=bool)
    seen[sy, sx] = True
    queue = deque([(sx, sy)])
    while queue:
        x, y = queue.popleft()
        if a[y, x] > 0.0:
            path = [(x, y)]
            while (x, y) != (sx, sy):
                x, y = came[(x, y)]
                path.append((x, y))
            path.reverse()
            return path
        for ddx, ddy, _ in _NEIGHBORS:
            nx, ny = x + ddx, y + ddy
            if 0 <= nx < w and 0 <= ny < h and not seen[ny, nx] and not blocked[ny, nx]:
                seen[ny, nx] = True
                came[(nx, ny)] = (x, y)
                queue.append((nx, ny))
    raise NoPathError("no way out of the zero-affordance region")


# ---------------------------------------------------------------------------
# search

def astar(
    aff: AffordanceMap,
    start: tuple[int, int],
    goal: tuple[int, int],
    cost_weight: float = 4.0,
) -> list[tuple[int, int]]:
    """Optimal 8-connected path under cost step_len * (1 + w * (1 - a_final)).

    Cells with a_final == 0 are impassable, except that the start cell
    may always be departed (the agent can be pinned inside the safety
    band after a collision).  Euclidean heuristic; admissible because
    every cell multiplier is at least 1.
    """
    a = aff.a_final
    h, w = a.shape
    sx, sy = start
    gx, gy = goal
    if not (0 <= sx < w and 0 <= sy < h and 0 <= gx < w and 0 <= gy < h):
        raise ValueError("start/goal outside the grid")
    if a[gy, gx] == 0.0 and (gx, gy) != (sx, sy):
        raise NoPathError("goal cell is impassable")
    g = np.full((h, w), np.inf)
    g[sy, sx] = 0.0
    came: dict[tuple[int, int], tuple[int, int]] = {}
    closed = np.zeros((h, w), dtype=bool)
    counter = 0
    heap = [(math.hypot(gx - sx, gy - sy), counter, sx, sy)]
    while heap:
        _, _, x, y = heapq.heappop(heap)
        if closed[y, x]:
            continue
        closed[y, x] = True
        if (x, y) == (gx, gy):
            path = [(x, y)]
            while (x, y) != (sx, sy):
                x, y = came[(x, y)]
                path.append((x, y))
            path.reverse()
            return path
        base = g[y, x]
        for ddx, ddy, dlen in _NEIGHBORS:
            nx, ny = x + ddx, y + ddy
            if not (0 <= nx < w and 0 <= ny < h) or closed[ny, nx]:
                continue
            an = a[ny, nx]
            if an == 0.0:
                continue
            ng = base + dlen * (1.0 + cost_weight * (1.0 - an))
            if ng < g[ny, nx]:
                g[ny, nx] = ng
                came[(nx, ny)] = (x, y)
                counter += 1
                heapq.heappush(heap, (ng + math.hypot(gx - nx, gy - ny), counter, nx, ny))
    raise NoPathError(f"goal {goal} unreachable from {start}")


def path_cost(aff: AffordanceMap, path: Sequence[tuple[int, int]], cost_weight: float = 4.0) -> float:
    total = 0.0
    for (x0, y0), (x1, y1) in zip(path[:-1], path[1:]):
        dlen = _SQRT2 if (x0 != x1 and y0 != y1) else 1.0
        total += dlen * (1.0 + cost_weight * (1.0 - aff.a_final[y1, x1]))
    return total


# ---------------------------------------------------------------------------
# waypoints and action compilation

def decompose_waypoints(
    path: Sequence[tuple[int, int]],
    grid: GridMap,
    n_waypoint: int = 8,
    n_block: int = 2,
    fine_prefix: bool = False,
    fine_prefix_len: float = 2.0,
    step_size: float = STEP_SIZE,
) -> list[tuple[float, float]]:
    """Thin a cell path to waypoints by traveled arc length.

    A waypoint is dropped every n_waypoint motion steps of travel; with
    `fine_prefix` the first `fine_prefix_len` meters use the n_block
    spacing instead.  The final path cell is always included.
    """
    if not path:
        raise ValueError("empty path")
    if n_block >= n_waypoint:
        raise ValueError("n_block must be smaller than n_waypoint")
    spacing = n_waypoint * step_size
    fine_spacing = n_block * step_size
    next_mark = fine_spacing if fine_prefix else spacing
    wps: list[tuple[float, float]] = []
    arc = 0.0
    for (x0, y0), (x1, y1) in zip(path[:-1], path[1:]):
        arc += grid.resolution * (_SQRT2 if (x0 != x1 and y0 != y1) else 1.0)
        if arc >= next_mark - 1e-9:
            wps.append(grid.cell_center(x1, y1))
            if fine_prefix and arc < fine_prefix_len - 1e-9:
                next_mark += fine_spacing
            else:
                next_mark += spacing
    last = grid.cell_center(*path[-1])
    if not wps or wps[-1] != last:
        wps.append(last)
    return wps


def compile_actions(
    pose: AgentPose, waypoint: tuple[float, float], step_size: float = STEP_SIZE
) -> list[Action]:
    """Rotations snapping yaw to the segment bearing, then forward steps.

    The bearing is rounded to the nearest 30 degree multiple; rotation
    direction takes the shorter way, ties going right.  The number of
    forward steps is the rounded segment length in 0.25 m units; a
    waypoint closer than half a step compiles to nothing.
    """
    dx = waypoint[0] - pose.x
    dy = waypoint[1] - pose.y
    dist = math.hypot(dx, dy)
    n_move = int(math.floor(dist / step_size + 0.5))
    if n_move == 0:
        return []
    bearing = math.degrees(math.atan2(dy, dx))
    target_yaw = int(math.floor(bearing / 30.0 + 0.5) * 30) % 360
    diff = (target_yaw - pose.yaw + 180) % 360 - 180  # [-180, 180): -180 turns right
    n_rot = abs(diff) // 30
    turn = Action.ROTATE_LEFT if diff > 0 else Action.ROTATE_RIGHT
    return [turn] * n_rot + [Action.MOVE_AHEAD] * n_move


# ---------------------------------------------------------------------------
# episode occupancy accumulation

class OccupancyAccumulator:
    """Episode-persistent observation grid aligned with the scene grid.

    Obstacle evidence is sticky: once a cell is seen as an obstacle it
    stays one, so replans cannot re-cross already-discovered walls.
    """

    def __init__(self, origin: tuple[float, float], resolution: float, shape: tuple[int, int]):
        self.origin = origin
        self.resolution = resolution
        self.shape = shape
        self.floor_seen = np.zeros(shape, dtype=bool)
        self.obstacle_seen = np.zeros(shape, dtype=bool)
        self.visit_counts = np.zeros(shape, dtype=np.int64)

    @classmethod
    def from_scene(cls, scene: Scene) -> "OccupancyAccumulator":
        return cls(scene.grid_origin, scene.resolution, scene.navigable_grid.shape)

    def add_points(self, points: np.ndarray, h_floor: float = H_FLOOR, h_agent: float = H_AGENT):
        nav, obs = classify_points(points, h_floor, h_agent)
        if len(nav):
            ix, iy = _bin_points(nav, self.origin, self.resolution, self.shape)
            self.floor_seen[iy, ix] = True
        if len(obs):
            ix, iy = _bin_points(obs, self.origin, self.resolution, self.shape)
            self.obstacle_seen[iy, ix] = True
        self.floor_seen &= ~self.obstacle_seen

    def visit(self, x: float, y: float):
        ix, iy = _bin_points(np.array([[x, y, 0.0]]), self.origin, self.resolution, self.shape)
        if len(ix):
            self.visit_counts[iy[0], ix[0]] += 1

    def to_gridmap(self, dilation_radius: float = DEFAULT_DILATION) -> GridMap:
        obstacle = dilate_obstacles(self.obstacle_seen, dilation_radius, self.resolution)
        return GridMap(
            resolution=self.resolution,
            origin=self.origin,
            navigable=self.floor_seen & ~obstacle,
            obstacle=obstacle,
        )

    def frontier_mask(self, dilation_radius: float = DEFAULT_DILATION) -> np.ndarray:
        """Observed-floor cells bordering unobserved regions.

        Ray sweeps leave speckle holes between samples; an erosion pass
        keeps only solid unknown regions so frontiers sit at the true
        sensing horizon rather than inside the swept area.
        """
        unknown = ~(self.floor_seen | self.obstacle_seen)
        core = ndimage.binary_erosion(unknown, structure=np.ones((3, 3), dtype=bool))
        near_unknown = ndimage.binary_dilation(
            core, structure=np.ones((3, 3), dtype=bool), iterations=2
        )
        free = self.floor_seen & ~dilate_obstacles(self.obstacle_seen, dilation_radius, self.resolution)
        return free & near_unknown


def plan_path(
    occupancy: OccupancyAccumulator,
    position: tuple[float, float],
    target: tuple[float, float],
    cfg: PlanningConfig,
    fine_prefix: bool = False,
) -> tuple[list[tuple[float, float]], AffordanceMap]:
    """Affordance pipeline from accumulated occupancy to waypoints.

    The goal is the closest plannable cell to the target on observed
    floor when any exists (planning into an object's unseen interior is
    futile), falling back to any plannable cell for unexplored targets.
    A breadth-first escape prefix leads out of the safety band when the
    agent is pinned inside it.
    """
    grid = occupancy.to_gridmap(cfg.dilation_radius)
    aff = build_affordance(grid, target, cfg.tau_obs)
    start = grid.world_to_cell(*position)
    goal = nearest_positive_cell(aff, target, within=grid.navigable)
    if goal is None:
        goal = nearest_positive_cell(aff, target)
    if goal is None:
        raise NoPathError("no plannable cells")
    prefix = escape_to_positive(aff, start)
    try:
        path = astar(aff, prefix[-1], goal, cfg.cost_weight)
    except NoPathError:
        # Safety bands around accumulating obstacle evidence can pinch a
        # physically walkable passage shut.  Retry on a relaxed map where
        # zero cells without obstacle evidence get the minimum score; the
        # corrector covers any optimism this buys.
        relaxed = AffordanceMap(
            grid=grid,
            a_obs=aff.a_obs,
            a_tgt=aff.a_tgt,
            a_final=np.where(grid.obstacle, 0.0, np.maximum(aff.a_final, AFF_CLIP_LO)),
            target=aff.target,
            d_min=aff.d_min, d_max=aff.d_max, dp_min=aff.dp_min, dp_max=aff.dp_max,
        )
        path = astar(relaxed, prefix[-1], goal, cfg.cost_weight)
    full = prefix[:-1] + path
    wps = decompose_waypoints(
        full, grid, cfg.n_waypoint, cfg.n_block, fine_prefix, cfg.fine_prefix_len
    )
    return wps, aff


# ---------------------------------------------------------------------------
# export

def save_affordance_pgm(aff: AffordanceMap, path: str) -> None:
    """Write the fused map as an ASCII graymap plus a JSON sidecar."""
    h, w = aff.a_final.shape
    gray = np.rint(aff.a_final * 255).astype(int)
    with open(path, "w") as f:
        f.write(f"P2\n{w} {h}\n255\n")
        for row in gray[::-1]:  # top row = max y
            f.write(" ".join(str(v) for v in row) + "\n")
    meta = {
        "origin": [float(aff.grid.origin[0]), float(aff.grid.origin[1])],
        "resolution": float(aff.grid.resolution),
        "target": [float(aff.target[0]), float(aff.target[1])],
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)


def load_affordance_pgm(path: str) -> tuple[np.ndarray, dict]:
    with open(path) as f:
        tokens = f.read().split()
    if tokens[0] != "P2":
        raise ValueError("expected an ASCII PGM (P2) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array(tokens[4:4 + w * h], dtype=np.float64).reshape(h, w) / maxval
    with open(str(path) + ".json") as f:
        meta = json.load(f)
    return vals[::-1], meta
