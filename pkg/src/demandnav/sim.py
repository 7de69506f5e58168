"""Deterministic multi-room world: scene data model, agent kinematics and
ground-truth panoramic sensing.

The agent moves on the floor plane with six discrete actions (0.25 m
forward steps, 30 degree turns, pitch nods, Done).  Perception is
synthesized from scene geometry: per-object surface point clouds with
occlusion against obstacle boxes, plus a planar ray sweep that yields
floor/obstacle structure points for mapping.  No pixels are rendered.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from . import kernels
from .mapping import ObjectPointCloud

SCHEMA_VERSION = 1

STEP_SIZE = 0.25          # meters per MoveAhead
TURN_DEG = 30             # degrees per rotation
PITCH_LIMIT = 30          # pitch clamped to {-30, 0, 30}
AGENT_RADIUS = 0.2        # collision disc radius, meters
CAMERA_HEIGHT = 1.5       # meters above the floor
SENSE_RANGE = 5.0         # default object sensing range, meters
N_VIEWS = 4               # panorama headings
HFOV_DEG = 90.0           # horizontal field of view per heading


class Action(Enum):
    MOVE_AHEAD = "MoveAhead"
    ROTATE_RIGHT = "RotateRight"
    ROTATE_LEFT = "RotateLeft"
    LOOK_UP = "LookUp"
    LOOK_DOWN = "LookDown"
    DONE = "Done"


class FeedbackKind(Enum):
    SUCCESS = "Success"
    OBSTRUCTED = "Obstructed"
    OUT_OF_BOUNDS = "OutOfBounds"
    OTHER = "Other"


@dataclass(frozen=True)
class StepFeedback:
    kind: FeedbackKind
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.kind is FeedbackKind.SUCCESS


@dataclass(frozen=True)
class AgentPose:
    """Floor-plane pose; yaw in degrees CCW from +x, always a multiple of 30."""

    x: float
    y: float
    yaw: int = 0
    pitch: int = 0

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass
class SceneObject:
    label: str
    box: tuple[float, float, float, float, float, float]  # xmin,xmax,ymin,ymax,zmin,zmax
    surface_points: np.ndarray  # (P, 3) float64, all on the box surface

    @property
    def center2d(self) -> tuple[float, float]:
        return (0.5 * (self.box[0] + self.box[1]), 0.5 * (self.box[2] + self.box[3]))


@dataclass
class NoiseConfig:
    """Detection noise: per-object drop, point jitter, class mislabeling."""

    drop_prob: float = 0.0
    jitter_sigma: float = 0.0
    mislabel_prob: float = 0.0

    @classmethod
    def off(cls) -> "NoiseConfig":
        return cls()

    @property
    def enabled(self) -> bool:
        return self.drop_prob > 0 or self.jitter_sigma > 0 or self.mislabel_prob > 0


@dataclass
class Scene:
    """Immutable world shared read-only across episodes."""

    id: str
    seed: int
    bounds: tuple[float, float, float, float]  # xmin, xmax, ymin, ymax
    rooms: list[tuple[float, float, float, float]]
    obstacles: list[tuple[float, float, float, float, float, float]]
    objects: list[SceneObject]
    resolution: float
    grid_origin: tuple[float, float]
    navigable_grid: np.ndarray  # (H, W) bool, row index = y cell
    spawns: list[AgentPose]
    _obstacle_arr: np.ndarray = field(default=None, repr=False, compare=False)
    _footprint_arr: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self._obstacle_arr is None:
            arr = np.array(self.obstacles, dtype=np.float64).reshape(-1, 6)
            object.__setattr__(self, "_obstacle_arr", arr)
            object.__setattr__(self, "_footprint_arr", arr[:, :4].copy())

    @property
    def obstacle_boxes(self) -> np.ndarray:
        return self._obstacle_arr

    @property
    def footprints(self) -> np.ndarray:
        return self._footprint_arr

    @property
    def bounds_rect(self) -> np.ndarray:
        return np.array(self.bounds, dtype=np.float64)

    def class_set(self) -> set[str]:
        return {o.label for o in self.objects}

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        ix = int(math.floor((x - self.grid_origin[0]) / self.resolution))
        iy = int(math.floor((y - self.grid_origin[1]) / self.resolution))
        return ix, iy

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (
            self.grid_origin[0] + (ix + 0.5) * self.resolution,
            self.grid_origin[1] + (iy + 0.5) * self.resolution,
        )


# ---------------------------------------------------------------------------
# kinematics

def _point_rect_distance(px: float, py: float, rect: Sequence[float]) -> float:
    dx = max(rect[0] - px, 0.0, px - rect[1])
    dy = max(rect[2] - py, 0.0, py - rect[3])
    return math.hypot(dx, dy)


def _point_segment_distance(px, py, ax, ay, bx, by) -> float:
    abx, aby = bx - ax, by - ay
    denom = abx * abx + aby * aby
    if denom == 0.0:
        return math.hypot(px - ax, py - ay)
    t = ((px - ax) * abx + (py - ay) * aby) / denom
    t = min(1.0, max(0.0, t))
    return math.hypot(px - (ax + t * abx), py - (ay + t * aby))


def _segments_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if v == 0 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return (
            min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
            and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])
        )

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_seg(p1, p2, p3):
        return True
    if o2 == 0 and on_seg(p1, p2, p4):
        return True
    if o3 == 0 and on_seg(p3, p4, p1):
        return True
    if o4 == 0 and on_seg(p3, p4, p2):
        return True
    return False


def segment_rect_distance(p0, p1, rect) -> float:
    """Exact distance between segment p0-p1 and a solid axis-aligned rect."""
    if _point_rect_distance(p0[0], p0[1], rect) == 0.0:
        return 0.0
    if _point_rect_distance(p1[0], p1[1], rect) == 0.0:
        return 0.0
    corners = [
        (rect[0], rect[2]),
        (rect[1], rect[2]),
        (rect[1], rect[3]),
        (rect[0], rect[3]),
    ]
    best = math.inf
    for i in range(4):
        a, b = corners[i], corners[(i + 1) % 4]
        if _segments_intersect(p0, p1, a, b):
            return 0.0
        best = min(
            best,
            _point_segment_distance(a[0], a[1], p0[0], p0[1], p1[0], p1[1]),
            _point_segment_distance(b[0], b[1], p0[0], p0[1], p1[0], p1[1]),
            _point_segment_distance(p0[0], p0[1], a[0], a[1], b[0], b[1]),
            _point_segment_distance(p1[0], p1[1], a[0], a[1], b[0], b[1]),
        )
    return best


def _swept_disc_clear(scene: Scene, p0, p1) -> Optional[FeedbackKind]:
    """None when the move is legal, else the failure kind."""
    xmin, xmax, ymin, ymax = scene.bounds
    r = AGENT_RADIUS
    for px, py in (p0, p1):
        if px < xmin + r or px > xmax - r or py < ymin + r or py > ymax - r:
            return FeedbackKind.OUT_OF_BOUNDS
    for rect in scene.footprints:
        if segment_rect_distance(p0, p1, rect) < r:
            return FeedbackKind.OBSTRUCTED
    return None


def step(scene: Scene, pose: AgentPose, action: Action) -> tuple[AgentPose, StepFeedback]:
    """Apply one discrete action; failed moves leave the pose unchanged."""
    if action is Action.MOVE_AHEAD:
        rad = math.radians(pose.yaw)
        nx = pose.x + STEP_SIZE * math.cos(rad)
        ny = pose.y + STEP_SIZE * math.sin(rad)
        fail = _swept_disc_clear(scene, (pose.x, pose.y), (nx, ny))
        if fail is not None:
            return pose, StepFeedback(fail)
        return replace(pose, x=nx, y=ny), StepFeedback(FeedbackKind.SUCCESS)
    if action is Action.ROTATE_RIGHT:
        return replace(pose, yaw=(pose.yaw - TURN_DEG) % 360), StepFeedback(FeedbackKind.SUCCESS)
    if action is Action.ROTATE_LEFT:
        return replace(pose, yaw=(pose.yaw + TURN_DEG) % 360), StepFeedback(FeedbackKind.SUCCESS)
    if action is Action.LOOK_UP:
        return replace(pose, pitch=min(pose.pitch + TURN_DEG, PITCH_LIMIT)), StepFeedback(
            FeedbackKind.SUCCESS
        )
    if action is Action.LOOK_DOWN:
        return replace(pose, pitch=max(pose.pitch - TURN_DEG, -PITCH_LIMIT)), StepFeedback(
            FeedbackKind.SUCCESS
        )
    return pose, StepFeedback(FeedbackKind.SUCCESS)  # Done is a no-op here


# ---------------------------------------------------------------------------
# perception

def _heading_mask(camera_xy, yaw: float, points: np.ndarray, n_views: int, hfov: float) -> np.ndarray:
    """Points whose azimuth falls inside at least one panorama view sector."""
    if n_views * hfov >= 360.0:
        return np.ones(len(points), dtype=bool)
    az = np.degrees(np.arctan2(points[:, 1] - camera_xy[1], points[:, 0] - camera_xy[0]))
    mask = np.zeros(len(points), dtype=bool)
    for i in range(n_views):
        heading = yaw + i * (360.0 / n_views)
        rel = (az - heading + 180.0) % 360.0 - 180.0
        mask |= np.abs(rel) <= hfov / 2.0
    return mask


def sense_panorama(
    scene: Scene,
    pose: AgentPose,
    noise: Optional[NoiseConfig] = None,
    rng: Optional[np.random.Generator] = None,
    max_range: float = SENSE_RANGE,
    n_views: int = N_VIEWS,
    hfov: float = HFOV_DEG,
) -> list[ObjectPointCloud]:
    """Ground-truth object detections around the agent.

    Each visible object yields one cloud holding its surface points that
    are in range, inside a view sector and not occluded by any obstacle
    box (an object's own box hides its far faces).  Optional noise drops
    detections, jitters points or swaps class labels.
    """
    noise = noise or NoiseConfig.off()
    if noise.enabled and rng is None:
        raise ValueError("noise enabled but no rng supplied")
    camera = np.array([pose.x, pose.y, CAMERA_HEIGHT])
    labels = sorted(scene.class_set())
    out: list[ObjectPointCloud] = []
    for obj in scene.objects:
        pts = obj.surface_points
        d = np.linalg.norm(pts - camera[None, :], axis=1)
        mask = d <= max_range
        if not mask.any():
            continue
        pts = pts[mask]
        sector = _heading_mask((pose.x, pose.y), pose.yaw, pts, n_views, hfov)
        if not sector.any():
            continue
        pts = pts[sector]
        vis = kernels.visible_points(camera, pts, scene.obstacle_boxes)
        if not vis.any():
            continue
        pts = pts[vis].copy()
        label = obj.label
        if noise.enabled:
            if rng.random() < noise.drop_prob:
                continue
            if noise.jitter_sigma > 0:
                pts = pts + rng.normal(0.0, noise.jitter_sigma, pts.shape)
            if noise.mislabel_prob > 0 and rng.random() < noise.mislabel_prob:
                others = [c for c in labels if c != obj.label]
                if others:
                    label = others[int(rng.integers(len(others)))]
        out.append(ObjectPointCloud(label=label, pcd=pts))
    return out


def sense_structure(
    scene: Scene,
    pose: AgentPose,
    n_rays: int = 360,
    max_range: float = SENSE_RANGE,
    floor_step: float = 0.05,
    interior_depth: float = 0.5,
) -> np.ndarray:
    """Planar ray sweep standing in for depth perception.

    Emits floor points (z = 0) along every unobstructed ray, plus
    mid-height surface points through the struck box from its entry face
    up to `interior_depth` in (the footprint of a solid obstacle is
    known to be solid, so painting its skin keeps deep interiors from
    masquerading as unexplored space).  Returns (N, 3) points for height
    classification.
    """
    origin = np.array([pose.x, pose.y])
    angles = np.arange(n_rays) * (2.0 * math.pi / n_rays)
    dist, exit_dist, idx = kernels.raycast(origin, angles, scene.footprints, scene.bounds_rect)
    free = np.minimum(dist, max_range)

    n_samples = int(max_range / floor_step) + 1
    s = (np.arange(n_samples) * floor_step)[None, :]
    keep = s < free[:, None]
    xs = origin[0] + s * np.cos(angles)[:, None]
    ys = origin[1] + s * np.sin(angles)[:, None]
    floor = np.stack([xs[keep], ys[keep], np.zeros(int(keep.sum()))], axis=1)

    hit = dist <= max_range
    parts = [floor]
    if hit.any():
        enter = dist[hit]
        through = np.minimum(exit_dist[hit], enter + interior_depth)
        hz = np.empty(int(hit.sum()))
        for j, b in enumerate(idx[hit]):
            if b < 0:
                hz[j] = 1.25  # perimeter wall
            else:
                zmin, zmax = scene.obstacle_boxes[b, 4], scene.obstacle_boxes[b, 5]
                hz[j] = min(max(0.5 * (zmin + zmax), 0.15), 1.7)
        ks = (np.arange(int(interior_depth / floor_step) + 1) * floor_step)[None, :]
        s_int = enter[:, None] + ks
        m = s_int <= through[:, None] + 1e-9
        cos_a = np.cos(angles[hit])[:, None]
        sin_a = np.sin(angles[hit])[:, None]
        hx = (origin[0] + s_int * cos_a)[m]
        hy = (origin[1] + s_int * sin_a)[m]
        zz = np.broadcast_to(hz[:, None], m.shape)[m]
        parts.append(np.stack([hx, hy, zz], axis=1))
    return np.concatenate(parts, axis=0)


def object_within_success_radius(
    scene: Scene, pose: AgentPose, classes: Iterable[str], eps: float
) -> Optional[SceneObject]:
    """Nearest matching-class object whose 2D center is within eps (inclusive)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    classes = set(classes)
    best = None
    best_d = math.inf
    for obj in scene.objects:
        if obj.label not in classes:
            continue
        cx, cy = obj.center2d
        d = math.hypot(cx - pose.x, cy - pose.y)
        if d <= eps and d < best_d:
            best, best_d = obj, d
    return best


def visible_object_distances(
    scene: Scene,
    pose: AgentPose,
    max_range: float = SENSE_RANGE,
    fov: Optional[float] = None,
) -> list[tuple[SceneObject, float]]:
    """(object, 2D center distance) pairs with line of sight to the camera.

    `fov` restricts results to a sector of that width centered on the
    agent's yaw; None means all around.  Visibility is tested on the
    object's surface points (any unoccluded in-range point counts).
    """
    camera = np.array([pose.x, pose.y, CAMERA_HEIGHT])
    out = []
    for obj in scene.objects:
        cx, cy = obj.center2d
        d = math.hypot(cx - pose.x, cy - pose.y)
        if d > max_range:
            continue
        if fov is not None:
            az = math.degrees(math.atan2(cy - pose.y, cx - pose.x))
            rel = (az - pose.yaw + 180.0) % 360.0 - 180.0
            if abs(rel) > fov / 2.0:
                continue
        pts = obj.surface_points
        in_range = np.linalg.norm(pts - camera[None, :], axis=1) <= max_range
        if not in_range.any():
            continue
        if kernels.visible_points(camera, pts[in_range], scene.obstacle_boxes).any():
            out.append((obj, d))
    return out


# ---------------------------------------------------------------------------
# serialization

def scene_to_dict(scene: Scene) -> dict:
    rows = ["".join("1" if v else "0" for v in row) for row in scene.navigable_grid]
    return {
        "schema_version": SCHEMA_VERSION,
        "id": scene.id,
        "seed": scene.seed,
        "bounds": [float(v) for v in scene.bounds],
        "rooms": [[float(v) for v in r] for r in scene.rooms],
        "obstacles": [[float(v) for v in b] for b in scene.obstacles],
        "objects": [
            {
                "class": o.label,
                "box": [float(v) for v in o.box],
                "surface_points": [[float(v) for v in p] for p in o.surface_points],
            }
            for o in scene.objects
        ],
        "navigable_grid": {
            "origin": [float(v) for v in scene.grid_origin],
            "resolution": float(scene.resolution),
            "rows": rows,
        },
        "spawns": [
            {"x": float(p.x), "y": float(p.y), "yaw": int(p.yaw), "pitch": int(p.pitch)}
            for p in scene.spawns
        ],
    }


def scene_from_dict(data: dict) -> Scene:
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported scene schema_version: {data.get('schema_version')!r}")
    grid = np.array(
        [[c == "1" for c in row] for row in data["navigable_grid"]["rows"]], dtype=bool
    )
    return Scene(
        id=data["id"],
        seed=int(data["seed"]),
        bounds=tuple(data["bounds"]),
        rooms=[tuple(r) for r in data["rooms"]],
        obstacles=[tuple(b) for b in data["obstacles"]],
        objects=[
            SceneObject(
                label=o["class"],
                box=tuple(o["box"]),
                surface_points=np.array(o["surface_points"], dtype=np.float64).reshape(-1, 3),
            )
            for o in data["objects"]
        ],
        resolution=float(data["navigable_grid"]["resolution"]),
        grid_origin=tuple(data["navigable_grid"]["origin"]),
        navigable_grid=grid,
        spawns=[
            AgentPose(p["x"], p["y"], int(p["yaw"]), int(p["pitch"])) for p in data["spawns"]
        ],
    )


def save_scene(scene: Scene, path) -> None:
    with open(path, "w") as f:
        json.dump(scene_to_dict(scene), f, sort_keys=True, indent=1)


def load_scene(path) -> Scene:
    with open(path) as f:
        return scene_from_dict(json.load(f))
