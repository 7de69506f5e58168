"""Procedural generation of deterministic multi-room scenes.

A seeded BSP split carves the interior into rectangular rooms joined by
door gaps, furniture boxes are rejection-sampled with walking clearance,
and the ground-truth navigable grid is reduced to its largest connected
component so every generated scene is fully reachable.  The same seed
and config reproduce the scene bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
from scipy import ndimage

from .sim import AGENT_RADIUS, AgentPose, Scene, SceneObject

SCHEMA_VERSION = 1

# label -> ((width lo, hi), (depth lo, hi), (height lo, hi)), meters
CLASS_SIZES: dict[str, tuple] = {
    "sofa": ((1.4, 1.8), (0.7, 0.9), (0.7, 0.9)),
    "armchair": ((0.7, 0.9), (0.7, 0.9), (0.8, 1.0)),
    "bed": ((1.4, 1.7), (1.8, 2.0), (0.5, 0.7)),
    "table": ((0.8, 1.3), (0.6, 0.9), (0.7, 0.8)),
    "chair": ((0.4, 0.5), (0.4, 0.5), (0.8, 0.95)),
    "fridge": ((0.6, 0.8), (0.6, 0.8), (1.6, 1.8)),
    "microwave": ((0.45, 0.55), (0.35, 0.45), (0.9, 1.1)),
    "lamp": ((0.3, 0.4), (0.3, 0.4), (1.3, 1.6)),
    "tv": ((0.8, 1.2), (0.25, 0.35), (0.8, 1.0)),
    "bookshelf": ((0.7, 1.0), (0.3, 0.4), (1.5, 1.8)),
    "plant": ((0.3, 0.5), (0.3, 0.5), (0.9, 1.4)),
    "sink": ((0.5, 0.7), (0.4, 0.5), (0.85, 0.95)),
    "desk": ((1.0, 1.4), (0.5, 0.7), (0.72, 0.78)),
    "cabinet": ((0.6, 1.0), (0.4, 0.5), (0.9, 1.2)),
}

DEFAULT_CLASSES = tuple(sorted(CLASS_SIZES))


class ConfigInfeasibleError(Exception):
    pass


@dataclass
class SceneGenConfig:
    width: float = 8.0
    height: float = 8.0
    resolution: float = 0.05
    room_range: tuple[int, int] = (2, 4)
    objects_per_room: tuple[int, int] = (2, 3)
    object_classes: tuple[str, ...] = DEFAULT_CLASSES
    wall_thickness: float = 0.10
    wall_height: float = 2.2
    door_width: float = 1.3   # must clear 2 * (dilation + tau_obs) = 0.9 m with margin
    min_room_size: float = 2.4
    n_spawns: int = 8
    spawn_clearance: float = 0.3
    object_gap: float = 1.0       # footprint-to-footprint gap; keeps corridors plannable
    wall_clearance: float = 0.35  # furniture offset from room walls
    point_spacing: float = 0.07   # surface point sampling pitch
    max_surface_points: int = 320


def config_to_dict(cfg: SceneGenConfig) -> dict:
    d = asdict(cfg)
    d["schema_version"] = SCHEMA_VERSION
    d["room_range"] = list(cfg.room_range)
    d["objects_per_room"] = list(cfg.objects_per_room)
    d["object_classes"] = list(cfg.object_classes)
    return d


def config_from_dict(data: dict) -> SceneGenConfig:
    data = dict(data)
    if data.pop("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ValueError("unsupported scene config schema_version")
    data["room_range"] = tuple(data["room_range"])
    data["objects_per_room"] = tuple(data["objects_per_room"])
    data["object_classes"] = tuple(data["object_classes"])
    return SceneGenConfig(**data)


# ---------------------------------------------------------------------------
# geometry helpers

def _rect_gap(a, b) -> float:
    gx = max(0.0, max(a[0], b[0]) - min(a[1], b[1]))
    gy = max(0.0, max(a[2], b[2]) - min(a[3], b[3]))
    return math.hypot(gx, gy)


def _rects_intersect(a, b) -> bool:
    return not (a[1] <= b[0] or b[1] <= a[0] or a[3] <= b[2] or b[3] <= a[2])


def sample_surface_points(
    box: tuple[float, float, float, float, float, float],
    spacing: float = 0.07,
    max_points: int = 320,
) -> np.ndarray:
    """Deterministic point grid on the four side faces and the top face."""
    xmin, xmax, ymin, ymax, zmin, zmax = box
    w, d, h = xmax - xmin, ymax - ymin, zmax - zmin
    area = 2.0 * (w + d) * h + w * d
    s = max(spacing, math.sqrt(area / max_points))

    def lin(lo, hi):
        n = max(2, int(math.ceil((hi - lo) / s)) + 1)
        return np.linspace(lo, hi, n)

    xs, ys, zs = lin(xmin, xmax), lin(ymin, ymax), lin(zmin, zmax)
    faces = []
    gy, gz = np.meshgrid(ys, zs)
    faces.append(np.stack([np.full(gy.size, xmin), gy.ravel(), gz.ravel()], axis=1))
    faces.append(np.stack([np.full(gy.size, xmax), gy.ravel(), gz.ravel()], axis=1))
    gx, gz = np.meshgrid(xs, zs)
    faces.append(np.stack([gx.ravel(), np.full(gx.size, ymin), gz.ravel()], axis=1))
    faces.append(np.stack([gx.ravel(), np.full(gx.size, ymax), gz.ravel()], axis=1))
    gx, gy = np.meshgrid(xs, ys)
    faces.append(np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, zmax)], axis=1))
    return np.concatenate(faces, axis=0)


# ---------------------------------------------------------------------------
# generation stages

def _split_rooms(rng, interior, n_rooms, min_size, wall_thickness, door_width):
    """BSP split into rooms; each cut records a wall with one door gap."""
    rooms = [interior]
    walls = []  # (axis, pos, lo, hi): cut plane and its span on the other axis
    while len(rooms) < n_rooms:
        splittable = []
        for i, r in enumerate(rooms):
            w, h = r[1] - r[0], r[3] - r[2]
            if max(w, h) >= 2 * min_size + wall_thickness:
                splittable.append((max(w, h), i))
        if not splittable:
            raise ConfigInfeasibleError(
                f"cannot fit {n_rooms} rooms of {min_size} m in the given bounds"
            )
        _, i = max(splittable)
        x0, x1, y0, y1 = rooms.pop(i)
        if (x1 - x0) >= (y1 - y0):
            pos = rng.uniform(x0 + min_size, x1 - min_size)
            rooms.insert(i, (x0, pos - wall_thickness / 2, y0, y1))
            rooms.insert(i + 1, (pos + wall_thickness / 2, x1, y0, y1))
            walls.append(("x", pos, y0, y1))
        else:
            pos = rng.uniform(y0 + min_size, y1 - min_size)
            rooms.insert(i, (x0, x1, y0, pos - wall_thickness / 2))
            rooms.insert(i + 1, (x0, x1, pos + wall_thickness / 2, y1))
            walls.append(("y", pos, x0, x1))
    door_rects = []
    wall_boxes = []
    for axis, pos, lo, hi in walls:
        gap0 = rng.uniform(lo + 0.15, hi - door_width - 0.15)
        t = wall_thickness / 2
        for seg_lo, seg_hi in ((lo, gap0), (gap0 + door_width, hi)):
            if seg_hi - seg_lo <= 1e-9:
                continue
            if axis == "x":
                wall_boxes.append((pos - t, pos + t, seg_lo, seg_hi))
            else:
                wall_boxes.append((seg_lo, seg_hi, pos - t, pos + t))
        if axis == "x":
            door_rects.append((pos - 0.6, pos + 0.6, gap0 - 0.2, gap0 + door_width + 0.2))
        else:
            door_rects.append((gap0 - 0.2, gap0 + door_width + 0.2, pos - 0.6, pos + 0.6))
    return rooms, wall_boxes, door_rects


def _place_objects(rng, rooms, door_rects, cfg: SceneGenConfig):
    objects = []
    for room in rooms:
        n = int(rng.integers(cfg.objects_per_room[0], cfg.objects_per_room[1] + 1))
        for _ in range(n):
            label = cfg.object_classes[int(rng.integers(len(cfg.object_classes)))]
            (wlo, whi), (dlo, dhi), (hlo, hhi) = CLASS_SIZES[label]
            w = rng.uniform(wlo, whi)
            d = rng.uniform(dlo, dhi)
            h = rng.uniform(hlo, hhi)
            if rng.random() < 0.5:
                w, d = d, w
            margin = cfg.wall_clearance
            if room[1] - room[0] < w + 2 * margin or room[3] - room[2] < d + 2 * margin:
                continue
            for _attempt in range(40):
                cx = rng.uniform(room[0] + margin + w / 2, room[1] - margin - w / 2)
                cy = rng.uniform(room[2] + margin + d / 2, room[3] - margin - d / 2)
                fp = (cx - w / 2, cx + w / 2, cy - d / 2, cy + d / 2)
                if any(_rects_intersect(fp, dz) for dz in door_rects):
                    continue
                if any(_rect_gap(fp, o[1][:4]) < cfg.object_gap for o in objects):
                    continue
                objects.append((label, (fp[0], fp[1], fp[2], fp[3], 0.0, h)))
                break
    return objects


def _navigable_mask(bounds, footprints, resolution, shape) -> np.ndarray:
    xmin, xmax, ymin, ymax = bounds
    h, w = shape
    xs = xmin + (np.arange(w) + 0.5) * resolution
    ys = ymin + (np.arange(h) + 0.5) * resolution
    r = AGENT_RADIUS
    mask = (
        (xs[None, :] >= xmin + r) & (xs[None, :] <= xmax - r)
        & (ys[:, None] >= ymin + r) & (ys[:, None] <= ymax - r)
    )
    for rect in footprints:
        dx = np.maximum(np.maximum(rect[0] - xs, 0.0), xs - rect[1])
        dy = np.maximum(np.maximum(rect[2] - ys, 0.0), ys - rect[3])
        mask &= (dx[None, :] ** 2 + dy[:, None] ** 2) >= r * r
    return mask


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        raise ConfigInfeasibleError("no navigable space left after placement")
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def generate_scene(seed: int, config: Optional[SceneGenConfig] = None) -> Scene:
    """Build a scene deterministically from (seed, config)."""
    cfg = config or SceneGenConfig()
    rng = np.random.default_rng(seed)
    t = cfg.wall_thickness
    bounds = (0.0, cfg.width, 0.0, cfg.height)
    interior = (t, cfg.width - t, t, cfg.height - t)
    if interior[1] - interior[0] < cfg.min_room_size or interior[3] - interior[2] < cfg.min_room_size:
        raise ConfigInfeasibleError("bounds smaller than one room")

    n_rooms = int(rng.integers(cfg.room_range[0], cfg.room_range[1] + 1))
    rooms, wall_rects, door_rects = _split_rooms(
        rng, interior, n_rooms, cfg.min_room_size, t, cfg.door_width
    )
    # perimeter slabs just inside the bounds
    wall_rects = [
        (0.0, cfg.width, 0.0, t),
        (0.0, cfg.width, cfg.height - t, cfg.height),
        (0.0, t, 0.0, cfg.height),
        (cfg.width - t, cfg.width, 0.0, cfg.height),
    ] + wall_rects
    placed = _place_objects(rng, rooms, door_rects, cfg)

    shape = (
        int(round(cfg.height / cfg.resolution)),
        int(round(cfg.width / cfg.resolution)),
    )
    wall_boxes = [(r[0], r[1], r[2], r[3], 0.0, cfg.wall_height) for r in wall_rects]

    # drop objects that ended up unreachable (success radius minus margin)
    for _ in range(3):
        footprints = [b[:4] for b in wall_boxes] + [b[1][:4] for b in placed]
        grid = _largest_component(
            _navigable_mask(bounds, footprints, cfg.resolution, shape)
        )
        xs = bounds[0] + (np.arange(shape[1]) + 0.5) * cfg.resolution
        ys = bounds[2] + (np.arange(shape[0]) + 0.5) * cfg.resolution
        keep = []
        for label, box in placed:
            cx, cy = 0.5 * (box[0] + box[1]), 0.5 * (box[2] + box[3])
            d2 = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2
            if (grid & (d2 <= 1.3 * 1.3)).any():
                keep.append((label, box))
        if len(keep) == len(placed):
            break
        placed = keep

    objects = [
        SceneObject(
            label=label,
            box=box,
            surface_points=sample_surface_points(box, cfg.point_spacing, cfg.max_surface_points),
        )
        for label, box in placed
    ]
    obstacles = wall_boxes + [o.box for o in objects]

    # spawn poses on well-cleared navigable cells
    clearance_cells = ndimage.distance_transform_edt(grid) * cfg.resolution
    cand = np.argwhere(grid & (clearance_cells >= cfg.spawn_clearance))
    if len(cand) < cfg.n_spawns:
        raise ConfigInfeasibleError("not enough clear cells for spawn poses")
    picks = rng.choice(len(cand), size=cfg.n_spawns, replace=False)
    spawns = []
    for k in sorted(int(i) for i in picks):
        iy, ix = cand[k]
        spawns.append(
            AgentPose(
                x=bounds[0] + (ix + 0.5) * cfg.resolution,
                y=bounds[2] + (iy + 0.5) * cfg.resolution,
                yaw=int(rng.integers(12)) * 30,
                pitch=0,
            )
        )

    return Scene(
        id=f"scene-{seed:04d}",
        seed=seed,
        bounds=bounds,
        rooms=list(rooms),
        obstacles=obstacles,
        objects=objects,
        resolution=cfg.resolution,
        grid_origin=(bounds[0], bounds[2]),
        navigable_grid=grid,
        spawns=spawns,
    )


def save_config(cfg: SceneGenConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(config_to_dict(cfg), f, sort_keys=True, indent=1)


def load_config(path) -> SceneGenConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))
