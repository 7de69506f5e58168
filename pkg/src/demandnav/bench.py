"""Benchmark layer: templated task generation, the four navigation
metrics, ground-truth shortest paths and result persistence.

A task bundles three demand clauses; each clause names a preference and
the object classes that satisfy it.  Generated tasks are guaranteed
solvable: every clause has at least one satisfying object reachable from
the task's spawn on the ground-truth grid.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .decision import Subtask
from .sim import Scene

SCHEMA_VERSION = 1
SUBTASKS_PER_TASK = 3

# (requirement, preference, satisfying classes)
DEMAND_CATALOG: list[tuple[str, str, tuple[str, ...]]] = [
    ("I need a comfortable spot to rest for a while", "soft seating would be ideal",
     ("sofa", "armchair", "bed")),
    ("I want to heat up my lunch", "a microwave oven", ("microwave",)),
    ("I need to keep the groceries cold", "a fridge", ("fridge",)),
    ("I want better light for reading", "a standing lamp", ("lamp",)),
    ("I need a flat surface to work on", "a desk or a large table", ("desk", "table")),
    ("I want to catch the evening news", "a television", ("tv",)),
    ("I need to shelve this stack of books", "a bookshelf", ("bookshelf",)),
    ("I want something green in the room", "a potted plant", ("plant",)),
    ("I need to rinse my hands", "a sink", ("sink",)),
    ("I need a place to sit for dinner", "an ordinary chair", ("chair",)),
    ("I want to stow the board games away", "a closed cabinet", ("cabinet",)),
]


class BenchError(Exception):
    pass


class UnsatisfiableError(BenchError):
    pass


class UnreachableError(BenchError):
    pass


class EmptyInputError(BenchError):
    pass


@dataclass
class Task:
    task_id: str
    instruction: str
    subtasks: list[Subtask]
    scene_id: str
    spawn_index: int


@dataclass
class SubtaskResult:
    success: bool
    shortest: float  # meters, ground-truth optimum from the subtask's activation pose
    actual: float    # meters actually traveled while the subtask was active


@dataclass
class EpisodeResult:
    task_id: str
    subtasks: list[SubtaskResult]
    steps: int
    wall_time: float = 0.0

    @property
    def all_success(self) -> bool:
        return all(s.success for s in self.subtasks)


# ---------------------------------------------------------------------------
# shortest paths

_SQRT2 = math.sqrt(2.0)


def _nearest_true(mask: np.ndarray, ix: int, iy: int) -> tuple[int, int]:
    if mask[iy, ix]:
        return ix, iy
    ys, xs = np.nonzero(mask)
    k = int(np.argmin((xs - ix) ** 2 + (ys - iy) ** 2))
    return int(xs[k]), int(ys[k])


def shortest_path_length(
    scene: Scene,
    start: tuple[float, float],
    classes: Sequence[str],
    eps_dis: float = 1.5,
) -> float:
    """Metric length of the cheapest grid path into the success region.

    Uniform-cost search on the ground-truth navigable grid, 8-connected,
    to the nearest cell whose center lies within `eps_dis` of any
    satisfying object center.  Zero when the start already qualifies.
    """
    classes = set(classes)
    centers = [o.center2d for o in scene.objects if o.label in classes]
    if not centers:
        raise UnreachableError(f"scene has no object of classes {sorted(classes)}")
    if min(math.hypot(c[0] - start[0], c[1] - start[1]) for c in centers) <= eps_dis:
        return 0.0
    grid = scene.navigable_grid
    h, w = grid.shape
    res = scene.resolution
    xs = scene.grid_origin[0] + (np.arange(w) + 0.5) * res
    ys = scene.grid_origin[1] + (np.arange(h) + 0.5) * res
    goal = np.zeros_like(grid)
    for cx, cy in centers:
        goal |= ((xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2) <= eps_dis * eps_dis
    goal &= grid
    if not goal.any():
        raise UnreachableError("no navigable cell inside the success radius")
    sx, sy = _nearest_true(grid, *scene.world_to_cell(*start))
    dist = np.full((h, w), np.inf)
    dist[sy, sx] = 0.0
    heap = [(0.0, sx, sy)]
    while heap:
        d, x, y = heapq.heappop(heap)
        if d > dist[y, x]:
            continue
        if goal[y, x]:
            return d * res
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)):
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and grid[ny, nx]:
                nd = d + (_SQRT2 if dx and dy else 1.0)
                if nd < dist[ny, nx]:
                    dist[ny, nx] = nd
                    heapq.heappush(heap, (nd, nx, ny))
    raise UnreachableError("success region not connected to the start")


# ---------------------------------------------------------------------------
# task generation

def _feasible_demands(
    scene: Scene, spawn_index: int, catalog, eps_dis: float
) -> list[int]:
    start = scene.spawns[spawn_index].position
    scene_classes = scene.class_set()
    out = []
    for i, (_req, _pref, classes) in enumerate(catalog):
        if not scene_classes.intersection(classes):
            continue
        try:
            shortest_path_length(scene, start, classes, eps_dis)
        except UnreachableError:
            continue
        out.append(i)
    return out


def _compose_instruction(clauses: list[Subtask]) -> str:
    parts = [f"{c.requirement}, {c.preference}" if c.preference else c.requirement
             for c in clauses]
    joined = ". Then ".join([parts[0]] + parts[1:-1]) if len(parts) > 2 else parts[0]
    if len(parts) > 1:
        return f"{joined}. Finally {parts[-1]}."
    return f"{joined}."


def generate_tasks(
    scenes: Sequence[Scene],
    count: int,
    seed: int,
    catalog=None,
    eps_dis: float = 1.5,
    subtasks_per_task: int = SUBTASKS_PER_TASK,
) -> list[Task]:
    """Deterministically draw solvable multi-demand tasks over the scenes."""
    if not scenes:
        raise UnsatisfiableError("no scenes")
    catalog = catalog if catalog is not None else DEMAND_CATALOG
    rng = np.random.default_rng(seed)
    tasks: list[Task] = []
    for i in range(count):
        for _attempt in range(64):
            scene = scenes[int(rng.integers(len(scenes)))]
            spawn_index = int(rng.integers(len(scene.spawns)))
            feasible = _feasible_demands(scene, spawn_index, catalog, eps_dis)
            if len(feasible) >= subtasks_per_task:
                break
        else:
            raise UnsatisfiableError(
                f"no scene offers {subtasks_per_task} distinct satisfiable demands"
            )
        picks = rng.choice(len(feasible), size=subtasks_per_task, replace=False)
        subtasks = []
        for k in picks:
            req, pref, classes = catalog[feasible[int(k)]]
            subtasks.append(Subtask(req, pref, frozenset(classes)))
        tasks.append(
            Task(
                task_id=f"task-{i:03d}",
                instruction=_compose_instruction(subtasks),
                subtasks=subtasks,
                scene_id=scene.id,
                spawn_index=spawn_index,
            )
        )
    return tasks


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricsReport:
    sr: float    # percent of tasks with every subtask successful
    isr: float   # percent of subtasks successful
    ispl: float  # percent, path-length-weighted subtask success
    stl: float   # mean steps over fully successful episodes (0 when none)
    n_tasks: int
    n_subtasks: int

    def to_dict(self) -> dict:
        return {
            "SR": self.sr, "ISR": self.isr, "ISPL": self.ispl, "STL": self.stl,
            "tasks": self.n_tasks, "subtasks": self.n_subtasks,
        }


def _ispl_terms(result: EpisodeResult) -> list[float]:
    terms = []
    for s in result.subtasks:
        if not s.success:
            terms.append(0.0)
        elif s.shortest == 0.0:
            terms.append(1.0)  # satisfied at activation; ratio capped at 1
        else:
            terms.append(s.shortest / max(s.shortest, s.actual))
    return terms


def compute_metrics(
    results: Sequence[EpisodeResult], ispl_pooling: str = "within_task"
) -> MetricsReport:
    """SR / ISR / ISPL / STL over a result batch.

    `ispl_pooling` selects whether subtask terms are averaged within a
    task first ("within_task") or pooled across all subtasks ("pooled").
    """
    if not results:
        raise EmptyInputError("no episode results")
    if ispl_pooling not in ("within_task", "pooled"):
        raise ValueError(f"unknown ispl_pooling {ispl_pooling!r}")
    n_tasks = len(results)
    flags = [[s.success for s in r.subtasks] for r in results]
    n_subtasks = sum(len(f) for f in flags)
    sr = 100.0 * sum(all(f) for f in flags) / n_tasks
    isr = 100.0 * sum(sum(f) for f in flags) / n_subtasks
    if ispl_pooling == "within_task":
        ispl = 100.0 * sum(
            sum(_ispl_terms(r)) / len(r.subtasks) for r in results
        ) / n_tasks
    else:
        ispl = 100.0 * sum(sum(_ispl_terms(r)) for r in results) / n_subtasks
    successful = [r.steps for r in results if r.all_success]
    stl = sum(successful) / len(successful) if successful else 0.0
    return MetricsReport(sr, isr, ispl, stl, n_tasks, n_subtasks)


# ---------------------------------------------------------------------------
# persistence

def task_to_dict(task: Task) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "task_id": task.task_id,
        "instruction": task.instruction,
        "scene_id": task.scene_id,
        "spawn_index": task.spawn_index,
        "subtasks": [
            {
                "requirement": s.requirement,
                "preference": s.preference,
                "classes": sorted(s.satisfying_classes),
            }
            for s in task.subtasks
        ],
    }


def task_from_dict(data: dict) -> Task:
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported task schema_version: {data.get('schema_version')!r}")
    return Task(
        task_id=data["task_id"],
        instruction=data["instruction"],
        subtasks=[
            Subtask(s["requirement"], s.get("preference", ""), frozenset(s["classes"]))
            for s in data["subtasks"]
        ],
        scene_id=data["scene_id"],
        spawn_index=int(data["spawn_index"]),
    )


def save_tasks(tasks: Sequence[Task], path) -> None:
    with open(path, "w") as f:
        for t in tasks:
            f.write(json.dumps(task_to_dict(t), sort_keys=True) + "\n")


def load_tasks(path) -> list[Task]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(task_from_dict(json.loads(line)))
    return out


def write_results_csv(results: Sequence[EpisodeResult], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["task_id", "success_flags", "shortest_m", "actual_m", "steps"])
        for r in results:
            writer.writerow([
                r.task_id,
                "".join("1" if s.success else "0" for s in r.subtasks),
                ";".join(repr(round(s.shortest, 6)) for s in r.subtasks),
                ";".join(repr(round(s.actual, 6)) for s in r.subtasks),
                r.steps,
            ])
