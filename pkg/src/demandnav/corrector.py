"""Feedback-driven error correction during plan execution.

A correction fires when a forward step is refused (collision, boundary)
or when the recent motion history collapses onto too few positions (a
positional loop).  Recovery re-senses the surroundings, merges them into
the episode's accumulated obstacle grid, and replans from the current
pose with fine waypoint sampling over the first stretch of the new path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .planner import (
    NoPathError,
    OccupancyAccumulator,
    PlanningConfig,
    plan_path,
)
from .sim import AgentPose, FeedbackKind, Scene, StepFeedback, sense_structure

LOOP_WINDOW = 6        # poses inspected by the loop detector
LOOP_MAX_DISTINCT = 2  # this few distinct positions within the window = loop
LOOP_QUANTUM = 0.1     # meters; positions are binned before counting


@dataclass
class CorrectionState:
    active: bool = False
    replan_count: int = 0          # replans spent on the current target
    last_feedback: Optional[StepFeedback] = None
    fine_budget: float = 0.0       # meters left in the fine-sampled segment


def should_correct(
    feedback: Optional[StepFeedback],
    recent_positions: Sequence[tuple[float, float]],
    window: int = LOOP_WINDOW,
    max_distinct: int = LOOP_MAX_DISTINCT,
) -> bool:
    """Failed step feedback, or a collapsed motion history, demands a replan.

    `recent_positions` should hold the positions observed at forward
    steps (rotations scan in place and must not look like loops).
    """
    if feedback is not None and feedback.kind in (
        FeedbackKind.OBSTRUCTED,
        FeedbackKind.OUT_OF_BOUNDS,
    ):
        return True
    if len(recent_positions) >= window:
        tail = recent_positions[-window:]
        cells = {
            (math.floor(x / LOOP_QUANTUM), math.floor(y / LOOP_QUANTUM)) for x, y in tail
        }
        if len(cells) <= max_distinct:
            return True
    return False


def replan(
    scene: Scene,
    pose: AgentPose,
    target: tuple[float, float],
    occupancy: OccupancyAccumulator,
    cfg: PlanningConfig,
    n_rays: int = 360,
    structure_range: float = 5.0,
) -> list[tuple[float, float]]:
    """Recompute waypoints from the current pose after a failure.

    Fresh structure sensing is merged into the episode's accumulated
    grid (already-seen obstacles persist), then the affordance map is
    rebuilt and searched again.  The first stretch of the new path is
    sampled at the fine interval.  Raises NoPathError when the target
    became unreachable; the caller records the failure and falls back to
    target reselection.
    """
    occupancy.add_points(
        sense_structure(scene, pose, n_rays=n_rays, max_range=structure_range),
        h_floor=cfg.h_floor,
        h_agent=cfg.h_agent,
    )
    waypoints, _aff = plan_path(occupancy, pose.position, target, cfg, fine_prefix=True)
    return waypoints


__all__ = [
    "CorrectionState",
    "should_correct",
    "replan",
    "NoPathError",
    "LOOP_WINDOW",
    "LOOP_MAX_DISTINCT",
]
