"""Two-tier spatial memory.

Short term: per-panorama 3D object point clouds accumulated through an
overlap-threshold update rule (same physical object seen twice merges,
genuinely new geometry is appended).  Long term: a flat 2D semantic map
of (class, center, bbox) entries kept consistent across panoramas via
IoU similarity and optimal one-to-one matching, plus an append-only log
of planned targets with their execution feedback.  After each fuse the
transient 3D data is cleared.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels

DELTA_OVERLAP = 0.05        # meters; radius of the point-overlap neighborhood
MERGE_THRESHOLD = 0.8       # both overlap fractions above this -> same object
NEW_THRESHOLD = 0.25        # max candidate overlap below this -> new object
MIN_RESIDUAL_POINTS = 10    # partial-overlap residual kept only at this size
TAU_MATCH = 0.3             # minimum IoU for a global-map match

SUCCESS_KIND = "Success"


class MappingError(Exception):
    pass


class EmptyCloudError(MappingError):
    pass


class DegenerateBoxError(MappingError):
    pass


@dataclass
class ObjectPointCloud:
    """One detected object instance: open-vocabulary label + world points."""

    label: str
    pcd: np.ndarray  # (N, 3) float64

    def __post_init__(self):
        self.pcd = np.asarray(self.pcd, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.pcd)

    def center2d(self) -> tuple[float, float]:
        return (float(self.pcd[:, 0].mean()), float(self.pcd[:, 1].mean()))

    def bbox2d(self) -> tuple[float, float, float, float]:
        return (
            float(self.pcd[:, 0].min()),
            float(self.pcd[:, 0].max()),
            float(self.pcd[:, 1].min()),
            float(self.pcd[:, 1].max()),
        )


@dataclass
class ObjectMemoryEntry:
    label: str
    center: tuple[float, float]
    bbox: tuple[float, float, float, float]  # xmin, xmax, ymin, ymax


@dataclass
class TargetMemoryEntry:
    target: str
    position: tuple[float, float]
    feedback: str  # StepFeedback kind name, e.g. "Success" / "Obstructed"


@dataclass
class MemoryBank:
    """Per-episode memory; single writer, reads happen between writes."""

    object_memory: list[ObjectMemoryEntry] = field(default_factory=list)
    target_memory: list[TargetMemoryEntry] = field(default_factory=list)
    local_pc: list[ObjectPointCloud] = field(default_factory=list)
    failure_notes: list[str] = field(default_factory=list)
    subtask_status: list[bool] = field(default_factory=list)


class UpdateBranch(Enum):
    NEW = "new"
    MERGED = "merged"
    DISCARDED = "discarded"


@dataclass(frozen=True)
class UpdateOutcome:
    branch: UpdateBranch
    merged_index: Optional[int] = None
    kept_points: int = 0


# ---------------------------------------------------------------------------
# point-cloud accumulation

def overlap_scores(
    candidate: ObjectPointCloud, reference: ObjectPointCloud, delta: float = DELTA_OVERLAP
) -> tuple[float, float]:
    """Candidate- and reference-normalized overlap fractions.

    The overlap count is the number of candidate points within `delta`
    of some reference point.
    """
    if len(candidate) == 0 or len(reference) == 0:
        raise EmptyCloudError("overlap_scores requires non-empty clouds")
    if delta <= 0:
        raise ValueError("delta must be positive")
    count = int(kernels.points_within(candidate.pcd, reference.pcd, delta).sum())
    return count / len(candidate), count / len(reference)


def residual_cloud(
    candidate: ObjectPointCloud,
    recorded: Sequence[ObjectPointCloud],
    delta: float = DELTA_OVERLAP,
) -> ObjectPointCloud:
    """Candidate points farther than `delta` from every recorded cloud."""
    if len(candidate) == 0:
        raise EmptyCloudError("residual_cloud requires a non-empty candidate")
    keep = np.ones(len(candidate), dtype=bool)
    for rec in recorded:
        if len(rec) == 0 or not keep.any():
            continue
        keep &= ~kernels.points_within(candidate.pcd, rec.pcd, delta)
    return ObjectPointCloud(candidate.label, candidate.pcd[keep])


def update_local(
    candidate: ObjectPointCloud,
    bank: MemoryBank,
    delta: float = DELTA_OVERLAP,
    merge_threshold: float = MERGE_THRESHOLD,
    new_threshold: float = NEW_THRESHOLD,
    min_residual_points: int = MIN_RESIDUAL_POINTS,
) -> UpdateOutcome:
    """Fold one detection into the transient cloud set.

    The recorded clouds are scanned in insertion order while a staged
    copy of the candidate shrinks by each reference's overlap.  A double
    threshold pass (both fractions > 0.8) merges the remaining residual
    into that reference and adopts the candidate's label.  Otherwise the
    staged residual is appended as a new object when the best overlap
    stayed below 0.25, or kept only if it still has enough points.
    """
    if len(candidate) == 0:
        raise EmptyCloudError("update_local requires a non-empty candidate")
    staged = candidate.pcd
    max_os = -np.inf
    for i, ref in enumerate(bank.local_pc):
        if len(staged) == 0:
            break
        mask = kernels.points_within(staged, ref.pcd, delta)
        count = int(mask.sum())
        os_frac = count / len(staged)
        ros_frac = count / len(ref)
        max_os = max(max_os, os_frac)
        if os_frac > merge_threshold and ros_frac > merge_threshold:
            residual = staged[~mask]
            ref.pcd = np.concatenate([ref.pcd, residual], axis=0)
            ref.label = candidate.label
            return UpdateOutcome(UpdateBranch.MERGED, merged_index=i, kept_points=len(residual))
        staged = staged[~mask]
    if max_os < new_threshold:  # vacuously true over an empty record set
        if len(staged) > 0:
            bank.local_pc.append(ObjectPointCloud(candidate.label, staged))
            return UpdateOutcome(UpdateBranch.NEW, kept_points=len(staged))
        return UpdateOutcome(UpdateBranch.DISCARDED)
    if len(staged) >= min_residual_points:
        bank.local_pc.append(ObjectPointCloud(candidate.label, staged))
        return UpdateOutcome(UpdateBranch.NEW, kept_points=len(staged))
    return UpdateOutcome(UpdateBranch.DISCARDED)


# ---------------------------------------------------------------------------
# global 2D map

def bbox_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """2D IoU of (xmin, xmax, ymin, ymax) boxes; 0 when disjoint."""
    area_a = max(a[1] - a[0], 0.0) * max(a[3] - a[2], 0.0)
    area_b = max(b[1] - b[0], 0.0) * max(b[3] - b[2], 0.0)
    if area_a == 0.0 and area_b == 0.0:
        raise DegenerateBoxError("both boxes have zero area")
    iw = min(a[1], b[1]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[2], b[2])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def hungarian_match(
    similarity: np.ndarray, min_similarity: float = 0.0
) -> list[tuple[int, int]]:
    """Maximum-total-similarity one-to-one assignment (row, col) pairs.

    Produces min(rows, cols) pairs, then drops pairs whose similarity is
    below `min_similarity`.
    """
    similarity = np.asarray(similarity, dtype=np.float64)
    if similarity.size == 0:
        return []
    rows, cols = linear_sum_assignment(similarity, maximize=True)
    return [
        (int(r), int(c))
        for r, c in zip(rows, cols)
        if similarity[r, c] >= min_similarity
    ]


def fuse_to_global(bank: MemoryBank, iou_threshold: float = TAU_MATCH) -> MemoryBank:
    """Flatten the transient clouds into the 2D map, then prune them.

    Candidates matched to an existing entry (IoU-optimal assignment, at
    least `iou_threshold`) overwrite it; the rest are appended.
    """
    if not bank.local_pc:
        return bank
    cands = [(c.label, c.center2d(), c.bbox2d()) for c in bank.local_pc]
    if not bank.object_memory:
        for label, center, bbox in cands:
            bank.object_memory.append(ObjectMemoryEntry(label, center, bbox))
        bank.local_pc.clear()
        return bank
    sim = np.zeros((len(cands), len(bank.object_memory)))
    for i, (_, _, bbox) in enumerate(cands):
        for j, entry in enumerate(bank.object_memory):
            try:
                sim[i, j] = bbox_iou(bbox, entry.bbox)
            except DegenerateBoxError:
                sim[i, j] = 0.0
    pairs = hungarian_match(sim, min_similarity=iou_threshold)
    matched = {r: c for r, c in pairs}
    for i, (label, center, bbox) in enumerate(cands):
        if i in matched:
            entry = bank.object_memory[matched[i]]
            entry.label = label
            entry.center = center
            entry.bbox = bbox
        else:
            bank.object_memory.append(ObjectMemoryEntry(label, center, bbox))
    bank.local_pc.clear()
    return bank


# ---------------------------------------------------------------------------
# target memory

def record_target(
    bank: MemoryBank, target: str, position: tuple[float, float], feedback: str
) -> MemoryBank:
    """Append one planned-target outcome to the episode log."""
    bank.target_memory.append(TargetMemoryEntry(target, position, feedback))
    return bank


def consecutive_failures(bank: MemoryBank) -> int:
    """Length of the trailing same-target failure run in the target log."""
    n = 0
    last_target = None
    for entry in reversed(bank.target_memory):
        if entry.feedback == SUCCESS_KIND:
            break
        if last_target is None:
            last_target = entry.target
        elif entry.target != last_target:
            break
        n += 1
    return n


def bank_snapshot(bank: MemoryBank) -> dict:
    """JSON-ready dump of both long-term banks (debugging, golden tests)."""
    return {
        "object_memory": [
            {
                "class": e.label,
                "center": [float(e.center[0]), float(e.center[1])],
                "bbox": [float(v) for v in e.bbox],
            }
            for e in bank.object_memory
        ],
        "target_memory": [
            {
                "target": e.target,
                "position": [float(e.position[0]), float(e.position[1])],
                "feedback": e.feedback,
            }
            for e in bank.target_memory
        ],
        "subtask_status": list(bank.subtask_status),
    }
