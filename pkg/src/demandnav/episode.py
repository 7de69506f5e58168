"""Dual-tempo episode loop.

Each cycle runs one slow phase (panoramic sensing, memory update, target
selection, affordance planning) and executes the compiled actions with
the error corrector armed, then hands control to the fast greedy
specialist for a short burst.  A Done signal from the specialist gates
the status update.  Episodes end when every subtask is marked done or
the step budget runs out, and every step is logged to a replayable
trace.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import corrector as corr
from .bench import EpisodeResult, SubtaskResult, Task, shortest_path_length
from .decision import (
    ExcludedTarget,
    NoCandidatesError,
    ObservationSummary,
    Subtask,
)
from .mapping import (
    MemoryBank,
    consecutive_failures,
    fuse_to_global,
    record_target,
    update_local,
)
from .planner import (
    NoPathError,
    OccupancyAccumulator,
    PlanningConfig,
    compile_actions,
    plan_path,
    save_affordance_pgm,
)
from .sim import (
    HFOV_DEG,
    STEP_SIZE,
    Action,
    AgentPose,
    FeedbackKind,
    NoiseConfig,
    Scene,
    object_within_success_radius,
    sense_panorama,
    sense_structure,
    step as sim_step,
    visible_object_distances,
)

TRACE_SCHEMA_VERSION = 1


@dataclass
class EpisodeConfig:
    """Episode knobs; defaults follow the experimental constants."""

    eps_dis: float = 1.5          # success radius, meters
    len_max: int = 50             # step budget
    n_tolerance: int = 2          # consecutive failures before exclusion kicks in
    tau_obs: float = 0.25         # obstacle-avoidance cutoff, meters
    slow_interval: int = 12       # max planned actions executed per cycle
    fast_burst: int = 6           # specialist actions after each plan segment
    step_counting: str = "primitive"  # "primitive" or "waypoint"
    corrector_enabled: bool = True
    max_replans: int = 6          # corrections per target attempt before giving up
    seed: int = 0                 # episode rng (detection noise)
    noise: NoiseConfig = field(default_factory=NoiseConfig.off)
    sense_range: float = 5.0      # object detection range, meters
    structure_range: float = 5.0  # structure raycast range, meters
    n_rays: int = 360
    dilation_radius: float = 0.2
    cost_weight: float = 4.0
    n_waypoint: int = 8
    n_block: int = 2
    fine_prefix_len: float = 2.0

    def planning_config(self) -> PlanningConfig:
        return PlanningConfig(
            tau_obs=self.tau_obs,
            dilation_radius=self.dilation_radius,
            cost_weight=self.cost_weight,
            n_waypoint=self.n_waypoint,
            n_block=self.n_block,
            fine_prefix_len=self.fine_prefix_len,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise"] = asdict(self.noise)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "EpisodeConfig":
        data = dict(data)
        noise = data.pop("noise", None)
        cfg = cls(**data)
        if noise:
            cfg.noise = NoiseConfig(**noise)
        return cfg


class ReplayMismatchError(Exception):
    pass


class FrontierExplorer:
    """Exploration targets: least-visited frontier cell, nearest first."""

    def __init__(self, occupancy: OccupancyAccumulator, dilation_radius: float,
                 avoid_radius: float = 0.5, min_distance: float = 0.75):
        self._occ = occupancy
        self._dilation = dilation_radius
        self._avoid_radius = avoid_radius
        self._min_distance = min_distance

    def pick(self, agent_position, avoid=None) -> Optional[tuple[float, float]]:
        mask = self._occ.frontier_mask(self._dilation)
        cells = np.argwhere(mask)  # (n, 2) of (iy, ix), row-major order
        if len(cells) == 0:
            return None
        res = self._occ.resolution
        cx = self._occ.origin[0] + (cells[:, 1] + 0.5) * res
        cy = self._occ.origin[1] + (cells[:, 0] + 0.5) * res
        d2 = (cx - agent_position[0]) ** 2 + (cy - agent_position[1]) ** 2
        keep = d2 > self._min_distance ** 2  # a frontier underfoot is no goal
        if avoid is not None:
            keep &= (cx - avoid[0]) ** 2 + (cy - avoid[1]) ** 2 > self._avoid_radius ** 2
        if not keep.any():
            return None
        cells, cx, cy, d2 = cells[keep], cx[keep], cy[keep], d2[keep]
        counts = self._occ.visit_counts[cells[:, 0], cells[:, 1]]
        k = int(np.lexsort((d2, counts))[0])  # least visited, then nearest, then row-major
        return float(cx[k]), float(cy[k])


def observation_summary(scene: Scene, pose: AgentPose, max_range: float) -> ObservationSummary:
    objs = visible_object_distances(scene, pose, max_range=max_range, fov=None)
    return ObservationSummary(
        agent_position=pose.position,
        objects=[(o.label, d, o.center2d) for o, d in objs],
    )


def fast_tempo_specialist(
    scene: Scene,
    pose: AgentPose,
    subtasks: list[Subtask],
    status: list[bool],
    eps_dis: float = 1.5,
    max_range: float = 5.0,
) -> Action:
    """Greedy scripted stand-in for a learned low-level policy.

    Done when a satisfying object for some pending subtask sits in the
    field of view inside the success radius; otherwise close in on the
    nearest visible one; otherwise rotate to scan.
    """
    want: set[str] = set()
    for st, done in zip(subtasks, status):
        if not done:
            want |= st.satisfying_classes
    if want:
        around = [
            (d, o) for o, d in visible_object_distances(scene, pose, max_range=max_range)
            if o.label in want
        ]
        if around:
            d, obj = min(around, key=lambda t: t[0])
            cx, cy = obj.center2d
            bearing = math.degrees(math.atan2(cy - pose.y, cx - pose.x))
            rel = (bearing - pose.yaw + 180.0) % 360.0 - 180.0
            if d <= eps_dis:
                if abs(rel) <= HFOV_DEG / 2.0:
                    return Action.DONE
                # close enough but out of frame: turn until it is in view
                return Action.ROTATE_LEFT if rel > 0 else Action.ROTATE_RIGHT
            if abs(rel) > HFOV_DEG / 2.0:
                return Action.ROTATE_RIGHT
            if abs(rel) <= 15.0:
                return Action.MOVE_AHEAD
            return Action.ROTATE_LEFT if rel > 0 else Action.ROTATE_RIGHT
    return Action.ROTATE_RIGHT


def check_success(scene: Scene, pose: AgentPose, subtask: Subtask, eps: float = 1.5) -> bool:
    """Whether any object satisfying the subtask lies within the radius."""
    return object_within_success_radius(scene, pose, subtask.satisfying_classes, eps) is not None


# ---------------------------------------------------------------------------
# episode execution

class _Runner:
    def __init__(self, scene: Scene, task: Task, config: EpisodeConfig, backend):
        self.scene = scene
        self.task = task
        self.cfg = config
        self.backend = backend
        self.pcfg = config.planning_config()
        self.rng = np.random.default_rng(config.seed)
        self.pose = scene.spawns[task.spawn_index]
        self.bank = MemoryBank()
        self.occupancy = OccupancyAccumulator.from_scene(scene)
        self.explorer = FrontierExplorer(self.occupancy, config.dilation_radius)
        self.trace: list[dict] = []
        self.steps = 0
        self.primitive_steps = 0
        self.distance = 0.0
        self.recent_moves: deque = deque(maxlen=corr.LOOP_WINDOW)
        # per-subtask completion bookkeeping
        self.seg_start_pos = self.pose.position
        self.seg_start_dist = 0.0
        self.completions: list[dict] = []
        self.locate_calls = 0
        self.cycle_events = 0
        self.last_plan_error = ""

    # -- budget ------------------------------------------------------------

    def budget_left(self) -> bool:
        if self.primitive_steps >= self.cfg.len_max * 32:  # runaway guard
            return False
        return self.steps < self.cfg.len_max

    def _count_macro(self):
        if self.cfg.step_counting == "waypoint":
            self.steps += 1

    def exec_action(self, action: Action, tempo: str):
        self.pose, fb = sim_step(self.scene, self.pose, action)
        self.primitive_steps += 1
        if self.cfg.step_counting == "primitive":
            self.steps += 1
        elif tempo == "fast":
            self.steps += 1
        if action is Action.MOVE_AHEAD:
            self.recent_moves.append(self.pose.position)
            if fb.ok:
                self.distance += STEP_SIZE
        self.occupancy.visit(self.pose.x, self.pose.y)
        self.trace.append({
            "type": "action",
            "step": self.steps,
            "tempo": tempo,
            "action": action.value,
            "feedback": fb.kind.value,
            "x": self.pose.x,
            "y": self.pose.y,
            "yaw": self.pose.yaw,
            "pitch": self.pose.pitch,
        })
        return fb

    # -- slow phase --------------------------------------------------------

    def sense_and_remember(self):
        clouds = sense_panorama(
            self.scene, self.pose,
            noise=self.cfg.noise, rng=self.rng, max_range=self.cfg.sense_range,
        )
        for cloud in clouds:
            update_local(cloud, self.bank)
        fuse_to_global(self.bank)
        self.occupancy.add_points(
            sense_structure(
                self.scene, self.pose,
                n_rays=self.cfg.n_rays, max_range=self.cfg.structure_range,
            ),
            h_floor=self.pcfg.h_floor,
            h_agent=self.pcfg.h_agent,
        )

    def select_target(self, subtasks, status):
        excluded = None
        if consecutive_failures(self.bank) >= self.cfg.n_tolerance and self.bank.target_memory:
            last = self.bank.target_memory[-1]
            excluded = ExcludedTarget(last.target, last.position)
            self.bank.failure_notes.append(excluded.text())
        try:
            decision = self.backend.locate_next(
                self.bank, self.task.instruction, subtasks, status,
                self.pose.position, self.explorer, excluded,
            )
        except NoCandidatesError:
            decision = None
        self.locate_calls += 1
        self.trace.append({
            "type": "decision",
            "step": self.steps,
            "target": decision.target_object if decision else None,
            "position": list(decision.target_position) if decision else None,
            "exploration": decision.is_exploration if decision else False,
            "excluded": excluded.target_object if excluded else None,
        })
        return decision

    def execute_plan(self, decision, affordance_path=None) -> Optional[str]:
        """Run the compiled plan under the corrector.

        Returns "arrived", "failed", or None when the cycle budget cut
        the plan short (the attempt continues next cycle).
        """
        state = corr.CorrectionState()
        self.last_plan_error = ""
        try:
            waypoints, aff = plan_path(
                self.occupancy, self.pose.position, decision.target_position,
                self.pcfg, fine_prefix=False,
            )
        except NoPathError as e:
            self.last_plan_error = str(e)
            return "failed"
        if affordance_path is not None:
            save_affordance_pgm(aff, affordance_path)
        wp_queue = deque(waypoints)
        current_wp = None
        executed = 0
        aligned = False
        while self.budget_left():
            if executed >= self.cfg.slow_interval:
                self._count_macro()
                return None  # re-sense cadence for long plans
            if current_wp is None:
                if not wp_queue:
                    if not aligned and not decision.is_exploration:
                        # face what we came for so the specialist sees it
                        aligned = True
                        rotations = self._alignment_rotations(decision.target_position)
                        for rot in rotations:
                            if not self.budget_left() or executed >= self.cfg.slow_interval:
                                break
                            self.exec_action(rot, "slow")
                            executed += 1
                    self._count_macro()
                    return "arrived"
                current_wp = wp_queue.popleft()
            # closed-loop follower: re-aim at the waypoint every action so
            # the 30-degree yaw grid cannot accumulate lateral drift
            script = compile_actions(self.pose, current_wp)
            if not script:
                current_wp = None
                continue
            action = script[0]
            fb = self.exec_action(action, "slow")
            executed += 1
            if action is Action.MOVE_AHEAD and state.fine_budget > 0 and fb.ok:
                state.fine_budget = max(0.0, state.fine_budget - STEP_SIZE)
            if action is Action.MOVE_AHEAD and self.cfg.corrector_enabled and corr.should_correct(
                fb, list(self.recent_moves)
            ):
                state.active = True
                state.last_feedback = fb
                if state.replan_count >= self.cfg.max_replans:
                    return "failed"
                state.replan_count += 1
                old_len = len(wp_queue) + (1 if current_wp is not None else 0)
                try:
                    new_wps = corr.replan(
                        self.scene, self.pose, decision.target_position,
                        self.occupancy, self.pcfg,
                        n_rays=self.cfg.n_rays, structure_range=self.cfg.structure_range,
                    )
                except NoPathError:
                    self.trace.append({
                        "type": "correction", "step": self.steps,
                        "cause": fb.kind.value if not fb.ok else "loop",
                        "old_waypoints": old_len, "new_waypoints": 0, "outcome": "no_path",
                    })
                    return "failed"
                state.fine_budget = self.pcfg.fine_prefix_len
                self.trace.append({
                    "type": "correction", "step": self.steps,
                    "cause": fb.kind.value if not fb.ok else "loop",
                    "old_waypoints": old_len, "new_waypoints": len(new_wps),
                    "outcome": "replanned",
                })
                wp_queue = deque(new_wps)
                current_wp = None
                self.recent_moves.clear()
        return None

    # -- fast phase ----------------------------------------------------------

    def fast_phase(self, subtasks, status) -> list[bool]:
        # burst length: panoramic sensing is heading-independent, so blind
        # scanning cannot reveal anything new; without a candidate in
        # sensing range one token action keeps the tempo alternation alive
        want: set[str] = set()
        for st, done in zip(subtasks, status):
            if not done:
                want |= st.satisfying_classes
        prospects = any(
            o.label in want
            for o, _d in visible_object_distances(self.scene, self.pose, self.cfg.sense_range)
        )
        limit = self.cfg.fast_burst if prospects else min(1, self.cfg.fast_burst)
        burst = 0
        while self.budget_left() and not all(status) and burst < limit:
            action = fast_tempo_specialist(
                self.scene, self.pose, subtasks, status,
                eps_dis=self.cfg.eps_dis, max_range=self.cfg.sense_range,
            )
            fb = self.exec_action(action, "fast")
            burst += 1
            if action is Action.DONE:
                summary = observation_summary(self.scene, self.pose, self.cfg.sense_range)
                sdec = self.backend.update_status(
                    self.task.instruction, status, self.bank, summary, action
                )
                new_status = list(sdec.updated_status)
                self.trace.append({
                    "type": "status",
                    "step": self.steps,
                    "completed": sdec.completed_subtask,
                    "status": list(new_status),
                })
                if sdec.completed_subtask is not None:
                    self._record_completion(sdec.completed_subtask)
                status = new_status
                self.bank.subtask_status = list(status)
                break
            if action is Action.MOVE_AHEAD and not fb.ok:
                break  # greedy approach blocked; let the planner take over
        return status

    def _alignment_rotations(self, point: tuple[float, float]) -> list[Action]:
        dx, dy = point[0] - self.pose.x, point[1] - self.pose.y
        if math.hypot(dx, dy) < 1e-9:
            return []
        bearing = math.degrees(math.atan2(dy, dx))
        target_yaw = int(math.floor(bearing / 30.0 + 0.5) * 30) % 360
        diff = (target_yaw - self.pose.yaw + 180) % 360 - 180
        turn = Action.ROTATE_LEFT if diff > 0 else Action.ROTATE_RIGHT
        return [turn] * (abs(diff) // 30)

    def _record_completion(self, idx: int):
        self.completions.append({
            "subtask": idx,
            "step": self.steps,
            "pose": self.pose,
            "activation_pos": self.seg_start_pos,
            "actual": self.distance - self.seg_start_dist,
        })
        self.seg_start_pos = self.pose.position
        self.seg_start_dist = self.distance

    # -- main loop -----------------------------------------------------------

    def run(self, affordance_dir=None) -> tuple[EpisodeResult, list[dict]]:
        t0 = time.perf_counter()
        subtasks, status = self.backend.break_instruction(self.task.instruction)
        self.bank.subtask_status = list(status)
        self.trace.append({
            "type": "meta",
            "schema_version": TRACE_SCHEMA_VERSION,
            "scene_id": self.scene.id,
            "task_id": self.task.task_id,
            "spawn_index": self.task.spawn_index,
            "instruction": self.task.instruction,
            "config": self.cfg.to_dict(),
        })
        cycle = 0
        while self.budget_left() and not all(status):
            steps_before = self.steps
            self.sense_and_remember()
            decision = self.select_target(subtasks, status)
            if decision is not None:
                aff_path = None
                if affordance_dir is not None:
                    aff_path = f"{affordance_dir}/affordance-{cycle:03d}.pgm"
                outcome = self.execute_plan(decision, aff_path)
                rec = {
                    "type": "plan",
                    "step": self.steps,
                    "target": decision.target_object,
                    "outcome": outcome or "cut",
                }
                if outcome == "failed" and self.last_plan_error:
                    rec["error"] = self.last_plan_error
                self.trace.append(rec)
                if outcome == "arrived":
                    record_target(
                        self.bank, decision.target_object, decision.target_position,
                        FeedbackKind.SUCCESS.value,
                    )
                elif outcome == "failed":
                    record_target(
                        self.bank, decision.target_object, decision.target_position,
                        FeedbackKind.OBSTRUCTED.value,
                    )
                    self.cycle_events += 1
            status = self.fast_phase(subtasks, status)
            if self.steps == steps_before and self.budget_left() and not all(status):
                # a cycle that moved nothing must still consume budget
                self.exec_action(Action.ROTATE_RIGHT, "fast")
            cycle += 1
        wall = time.perf_counter() - t0

        results = self._subtask_results(status)
        result = EpisodeResult(
            task_id=self.task.task_id,
            subtasks=results,
            steps=self.steps,
            wall_time=wall,
        )
        self.trace.append({
            "type": "result",
            "step": self.steps,
            "status": list(status),
            "success_flags": [s.success for s in results],
            "locate_calls": self.locate_calls,
        })
        return result, self.trace

    def _subtask_results(self, status) -> list[SubtaskResult]:
        by_subtask = {c["subtask"]: c for c in self.completions}
        out = []
        for i, st in enumerate(self.task.subtasks):
            done = bool(status[i]) if i < len(status) else False
            if done and i in by_subtask:
                c = by_subtask[i]
                shortest = self._shortest_or_zero(c["activation_pos"], st)
                out.append(SubtaskResult(True, shortest, c["actual"]))
            elif done:
                # marked done without a recorded completion event (degenerate)
                out.append(SubtaskResult(True, 0.0, 0.0))
            else:
                shortest = self._shortest_or_zero(self.seg_start_pos, st)
                out.append(SubtaskResult(False, shortest, self.distance - self.seg_start_dist))
        return out

    def _shortest_or_zero(self, start, subtask: Subtask) -> float:
        try:
            return shortest_path_length(
                self.scene, start, subtask.satisfying_classes, self.cfg.eps_dis
            )
        except Exception:
            return 0.0


def run_episode(
    scene: Scene,
    task: Task,
    config: Optional[EpisodeConfig] = None,
    backend=None,
    affordance_dir=None,
) -> tuple[EpisodeResult, list[dict]]:
    """Run one full episode; returns the scored result and its trace."""
    if backend is None:
        raise ValueError("a decision backend is required")
    cfg = config or EpisodeConfig()
    return _Runner(scene, task, cfg, backend).run(affordance_dir=affordance_dir)


# ---------------------------------------------------------------------------
# traces

def save_trace(records: list[dict], path) -> None:
    import json

    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_trace(path) -> list[dict]:
    import json

    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def replay_trace(scene: Scene, records: list[dict]) -> int:
    """Re-execute a trace's actions and verify every recorded pose.

    Returns the number of verified actions; raises ReplayMismatchError
    on the first divergence.
    """
    meta = records[0]
    if meta.get("type") != "meta":
        raise ReplayMismatchError("trace does not start with a meta record")
    if meta["scene_id"] != scene.id:
        raise ReplayMismatchError(
            f"trace belongs to scene {meta['scene_id']!r}, got {scene.id!r}"
        )
    pose = scene.spawns[meta["spawn_index"]]
    n = 0
    for rec in records:
        if rec.get("type") != "action":
            continue
        pose, fb = sim_step(scene, pose, Action(rec["action"]))
        if (
            pose.x != rec["x"] or pose.y != rec["y"]
            or pose.yaw != rec["yaw"] or pose.pitch != rec["pitch"]
            or fb.kind.value != rec["feedback"]
        ):
            raise ReplayMismatchError(f"divergence at replayed action {n}")
        n += 1
    return n
