"""Decision roles: instruction decomposition, target selection, progress
monitoring.

Each role sits behind one backend interface with two implementations: a
deterministic oracle driven by task/scene ground truth, and a remote
client speaking an OpenAI-style chat-completion protocol with strict
JSON replies, bounded retries and a 30 s timeout.  Completion status is
monotone: a subtask once marked done never reverts, and backend output
that tries to regress is rejected and logged.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Protocol, Sequence

import httpx

from .mapping import MemoryBank
from .sim import Action

log = logging.getLogger(__name__)

ENDPOINT_ENV = "DEMANDNAV_ENDPOINT"
API_KEY_ENV = "DEMANDNAV_API_KEY"
DEFAULT_TIMEOUT = 30.0
MAX_ATTEMPTS = 3
SNAP_RADIUS = 0.5       # remote target positions snap to a memory entry within this
EXCLUDE_RADIUS = 0.25   # how close an entry must be to an excluded position to match


class DecisionError(Exception):
    pass


class NoCandidatesError(DecisionError):
    pass


class DecompositionFailedError(DecisionError):
    pass


class InconsistentStatusError(DecisionError):
    pass


class BackendUnavailableError(DecisionError):
    pass


class RemoteError(DecisionError):
    pass


class RemoteTimeout(RemoteError):
    pass


class HttpError(RemoteError):
    def __init__(self, status: Optional[int], msg: str = ""):
        super().__init__(msg or f"HTTP error {status}")
        self.status = status


class ParseError(RemoteError):
    pass


# ---------------------------------------------------------------------------
# data types

@dataclass(frozen=True)
class Subtask:
    requirement: str
    preference: str = ""
    satisfying_classes: frozenset[str] = frozenset()

    def text(self) -> str:
        return f"{self.requirement} ({self.preference})" if self.preference else self.requirement


@dataclass(frozen=True)
class LocateDecision:
    target_object: str
    target_position: tuple[float, float]
    rationale: str = ""
    is_exploration: bool = False


@dataclass(frozen=True)
class StatusDecision:
    completed_subtask: Optional[int]
    reason: str
    updated_status: list[bool]


@dataclass(frozen=True)
class ExcludedTarget:
    """A (target, position) pair the selector must avoid after repeated failures."""

    target_object: str
    position: tuple[float, float]

    def text(self) -> str:
        return (
            f"Avoid choosing '{self.target_object}' at "
            f"({self.position[0]:.2f}, {self.position[1]:.2f}); "
            "recent attempts on it failed."
        )

    def matches(self, label: str, position: tuple[float, float]) -> bool:
        return label == self.target_object and (
            math.hypot(position[0] - self.position[0], position[1] - self.position[1])
            <= EXCLUDE_RADIUS
        )


@dataclass
class ObservationSummary:
    """Structured stand-in for a camera frame: nearby detected objects."""

    agent_position: tuple[float, float]
    objects: list[tuple[str, float, tuple[float, float]]] = field(default_factory=list)

    def to_text(self) -> str:
        if not self.objects:
            return "nothing detected nearby"
        return "; ".join(
            f"{label} at {d:.2f} m ({p[0]:.2f}, {p[1]:.2f})" for label, d, p in self.objects
        )


class ExplorationView(Protocol):
    """Supplies exploration targets when memory holds no usable candidate."""

    def pick(
        self, agent_position: tuple[float, float], avoid: Optional[tuple[float, float]]
    ) -> Optional[tuple[float, float]]: ...


EXPLORE_LABEL = "unexplored-area"


def validate_status_transition(prev: Sequence[bool], new: Sequence[bool]) -> list[bool]:
    """Enforce monotone single-step status updates."""
    if len(prev) != len(new):
        raise InconsistentStatusError(f"status length changed: {len(prev)} -> {len(new)}")
    flips = 0
    for p, n in zip(prev, new):
        if p and not n:
            raise InconsistentStatusError("status regression (True -> False)")
        if n and not p:
            flips += 1
    if flips > 1:
        raise InconsistentStatusError(f"{flips} subtasks flipped in one update")
    return list(new)


# ---------------------------------------------------------------------------
# oracle backend

class OracleBackend:
    """Rule-based decisions from task/scene ground truth; bit-for-bit deterministic."""

    def __init__(self, subtasks: Sequence[Subtask], eps_dis: float = 1.5):
        if not subtasks:
            raise ValueError("oracle needs the authored subtask list")
        self._subtasks = list(subtasks)
        self._eps = eps_dis

    def break_instruction(self, instruction: str) -> tuple[list[Subtask], list[bool]]:
        if not instruction:
            raise DecompositionFailedError("empty instruction")
        return list(self._subtasks), [False] * len(self._subtasks)

    def locate_next(
        self,
        bank: MemoryBank,
        instruction: str,
        subtasks: Sequence[Subtask],
        status: Sequence[bool],
        agent_position: tuple[float, float],
        exploration: Optional[ExplorationView] = None,
        excluded: Optional[ExcludedTarget] = None,
    ) -> LocateDecision:
        """Nearest remembered object serving the first incomplete subtask,
        or a frontier exploration target when memory has none."""
        pending = [i for i, done in enumerate(status) if not done]
        if not pending:
            raise NoCandidatesError("all subtasks complete")
        want = subtasks[pending[0]].satisfying_classes
        best = None
        best_d = math.inf
        for entry in bank.object_memory:
            if entry.label not in want:
                continue
            if excluded is not None and excluded.matches(entry.label, entry.center):
                continue
            d = math.hypot(entry.center[0] - agent_position[0], entry.center[1] - agent_position[1])
            if d < best_d:
                best, best_d = entry, d
        if best is not None:
            return LocateDecision(
                target_object=best.label,
                target_position=best.center,
                rationale=f"nearest remembered {best.label} for: {subtasks[pending[0]].text()}",
            )
        if exploration is not None:
            avoid = excluded.position if excluded is not None else None
            pos = exploration.pick(agent_position, avoid)
            if pos is not None:
                return LocateDecision(
                    target_object=EXPLORE_LABEL,
                    target_position=pos,
                    rationale="no remembered candidate; probing the nearest frontier",
                    is_exploration=True,
                )
        raise NoCandidatesError("memory holds no candidate and no frontier exists")

    def update_status(
        self,
        instruction: str,
        prev_status: Sequence[bool],
        bank: MemoryBank,
        observation: ObservationSummary,
        policy_action: Action,
    ) -> StatusDecision:
        """Identity unless the policy signalled Done; then mark the first
        incomplete subtask with a satisfying object inside the success radius."""
        prev = list(prev_status)
        if policy_action is not Action.DONE:
            return StatusDecision(None, "no completion signal", prev)
        for i, done in enumerate(prev_status):
            if done:
                continue
            want = self._subtasks[i].satisfying_classes
            for label, dist, _pos in observation.objects:
                if label in want and dist <= self._eps:
                    new = list(prev_status)
                    new[i] = True
                    return StatusDecision(i, f"{label} within {dist:.2f} m", new)
        return StatusDecision(None, "no satisfying object in range", prev)


# ---------------------------------------------------------------------------
# remote backend

def _load_prompt(name: str) -> str:
    return resources.files("demandnav").joinpath("prompts", f"{name}.txt").read_text()


def chat_completion(
    client: httpx.Client,
    endpoint: str,
    model: str,
    messages: list[dict],
    timeout: float = DEFAULT_TIMEOUT,
    max_attempts: int = MAX_ATTEMPTS,
) -> str:
    """POST a chat request and return the first choice's content.

    Transport failures, non-2xx statuses and malformed response bodies
    are retried up to `max_attempts` total tries, then surfaced as
    RemoteTimeout / HttpError / ParseError.
    """
    body = {"model": model, "messages": messages, "temperature": 0}
    last: RemoteError = RemoteError("no attempt made")
    for _ in range(max_attempts):
        try:
            resp = client.post(endpoint, json=body, timeout=timeout)
            if resp.status_code // 100 != 2:
                last = HttpError(resp.status_code)
                continue
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError, json.JSONDecodeError) as e:
                last = ParseError(f"malformed completion payload: {e}")
                continue
        except httpx.TimeoutException as e:
            last = RemoteTimeout(str(e))
        except httpx.TransportError as e:
            last = HttpError(None, f"transport failure: {e}")
    raise last


class RemoteBackend:
    """Chat-protocol backend with strict JSON parsing and bounded retries."""

    def __init__(
        self,
        endpoint: Optional[str] = None,
        api_key: Optional[str] = None,
        model: str = "default-model",
        timeout: float = DEFAULT_TIMEOUT,
        max_attempts: int = MAX_ATTEMPTS,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not self.endpoint:
            raise BackendUnavailableError(f"remote endpoint not configured (set {ENDPOINT_ENV})")
        if api_key is None:
            raise BackendUnavailableError(f"remote credential not configured (set {API_KEY_ENV})")
        headers = {"Authorization": f"Bearer {api_key}"}
        self.model = model
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.parse_retries = 0
        self._client = httpx.Client(headers=headers, transport=transport)

    def close(self):
        self._client.close()

    def _ask(self, prompt: str) -> str:
        messages = [
            {"role": "system", "content": "Reply with a single JSON object and nothing else."},
            {"role": "user", "content": prompt},
        ]
        return chat_completion(
            self._client, self.endpoint, self.model, messages, self.timeout, self.max_attempts
        )

    def _ask_parsed(self, prompt: str, parse, failure_exc):
        last = None
        for attempt in range(self.max_attempts):
            content = self._ask(prompt)
            try:
                return parse(content)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, ParseError) as e:
                last = e
                if attempt < self.max_attempts - 1:
                    self.parse_retries += 1
                    log.warning("retrying after unparseable reply: %s", e)
        raise failure_exc(f"no parseable reply after {self.max_attempts} attempts: {last}")

    def break_instruction(self, instruction: str) -> tuple[list[Subtask], list[bool]]:
        if not instruction:
            raise DecompositionFailedError("empty instruction")
        prompt = _load_prompt("decompose").format(instruction=instruction)

        def parse(content: str):
            data = json.loads(content)
            subs = [
                Subtask(requirement=s["requirement"], preference=s.get("preference", ""))
                for s in data["subtasks"]
            ]
            if not subs:
                raise ParseError("empty subtask list")
            return subs

        subs = self._ask_parsed(prompt, parse, DecompositionFailedError)
        return subs, [False] * len(subs)

    def locate_next(
        self,
        bank: MemoryBank,
        instruction: str,
        subtasks: Sequence[Subtask],
        status: Sequence[bool],
        agent_position: tuple[float, float],
        exploration: Optional[ExplorationView] = None,
        excluded: Optional[ExcludedTarget] = None,
    ) -> LocateDecision:
        if all(status):
            raise NoCandidatesError("all subtasks complete")
        mem_lines = "\n".join(
            f"- {e.label} at ({e.center[0]:.2f}, {e.center[1]:.2f})" for e in bank.object_memory
        ) or "(no objects remembered yet)"
        hist_lines = "\n".join(
            f"- {t.target} at ({t.position[0]:.2f}, {t.position[1]:.2f}): {t.feedback}"
            for t in bank.target_memory
        ) or "(no attempts yet)"
        sub_lines = "\n".join(
            f"{i}. [{'done' if s else 'pending'}] {st.text()}"
            for i, (st, s) in enumerate(zip(subtasks, status))
        )
        prompt = _load_prompt("locate").format(
            instruction=instruction,
            subtasks=sub_lines,
            object_memory=mem_lines,
            target_memory=hist_lines,
            agent=f"({agent_position[0]:.2f}, {agent_position[1]:.2f})",
            extra_info=excluded.text() if excluded is not None else "none",
        )

        def parse(content: str) -> LocateDecision:
            data = json.loads(content)
            label = str(data["target_object"])
            x, y = (float(v) for v in data["target_position"])
            decision = LocateDecision(label, (x, y), str(data.get("rationale", "")))
            decision = self._snap_to_memory(decision, bank)
            if excluded is not None and excluded.matches(
                decision.target_object, decision.target_position
            ):
                raise ParseError("reply selected the excluded target")
            return decision

        return self._ask_parsed(prompt, parse, NoCandidatesError)

    def _snap_to_memory(self, decision: LocateDecision, bank: MemoryBank) -> LocateDecision:
        """Snap a proposed position onto the nearest remembered entry so a
        hallucinated coordinate cannot corrupt planning."""
        if not bank.object_memory:
            return decision
        best = None
        best_d = math.inf
        for e in bank.object_memory:
            d = math.hypot(
                e.center[0] - decision.target_position[0],
                e.center[1] - decision.target_position[1],
            )
            if d < best_d:
                best, best_d = e, d
        if best_d > SNAP_RADIUS:
            raise ParseError(
                f"proposed position is {best_d:.2f} m from every remembered object"
            )
        return LocateDecision(best.label, best.center, decision.rationale)

    def update_status(
        self,
        instruction: str,
        prev_status: Sequence[bool],
        bank: MemoryBank,
        observation: ObservationSummary,
        policy_action: Action,
    ) -> StatusDecision:
        prev = list(prev_status)
        if policy_action is not Action.DONE:
            return StatusDecision(None, "no completion signal", prev)
        hist_lines = "\n".join(
            f"- {t.target}: {t.feedback}" for t in bank.target_memory
        ) or "(no attempts yet)"
        prompt = _load_prompt("status").format(
            instruction=instruction,
            status=json.dumps(prev),
            target_memory=hist_lines,
            observation=observation.to_text(),
        )

        def parse(content: str) -> StatusDecision:
            data = json.loads(content)
            new = [bool(v) for v in data["status"]]
            completed = data.get("completed_subtask")
            completed = None if completed is None else int(completed)
            return StatusDecision(completed, str(data.get("reason", "")), new)

        try:
            decision = self._ask_parsed(prompt, parse, DecisionError)
        except DecisionError:
            return StatusDecision(None, "monitor unavailable; status kept", prev)
        try:
            validated = validate_status_transition(prev, decision.updated_status)
        except InconsistentStatusError as e:
            log.warning("rejecting inconsistent status update: %s", e)
            return StatusDecision(None, f"rejected: {e}", prev)
        return StatusDecision(decision.completed_subtask, decision.reason, validated)
