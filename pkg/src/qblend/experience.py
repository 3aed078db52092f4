"""Domain types for agent experience and the offline memory they live in.

A :class:`Trajectory` records one attempt at a task as an ordered chain of
(state, action, reward, next_state, done) steps. Trajectories accumulate in an
append-only :class:`ExperienceMemory`, from which the critic trainer samples
step batches. Rewards on steps are kept on the 0..1 scale (environment scores
0..100 divided by 100) so loss magnitudes stay comparable across environments;
``Trajectory.final_score`` stays on the raw 0..100 scale.

The trajectory file format is JSONL: one self-contained record per line with
fields {task_id, task_description, steps, final_score, success}, where each
step holds {observation, inventory, free_look, action, reward, done}. The file
stores each step's *pre-action* state; next states are re-chained on load and
the final step's next state is the canonical terminal marker (it is never
bootstrapped from, since final steps carry done=True).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator

from .errors import ConfigError, DataFormatError
from .seeding import generator

log = logging.getLogger(__name__)

# Action text is plain text; validity means non-empty after trimming.
ActionText = str

_STEP_FIELDS = {"observation", "inventory", "free_look", "action", "reward", "done"}
_TRAJ_FIELDS = {"task_id", "task_description", "steps", "final_score", "success"}

TERMINAL_OBSERVATION = "episode complete"


@dataclass(frozen=True)
class Task:
    id: str
    description: str


@dataclass(frozen=True)
class EnvState:
    """One rendered snapshot of the environment.

    ``observation`` is the room-level rendering, ``inventory`` and
    ``free_look`` are the two auxiliary views fed to the critic's extra
    encoders when the five-encoder wiring is used. ``step_index`` counts
    decisions taken so far in the episode (0 for the initial state).
    """

    observation: str
    inventory: str
    free_look: str
    step_index: int

    def text_key(self) -> tuple[str, str, str]:
        """Identity of the state as seen by policies and critics (no t)."""
        return (self.observation, self.inventory, self.free_look)

    def combined_text(self) -> str:
        parts = [self.observation]
        if self.inventory:
            parts.append(self.inventory)
        if self.free_look:
            parts.append(self.free_look)
        return " ".join(parts)


def terminal_state(step_index: int) -> EnvState:
    """Canonical post-episode state used as the final step's next_state."""
    return EnvState(TERMINAL_OBSERVATION, "", "", step_index)


@dataclass(frozen=True)
class Step:
    state: EnvState
    action: ActionText
    reward: float
    next_state: EnvState
    done: bool


@dataclass(frozen=True)
class Trajectory:
    task: Task
    steps: tuple[Step, ...]
    final_score: float
    success: bool


@dataclass(frozen=True)
class MemoryStep:
    """A step together with the task it belongs to (the flat training unit)."""

    task: Task
    step: Step


def validate_trajectory(traj: Trajectory) -> None:
    """Check all structural invariants; raise ValueError with a diagnostic."""
    if not traj.task.description:
        raise ValueError("task description must be non-empty")
    if not traj.steps:
        raise ValueError("empty trajectory")
    if not (0.0 <= traj.final_score <= 100.0):
        raise ValueError(f"final_score {traj.final_score} outside [0, 100]")
    prev_index = -1
    for i, step in enumerate(traj.steps):
        if not step.state.observation:
            raise ValueError(f"step {i}: empty observation")
        if not step.action.strip():
            raise ValueError(f"step {i}: empty action text")
        if not math.isfinite(step.reward):
            raise ValueError(f"step {i}: non-finite reward {step.reward}")
        if step.state.step_index <= prev_index:
            raise ValueError(f"step {i}: step_index does not increase")
        prev_index = step.state.step_index
        if step.done and i != len(traj.steps) - 1:
            raise ValueError(f"step {i}: done before final step")
        if i + 1 < len(traj.steps) and step.next_state != traj.steps[i + 1].state:
            raise ValueError(f"step {i}: next_state does not chain to step {i + 1}")


def decompose_to_il_instances(
    traj: Trajectory, window: int = 10
) -> list[tuple[str, ActionText]]:
    """Split a trajectory into (context, target action) training instances.

    Instance i's context holds the task description, the most recent
    ``window`` (state, action) pairs before step i, and step i's state; the
    target is step i's action. One instance per step.
    """
    if not traj.steps:
        raise ValueError("empty trajectory")
    if window < 1:
        raise ValueError("window must be >= 1")
    instances = []
    for i, step in enumerate(traj.steps):
        history = [(s.state, s.action) for s in traj.steps[max(0, i - window) : i]]
        context = render_context(traj.task, history, step.state)
        instances.append((context, step.action))
    return instances


def render_state_line(state: EnvState) -> str:
    return f"{state.observation} | inv: {state.inventory} | look: {state.free_look}"


def render_context(
    task: Task, history: list[tuple[EnvState, ActionText]], current: EnvState
) -> str:
    """The package-wide context text format (also used for policy prompts)."""
    lines = [f"Task: {task.description}"]
    for state, action in history:
        lines.append(f"[t={state.step_index}] {render_state_line(state)}")
        lines.append(f"[t={state.step_index}] act: {action}")
    lines.append(f"[t={current.step_index}] {render_state_line(current)}")
    return "\n".join(lines)


def decompose_to_steps(traj: Trajectory, reward_mode: str = "delta") -> list[Step]:
    """Re-derive per-step rewards for critic training.

    delta: each step keeps its score delta (already on the 0..1 scale).
    terminal: all steps get 0 except the last, which gets final_score/100.
    """
    validate_trajectory(traj)
    if reward_mode == "delta":
        return list(traj.steps)
    if reward_mode == "terminal":
        out = []
        for i, step in enumerate(traj.steps):
            reward = traj.final_score / 100.0 if i == len(traj.steps) - 1 else 0.0
            out.append(Step(step.state, step.action, reward, step.next_state, step.done))
        return out
    raise ConfigError(f"unknown reward_mode {reward_mode!r}")


class ExperienceMemory:
    """Append-only store of trajectories with a flattened step view.

    Reads may run concurrently; insertion requires exclusive access (the
    structure itself takes no locks). Inserted trajectories are never mutated.
    """

    def __init__(self, reward_mode: str = "delta"):
        self.reward_mode = reward_mode
        self._trajectories: list[Trajectory] = []
        self._step_view: list[MemoryStep] = []

    @property
    def trajectories(self) -> tuple[Trajectory, ...]:
        return tuple(self._trajectories)

    @property
    def step_view(self) -> tuple[MemoryStep, ...]:
        return tuple(self._step_view)

    def __len__(self) -> int:
        return len(self._trajectories)

    def insert(self, traj: Trajectory) -> "ExperienceMemory":
        validate_trajectory(traj)
        self._trajectories.append(traj)
        for step in decompose_to_steps(traj, self.reward_mode):
            self._step_view.append(MemoryStep(traj.task, step))
        return self

    def extend(self, trajs: Iterator[Trajectory] | list[Trajectory]) -> "ExperienceMemory":
        for traj in trajs:
            self.insert(traj)
        return self

    def sample_batch(self, n: int, seed: int) -> list[MemoryStep]:
        """n steps drawn uniformly with replacement; same seed, same batch."""
        if not self._step_view:
            raise ValueError("cannot sample from an empty memory")
        if n < 1:
            raise ValueError("batch size must be >= 1")
        rng = generator(seed, "sample_batch")
        idx = rng.integers(0, len(self._step_view), size=n)
        return [self._step_view[i] for i in idx]


def sample_batch(mem: ExperienceMemory, n: int, seed: int) -> list[MemoryStep]:
    return mem.sample_batch(n, seed)


def memory_insert(mem: ExperienceMemory, traj: Trajectory) -> ExperienceMemory:
    return mem.insert(traj)


def _trajectory_to_record(traj: Trajectory) -> dict:
    return {
        "task_id": traj.task.id,
        "task_description": traj.task.description,
        "steps": [
            {
                "observation": s.state.observation,
                "inventory": s.state.inventory,
                "free_look": s.state.free_look,
                "action": s.action,
                "reward": s.reward,
                "done": s.done,
            }
            for s in traj.steps
        ],
        "final_score": traj.final_score,
        "success": traj.success,
    }


def _record_to_trajectory(record: dict, line: int, strict: bool) -> Trajectory:
    unknown = set(record) - _TRAJ_FIELDS
    if unknown:
        if strict:
            raise DataFormatError(f"unknown fields {sorted(unknown)}", line)
        log.warning("trajectory record on line %d: ignoring fields %s", line, sorted(unknown))
    missing = _TRAJ_FIELDS - set(record)
    if missing:
        raise DataFormatError(f"missing fields {sorted(missing)}", line)
    task = Task(str(record["task_id"]), str(record["task_description"]))
    raw_steps = record["steps"]
    if not isinstance(raw_steps, list) or not raw_steps:
        raise DataFormatError("steps must be a non-empty list", line)

    states = []
    for i, raw in enumerate(raw_steps):
        if not isinstance(raw, dict):
            raise DataFormatError(f"step {i} is not an object", line)
        unknown = set(raw) - _STEP_FIELDS
        if unknown:
            if strict:
                raise DataFormatError(f"step {i}: unknown fields {sorted(unknown)}", line)
            log.warning("step %d on line %d: ignoring fields %s", i, line, sorted(unknown))
        missing = _STEP_FIELDS - set(raw)
        if missing:
            raise DataFormatError(f"step {i}: missing fields {sorted(missing)}", line)
        states.append(
            EnvState(str(raw["observation"]), str(raw["inventory"]), str(raw["free_look"]), i)
        )

    steps = []
    for i, raw in enumerate(raw_steps):
        next_state = states[i + 1] if i + 1 < len(states) else terminal_state(len(states))
        steps.append(
            Step(states[i], str(raw["action"]), float(raw["reward"]), next_state, bool(raw["done"]))
        )
    traj = Trajectory(task, tuple(steps), float(record["final_score"]), bool(record["success"]))
    try:
        validate_trajectory(traj)
    except ValueError as exc:
        raise DataFormatError(str(exc), line) from exc
    return traj


def serialize_memory(mem: ExperienceMemory) -> bytes:
    """Canonical JSONL bytes: sorted keys, compact separators, one record/line."""
    lines = [
        json.dumps(_trajectory_to_record(t), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        for t in mem.trajectories
    ]
    return ("".join(line + "\n" for line in lines)).encode("utf-8")


def deserialize_memory(data: bytes, strict: bool = False, reward_mode: str = "delta") -> ExperienceMemory:
    mem = ExperienceMemory(reward_mode=reward_mode)
    for lineno, raw in enumerate(data.decode("utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"invalid JSON ({exc.msg})", lineno) from exc
        if not isinstance(record, dict):
            raise DataFormatError("record is not an object", lineno)
        mem.insert(_record_to_trajectory(record, lineno, strict))
    return mem


def save_memory(mem: ExperienceMemory, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_memory(mem))


def load_memory(path, strict: bool = False, reward_mode: str = "delta") -> ExperienceMemory:
    with open(path, "rb") as fh:
        return deserialize_memory(fh.read(), strict=strict, reward_mode=reward_mode)
