"""TextLab: a deterministic corridor world with exact oracles.

Rooms sit on a line; the agent moves left/right, picks objects up (one at a
time), and puts them into receptacles. Each task is "move object X to
receptacle Y" with a score schedule whose milestones (pickup, first arrival
in the target room while carrying, deposit) always total 100 points.
Transitions are deterministic and the state space is enumerable, so Bellman
optimality can be computed exactly and every trajectory is reproducible from
(spec, task, seed).

Invalid actions are absorbed as no-ops with zero reward, matching text-world
conventions and giving the grounding layer something real to do. Environment
step rewards are emitted on the 0..1 scale (points / 100).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

from .errors import ConfigError, NumericError
from .experience import EnvState, Step, Task, Trajectory, terminal_state
from .seeding import generator

BUILTIN_SPECS = ("lab3", "lab5_sparse", "lab7")


@dataclass(frozen=True)
class LabTask:
    id: str
    goal_object: str
    goal_receptacle: str

    def description(self) -> str:
        return f"move the {self.goal_object} to the {self.goal_receptacle}"

    def as_task(self) -> Task:
        return Task(self.id, self.description())


@dataclass(frozen=True)
class EnvSpec:
    name: str
    n_rooms: int
    objects: tuple[tuple[str, int], ...]
    receptacles: tuple[tuple[str, int], ...]
    tasks: tuple[LabTask, ...]
    score_schedule: dict[str, int]
    step_cap: int = 30
    gamma_hint: float = 0.9
    start_room: int = 0

    def validate(self) -> None:
        if self.n_rooms < 1:
            raise ConfigError("n_rooms must be >= 1")
        if not 0 <= self.start_room < self.n_rooms:
            raise ConfigError("start_room outside the room range")
        names = [n for n, _ in self.objects] + [n for n, _ in self.receptacles]
        if len(set(names)) != len(names):
            raise ConfigError("object/receptacle names must be unique")
        for label, placed in (("object", self.objects), ("receptacle", self.receptacles)):
            for name, room in placed:
                if not 0 <= room < self.n_rooms:
                    raise ConfigError(f"{label} {name!r} placed in missing room {room}")
        schedule = self.score_schedule
        for key in ("pickup", "correct_room", "deposit"):
            if key not in schedule or schedule[key] < 0:
                raise ConfigError(f"score_schedule must define non-negative {key!r}")
        if sum(schedule.values()) != 100:
            raise ConfigError("score schedule must total 100 points per task")
        if self.step_cap < 1:
            raise ConfigError("step_cap must be >= 1")
        object_names = {n for n, _ in self.objects}
        recep_names = {n for n, _ in self.receptacles}
        if not self.tasks:
            raise ConfigError("spec defines no tasks")
        for task in self.tasks:
            if task.goal_object not in object_names:
                raise ConfigError(f"task {task.id}: unknown goal object {task.goal_object!r}")
            if task.goal_receptacle not in recep_names:
                raise ConfigError(f"task {task.id}: unknown receptacle {task.goal_receptacle!r}")

    def task_by_id(self, task_id: str) -> LabTask:
        for task in self.tasks:
            if task.id == task_id:
                return task
        raise ConfigError(f"unknown task {task_id!r} in spec {self.name!r}")

    def receptacle_room(self, name: str) -> int:
        for recep, room in self.receptacles:
            if recep == name:
                return room
        raise ConfigError(f"unknown receptacle {name!r}")


@dataclass(frozen=True)
class LabState:
    """Enumerable core state; score encodes which milestones were awarded."""

    agent_room: int
    carried: str | None
    object_rooms: tuple[tuple[str, int], ...]
    deposited: bool
    score: int

    def object_room(self, name: str) -> int | None:
        for obj, room in self.object_rooms:
            if obj == name:
                return room
        return None


def initial_state(spec: EnvSpec) -> LabState:
    return LabState(
        agent_room=spec.start_room,
        carried=None,
        object_rooms=tuple(sorted(spec.objects)),
        deposited=False,
        score=0,
    )


def reset(spec: EnvSpec, task_id: str, seed: int = 0) -> tuple[LabState, EnvState]:
    """Initial state plus its rendering. Placement is declarative, so the
    seed only fixes the contract that identical inputs render identically."""
    spec.validate()
    spec.task_by_id(task_id)
    state = initial_state(spec)
    return state, render(spec, state, step_index=0)


def render(spec: EnvSpec, state: LabState, step_index: int) -> EnvState:
    here = sorted([n for n, room in state.object_rooms if room == state.agent_room]
                  + [n for n, room in spec.receptacles if room == state.agent_room])
    if here:
        seen = " and ".join(f"a {name}" for name in here)
        observation = f"You are in room {state.agent_room} of {spec.n_rooms}. You see {seen} here."
    else:
        observation = f"You are in room {state.agent_room} of {spec.n_rooms}. You see nothing else here."
    inventory = f"You carry the {state.carried}." if state.carried else "You carry nothing."
    looks = []
    if state.agent_room > 0:
        looks.append(f"To the left is room {state.agent_room - 1}.")
    if state.agent_room < spec.n_rooms - 1:
        looks.append(f"To the right is room {state.agent_room + 1}.")
    free_look = " ".join(looks) if looks else "There are no other rooms."
    return EnvState(observation, inventory, free_look, step_index)


def valid_actions(spec: EnvSpec, state: LabState) -> list[str]:
    """Exhaustive action list in deterministic order; duplicate-free."""
    actions = []
    if state.agent_room > 0:
        actions.append("go left")
    if state.agent_room < spec.n_rooms - 1:
        actions.append("go right")
    if state.carried is None:
        for name, room in state.object_rooms:
            if room == state.agent_room:
                actions.append(f"take {name}")
    else:
        for name, room in sorted(spec.receptacles):
            if room == state.agent_room:
                actions.append(f"put {state.carried} in {name}")
    actions.append("look")
    return actions


def step_env(spec: EnvSpec, task: LabTask, state: LabState, action: str) -> tuple[LabState, float, bool]:
    """Deterministic transition. Returns (state', reward on 0..1 scale, done).

    Unknown or currently-invalid action text leaves the state unchanged with
    zero reward. ``done`` reflects goal deposit only; step caps are enforced
    by the episode wrapper.
    """
    if state.deposited:
        return state, 0.0, True
    action = action.strip().lower()
    agent_room = state.agent_room
    carried = state.carried
    object_rooms = dict(state.object_rooms)
    deposited = False
    points = 0

    if action == "go left" and agent_room > 0:
        agent_room -= 1
    elif action == "go right" and agent_room < spec.n_rooms - 1:
        agent_room += 1
    elif action.startswith("take ") and carried is None:
        name = action[len("take "):]
        if object_rooms.get(name) == agent_room:
            carried = name
            del object_rooms[name]
            if name == task.goal_object and spec.score_schedule["pickup"] > 0 \
                    and state.score < spec.score_schedule["pickup"]:
                points += spec.score_schedule["pickup"]
    elif action.startswith("put ") and carried is not None:
        words = action[len("put "):].split(" in ")
        if len(words) == 2 and words[0] == carried:
            recep = words[1]
            recep_rooms = dict(spec.receptacles)
            if recep_rooms.get(recep) == agent_room:
                object_rooms[carried] = agent_room
                if carried == task.goal_object and recep == task.goal_receptacle:
                    deposited = True
                    points += spec.score_schedule["deposit"]
                carried = None
    # all other action text: no-op

    score = state.score + points
    room_bonus = spec.score_schedule["correct_room"]
    pickup = spec.score_schedule["pickup"]
    if (carried == task.goal_object and agent_room == spec.receptacle_room(task.goal_receptacle)
            and room_bonus > 0 and score < pickup + room_bonus):
        points += room_bonus
        score += room_bonus

    new_state = LabState(agent_room, carried, tuple(sorted(object_rooms.items())), deposited, score)
    return new_state, points / 100.0, deposited


class LabEnv:
    """Episode wrapper: tracks the step counter and applies the step cap."""

    def __init__(self, spec: EnvSpec, task_id: str):
        spec.validate()
        self.spec = spec
        self.lab_task = spec.task_by_id(task_id)
        self.task = self.lab_task.as_task()
        self._state = initial_state(spec)
        self._t = 0

    def reset(self) -> EnvState:
        self._state = initial_state(self.spec)
        self._t = 0
        return render(self.spec, self._state, 0)

    @property
    def lab_state(self) -> LabState:
        return self._state

    @property
    def score(self) -> float:
        return float(self._state.score)

    @property
    def success(self) -> bool:
        return self._state.deposited

    def valid_actions(self) -> list[str]:
        return valid_actions(self.spec, self._state)

    def step(self, action: str) -> tuple[EnvState, float, bool]:
        self._state, reward, done = step_env(self.spec, self.lab_task, self._state, action)
        self._t += 1
        if self._t >= self.spec.step_cap:
            done = True
        return render(self.spec, self._state, self._t), reward, done


def enumerate_states(spec: EnvSpec, task: LabTask, max_states: int = 100_000) -> list[LabState]:
    """All states reachable from the initial one (BFS over valid actions)."""
    start = initial_state(spec)
    seen = {start}
    frontier = [start]
    order = [start]
    while frontier:
        state = frontier.pop()
        if state.deposited:
            continue
        for action in valid_actions(spec, state):
            nxt, _, _ = step_env(spec, task, state, action)
            if nxt not in seen:
                seen.add(nxt)
                if len(seen) > max_states:
                    raise NumericError(f"state space exceeds {max_states} states")
                frontier.append(nxt)
                order.append(nxt)
    return order


def value_iteration_q(spec: EnvSpec, task_id: str, gamma: float,
                      tol: float = 1e-12, max_states: int = 100_000) -> dict:
    """Bellman-optimal Q for every reachable (state, action), computed by
    synchronous value iteration to sup-norm ``tol``. Rewards are 0..1 scaled."""
    spec.validate()
    task = spec.task_by_id(task_id)
    states = enumerate_states(spec, task, max_states)
    moves = {}
    for state in states:
        if state.deposited:
            continue
        for action in valid_actions(spec, state):
            moves[(state, action)] = step_env(spec, task, state, action)

    q = {key: 0.0 for key in moves}
    values = {state: 0.0 for state in states}
    for _ in range(1_000_000):
        delta = 0.0
        new_q = {}
        for (state, action), (nxt, reward, done) in moves.items():
            val = reward + (0.0 if done else gamma * values[nxt])
            new_q[(state, action)] = val
            delta = max(delta, abs(val - q[(state, action)]))
        q = new_q
        for state in states:
            if state.deposited:
                continue
            values[state] = max(q[(state, a)] for a in valid_actions(spec, state))
        if delta < tol:
            return q
    raise NumericError("value iteration did not converge")


def greedy_action(spec: EnvSpec, q_table: dict, state: LabState) -> str:
    """Argmax action under Q*, ties broken by valid-action order."""
    actions = valid_actions(spec, state)
    return max(actions, key=lambda a: (q_table[(state, a)], -actions.index(a)))


def behavior_rollout(spec: EnvSpec, policy_kind: str, n: int, seed: int,
                     epsilon: float = 0.3) -> list[Trajectory]:
    """Collect n seeded episodes with a scripted behavior policy.

    ``optimal`` follows greedy-on-Q* exactly; ``epsilon_greedy`` deviates to a
    uniform valid action with probability epsilon; ``uniform_random`` ignores
    Q* entirely. Tasks are assigned round-robin across episodes.
    """
    spec.validate()
    if n < 1:
        raise ConfigError("need at least one episode")
    if policy_kind not in ("optimal", "epsilon_greedy", "uniform_random"):
        raise ConfigError(f"unknown policy_kind {policy_kind!r}")
    q_tables = {task.id: value_iteration_q(spec, task.id, spec.gamma_hint)
                for task in spec.tasks} if policy_kind != "uniform_random" else {}

    trajectories = []
    for episode in range(n):
        lab_task = spec.tasks[episode % len(spec.tasks)]
        rng = generator(seed, "rollout", episode)
        env = LabEnv(spec, lab_task.id)
        state_text = env.reset()
        steps = []
        done = False
        while not done:
            actions = env.valid_actions()
            if policy_kind == "uniform_random":
                action = actions[rng.integers(0, len(actions))]
            else:
                action = greedy_action(spec, q_tables[lab_task.id], env.lab_state)
                if policy_kind == "epsilon_greedy" and rng.random() < epsilon:
                    action = actions[rng.integers(0, len(actions))]
            next_text, reward, done = env.step(action)
            steps.append(Step(state_text, action, reward, next_text, done))
            state_text = next_text
        final = steps[-1]
        steps[-1] = Step(final.state, final.action, final.reward,
                         terminal_state(len(steps)), final.done)
        trajectories.append(
            Trajectory(lab_task.as_task(), tuple(steps), env.score, env.success)
        )
    return trajectories


def scripted_policy_table(spec: EnvSpec, task_id: str) -> dict:
    """Build a mock-policy table from the optimal policy for one task.

    The table is keyed by rendered text, and distinct states can render
    identically (objects in other rooms are invisible), so action quality is
    aggregated: each rendering scores an action by its mean Q* over the
    states that produce that rendering. Identically-rendered states always
    share the same valid-action list, so the aggregate is well formed.

    Every entry gets: the aggregate-best action on top, an invalid paraphrase
    of it (so the grounding path is exercised on every step), the runner-up,
    and "look". The designated wrong action is the aggregate-worst one, which
    the error-rate knob can promote.
    """
    from .policy import MockEntry

    task = spec.task_by_id(task_id)
    q_table = value_iteration_q(spec, task_id, spec.gamma_hint)
    groups: dict[tuple, list[LabState]] = {}
    for state in enumerate_states(spec, task):
        if state.deposited:
            continue
        groups.setdefault(render(spec, state, 0).text_key(), []).append(state)

    table: dict = {}
    for key, states in groups.items():
        actions = valid_actions(spec, states[0])
        for other in states[1:]:
            if valid_actions(spec, other) != actions:
                raise ConfigError("identically-rendered states disagree on valid actions")
        mean_q = {a: sum(q_table[(s, a)] for s in states) / len(states) for a in actions}
        ranked = sorted(actions, key=lambda a: (-mean_q[a], actions.index(a)))
        best = ranked[0]
        candidates = [(best, -0.2), (f"please {best}", -0.9)]
        if len(ranked) > 1:
            candidates.append((ranked[1], -1.8))
        if all(text != "look" for text, _ in candidates):
            candidates.append(("look", -2.6))
        wrong = ranked[-1] if len(ranked) > 1 else None
        table[key] = MockEntry(tuple(candidates), wrong=wrong)
    return table


def spec_from_dict(doc: dict) -> EnvSpec:
    try:
        tasks = tuple(
            LabTask(str(t["id"]), str(t["goal_object"]), str(t["goal_receptacle"]))
            for t in doc["tasks"]
        )
        spec = EnvSpec(
            name=str(doc.get("name", "custom")),
            n_rooms=int(doc["n_rooms"]),
            objects=tuple((str(n), int(r)) for n, r in doc["objects"]),
            receptacles=tuple((str(n), int(r)) for n, r in doc["receptacles"]),
            tasks=tasks,
            score_schedule={k: int(v) for k, v in doc["score_schedule"].items()},
            step_cap=int(doc.get("step_cap", 30)),
            gamma_hint=float(doc.get("gamma_hint", 0.9)),
            start_room=int(doc.get("start_room", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed environment spec: {exc}") from exc
    spec.validate()
    return spec


def spec_to_dict(spec: EnvSpec) -> dict:
    return {
        "name": spec.name,
        "n_rooms": spec.n_rooms,
        "start_room": spec.start_room,
        "objects": [[n, r] for n, r in spec.objects],
        "receptacles": [[n, r] for n, r in spec.receptacles],
        "tasks": [
            {"id": t.id, "goal_object": t.goal_object, "goal_receptacle": t.goal_receptacle}
            for t in spec.tasks
        ],
        "score_schedule": dict(spec.score_schedule),
        "step_cap": spec.step_cap,
        "gamma_hint": spec.gamma_hint,
    }


def load_spec(path_or_name) -> EnvSpec:
    """Load an EnvSpec from a JSON file path or a built-in fixture name."""
    name = str(path_or_name)
    if name in BUILTIN_SPECS:
        text = resources.files("qblend.specs").joinpath(f"{name}.json").read_text("utf-8")
    else:
        try:
            with open(path_or_name, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read environment spec {path_or_name!r}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"environment spec {path_or_name!r} is not valid JSON: {exc.msg}") from exc
    return spec_from_dict(doc)


def save_spec(spec: EnvSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec_to_dict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")
