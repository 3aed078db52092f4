import numpy as np
import pytest

from qblend.experience import EnvState, Step, Task, Trajectory, terminal_state


def make_trajectory(n_steps: int = 3, final_score: float = 100.0, success: bool = True,
                    task_id: str = "t0", rewards=None) -> Trajectory:
    """A structurally valid trajectory with evenly split rewards by default."""
    if rewards is None:
        rewards = [0.0] * (n_steps - 1) + [final_score / 100.0]
    states = [EnvState(f"room {i} scene", "You carry nothing.", f"doors at {i}", i)
              for i in range(n_steps)]
    steps = []
    for i in range(n_steps):
        nxt = states[i + 1] if i + 1 < n_steps else terminal_state(n_steps)
        steps.append(Step(states[i], f"go step {i}", rewards[i], nxt, i == n_steps - 1))
    return Trajectory(Task(task_id, "move the token to the slot"), tuple(steps),
                      final_score, success)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
