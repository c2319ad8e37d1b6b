"""Mini-batch post-processing schedulers.

The learned scheduler keeps an NxN Q-table over the five operation
families (identity, jpeg, blur, crop, resize).  States are the family
applied to the previous batch, actions pick the family for the current
batch.  Rewards favour batches whose bitwise accuracy improved over the
last visit to that family.  A uniform random scheduler is kept as the
ablation baseline.
"""

import json
from dataclasses import dataclass

import numpy as np

from .postproc import FAMILIES

N_STATES = len(FAMILIES)


@dataclass
class SchedulerConfig:
    n_states: int = N_STATES
    beta: float = 10.0
    bias: tuple = (-0.001, 0.001, 0.0, 0.0, 0.0)
    alpha: float = 0.2
    gamma: float = 0.5
    epsilon0: float = 1.0
    epsilon_hold_epochs: int = 8000
    epsilon_decay: float = 2.5e-4
    epsilon_floor: float = 0.0

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if len(self.bias) != self.n_states:
            raise ValueError(f"bias length {len(self.bias)} != n_states {self.n_states}")


def new_qtable(cfg: SchedulerConfig) -> np.ndarray:
    return np.zeros((cfg.n_states, cfg.n_states), dtype=np.float64)


@dataclass
class SchedulerState:
    current_state: int
    epsilon: float
    history: np.ndarray = None
    step: int = 0
    pending_action: int | None = None
    last_reward: float = 0.0

    def __post_init__(self):
        if self.history is None:
            self.history = np.zeros(N_STATES, dtype=np.float64)


def init_state(cfg: SchedulerConfig, rng) -> SchedulerState:
    """History all zeros, random starting state."""
    return SchedulerState(current_state=int(rng.integers(0, cfg.n_states)),
                          epsilon=cfg.epsilon0,
                          history=np.zeros(cfg.n_states, dtype=np.float64))


def epsilon_at(epoch: int, cfg: SchedulerConfig) -> float:
    """Hold epsilon0 for the first hold epochs, then decay linearly, clamped."""
    if epoch < cfg.epsilon_hold_epochs:
        eps = cfg.epsilon0
    else:
        eps = cfg.epsilon0 - (epoch - cfg.epsilon_hold_epochs) * cfg.epsilon_decay
    return min(max(eps, cfg.epsilon_floor), 1.0)


def select_action(state: SchedulerState, q: np.ndarray, rng) -> int:
    """Epsilon-greedy over the current state's Q-row, ties to the lowest index."""
    if rng.uniform(0.0, 1.0) < 1.0 - state.epsilon:
        action = int(np.argmax(q[state.current_state]))
    else:
        action = int(rng.integers(0, q.shape[1]))
    state.pending_action = action
    return action


def compute_reward(f_t: float, next_state: int, h: np.ndarray, cfg: SchedulerConfig) -> float:
    return cfg.beta * (f_t - h[next_state]) + f_t + cfg.bias[next_state]


def update_q(q: np.ndarray, s: int, a: int, r: float, s_next: int, cfg: SchedulerConfig) -> None:
    q[s, a] = q[s, a] + cfg.alpha * (r + cfg.gamma * np.max(q[s_next]) - q[s, a])


def scheduler_step(state: SchedulerState, q: np.ndarray, f_t: float, cfg: SchedulerConfig, rng) -> int:
    """Finish the step for the batch just processed, return the next action.

    f_t is the batch's mean bitwise accuracy under the pending action's
    operation.  The Q update reads h before the history write, matching
    the update ordering of the online learning rule.
    """
    if state.pending_action is None:
        raise RuntimeError("scheduler_step called before select_action")
    s, a = state.current_state, state.pending_action
    s_next = a  # the action chose the family applied to this batch
    r = compute_reward(f_t, s_next, state.history, cfg)
    update_q(q, s, a, r, s_next, cfg)
    state.history[s_next] = f_t
    state.current_state = s_next
    state.step += 1
    state.pending_action = None
    state.last_reward = r
    return select_action(state, q, rng)


def random_action(rng, n_states: int = N_STATES) -> int:
    """Uniform pick over the operation families (the no-RL baseline)."""
    return int(rng.integers(0, n_states))


class RLScheduler:
    """Stateful wrapper used by the training loop."""

    def __init__(self, cfg: SchedulerConfig, rng):
        self.cfg = cfg
        self.q = new_qtable(cfg)
        self.state = init_state(cfg, rng)
        self._next_action = select_action(self.state, self.q, rng)
        self.last_record = None

    def set_epoch(self, epoch: int) -> None:
        self.state.epsilon = epsilon_at(epoch, self.cfg)

    def choose(self, rng) -> int:
        return self._next_action

    def observe(self, f_t: float, rng) -> dict:
        s, a = self.state.current_state, self.state.pending_action
        self._next_action = scheduler_step(self.state, self.q, f_t, self.cfg, rng)
        self.last_record = {
            "step": self.state.step,
            "state": s,
            "action": a,
            "f_t": round(float(f_t), 6),
            "reward": round(float(self.state.last_reward), 6),
            "epsilon": round(float(self.state.epsilon), 6),
            "q_row": [round(float(v), 6) for v in self.q[self.state.current_state]],
        }
        return self.last_record


class RandomScheduler:
    """Uniform scheduler; mirrors RLScheduler's interface."""

    def __init__(self, cfg: SchedulerConfig, rng):
        self.cfg = cfg
        self.q = None
        self.state = init_state(cfg, rng)
        self._next_action = random_action(rng, cfg.n_states)
        self.last_record = None

    def set_epoch(self, epoch: int) -> None:
        self.state.epsilon = epsilon_at(epoch, self.cfg)

    def choose(self, rng) -> int:
        return self._next_action

    def observe(self, f_t: float, rng) -> dict:
        s = self.state.current_state
        a = self._next_action
        self.state.history[a] = f_t
        self.state.current_state = a
        self.state.step += 1
        self.last_record = {
            "step": self.state.step,
            "state": s,
            "action": a,
            "f_t": round(float(f_t), 6),
            "reward": None,
            "epsilon": None,
            "q_row": None,
        }
        self._next_action = random_action(rng, self.cfg.n_states)
        return self.last_record


def make_scheduler(kind: str, cfg: SchedulerConfig, rng):
    if kind == "rl":
        return RLScheduler(cfg, rng)
    if kind == "random":
        return RandomScheduler(cfg, rng)
    raise ValueError(f"unknown scheduler kind {kind!r}")


def write_trace(fh, record: dict) -> None:
    fh.write(json.dumps(record) + "\n")
