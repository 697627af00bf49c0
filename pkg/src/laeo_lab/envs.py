"""Built-in desk-scale environments and scripted behavior policies.

Three environments are registered by string id:

* ``grid5``   -- 5x5 slippery gridworld with a goal cell (tabular, exact oracle available)
* ``reach2d`` -- single-integrator point mass that must reach a fixed goal
* ``push2d``  -- point mass that must push a block onto a fixed goal

All point-mass operations accept either a single state ``(D,)`` or a batch
``(N, D)``; datasets are generated with one vectorized rollout.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRID_MOVES = np.array([[0, 1], [0, -1], [-1, 0], [1, 0]])  # up, down, left, right as (dx, dy)


class ActionOutOfBoxError(ValueError):
    pass


@dataclass
class GridWorldMDP:
    width: int = 5
    height: int = 5
    slip_prob: float = 0.1
    goal_cell: int | None = None
    gamma: float = 0.9
    absorbing: bool = False
    horizon: int = 50

    n_actions = 4

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("width and height must be positive")
        if not 0.0 <= self.slip_prob < 1.0:
            raise ValueError("slip_prob must lie in [0, 1)")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.goal_cell is None:
            self.goal_cell = self.n_states - 1
        if not 0 <= self.goal_cell < self.n_states:
            raise ValueError("goal_cell out of range")
        self._T = self._build_transitions()

    @property
    def n_states(self) -> int:
        return self.width * self.height

    @property
    def state_dim(self) -> int:
        return self.n_states

    @property
    def action_dim(self) -> int:
        return self.n_actions

    def _move(self, s: int, a: int) -> int:
        x, y = s % self.width, s // self.width
        dx, dy = GRID_MOVES[a]
        nx = min(max(x + dx, 0), self.width - 1)
        ny = min(max(y + dy, 0), self.height - 1)
        return int(ny * self.width + nx)

    def _build_transitions(self) -> np.ndarray:
        S, A = self.n_states, self.n_actions
        T = np.zeros((S, A, S))
        for s in range(S):
            if self.absorbing and s == self.goal_cell:
                T[s, :, s] = 1.0
                continue
            for a in range(A):
                T[s, a, self._move(s, a)] += 1.0 - self.slip_prob
                for other in range(A):
                    if other != a:
                        T[s, a, self._move(s, other)] += self.slip_prob / (A - 1)
        return T

    def transition_tensor(self) -> np.ndarray:
        return self._T.copy()

    def initial_distribution(self) -> np.ndarray:
        return np.full(self.n_states, 1.0 / self.n_states)

    def reset(self, seed: int) -> int:
        if seed < 0:
            raise ValueError("seed must be non-negative")
        rng = np.random.default_rng(seed)
        return int(rng.integers(self.n_states))

    def step(self, state: int, action: int, rng: np.random.Generator) -> tuple[int, bool]:
        if not (isinstance(action, (int, np.integer)) and 0 <= action < self.n_actions):
            raise ActionOutOfBoxError(f"gridworld action must be an integer in [0, 4), got {action!r}")
        nxt = int(rng.choice(self.n_states, p=self._T[state, action]))
        return nxt, nxt == self.goal_cell

    def one_hot(self, states) -> np.ndarray:
        return np.eye(self.n_states)[np.asarray(states, dtype=int)]

    def one_hot_actions(self, actions) -> np.ndarray:
        return np.eye(self.n_actions)[np.asarray(actions, dtype=int)]


@dataclass
class PointMassEnv:
    """Single-integrator point mass in the unit box.

    ``reach`` states are the agent position; ``push`` states are agent
    position followed by block position. Actions are velocity commands in
    ``[-action_high, action_high]^2``; out-of-box actions are rejected rather
    than clipped.
    """

    variant: str = "reach"
    goal: tuple[float, float] = (0.75, 0.75)
    horizon: int = 50
    success_radius: float = 0.05
    obs_noise_std: float = 0.0
    contact_radius: float = 0.06
    action_high: float = 0.05
    agent_start_low: tuple[float, float] = (0.0, 0.0)
    agent_start_high: tuple[float, float] = (1.0, 1.0)
    block_start_low: tuple[float, float] = (0.3, 0.3)
    block_start_high: tuple[float, float] = (0.55, 0.55)
    min_start_distance: float = 0.4
    expert_speed: float = 0.04

    def __post_init__(self):
        if self.variant not in ("reach", "push"):
            raise ValueError(f"unknown point-mass variant {self.variant!r}")
        self.goal = np.asarray(self.goal, dtype=float)

    @property
    def state_dim(self) -> int:
        return 2 if self.variant == "reach" else 4

    @property
    def action_dim(self) -> int:
        return 2

    def _sample_starts(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lo, hi = np.asarray(self.agent_start_low), np.asarray(self.agent_start_high)
        agent = rng.uniform(lo, hi, size=(n, 2))
        if self.variant == "reach":
            # resample starts that are already close to the goal
            for _ in range(1000):
                bad = np.linalg.norm(agent - self.goal, axis=-1) < self.min_start_distance
                if not bad.any():
                    break
                agent[bad] = rng.uniform(lo, hi, size=(int(bad.sum()), 2))
            return agent
        blo, bhi = np.asarray(self.block_start_low), np.asarray(self.block_start_high)
        block = rng.uniform(blo, bhi, size=(n, 2))
        for _ in range(1000):
            bad = np.linalg.norm(agent - block, axis=-1) < self.contact_radius
            if not bad.any():
                break
            agent[bad] = rng.uniform(lo, hi, size=(int(bad.sum()), 2))
        return np.concatenate([agent, block], axis=-1)

    def reset(self, seed: int) -> np.ndarray:
        if seed < 0:
            raise ValueError("seed must be non-negative")
        return self._sample_starts(np.random.default_rng(seed), 1)[0]

    def reset_batch(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self._sample_starts(rng, n)

    def is_success(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        pos = states[..., :2] if self.variant == "reach" else states[..., 2:4]
        return np.linalg.norm(pos - self.goal, axis=-1) <= self.success_radius

    def step(self, state: np.ndarray, action: np.ndarray):
        """Advance one step. Returns ``(next_state, success)``; works batched."""
        state = np.asarray(state, dtype=float)
        action = np.asarray(action, dtype=float)
        if action.shape[-1] != 2:
            raise ValueError("point-mass actions are 2-dimensional")
        if np.any(np.abs(action) > self.action_high + 1e-12) or not np.all(np.isfinite(action)):
            raise ActionOutOfBoxError(
                f"action outside [-{self.action_high}, {self.action_high}]^2: max |a| = {np.abs(action).max()}"
            )
        agent = state[..., :2]
        new_agent = np.clip(agent + action, 0.0, 1.0)
        if self.variant == "reach":
            nxt = new_agent
        else:
            # sticky contact: a block touching the agent before the move travels with it
            block = state[..., 2:4]
            touching = np.linalg.norm(agent - block, axis=-1, keepdims=True) < self.contact_radius
            new_block = np.where(touching, np.clip(block + (new_agent - agent), 0.0, 1.0), block)
            nxt = np.concatenate([new_agent, new_block], axis=-1)
        return nxt, self.is_success(nxt)

    def observe(self, states: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
        if self.obs_noise_std <= 0.0 or rng is None:
            return states
        return states + rng.normal(0.0, self.obs_noise_std, size=np.shape(states))

    def expert_action(self, states: np.ndarray) -> np.ndarray:
        """Noise-free scripted action: head for the goal (reach), or fetch the block and carry it there (push)."""
        states = np.asarray(states, dtype=float)
        agent = states[..., :2]
        if self.variant == "reach":
            target = np.broadcast_to(self.goal, agent.shape)
        else:
            # approach the block, then carry it toward the goal
            block = states[..., 2:4]
            touching = np.linalg.norm(agent - block, axis=-1, keepdims=True) < self.contact_radius
            to_goal = self.goal - block
            target = np.where(touching, agent + to_goal, block)
            target = np.where(touching & (np.linalg.norm(to_goal, axis=-1, keepdims=True) < 0.5 * self.success_radius), agent, target)
        delta = target - agent
        dist = np.linalg.norm(delta, axis=-1, keepdims=True)
        step = delta / np.maximum(dist, 1e-12) * np.minimum(dist, self.expert_speed)
        return np.clip(step, -self.action_high, self.action_high)


@dataclass
class BehaviorPolicy:
    """Scripted data-collection policy ``beta(a|s)`` of configurable quality."""

    kind: str = "scripted_noisy_expert"
    noise_std: float = 0.0
    epsilon: float = 0.0
    squash: bool = False  # add noise before a tanh squash instead of clipping

    KINDS = ("scripted_noisy_expert", "uniform_random", "epsilon_expert")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown behavior policy kind {self.kind!r}")
        if self.noise_std < 0 or not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("noise_std must be >= 0 and epsilon in [0, 1]")


def scripted_policy_action(policy: BehaviorPolicy, env: PointMassEnv, state, rng: np.random.Generator) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    shape = state.shape[:-1] + (2,)
    high = env.action_high
    uniform = rng.uniform(-high, high, size=shape)
    if policy.kind == "uniform_random":
        return uniform
    expert = env.expert_action(state)
    eps = rng.normal(0.0, 1.0, size=shape)
    if policy.squash:
        # noise_std is measured in pre-squash units of the normalized action
        pre = np.arctanh(np.clip(expert / high, -0.999, 0.999))
        noisy = high * np.tanh(pre + eps * policy.noise_std)
    else:
        noisy = np.clip(expert + eps * policy.noise_std, -high, high)
    if policy.kind == "scripted_noisy_expert":
        return noisy
    explore = rng.uniform(size=shape[:-1]) < policy.epsilon
    return np.where(explore[..., None], uniform, noisy)


@dataclass
class GridBehavior:
    """Discrete behavior policy for the gridworld: epsilon-greedy toward the goal."""

    epsilon: float = 1.0

    def probs(self, env: GridWorldMDP) -> np.ndarray:
        S, A = env.n_states, env.n_actions
        B = np.full((S, A), self.epsilon / A)
        gx, gy = env.goal_cell % env.width, env.goal_cell // env.width
        for s in range(S):
            x, y = s % env.width, s // env.width
            dist = [abs(env._move(s, a) % env.width - gx) + abs(env._move(s, a) // env.width - gy) for a in range(A)]
            best = int(np.argmin(dist)) if (x, y) != (gx, gy) else 0
            B[s, best] += 1.0 - self.epsilon
        return B


ENV_IDS = ("grid5", "reach2d", "push2d")


def make_env(env_id: str, **overrides):
    if env_id == "grid5":
        return GridWorldMDP(width=5, height=5, **overrides)
    if env_id == "reach2d":
        return PointMassEnv(variant="reach", **overrides)
    if env_id == "push2d":
        return PointMassEnv(variant="push", **overrides)
    raise ValueError(f"unknown env_id {env_id!r}; expected one of {ENV_IDS}")
