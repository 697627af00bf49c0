"""Cross-entropy-method action selection on a trained critic.

Each call optimizes a single action against ``mean_j f(s, a, s*_j)`` (or
``log mean_j exp f`` when ``score="log_mean_exp_f"``). The multi-step
reasoning lives in the occupancy model, so no action sequences are planned.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .envs import PointMassEnv

STD_FLOOR = 1e-6
SCORES = ("mean_f", "log_mean_exp_f")


@dataclass
class CemConfig:
    iterations: int = 10
    population: int = 10_000
    elites: int = 2_000
    init_std: float | None = None  # None: half the action box width
    seed: int = 0
    score: str = "mean_f"
    keep_elites: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 1 <= self.elites <= self.population:
            raise ValueError("need 1 <= elites <= population")
        if self.score not in SCORES:
            raise ValueError(f"score must be one of {SCORES}")


def _scorer(critic, success_examples, score: str):
    """Return ``fn(states (E, D), candidates (E, P, A)) -> (E, P)`` scores."""
    success = np.atleast_2d(np.asarray(success_examples, dtype=float))
    if len(success) == 0:
        raise ValueError("success_examples must be nonempty")

    if hasattr(critic, "embed_sa") and hasattr(critic, "embed_future"):
        psi = critic.embed_future(success)
        psi_bar = psi.mean(axis=0)

        def fn(states, cands):
            E, P, A = cands.shape
            phi = critic.embed_sa(np.repeat(states, P, axis=0), cands.reshape(E * P, A))
            if score == "mean_f":
                return (phi @ psi_bar).reshape(E, P)
            return (logsumexp(phi @ psi.T, axis=1) - np.log(len(psi))).reshape(E, P)

        return fn

    def fn(states, cands):
        E, P, A = cands.shape
        f = critic.f_matrix(np.repeat(states, P, axis=0), cands.reshape(E * P, A), success)
        if score == "mean_f":
            return f.mean(axis=1).reshape(E, P)
        return (logsumexp(f, axis=1) - np.log(f.shape[1])).reshape(E, P)

    return fn


@dataclass
class CemTrace:
    elite_means: list[np.ndarray] = field(default_factory=list)  # per iteration, shape (E,)
    means: list[np.ndarray] = field(default_factory=list)
    stds: list[np.ndarray] = field(default_factory=list)


def cem_actions(critic, states, success_examples, config: CemConfig, low, high, rng=None, trace: CemTrace | None = None):
    """Run one independent CEM search per row of ``states`` in a single batch.

    ``low``/``high`` bound the action box (scalars or per-dimension arrays).
    With ``keep_elites`` the previous elites compete with each fresh
    population, which makes the elite scores non-decreasing.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    low = np.broadcast_to(np.asarray(low, dtype=float), (critic.action_dim,))
    high = np.broadcast_to(np.asarray(high, dtype=float), (critic.action_dim,))
    if np.any(high <= low):
        raise ValueError("action box must have high > low")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    score_fn = _scorer(critic, success_examples, config.score)
    E, A, P, K = len(states), critic.action_dim, config.population, config.elites

    mean = np.broadcast_to((low + high) / 2.0, (E, A)).copy()
    init_std = (high - low) / 2.0 if config.init_std is None else np.full(A, config.init_std)
    std = np.broadcast_to(init_std, (E, A)).copy()
    prev, prev_scores = None, None
    for _ in range(config.iterations):
        cands = np.clip(mean[:, None, :] + std[:, None, :] * rng.standard_normal((E, P, A)), low, high)
        scores = score_fn(states, cands)
        if prev is not None:
            cands = np.concatenate([cands, prev], axis=1)
            scores = np.concatenate([scores, prev_scores], axis=1)
        # stable sort keeps ties in index order
        top = np.argsort(-scores, axis=1, kind="stable")[:, :K]
        elites = np.take_along_axis(cands, top[:, :, None], axis=1)
        elite_scores = np.take_along_axis(scores, top, axis=1)
        mean = elites.mean(axis=1)
        std = np.maximum(elites.std(axis=1), STD_FLOOR)
        if config.keep_elites:
            prev, prev_scores = elites, elite_scores
        if trace is not None:
            trace.elite_means.append(elite_scores.mean(axis=1))
            trace.means.append(mean.copy())
            trace.stds.append(std.copy())
    return np.clip(mean, low, high)


def cem_action(critic, state, success_examples, config: CemConfig, low=-1.0, high=1.0) -> np.ndarray:
    return cem_actions(critic, np.atleast_2d(state), success_examples, config, low, high)[0]


@dataclass
class PlanTask:
    """One evaluation task for the multitask planner.

    ``project`` maps environment states to the critic's state space; the
    success example lives in the critic's space.
    """

    name: str
    env: PointMassEnv
    success_example: np.ndarray
    project: Callable[[np.ndarray], np.ndarray] = lambda s: s


def scripted_success_example(env: PointMassEnv, seed: int = 0, project=lambda s: s) -> np.ndarray:
    """Final state of a noise-free scripted rollout that ends in success."""
    rng = np.random.default_rng(seed)
    for _ in range(100):
        state = env.reset_batch(rng, 1)
        ok = False
        for _ in range(env.horizon):
            state, hit = env.step(state, env.expert_action(state))
            ok = ok or bool(hit[0])
        if ok:
            return project(state)[0]
    raise RuntimeError(f"scripted expert never succeeded on goal {tuple(env.goal)}")


def rollout(env: PointMassEnv, act: Callable[[np.ndarray], np.ndarray], episodes: int, seed: int) -> float:
    """Batched episodes; an episode succeeds if the success predicate holds at any step."""
    rng = np.random.default_rng(seed)
    states = env.reset_batch(rng, episodes)
    ok = np.zeros(episodes, dtype=bool)
    for _ in range(env.horizon):
        states, hit = env.step(states, act(states))
        ok |= hit
    return float(np.mean(ok))


def random_action_fn(env: PointMassEnv, seed: int):
    rng = np.random.default_rng(seed)
    return lambda s: rng.uniform(-env.action_high, env.action_high, size=(len(s), env.action_dim))


def cem_action_fn(critic, task: PlanTask, config: CemConfig, seed: int):
    rng = np.random.default_rng(seed)
    high = task.env.action_high
    return lambda s: cem_actions(critic, task.project(s), task.success_example, config, -high, high, rng=rng)


def multitask_eval(critic, tasks: list[PlanTask], config: CemConfig, episodes: int, seeds) -> list[dict]:
    """Success rate of CEM and of uniform random actions per task and seed."""
    rows = []
    for task in tasks:
        for seed in seeds:
            cfg = replace(config, seed=seed)
            for planner, fn in (
                ("cem", cem_action_fn(critic, task, cfg, seed)),
                ("random", random_action_fn(task.env, seed)),
            ):
                rows.append({"task": task.name, "planner": planner, "seed": seed, "success_rate": rollout(task.env, fn, episodes, seed)})
    return rows


def _agent_xy(states: np.ndarray) -> np.ndarray:
    return np.asarray(states)[..., :2]


# (name, variant, goal, agent start box); start boxes sit far from each goal so
# undirected motion cannot reach it within one episode
TASK_SUITE = (
    ("reach-train", "reach", (0.75, 0.75), ((0.0, 0.0), (0.15, 0.15))),
    ("reach-near", "reach", (0.55, 0.75), ((0.0, 0.0), (0.15, 0.15))),
    ("reach-medium", "reach", (0.25, 0.75), ((0.6, 0.0), (0.75, 0.15))),
    ("reach-far", "reach", (0.25, 0.25), ((0.85, 0.85), (1.0, 1.0))),
    ("push-near", "push", (0.75, 0.75), ((0.0, 0.0), (0.15, 0.15))),
    ("push-far", "push", (0.25, 0.25), ((0.85, 0.85), (1.0, 1.0))),
)
TRAIN_TASK = "reach-train"


def default_task_suite(example_seed: int = 0) -> list[PlanTask]:
    """Training task plus five transfer tasks for a critic trained on reach data.

    The push tasks are observed through the agent's position only, which is
    all a reach critic understands.
    """
    tasks = []
    for name, variant, goal, (lo, hi) in TASK_SUITE:
        env = PointMassEnv(variant=variant, goal=goal, agent_start_low=lo, agent_start_high=hi, min_start_distance=0.0)
        project = _agent_xy if variant == "push" else (lambda s: s)
        tasks.append(PlanTask(name, env, scripted_success_example(env, example_seed, project), project))
    return tasks
