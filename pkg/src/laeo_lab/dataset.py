"""Offline trajectory containers, future-state sampling and serialization."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .envs import BehaviorPolicy, GridWorldMDP, PointMassEnv, scripted_policy_action

FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed dataset or success-set file."""


class UnsupportedVersionError(DatasetFormatError):
    pass


@dataclass
class Trajectory:
    states: np.ndarray  # (T + 1, D)
    actions: np.ndarray  # (T, A)
    success_flags: np.ndarray  # (T,), flag t refers to states[t + 1]

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=float)
        self.success_flags = np.asarray(self.success_flags, dtype=bool)
        T = len(self.actions)
        if len(self.states) != T + 1 or len(self.success_flags) != T:
            raise ValueError("trajectory needs T+1 states, T actions and T success flags")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.actions))):
            raise ValueError("trajectory contains non-finite values")

    @property
    def horizon(self) -> int:
        return len(self.actions)


class TrajectoryDataset:
    """Fixed-horizon trajectories stored as stacked arrays.

    ``states`` is ``(N, T + 1, D)``, ``actions`` is ``(N, T, A)`` and
    ``success`` is ``(N, T)``.
    """

    def __init__(self, states, actions, success, env_id: str, metadata: dict | None = None):
        self.states = np.asarray(states, dtype=float)
        self.actions = np.asarray(actions, dtype=float)
        self.success = np.asarray(success, dtype=bool)
        self.env_id = env_id
        self.metadata = dict(metadata or {})
        if self.states.ndim != 3 or len(self.states) == 0:
            raise ValueError("dataset must contain at least one trajectory")
        N, T1, _ = self.states.shape
        if self.actions.shape[:2] != (N, T1 - 1) or self.success.shape != (N, T1 - 1):
            raise ValueError("inconsistent trajectory shapes")
        if T1 < 2:
            raise ValueError("trajectories need at least one transition")

    @classmethod
    def from_trajectories(cls, trajectories: list[Trajectory], env_id: str, metadata: dict | None = None):
        if not trajectories:
            raise ValueError("dataset must contain at least one trajectory")
        return cls(
            np.stack([t.states for t in trajectories]),
            np.stack([t.actions for t in trajectories]),
            np.stack([t.success_flags for t in trajectories]),
            env_id,
            metadata,
        )

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(self.states[i], self.actions[i], self.success[i])

    @property
    def trajectories(self) -> list[Trajectory]:
        return [self[i] for i in range(len(self))]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[2]

    def all_states(self) -> np.ndarray:
        return self.states.reshape(-1, self.state_dim)

    def transitions(self) -> tuple[np.ndarray, np.ndarray]:
        """All ``(s_t, a_t)`` pairs, flattened trajectory-major."""
        return self.states[:, :-1].reshape(-1, self.state_dim), self.actions.reshape(-1, self.action_dim)

    def success_rate(self) -> float:
        return float(self.success.any(axis=1).mean())

    def subset(self, n: int) -> "TrajectoryDataset":
        return TrajectoryDataset(self.states[:n], self.actions[:n], self.success[:n], self.env_id, self.metadata)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectoryDataset):
            return NotImplemented
        return (
            self.env_id == other.env_id
            and self.metadata == other.metadata
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.success, other.success)
        )


@dataclass
class SuccessSet:
    states: np.ndarray
    env_id: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if len(self.states) == 0 or self.states.size == 0:
            raise ValueError("success set must be nonempty")

    def __len__(self) -> int:
        return len(self.states)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SuccessSet):
            return NotImplemented
        return self.env_id == other.env_id and self.metadata == other.metadata and np.array_equal(self.states, other.states)


@dataclass
class ContrastiveBatch:
    states: np.ndarray  # (B, D)
    actions: np.ndarray  # (B, A)
    positives: np.ndarray  # (B, D)
    negatives: np.ndarray  # (B, K, D)
    traj_ids: np.ndarray  # (B,)
    times: np.ndarray  # (B,)
    offsets: np.ndarray  # (B,)


# --- future-state sampling --------------------------------------------------


def truncated_geometric(rng: np.random.Generator, gamma: float, max_offset, size=None) -> np.ndarray:
    """Draw ``k`` in ``{0, ..., max_offset}`` with ``P(k)`` proportional to ``gamma**k`` (inverse CDF)."""
    max_offset = np.asarray(max_offset)
    u = rng.uniform(size=size if size is not None else max_offset.shape)
    mass = 1.0 - gamma ** (max_offset + 1.0)
    k = np.floor(np.log1p(-u * mass) / np.log(gamma)).astype(int)
    return np.clip(k, 0, max_offset)


def sample_future_state(trajectory: Trajectory, t: int, gamma: float, rng: np.random.Generator):
    T = trajectory.horizon
    if not 0 <= t <= T - 1:
        raise IndexError(f"anchor index {t} outside [0, {T - 1}]")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    k = int(truncated_geometric(rng, gamma, T - t, size=()))
    return trajectory.states[t + k], k


def sample_batch(
    dataset: TrajectoryDataset, batch_size: int, negatives_per_anchor: int, gamma: float, rng: np.random.Generator
) -> ContrastiveBatch:
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    if negatives_per_anchor >= 1 and batch_size < 2:
        raise ValueError("batch_size must be >= 2 when negatives are requested")
    N, T = len(dataset), dataset.horizon
    flat = rng.integers(N * T, size=batch_size)
    traj, t = np.divmod(flat, T)
    k = truncated_geometric(rng, gamma, T - t)
    all_states = dataset.all_states()
    neg_idx = rng.integers(len(all_states), size=(batch_size, negatives_per_anchor))
    return ContrastiveBatch(
        states=dataset.states[traj, t],
        actions=dataset.actions[traj, t],
        positives=dataset.states[traj, t + k],
        negatives=all_states[neg_idx],
        traj_ids=traj,
        times=t,
        offsets=k,
    )


# --- densities ----------------------------------------------------------------


@dataclass(frozen=True)
class Binning:
    """Map state vectors to integer bins."""

    n_bins: int
    assign: Callable[[np.ndarray], np.ndarray]


def one_hot_binning(n_states: int) -> Binning:
    return Binning(n_states, lambda states: np.argmax(np.atleast_2d(states), axis=-1))


def grid_binning(resolution: int, dims: int, low: float = 0.0, high: float = 1.0) -> Binning:
    if resolution < 1:
        raise ValueError("binning resolution must be >= 1")

    def assign(states):
        states = np.atleast_2d(states)[:, :dims]
        cell = np.clip(((states - low) / (high - low) * resolution).astype(int), 0, resolution - 1)
        return np.ravel_multi_index(tuple(cell.T), (resolution,) * dims)

    return Binning(resolution**dims, assign)


def empirical_state_density(dataset: TrajectoryDataset, binning: Binning) -> np.ndarray:
    counts = np.bincount(binning.assign(dataset.all_states()), minlength=binning.n_bins).astype(float)
    return counts / counts.sum()


def exact_future_distribution(dataset: TrajectoryDataset, binning: Binning, gamma: float, n_actions: int, action_of=None):
    """Enumerate the positive distribution the future-state sampler induces.

    Returns ``(pos, anchor)`` where ``anchor[s, a]`` is the probability of
    drawing the anchor pair and ``pos[s, a, s']`` the conditional probability
    of the positive landing in bin ``s'``. Only meaningful for discrete data.
    """
    action_of = action_of or (lambda actions: np.argmax(actions, axis=-1))
    S = binning.n_bins
    joint = np.zeros((S, n_actions, S))
    anchor = np.zeros((S, n_actions))
    T = dataset.horizon
    for states, actions in zip(dataset.states, dataset.actions):
        bins = binning.assign(states)
        acts = action_of(actions)
        for t in range(T):
            L = T - t
            w = gamma ** np.arange(L + 1)
            w /= w.sum()
            np.add.at(joint[bins[t], acts[t]], bins[t : T + 1], w)
            anchor[bins[t], acts[t]] += 1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        pos = np.where(anchor[..., None] > 0, joint / anchor[..., None], 0.0)
    return pos, anchor / anchor.sum()


# --- collection ---------------------------------------------------------------


def collect_pointmass(env: PointMassEnv, behavior: BehaviorPolicy, n_trajectories: int, seed: int, env_id: str):
    rng = np.random.default_rng(seed)
    s = env.reset_batch(rng, n_trajectories)
    states = [s]
    actions, flags = [], []
    for _ in range(env.horizon):
        a = scripted_policy_action(behavior, env, env.observe(s, None), rng)
        s, succ = env.step(s, a)
        states.append(s)
        actions.append(a)
        flags.append(succ)
    ds = TrajectoryDataset(
        np.stack(states, axis=1),
        np.stack(actions, axis=1),
        np.stack(flags, axis=1),
        env_id,
    )
    ds.metadata.update(
        behavior={"kind": behavior.kind, "noise_std": behavior.noise_std, "epsilon": behavior.epsilon},
        seed=seed,
        n_trajectories=n_trajectories,
        success_rate=ds.success_rate(),
    )
    return ds


def collect_gridworld(env: GridWorldMDP, behavior_probs: np.ndarray, n_trajectories: int, seed: int, env_id: str = "grid5"):
    rng = np.random.default_rng(seed)
    T = env.transition_tensor()
    S, A = env.n_states, env.n_actions
    H = env.horizon
    idx = np.empty((n_trajectories, H + 1), dtype=int)
    act = np.empty((n_trajectories, H), dtype=int)
    idx[:, 0] = rng.choice(S, size=n_trajectories, p=env.initial_distribution())
    # inverse-CDF sampling, vectorized across trajectories
    cum_b = np.cumsum(behavior_probs, axis=1)
    cum_t = np.cumsum(T, axis=2)
    for t in range(H):
        s = idx[:, t]
        a = np.minimum((rng.uniform(size=n_trajectories)[:, None] > cum_b[s]).sum(axis=1), A - 1)
        nxt = np.minimum((rng.uniform(size=n_trajectories)[:, None] > cum_t[s, a]).sum(axis=1), S - 1)
        act[:, t] = a
        idx[:, t + 1] = nxt
    ds = TrajectoryDataset(env.one_hot(idx), env.one_hot_actions(act), idx[:, 1:] == env.goal_cell, env_id)
    ds.metadata.update(seed=seed, n_trajectories=n_trajectories, success_rate=ds.success_rate())
    return ds


def harvest_success_examples(dataset: TrajectoryDataset, n: int, rng: np.random.Generator) -> SuccessSet:
    """Sample success states uniformly over the flagged states of successful trajectories."""
    traj, t = np.nonzero(dataset.success)
    if len(traj) == 0:
        raise ValueError("dataset contains no successful states to harvest")
    pick = rng.choice(len(traj), size=n, replace=n > len(traj))
    states = dataset.states[traj[pick], t[pick] + 1]
    return SuccessSet(states, dataset.env_id, {"n_examples": n, "pool_size": int(len(traj))})


# --- serialization --------------------------------------------------------------


def _header(kind: str, env_id: str, state_dim: int, **extra) -> dict:
    return {"version": FORMAT_VERSION, "kind": kind, "env_id": env_id, "state_dim": state_dim, **extra}


def save_dataset(dataset: TrajectoryDataset, path) -> None:
    header = _header(
        "trajectories",
        dataset.env_id,
        dataset.state_dim,
        action_dim=dataset.action_dim,
        horizon=dataset.horizon,
        n_trajectories=len(dataset),
        metadata=dataset.metadata,
    )
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for i in range(len(dataset)):
            record = {
                "states": dataset.states[i].ravel().tolist(),
                "actions": dataset.actions[i].ravel().tolist(),
                "success": dataset.success[i].astype(int).tolist(),
            }
            fh.write(json.dumps(record) + "\n")


def _read_records(path):
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    records = []
    for lineno, line in enumerate(lines, start=1):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: malformed record ({exc.msg})") from None
    if not records:
        raise DatasetFormatError(f"{path}: line 1: missing header record")
    header = records[0]
    if not isinstance(header, dict) or "version" not in header:
        raise DatasetFormatError(f"{path}: line 1: header record lacks a version field")
    if header["version"] != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported format version {header['version']!r} (expected {FORMAT_VERSION})")
    return header, records[1:]


def load_dataset(path) -> TrajectoryDataset:
    header, records = _read_records(path)
    if header.get("kind") != "trajectories":
        raise DatasetFormatError(f"{path}: line 1: not a trajectory dataset (kind={header.get('kind')!r})")
    D, A, T, N = header["state_dim"], header["action_dim"], header["horizon"], header["n_trajectories"]
    if len(records) != N:
        raise DatasetFormatError(f"{path}: line {len(records) + 2}: expected {N} trajectory records, found {len(records)}")
    states = np.empty((N, T + 1, D))
    actions = np.empty((N, T, A))
    success = np.empty((N, T), dtype=bool)
    for i, rec in enumerate(records):
        lineno = i + 2
        try:
            s = np.asarray(rec["states"], dtype=float)
            a = np.asarray(rec["actions"], dtype=float)
            f = np.asarray(rec["success"], dtype=int)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: bad trajectory record ({exc})") from None
        if s.size != (T + 1) * D or a.size != T * A or f.size != T:
            raise DatasetFormatError(f"{path}: line {lineno}: array lengths do not match the header")
        states[i] = s.reshape(T + 1, D)
        actions[i] = a.reshape(T, A)
        success[i] = f.astype(bool)
    return TrajectoryDataset(states, actions, success, header["env_id"], header.get("metadata", {}))


def save_success_set(success_set: SuccessSet, path) -> None:
    D = success_set.states.shape[1]
    header = _header(
        "success_set", success_set.env_id, D, n_states=len(success_set), metadata=success_set.metadata
    )
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        fh.write(json.dumps({"states": success_set.states.ravel().tolist()}) + "\n")


def load_success_set(path) -> SuccessSet:
    header, records = _read_records(path)
    if header.get("kind") != "success_set":
        raise DatasetFormatError(f"{path}: line 1: not a success-set file (kind={header.get('kind')!r})")
    if len(records) != 1 or "states" not in records[0]:
        raise DatasetFormatError(f"{path}: line 2: expected one flat state-list record")
    flat = np.asarray(records[0]["states"], dtype=float)
    D, M = header["state_dim"], header["n_states"]
    if flat.size != D * M:
        raise DatasetFormatError(f"{path}: line 2: expected {D * M} numbers, found {flat.size}")
    return SuccessSet(flat.reshape(M, D), header["env_id"], header.get("metadata", {}))


def dataset_path_pair(out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    return out / "dataset.jsonl", out / "success.jsonl"
