"""Exact tabular ground truth for occupancy measures, behavior Q-values and the optimal critic."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

NEG_INF = -np.inf


class SupportError(ValueError):
    """A state carries target mass but has zero dataset density."""


@dataclass
class TabularMDP:
    T: np.ndarray  # (S, A, S)
    B: np.ndarray  # (S, A) behavior policy
    p0: np.ndarray  # (S,)
    gamma: float

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        self.p0 = np.asarray(self.p0, dtype=float)
        S, A, S2 = self.T.shape
        if S != S2 or self.B.shape != (S, A) or self.p0.shape != (S,):
            raise ValueError("inconsistent tabular MDP shapes")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        for name, arr in (("T", self.T.sum(-1)), ("B", self.B.sum(-1)), ("p0", self.p0.sum())):
            if not np.allclose(arr, 1.0, atol=1e-10) or np.any(getattr(self, name) < 0):
                raise ValueError(f"{name} is not a probability distribution")

    @property
    def n_states(self) -> int:
        return self.T.shape[0]

    @property
    def n_actions(self) -> int:
        return self.T.shape[1]

    def state_transition(self) -> np.ndarray:
        """``P_beta[s, s'] = sum_a B[s, a] T[s, a, s']``."""
        return np.einsum("sa,sat->st", self.B, self.T)

    @classmethod
    def random(cls, rng: np.random.Generator, n_states: int, n_actions: int, gamma: float, sparsity: float = 0.5):
        T = rng.exponential(size=(n_states, n_actions, n_states)) * (rng.uniform(size=(n_states, n_actions, n_states)) > sparsity)
        T[..., 0] += 1e-3  # keep every row nonempty
        T /= T.sum(-1, keepdims=True)
        B = rng.dirichlet(np.ones(n_actions), size=n_states)
        p0 = rng.dirichlet(np.ones(n_states))
        return cls(T, B, p0, gamma)


def _solve(mdp: TabularMDP, rhs: np.ndarray) -> np.ndarray:
    S = mdp.n_states
    M = np.eye(S) - mdp.gamma * mdp.state_transition()
    lu = scipy.linalg.lu_factor(M)
    x = scipy.linalg.lu_solve(lu, rhs)
    residual = np.abs(M @ x - rhs).max()
    if residual > 1e-8:
        raise np.linalg.LinAlgError(f"linear solve residual {residual:.3e} exceeds 1e-8")
    return x


def occupancy(mdp: TabularMDP) -> np.ndarray:
    """Discounted state occupancy ``rho[s, a, s']`` of the behavior policy, counting t = 0."""
    S = mdp.n_states
    N = _solve(mdp, np.eye(S))  # (I - gamma P)^-1
    g = mdp.gamma
    rho = g * (1.0 - g) * np.einsum("sat,tu->sau", mdp.T, N)
    rho += (1.0 - g) * np.eye(S)[:, None, :]
    return rho


def exact_q(mdp: TabularMDP, reward: np.ndarray) -> np.ndarray:
    """Behavior Q-values for state reward ``r(s)`` with ``Q[s, a] = r[s] + gamma E[V(s')]``."""
    reward = np.asarray(reward, dtype=float)
    if not np.all(np.isfinite(reward)):
        raise ValueError("reward must be finite")
    V = _solve(mdp, reward)
    return reward[:, None] + mdp.gamma * mdp.T @ V


def exact_f_star(mdp: TabularMDP, p_tau: np.ndarray, rho: np.ndarray | None = None) -> np.ndarray:
    """``f*[s, a, s'] = log rho(s'|s, a) - log p_tau(s')`` with ``-inf`` where rho is zero."""
    rho = occupancy(mdp) if rho is None else rho
    p_tau = np.asarray(p_tau, dtype=float)
    reached = (rho > 0).any(axis=(0, 1))
    bad = np.nonzero(reached & (p_tau <= 0))[0]
    if len(bad):
        raise SupportError(f"state {int(bad[0])} is reachable but has zero dataset density")
    f = np.full(rho.shape, NEG_INF)
    mask = rho > 0
    f[mask] = np.log(rho[mask]) - np.log(np.broadcast_to(p_tau, rho.shape)[mask])
    return f


def reward_from_examples(success_counts: np.ndarray, p_tau: np.ndarray, c: float = 1.0) -> np.ndarray:
    """Implicit reward ``c * p_*(s) / p_tau(s)`` from success-example counts."""
    counts = np.asarray(success_counts, dtype=float)
    p_star = counts / counts.sum()
    p_tau = np.asarray(p_tau, dtype=float)
    bad = np.nonzero((p_star > 0) & (p_tau <= 0))[0]
    if len(bad):
        raise SupportError(f"success state {int(bad[0])} has zero dataset density")
    r = np.zeros_like(p_star)
    nz = p_star > 0
    r[nz] = c * p_star[nz] / p_tau[nz]
    return r


def occupancy_q(f_table: np.ndarray, p_star: np.ndarray, gamma: float) -> np.ndarray:
    """``(1 / (1 - gamma)) sum_{s*} p_*(s*) exp(f[s, a, s*])`` computed exactly over the support of ``p_*``."""
    p_star = np.asarray(p_star, dtype=float)
    support = p_star > 0
    vals = np.exp(f_table[..., support]) @ p_star[support]
    return vals / (1.0 - gamma)


def power_series_occupancy(mdp: TabularMDP, tol: float = 1e-10) -> np.ndarray:
    """Truncated ``(1 - gamma) sum_t gamma^t p_t``; stops once ``gamma^t < tol``."""
    g, P = mdp.gamma, mdp.state_transition()
    S, A = mdp.n_states, mdp.n_actions
    dist = np.repeat(np.eye(S)[:, None, :], A, axis=1)
    rho = (1.0 - g) * dist
    dist, weight = mdp.T.copy(), (1.0 - g) * g
    while weight >= tol * (1.0 - g):
        rho += weight * dist
        dist = dist @ P
        weight *= g
    return rho


@dataclass
class CheckResult:
    name: str
    residual: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.residual) and self.residual <= self.tolerance)


def identity_checks(seed: int = 0, n_mdps: int = 3, perturb_gamma: float = 0.0) -> list[CheckResult]:
    """Exact identities linking occupancy, Bellman evaluation and the optimal critic.

    ``perturb_gamma`` shifts the discount on the occupancy side only; any
    nonzero value should make that check fail.
    """
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_mdps):
        S, A = int(rng.integers(5, 51)), int(rng.integers(2, 5))
        mdp = TabularMDP.random(rng, S, A, float(rng.uniform(0.5, 0.95)))
        rho = occupancy(mdp)
        out.append(CheckResult(f"occupancy normalization [mdp {k}, S={S}]", float(np.abs(rho.sum(-1) - 1).max()), 1e-12))
        r = rng.uniform(size=S)
        via_rho = rho @ r / (1.0 - mdp.gamma)
        out.append(CheckResult(f"Q from occupancy [mdp {k}]", float(np.abs(exact_q(mdp, r) - via_rho).max()), 1e-10))
        p_tau = rng.dirichlet(np.ones(S))
        counts = rng.integers(0, 3, size=S).astype(float)
        counts[int(rng.integers(S))] += 1
        f = exact_f_star(mdp, p_tau, rho)
        q_occ = occupancy_q(f, counts / counts.sum(), mdp.gamma + perturb_gamma)
        q_bellman = exact_q(mdp, reward_from_examples(counts, p_tau))
        out.append(CheckResult(f"Q-occupancy identity [mdp {k}, gamma={mdp.gamma:.3f}]", float(np.abs(q_occ - q_bellman).max()), 1e-9))
    from .envs import GridBehavior, GridWorldMDP

    env = GridWorldMDP(5, 5, slip_prob=0.1, gamma=0.9)
    grid = TabularMDP(env.transition_tensor(), GridBehavior(0.5).probs(env), env.initial_distribution(), 0.9)
    diff = np.abs(occupancy(grid) - power_series_occupancy(grid)).max()
    out.append(CheckResult("gridworld solve vs power series", float(diff), 1e-8))
    return out
