"""Implicit dynamics model ``f(s, a, s_f) = <phi(s, a), psi(s_f)>`` and its contrastive training."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .approx import Adam, Mlp, NonFiniteError, load_checkpoint, mlp_from_tensors, mlp_tensors, save_checkpoint
from .dataset import ContrastiveBatch, TrajectoryDataset, sample_batch

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class CriticTrainConfig:
    batch_size: int = 256
    negatives: int = 1
    gamma: float = 0.8
    lr: float = 1e-3
    steps: int = 10_000
    seed: int = 0
    eval_every: int = 1000
    hidden: tuple[int, ...] = (64, 64)
    repr_dim: int = 16

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


class ContrastiveCritic:
    """Two-tower critic with unnormalized inner-product head.

    Actions are divided by ``action_scale`` before entering ``phi`` so both
    towers see inputs of order one. The Q-value scale constant ``c`` is not
    identifiable from data and is fixed to 1 (see :meth:`estimate_q`).
    """

    def __init__(self, phi: Mlp, psi: Mlp, state_dim: int, action_dim: int, gamma: float, action_scale: float = 1.0):
        if phi.out_dim != psi.out_dim:
            raise ValueError("towers must share the representation dimension")
        if phi.in_dim != state_dim + action_dim or psi.in_dim != state_dim:
            raise ValueError("tower input sizes do not match state/action dims")
        self.phi, self.psi = phi, psi
        self.state_dim, self.action_dim = state_dim, action_dim
        self.gamma = gamma
        self.action_scale = action_scale

    @classmethod
    def create(cls, state_dim, action_dim, gamma, rng, hidden=(64, 64), repr_dim=16, action_scale=1.0):
        phi = Mlp.initialized([state_dim + action_dim, *hidden, repr_dim], rng)
        psi = Mlp.initialized([state_dim, *hidden, repr_dim], rng)
        return cls(phi, psi, state_dim, action_dim, gamma, action_scale)

    @property
    def repr_dim(self) -> int:
        return self.phi.out_dim

    @property
    def params(self) -> list[np.ndarray]:
        return self.phi.params + self.psi.params

    def sa_input(self, states, actions) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        actions = np.atleast_2d(np.asarray(actions, dtype=float))
        if states.shape[1] != self.state_dim or actions.shape[1] != self.action_dim:
            raise ValueError(f"expected state dim {self.state_dim} and action dim {self.action_dim}")
        return np.concatenate([states, actions / self.action_scale], axis=1)

    def embed_sa(self, states, actions) -> np.ndarray:
        return self.phi(self.sa_input(states, actions))

    def embed_future(self, states) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if states.shape[1] != self.state_dim:
            raise ValueError(f"expected future-state dim {self.state_dim}")
        return self.psi(states)

    def f_value(self, states, actions, futures) -> np.ndarray:
        """Row-wise ``f(s_i, a_i, s_f_i)``."""
        return np.sum(self.embed_sa(states, actions) * self.embed_future(futures), axis=-1)

    def f_matrix(self, states, actions, futures) -> np.ndarray:
        """``f[i, j] = f(s_i, a_i, s_f_j)``."""
        return self.embed_sa(states, actions) @ self.embed_future(futures).T

    def estimate_q(self, states, actions, success_states) -> np.ndarray:
        return estimate_q(self, states, actions, success_states)

    # checkpoints
    def save(self, path) -> None:
        tensors = {**mlp_tensors("phi", self.phi), **mlp_tensors("psi", self.psi)}
        meta = {
            "towers": {"phi": self.phi.sizes, "psi": self.psi.sizes},
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "gamma": self.gamma,
            "action_scale": self.action_scale,
        }
        save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "ContrastiveCritic":
        tensors, meta = load_checkpoint(path)
        phi = mlp_from_tensors("phi", meta["towers"]["phi"], tensors)
        psi = mlp_from_tensors("psi", meta["towers"]["psi"], tensors)
        return cls(phi, psi, meta["state_dim"], meta["action_dim"], meta["gamma"], meta["action_scale"])


def nce_logit_grads(f_pos: np.ndarray, f_neg: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss ``-mean log sig(f+) - mean log(1 - sig(f-))`` and its derivatives w.r.t. the logits."""
    if not (np.all(np.isfinite(f_pos)) and np.all(np.isfinite(f_neg))):
        raise NonFiniteError("non-finite critic logits")
    loss = -np.mean(log_expit(f_pos)) - np.mean(log_expit(-f_neg))
    g_pos = -expit(-f_pos) / f_pos.size
    g_neg = expit(f_neg) / f_neg.size
    return float(loss), g_pos, g_neg


def nce_loss(critic: ContrastiveCritic, batch: ContrastiveBatch) -> tuple[float, list[np.ndarray]]:
    """Binary NCE loss and gradients for ``critic.phi.params + critic.psi.params``."""
    B, K, D = batch.negatives.shape
    phi_out, phi_cache = critic.phi.forward(critic.sa_input(batch.states, batch.actions), return_cache=True)
    futures = np.concatenate([batch.positives, batch.negatives.reshape(B * K, D)], axis=0)
    psi_out, psi_cache = critic.psi.forward(futures, return_cache=True)
    psi_pos = psi_out[:B]
    psi_neg = psi_out[B:].reshape(B, K, -1)
    f_pos = np.sum(phi_out * psi_pos, axis=-1)
    f_neg = np.einsum("bd,bkd->bk", phi_out, psi_neg)
    loss, g_pos, g_neg = nce_logit_grads(f_pos, f_neg)
    g_phi = g_pos[:, None] * psi_pos + np.einsum("bk,bkd->bd", g_neg, psi_neg)
    g_psi = np.concatenate([g_pos[:, None] * phi_out, (g_neg[:, :, None] * phi_out[:, None, :]).reshape(B * K, -1)])
    grads_phi, _ = critic.phi.backward(phi_cache, g_phi)
    grads_psi, _ = critic.psi.backward(psi_cache, g_psi)
    return loss, grads_phi + grads_psi


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def record(self, step: int, loss: float):
        self.steps.append(step)
        self.losses.append(loss)


def train_critic(dataset: TrajectoryDataset, config: CriticTrainConfig, action_scale: float = 1.0, callback=None):
    """Fit the two-tower critic by Adam on ``nce_loss`` over ``sample_batch`` draws.

    Returns ``(critic, log)``; ``log`` holds the running-mean loss every
    ``eval_every`` steps plus the loss at step 0.
    """
    rng = np.random.default_rng(config.seed)
    init_rng, data_rng = (np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(2))
    critic = ContrastiveCritic.create(
        dataset.state_dim, dataset.action_dim, config.gamma, init_rng, config.hidden, config.repr_dim, action_scale
    )
    params = critic.params
    opt = Adam(params, lr=config.lr)
    history = TrainLog()
    running = []
    for step in range(1, config.steps + 1):
        batch = sample_batch(dataset, config.batch_size, config.negatives, config.gamma, data_rng)
        try:
            loss, grads = nce_loss(critic, batch)
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"critic diverged at step {step}: {exc}") from None
        if step == 1:
            history.record(0, loss)
        opt.step(params, grads)
        running.append(loss)
        if step % config.eval_every == 0 or step == config.steps:
            history.record(step, float(np.mean(running)))
            log.debug("critic step %d loss %.4f", step, history.losses[-1])
            if callback is not None:
                callback(step, history.losses[-1], critic)
            running = []
    return critic, history


def estimate_q(critic, states, actions, success_states) -> np.ndarray:
    """Q-values ``(1 / (1 - gamma)) mean_j exp f(s, a, s*_j)`` with ``c = 1``.

    Works for any critic exposing ``f_matrix`` and ``gamma``; the mean is
    evaluated through log-sum-exp to keep large logits from overflowing
    before the final exponentiation.
    """
    success_states = np.asarray(success_states)
    if success_states.ndim == 1 and not isinstance(critic, TabularCritic):
        success_states = success_states[None, :]  # one vector state, not a list of indices
    if len(success_states) == 0:
        raise ValueError("success set must be nonempty")
    f = critic.f_matrix(states, actions, success_states)
    log_mean = logsumexp(f, axis=1) - np.log(f.shape[1])
    log_q = log_mean - np.log1p(-critic.gamma)
    with np.errstate(over="raise"):
        try:
            q = np.exp(log_q)
        except FloatingPointError:
            raise OverflowError("Q-value overflows float64 even after log-sum-exp stabilization") from None
    if not np.all(np.isfinite(q)):
        raise OverflowError("Q-value overflows float64 even after log-sum-exp stabilization")
    return q


class TabularCritic:
    """One free logit per ``(s, a, s')`` triple; states and actions are indices or one-hot rows."""

    def __init__(self, table: np.ndarray, gamma: float):
        self.table = np.asarray(table, dtype=float)
        self.gamma = gamma

    @staticmethod
    def _idx(x):
        x = np.asarray(x)
        return np.argmax(x, axis=-1) if x.ndim >= 2 else x.astype(int)

    def f_value(self, states, actions, futures) -> np.ndarray:
        return self.table[self._idx(states), self._idx(actions), self._idx(futures)]

    def f_matrix(self, states, actions, futures) -> np.ndarray:
        s, a, sf = self._idx(states), self._idx(actions), self._idx(futures)
        return self.table[s, a][:, sf]


def fit_tabular_critic(
    pos: np.ndarray, anchor: np.ndarray, p_neg: np.ndarray, gamma: float, steps: int = 5000, lr: float = 0.1
) -> TabularCritic:
    """Full-batch Adam on the exact expected NCE loss of a tabular critic.

    ``pos[s, a, s']`` is the positive distribution, ``anchor[s, a]`` the
    anchor distribution and ``p_neg[s']`` the negative distribution.
    """
    w_pos = anchor[..., None] * pos
    w_neg = anchor[..., None] * p_neg[None, None, :]
    table = np.zeros_like(pos)
    opt = Adam([table], lr=lr)
    for _ in range(steps):
        g = -w_pos * expit(-table) + w_neg * expit(table)
        opt.step([table], [g])
    return TabularCritic(table, gamma)
