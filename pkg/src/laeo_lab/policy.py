"""Policy extraction against a frozen critic, with behavioral-cloning regularization."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .approx import Adam, Mlp, NonFiniteError, load_checkpoint, mlp_from_tensors, mlp_tensors, save_checkpoint
from .critic import ContrastiveCritic, TrainingDivergedError
from .dataset import SuccessSet, TrajectoryDataset

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
SQUASH_EPS = 1e-6
MODES = ("exp_mean", "log_mean_exp", "jensen_mean_f")
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class PolicyTrainConfig:
    lam: float = 0.5
    objective_mode: str = "jensen_mean_f"
    batch_size: int = 256
    lr: float = 1e-3
    steps: int = 10_000
    seed: int = 0
    eval_every: int = 1000
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.objective_mode not in MODES:
            raise ValueError(f"objective_mode must be one of {MODES}")


class GaussianPolicy:
    """Diagonal Gaussian on a pre-squash variable, squashed by tanh and scaled to the action box.

    The network outputs ``(mean, raw)`` per action dimension and
    ``log_std = LOG_STD_MIN + (LOG_STD_MAX - LOG_STD_MIN) * (tanh(raw) + 1) / 2``,
    a smooth clamp to ``[-5, 2]``.
    """

    def __init__(self, net: Mlp, action_dim: int, action_scale: float = 1.0, squash: bool = True):
        if net.out_dim != 2 * action_dim:
            raise ValueError("policy network must output mean and log-std per action dim")
        self.net = net
        self.action_dim = action_dim
        self.action_scale = float(action_scale)
        self.squash = squash

    @classmethod
    def create(cls, state_dim, action_dim, rng, hidden=(64, 64), action_scale=1.0, squash=True):
        return cls(Mlp.initialized([state_dim, *hidden, 2 * action_dim], rng), action_dim, action_scale, squash)

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    def distribution(self, states, return_cache=False):
        out, cache = self.net.forward(np.atleast_2d(states), return_cache=True)
        A = self.action_dim
        mean, raw = out[:, :A], out[:, A:]
        log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (np.tanh(raw) + 1.0)
        if return_cache:
            return mean, log_std, (cache, raw)
        return mean, log_std

    def _to_pre_squash(self, actions):
        a = np.atleast_2d(np.asarray(actions, dtype=float)) / self.action_scale
        if not self.squash:
            return a, np.zeros(len(a))
        if np.any(np.abs(a) > 1.0 + 1e-9):
            raise ValueError("action outside the policy's action box")
        u = np.clip(a, -1.0 + SQUASH_EPS, 1.0 - SQUASH_EPS)
        return np.arctanh(u), np.sum(np.log1p(-u * u), axis=-1)

    def log_prob(self, states, actions) -> np.ndarray:
        mean, log_std = self.distribution(states)
        z, log_det = self._to_pre_squash(actions)
        std_z = (z - mean) / np.exp(log_std)
        logp = np.sum(-0.5 * std_z**2 - log_std - HALF_LOG_2PI, axis=-1)
        return logp - log_det - self.action_dim * np.log(self.action_scale)

    def squash_noise(self, mean, log_std, noise):
        z = mean + np.exp(log_std) * noise
        u = np.clip(np.tanh(z), -1.0, 1.0) if self.squash else z
        return u * self.action_scale

    def sample(self, states, rng: np.random.Generator, deterministic: bool = False) -> np.ndarray:
        mean, log_std = self.distribution(states)
        noise = np.zeros_like(mean) if deterministic else rng.standard_normal(mean.shape)
        return self.squash_noise(mean, log_std, noise)

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"sizes": self.net.sizes, "action_dim": self.action_dim, "action_scale": self.action_scale,
                "squash": self.squash, **(extra or {})}
        save_checkpoint(path, mlp_tensors("policy", self.net), meta)

    @classmethod
    def load(cls, path) -> "GaussianPolicy":
        tensors, meta = load_checkpoint(path)
        net = mlp_from_tensors("policy", meta["sizes"], tensors)
        return cls(net, meta["action_dim"], meta["action_scale"], meta["squash"])


# --- critic terms -----------------------------------------------------------------


class LaeoObjective:
    """Critic term built from the contrastive model and the success examples.

    ``value_and_grad`` returns the batch-level term (to be maximized) and its
    gradient w.r.t. the environment actions.
    """

    def __init__(self, critic: ContrastiveCritic, success_states, mode: str = "jensen_mean_f"):
        if mode not in MODES:
            raise ValueError(f"objective_mode must be one of {MODES}")
        success_states = np.atleast_2d(np.asarray(success_states, dtype=float))
        if len(success_states) == 0:
            raise ValueError("success set must be nonempty")
        self.critic = critic
        self.mode = mode
        self.psi_star = critic.embed_future(success_states)
        self.psi_bar = self.psi_star.mean(axis=0)

    def logits(self, states, actions) -> np.ndarray:
        return self.critic.embed_sa(states, actions) @ self.psi_star.T

    def value_and_grad(self, states, actions):
        critic = self.critic
        phi_out, cache = critic.phi.forward(critic.sa_input(states, actions), return_cache=True)
        B = len(phi_out)
        if self.mode == "jensen_mean_f":
            f = phi_out @ self.psi_bar
            if not np.all(np.isfinite(f)):
                raise NonFiniteError("non-finite critic values")
            value = float(f.mean())
            g_phi = np.broadcast_to(self.psi_bar / B, phi_out.shape)
        else:
            F = phi_out @ self.psi_star.T
            if not np.all(np.isfinite(F)):
                raise NonFiniteError("non-finite critic values")
            if self.mode == "exp_mean":
                E = np.exp(F)
                value = float(E.mean())
                g_phi = (E @ self.psi_star) / F.size
            else:
                value = float(logsumexp(F) - np.log(F.size))
                W = np.exp(F - logsumexp(F))
                g_phi = W @ self.psi_star
        _, g_in = critic.phi.backward(cache, np.ascontiguousarray(g_phi))
        return value, g_in[:, critic.state_dim :] / critic.action_scale


class QObjective:
    """Critic term from an explicit ``Q(s, a)`` network, normalized by the batch mean ``|Q|``."""

    def __init__(self, q_net: Mlp, state_dim: int, action_scale: float = 1.0, normalize: bool = True):
        self.q_net = q_net
        self.state_dim = state_dim
        self.action_scale = action_scale
        self.normalize = normalize

    def value_and_grad(self, states, actions):
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions) / self.action_scale], axis=1)
        q, cache = self.q_net.forward(x, return_cache=True)
        if not np.all(np.isfinite(q)):
            raise NonFiniteError("non-finite Q values")
        B = len(q)
        scale = max(float(np.mean(np.abs(q))), 1e-6) if self.normalize else 1.0
        value = float(q.mean()) / scale
        _, g_in = self.q_net.backward(cache, np.full_like(q, 1.0 / (B * scale)))
        return value, g_in[:, self.state_dim :] / self.action_scale


# --- losses -------------------------------------------------------------------------


def policy_loss(policy: GaussianPolicy, objective, states, data_actions, lam: float, noise: np.ndarray):
    """``-(1 - lam) * critic_term - lam * mean log pi(a_data | s)`` and its parameter gradients.

    The critic term is evaluated at reparameterized actions
    ``scale * tanh(mean + std * noise)``; the critic itself stays frozen.
    """
    mean, log_std, (cache, raw) = policy.distribution(states, return_cache=True)
    std = np.exp(log_std)
    B = len(mean)
    g_mean = np.zeros_like(mean)
    g_log_std = np.zeros_like(mean)
    loss = 0.0
    info = {}
    if lam < 1.0:
        z = mean + std * noise
        u = np.tanh(z) if policy.squash else z
        actions = u * policy.action_scale
        term, g_a = objective.value_and_grad(states, actions)
        g_u = -(1.0 - lam) * g_a * policy.action_scale
        g_z = g_u * (1.0 - u * u) if policy.squash else g_u
        g_mean += g_z
        g_log_std += g_z * noise * std
        loss -= (1.0 - lam) * term
        info["critic_term"] = term
    if lam > 0.0:
        z_d, log_det = policy._to_pre_squash(data_actions)
        diff = (z_d - mean) / std
        logp = np.sum(-0.5 * diff**2 - log_std - HALF_LOG_2PI, axis=-1) - log_det - policy.action_dim * np.log(policy.action_scale)
        loss -= lam * float(logp.mean())
        g_mean += -lam / B * diff / std
        g_log_std += -lam / B * (diff**2 - 1.0)
        info["log_prob"] = float(logp.mean())
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite policy loss")
    g_raw = g_log_std * 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - np.tanh(raw) ** 2)
    grads, _ = policy.net.backward(cache, np.concatenate([g_mean, g_raw], axis=1))
    return float(loss), grads, info


def bc_loss(policy: GaussianPolicy, states, data_actions):
    return policy_loss(policy, None, states, data_actions, 1.0, None)


# --- training -----------------------------------------------------------------------


def train_policy_on_objective(dataset: TrajectoryDataset, objective, config: PolicyTrainConfig, action_scale: float, callback=None):
    rng = np.random.default_rng(config.seed)
    init_rng, data_rng = (np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(2))
    policy = GaussianPolicy.create(dataset.state_dim, dataset.action_dim, init_rng, config.hidden, action_scale)
    states, actions = dataset.transitions()
    params = policy.params
    opt = Adam(params, lr=config.lr)
    history = []
    running = []
    for step in range(1, config.steps + 1):
        idx = data_rng.integers(len(states), size=config.batch_size)
        noise = data_rng.standard_normal((config.batch_size, dataset.action_dim))
        try:
            loss, grads, _ = policy_loss(policy, objective, states[idx], actions[idx], config.lam, noise)
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"policy diverged at step {step}: {exc}") from None
        opt.step(params, grads)
        running.append(loss)
        if step % config.eval_every == 0 or step == config.steps:
            history.append((step, float(np.mean(running))))
            if callback is not None:
                callback(step, history[-1][1], policy)
            running = []
    return policy, history


def train_policy(dataset, success_set: SuccessSet, critic: ContrastiveCritic, config: PolicyTrainConfig, action_scale: float = 1.0, callback=None):
    """LAEO policy extraction: Adam on ``policy_loss`` with the contrastive critic term."""
    objective = LaeoObjective(critic, success_set.states, config.objective_mode) if config.lam < 1.0 else None
    return train_policy_on_objective(dataset, objective, config, action_scale, callback)


def bc_baseline(dataset, config: PolicyTrainConfig, action_scale: float = 1.0, callback=None):
    """Behavioral cloning: :func:`train_policy` with ``lam = 1`` (no critic)."""
    cfg = PolicyTrainConfig(**{**config.__dict__, "lam": 1.0})
    return train_policy_on_objective(dataset, None, cfg, action_scale, callback)


def evaluate_policy(policy: GaussianPolicy, env, episodes: int, seed: int, deterministic: bool = False) -> float:
    """Fraction of episodes that visit a success state (vectorized rollout)."""
    rng = np.random.default_rng(seed)
    s = env.reset_batch(rng, episodes)
    success = np.zeros(episodes, dtype=bool)
    for _ in range(env.horizon):
        a = policy.sample(env.observe(s, rng), rng, deterministic)
        s, hit = env.step(s, a)
        success |= hit
    return float(success.mean())


# --- discrete surrogate -----------------------------------------------------------


class DiscretePolicy:
    """Softmax policy over a finite action set, used for tabular surrogates."""

    def __init__(self, net: Mlp):
        self.net = net

    @classmethod
    def create(cls, state_dim, n_actions, rng, hidden=()):
        return cls(Mlp.initialized([state_dim, *hidden, n_actions], rng))

    @property
    def params(self):
        return self.net.params

    def probs(self, states) -> np.ndarray:
        return softmax(self.net(np.atleast_2d(states)), axis=-1)


def discrete_policy_loss(policy: DiscretePolicy, f_values: np.ndarray, states, data_actions, lam: float, mode: str):
    """Exact-expectation analogue of :func:`policy_loss` for a softmax policy.

    ``f_values[i, a, j]`` holds ``f(s_i, a, s*_j)``; ``data_actions`` are
    integer action indices.
    """
    if mode not in MODES:
        raise ValueError(f"objective_mode must be one of {MODES}")
    logits, cache = policy.net.forward(np.atleast_2d(states), return_cache=True)
    B, A = logits.shape
    pi = softmax(logits, axis=-1)
    g_logits = np.zeros_like(logits)
    loss = 0.0
    if lam < 1.0:
        if mode == "jensen_mean_f":
            v = f_values.mean(axis=-1)
        else:
            v = np.exp(f_values).mean(axis=-1)
        per_state = np.sum(pi * v, axis=-1)
        dpi = pi * (v - per_state[:, None])  # d per_state / d logits
        if mode == "log_mean_exp":
            total = per_state.mean()
            term = np.log(total)
            g_logits -= (1.0 - lam) * dpi / (B * total)
        else:
            term = per_state.mean()
            g_logits -= (1.0 - lam) * dpi / B
        loss -= (1.0 - lam) * term
    if lam > 0.0:
        data_actions = np.asarray(data_actions, dtype=int)
        logp = np.log(pi[np.arange(B), data_actions])
        loss -= lam * logp.mean()
        onehot = np.eye(A)[data_actions]
        g_logits -= lam / B * (onehot - pi)
    grads, _ = policy.net.backward(cache, g_logits)
    return float(loss), grads
