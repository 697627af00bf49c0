"""Reward-classifier baselines (ORIL with BCE, PURL with non-negative PU risk).

Both baselines share one pipeline: train a state-only reward classifier,
relabel the trajectories with ``sigmoid(logit(s_{t+1}))``, regress a
behavior Q-function onto Monte-Carlo discounted returns, then extract a
policy with the same lambda-weighted BC objective LAEO uses, with the
normalized ``Q_hat`` as the critic term. The Monte-Carlo critic stands in for
TD3+BC so that both methods stay one-step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .approx import Adam, Mlp, NonFiniteError
from .critic import TrainingDivergedError
from .dataset import SuccessSet, TrajectoryDataset
from .policy import PolicyTrainConfig, QObjective, train_policy_on_objective

KINDS = {"oril": "bce", "purl": "pu"}


@dataclass
class BaselineConfig:
    gamma: float = 0.8
    eta: float = 0.5
    batch_size: int = 256
    classifier_lr: float = 1e-3
    classifier_steps: int = 20_000
    mc_lr: float = 3e-4
    mc_steps: int = 5000
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0


class RewardClassifier:
    def __init__(self, net: Mlp, loss_kind: str = "bce", eta: float = 0.5):
        if loss_kind not in ("bce", "pu"):
            raise ValueError("loss_kind must be 'bce' or 'pu'")
        if not 0.0 < eta < 1.0:
            raise ValueError("eta must lie in (0, 1)")
        self.net, self.loss_kind, self.eta = net, loss_kind, eta

    @property
    def params(self):
        return self.net.params

    def logits(self, states) -> np.ndarray:
        return self.net(np.atleast_2d(states))[:, 0]

    def reward(self, states) -> np.ndarray:
        return expit(self.logits(states))


def _classifier_forward(clf: RewardClassifier, positives, unlabeled):
    x = np.concatenate([np.atleast_2d(positives), np.atleast_2d(unlabeled)])
    out, cache = clf.net.forward(x, return_cache=True)
    g = out[:, 0]
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite classifier logits")
    n_pos = len(np.atleast_2d(positives))
    return g[:n_pos], g[n_pos:], cache


def bce_loss(clf: RewardClassifier, positives, unlabeled):
    """Class-balanced BCE: positives labeled 1, unlabeled labeled 0."""
    g_p, g_u, cache = _classifier_forward(clf, positives, unlabeled)
    loss = 0.5 * (-np.mean(log_expit(g_p)) - np.mean(log_expit(-g_u)))
    d_p = -0.5 * expit(-g_p) / len(g_p)
    d_u = 0.5 * expit(g_u) / len(g_u)
    grads, _ = clf.net.backward(cache, np.concatenate([d_p, d_u])[:, None])
    return float(loss), grads


def pu_loss(clf: RewardClassifier, positives, unlabeled, eta: float | None = None):
    """Non-negative PU risk ``eta E_P[l(g,1)] + max(0, E_U[l(g,0)] - eta E_P[l(g,0)])``.

    Returns ``(loss, grads, clamped)``; when the correction term is clamped
    its gradient is dropped.
    """
    eta = clf.eta if eta is None else eta
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    g_p, g_u, cache = _classifier_forward(clf, positives, unlabeled)
    n_p, n_u = len(g_p), len(g_u)
    pos_risk = eta * np.mean(-log_expit(g_p))
    correction = np.mean(-log_expit(-g_u)) - eta * np.mean(-log_expit(-g_p))
    clamped = correction < 0.0
    d_p = -eta * expit(-g_p) / n_p
    d_u = np.zeros(n_u)
    if not clamped:
        d_p = d_p - eta * expit(g_p) / n_p
        d_u = expit(g_u) / n_u
    loss = pos_risk + max(0.0, correction)
    grads, _ = clf.net.backward(cache, np.concatenate([d_p, d_u])[:, None])
    return float(loss), grads, bool(clamped)


def train_classifier(positives, unlabeled_states, loss_kind: str, config: BaselineConfig, rng: np.random.Generator) -> RewardClassifier:
    positives = np.atleast_2d(positives)
    dim = positives.shape[1]
    clf = RewardClassifier(Mlp.initialized([dim, *config.hidden, 1], rng), loss_kind, config.eta)
    opt = Adam(clf.params, lr=config.classifier_lr)
    B = config.batch_size
    for step in range(config.classifier_steps):
        p = positives[rng.integers(len(positives), size=B)]
        u = unlabeled_states[rng.integers(len(unlabeled_states), size=B)]
        try:
            if loss_kind == "bce":
                _, grads = bce_loss(clf, p, u)
            else:
                _, grads, _ = pu_loss(clf, p, u)
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"classifier diverged at step {step}: {exc}") from None
        opt.step(clf.params, grads)
    return clf


@dataclass
class LabeledDataset:
    dataset: TrajectoryDataset
    rewards: np.ndarray  # (N, T): reward of s_{t+1}


def relabel_rewards(clf: RewardClassifier, dataset: TrajectoryDataset) -> LabeledDataset:
    nxt = dataset.states[:, 1:]
    N, T, D = nxt.shape
    if clf.net.in_dim != D:
        raise ValueError(f"classifier expects {clf.net.in_dim}-dim states, dataset has {D}")
    rewards = clf.reward(nxt.reshape(N * T, D)).reshape(N, T)
    return LabeledDataset(dataset, rewards)


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """``G_t = sum_{k >= 0} gamma^k r_{t+k}`` along each row, by a backward pass."""
    rewards = np.atleast_2d(rewards)
    G = np.zeros_like(rewards, dtype=float)
    acc = np.zeros(len(rewards))
    for t in reversed(range(rewards.shape[1])):
        acc = rewards[:, t] + gamma * acc
        G[:, t] = acc
    return G


class McCritic:
    """Behavior Q-function regressed on Monte-Carlo returns; input is ``(s, a / action_scale)``."""

    def __init__(self, net: Mlp, state_dim: int, action_scale: float = 1.0):
        self.net, self.state_dim, self.action_scale = net, state_dim, action_scale

    def inputs(self, states, actions):
        return np.concatenate([np.atleast_2d(states), np.atleast_2d(actions) / self.action_scale], axis=1)

    def q(self, states, actions) -> np.ndarray:
        return self.net(self.inputs(states, actions))[:, 0]


def mc_regression_loss(critic: McCritic, states, actions, targets):
    out, cache = critic.net.forward(critic.inputs(states, actions), return_cache=True)
    err = out[:, 0] - targets
    if not np.all(np.isfinite(err)):
        raise NonFiniteError("non-finite Q regression residuals")
    loss = float(np.mean(err**2))
    grads, _ = critic.net.backward(cache, (2.0 / len(err) * err)[:, None])
    return loss, grads


def train_mc_critic(labeled: LabeledDataset, gamma: float, config: BaselineConfig, rng: np.random.Generator, action_scale: float = 1.0) -> McCritic:
    ds = labeled.dataset
    targets = discounted_returns(labeled.rewards, gamma).ravel()
    states, actions = ds.transitions()
    critic = McCritic(Mlp.initialized([ds.state_dim + ds.action_dim, *config.hidden, 1], rng), ds.state_dim, action_scale)
    opt = Adam(critic.net.params, lr=config.mc_lr)
    for step in range(config.mc_steps):
        idx = rng.integers(len(states), size=config.batch_size)
        try:
            _, grads = mc_regression_loss(critic, states[idx], actions[idx], targets[idx])
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"Q regression diverged at step {step}: {exc}") from None
        opt.step(critic.net.params, grads)
    return critic


def train_baseline_policy(
    dataset: TrajectoryDataset,
    success_set: SuccessSet,
    kind: str,
    config: BaselineConfig,
    policy_config: PolicyTrainConfig,
    action_scale: float = 1.0,
    callback=None,
):
    """Classifier -> relabel -> Monte-Carlo Q -> lambda-BC policy. Returns ``(policy, history, parts)``."""
    if kind not in KINDS:
        raise ValueError(f"baseline kind must be one of {tuple(KINDS)}")
    rng = np.random.default_rng(config.seed)
    clf_rng, mc_rng = (np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(2))
    clf = train_classifier(success_set.states, dataset.all_states(), KINDS[kind], config, clf_rng)
    labeled = relabel_rewards(clf, dataset)
    mc = train_mc_critic(labeled, config.gamma, config, mc_rng, action_scale)
    objective = QObjective(mc.net, dataset.state_dim, action_scale)
    policy, history = train_policy_on_objective(dataset, objective, policy_config, action_scale, callback)
    return policy, history, {"classifier": clf, "labeled": labeled, "mc_critic": mc}
