import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laeo_lab.approx import Mlp
from laeo_lab.baselines import (
    BaselineConfig,
    RewardClassifier,
    bce_loss,
    discounted_returns,
    pu_loss,
    relabel_rewards,
    train_baseline_policy,
    train_classifier,
    train_mc_critic,
)
from laeo_lab.dataset import collect_gridworld, collect_pointmass, harvest_success_examples
from laeo_lab.envs import BehaviorPolicy, GridBehavior, GridWorldMDP, make_env
from laeo_lab.oracle import TabularMDP, exact_q
from laeo_lab.policy import PolicyTrainConfig

LN2 = np.log(2.0)


def linear_clf(w, b, kind="pu", eta=0.5):
    net = Mlp([1, 1])
    net.params[0][:] = w
    net.params[1][:] = b
    return RewardClassifier(net, kind, eta)


def bce_terms(g, label):
    return np.logaddexp(0.0, -g) if label else np.logaddexp(0.0, g)


@pytest.fixture(scope="module")
def grid():
    env = GridWorldMDP(5, 5, slip_prob=0.1)
    behavior = GridBehavior(1.0).probs(env)
    return env, behavior, collect_gridworld(env, behavior, 1000, 0)


class TestLosses:
    def test_bce_zero_logit(self):
        loss, _ = bce_loss(linear_clf(0.0, 0.0, "bce"), np.ones((4, 1)), np.zeros((6, 1)))
        assert loss == pytest.approx(LN2, abs=1e-9)

    def test_pu_zero_logit(self):
        loss, _, clamped = pu_loss(linear_clf(0.0, 0.0), np.ones((4, 1)), np.zeros((6, 1)), eta=0.5)
        assert loss == pytest.approx(LN2, abs=1e-9)
        assert not clamped

    def test_pu_clamp_construction(self):
        # positives sit at logit 0, unlabeled points are confidently negative
        clf = linear_clf(20.0, 0.0)
        pos, unl = np.zeros((5, 1)), np.full((7, 1), -2.0)
        loss, grads, clamped = pu_loss(clf, pos, unl)
        assert clamped
        assert loss == pytest.approx(0.5 * LN2, abs=1e-12)
        # only the positive term contributes: dL/db = -eta * mean sigmoid(-g) = -0.25
        assert grads[1][0] == pytest.approx(-0.25, abs=1e-12)

    def test_unlabeled_equal_positive_never_clamps(self):
        x = np.linspace(-1, 1, 9)[:, None]
        assert not pu_loss(linear_clf(30.0, -5.0), x, x)[2]

    @settings(max_examples=100, deadline=None)
    @given(w=st.floats(-5, 5), b=st.floats(-5, 5), eta=st.floats(0.05, 0.95), seed=st.integers(0, 1000))
    def test_pu_lower_bound(self, w, b, eta, seed):
        rng = np.random.default_rng(seed)
        pos, unl = rng.normal(size=(6, 1)), rng.normal(size=(9, 1))
        loss, _, clamped = pu_loss(linear_clf(w, b), pos, unl, eta)
        floor = eta * bce_terms(w * pos[:, 0] + b, True).mean()
        assert loss >= floor - 1e-12
        if clamped:
            assert loss == pytest.approx(floor, abs=1e-12)

    @pytest.mark.parametrize("eta", [0.0, 1.0])
    def test_eta_range(self, eta):
        with pytest.raises(ValueError):
            pu_loss(linear_clf(0.0, 0.0), np.ones((1, 1)), np.ones((1, 1)), eta)

    def test_non_finite_logits(self):
        with pytest.raises(FloatingPointError):
            bce_loss(linear_clf(np.nan, 0.0, "bce"), np.ones((1, 1)), np.ones((1, 1)))


class TestClassifiers:
    def test_separable_blobs(self):
        rng = np.random.default_rng(0)
        pos = rng.normal(size=(500, 2)) * 0.3 + 2.0
        neg = rng.normal(size=(500, 2)) * 0.3 - 2.0
        clf = train_classifier(pos, neg, "bce", BaselineConfig(classifier_steps=500, hidden=(16,)), rng)
        acc = 0.5 * ((clf.reward(pos) > 0.5).mean() + (clf.reward(neg) < 0.5).mean())
        assert acc >= 0.99

    def test_pu_not_worse_than_bce_on_mixture(self):
        accs = {"bce": [], "pu": []}
        for seed in range(5):
            rng = np.random.default_rng(seed)
            pos = rng.normal(size=(1000, 2)) + 1.0
            hidden = rng.random(1000) < 0.5
            unl = np.where(hidden[:, None], rng.normal(size=(1000, 2)) + 1.0, rng.normal(size=(1000, 2)) - 1.0)
            truth = rng.random(4000) < 0.5
            test = np.where(truth[:, None], rng.normal(size=(4000, 2)) + 1.0, rng.normal(size=(4000, 2)) - 1.0)
            for kind in accs:
                clf = train_classifier(pos, unl, kind, BaselineConfig(classifier_steps=2000, hidden=(16,)), np.random.default_rng(seed))
                accs[kind].append(np.mean((clf.reward(test) > 0.5) == truth))
        assert np.mean(accs["pu"]) >= np.mean(accs["bce"])


class TestRelabel:
    def test_zero_logit_gives_half(self, grid):
        *_, ds = grid
        labeled = relabel_rewards(RewardClassifier(Mlp([25, 1])), ds)
        np.testing.assert_array_equal(labeled.rewards, 0.5)
        assert labeled.rewards.shape == (len(ds.states), ds.horizon)

    def test_pure_function_of_state(self, grid):
        *_, ds = grid
        clf = RewardClassifier(Mlp.initialized([25, 8, 1], np.random.default_rng(0)))
        labeled = relabel_rewards(clf, ds)
        cells = np.argmax(ds.states[:, 1:], axis=-1)
        for c in range(25):
            vals = labeled.rewards[cells == c]
            assert np.ptp(vals) == 0.0

    def test_does_not_modify_dataset(self, grid):
        *_, ds = grid
        before = ds.states.copy()
        relabel_rewards(RewardClassifier(Mlp.initialized([25, 1], np.random.default_rng(0))), ds)
        np.testing.assert_array_equal(ds.states, before)

    def test_dim_mismatch(self, grid):
        *_, ds = grid
        with pytest.raises(ValueError):
            relabel_rewards(RewardClassifier(Mlp([3, 1])), ds)

    def test_goal_reward_exceeds_rest(self, grid):
        env, _, ds = grid
        clf = train_classifier(np.eye(25)[[env.goal_cell]], ds.all_states(), "bce",
                               BaselineConfig(classifier_steps=500), np.random.default_rng(0))
        r = clf.reward(np.eye(25))
        assert r[env.goal_cell] - np.delete(r, env.goal_cell).mean() >= 0.3


class TestMonteCarlo:
    @pytest.mark.parametrize("gamma", [0.5, 0.8, 0.99])
    def test_constant_reward(self, gamma):
        H, c0 = 12, 0.7
        G = discounted_returns(np.full((1, H), c0), gamma)[0]
        t = np.arange(H)
        np.testing.assert_allclose(G, c0 * (1 - gamma ** (H - t)) / (1 - gamma), rtol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), gamma=st.floats(0.0, 0.99))
    def test_backward_equals_forward(self, seed, gamma):
        r = np.random.default_rng(seed).random((3, 9))
        brute = np.array([[sum(gamma**k * row[t + k] for k in range(9 - t)) for t in range(9)] for row in r])
        np.testing.assert_allclose(discounted_returns(r, gamma), brute, rtol=1e-12, atol=1e-15)

    def test_fitted_q_matches_oracle(self, grid):
        env, behavior, ds = grid
        gamma = 0.8
        cfg = BaselineConfig(classifier_steps=500, mc_steps=3000, mc_lr=1e-3, gamma=gamma)
        rng = np.random.default_rng(0)
        clf = train_classifier(np.eye(25)[[env.goal_cell]], ds.all_states(), "bce", cfg, rng)
        mc = train_mc_critic(relabel_rewards(clf, ds), gamma, cfg, rng)
        r = clf.reward(np.eye(25))
        mdp = TabularMDP(env.transition_tensor(), behavior, env.initial_distribution(), gamma)
        # targets start at r(s_{t+1}), the oracle's Q starts at r(s_t)
        oracle = (exact_q(mdp, r) - r[:, None]) / gamma
        fitted = np.stack([mc.q(np.eye(25), np.repeat(np.eye(4)[[a]], 25, 0)) for a in range(4)], axis=1)
        assert np.abs(fitted - oracle).mean() <= 0.1


@pytest.fixture(scope="module")
def reach():
    ds = collect_pointmass(make_env("reach2d"), BehaviorPolicy(noise_std=2.5, squash=True), 40, 0, "reach2d")
    return ds, harvest_success_examples(ds, 10, np.random.default_rng(0))


class TestPipeline:
    @pytest.mark.parametrize("kind", ["oril", "purl"])
    def test_deterministic(self, reach, kind):
        ds, ss = reach
        cfg = BaselineConfig(classifier_steps=100, mc_steps=100)
        pcfg = PolicyTrainConfig(steps=100, eval_every=50)
        p1, h1, _ = train_baseline_policy(ds, ss, kind, cfg, pcfg, 0.05)
        p2, h2, _ = train_baseline_policy(ds, ss, kind, cfg, pcfg, 0.05)
        assert h1 == h2
        for a, b in zip(p1.params, p2.params):
            np.testing.assert_array_equal(a, b)

    def test_unknown_kind(self, reach):
        ds, ss = reach
        with pytest.raises(ValueError):
            train_baseline_policy(ds, ss, "gail", BaselineConfig(), PolicyTrainConfig(), 0.05)

