import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laeo_lab.dataset import (
    DatasetFormatError,
    SuccessSet,
    Trajectory,
    TrajectoryDataset,
    UnsupportedVersionError,
    collect_gridworld,
    collect_pointmass,
    empirical_state_density,
    harvest_success_examples,
    load_dataset,
    load_success_set,
    one_hot_binning,
    sample_batch,
    sample_future_state,
    save_dataset,
    save_success_set,
    truncated_geometric,
)
from laeo_lab.envs import BehaviorPolicy, GridBehavior, GridWorldMDP, make_env


def line_traj(T=30, D=1):
    states = np.arange(T + 1, dtype=float)[:, None].repeat(D, axis=1)
    return Trajectory(states, np.zeros((T, 1)), np.zeros(T, dtype=bool))


def grid_data(n=300, seed=0, eps=1.0):
    env = GridWorldMDP(5, 5, slip_prob=0.1)
    return env, collect_gridworld(env, GridBehavior(eps).probs(env), n, seed)


@pytest.fixture(scope="module")
def reach_data():
    return collect_pointmass(make_env("reach2d"), BehaviorPolicy(noise_std=2.0, squash=True), 60, 0, "reach2d")


class TestFutureSampler:
    def test_small_gamma_concentrates_at_zero(self):
        rng = np.random.default_rng(0)
        traj = line_traj()
        ks = [sample_future_state(traj, 3, 0.01, rng)[1] for _ in range(10_000)]
        p0 = 1.0 / np.sum(0.01 ** np.arange(28))
        assert p0 >= 0.99
        # p0 sits only ~1e-4 above 0.99, so allow three standard errors of sampling noise
        assert np.mean(np.asarray(ks) == 0) >= 0.99 - 3 * np.sqrt(p0 * (1 - p0) / 10_000)

    def test_half_gamma_ratio(self):
        k = truncated_geometric(np.random.default_rng(1), 0.5, 25, size=100_000)
        counts = np.bincount(k, minlength=8)
        for j in range(6):
            assert abs(counts[j] / counts[j + 1] - 2.0) <= 0.2

    def test_suffix_length_one(self):
        rng = np.random.default_rng(2)
        traj = line_traj(T=10)
        ks = np.array([sample_future_state(traj, 9, 0.6, rng)[1] for _ in range(20_000)])
        assert set(np.unique(ks)) == {0, 1}
        ratio = np.mean(ks == 1) / np.mean(ks == 0)
        assert ratio == pytest.approx(0.6, abs=0.04)

    def test_returns_state_at_offset(self):
        traj = line_traj()
        s, k = sample_future_state(traj, 4, 0.9, np.random.default_rng(3))
        assert s[0] == 4 + k

    @pytest.mark.parametrize("t", [-1, 30])
    def test_bad_index(self, t):
        with pytest.raises(IndexError):
            sample_future_state(line_traj(), t, 0.9, np.random.default_rng(0))

    def test_bad_gamma(self):
        with pytest.raises(ValueError):
            sample_future_state(line_traj(), 0, 1.0, np.random.default_rng(0))

    @pytest.mark.parametrize("gamma,L", [(0.9, 7), (0.5, 3), (0.97, 20)])
    def test_truncated_geometric_frequencies(self, gamma, L):
        n = 100_000
        k = truncated_geometric(np.random.default_rng(4), gamma, L, size=n)
        p = gamma ** np.arange(L + 1)
        p /= p.sum()
        freq = np.bincount(k, minlength=L + 1) / n
        se = np.sqrt(p * (1 - p) / n)
        assert np.all(np.abs(freq - p) <= 3 * se + 1e-12)


class TestBatch:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), B=st.integers(2, 64), K=st.integers(1, 4))
    def test_batch_invariants(self, reach_data, seed, B, K):
        batch = sample_batch(reach_data, B, K, 0.8, np.random.default_rng(seed))
        assert batch.negatives.shape == (B, K, reach_data.state_dim)
        assert np.all(batch.offsets >= 0)
        assert np.all(batch.times + batch.offsets <= reach_data.horizon)
        np.testing.assert_array_equal(batch.positives, reach_data.states[batch.traj_ids, batch.times + batch.offsets])
        np.testing.assert_array_equal(batch.states, reach_data.states[batch.traj_ids, batch.times])

    def test_paper_batch_size(self, reach_data):
        batch = sample_batch(reach_data, 1024, 1, 0.8, np.random.default_rng(0))
        assert len(batch.states) == 1024

    def test_negative_marginal_matches_density(self):
        env, ds = grid_data(200)
        rng = np.random.default_rng(5)
        counts = np.zeros(25)
        for _ in range(100):
            b = sample_batch(ds, 1000, 1, 0.9, rng)
            counts += np.bincount(np.argmax(b.negatives[:, 0], axis=1), minlength=25)
        tv = 0.5 * np.abs(counts / counts.sum() - empirical_state_density(ds, one_hot_binning(25))).sum()
        assert tv <= 0.02

    def test_batch_one_with_negatives(self, reach_data):
        with pytest.raises(ValueError):
            sample_batch(reach_data, 1, 1, 0.8, np.random.default_rng(0))


class TestDensity:
    def test_single_state(self):
        states = np.tile(np.eye(4)[2], (1, 6, 1))
        ds = TrajectoryDataset(states, np.zeros((1, 5, 1)), np.zeros((1, 5)), "x")
        np.testing.assert_array_equal(empirical_state_density(ds, one_hot_binning(4)), np.eye(4)[2])

    def test_uniform_random_matches_stationary(self):
        env = GridWorldMDP(5, 5, slip_prob=0.1, horizon=5000)
        ds = collect_gridworld(env, GridBehavior(1.0).probs(env), 1, 0)
        P = np.einsum("sa,sat->st", GridBehavior(1.0).probs(env), env.transition_tensor())
        pi = np.full(25, 1 / 25)
        for _ in range(2000):  # power iteration
            pi = pi @ P
        tv = 0.5 * np.abs(empirical_state_density(ds, one_hot_binning(25)) - pi).sum()
        assert tv <= 0.05

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 20))
    def test_normalized(self, seed, n):
        _, ds = grid_data(n, seed)
        assert abs(empirical_state_density(ds, one_hot_binning(25)).sum() - 1.0) <= 1e-12


class TestSerialization:
    def test_round_trip(self, tmp_path, reach_data):
        save_dataset(reach_data, tmp_path / "d.jsonl")
        assert load_dataset(tmp_path / "d.jsonl") == reach_data

    def test_success_round_trip(self, tmp_path, reach_data):
        ss = harvest_success_examples(reach_data, 7, np.random.default_rng(0))
        save_success_set(ss, tmp_path / "s.jsonl")
        assert load_success_set(tmp_path / "s.jsonl") == ss

    def test_truncated_file(self, tmp_path, reach_data):
        path = tmp_path / "d.jsonl"
        save_dataset(reach_data, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:10]) + "\n")
        with pytest.raises(DatasetFormatError, match="line"):
            load_dataset(path)

    def test_cut_mid_record(self, tmp_path, reach_data):
        path = tmp_path / "d.jsonl"
        save_dataset(reach_data, path)
        text = path.read_text()
        path.write_text(text[: len(text) // 2])
        with pytest.raises(DatasetFormatError, match="line"):
            load_dataset(path)

    def test_version_mismatch(self, tmp_path, reach_data):
        path = tmp_path / "d.jsonl"
        save_dataset(reach_data, path)
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        header["version"] = 99
        path.write_text("\n".join([json.dumps(header), *lines[1:]]) + "\n")
        with pytest.raises(UnsupportedVersionError):
            load_dataset(path)


class TestHarvest:
    def test_exact_count_and_success(self, reach_data):
        env = make_env("reach2d")
        ss = harvest_success_examples(reach_data, 1, np.random.default_rng(0))
        assert len(ss) == 1
        assert env.is_success(ss.states).all()

    def test_no_successes(self):
        ds = TrajectoryDataset(np.zeros((2, 3, 2)), np.zeros((2, 2, 2)), np.zeros((2, 2)), "x")
        with pytest.raises(ValueError):
            harvest_success_examples(ds, 3, np.random.default_rng(0))

    def test_success_set_nonempty(self):
        with pytest.raises(ValueError):
            SuccessSet(np.zeros((0, 2)))


def test_trajectory_length_validation():
    with pytest.raises(ValueError):
        Trajectory(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3))


def test_success_rate_counts_any_step():
    flags = np.array([[False, True, False], [False, False, False]])
    ds = TrajectoryDataset(np.zeros((2, 4, 1)), np.zeros((2, 3, 1)), flags, "x")
    assert ds.success_rate() == 0.5
