"""End-to-end pipelines used by the CLI and the acceptance suite.

Every artifact is a pure function of ``(config, seed)``. Trained critics
and finished runs are cached on disk under a hash of everything they
depend on, so sweeps that share a critic (for example the success-example
axis) train it once.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .approx import Adam
from .baselines import train_baseline_policy
from .config import QUALITY_BANDS, ExperimentConfig
from .critic import ContrastiveCritic, TrainingDivergedError, train_critic
from .dataset import (
    SuccessSet,
    TrajectoryDataset,
    collect_gridworld,
    collect_pointmass,
    dataset_path_pair,
    harvest_success_examples,
    load_dataset,
    load_success_set,
    save_dataset,
    save_success_set,
)
from .envs import BehaviorPolicy, GridBehavior, GridWorldMDP, make_env
from .policy import DiscretePolicy, GaussianPolicy, bc_baseline, discrete_policy_loss, evaluate_policy, train_policy

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "loss", "eval_success_rate", "wall_clock_s", "seed", "method", "env_id")
EVAL_SEED_OFFSET = 10_000


class CalibrationError(RuntimeError):
    pass


def action_scale(env) -> float:
    return 1.0 if isinstance(env, GridWorldMDP) else float(env.action_high)


def eval_seed(seed: int) -> int:
    return EVAL_SEED_OFFSET + seed


# --- data -------------------------------------------------------------------------


def collect(env_id: str, n: int, noise: float, seed: int) -> TrajectoryDataset:
    env = make_env(env_id)
    if isinstance(env, GridWorldMDP):
        # for the gridworld ``noise`` is the epsilon of the epsilon-greedy behavior
        return collect_gridworld(env, GridBehavior(min(max(noise, 0.0), 1.0)).probs(env), n, seed, env_id)
    return collect_pointmass(env, BehaviorPolicy(noise_std=noise, squash=True), n, seed, env_id)


def calibrate(env_id: str, quality: str, n: int, seed: int, iters: int = 12, bracket=(0.1, 40.0)):
    """Geometric bisection on the behavior noise until the success rate falls in the band.

    Success decreases with noise, and the collection seed is fixed, so the
    search sees a smooth, deterministic response. Returns ``(noise, dataset)``.
    """
    lo_band, hi_band = QUALITY_BANDS[quality]
    lo, hi = bracket
    tried = []
    for _ in range(iters):
        mid = float(np.sqrt(lo * hi))
        ds = collect(env_id, n, mid, seed)
        rate = ds.success_rate()
        tried.append((round(mid, 4), round(rate, 4)))
        if lo_band <= rate <= hi_band:
            ds.metadata["quality"] = quality
            return mid, ds
        if rate > hi_band:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(f"no noise level reached the {quality} band {QUALITY_BANDS[quality]}; tried (noise, rate): {tried}")


def make_dataset(cfg: ExperimentConfig) -> TrajectoryDataset:
    spec = cfg.dataset
    if spec.path:
        path = Path(spec.path)
        if not path.exists():
            raise FileNotFoundError(f"dataset file not found: {path}")
        return load_dataset(path)
    if spec.noise_std is not None or cfg.env_id == "grid5":
        noise = 1.0 if spec.noise_std is None else spec.noise_std
        ds = collect(cfg.env_id, spec.n_trajectories, noise, spec.seed)
    else:
        noise, ds = calibrate(cfg.env_id, spec.quality, spec.n_trajectories, spec.seed, spec.calibration_iters)
    ds.metadata.update(noise_std=noise, quality=spec.quality)
    return ds


def make_success_set(cfg: ExperimentConfig, ds: TrajectoryDataset) -> SuccessSet:
    rng = np.random.default_rng([cfg.dataset.seed, cfg.n_success_examples])
    return harvest_success_examples(ds, cfg.n_success_examples, rng)


def collect_to_disk(cfg: ExperimentConfig) -> tuple[Path, Path, TrajectoryDataset, SuccessSet]:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = make_dataset(cfg)
    ss = make_success_set(cfg, ds)
    data_path, success_path = dataset_path_pair(out)
    save_dataset(ds, data_path)
    save_success_set(ss, success_path)
    return data_path, success_path, ds, ss


def data_fingerprint(ds: TrajectoryDataset) -> str:
    h = hashlib.sha256()
    for arr in (ds.states, ds.actions, ds.success):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def _hash(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


# --- metrics ----------------------------------------------------------------------


@dataclass
class MetricsRow:
    step: int
    loss: float
    eval_success_rate: float | None
    wall_clock_s: float | None
    seed: int
    method: str
    env_id: str

    def __post_init__(self):
        if self.eval_success_rate is not None and not 0.0 <= self.eval_success_rate <= 1.0:
            raise ValueError("success rate must lie in [0, 1]")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_cell(getattr(r, c)) for c in METRIC_COLUMNS])
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- gridworld surrogate pipeline -------------------------------------------------


def evaluate_discrete(policy: DiscretePolicy, env: GridWorldMDP, episodes: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    cum_t = np.cumsum(env.transition_tensor(), axis=2)
    s = rng.choice(env.n_states, size=episodes, p=env.initial_distribution())
    ok = np.zeros(episodes, dtype=bool)
    for _ in range(env.horizon):
        cum_p = np.cumsum(policy.probs(env.one_hot(s)), axis=1)
        a = np.minimum((rng.uniform(size=episodes)[:, None] > cum_p).sum(axis=1), env.n_actions - 1)
        s = np.minimum((rng.uniform(size=episodes)[:, None] > cum_t[s, a]).sum(axis=1), env.n_states - 1)
        ok |= s == env.goal_cell
    return float(np.mean(ok))


def grid_action_values(critic: ContrastiveCritic, states, success_states) -> np.ndarray:
    """``f[i, a, j]`` for every discrete action."""
    B, A = len(states), critic.action_dim
    acts = np.tile(np.eye(A), (B, 1))
    f = critic.f_matrix(np.repeat(states, A, axis=0), acts, success_states)
    return f.reshape(B, A, -1)


def train_discrete_policy(ds, critic, success_states, pcfg, on_eval=None) -> DiscretePolicy:
    rng = np.random.default_rng(pcfg.seed)
    init_rng, data_rng = (np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(2))
    policy = DiscretePolicy.create(ds.state_dim, ds.action_dim, init_rng, pcfg.hidden)
    states, actions = ds.transitions()
    act_idx = np.argmax(actions, axis=1)
    opt = Adam(policy.params, lr=pcfg.lr)
    running = []
    for step in range(1, pcfg.steps + 1):
        idx = data_rng.integers(len(states), size=pcfg.batch_size)
        if pcfg.lam < 1.0:
            f = grid_action_values(critic, states[idx], success_states)
        else:
            f = np.zeros((len(idx), ds.action_dim, 1))
        loss, grads = discrete_policy_loss(policy, f, states[idx], act_idx[idx], pcfg.lam, pcfg.objective_mode)
        opt.step(policy.params, grads)
        running.append(loss)
        if on_eval is not None and (step % pcfg.eval_every == 0 or step == pcfg.steps):
            on_eval(step, float(np.mean(running)), policy)
            running = []
    return policy


# --- single run -------------------------------------------------------------------


@dataclass
class RunResult:
    method: str
    env_id: str
    seed: int
    success_rate: float
    rows: list[MetricsRow]
    timings: dict
    status: str = "ok"

    def to_json(self) -> dict:
        d = asdict(self)
        d["rows"] = [asdict(r) for r in self.rows]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunResult":
        d = dict(d)
        d["rows"] = [MetricsRow(**r) for r in d["rows"]]
        return cls(**d)


class RunStore:
    """On-disk cache of trained critics and finished runs keyed by content hashes."""

    def __init__(self, root):
        self.root = Path(root)

    def critic(self, ds: TrajectoryDataset, cfg: ExperimentConfig, seed: int, scale: float):
        key = _hash("critic", data_fingerprint(ds), asdict(replace(cfg.critic, seed=seed)), scale)
        path = self.root / "critics" / f"{key}.ckpt"
        rows_path = path.with_suffix(".json")
        if path.exists() and rows_path.exists():
            return ContrastiveCritic.load(path), json.loads(rows_path.read_text()), 0.0
        t0 = time.perf_counter()
        critic, hist = train_critic(ds, replace(cfg.critic, seed=seed), scale)
        losses = [[s, l] for s, l in zip(hist.steps, hist.losses)]
        elapsed = time.perf_counter() - t0
        path.parent.mkdir(parents=True, exist_ok=True)
        critic.save(path)
        rows_path.write_text(json.dumps(losses))
        return critic, losses, elapsed

    def run_path(self, key: str) -> Path:
        return self.root / "runs" / f"{key}.json"


def run_single(cfg: ExperimentConfig, ds: TrajectoryDataset, ss: SuccessSet, seed: int, store: RunStore | None = None,
               out_dir: Path | None = None) -> RunResult:
    """Train ``cfg.method`` with training seed ``seed`` and evaluate it on ``cfg.eval_episodes`` episodes."""
    env = make_env(cfg.env_id)
    scale = action_scale(env)
    method = cfg.method
    key = _hash("run", data_fingerprint(ds), ss.states.tolist(), method, seed, cfg.eval_episodes,
                asdict(cfg.critic), asdict(cfg.policy), asdict(cfg.baseline))
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    res = None
    # a cached result is only reusable when no checkpoint has to be written
    if store is not None and store.run_path(key).exists() and ckpt_dir is None:
        res = RunResult.from_json(json.loads(store.run_path(key).read_text()))

    if res is None:
        res = _train_and_eval(cfg, ds, ss, seed, env, scale, store, ckpt_dir)
        if store is not None:
            store.run_path(key).parent.mkdir(parents=True, exist_ok=True)
            store.run_path(key).write_text(json.dumps(res.to_json()))
    if ckpt_dir is not None:
        (ckpt_dir / "metrics.csv").write_text(metrics_csv(res.rows))
        (ckpt_dir / "timings.csv").write_text("stage,seconds\n" + "".join(f"{k},{v:.3f}\n" for k, v in res.timings.items()))
    return res


def _train_and_eval(cfg, ds, ss, seed, env, scale, store, ckpt_dir) -> RunResult:
    method, env_id = cfg.method, cfg.env_id
    rows: list[MetricsRow] = []
    timings = {}
    pcfg = replace(cfg.policy, seed=seed)
    offset = 0
    critic = None
    evaluate = (lambda p: evaluate_discrete(p, env, cfg.eval_episodes, eval_seed(seed))) if isinstance(env, GridWorldMDP) \
        else (lambda p: evaluate_policy(p, env, cfg.eval_episodes, eval_seed(seed)))

    if method == "laeo":
        store = store or RunStore(Path(cfg.out_dir) / "cache")
        critic, losses, elapsed = store.critic(ds, cfg, seed, scale)
        timings["critic"] = elapsed
        rows += [MetricsRow(int(s), float(l), None, None, seed, method, env_id) for s, l in losses]
        offset = cfg.critic.steps
        if ckpt_dir is not None:
            critic.save(ckpt_dir / "critic.ckpt")

    def on_eval(step, loss, policy):
        rows.append(MetricsRow(offset + step, float(loss), evaluate(policy), None, seed, method, env_id))

    t0 = time.perf_counter()
    if isinstance(env, GridWorldMDP):
        if method not in ("laeo", "bc"):
            raise ValueError(f"method {method!r} is not available on the gridworld surrogate")
        if method == "bc":
            pcfg = replace(pcfg, lam=1.0)
        policy = train_discrete_policy(ds, critic, ss.states, pcfg, on_eval)
    elif method == "laeo":
        policy, _ = train_policy(ds, ss, critic, pcfg, scale, on_eval)
    elif method == "bc":
        policy, _ = bc_baseline(ds, pcfg, scale, on_eval)
    else:
        bcfg = replace(cfg.baseline, seed=seed)
        policy, _, _ = train_baseline_policy(ds, ss, method, bcfg, pcfg, scale, on_eval)
    timings["policy"] = time.perf_counter() - t0
    if ckpt_dir is not None and isinstance(policy, GaussianPolicy):
        policy.save(ckpt_dir / "policy.ckpt", {"env_id": env_id, "method": method, "seed": seed})
    final = rows[-1].eval_success_rate
    return RunResult(method, env_id, seed, float(final), rows, timings)


def run_experiment(cfg: ExperimentConfig, ds=None, ss=None, store: RunStore | None = None, write: bool = True) -> list[RunResult]:
    """All seeds of one configuration. Writes per-seed artifacts under ``cfg.out_dir`` when ``write``."""
    if ds is None:
        ds = make_dataset(cfg)
    if ss is None:
        ss = make_success_set(cfg, ds)
    results = []
    for seed in cfg.seeds:
        out = Path(cfg.out_dir) / f"seed_{seed}" if write else None
        results.append(run_single(cfg, ds, ss, seed, store, out))
    return results


def summarize(values) -> tuple[float, float]:
    """Mean and standard error."""
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


__all__ = [
    "CalibrationError",
    "METRIC_COLUMNS",
    "MetricsRow",
    "RunResult",
    "RunStore",
    "TrainingDivergedError",
    "calibrate",
    "collect",
    "collect_to_disk",
    "load_success_set",
    "make_dataset",
    "make_success_set",
    "metrics_csv",
    "run_experiment",
    "run_single",
    "summarize",
]
