"""Clipped-surrogate policy optimisation for the shared rendezvous policy.

Only robot 0's transitions are stored and trained on; the other robots act
through the same network during rollouts.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .env import EnvConfig, RendezvousEnv
from .errors import ConfigError, TrainingAborted
from .metrics import NA, EpisodeStats, bottleneck_steps, mean_steps_taken, metric_or_na, rewards_mean
from .neural import Adam, PolicyValueNet, clip_grad_norm, masked_log_softmax
from .rewards import RewardVariant

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("iteration", "env_steps", "mst", "rm", "policy_loss", "value_loss", "entropy",
                   "seconds")
EPISODE_COLUMNS = ("iteration", "length", "reward_sum", "achieved", "optimal_steps", "n_robots")


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.92
    clip_range: float = 0.2
    ent_coef: float = 0.001
    learning_rate: float = 0.001
    iterations: int = 150
    rollout_steps: int = 2048
    epochs: int = 10
    minibatch_size: int = 64
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    checkpoint_every: int = 10
    log_wallclock: bool = False
    shared_trunk: bool = False

    def __post_init__(self):
        if not 0 < self.gamma <= 1 or not 0 < self.gae_lambda <= 1:
            raise ConfigError("gamma and gae_lambda must lie in (0, 1]")
        if self.clip_range <= 0:
            raise ConfigError("clip_range must be positive")
        if self.rollout_steps < 1 or self.minibatch_size < 1:
            raise ConfigError("rollout_steps and minibatch_size must be positive")
        if self.rollout_steps % self.minibatch_size:
            raise ConfigError("rollout_steps must be divisible by minibatch_size")
        if self.iterations < 0 or self.epochs < 1:
            raise ConfigError("iterations must be >= 0 and epochs >= 1")


class RolloutBuffer:
    def __init__(self, capacity: int, obs_dim: int, n_actions: int = 5):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.masks = np.zeros((capacity, n_actions), dtype=bool)
        self.log_probs = np.zeros(capacity)
        self.rewards = np.zeros(capacity)
        self.values = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.truncated = np.zeros(capacity, dtype=bool)
        self.truncation_values = np.zeros(capacity)
        self.advantages: Optional[np.ndarray] = None
        self.returns: Optional[np.ndarray] = None
        self.bootstrap_value = 0.0
        self.size = 0

    def add(self, obs, action, mask, log_prob, reward, value, done, truncated, truncation_value=0.0):
        i = self.size
        if i >= self.capacity:
            raise IndexError("rollout buffer full")
        self.obs[i] = obs
        self.actions[i] = action
        self.masks[i] = mask
        self.log_probs[i] = log_prob
        self.rewards[i] = reward
        self.values[i] = value
        self.dones[i] = done
        self.truncated[i] = truncated
        self.truncation_values[i] = truncation_value
        self.size += 1

    @property
    def full(self) -> bool:
        return self.size == self.capacity

    def compute_advantages(self, gamma: float, lam: float) -> None:
        if self.advantages is not None:
            raise RuntimeError("advantages already computed for this rollout")
        n = self.size
        self.advantages, self.returns = compute_gae(
            self.rewards[:n], self.values[:n], self.dones[:n], gamma, lam, self.bootstrap_value,
            truncated=self.truncated[:n], truncation_values=self.truncation_values[:n])


def compute_gae(rewards, values, dones, gamma: float, lam: float, bootstrap_value: float = 0.0,
                truncated=None, truncation_values=None) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and value targets.

    ``dones`` marks terminal steps (no bootstrap). ``truncated`` steps end the
    episode but bootstrap from ``truncation_values``. The step after the last
    one bootstraps from ``bootstrap_value``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    if len(values) != n or len(dones) != n:
        raise ValueError("rewards, values and dones must have equal length")
    truncated = np.zeros(n, dtype=bool) if truncated is None else np.asarray(truncated, dtype=bool)
    tvals = np.zeros(n) if truncation_values is None else np.asarray(truncation_values, dtype=np.float64)
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        if dones[t]:
            next_v, cont = 0.0, 0.0
        elif truncated[t]:
            next_v, cont = tvals[t], 0.0
        else:
            next_v = bootstrap_value if t == n - 1 else values[t + 1]
            cont = 1.0
        delta = rewards[t] + gamma * next_v - values[t]
        last = delta + gamma * lam * cont * last
        adv[t] = last
    return adv, adv + values


@dataclass
class RolloutStats:
    episodes: list[EpisodeStats] = field(default_factory=list)
    env_steps: int = 0


class _EpisodeTracker:
    def __init__(self):
        self.length = 0
        self.reward = 0.0
        self.start: tuple = ()
        self.optimal: Optional[int] = None

    def begin(self, env: RendezvousEnv):
        s = env.state
        self.length = 0
        self.reward = 0.0
        self.start = tuple(s.positions)
        self.optimal = bottleneck_steps(s.grid, s.positions, s.target)


def collect_rollout(env: RendezvousEnv, net: PolicyValueNet, config: PpoConfig,
                    rng: np.random.Generator, tracker: Optional[_EpisodeTracker] = None,
                    iteration: int = 0) -> tuple[RolloutBuffer, RolloutStats]:
    """Run ``rollout_steps`` learner transitions.

    The environment keeps its state across calls, so an unfinished episode
    continues into the next rollout. Pass the same ``tracker`` each time to
    count such episodes correctly.
    """
    if net.input_dim != env.config.obs_dim:
        raise ConfigError(f"network input_dim {net.input_dim} != env obs_dim {env.config.obs_dim}")
    buf = RolloutBuffer(config.rollout_steps, net.input_dim)
    stats = RolloutStats()
    if tracker is None:
        tracker = _EpisodeTracker()
    if env.state is None or env.state.done_t:
        env.reset()
        tracker.begin(env)
    obs = env.observe(0)
    while not buf.full:
        mask = env.mask(0)
        logits, value = net.forward(obs)
        logp_all = masked_log_softmax(logits, mask)
        probs = np.exp(logp_all)
        action = int(_sample(probs, rng))
        res = env.step(action, net)
        truncated = res.info["truncated"]
        tracker.length += 1
        tracker.reward += res.reward
        tval = 0.0
        if truncated:
            tval = float(net.forward(res.obs)[1])
        buf.add(obs, action, mask, logp_all[action], res.reward, value, res.done, truncated, tval)
        stats.env_steps += 1
        if res.done or truncated:
            stats.episodes.append(EpisodeStats(
                length=tracker.length, reward_sum=tracker.reward, achieved=res.done,
                initial_positions=tracker.start,
                final_cell=res.state.positions[0] if res.done else None,
                optimal_steps=tracker.optimal, iteration=iteration))
            obs = env.reset()
            tracker.begin(env)
        else:
            obs = res.obs
    last_ended = buf.dones[buf.size - 1] or buf.truncated[buf.size - 1]
    buf.bootstrap_value = 0.0 if last_ended else float(net.forward(obs)[1])
    return buf, stats


def _sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    i = int((cdf <= rng.random()).sum())
    if i >= len(probs):
        i = int(np.flatnonzero(probs > 0)[-1])
    return i


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float
    grad_norm: float


def ppo_loss_and_grads(net: PolicyValueNet, obs, actions, masks, old_log_probs, advantages,
                       returns, config: PpoConfig):
    """Total loss and its parameter gradients for one minibatch."""
    logits, values, acts = net.forward_cache(obs)
    B = len(actions)
    logp_all = masked_log_softmax(logits, masks)
    probs = np.exp(logp_all)
    ar = np.arange(B)
    logp = logp_all[ar, actions]
    ratio = np.exp(logp - old_log_probs)
    c = config.clip_range
    surr1 = ratio * advantages
    surr2 = np.clip(ratio, 1.0 - c, 1.0 + c) * advantages
    policy_loss = -np.minimum(surr1, surr2).mean()
    plogp = np.where(probs > 0, probs * logp_all, 0.0)
    ent = -plogp.sum(axis=1)
    entropy = ent.mean()
    err = values - returns
    value_loss = (err * err).mean()
    loss = policy_loss + config.vf_coef * value_loss - config.ent_coef * entropy

    # d(policy_loss)/d(logp): only the unclipped branch carries gradient
    active = surr1 <= surr2
    g_logp = np.where(active, -advantages * ratio, 0.0) / B
    onehot = np.zeros_like(probs)
    onehot[ar, actions] = 1.0
    dlogits = g_logp[:, None] * (onehot - probs)
    # d(-ent_coef * mean H)/dz = ent_coef/B * p * (log p + H)
    dlogits += (config.ent_coef / B) * np.where(probs > 0, probs * (logp_all + ent[:, None]), 0.0)
    dvalue = config.vf_coef * 2.0 * err / B
    grads = net.backward(acts, dlogits, dvalue)
    info = {
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy),
        "approx_kl": float(((ratio - 1.0) - (logp - old_log_probs)).mean()),
        "clip_fraction": float((np.abs(ratio - 1.0) > c).mean()),
    }
    return float(loss), grads, info


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + eps)


def ppo_update(buf: RolloutBuffer, net: PolicyValueNet, opt: Adam, config: PpoConfig,
               rng: np.random.Generator) -> UpdateStats:
    if buf.advantages is None:
        raise RuntimeError("compute advantages before updating")
    n = buf.size
    adv = normalize_advantages(buf.advantages) if n > 1 else buf.advantages.copy()
    mb = min(config.minibatch_size, n)
    totals = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "approx_kl": 0.0,
              "clip_fraction": 0.0, "grad_norm": 0.0}
    count = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start:start + mb]
            loss, grads, info = ppo_loss_and_grads(
                net, buf.obs[idx], buf.actions[idx], buf.masks[idx], buf.log_probs[idx],
                adv[idx], buf.returns[idx], config)
            if not math.isfinite(loss):
                raise TrainingAborted(f"non-finite loss {loss}: {info}")
            info["grad_norm"] = clip_grad_norm(grads, config.max_grad_norm)
            opt.step(net.params, grads)
            for k in totals:
                totals[k] += info[k]
            count += 1
    return UpdateStats(**{k: v / count for k, v in totals.items()})


@dataclass
class TrainResult:
    net: PolicyValueNet
    metrics: list[dict]
    episodes: list[EpisodeStats]
    out_dir: Optional[Path] = None


def _fmt(v) -> str:
    if v == NA or v is None:
        return NA
    if isinstance(v, float):
        return repr(v)
    return str(v)


def train(env_config: EnvConfig, ppo_config: PpoConfig, seed: int = 0,
          out_dir: Optional[Path] = None, variant: Optional[RewardVariant] = None,
          grid=None, progress=None) -> TrainResult:
    """Repeat collect, estimate advantages, update; write metrics per iteration.

    With ``out_dir`` set, writes ``metrics.csv``, ``episodes.csv``,
    ``timing.csv``, periodic ``checkpoints/`` and the final ``model.bin``.
    Metrics written before an abort are kept.
    """
    env_seed, net_seed, act_seed, shuffle_seed = np.random.SeedSequence(seed).generate_state(4)
    env = RendezvousEnv(env_config, grid=grid, variant=variant, seed=int(env_seed))
    net = PolicyValueNet.for_env(env_config.n_p, seed=int(net_seed), shared=ppo_config.shared_trunk)
    opt = Adam(net.params, lr=ppo_config.learning_rate)
    act_rng = np.random.default_rng(act_seed)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    tracker = _EpisodeTracker()

    metrics: list[dict] = []
    episodes: list[EpisodeStats] = []
    files = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "checkpoints").mkdir(exist_ok=True)
        files = _open_logs(out_dir)
        net.save(out_dir / "model.bin")
    env_steps = 0
    try:
        for it in range(1, ppo_config.iterations + 1):
            t0 = time.perf_counter()
            buf, stats = collect_rollout(env, net, ppo_config, act_rng, tracker, iteration=it)
            buf.compute_advantages(ppo_config.gamma, ppo_config.gae_lambda)
            upd = ppo_update(buf, net, opt, ppo_config, shuffle_rng)
            seconds = time.perf_counter() - t0
            env_steps += stats.env_steps
            row = {
                "iteration": it,
                "env_steps": env_steps,
                "mst": metric_or_na(mean_steps_taken, stats.episodes),
                "rm": metric_or_na(rewards_mean, stats.episodes),
                "policy_loss": upd.policy_loss,
                "value_loss": upd.value_loss,
                "entropy": upd.entropy,
                "seconds": seconds if ppo_config.log_wallclock else NA,
            }
            metrics.append(row)
            episodes.extend(stats.episodes)
            if files is not None:
                _write_iteration(files, row, stats.episodes, seconds)
                if ppo_config.checkpoint_every and it % ppo_config.checkpoint_every == 0:
                    net.save(out_dir / "checkpoints" / f"model_iter{it:04d}.bin")
            if progress is not None:
                progress(row)
            log.info("iter %d mst=%s rm=%s", it, row["mst"], row["rm"])
    finally:
        if files is not None:
            for _, fh in files.values():
                fh.close()
    if out_dir is not None:
        net.save(out_dir / "model.bin")
    return TrainResult(net, metrics, episodes, out_dir)


def _open_logs(out_dir: Path):
    files = {}
    for name, cols in (("metrics", METRICS_COLUMNS), ("episodes", EPISODE_COLUMNS),
                       ("timing", ("iteration", "seconds"))):
        fh = (out_dir / f"{name}.csv").open("w", newline="")
        w = csv.writer(fh)
        w.writerow(cols)
        fh.flush()
        files[name] = (w, fh)
    return files


def _write_iteration(files, row: dict, episodes: list[EpisodeStats], seconds: float):
    w, fh = files["metrics"]
    w.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])
    fh.flush()
    w, fh = files["episodes"]
    for e in episodes:
        w.writerow([row["iteration"], e.length, repr(float(e.reward_sum)), int(e.achieved),
                    e.optimal_steps, len(e.initial_positions)])
    fh.flush()
    w, fh = files["timing"]
    w.writerow([row["iteration"], repr(seconds)])
    fh.flush()


def read_metrics(path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))
