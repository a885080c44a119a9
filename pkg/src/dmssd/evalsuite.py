"""Evaluation of trained policies: optimality gap, reward-setting ablation,
inference latency, robot-count compatibility and curve export."""
from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .env import EnvConfig, RendezvousEnv, compute_target
from .errors import ContractError
from .gridmap import Coord, GridMap, generate_map, shortest_path_distances
from .metrics import NA, EpisodeStats, bottleneck_steps, parse_metric
from .neural import PolicyValueNet, masked_distribution, sample_actions
from .ppo import PpoConfig, TrainResult, read_metrics, train
from .rewards import VARIANTS, RewardVariant


def optimal_steps(grid: GridMap, positions: Sequence[Coord], rng: Optional[np.random.Generator] = None,
                  target: Optional[Coord] = None) -> int:
    """Bottleneck robot's shortest-path distance to the initial centroid target."""
    if target is None:
        target = compute_target(positions, grid, rng or np.random.default_rng(0))
    return bottleneck_steps(grid, positions, target)


def run_episode(env: RendezvousEnv, net: PolicyValueNet, rng: np.random.Generator,
                greedy: bool = False, n_robots: Optional[int] = None,
                positions: Optional[Sequence[Coord]] = None) -> EpisodeStats:
    """Play one episode with every robot driven by ``net``."""
    env.reset(n_robots=n_robots, positions=positions)
    s = env.state
    start = tuple(s.positions)
    opt = bottleneck_steps(s.grid, s.positions, s.target)
    total = 0.0
    if s.done_t:
        return EpisodeStats(1, 0.0, True, start, s.positions[0], opt)
    while True:
        a = int(net.act(env.observe(0), env.mask(0)[None], rng, greedy=greedy)[0])
        res = env.step(a, net, greedy_others=greedy)
        total += res.reward
        if res.done or res.info["truncated"]:
            break
    final = env.state.positions[0] if res.done else None
    return EpisodeStats(env.state.t, total, res.done, start, final, opt)


@dataclass
class GapReport:
    gaps: list  # int, or None for truncated trials
    episodes: list[EpisodeStats]
    lower_bound_ok: list[bool]

    @property
    def achieved(self) -> list[int]:
        return [g for g in self.gaps if g is not None]

    @property
    def median(self) -> float:
        # truncated trials rank above every finite gap
        vals = [g if g is not None else float("inf") for g in self.gaps]
        return float(statistics.median(vals))

    @property
    def success_rate(self) -> float:
        return len(self.achieved) / len(self.gaps)

    def summary(self) -> dict:
        a = self.achieved
        return {
            "trials": len(self.gaps),
            "achieved": len(a),
            "median_gap": self.median,
            "mean_gap": float(np.mean(a)) if a else NA,
            "max_gap": max(a) if a else NA,
            "lower_bound_holds": all(self.lower_bound_ok),
        }

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "n_robots", "steps", "optimal_steps", "gap", "achieved",
                        "meeting_x", "meeting_y", "lower_bound_ok"])
            for i, (e, g, ok) in enumerate(zip(self.episodes, self.gaps, self.lower_bound_ok)):
                mx, my = e.final_cell if e.final_cell else (NA, NA)
                w.writerow([i, len(e.initial_positions), e.length, e.optimal_steps,
                            NA if g is None else g, int(e.achieved), mx, my, int(ok)])
        return path


def meeting_lower_bound(grid: GridMap, e: EpisodeStats) -> int:
    """Bottleneck distance from the start cells to the cell actually met at."""
    d = shortest_path_distances(grid, e.final_cell)
    return max(d[p] for p in e.initial_positions)


def optimality_gap(net: PolicyValueNet, env_config: EnvConfig, trials: int = 100, seed: int = 0,
                   greedy: bool = False, grid: Optional[GridMap] = None,
                   n_robots: Optional[int] = None) -> GapReport:
    env = RendezvousEnv(env_config, grid=grid, seed=seed)
    rng = np.random.default_rng([seed, 1])
    gaps, eps, ok = [], [], []
    for _ in range(trials):
        e = run_episode(env, net, rng, greedy=greedy, n_robots=n_robots)
        eps.append(e)
        if e.achieved:
            gaps.append(e.length - e.optimal_steps)
            ok.append(e.length >= meeting_lower_bound(env.base_grid, e))
        else:
            gaps.append(None)
            ok.append(True)
    return GapReport(gaps, eps, ok)


def padding_compat(net: PolicyValueNet, env_config: EnvConfig, k: int, episodes: int = 100,
                   seed: int = 0, greedy: bool = False, grid: Optional[GridMap] = None) -> float:
    """Rendezvous success rate with ``k`` robots under a model sized for ``n_p``."""
    if not 2 <= k <= env_config.n_p:
        raise ContractError(f"robot count k={k} must lie in [2, {env_config.n_p}]")
    if net.n_p != env_config.n_p:
        raise ContractError(f"model n_p={net.n_p} differs from env n_p={env_config.n_p}")
    env = RendezvousEnv(env_config, grid=grid, seed=seed)
    rng = np.random.default_rng([seed, 2])
    wins = sum(run_episode(env, net, rng, greedy=greedy, n_robots=k).achieved
               for _ in range(episodes))
    return wins / episodes


@dataclass
class LatencyStats:
    samples: int
    mean_us: float
    p50_us: float
    p99_us: float
    max_us: float

    @property
    def under_30ms(self) -> bool:
        return self.p99_us < 30_000.0

    def as_row(self) -> dict:
        return {"samples": self.samples, "mean_us": self.mean_us, "p50_us": self.p50_us,
                "p99_us": self.p99_us, "max_us": self.max_us, "p99_under_30ms": int(self.under_30ms)}


def random_observations(net: PolicyValueNet, width: int, height: int, count: int, seed: int = 0,
                        coordinate_scale: float = 100.0) -> tuple[np.ndarray, np.ndarray]:
    """Observations and masks for random robot layouts on a ``width`` x ``height`` map."""
    from .env import EnvState, build_observation, action_mask

    grid = generate_map(width, height, 0.05, 0.02, seed)
    rng = np.random.default_rng(seed)
    free = np.argwhere(grid.largest_component())
    obs = np.zeros((count, net.input_dim))
    masks = np.zeros((count, 5), dtype=bool)
    for i in range(count):
        k = int(rng.integers(2, net.n_p + 1))
        idx = rng.choice(len(free), size=k, replace=False)
        pos = [(int(free[j][0]), int(free[j][1])) for j in idx]
        s = EnvState(grid=grid, positions=pos, target=pos[0])
        obs[i] = build_observation(s, grid, 0, net.n_p, coordinate_scale)
        masks[i] = action_mask(s, grid, 0)
    return obs, masks


def bench_inference(net: PolicyValueNet, samples: int = 10_000, width: int = 20, height: int = 20,
                    seed: int = 0, coordinate_scale: float = 100.0) -> LatencyStats:
    """Wall-clock of forward pass + masking + sampling, one action at a time."""
    obs, masks = random_observations(net, width, height, samples, seed, coordinate_scale)
    rng = np.random.default_rng(seed)
    times = np.empty(samples)
    clock = time.perf_counter_ns
    for i in range(samples):
        t0 = clock()
        logits, _ = net.forward(obs[i:i + 1])
        probs = masked_distribution(logits, masks[i:i + 1])
        sample_actions(probs, rng)
        times[i] = (clock() - t0) / 1000.0
    return LatencyStats(samples, float(times.mean()), float(np.percentile(times, 50)),
                        float(np.percentile(times, 99)), float(times.max()))


def run_baseline(variant: RewardVariant | str, env_config: EnvConfig, ppo_config: PpoConfig,
                 seed: int = 0, out_dir=None) -> TrainResult:
    """Same trainer and environment, with the reward (and masking) swapped."""
    if isinstance(variant, str):
        variant = RewardVariant(variant)
    return train(env_config, ppo_config, seed=seed, out_dir=out_dir, variant=variant)


def final_mst(metrics: Sequence[dict], last: int = 10) -> float:
    vals = [parse_metric(r["mst"]) for r in metrics[-last:]]
    vals = [v for v in vals if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("inf")


@dataclass
class AblationResult:
    runs: dict = field(default_factory=dict)  # (variant, seed) -> metrics rows

    def final_mst(self, variant: str, last: int = 10) -> float:
        vals = [final_mst(m, last) for (v, _), m in self.runs.items() if v == variant]
        return float(np.mean(vals))

    def ranking(self, last: int = 10) -> list[tuple[str, float]]:
        names = sorted({v for v, _ in self.runs})
        return sorted(((v, self.final_mst(v, last)) for v in names), key=lambda t: t[1])


def reward_ablation(env_config: EnvConfig, ppo_config: PpoConfig, seeds: Sequence[int],
                    variants: Sequence[str] = VARIANTS, out_dir=None) -> AblationResult:
    result = AblationResult()
    for v in variants:
        for s in seeds:
            sub = None if out_dir is None else Path(out_dir) / f"{v}_seed{s}"
            result.runs[(v, s)] = run_baseline(v, env_config, ppo_config, seed=s, out_dir=sub).metrics
    return result


CURVE_COLUMNS = ("curve", "iteration", "mst_mean", "mst_std", "rm_mean", "rm_std", "runs")


def curve_rows(label: str, runs: Sequence[Sequence[dict]]) -> list[dict]:
    """Per-iteration mean and standard deviation of MST and RM across runs."""
    n = min(len(r) for r in runs) if runs else 0
    rows = []
    for i in range(n):
        mst = [parse_metric(r[i]["mst"]) for r in runs]
        rm = [parse_metric(r[i]["rm"]) for r in runs]
        row = {"curve": label, "iteration": int(runs[0][i]["iteration"]), "runs": len(runs)}
        for name, vals in (("mst", mst), ("rm", rm)):
            vals = [v for v in vals if not np.isnan(v)]
            row[f"{name}_mean"] = repr(float(np.mean(vals))) if vals else NA
            row[f"{name}_std"] = repr(float(np.std(vals))) if vals else NA
        rows.append(row)
    return rows


def plot_data(curves: dict[str, Sequence], out_path) -> Path:
    """Write one CSV holding every curve; ``curves`` maps label to metrics files or rows."""
    rows = []
    for label, runs in curves.items():
        loaded = [read_metrics(r) if isinstance(r, (str, Path)) else r for r in runs]
        rows.extend(curve_rows(label, loaded))
    out_path = Path(out_path)
    with out_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return out_path
