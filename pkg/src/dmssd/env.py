"""Episodic rendezvous environment.

Robot 0 is the learner. Every other active robot moves by querying the
same shared policy with its own observation. The rendezvous target is the
rounded centroid of the robots' positions and is recomputed after every
move.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import ConfigError, ContractError, MapDegenerateError
from .gridmap import (
    MOVES,
    UNREACHABLE,
    Coord,
    GridMap,
    component_cells,
    generate_map,
    is_rendezvous_feasible,
    load_map,
    nearest_free_cell,
    shortest_path_distances,
    step_dynamic_obstacles,
)
from .rewards import RewardVariant, StepOutcome

ACTIONS = ("up", "down", "left", "right", "stay")
N_ACTIONS = len(ACTIONS)
STAY = 4
DELTAS: tuple[Coord, ...] = MOVES + ((0, 0),)


@dataclass(frozen=True)
class EnvConfig:
    width: int = 20
    height: int = 20
    static_density: float = 0.05
    dynamic_density: float = 0.02
    map_seed: int = 0
    map_file: Optional[str] = None
    n_p: int = 3
    r_goal: float = 10.0
    r1: float = 1.0
    r2: float = -10.0
    r3: float = -5.0
    max_episode_steps: Optional[int] = None
    coordinate_scale: float = 100.0
    reset_retries: int = 100

    def __post_init__(self):
        if self.n_p < 2:
            raise ConfigError(f"n_p must be >= 2, got {self.n_p}")
        if not (self.r1 > 0 and self.r2 < 0 and self.r3 < 0):
            raise ConfigError("shaping rewards need r1 > 0, r2 < 0, r3 < 0")
        if not abs(self.r1) < abs(self.r3) < abs(self.r2):
            raise ConfigError("shaping rewards need |r1| < |r3| < |r2|")
        if self.r_goal < 0:
            raise ConfigError("r_goal must be non-negative")
        if self.max_episode_steps is not None and self.max_episode_steps <= 0:
            raise ConfigError("max_episode_steps must be positive")
        if self.coordinate_scale <= 0:
            raise ConfigError("coordinate_scale must be positive")
        if self.reset_retries < 1:
            raise ConfigError("reset_retries must be >= 1")

    @property
    def obs_dim(self) -> int:
        return 2 * self.n_p + 1

    @property
    def episode_budget(self) -> int:
        if self.max_episode_steps is not None:
            return self.max_episode_steps
        return 8 * (self.width + self.height)

    def build_map(self) -> GridMap:
        if self.map_file:
            return load_map(self.map_file)
        return generate_map(self.width, self.height, self.static_density, self.dynamic_density,
                            self.map_seed)


@dataclass
class EnvState:
    grid: GridMap
    positions: list[Coord]
    target: Coord
    t: int = 0
    done_t: bool = False
    prev_potential: float = 0.0

    @property
    def active_count(self) -> int:
        return len(self.positions)


class Policy(Protocol):
    def act(self, obs: np.ndarray, masks: np.ndarray, rng: np.random.Generator,
            greedy: bool = False) -> np.ndarray: ...


def compute_target(positions: Sequence[Coord], grid: GridMap, rng: np.random.Generator) -> Coord:
    """Centroid of ``positions`` rounded half-up per axis, moved to a free cell
    of the robots' component when it lands elsewhere."""
    if not positions:
        raise ContractError("positions must be non-empty")
    n = len(positions)
    sx = sum(p[0] for p in positions)
    sy = sum(p[1] for p in positions)
    # floor(mean + 1/2) in exact integer arithmetic
    cell = ((2 * sx + n) // (2 * n), (2 * sy + n) // (2 * n))
    comp = component_cells(grid, positions[0])
    return nearest_free_cell(grid, cell, rng, allowed=comp)


def learner_distance(state: EnvState, target: Optional[Coord] = None) -> int:
    target = state.target if target is None else target
    return shortest_path_distances(state.grid, target)[state.positions[0]]


def potential(state: EnvState, grid: Optional[GridMap] = None) -> float:
    """Negated shortest-path distance from the learner to the target.

    Unreachable learners get ``-(width*height)``; see ``potential_info``.
    """
    return potential_info(state, grid)[0]


def potential_info(state: EnvState, grid: Optional[GridMap] = None) -> tuple[float, bool]:
    grid = state.grid if grid is None else grid
    d = shortest_path_distances(grid, state.target)[state.positions[0]]
    if d == UNREACHABLE:
        return -float(grid.width * grid.height), True
    return -float(d), False


def _mask_at(grid: GridMap, cell: Coord, dynamic: set) -> np.ndarray:
    mask = np.ones(N_ACTIONS, dtype=bool)
    x, y = cell
    W, H = grid.width, grid.height
    static = grid.static
    for a, (dx, dy) in enumerate(MOVES):
        nx, ny = x + dx, y + dy
        if not (0 <= nx < W and 0 <= ny < H) or static[nx, ny] or (nx, ny) in dynamic:
            mask[a] = False
    return mask


def action_mask(state: EnvState, grid: Optional[GridMap], robot_index: int) -> np.ndarray:
    """Stay is always valid; a move is valid iff its destination is on-grid and
    free of static and dynamic obstacles. Other robots never mask."""
    if not 0 <= robot_index < state.active_count:
        raise ContractError(f"robot_index {robot_index} out of range")
    grid = state.grid if grid is None else grid
    return _mask_at(grid, state.positions[robot_index], set(grid.dynamic))


def build_observation(state: EnvState, grid: Optional[GridMap], robot_index: int, n_p: int,
                      coordinate_scale: float) -> np.ndarray:
    """Acting robot's (x, y), the other active robots' (x, y) in index order,
    zero padding up to ``2*n_p`` entries, then the summed shortest-path
    distance from the acting robot to the others."""
    if not 0 <= robot_index < state.active_count:
        raise ContractError(f"robot_index {robot_index} out of range")
    if state.active_count > n_p:
        raise ContractError(f"{state.active_count} robots exceed n_p={n_p}")
    grid = state.grid if grid is None else grid
    obs = np.zeros(2 * n_p + 1)
    me = state.positions[robot_index]
    obs[0], obs[1] = me
    dist = shortest_path_distances(grid, me).dist
    k = 2
    total = 0
    for j, p in enumerate(state.positions):
        if j == robot_index:
            continue
        obs[k], obs[k + 1] = p
        k += 2
        total += int(dist[p[0], p[1]])
    obs[:-1] /= coordinate_scale
    obs[-1] = total / (coordinate_scale * n_p)
    return obs


def _apply(grid: GridMap, cell: Coord, action: int, dynamic: set) -> tuple[Coord, bool]:
    """Destination of ``action``; blocked moves leave the robot in place."""
    dx, dy = DELTAS[action]
    nxt = (cell[0] + dx, cell[1] + dy)
    if action == STAY:
        return cell, False
    if not grid.in_bounds(nxt) or grid.static[nxt[0], nxt[1]] or nxt in dynamic:
        return cell, True
    return nxt, False


@dataclass
class StepResult:
    state: EnvState
    obs: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class RendezvousEnv:
    """Stateful wrapper around the functional step.

    Phase order within a step: learner moves, the other robots move, the
    target is recomputed, the learner's reward is scored against the
    decision-time target, and finally dynamic obstacles move so the next
    observation's masks are exact.
    """

    def __init__(self, config: EnvConfig, grid: Optional[GridMap] = None,
                 variant: Optional[RewardVariant] = None, seed: int = 0):
        self.config = config
        self.base_grid = grid if grid is not None else config.build_map()
        self.variant = variant or RewardVariant()
        self.rng = np.random.default_rng(seed)
        self.state: Optional[EnvState] = None
        self.trace: Optional[list[dict]] = None
        self._grid = self.base_grid

    @property
    def masking(self) -> bool:
        return self.variant.masking

    @property
    def grid(self) -> GridMap:
        return self._grid

    def reset(self, n_robots: Optional[int] = None,
              positions: Optional[Sequence[Coord]] = None) -> np.ndarray:
        self.state = reset(self.config, self._grid, self.rng, n_robots=n_robots, positions=positions)
        self._grid = self.state.grid
        if self.trace is not None:
            self._record(None, 0.0, False, False)
        return self.observe(0)

    def observe(self, robot_index: int = 0) -> np.ndarray:
        return build_observation(self.state, None, robot_index, self.config.n_p,
                                 self.config.coordinate_scale)

    def mask(self, robot_index: int = 0) -> np.ndarray:
        if not self.masking:
            return np.ones(N_ACTIONS, dtype=bool)
        return action_mask(self.state, None, robot_index)

    def step(self, action: int, policy: Policy, greedy_others: bool = False) -> StepResult:
        res = step(self.state, action, policy, self.rng, self.config, self.variant,
                   greedy_others=greedy_others)
        self.state = res.state
        self._grid = res.state.grid
        if self.trace is not None:
            self._record(res.info["actions"], res.reward, res.done, res.info["truncated"])
        return res

    def enable_trace(self):
        self.trace = []

    def _record(self, actions, reward_, done, truncated):
        s = self.state
        for i, (x, y) in enumerate(s.positions):
            self.trace.append({
                "t": s.t, "robot_id": i, "x": x, "y": y,
                "action": "" if actions is None else ACTIONS[int(actions[i])],
                "reward": reward_ if (i == 0 and actions is not None) else "",
                "target_x": s.target[0], "target_y": s.target[1],
                "done": int(done), "truncated": int(truncated),
            })


TRACE_COLUMNS = ("t", "robot_id", "x", "y", "action", "reward", "target_x", "target_y", "done",
                 "truncated")


def write_trace(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return path


def reset(config: EnvConfig, grid: GridMap, rng: np.random.Generator,
          n_robots: Optional[int] = None, positions: Optional[Sequence[Coord]] = None) -> EnvState:
    """Fresh episode: 2..n_p robots on distinct cells of the largest
    static-free component, avoiding current dynamic obstacles."""
    if positions is not None:
        positions = [(int(x), int(y)) for x, y in positions]
        if not 1 <= len(positions) <= config.n_p:
            raise ContractError(f"need 1..{config.n_p} positions")
        if not is_rendezvous_feasible(grid, positions):
            raise MapDegenerateError("given positions cannot meet")
    else:
        if n_robots is None:
            n_robots = int(rng.integers(2, config.n_p + 1))
        if not 1 <= n_robots <= config.n_p:
            raise ContractError(f"robot count must lie in [1, {config.n_p}], got {n_robots}")
        comp = grid.largest_component().copy()
        for x, y in grid.dynamic:
            comp[x, y] = False
        cells = np.argwhere(comp)
        if len(cells) < n_robots:
            raise MapDegenerateError("not enough free cells to place robots")
        for _ in range(config.reset_retries):
            idx = rng.choice(len(cells), size=n_robots, replace=False)
            positions = [(int(cells[i][0]), int(cells[i][1])) for i in idx]
            if is_rendezvous_feasible(grid, positions):
                break
        else:
            raise MapDegenerateError("could not sample a feasible start")
    state = EnvState(grid=grid, positions=list(positions), target=(0, 0))
    state.target = compute_target(state.positions, grid, rng)
    state.prev_potential = potential(state)
    state.done_t = len(set(state.positions)) == 1
    return state


def step(state: EnvState, learner_action: int, policy: Policy, rng: np.random.Generator,
         config: EnvConfig, variant: Optional[RewardVariant] = None,
         greedy_others: bool = False) -> StepResult:
    variant = variant or RewardVariant()
    grid = state.grid
    learner_action = int(learner_action)
    if not 0 <= learner_action < N_ACTIONS:
        raise ContractError(f"action {learner_action} out of range")
    dynamic = set(grid.dynamic)
    masking = variant.masking
    if masking and not _mask_at(grid, state.positions[0], dynamic)[learner_action]:
        raise ContractError(f"learner submitted masked action {ACTIONS[learner_action]}")

    decision_target = state.target
    tfield = shortest_path_distances(grid, decision_target)
    prev_d = tfield[state.positions[0]]

    positions = list(state.positions)
    actions = np.full(len(positions), STAY, dtype=np.int64)
    actions[0] = learner_action
    positions[0], collided = _apply(grid, positions[0], learner_action, dynamic)

    n = len(positions)
    if n > 1:
        mid = EnvState(grid=grid, positions=positions, target=decision_target)
        others = range(1, n)
        obs = np.stack([build_observation(mid, grid, i, config.n_p, config.coordinate_scale)
                        for i in others])
        if masking:
            masks = np.stack([_mask_at(grid, positions[i], dynamic) for i in others])
        else:
            masks = np.ones((n - 1, N_ACTIONS), dtype=bool)
        chosen = policy.act(obs, masks, rng, greedy=greedy_others)
        for i, a in zip(others, chosen):
            a = int(a)
            if masking and not masks[i - 1][a]:
                raise ContractError(f"policy chose masked action for robot {i}")
            actions[i] = a
            positions[i], _ = _apply(grid, positions[i], a, dynamic)

    new_target = compute_target(positions, grid, rng)
    new_d = tfield[positions[0]]
    unreachable = prev_d == UNREACHABLE or new_d == UNREACHABLE
    if unreachable:
        big = grid.width * grid.height
        prev_d = big if prev_d == UNREACHABLE else prev_d
        new_d = big if new_d == UNREACHABLE else new_d
    done = len(set(positions)) == 1
    r = variant(StepOutcome(prev_d, new_d, done, collided), config)

    t = state.t + 1
    truncated = (not done) and t >= config.episode_budget
    next_grid = step_dynamic_obstacles(grid, rng)
    new_state = EnvState(grid=next_grid, positions=positions, target=new_target, t=t,
                         done_t=done)
    new_state.prev_potential, unreach_next = potential_info(new_state)
    obs0 = build_observation(new_state, None, 0, config.n_p, config.coordinate_scale)
    info = {
        "truncated": truncated,
        "collided": collided,
        "unreachable": bool(unreachable or unreach_next),
        "decision_target": decision_target,
        "prev_distance": int(prev_d),
        "new_distance": int(new_d),
        "actions": actions,
    }
    return StepResult(new_state, obs0, float(r), done, info)


def replace_positions(state: EnvState, positions: Sequence[Coord], rng: np.random.Generator) -> EnvState:
    """Copy of ``state`` with new robot positions and a recomputed target."""
    s = replace(state, positions=list(positions))
    s.target = compute_target(s.positions, s.grid, rng)
    s.prev_potential = potential(s)
    s.done_t = len(set(s.positions)) == 1
    return s
