"""Per-step reward functions: the potential-based shaping reward and the
baseline settings it is compared against."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class StepOutcome:
    """What happened to the learner in one step, measured against the
    target that was valid when it chose its action."""

    prev_distance: int
    new_distance: int
    all_met: bool
    collided: bool = False


def shaping_term(prev_potential: float, new_potential: float, r1: float, r2: float, r3: float) -> float:
    diff = prev_potential - new_potential
    if diff < 0:
        return r1
    if diff > 0:
        return r2
    return r3


def reward(prev_potential: float, new_potential: float, all_met: bool, config) -> float:
    """Goal bonus plus shaping term, with potential = -(distance to target)."""
    bonus = config.r_goal if all_met else 0.0
    return bonus + shaping_term(prev_potential, new_potential, config.r1, config.r2, config.r3)


VARIANTS = ("ours", "ours_no_mask", "baseline_A", "baseline_B", "baseline_C")


@dataclass(frozen=True)
class RewardVariant:
    name: str = "ours"
    # baseline_A: distance below which the "close to the goal" case applies
    close_radius: int = 2
    # baseline_B: maximum moving steps; None means the episode budget
    n_m: int | None = None
    collision_penalty_a: float = -10.0

    def __post_init__(self):
        if self.name not in VARIANTS:
            raise ConfigError(f"unknown reward variant {self.name!r}; expected one of {VARIANTS}")

    @property
    def masking(self) -> bool:
        return self.name == "ours"

    def __call__(self, out: StepOutcome, config) -> float:
        if self.name in ("ours", "ours_no_mask"):
            return reward(-out.prev_distance, -out.new_distance, out.all_met, config)
        if self.name == "baseline_A":
            return _baseline_a(out, self.close_radius, self.collision_penalty_a)
        if self.name == "baseline_B":
            n_m = self.n_m if self.n_m is not None else config.episode_budget
            return _baseline_b(out, n_m)
        return _baseline_c(out)


def _baseline_a(out: StepOutcome, close_radius: int, collision_penalty: float) -> float:
    if out.all_met:
        r = 5.0
    elif out.new_distance <= close_radius:
        r = 1.0 + out.new_distance
    else:
        r = 10.0 * (out.prev_distance - out.new_distance)
    if out.collided:
        r += collision_penalty
    return float(r)


def _baseline_b(out: StepOutcome, n_m: int) -> float:
    step_cost = 10.0 / n_m
    if out.collided:
        return -step_cost - 1.0
    if out.all_met:
        return 10.0 - step_cost
    if out.new_distance < out.prev_distance:
        # the move followed a shortest path to the goal
        return 20.0 - step_cost
    return -step_cost


def _baseline_c(out: StepOutcome) -> float:
    if out.all_met:
        return 25.0
    if out.collided:
        return -300.0
    return -1.0
