"""When each client prunes, and by how much."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .errors import ConfigError

VARIANTS = ("iterative", "iterative_lt", "one_shot", "one_shot_lt", "none")
DEFAULT_ROUNDS = 40
# A sparsity within this distance of the target counts as reached. Keeps
# p=0.415 at three events (1 - 0.585**3 = 0.7998) under floor rounding.
SPARSITY_TOL = 1e-3


@dataclass(frozen=True)
class PruneSchedule:
    variant: str = "none"
    rate: float = 0.0
    target_sparsity: float = 0.0
    warmup_rounds: int = 2
    final_freeze: int = 3
    min_recovery_rounds: int = 3
    recovery_factor: float = 1.15
    lth_reset: bool = False
    # all clients prune together once at least half of them pass their gates
    synchronized: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown schedule variant {self.variant!r}")
        if self.variant != "none":
            if not 0.0 < self.rate < 1.0:
                raise ConfigError(f"pruning rate must lie in (0, 1), got {self.rate}")
            if not 0.0 < self.target_sparsity < 1.0:
                raise ConfigError(f"target sparsity must lie in (0, 1), got {self.target_sparsity}")
        if self.warmup_rounds < 0 or self.final_freeze < 0 or self.min_recovery_rounds < 0:
            raise ConfigError("round counts must be non-negative")
        if self.recovery_factor < 1.0:
            raise ConfigError("recovery factor must be >= 1")

    @property
    def one_shot(self) -> bool:
        return self.variant in ("one_shot", "one_shot_lt")

    @property
    def prunes(self) -> bool:
        return self.variant != "none"

    def with_overrides(self, **kw) -> "PruneSchedule":
        return replace(self, **kw)


@dataclass
class LossHistory:
    losses: list[float] = field(default_factory=list)
    loss_best: float = math.inf
    # None until the first prune event
    rounds_since_prune: int | None = None
    prune_events: int = 0

    def record(self, loss: float) -> None:
        """Log this round's loss (once per round)."""
        self.losses.append(float(loss))
        self.loss_best = min(self.loss_best, float(loss))
        if self.rounds_since_prune is not None:
            self.rounds_since_prune += 1

    def mark_pruned(self) -> None:
        self.rounds_since_prune = 0
        self.prune_events += 1


def hard_gates_open(schedule: PruneSchedule, t: int, T: int, current_sparsity: float) -> bool:
    """Round-window and target gates, ignoring loss recovery."""
    if not schedule.prunes:
        return False
    if t < schedule.warmup_rounds or t >= T - schedule.final_freeze:
        return False
    return current_sparsity < schedule.target_sparsity - SPARSITY_TOL


def should_prune(schedule: PruneSchedule, history: LossHistory, t: int, T: int,
                 current_sparsity: float) -> bool:
    if not hard_gates_open(schedule, t, T, current_sparsity):
        return False
    if schedule.one_shot and history.prune_events > 0:
        return False
    if history.rounds_since_prune is not None and history.rounds_since_prune < schedule.min_recovery_rounds:
        return False
    if not history.losses:
        return False
    return history.losses[-1] <= schedule.recovery_factor * history.loss_best


def default_schedules() -> dict[str, PruneSchedule]:
    return {
        "iterative": PruneSchedule("iterative", 0.25, 0.80, min_recovery_rounds=3),
        "iterative_lt": PruneSchedule("iterative_lt", 0.415, 0.80, min_recovery_rounds=7,
                                      lth_reset=True, synchronized=True),
        "one_shot": PruneSchedule("one_shot", 0.70, 0.70),
        "one_shot_lt": PruneSchedule("one_shot_lt", 0.70, 0.70, lth_reset=True),
        "none": PruneSchedule("none"),
    }


def expected_prune_events(schedule: PruneSchedule) -> int:
    """Fewest prune events at the schedule's rate that reach its target sparsity."""
    if not schedule.prunes:
        raise ConfigError("schedule never prunes")
    k, kept = 0, 1.0
    while 1.0 - kept < schedule.target_sparsity - SPARSITY_TOL:
        kept *= 1.0 - schedule.rate
        k += 1
    return k
