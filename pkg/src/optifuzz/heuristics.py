"""Feedback machinery: fitness, tournament seed selection, rule contributions.

A round's fitness is the mean of the test input tensor when it triggered a
crash or NaN finding, the maximum observed inconsistency when it triggered an
inconsistency finding, and 0 otherwise.  Each mutation rule accumulates a
contribution c updated by the fitness delta of the models it produced, and is
selected with probability c / sum(c) over the expanded rule universe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .difftest import RoundResult, RoundStatus
from .graphs import GraphModel
from .tensors import Tensor

CONTRIBUTION_FLOOR = 1e-3


class EmptyPool(Exception):
    pass


@dataclass(frozen=True)
class FitnessRecord:
    model_hash: str
    fitness: float


_FITNESS_CAP = 1e9


def compute_fitness(result: RoundResult, x: Tensor) -> float:
    """Fitness credited to the model executed in a classified round.

    Clamped to [0, 1e9]: negative tensor means would break the non-negativity
    the ranking relies on, and infinite deviations (overflowed outputs) would
    poison the contribution totals.
    """
    if result.status in (RoundStatus.CRASH, RoundStatus.NAN):
        raw = float(np.mean(x.to_f64()))
    elif result.status is RoundStatus.INCONSISTENCY and result.bug is not None:
        raw = max(result.bug.inconsistency_values.values())
    else:
        return 0.0
    if not np.isfinite(raw):
        raw = _FITNESS_CAP if raw > 0 else 0.0
    return float(min(max(raw, 0.0), _FITNESS_CAP))


@dataclass(frozen=True)
class RuleStats:
    """Per-rule contribution totals over the expanded rule universe."""

    contributions: Mapping[str, float]

    @staticmethod
    def uniform(rules: Sequence[str], initial: float = 1.0) -> "RuleStats":
        return RuleStats({rule: initial for rule in rules})

    def contribution(self, rule: str) -> float:
        return self.contributions[rule]


def update_contribution(
    stats: RuleStats, rule: str, fitness_new: float, fitness_old: float
) -> RuleStats:
    """c <- max(floor, c + (fitness_new - fitness_old)); other rules unchanged."""
    if rule not in stats.contributions:
        raise KeyError(rule)
    updated = dict(stats.contributions)
    updated[rule] = max(CONTRIBUTION_FLOOR, updated[rule] + (fitness_new - fitness_old))
    return RuleStats(updated)


def rule_probabilities(stats: RuleStats) -> dict[str, float]:
    total = sum(stats.contributions.values())
    return {rule: c / total for rule, c in stats.contributions.items()}


def sample_rule(stats: RuleStats, rng: np.random.Generator) -> str:
    rules = sorted(stats.contributions)
    probs = rule_probabilities(stats)
    weights = np.asarray([probs[r] for r in rules])
    return rules[int(rng.choice(len(rules), p=weights / weights.sum()))]


@dataclass
class PoolEntry:
    model: GraphModel
    record: FitnessRecord
    age: int  # insertion counter; larger is more recent


@dataclass
class SeedPool:
    """Fitness-ranked pool of seed models with capacity-bound eviction.

    Eviction removes the lowest-fitness entry, oldest first on ties; the
    initial seed is only evictable once the pool has filled.
    """

    capacity: int
    entries: list[PoolEntry] = field(default_factory=list)
    _counter: int = 0

    def insert(self, model: GraphModel, record: FitnessRecord) -> None:
        self.entries.append(PoolEntry(model, record, self._counter))
        self._counter += 1
        if len(self.entries) > self.capacity:
            victim = min(self.entries, key=lambda e: (e.record.fitness, e.age))
            self.entries.remove(victim)

    def __len__(self) -> int:
        return len(self.entries)

    def tournament_select(self, k: int, rng: np.random.Generator) -> PoolEntry:
        """Best of k uniform draws with replacement; ties go to the most recent."""
        if not self.entries:
            raise EmptyPool("seed pool is empty")
        if k < 1:
            raise ValueError("tournament size must be >= 1")
        picks = [self.entries[int(rng.integers(0, len(self.entries)))] for _ in range(k)]
        return max(picks, key=lambda e: (e.record.fitness, e.age))
