"""Budgeted batch selection over (value, time) items.

``knapsack_select`` is the cost-sensitive policy: an exact 0-1 knapsack over
times discretized to ``ceil(T / quantum)`` against a capacity of
``floor(Q / quantum)``. Rounding the weights up means a discretized-feasible
set never overruns the real budget.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core_data import ConfigError

log = logging.getLogger(__name__)

DEFAULT_MAX_CELLS = 10_000_000
POLICIES = ("knapsack", "ual", "random", "greedy")


class CapacityError(ConfigError):
    """DP table would exceed the configured cell ceiling."""


@dataclass(frozen=True)
class SelectionItem:
    stack_id: str
    value: float
    time: float

    def __post_init__(self):
        if not (self.value >= 0 and math.isfinite(self.value)):
            raise ValueError(f"{self.stack_id}: value must be finite and >= 0, got {self.value}")
        if not (self.time > 0 and math.isfinite(self.time)):
            raise ValueError(f"{self.stack_id}: time must be finite and > 0, got {self.time}")


@dataclass(frozen=True)
class Budget:
    seconds: float
    quantum: float = 1.0
    max_cells: int = DEFAULT_MAX_CELLS

    def __post_init__(self):
        if not (self.seconds >= 0 and math.isfinite(self.seconds)):
            raise ConfigError(f"budget must be finite and >= 0, got {self.seconds}")
        if not self.quantum > 0:
            raise ConfigError(f"quantum must be > 0, got {self.quantum}")

    @property
    def capacity(self) -> int:
        return int(math.floor(self.seconds / self.quantum))

    def weight(self, t: float) -> int:
        return max(1, int(math.ceil(t / self.quantum)))


@dataclass
class SelectionResult:
    policy: str
    chosen: list[str] = field(default_factory=list)
    total_value: float = 0.0
    total_time: float = 0.0
    budget_s: float = 0.0

    def to_json(self) -> dict:
        return {
            "policy": self.policy,
            "chosen": list(self.chosen),
            "n_chosen": len(self.chosen),
            "total_value": self.total_value,
            "total_time": self.total_time,
            "budget_s": self.budget_s,
        }


def _result(policy: str, picked: Sequence[SelectionItem], budget: Budget) -> SelectionResult:
    return SelectionResult(
        policy=policy,
        chosen=[it.stack_id for it in picked],
        total_value=math.fsum(it.value for it in picked),
        total_time=math.fsum(it.time for it in picked),
        budget_s=budget.seconds,
    )


def _check(items: Sequence[SelectionItem]) -> list[SelectionItem]:
    items = list(items)
    if not items:
        raise ValueError("selection needs a nonempty item pool")
    ids = [it.stack_id for it in items]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate stack ids in selection pool")
    return items


def knapsack_select(items: Sequence[SelectionItem], budget: Budget) -> SelectionResult:
    """Exact 0-1 knapsack by dynamic programming over integer capacity.

    Items are processed in stack-id order and an item only replaces the
    incumbent on strict improvement, so among equal-value optima the one
    built from earlier ids wins. Raises :class:`CapacityError` when
    ``n * (capacity + 1)`` exceeds ``budget.max_cells``.
    """
    items = sorted(_check(items), key=lambda it: it.stack_id)
    cap = budget.capacity
    n = len(items)
    if n * (cap + 1) > budget.max_cells:
        raise CapacityError(
            f"knapsack table {n} x {cap + 1} exceeds {budget.max_cells} cells; raise the quantum "
            f"(currently {budget.quantum} s) to at least {budget.seconds * n / budget.max_cells:.3g} s"
        )
    weights = [budget.weight(it.time) for it in items]
    best = np.zeros(cap + 1)
    take = np.zeros((n, cap + 1), dtype=bool)
    for i, (it, w) in enumerate(zip(items, weights)):
        if w > cap:
            continue
        cand = best[: cap + 1 - w] + it.value
        better = cand > best[w:]
        take[i, w:] = better
        best[w:] = np.where(better, cand, best[w:])
    picked = []
    c = cap
    for i in range(n - 1, -1, -1):
        if take[i, c]:
            picked.append(items[i])
            c -= weights[i]
    picked.reverse()
    return _result("knapsack", picked, budget)


def uniform_cost_select(items: Sequence[SelectionItem], budget: Budget) -> SelectionResult:
    """Highest value first, stopping at the first item that would overrun."""
    ranked = sorted(_check(items), key=lambda it: (-it.value, it.stack_id))
    picked, spent = [], 0.0
    for it in ranked:
        if spent + it.time > budget.seconds:
            break
        picked.append(it)
        spent += it.time
    return _result("ual", picked, budget)


def random_select(items: Sequence[SelectionItem], budget: Budget, seed: int = 0) -> SelectionResult:
    """Scan a seeded random permutation, adding every item that still fits."""
    items = sorted(_check(items), key=lambda it: it.stack_id)
    order = np.random.default_rng(seed).permutation(len(items))
    picked, spent = [], 0.0
    for i in order:
        it = items[i]
        if spent + it.time <= budget.seconds:
            picked.append(it)
            spent += it.time
    return _result("random", picked, budget)


def greedy_ratio_select(items: Sequence[SelectionItem], budget: Budget) -> SelectionResult:
    """Value/time descending, skipping items that don't fit.

    Feasibility uses the same discretized weights as the knapsack, so the
    result is a feasible point of the DP instance and never beats it.
    """
    ranked = sorted(_check(items), key=lambda it: (-it.value / it.time, it.stack_id))
    cap = budget.capacity
    picked, used = [], 0
    for it in ranked:
        w = budget.weight(it.time)
        if used + w <= cap:
            picked.append(it)
            used += w
    return _result("greedy", picked, budget)


def select(items: Sequence[SelectionItem], budget: Budget, policy: str = "knapsack", seed: int = 0) -> SelectionResult:
    """Dispatch by policy name; knapsack falls back to greedy past the DP ceiling."""
    if policy == "knapsack":
        try:
            return knapsack_select(items, budget)
        except CapacityError as exc:
            log.warning("%s; falling back to greedy ratio selection", exc)
            return greedy_ratio_select(items, budget)
    if policy == "ual":
        return uniform_cost_select(items, budget)
    if policy == "random":
        return random_select(items, budget, seed)
    if policy == "greedy":
        return greedy_ratio_select(items, budget)
    raise ConfigError(f"unknown policy {policy!r}; expected one of {POLICIES}")
