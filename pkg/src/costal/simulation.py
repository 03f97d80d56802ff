"""Active-learning experiments on synthetic data.

Three modes share one round structure (train a committee on the labeled
set, evaluate it, pick stacks from the pool, reveal their labels):

``core_set``
    Start from a random fraction of the training split and double the
    labeled set each round, either by committee uncertainty (``qbc``) or
    uniformly at random (``random``).
``cost_sensitive``
    Start from a fraction of the training split and spend a fixed time
    budget per round on the pool split, with knapsack, uniform-cost or
    random selection. Feasibility uses predicted times; the annotator's
    clock charges ground-truth times.
``wild``
    One knapsack round against a pool drawn from a shifted domain, with the
    ensembles before and after augmentation evaluated on both test splits.

Pool labels live behind :class:`RevealOracle`, which hands out unlabeled
copies and records every reveal.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .committee import Committee, LearnerConfig, member_seeds, train_committee
from .core_data import ConfigError, HeatmapStack, Stack
from .cost_model import FitError, TimeSample, fit, predict
from .metrics import RegionMatchConfig, evaluate
from .heatmap_analysis import ThresholdSet, gt_features, mean_heatmap, stack_features
from .selection import Budget, SelectionItem, select
from .synthetic import (
    DomainParams,
    SyntheticConfig,
    TimeModel,
    generate_stack,
    generate_synthetic,
    label_time,
    shifted_pool_domain,
)
from .uncertainty import AggregationConfig, stack_uncertainty_from_heatmaps

__all__ = [
    "ALRoundResult",
    "DomainParams",
    "ExperimentConfig",
    "OracleError",
    "RevealOracle",
    "SyntheticConfig",
    "TimeModel",
    "generate_stack",
    "generate_synthetic",
    "label_time",
    "learning_curves",
    "run_core_set",
    "run_cost_sensitive",
    "run_experiment",
    "run_wild",
    "shifted_pool_domain",
]

log = logging.getLogger(__name__)

MODES = ("core_set", "cost_sensitive", "wild")
MODE_POLICIES = {
    "core_set": ("qbc", "random"),
    "cost_sensitive": ("knapsack", "ual", "random"),
    "wild": ("knapsack",),
}


class OracleError(RuntimeError):
    """A pool stack was revealed twice or does not exist."""


class RevealOracle:
    """Holds the labeled pool; hands out label-free copies until revealed."""

    def __init__(self, stacks: Iterable[Stack]):
        self._hidden = {s.id: s for s in stacks}
        self._unlabeled = {i: s.without_labels() for i, s in self._hidden.items()}
        self.reveals: list[str] = []

    def pool(self) -> list[Stack]:
        """Unlabeled copies of every unrevealed stack, in id order."""
        return [self._unlabeled[i] for i in sorted(self._unlabeled)]

    def pool_ids(self) -> list[str]:
        return sorted(self._unlabeled)

    def __len__(self) -> int:
        return len(self._unlabeled)

    def total_time(self) -> float:
        """Aggregate ground-truth time of the whole original pool.

        Only the sum is exposed; it sets the per-round budget.
        """
        return math.fsum(s.gt_label_time or 0.0 for s in self._hidden.values())

    def reveal(self, stack_id: str) -> Stack:
        if stack_id not in self._unlabeled:
            raise OracleError(f"{stack_id} is not an unrevealed pool stack")
        del self._unlabeled[stack_id]
        self.reveals.append(stack_id)
        return self._hidden[stack_id]

    def annotate(self, stack_id: str, time_left: float) -> tuple[Stack | None, float]:
        """Label one stack against the annotator's remaining clock.

        Returns the labeled stack and the time charged. If its ground-truth
        time exceeds ``time_left`` the annotator runs out of time: nothing is
        revealed and the whole remainder is charged.
        """
        if stack_id not in self._unlabeled:
            raise OracleError(f"{stack_id} is not an unrevealed pool stack")
        t = self._hidden[stack_id].gt_label_time
        if t is None:
            raise OracleError(f"{stack_id} has no ground-truth time")
        if t > time_left:
            return None, max(time_left, 0.0)
        return self.reveal(stack_id), t


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines an experiment's results.

    ``seed_fraction`` is the share of the training split labeled at the
    start. ``budget_fraction`` sets each cost-sensitive (or wild) round's
    budget as that share of the pool's total ground-truth time. ``stride``
    is the sliding-window step used for pool scoring and evaluation.
    """

    mode: str = "core_set"
    seed_fraction: float = 1 / 32
    rounds: int = 5
    budget_fraction: float = 0.10
    n_members: int = 4
    top_k: int = 74
    aggregation_patch: int = 8
    thresholds: tuple[float, ...] = (0.3, 0.5, 0.7)
    policies: tuple[str, ...] = ()
    replicate_seeds: tuple[int, ...] = tuple(range(10))
    seed: int = 0
    quantum: float = 1.0
    patch_size: int = 32
    stride: int = 32
    cost_features: str = "predicted"
    domain_shift: float = 1.0
    region_threshold: float = 0.5
    region_iou: float = 0.5
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    data: SyntheticConfig = field(default_factory=SyntheticConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.seed_fraction <= 1.0:
            raise ConfigError(f"seed_fraction must lie in (0, 1], got {self.seed_fraction}")
        if not 0.0 <= self.budget_fraction:
            raise ConfigError(f"budget_fraction must be >= 0, got {self.budget_fraction}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.n_members < 2:
            raise ConfigError("a query-by-committee experiment needs at least 2 members")
        if not self.replicate_seeds:
            raise ConfigError("need at least one replicate seed")
        if self.cost_features not in ("predicted", "gt"):
            raise ConfigError(f"cost_features must be 'predicted' or 'gt', got {self.cost_features!r}")
        allowed = MODE_POLICIES[self.mode]
        if self.mode == "cost_sensitive":
            allowed = allowed + ("greedy",)
        bad = [p for p in self.policies if p not in allowed]
        if bad:
            raise ConfigError(f"policies {bad} not available in mode {self.mode!r}; choose from {allowed}")
        # fail early on bad nested settings
        AggregationConfig(self.top_k, self.aggregation_patch)
        ThresholdSet(tuple(self.thresholds))
        RegionMatchConfig(self.region_threshold, self.region_iou)

    @property
    def active_policies(self) -> tuple[str, ...]:
        return tuple(self.policies) or MODE_POLICIES[self.mode]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"] = self.data.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if isinstance(d.get("learner"), dict):
            d["learner"] = LearnerConfig(**d["learner"])
        if isinstance(d.get("data"), dict):
            d["data"] = SyntheticConfig.from_dict(d["data"])
        for key in ("thresholds", "policies", "replicate_seeds"):
            if key in d and isinstance(d[key], list):
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ALRoundResult:
    """One point of a learning curve.

    ``selected`` is the batch the policy chose, in annotation order;
    ``added`` is the part of it the annotator finished within the budget.
    ``metrics`` maps a test split name to its AP values. ``wall_time`` is
    kept out of :meth:`to_json` unless asked for, so result files of
    identical runs are byte-identical.
    """

    replicate: int
    round: int
    policy: str
    n_labeled: int
    n_pool: int
    added: list[str] = field(default_factory=list)
    selected: list[str] = field(default_factory=list)
    budget_s: float | None = None
    spent_s: float = 0.0
    predicted_s: float | None = None
    overrun: bool = False
    committee_seed: int = 0
    metrics: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def n_added(self) -> int:
        return len(self.added)

    def to_json(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        d["n_added"] = self.n_added
        if not include_timing:
            d.pop("wall_time")
        return d


# ---------------------------------------------------------------------------
# shared round machinery


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class _Runner:
    """Committee training, caching and scoring for one experiment."""

    def __init__(self, exp: ExperimentConfig):
        self.exp = exp
        self.agg = AggregationConfig(exp.top_k, exp.aggregation_patch)
        self.thresholds = ThresholdSet(tuple(exp.thresholds))
        self.region = RegionMatchConfig(exp.region_threshold, exp.region_iou)
        self._cache: dict = {}

    def committee(self, labeled: Sequence[Stack], seed: int) -> Committee:
        key = (tuple(sorted(s.id for s in labeled)), seed)
        if key not in self._cache:
            ordered = sorted(labeled, key=lambda s: s.id)
            seeds = member_seeds(seed, self.exp.n_members)
            self._cache[key] = train_committee(ordered, self.exp.n_members, seeds, cfg=self.exp.learner)
        return self._cache[key]

    def heatmaps(self, committee: Committee, stack: Stack) -> list[HeatmapStack]:
        return committee.predict_stack(stack, self.exp.patch_size, self.exp.stride)

    def evaluate(self, committee: Committee, tests: dict[str, list[Stack]]) -> dict:
        out = {}
        for name, stacks in tests.items():
            preds = [mean_heatmap(self.heatmaps(committee, s)) for s in stacks]
            out[name] = evaluate(preds, [s.gt_masks for s in stacks], self.region)
        return out

    def score(self, committee: Committee, stacks: Sequence[Stack], with_features: bool):
        """Uncertainty value (and predicted-mask features) of each stack."""
        values, feats = {}, {}
        for s in stacks:
            hm = self.heatmaps(committee, s)
            values[s.id] = stack_uncertainty_from_heatmaps(hm, self.agg).value
            if with_features:
                feats[s.id] = stack_features(mean_heatmap(hm), self.thresholds)
        return values, feats


def _splits(stacks: Sequence[Stack]) -> dict[str, list[Stack]]:
    out: dict[str, list[Stack]] = {}
    for s in stacks:
        out.setdefault(s.split, []).append(s)
    for v in out.values():
        v.sort(key=lambda s: s.id)
    return out


def _seed_subset(train: Sequence[Stack], fraction: float, exp_seed: int, replicate: int) -> list[Stack]:
    n = max(1, int(round(len(train) * fraction)))
    rng = np.random.default_rng([exp_seed, replicate, 101])
    pick = np.sort(rng.choice(len(train), size=min(n, len(train)), replace=False))
    return [train[i] for i in pick]


def _top_by_value(values: dict[str, float], n: int) -> list[str]:
    return [i for i, _ in sorted(values.items(), key=lambda kv: (-kv[1], kv[0]))[:n]]


# ---------------------------------------------------------------------------
# core set


def _core_set_replicate(exp: ExperimentConfig, stacks: Sequence[Stack], replicate: int) -> list[ALRoundResult]:
    sp = _splits(stacks)
    train, test = sp.get("seed_trainval", []), {"seed_test": sp.get("seed_test", [])}
    if not train or not test["seed_test"]:
        raise ConfigError("core-set mode needs nonempty seed_trainval and seed_test splits")
    runner = _Runner(exp)
    seed_set = _seed_subset(train, exp.seed_fraction, exp.seed, replicate)
    seed_ids = {s.id for s in seed_set}
    results = []
    for policy in exp.active_policies:
        oracle = RevealOracle(s for s in train if s.id not in seed_ids)
        labeled = list(seed_set)
        added: list[str] = []
        for r in range(exp.rounds + 1):
            t0 = time.perf_counter()
            cseed = _derived_seed(exp.seed, replicate, r, 7)
            committee = runner.committee(labeled, cseed)
            res = ALRoundResult(replicate, r, policy, len(labeled), len(oracle), added, committee_seed=cseed)
            res.metrics = runner.evaluate(committee, test)
            results.append(res)
            if r == exp.rounds:
                res.wall_time = time.perf_counter() - t0
                break
            n_add = min(len(labeled), len(oracle))
            if n_add == 0:
                res.notes.append(f"pool exhausted after round {r}; remaining rounds skipped")
                log.info("replicate %d %s: %s", replicate, policy, res.notes[-1])
                res.wall_time = time.perf_counter() - t0
                break
            if n_add < len(labeled):
                res.notes.append(f"pool holds only {n_add} stacks; the next round adds them all")
            if policy == "qbc":
                values, _ = runner.score(committee, oracle.pool(), with_features=False)
                added = _top_by_value(values, n_add)
            else:
                ids = oracle.pool_ids()
                rng = np.random.default_rng([exp.seed, replicate, r, 211])
                added = sorted(ids[i] for i in rng.choice(len(ids), size=n_add, replace=False))
            labeled = labeled + [oracle.reveal(i) for i in added]
            res.wall_time = time.perf_counter() - t0
    return results


def run_core_set(exp: ExperimentConfig, stacks: Sequence[Stack] | None = None, jobs: int = 1) -> list[ALRoundResult]:
    """Labeled-set doubling from ``seed_fraction``, QBC against random."""
    exp = exp if exp.mode == "core_set" else replace(exp, mode="core_set", policies=())
    return _replicated(_core_set_replicate, exp, stacks, jobs)


# ---------------------------------------------------------------------------
# cost sensitive


def _fit_cost_model(labeled: Sequence[Stack], feats: dict, floor_default: float):
    """Fit on labeled stacks with positive features; floor from the rest.

    Returns ``(params, fallback_time, note)``; ``params`` is None when the
    fit is impossible, in which case every stack is predicted at
    ``fallback_time`` (the mean observed time).
    """
    samples, zero_times, all_times = [], [], []
    for s in labeled:
        f = feats[s.id]
        all_times.append(s.gt_label_time)
        if f.boundary_length > 0 and f.component_count > 0:
            samples.append(TimeSample(f.boundary_length, f.component_count, s.gt_label_time, s.id))
        else:
            zero_times.append(s.gt_label_time)
    floor = float(np.mean(zero_times)) if zero_times else floor_default
    try:
        return fit(samples, floor_time=floor), None, None
    except FitError as exc:
        return None, float(np.mean(all_times)), f"cost model not fitted ({exc}); using mean observed time"


def _labeled_features(runner: _Runner, committee: Committee, labeled: Sequence[Stack], mode: str) -> dict:
    if mode == "gt":
        return {s.id: gt_features(s.id, s.gt_masks) for s in labeled}
    return {s.id: stack_features(mean_heatmap(runner.heatmaps(committee, s)), runner.thresholds) for s in labeled}


def _annotation_order(chosen: list[str], policy: str, values: dict, predicted: dict) -> list[str]:
    """Order in which the annotator works through a batch: each policy's own
    priority (value per predicted second for knapsack and greedy, value for
    uniform cost, draw order for random)."""
    if policy in ("knapsack", "greedy"):
        return sorted(chosen, key=lambda i: (-values[i] / predicted[i], i))
    if policy == "ual":
        return sorted(chosen, key=lambda i: (-values[i], i))
    return list(chosen)


def _budget_round(
    runner: _Runner,
    committee: Committee,
    labeled: list[Stack],
    oracle: RevealOracle,
    budget_s: float,
    policy: str,
    rng_seed: int,
    res: ALRoundResult,
) -> list[Stack]:
    """Select under the budget, annotate, and fill in the round's accounting."""
    exp = runner.exp
    pool = oracle.pool()
    values, pool_feats = runner.score(committee, pool, with_features=True)
    lab_feats = _labeled_features(runner, committee, labeled, exp.cost_features)
    params, fallback, note = _fit_cost_model(labeled, lab_feats, exp.data.time_model.floor_time)
    if note:
        res.notes.append(note)
    predicted = {i: (predict(params, f) if params is not None else fallback) for i, f in pool_feats.items()}
    items = [SelectionItem(i, values[i], predicted[i]) for i in sorted(values)]
    chosen = select(items, Budget(budget_s, exp.quantum), policy, seed=rng_seed).chosen
    res.budget_s = budget_s
    res.predicted_s = math.fsum(predicted[i] for i in chosen)
    new, spent, annotated = [], 0.0, []
    res.selected = _annotation_order(chosen, policy, values, predicted)
    for i in res.selected:
        stack, charged = oracle.annotate(i, budget_s - spent)
        spent += charged
        if stack is None:
            res.overrun = True
            res.notes.append(f"annotator ran out of time at {i}; {len(chosen) - len(annotated)} chosen stacks left unlabeled")
            break
        new.append(stack)
        annotated.append(i)
    res.spent_s = spent
    res.added = annotated
    return new


def _cost_replicate(exp: ExperimentConfig, stacks: Sequence[Stack], replicate: int) -> list[ALRoundResult]:
    sp = _splits(stacks)
    train, pool = sp.get("seed_trainval", []), sp.get("pool", [])
    tests = {k: sp[k] for k in ("seed_test", "pool_test") if sp.get(k)}
    if not train or not tests:
        raise ConfigError("cost-sensitive mode needs seed_trainval and at least one test split")
    runner = _Runner(exp)
    seed_set = _seed_subset(train, exp.seed_fraction, exp.seed, replicate)
    budget_s = exp.budget_fraction * RevealOracle(pool).total_time()
    results = []
    for policy in exp.active_policies:
        oracle = RevealOracle(pool)
        labeled = list(seed_set)
        pending: ALRoundResult | None = None
        for r in range(exp.rounds + 1):
            t0 = time.perf_counter()
            cseed = _derived_seed(exp.seed, replicate, r, 7)
            committee = runner.committee(labeled, cseed)
            res = pending or ALRoundResult(replicate, r, policy, len(labeled), len(oracle), committee_seed=cseed)
            res.n_labeled, res.n_pool, res.committee_seed = len(labeled), len(oracle), cseed
            res.metrics = runner.evaluate(committee, tests)
            results.append(res)
            if r == exp.rounds:
                res.wall_time += time.perf_counter() - t0
                break
            nxt = ALRoundResult(replicate, r + 1, policy, 0, 0)
            if len(oracle) == 0:
                nxt.notes.append("pool exhausted; nothing to select")
                nxt.budget_s = budget_s
            else:
                labeled = labeled + _budget_round(
                    runner, committee, labeled, oracle, budget_s, policy, _derived_seed(exp.seed, replicate, r, 313), nxt
                )
            res.wall_time += time.perf_counter() - t0
            pending = nxt
    return results


def run_cost_sensitive(exp: ExperimentConfig, stacks: Sequence[Stack] | None = None, jobs: int = 1) -> list[ALRoundResult]:
    """Budgeted rounds on the pool split, one arm per selection policy.

    Round ``r > 0`` records the batch bought with round ``r``'s budget and
    the metrics of the committee retrained on it.
    """
    exp = exp if exp.mode == "cost_sensitive" else replace(exp, mode="cost_sensitive", policies=())
    return _replicated(_cost_replicate, exp, stacks, jobs)


# ---------------------------------------------------------------------------
# wild


def wild_data_config(exp: ExperimentConfig) -> SyntheticConfig:
    """Data config whose pool domain is the seed domain shifted by ``domain_shift``."""
    return replace(exp.data, pool_domain=shifted_pool_domain(exp.data.seed_domain, exp.domain_shift))


def _wild_replicate(exp: ExperimentConfig, stacks: Sequence[Stack], replicate: int) -> list[ALRoundResult]:
    sp = _splits(stacks)
    train, pool = sp.get("seed_trainval", []), sp.get("pool", [])
    tests = {k: sp.get(k, []) for k in ("seed_test", "pool_test")}
    if not train or not pool or not all(tests.values()):
        raise ConfigError("wild mode needs seed_trainval, pool, seed_test and pool_test splits")
    runner = _Runner(exp)
    oracle = RevealOracle(pool)
    budget_s = exp.budget_fraction * oracle.total_time()
    cseed = _derived_seed(exp.seed, replicate, 0, 7)

    t0 = time.perf_counter()
    labeled = list(train)
    base = runner.committee(labeled, cseed)
    before = ALRoundResult(replicate, 0, "baseline", len(labeled), len(oracle), committee_seed=cseed)
    before.metrics = runner.evaluate(base, tests)
    before.wall_time = time.perf_counter() - t0

    t0 = time.perf_counter()
    after = ALRoundResult(replicate, 1, "knapsack", 0, 0, committee_seed=cseed)
    labeled = labeled + _budget_round(
        runner, base, labeled, oracle, budget_s, "knapsack", _derived_seed(exp.seed, replicate, 0, 313), after
    )
    after.n_labeled, after.n_pool = len(labeled), len(oracle)
    after.metrics = runner.evaluate(runner.committee(labeled, cseed), tests)
    after.wall_time = time.perf_counter() - t0
    return [before, after]


def run_wild(exp: ExperimentConfig, stacks: Sequence[Stack] | None = None, jobs: int = 1) -> list[ALRoundResult]:
    """Baseline vs augmented ensemble per replicate, on both test domains.

    Without explicit ``stacks`` the data is generated with the pool domain
    shifted from the seed domain by ``exp.domain_shift``.
    """
    exp = exp if exp.mode == "wild" else replace(exp, mode="wild", policies=())
    if stacks is None:
        stacks, _ = generate_synthetic(wild_data_config(exp))
    return _replicated(_wild_replicate, exp, stacks, jobs)


# ---------------------------------------------------------------------------
# replicates and summaries


def _replicate_job(args):
    fn, exp, stacks, rep = args
    return fn(exp, stacks, rep)


def _replicated(
    fn: Callable[[ExperimentConfig, Sequence[Stack], int], list[ALRoundResult]],
    exp: ExperimentConfig,
    stacks: Sequence[Stack] | None,
    jobs: int,
) -> list[ALRoundResult]:
    if stacks is None:
        stacks, _ = generate_synthetic(exp.data)
    stacks = list(stacks)
    reps = list(exp.replicate_seeds)
    if jobs > 1 and len(reps) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(reps))) as pool:
            parts = list(pool.map(_replicate_job, [(fn, exp, stacks, r) for r in reps]))
    else:
        parts = [fn(exp, stacks, r) for r in reps]
    return [res for part in parts for res in part]


def run_experiment(exp: ExperimentConfig, stacks: Sequence[Stack] | None = None, jobs: int = 1) -> list[ALRoundResult]:
    runners = {"core_set": run_core_set, "cost_sensitive": run_cost_sensitive, "wild": run_wild}
    return runners[exp.mode](exp, stacks, jobs)


def learning_curves(results: Sequence[ALRoundResult]) -> list[dict]:
    """Mean and sample standard deviation over replicates, per
    (policy, round, test split, metric)."""
    groups: dict[tuple, list[float]] = {}
    extra: dict[tuple, list[tuple[int, int]]] = {}
    for res in results:
        for split, m in res.metrics.items():
            for name, v in m.items():
                if isinstance(v, dict):
                    continue
                key = (res.policy, res.round, split, name)
                groups.setdefault(key, []).append(float(v))
                extra.setdefault(key, []).append((res.n_labeled, res.n_pool))
    rows = []
    for key in sorted(groups):
        v = np.array(groups[key])
        sizes = np.array(extra[key], dtype=float)
        rows.append(
            {
                "policy": key[0],
                "round": key[1],
                "split": key[2],
                "metric": key[3],
                "n": int(v.size),
                "mean": float(v.mean()),
                "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
                "mean_labeled": float(sizes[:, 0].mean()),
                "pool_to_labeled": float(sizes[:, 1].mean() / sizes[:, 0].mean()),
            }
        )
    return rows
