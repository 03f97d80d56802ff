import json

import numpy as np
import pytest

from costal.committee import LearnerConfig
from costal.core_data import ConfigError
from costal.simulation import (
    ExperimentConfig,
    OracleError,
    RevealOracle,
    learning_curves,
    run_core_set,
    run_cost_sensitive,
    run_experiment,
    run_wild,
)
from costal.synthetic import SyntheticConfig, generate_synthetic

DATA = SyntheticConfig(height=32, width=32, frames_range=(3, 4), n_trainval=16, n_test=8, n_pool=16, n_pool_test=8)
LEARNER = LearnerConfig(patch_size=16, epochs=2)


def small(mode, **kw):
    base = dict(mode=mode, data=DATA, learner=LEARNER, patch_size=16, stride=16, top_k=4,
                replicate_seeds=(0, 1), rounds=2, seed_fraction=0.25)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def stacks():
    return generate_synthetic(DATA)[0]


def as_json(results):
    return json.dumps([r.to_json() for r in results], sort_keys=True, allow_nan=True)


def test_oracle_hygiene(stacks):
    pool = [s for s in stacks if s.split == "pool"]
    oracle = RevealOracle(pool)
    assert all(s.gt_masks is None and s.gt_label_time is None for s in oracle.pool())
    first = oracle.pool_ids()[0]
    assert oracle.reveal(first).gt_masks is not None
    with pytest.raises(OracleError):
        oracle.reveal(first)
    assert oracle.reveals == [first] and len(oracle) == len(pool) - 1
    sid = oracle.pool_ids()[0]
    t = next(s.gt_label_time for s in pool if s.id == sid)
    assert oracle.annotate(sid, t / 2) == (None, t / 2)
    assert sid in oracle.pool_ids()
    stack, charged = oracle.annotate(sid, t)
    assert stack.id == sid and charged == t


def test_core_set_doubling_and_conservation(stacks):
    res = run_core_set(small("core_set", rounds=3), stacks)
    for policy in ("qbc", "random"):
        for rep in (0, 1):
            rows = [r for r in res if r.policy == policy and r.replicate == rep]
            assert [r.n_labeled for r in rows] == [4, 8, 16]
            assert all(r.n_labeled + r.n_pool == 16 for r in rows)
            added = [i for r in rows for i in r.added]
            assert len(added) == len(set(added)) == 12
            assert rows[-1].n_pool == 0 and "pool exhausted" in rows[-1].notes[-1]


def test_core_set_single_round_on_empty_pool(stacks):
    res = run_core_set(small("core_set", rounds=1, seed_fraction=1.0, replicate_seeds=(0,)), stacks)
    assert {r.round for r in res} == {0}
    assert all(r.n_pool == 0 and r.metrics["seed_test"]["stack_ap"] >= 0 for r in res)


def test_core_set_arms_share_round_zero(stacks):
    res = run_core_set(small("core_set", replicate_seeds=(0,)), stacks)
    r0 = [r for r in res if r.round == 0]
    assert r0[0].metrics == r0[1].metrics and r0[0].committee_seed == r0[1].committee_seed


def test_determinism(stacks):
    exp = small("cost_sensitive", rounds=1)
    assert as_json(run_cost_sensitive(exp, stacks)) == as_json(run_cost_sensitive(exp, stacks))


def test_parallel_matches_serial(stacks):
    exp = small("core_set", rounds=1)
    assert as_json(run_core_set(exp, stacks, jobs=2)) == as_json(run_core_set(exp, stacks, jobs=1))


def test_cost_sensitive_budget_accounting(stacks):
    res = run_cost_sensitive(small("cost_sensitive"), stacks)
    assert {r.policy for r in res} == {"knapsack", "ual", "random"}
    for r in res:
        if r.round == 0:
            assert r.added == [] and r.budget_s is None
            continue
        assert r.spent_s <= r.budget_s + 1e-9
        assert r.n_labeled + r.n_pool == 4 + 16
    for policy in ("knapsack", "ual", "random"):
        for rep in (0, 1):
            added = [i for r in res if r.policy == policy and r.replicate == rep for i in r.added]
            assert len(added) == len(set(added))


def test_cost_sensitive_full_budget_takes_whole_pool(stacks):
    exp = small("cost_sensitive", rounds=1, budget_fraction=1.5, policies=("knapsack",), cost_features="gt",
                replicate_seeds=(0,))
    res = run_cost_sensitive(exp, stacks)
    assert res[-1].n_pool == 0 and res[-1].n_added == 16


def test_zero_budget_round_is_empty(stacks):
    res = run_cost_sensitive(small("cost_sensitive", rounds=1, budget_fraction=0.0, replicate_seeds=(0,)), stacks)
    for r in res:
        assert r.added == [] and r.spent_s == 0.0
    assert all(r.n_labeled == 4 for r in res)


def test_wild_budget_zero_is_identity():
    exp = small("wild", budget_fraction=0.0, replicate_seeds=(0,))
    before, after = run_wild(exp)
    assert after.added == [] and before.metrics == after.metrics
    assert set(before.metrics) == {"seed_test", "pool_test"}


def test_wild_round_adds_from_pool():
    before, after = run_wild(small("wild", budget_fraction=0.3, replicate_seeds=(0,)))
    assert after.n_added > 0 and after.n_labeled == before.n_labeled + after.n_added
    assert all(i.startswith("pool_") for i in after.added)


def test_learning_curves(stacks):
    res = run_experiment(small("core_set", rounds=1), stacks)
    rows = learning_curves(res)
    row = next(r for r in rows if r["policy"] == "qbc" and r["round"] == 1 and r["metric"] == "stack_ap")
    vals = [r.metrics["seed_test"]["stack_ap"] for r in res if r.policy == "qbc" and r.round == 1]
    assert row["n"] == 2 and row["mean"] == pytest.approx(np.mean(vals))
    assert row["std"] == pytest.approx(np.std(vals, ddof=1))
    assert row["pool_to_labeled"] == pytest.approx(8 / 8)


def test_config_validation_and_round_trip():
    with pytest.raises(ConfigError):
        ExperimentConfig(mode="bogus")
    with pytest.raises(ConfigError):
        ExperimentConfig(seed_fraction=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(mode="core_set", policies=("knapsack",))
    with pytest.raises(ConfigError):
        ExperimentConfig(n_members=1)
    exp = small("cost_sensitive")
    assert ExperimentConfig.from_dict(json.loads(json.dumps(exp.to_dict()))) == exp
