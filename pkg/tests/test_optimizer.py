from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from budgetcascade.cascade import evaluate_cascade
from budgetcascade.errors import DataError
from budgetcascade.money import Money
from budgetcascade.optimizer import (OptimizerConfig, brute_force_oracle, enumerate_lists, optimize,
                                     pairwise_disagreement, threshold_grid)
from budgetcascade.scorer import ConstantScorer
from conftest import flat_market, random_instance, rec


def singleton_costs(records, market):
    return {x: Fraction(sum(r.cost(x, market).nano_usd for r in records), len(records)) for x in market}


def test_threshold_grid():
    g = threshold_grid(np.array([0.2, 0.4, 0.6, 0.8]), 5)
    assert g[0] == 0.0 and g[-1] == 1.0
    assert np.all(np.diff(g) > 0)
    assert set(g[1:-1]) <= {0.2, 0.4, 0.6, 0.8}
    assert threshold_grid(np.array([0.5]), 2).tolist() == [0.0, 1.0]
    assert len(threshold_grid(np.full(10, 0.3), 9)) == 3


def test_enumerate_counts_and_pruning():
    market = flat_market({"a": 1, "b": 2, "c": 3})
    same = [rec(str(i), "up", {"a": "up", "b": "up", "c": "down" if i % 2 else "up"}) for i in range(10)]
    all_lists = enumerate_lists(market, same, OptimizerConfig(Money(1), max_length=3, disagreement_floor=0))
    assert len(all_lists) == 3 + 6 + 6
    pruned = enumerate_lists(market, same, OptimizerConfig(Money(1), max_length=3, disagreement_floor=0.02))
    # a and b never disagree: any list with a-b or b-a adjacent is dropped
    assert ("a", "b") not in pruned and ("c", "a", "b") not in pruned
    assert ("a", "c", "b") in pruned
    assert all((x,) in pruned for x in "abc")
    assert pairwise_disagreement(same, "a", "c") == Fraction(1, 2)
    with pytest.raises(DataError):
        pairwise_disagreement([rec("1", "up", {"a": "up"})], "a", "b")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 60), st.integers(2, 9),
       st.sampled_from([None, 4, 10]))
def test_matches_oracle(seed, k, n, grid, levels):
    rng = np.random.default_rng(seed)
    records, market, scorer = random_instance(rng, k, n, levels)
    costs = singleton_costs(records, market)
    budget = Money(int(rng.uniform(0.5, 2.5) * float(min(costs.values()))) + 1)
    cfg = OptimizerConfig(budget, max_length=min(k, 3), grid_size=grid, disagreement_floor=0.0)
    got = optimize(records, scorer, market, cfg)
    want = brute_force_oracle(records, scorer, market, cfg)
    assert got.feasible == want.feasible
    assert got.train_mean_reward == want.train_mean_reward
    if got.feasible:
        assert got.train_total_cost.nano_usd <= budget.nano_usd * n
        # same tie-breaking: identical cost too
        assert got.train_total_cost == want.train_total_cost
        assert got.best.llm_ids == want.best.llm_ids


def test_fractional_rewards_match_oracle():
    rng = np.random.default_rng(4)
    for _ in range(5):
        records, market, scorer = random_instance(rng, 3, 40, binary=False)
        cfg = OptimizerConfig(Money(10**9), max_length=3, grid_size=5, disagreement_floor=0.0)
        assert optimize(records, scorer, market, cfg).train_mean_reward == \
            brute_force_oracle(records, scorer, market, cfg).train_mean_reward


def test_winner_replays_within_budget():
    rng = np.random.default_rng(9)
    records, market, scorer = random_instance(rng, 4, 120)
    for b in (2000, 5000, 10000, 30000):
        res = optimize(records, scorer, market, OptimizerConfig(Money(b)))
        ev = evaluate_cascade(res.best, scorer, records, market)
        assert ev.mean_reward == res.train_mean_reward
        if res.feasible:
            assert ev.within(Money(b))


def test_infeasible_returns_cheapest_singleton():
    market = flat_market({"a": 5, "b": 3})
    records = [rec(str(i), "up", {"a": "up", "b": "down"}) for i in range(4)]
    res = optimize(records, ConstantScorer(0.5), market, OptimizerConfig(Money(1)))
    assert not res.feasible
    assert res.best.llm_ids == ("b",)


def test_generous_budget_dominates_singletons():
    rng = np.random.default_rng(12)
    records, market, scorer = random_instance(rng, 4, 100)
    res = optimize(records, scorer, market, OptimizerConfig(Money(10**12)))
    best_single = max(sum(r.responses[x].reward for r in records) for x in market) / len(records)
    assert res.train_mean_reward >= best_single


def test_tie_break_prefers_cheaper_then_shorter():
    market = flat_market({"a": 1, "b": 2})
    records = [rec(str(i), "up", {"a": "up", "b": "up"}) for i in range(5)]
    res = optimize(records, ConstantScorer(0.5), market, OptimizerConfig(Money(100), disagreement_floor=0))
    assert res.best.llm_ids == ("a",)
    assert res.train_mean_cost == Money(1)


def test_subsample_runs_and_respects_budget():
    rng = np.random.default_rng(5)
    records, market, scorer = random_instance(rng, 4, 300)
    cfg = OptimizerConfig(Money(8000), subsample=0.3, rerank_top=10, seed=2)
    res = optimize(records, scorer, market, cfg)
    if res.feasible:
        assert res.train_total_cost.nano_usd <= 8000 * 300
    full = optimize(records, scorer, market, OptimizerConfig(Money(8000)))
    assert res.train_mean_reward <= full.train_mean_reward


def test_optimizer_validates_inputs():
    market = flat_market({"a": 1})
    with pytest.raises(DataError):
        optimize([], ConstantScorer(), market, OptimizerConfig(Money(1)))
    with pytest.raises(DataError):
        optimize([rec("1", "up", {"a": "up"})], ConstantScorer(), market, OptimizerConfig(Money(0)))
    with pytest.raises(DataError):
        OptimizerConfig(Money(1), grid_size=1)
    with pytest.raises(DataError):
        OptimizerConfig(Money(1), subsample=0)


def test_oracle_guard():
    rng = np.random.default_rng(0)
    records, market, scorer = random_instance(rng, 6, 10)
    with pytest.raises(DataError, match="guard"):
        brute_force_oracle(records, scorer, market, OptimizerConfig(Money(10**6)))


def test_backends_give_same_winner(backend):
    rng = np.random.default_rng(21)
    records, market, scorer = random_instance(rng, 3, 80)
    res = optimize(records, scorer, market, OptimizerConfig(Money(6000), disagreement_floor=0))
    want = brute_force_oracle(records, scorer, market, OptimizerConfig(Money(6000), disagreement_floor=0))
    assert res.train_mean_reward == want.train_mean_reward
    assert res.search_stats["backend"] == backend


def test_budget_monotone_rewards():
    rng = np.random.default_rng(33)
    records, market, scorer = random_instance(rng, 3, 100)
    prev = Fraction(-1)
    for b in range(500, 20000, 1500):
        r = optimize(records, scorer, market, OptimizerConfig(Money(b))).train_mean_reward
        assert r >= prev
        prev = r


def test_result_json():
    market = flat_market({"a": 1})
    res = optimize([rec("1", "up", {"a": "up"})], ConstantScorer(), market, OptimizerConfig(Money(5)))
    js = res.to_json()
    assert js["train_mean_reward"] == "1" and js["feasible"] is True
    assert js["cascade"]["llm_ids"] == ["a"]
