from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from budgetcascade.analysis import (FrontierPoint, SingletonReport, best_singleton, budget_sweep,
                                    cost_savings_report, mpi, mpi_matrix, read_frontier_csv,
                                    read_mpi_csv, read_savings_csv, summarize, write_frontier_csv,
                                    write_mpi_csv, write_savings_csv)
from budgetcascade.cascade import CascadeConfig, evaluate_cascade
from budgetcascade.errors import DataError
from budgetcascade.money import Money
from budgetcascade.optimizer import OptimizerConfig, brute_force_oracle
from budgetcascade.scorer import ConstantScorer
from conftest import random_instance, rec


def hand_trace():
    # A right & B wrong on records 0, 1, 2; both right on 3, 4; B only on 5; both wrong on 6..9
    pattern = [(1, 0)] * 3 + [(1, 1)] * 2 + [(0, 1)] + [(0, 0)] * 4
    return [rec(str(i), "up", {"A": "up" if a else "no", "B": "up" if b else "no"})
            for i, (a, b) in enumerate(pattern)]


def disjoint_halves(n=40):
    return [rec(str(i), "up", {"A": "up" if i % 2 else "no", "B": "no" if i % 2 else "up"}) for i in range(n)]


def test_mpi_hand_counts():
    t = hand_trace()
    assert mpi(t, "A", "B") == Fraction(3, 10)
    assert mpi(t, "B", "A") == Fraction(1, 10)
    assert mpi(t, "A", "A") == 0


def test_mpi_extremes_and_errors():
    t = [rec(str(i), "up", {"A": "up", "B": "no"}) for i in range(5)]
    assert mpi(t, "A", "B") == 1
    with pytest.raises(DataError):
        mpi(t, "A", "C")


def test_matrix_orientation_and_diagonal():
    m = mpi_matrix(hand_trace(), ["A", "B"])
    assert m.values[0][0] == m.values[1][1] == 0
    # values[row][col] = MPI of the column LLM with respect to the row LLM
    assert m["B", "A"] == mpi(hand_trace(), "A", "B") == Fraction(3, 10)
    assert m["A", "B"] == Fraction(1, 10)


def test_disjoint_halves_exact():
    m = mpi_matrix(disjoint_halves(), ["A", "B"])
    assert m.values == ((0, Fraction(1, 2)), (Fraction(1, 2), 0))


def test_single_llm_matrix_and_csv_roundtrip():
    t = [rec("1", "up", {"A": "up"})]
    assert mpi_matrix(t, ["A"]).values == ((0,),)
    m = mpi_matrix(hand_trace(), ["A", "B"])
    text = write_mpi_csv(m)
    assert text == write_mpi_csv(mpi_matrix(hand_trace(), ["A", "B"]))
    assert read_mpi_csv(text) == m
    assert text.splitlines()[0] == "row_llm,col_llm,value,value_exact"


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mpi_union_bound(seed):
    rng = np.random.default_rng(seed)
    records, market, scorer = random_instance(rng, 3, 60)
    ids = list(market)
    res = brute_force_oracle(records, scorer, market, OptimizerConfig(Money(10**9), grid_size=4))
    acc = evaluate_cascade(res.best, scorer, records, market).mean_reward
    used = res.best.llm_ids
    for b in used:
        base = sum(r.responses[b].reward for r in records) / len(records)
        assert acc <= base + sum(mpi(records, a, b) for a in used if a != b)
    assert all(0 <= v <= 1 for row in mpi_matrix(records, ids).values for v in row)


def _point(budget, reward, cost, ids=("a",)):
    return FrontierPoint(Money(budget), CascadeConfig(ids, (0.0,) * len(ids)), Fraction(reward), Money(cost))


def test_savings_report_cases():
    single = SingletonReport("big", Fraction(9, 10), Money(100))
    rep = cost_savings_report([_point(1, "0.8", 10), _point(2, "0.9", 20), _point(3, "0.95", 50)], single)
    assert rep.matching_cost == Money(20) and rep.savings_fraction == Fraction(4, 5)
    itself = cost_savings_report([_point(1, "0.5", 10), _point(9, "0.9", 100)], single)
    assert itself.savings_fraction == 0
    none = cost_savings_report([_point(1, "0.5", 10)], single)
    assert not none.matched and none.savings_fraction is None
    with pytest.raises(DataError):
        cost_savings_report([], single)
    text = write_savings_csv([rep, none])
    assert "no match" in text
    assert read_savings_csv(text) == [rep, none]


def test_sweep_monotone_and_csv_roundtrip():
    rng = np.random.default_rng(2)
    records, market, scorer = random_instance(rng, 3, 120)
    train, test = records[:80], records[80:]
    budgets = [Money(b) for b in (800, 2000, 4000, 8000, 16000, 10**9)]
    points = budget_sweep(train, test, scorer, market, budgets)
    rewards = [p.train_mean_reward for p in points]
    assert rewards == sorted(rewards)
    single = best_singleton(train, test, market)
    train_best = max(sum(r.responses[x].reward for r in train) for x in market) / len(train)
    assert points[-1].train_mean_reward >= train_best
    text = write_frontier_csv(points)
    back = read_frontier_csv(text)
    assert [(p.budget, p.config.llm_ids, p.config.thresholds, p.test_mean_reward, p.test_mean_cost)
            for p in back] == [(p.budget, p.config.llm_ids, p.config.thresholds, p.test_mean_reward,
                                p.test_mean_cost) for p in points]
    assert "budget_usd,reward,cost_usd,list,thresholds" in text.splitlines()[0]
    assert single.llm_id in market
    assert "savings" in summarize(points, cost_savings_report(points, single)) or \
        "no frontier point" in summarize(points, cost_savings_report(points, single))


def test_sweep_matches_oracle_per_budget():
    rng = np.random.default_rng(8)
    records, market, scorer = random_instance(rng, 3, 60)
    budgets = [Money(b) for b in (1000, 3000, 9000)]
    base = OptimizerConfig(budgets[0], grid_size=5, disagreement_floor=0)
    for p, b in zip(budget_sweep(records, records, scorer, market, budgets, base), budgets):
        want = brute_force_oracle(records, scorer, market, OptimizerConfig(b, grid_size=5, disagreement_floor=0))
        assert p.train_mean_reward == want.train_mean_reward


def test_sweep_rejects_unsorted():
    with pytest.raises(DataError):
        budget_sweep([rec("1", "up", {"a": "up"})], [], ConstantScorer(), {}, [Money(2), Money(1)])
