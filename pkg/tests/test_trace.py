import json
import logging
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from budgetcascade.errors import DataError
from budgetcascade.money import Money, Usage
from budgetcascade.trace import (Dataset, Split, dump_trace, load_trace, normalize_answer, read_trace,
                                 record_from_json, record_to_json, reward_exact_match, reward_token_f1,
                                 save_trace, split_trace, trace_arrays)
from conftest import flat_market, rec


def test_normalization():
    assert normalize_answer("  The  Answer.  ") == "the answer"
    assert normalize_answer("What is 2+2 ?") == "what is 2+2"
    assert normalize_answer("UP!!") == "up"
    assert normalize_answer("") == ""


def test_exact_match():
    assert reward_exact_match("Up", "up.") == 1
    assert reward_exact_match("up", "down") == 0


def test_token_f1_hand_values():
    assert reward_token_f1("a b c", "a b c") == 1
    # 2 shared tokens, 3 + 2 total
    assert reward_token_f1("a b c", "a b") == Fraction(4, 5)
    assert reward_token_f1("a a b", "a") == Fraction(1, 2)
    assert reward_token_f1("", "") == 1
    assert reward_token_f1("a", "") == 0


@given(st.text(max_size=20), st.text(max_size=20))
def test_rewards_in_unit_interval(a, b):
    assert 0 <= reward_token_f1(a, b) <= 1
    assert reward_exact_match(a, b) in (0, 1)
    assert reward_token_f1(a, b) == reward_token_f1(b, a)


def _obj(qid="q1", answer="up"):
    return {"query_id": qid, "query_text": "gold up?", "true_answer": "up",
            "responses": [{"llm_id": "a", "answer_text": answer, "input_tokens": 5, "output_tokens": 1}]}


def test_record_json_roundtrip():
    r = rec("q1", "up", {"a": "up", "b": "down"})
    again = record_from_json(record_to_json(r))
    assert again == r
    assert again.responses["b"].reward == 0


def test_reward_recomputed_with_warning(caplog):
    obj = _obj(answer="down")
    obj["responses"][0]["reward"] = "1"
    with caplog.at_level(logging.WARNING):
        r = record_from_json(obj)
    assert r.responses["a"].reward == 0
    assert "recomputed" in caplog.text


def test_unknown_llm_rejected():
    with pytest.raises(DataError, match="unknown llm_id"):
        record_from_json(_obj(), flat_market({"b": 1}))


def test_duplicate_query_id_rejected():
    line = json.dumps(_obj())
    with pytest.raises(DataError, match="line 2: duplicate"):
        read_trace([line, line])


def test_bad_json_line_numbered():
    with pytest.raises(DataError, match="line 2"):
        read_trace([json.dumps(_obj()), "{nope"])


def test_empty_trace_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert read_trace([]) == []
    assert "empty" in caplog.text


def test_save_load_roundtrip(tmp_path, two_llm_trace):
    path = tmp_path / "t.jsonl"
    save_trace(two_llm_trace[:50], path)
    assert load_trace(path) == two_llm_trace[:50]
    assert dump_trace(load_trace(path)) == path.read_text()


def test_split_sizes_and_order(two_llm_trace):
    train, test = split_trace(two_llm_trace, 0.25, seed=3)
    assert len(test) == 150 and len(train) == 450
    assert train.split is Split.TRAIN and test.split is Split.TEST
    ids = [r.query_id for r in two_llm_trace]
    assert [r.query_id for r in train] == [i for i in ids if i in {r.query_id for r in train}]
    assert {r.query_id for r in train}.isdisjoint(r.query_id for r in test)


@given(st.integers(2, 60), st.fractions(min_value=Fraction(1, 100), max_value=Fraction(99, 100)),
       st.integers(0, 2**16))
def test_split_partitions(n, frac, seed):
    records = [rec(f"q{i}", "up", {"a": "up"}) for i in range(n)]
    train, test = split_trace(records, frac, seed)
    assert len(train) + len(test) == n
    assert 1 <= len(test) <= n - 1
    assert sorted(r.query_id for r in train.records + test.records) == sorted(r.query_id for r in records)
    assert split_trace(records, frac, seed) == (train, test)


def test_split_rejects_bad_fraction():
    records = [rec(f"q{i}", "up", {"a": "up"}) for i in range(4)]
    with pytest.raises(DataError):
        split_trace(records, 0, 1)
    with pytest.raises(DataError):
        split_trace(records[:1], 0.5, 1)


def test_llm_ids_common_sorted():
    ds = Dataset((rec("1", "up", {"b": "up", "a": "up", "c": "x"}), rec("2", "up", {"a": "up", "b": "x"})))
    assert ds.llm_ids() == ["a", "b"]


def test_trace_arrays():
    market = flat_market({"a": 5, "b": 7})
    arr = trace_arrays([rec("1", "up", {"a": "up", "b": "down"})], ["a", "b"], market)
    assert arr.correct.tolist() == [[True, False]]
    assert arr.costs.tolist() == [[5, 7]]
    assert arr.reward_exact == [[1, 0]]
    with pytest.raises(DataError):
        trace_arrays([rec("1", "up", {"a": "up"})], ["a", "b"], market)


def test_record_cost():
    r = rec("1", "up", {"a": "up"}, usage=(10, 2))
    from budgetcascade.money import PricingPlan, ProviderSpec
    market = {"a": ProviderSpec("a", "a", PricingPlan(Money(3), Money(5), Money(1)))}
    assert r.cost("a", market) == Money(10 * 3 + 2 * 5 + 1)
    assert r.responses["a"].usage == Usage(10, 2)
