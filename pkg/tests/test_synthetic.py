import numpy as np
import pytest

from budgetcascade.errors import DataError
from budgetcascade.synthetic import SyntheticLlm, SyntheticSpec, pattern_distribution, synthesize_trace
from conftest import two_llm_spec


def _marginal(probs, j):
    idx = np.arange(len(probs))
    return probs[(idx >> j) & 1 == 1].sum()


def test_independent_patterns():
    probs = pattern_distribution(two_llm_spec(0.8, 0.9))
    assert probs == pytest.approx([0.2 * 0.1, 0.8 * 0.1, 0.2 * 0.9, 0.8 * 0.9])


def test_overlap_constraints_met():
    spec = SyntheticSpec([SyntheticLlm("a", 0.6), SyntheticLlm("b", 0.5), SyntheticLlm("c", 0.7)],
                         {("a", "b"): 0.1})
    probs = pattern_distribution(spec)
    assert probs.sum() == pytest.approx(1.0)
    assert (probs >= 0).all()
    for j, acc in enumerate([0.6, 0.5, 0.7]):
        assert _marginal(probs, j) == pytest.approx(acc, abs=1e-9)
    both = sum(p for i, p in enumerate(probs) if i & 0b11 == 0b11)
    assert both == pytest.approx(0.1, abs=1e-9)


def test_disjoint_halves():
    spec = SyntheticSpec([SyntheticLlm("a", 0.5), SyntheticLlm("b", 0.5)], {("a", "b"): 0.0})
    probs = pattern_distribution(spec)
    assert probs == pytest.approx([0.0, 0.5, 0.5, 0.0], abs=1e-9)


def test_infeasible_overlap():
    with pytest.raises(DataError, match="infeasible"):
        pattern_distribution(SyntheticSpec([SyntheticLlm("a", 0.9), SyntheticLlm("b", 0.9)],
                                           {("a", "b"): 0.5}))
    with pytest.raises(DataError):
        pattern_distribution(SyntheticSpec([SyntheticLlm("a", 0.5), SyntheticLlm("a", 0.5)]))
    with pytest.raises(DataError):
        pattern_distribution(SyntheticSpec([SyntheticLlm("a", 1.5)]))


def test_trace_is_seeded_and_accurate():
    spec = two_llm_spec(0.8, 0.9)
    t1 = synthesize_trace(spec, 2000, seed=5)
    assert t1 == synthesize_trace(spec, 2000, seed=5)
    assert t1 != synthesize_trace(spec, 2000, seed=6)
    acc_cheap = np.mean([r.responses["cheap"].correct for r in t1])
    acc_exp = np.mean([r.responses["expensive"].correct for r in t1])
    # binomial sd at n=2000 is under 0.01
    assert abs(acc_cheap - 0.8) < 0.04
    assert abs(acc_exp - 0.9) < 0.04


def test_cues_truthful_at_full_signal():
    for r in synthesize_trace(two_llm_spec(), 200, seed=1):
        for llm, resp in r.responses.items():
            assert f"cue-{llm}-{'ok' if resp.correct else 'bad'}" in r.query_text


def test_from_dict():
    spec = SyntheticSpec.from_dict({"llms": [{"llm_id": "a", "accuracy": 0.5}, {"llm_id": "b", "accuracy": 0.7}],
                                    "overlap": {"a,b": 0.4}})
    assert spec.overlap == {("a", "b"): 0.4}
    assert synthesize_trace(spec, 0, 1) == []
