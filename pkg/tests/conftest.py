import os
import sys
from fractions import Fraction

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from budgetcascade import _kernels
from budgetcascade.money import PricingPlan, ProviderKind, ProviderSpec, Usage, bundled_marketplace
from budgetcascade.synthetic import SyntheticLlm, SyntheticSpec, synthesize_trace
from budgetcascade.trace import LlmResponse, TraceRecord, reward_exact_match


def rec(qid, truth, answers, query=None, usage=(10, 2)):
    """answers: {llm_id: answer_text}; rewards by exact match."""
    responses = {k: LlmResponse(a, Usage(*usage), reward_exact_match(truth, a)) for k, a in answers.items()}
    return TraceRecord(qid, query if query is not None else f"question {qid}", truth, responses)


def flat_market(fees, kind=ProviderKind.TRACE_REPLAY):
    """Marketplace with flat per-request fees given in nano-USD."""
    from budgetcascade.money import Money
    return {k: ProviderSpec(k, k, PricingPlan(Money(0), Money(0), Money(v)), kind, "test")
            for k, v in fees.items()}


def two_llm_spec(cheap=0.8, expensive=0.9, signal=1.0):
    return SyntheticSpec([SyntheticLlm("cheap", cheap, signal), SyntheticLlm("expensive", expensive, signal)])


@pytest.fixture
def synthetic_market():
    return bundled_marketplace("synthetic")


@pytest.fixture(scope="session")
def two_llm_trace():
    return synthesize_trace(two_llm_spec(), 600, seed=11)


@pytest.fixture(params=["numpy", "numba"])
def backend(request):
    if request.param == "numba" and not _kernels.NUMBA_AVAILABLE:
        pytest.skip("numba not installed")
    old = _kernels.BACKEND
    _kernels.set_backend(request.param)
    yield request.param
    _kernels.set_backend(old)


HALF = Fraction(1, 2)


def random_instance(rng, k, n, score_levels=None, binary=True):
    """Random trace over k LLMs with positive flat-ish costs and a table scorer.

    With score_levels, scores are rounded to that many levels to force ties.
    """
    from budgetcascade.money import Money
    from budgetcascade.scorer import TableScorer

    ids = [f"m{j}" for j in range(k)]
    market = {x: ProviderSpec(x, x, PricingPlan(Money(int(rng.integers(0, 50))), Money(int(rng.integers(0, 50))),
                                                Money(int(rng.integers(1, 10**4)))))
              for x in ids}
    acc = rng.uniform(0.2, 0.95, size=k)
    records, table = [], {}
    for i in range(n):
        q = f"q{i}"
        responses = {}
        for j, x in enumerate(ids):
            if binary:
                reward = Fraction(int(rng.random() < acc[j]))
            else:
                reward = Fraction(int(rng.integers(0, 5)), 4)
            responses[x] = LlmResponse("up" if reward == 1 else "down",
                                       Usage(int(rng.integers(1, 200)), int(rng.integers(1, 20))), reward)
            s = float(rng.random()) * 0.6 + (0.4 if reward == 1 else 0.0) * float(rng.random())
            if score_levels:
                s = round(s * score_levels) / score_levels
            table[(q, x)] = s
        records.append(TraceRecord(q, q, "up", responses))
    return records, market, TableScorer(table)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.result_lines():
        terminalreporter.write_line(line)
