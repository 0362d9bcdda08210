import json
import threading

import pytest

from budgetcascade.errors import (DataError, ProviderBusy, ProviderHTTPError, RetriesExhausted,
                                  UnknownQuery)
from budgetcascade.money import Money, PricingPlan, ProviderKind, ProviderSpec, Usage, query_cost
from budgetcascade.providers import (CompletionRequest, HttpProvider, MockProvider, RetryPolicy,
                                     TraceReplayProvider, build_providers, complete, env_prefix,
                                     hashed_choice, health_check)
from conftest import flat_market, rec
from stub_server import StubServer

SPEC = ProviderSpec("gpt-j", "GPT-J", PricingPlan.per_10m("0.2", "5"), ProviderKind.HTTP, "Textsynth")
NO_WAIT = RetryPolicy(max_attempts=3, backoff=0.0)


def test_mock_last_word():
    p = MockProvider(SPEC)
    resp = complete(p, CompletionRequest("gpt-j", "trend is down"))
    assert resp.text == "down"
    assert resp.usage == Usage(3, 1)
    assert health_check(p).healthy


def test_mock_deterministic_hashed_rule():
    p = MockProvider(SPEC, hashed_choice(["up", "down", "none"], seed=4))
    a = [p.complete(CompletionRequest("gpt-j", f"q{i}")).text for i in range(20)]
    b = [p.complete(CompletionRequest("gpt-j", f"q{i}")).text for i in range(20)]
    assert a == b and len(set(a)) > 1
    assert p.calls == 40


def test_mock_fixed_usage():
    p = MockProvider(SPEC, lambda prompt: "x", usage=Usage(7, 2))
    assert p.complete(CompletionRequest("gpt-j", "hello")).usage == Usage(7, 2)


def test_request_validation():
    with pytest.raises(DataError):
        CompletionRequest("a", "p", max_output_tokens=0)
    with pytest.raises(DataError):
        RetryPolicy(max_attempts=0)


def test_trace_replay():
    records = [rec("1", "up", {"gpt-j": "Up."}, query="gold?", usage=(11, 3))]
    p = TraceReplayProvider(SPEC, records)
    resp = p.complete(CompletionRequest("gpt-j", "gold?"))
    assert resp.text == "Up." and resp.usage == Usage(11, 3)
    with pytest.raises(UnknownQuery):
        p.complete(CompletionRequest("gpt-j", "oil?"))


def test_env_prefix():
    assert env_prefix("Textsynth") == "FRUGAL_TEXTSYNTH"
    assert env_prefix("ForeFront-AI") == "FRUGAL_FOREFRONT_AI"


def test_http_usage_and_cost():
    with StubServer(usage=(120, 8)) as stub:
        p = HttpProvider(SPEC, stub.url, api_key="k")
        resp = p.complete(CompletionRequest("gpt-j", "the answer is up"))
    assert resp.text == "up" and resp.usage == Usage(120, 8)
    assert query_cost(SPEC.pricing, resp.usage) == Money(120 * 20 + 8 * 500)
    assert stub.state.headers[0]["authorization"] == "Bearer k"


def test_http_prompt_bytes_unchanged():
    prompt = "  unicodé\tprompt\n with «quotes» and trailing space "
    with StubServer() as stub:
        HttpProvider(SPEC, stub.url).complete(CompletionRequest("gpt-j", prompt, max_output_tokens=9))
    body = json.loads(stub.state.raw_bodies[0])
    assert body == {"model": "gpt-j", "prompt": prompt, "max_tokens": 9}


def test_http_reported_cost_recorded():
    with StubServer(cost_usd="0.0001") as stub:
        resp = HttpProvider(SPEC, stub.url).complete(CompletionRequest("gpt-j", "x"))
    assert resp.provider_reported_cost == Money(100_000)


def test_http_retries_transient_then_succeeds():
    with StubServer() as stub:
        stub.state.script.extend([503, 429])
        p = HttpProvider(SPEC, stub.url)
        resp = p.complete(CompletionRequest("gpt-j", "a b", retry=NO_WAIT))
    assert resp.attempts == 3
    assert p.telemetry == {"requests": 1, "attempts": 3, "failures": 0}


def test_http_retries_bounded():
    sleeps = []
    with StubServer() as stub:
        stub.state.script.extend([500] * 5)
        p = HttpProvider(SPEC, stub.url, sleep=sleeps.append)
        with pytest.raises(RetriesExhausted) as ei:
            p.complete(CompletionRequest("gpt-j", "x", retry=RetryPolicy(3, 0.5)))
    assert ei.value.attempts == 3
    assert sleeps == [0.5, 1.0]
    assert p.telemetry["attempts"] == 3 and p.telemetry["failures"] == 1


def test_http_non_transient_fails_fast():
    with StubServer() as stub:
        stub.state.script.append(401)
        p = HttpProvider(SPEC, stub.url)
        with pytest.raises(ProviderHTTPError) as ei:
            p.complete(CompletionRequest("gpt-j", "x", retry=NO_WAIT))
    assert ei.value.status == 401
    assert p.telemetry["attempts"] == 1


def test_http_malformed_body():
    with StubServer() as stub:
        stub.state.script.append("garbage")
        with pytest.raises(ProviderHTTPError, match="malformed"):
            HttpProvider(SPEC, stub.url).complete(CompletionRequest("gpt-j", "x", retry=NO_WAIT))


def test_http_timeout_retried():
    with StubServer() as stub:
        stub.state.script.extend([0.5, 0.5])
        with pytest.raises(RetriesExhausted):
            HttpProvider(SPEC, stub.url).complete(
                CompletionRequest("gpt-j", "x", timeout=0.1, retry=RetryPolicy(2, 0.0)))


def test_http_busy_when_not_blocking():
    with StubServer() as stub:
        stub.state.script.append(0.5)
        p = HttpProvider(SPEC, stub.url, max_in_flight=1, block=False)
        t = threading.Thread(target=p.complete, args=(CompletionRequest("gpt-j", "slow"),))
        t.start()
        while not stub.state.raw_bodies:
            pass
        with pytest.raises(ProviderBusy):
            p.complete(CompletionRequest("gpt-j", "fast"))
        t.join()


def test_http_base_url_from_env(monkeypatch):
    with StubServer() as stub:
        monkeypatch.setenv("FRUGAL_TEXTSYNTH_BASE_URL", stub.url)
        monkeypatch.setenv("FRUGAL_TEXTSYNTH_API_KEY", "secret")
        p = HttpProvider(SPEC)
        p.complete(CompletionRequest("gpt-j", "x"))
    assert stub.state.headers[0]["authorization"] == "Bearer secret"
    monkeypatch.delenv("FRUGAL_TEXTSYNTH_BASE_URL")
    with pytest.raises(DataError, match="FRUGAL_TEXTSYNTH_BASE_URL"):
        HttpProvider(SPEC)


def test_health_flapping_and_stopped():
    stub = StubServer().__enter__()
    p = HttpProvider(SPEC, stub.url)
    stub.state.health_script.extend([503, 200])
    first = p.health_check()
    second = p.health_check()
    assert not first.healthy and "503" in first.reason
    assert second.healthy
    stub.stop()
    down = p.health_check()
    assert not down.healthy and down.reason.startswith("unreachable")


def test_build_providers():
    market = flat_market({"a": 1})
    market["m"] = ProviderSpec("m", "m", PricingPlan(Money(0), Money(0)), ProviderKind.MOCK)
    with pytest.raises(DataError):
        build_providers(market)
    built = build_providers(market, [rec("1", "up", {"a": "up"})])
    assert isinstance(built["a"], TraceReplayProvider) and isinstance(built["m"], MockProvider)
