"""Execute a fixed cascade: call LLMs in order, stop at the first answer whose score clears its threshold."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

from .errors import CascadeExhausted, DataError, ProviderError
from .money import ZERO, Money, ProviderSpec, Usage, format_money, parse_money, query_cost
from .scorer import Scorer
from .trace import Dataset, TraceRecord, as_records

CONFIG_FORMAT = "budgetcascade-cascade/1"
DEFAULT_MAX_LENGTH = 8


@dataclass(frozen=True)
class CascadeConfig:
    llm_ids: tuple[str, ...]
    thresholds: tuple[float, ...]
    scorer_ref: str = ""
    budget: Money = ZERO
    max_length: int = DEFAULT_MAX_LENGTH

    def __post_init__(self):
        object.__setattr__(self, "llm_ids", tuple(self.llm_ids))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        m = len(self.llm_ids)
        if not 1 <= m <= self.max_length:
            raise DataError(f"cascade length {m} outside [1, {self.max_length}]")
        if len(set(self.llm_ids)) != m:
            raise DataError(f"cascade repeats an LLM: {self.llm_ids}")
        if len(self.thresholds) != m:
            raise DataError(f"{m} LLMs but {len(self.thresholds)} thresholds")
        if not all(0.0 <= t <= 1.0 for t in self.thresholds):
            raise DataError(f"thresholds must lie in [0, 1]: {self.thresholds}")

    def __len__(self):
        return len(self.llm_ids)

    def check_registered(self, marketplace: Mapping[str, object]) -> None:
        missing = [x for x in self.llm_ids if x not in marketplace]
        if missing:
            raise DataError(f"cascade uses unregistered LLMs {missing}")

    def to_json(self) -> dict:
        return {
            "format": CONFIG_FORMAT,
            "llm_ids": list(self.llm_ids),
            "thresholds": list(self.thresholds),
            "scorer_ref": self.scorer_ref,
            "budget_usd": format_money(self.budget),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CascadeConfig":
        if obj.get("format") != CONFIG_FORMAT:
            raise DataError(f"unsupported cascade config format {obj.get('format')!r}")
        try:
            return cls(tuple(obj["llm_ids"]), tuple(obj["thresholds"]), obj.get("scorer_ref", ""),
                       parse_money(obj.get("budget_usd", "0")))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed cascade config: {exc}") from None


def save_config(config: CascadeConfig, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path: str | os.PathLike) -> CascadeConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            return CascadeConfig.from_json(json.load(fh))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc.msg})") from None


@dataclass(frozen=True)
class RouteStep:
    llm_id: str
    answer: str
    score: float
    usage: Usage
    cost: Money
    accepted: bool


@dataclass(frozen=True)
class RouteOutcome:
    answer: str
    stop_index: int  # 1-based position of the accepting LLM
    steps: tuple[RouteStep, ...]
    total_cost: Money
    failures: tuple[tuple[str, str], ...] = ()
    cached: bool = False
    cached_from: str = ""  # LLM that produced a cached answer

    @property
    def llm_used(self) -> str:
        if self.cached:
            return self.cached_from
        return self.steps[-1].llm_id if self.steps else ""


class FailurePolicy(str, enum.Enum):
    SKIP = "skip"
    FAIL = "fail"


Fetch = Callable[[str], tuple[str, Usage, Money]]


def run_cascade(config: CascadeConfig, scorer: Scorer, q: str, fetch: Fetch,
                policy: FailurePolicy | str = FailurePolicy.SKIP) -> RouteOutcome:
    """The stop rule: accept step i iff score >= threshold_i, and always at the last step."""
    policy = FailurePolicy(policy)
    steps: list[RouteStep] = []
    failures: list[tuple[str, str]] = []
    m = len(config.llm_ids)
    for i, (llm_id, tau) in enumerate(zip(config.llm_ids, config.thresholds), start=1):
        try:
            answer, usage, cost = fetch(llm_id)
        except ProviderError as exc:
            failures.append((llm_id, str(exc)))
            if policy is FailurePolicy.FAIL or i == m:
                raise CascadeExhausted(f"step {i} ({llm_id}) failed: {exc}", failures) from exc
            continue
        s = scorer.score(q, answer, llm_id)
        accept = i == m or s >= tau
        steps.append(RouteStep(llm_id, answer, s, usage, cost, accept))
        if accept:
            return RouteOutcome(answer, i, tuple(steps), sum((st.cost for st in steps), ZERO),
                                tuple(failures))
    raise AssertionError("unreachable: last step always accepts")


def route(config: CascadeConfig, scorer: Scorer, providers: Mapping[str, object], q: str,
          policy: FailurePolicy | str = FailurePolicy.SKIP,
          render: Callable[[str, str], str] | None = None) -> RouteOutcome:
    """Route a live query through provider objects (see ``providers``)."""
    from .providers import CompletionRequest

    missing = [x for x in config.llm_ids if x not in providers]
    if missing:
        raise DataError(f"no provider for {missing}")

    def fetch(llm_id):
        provider = providers[llm_id]
        prompt = render(llm_id, q) if render else q
        resp = provider.complete(CompletionRequest(llm_id, prompt))
        return resp.text, resp.usage, query_cost(provider.spec.pricing, resp.usage)

    return run_cascade(config, scorer, q, fetch, policy)


def replay_route(config: CascadeConfig, scorer: Scorer, record: TraceRecord,
                 marketplace: Mapping[str, ProviderSpec]) -> RouteOutcome:
    """Same stop rule, answers and usage taken from a recorded trace."""
    missing = [x for x in config.llm_ids if x not in record.responses]
    if missing:
        raise DataError(f"record {record.query_id!r} lacks responses from {missing}")

    def fetch(llm_id):
        resp = record.responses[llm_id]
        return resp.answer_text, resp.usage, query_cost(marketplace[llm_id].pricing, resp.usage)

    return run_cascade(config, scorer, record.query_text, fetch, FailurePolicy.FAIL)


@dataclass(frozen=True)
class QueryResult:
    query_id: str
    outcome: RouteOutcome
    reward: Fraction


@dataclass(frozen=True)
class CascadeEvaluation:
    mean_reward: Fraction
    total_cost: Money
    n: int
    per_query: tuple[QueryResult, ...] = field(repr=False, default=())

    @property
    def mean_cost(self) -> Money:
        """Mean per-query cost rounded half-even to the nearest nano-USD."""
        return Money(round(Fraction(self.total_cost.nano_usd, self.n)))

    @property
    def mean_cost_exact(self) -> Fraction:
        return Fraction(self.total_cost.nano_usd, self.n)

    def within(self, budget: Money) -> bool:
        """Exact mean-cost <= budget test, in integers."""
        return self.total_cost.nano_usd <= budget.nano_usd * self.n


def evaluate_cascade(config: CascadeConfig, scorer: Scorer, dataset: Dataset | Sequence[TraceRecord],
                     marketplace: Mapping[str, ProviderSpec]) -> CascadeEvaluation:
    records = as_records(dataset)
    if not records:
        raise DataError("cannot evaluate a cascade on an empty dataset")
    results = []
    reward_sum = Fraction(0)
    cost_sum = 0
    for rec in records:
        out = replay_route(config, scorer, rec, marketplace)
        r = rec.responses[out.llm_used].reward
        reward_sum += r
        cost_sum += out.total_cost.nano_usd
        results.append(QueryResult(rec.query_id, out, r))
    return CascadeEvaluation(reward_sum / len(records), Money(cost_sum), len(records), tuple(results))
