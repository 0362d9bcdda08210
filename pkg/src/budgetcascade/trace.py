"""Labeled query traces: every LLM's recorded answer, token usage and reward per query."""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import re
import string
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError
from .money import Money, ProviderSpec, Usage, query_cost

logger = logging.getLogger(__name__)

RewardFn = Callable[[str, str], Fraction]

_WS = re.compile(r"\s+")
_TERMINAL = set(string.punctuation) | {"…", "。", "！", "？"}


def normalize_answer(text: str) -> str:
    """Case-fold, collapse whitespace, and drop trailing punctuation."""
    s = _WS.sub(" ", unicodedata.normalize("NFKC", text).casefold()).strip()
    while s and s[-1] in _TERMINAL:
        s = s[:-1].rstrip()
    return s


def reward_exact_match(a: str, a_hat: str) -> Fraction:
    return Fraction(1) if normalize_answer(a) == normalize_answer(a_hat) else Fraction(0)


def reward_token_f1(a: str, a_hat: str) -> Fraction:
    """Token-overlap F1 (multiset intersection), exact as a rational."""
    ref = normalize_answer(a).split()
    hyp = normalize_answer(a_hat).split()
    if not ref and not hyp:
        return Fraction(1)
    if not ref or not hyp:
        return Fraction(0)
    common = sum((Counter(ref) & Counter(hyp)).values())
    # 2PR/(P+R) with P=c/|hyp|, R=c/|ref| simplifies to 2c/(|ref|+|hyp|)
    return Fraction(2 * common, len(ref) + len(hyp))


REWARDS: dict[str, RewardFn] = {
    "exact_match": reward_exact_match,
    "token_f1": reward_token_f1,
}


def get_reward_fn(name_or_fn: str | RewardFn) -> RewardFn:
    if callable(name_or_fn):
        return name_or_fn
    try:
        return REWARDS[name_or_fn]
    except KeyError:
        raise DataError(f"unknown reward function {name_or_fn!r}; choose from {sorted(REWARDS)}") from None


@dataclass(frozen=True)
class LlmResponse:
    answer_text: str
    usage: Usage
    reward: Fraction

    def __post_init__(self):
        if not 0 <= self.reward <= 1:
            raise DataError(f"reward {self.reward} outside [0, 1]")

    @property
    def correct(self) -> bool:
        return self.reward == 1


@dataclass(frozen=True)
class TraceRecord:
    query_id: str
    query_text: str
    true_answer: str
    responses: Mapping[str, LlmResponse]

    def cost(self, llm_id: str, marketplace: Mapping[str, ProviderSpec]) -> Money:
        return query_cost(marketplace[llm_id].pricing, self.responses[llm_id].usage)


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"
    FULL = "full"


@dataclass(frozen=True)
class Dataset:
    records: tuple[TraceRecord, ...]
    split: Split = Split.FULL
    seed: int | None = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def llm_ids(self) -> list[str]:
        """LLMs answered in every record, sorted."""
        if not self.records:
            return []
        common = set(self.records[0].responses)
        for rec in self.records[1:]:
            common &= rec.responses.keys()
        return sorted(common)


def as_records(data: Dataset | Iterable[TraceRecord]) -> tuple[TraceRecord, ...]:
    return data.records if isinstance(data, Dataset) else tuple(data)


def _parse_reward(raw) -> Fraction:
    try:
        return Fraction(str(raw))
    except (ValueError, ZeroDivisionError):
        raise DataError(f"unparseable reward {raw!r}") from None


def record_from_json(obj: dict, marketplace: Mapping[str, ProviderSpec] | None = None,
                     reward: str | RewardFn = "exact_match", lineno: int | None = None) -> TraceRecord:
    where = f"line {lineno}: " if lineno is not None else ""
    reward_fn = get_reward_fn(reward)
    try:
        qid = str(obj["query_id"])
        query_text = obj["query_text"]
        true_answer = obj["true_answer"]
        raw_responses = obj["responses"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{where}missing field {exc}") from None
    if isinstance(raw_responses, dict):
        raw_responses = [dict(v, llm_id=k) for k, v in raw_responses.items()]
    if not raw_responses:
        raise DataError(f"{where}record {qid!r} has no responses")
    responses: dict[str, LlmResponse] = {}
    for sub in raw_responses:
        llm_id = sub.get("llm_id")
        if marketplace is not None and llm_id not in marketplace:
            raise DataError(f"{where}record {qid!r} references unknown llm_id {llm_id!r}")
        if llm_id in responses:
            raise DataError(f"{where}record {qid!r} has two responses from {llm_id!r}")
        answer = sub.get("answer_text", "")
        try:
            usage = Usage(int(sub.get("input_tokens", 0)), int(sub.get("output_tokens", 0)))
        except (TypeError, ValueError):
            raise DataError(f"{where}record {qid!r}/{llm_id}: bad token counts") from None
        computed = reward_fn(true_answer, answer)
        if "reward" in sub and sub["reward"] is not None:
            stored = _parse_reward(sub["reward"])
            if not 0 <= stored <= 1:
                raise DataError(f"{where}record {qid!r}/{llm_id}: reward {stored} outside [0, 1]")
            if stored != computed:
                logger.warning("%srecord %r/%s: stored reward %s != recomputed %s; using recomputed",
                               where, qid, llm_id, stored, computed)
        responses[llm_id] = LlmResponse(answer, usage, computed)
    return TraceRecord(qid, query_text, true_answer, responses)


def record_to_json(rec: TraceRecord) -> dict:
    return {
        "query_id": rec.query_id,
        "query_text": rec.query_text,
        "true_answer": rec.true_answer,
        "responses": [
            {
                "llm_id": llm_id,
                "answer_text": r.answer_text,
                "input_tokens": r.usage.input_tokens,
                "output_tokens": r.usage.output_tokens,
                "reward": str(r.reward),
            }
            for llm_id, r in rec.responses.items()
        ],
    }


def read_trace(lines: Iterable[str], marketplace: Mapping[str, ProviderSpec] | None = None,
               reward: str | RewardFn = "exact_match") -> list[TraceRecord]:
    records: list[TraceRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        rec = record_from_json(obj, marketplace, reward, lineno)
        if rec.query_id in seen:
            raise DataError(f"line {lineno}: duplicate query_id {rec.query_id!r}")
        seen.add(rec.query_id)
        records.append(rec)
    if not records:
        logger.warning("trace is empty")
    return records


def load_trace(path: str | os.PathLike, marketplace: Mapping[str, ProviderSpec] | None = None,
               reward: str | RewardFn = "exact_match") -> list[TraceRecord]:
    """Read a JSONL trace, validate it against the marketplace and materialize rewards."""
    with open(path, encoding="utf-8") as fh:
        return read_trace(fh, marketplace, reward)


def dump_trace(records: Iterable[TraceRecord]) -> str:
    return "".join(json.dumps(record_to_json(r), ensure_ascii=False, sort_keys=True) + "\n"
                   for r in records)


def save_trace(records: Iterable[TraceRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_trace(records))


def split_trace(records: Dataset | Sequence[TraceRecord], test_fraction, seed: int
                ) -> tuple[Dataset, Dataset]:
    """Seeded train/test partition; each split keeps the original record order."""
    recs = as_records(records)
    n = len(recs)
    if n < 2:
        raise DataError(f"need at least 2 records to split, got {n}")
    frac = Fraction(str(test_fraction)) if isinstance(test_fraction, float) else Fraction(test_fraction)
    if not 0 < frac < 1:
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n_test = min(max(math.floor(n * frac + Fraction(1, 2)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = set(perm[:n_test].tolist())
    train = tuple(r for i, r in enumerate(recs) if i not in test_idx)
    test = tuple(r for i, r in enumerate(recs) if i in test_idx)
    return Dataset(train, Split.TRAIN, seed), Dataset(test, Split.TEST, seed)


@dataclass
class TraceArrays:
    """Column view of a dataset over a fixed LLM order, for the numeric kernels."""

    llm_ids: list[str]
    rewards: np.ndarray      # float64 [n, K]
    correct: np.ndarray      # bool [n, K], reward == 1
    costs: np.ndarray        # int64 nano-USD [n, K]
    reward_exact: list[list[Fraction]] = field(repr=False, default_factory=list)

    @property
    def n(self) -> int:
        return self.rewards.shape[0]


def trace_arrays(data: Dataset | Sequence[TraceRecord], llm_ids: Sequence[str],
                 marketplace: Mapping[str, ProviderSpec]) -> TraceArrays:
    recs = as_records(data)
    n, k = len(recs), len(llm_ids)
    rewards = np.zeros((n, k))
    correct = np.zeros((n, k), dtype=bool)
    costs = np.zeros((n, k), dtype=np.int64)
    exact = []
    for i, rec in enumerate(recs):
        row = []
        for j, llm in enumerate(llm_ids):
            try:
                resp = rec.responses[llm]
            except KeyError:
                raise DataError(f"record {rec.query_id!r} has no response from {llm!r}") from None
            rewards[i, j] = float(resp.reward)
            correct[i, j] = resp.reward == 1
            costs[i, j] = query_cost(marketplace[llm].pricing, resp.usage).nano_usd
            row.append(resp.reward)
        exact.append(row)
    return TraceArrays(list(llm_ids), rewards, correct, costs, exact)
