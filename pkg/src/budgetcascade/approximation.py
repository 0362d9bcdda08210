"""Cheaper ways to get the same answers: completion cache, query batching, prompt trimming."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Mapping, Sequence

from .cascade import CascadeConfig, FailurePolicy, RouteOutcome, route
from .errors import BatchParseError, DataError, ProviderError
from .money import ZERO, Money, format_money, parse_money
from .scorer import DEFAULT_DIMS, FeatureVector, Scorer, text_features
from .trace import Dataset, TraceRecord, as_records, normalize_answer, reward_exact_match

logger = logging.getLogger(__name__)


def normalize_query(text: str) -> str:
    return normalize_answer(text)


def query_key(text: str) -> str:
    return hashlib.sha256(normalize_query(text).encode("utf-8")).hexdigest()


@dataclass
class CacheEntry:
    key: str
    normalized_query: str
    query_text: str
    answer_text: str
    llm_id: str
    stored_cost: Money
    hit_count: int = 0
    created_at: float = 0.0

    def to_json(self) -> dict:
        return {"kind": "entry", "key": self.key, "query": self.normalized_query,
                "query_text": self.query_text, "answer": self.answer_text, "llm_id": self.llm_id,
                "cost_usd": format_money(self.stored_cost), "ts": self.created_at}


class CompletionCache:
    """In-memory index over an append-only JSONL log.

    ``similarity_threshold``: None -> exact normalized matches only (default);
    a value in [0, 1] -> also accept the most similar stored query if its
    cosine similarity reaches the threshold; a value > 1 -> cache disabled.
    Lookups may run concurrently; inserts and hit counting are serialized.
    """

    def __init__(self, path: str | os.PathLike | None = None,
                 similarity_threshold: float | None = None, dims: int = DEFAULT_DIMS,
                 clock: Callable[[], float] = time.time):
        if similarity_threshold is not None and similarity_threshold < 0:
            raise DataError("similarity_threshold must be >= 0")
        self.path = path
        self.similarity_threshold = similarity_threshold
        self.dims = dims
        self._clock = clock
        self._entries: dict[str, CacheEntry] = {}
        self._features: dict[str, FeatureVector] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if path is not None and os.path.exists(path):
            self._replay(path)

    @property
    def enabled(self) -> bool:
        return self.similarity_threshold is None or self.similarity_threshold <= 1.0

    def __len__(self):
        return len(self._entries)

    def entries(self) -> list[CacheEntry]:
        return list(self._entries.values())

    def _replay(self, path) -> None:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError:
                    raise DataError(f"{path}:{lineno}: corrupt cache log line") from None
                if obj.get("kind") == "hit":
                    entry = self._entries.get(obj.get("key"))
                    if entry is not None:
                        entry.hit_count += 1
                    continue
                entry = CacheEntry(obj["key"], obj["query"], obj.get("query_text", obj["query"]),
                                   obj["answer"], obj["llm_id"], parse_money(obj["cost_usd"]),
                                   0, float(obj.get("ts", 0.0)))
                self._index(entry)

    def _index(self, entry: CacheEntry) -> bool:
        existing = self._entries.get(entry.key)
        if existing is not None:
            if existing.normalized_query != entry.normalized_query:
                logger.warning("cache key collision between %r and %r; keeping the first",
                               existing.normalized_query, entry.normalized_query)
            return False
        self._entries[entry.key] = entry
        self._features[entry.key] = text_features(entry.normalized_query, self.dims)
        return True

    def _append(self, obj: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")

    def put(self, query_text: str, answer_text: str, llm_id: str, cost: Money) -> CacheEntry:
        norm = normalize_query(query_text)
        entry = CacheEntry(hashlib.sha256(norm.encode("utf-8")).hexdigest(), norm, query_text,
                           answer_text, llm_id, cost, 0, self._clock())
        with self._lock:
            if self._index(entry):
                self._append(entry.to_json())
                return entry
            return self._entries[entry.key]

    def record_hit(self, entry: CacheEntry) -> None:
        with self._lock:
            entry.hit_count += 1
            self.hits += 1
            self._append({"kind": "hit", "key": entry.key, "ts": self._clock()})

    def record_miss(self) -> None:
        with self._lock:
            self.misses += 1

    def similarity(self, a: str, b: str) -> float:
        return text_features(normalize_query(a), self.dims).dot(
            text_features(normalize_query(b), self.dims))

    def stats(self) -> dict:
        stored = sum((e.stored_cost for e in self._entries.values()), ZERO)
        saved = sum((e.stored_cost * e.hit_count for e in self._entries.values()), ZERO)
        return {"entries": len(self._entries), "hits": sum(e.hit_count for e in self._entries.values()),
                "stored_cost_usd": format_money(stored), "avoided_cost_usd": format_money(saved),
                "llms": sorted({e.llm_id for e in self._entries.values()})}


def cache_lookup(cache: CompletionCache, q: str, similarity_threshold: float | None = None
                 ) -> CacheEntry | None:
    """Exact normalized match first, then the most similar entry if it clears the threshold."""
    threshold = cache.similarity_threshold if similarity_threshold is None else similarity_threshold
    if threshold is not None and not 0.0 <= threshold <= 1.0:
        return None
    norm = normalize_query(q)
    entry = cache._entries.get(hashlib.sha256(norm.encode("utf-8")).hexdigest())
    if entry is not None and entry.normalized_query == norm:
        return entry
    if threshold is None or not cache._entries:
        return None
    fq = text_features(norm, cache.dims)
    best, best_sim = None, -1.0
    for key, feats in list(cache._features.items()):
        sim = fq.dot(feats)
        if sim > best_sim:
            best, best_sim = cache._entries[key], sim
    return best if best_sim >= threshold else None


def cached_route(cache: CompletionCache, config: CascadeConfig, scorer: Scorer,
                 providers: Mapping[str, object], q: str,
                 policy: FailurePolicy | str = FailurePolicy.SKIP,
                 render: Callable[[str, str], str] | None = None) -> RouteOutcome:
    """Serve from the cache when possible (zero cost), otherwise route and remember the answer."""
    if not cache.enabled:
        return route(config, scorer, providers, q, policy, render)
    entry = cache_lookup(cache, q)
    if entry is not None:
        cache.record_hit(entry)
        return RouteOutcome(entry.answer_text, 0, (), ZERO, (), cached=True,
                            cached_from=entry.llm_id)
    cache.record_miss()
    out = route(config, scorer, providers, q, policy, render)
    cache.put(q, out.answer, out.llm_used, out.total_cost)
    return out


# ---------------------------------------------------------------------------
# prompts


@dataclass(frozen=True)
class PromptTemplate:
    instruction: str
    examples: tuple[tuple[str, str], ...] = ()
    per_llm_overrides: Mapping[str, str] = field(default_factory=dict)
    max_examples: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple((str(q), str(a)) for q, a in self.examples))
        if self.max_examples is not None and len(self.examples) > self.max_examples:
            raise DataError(f"{len(self.examples)} examples exceed the maximum of {self.max_examples}")

    def shared_text(self, llm_id: str | None = None) -> str:
        parts = [self.per_llm_overrides.get(llm_id, self.instruction) if llm_id else self.instruction]
        for eq, ea in self.examples:
            parts.append(f"Q: {eq}\nA: {ea}")
        return "\n\n".join(p for p in parts if p)

    def render(self, q: str, llm_id: str | None = None) -> str:
        shared = self.shared_text(llm_id)
        return f"{shared}\n\nQ: {q}\nA:" if shared else f"Q: {q}\nA:"


ANSWER_MARK = "### ANSWER {i} ###"
_MARK_RE = re.compile(r"^### ANSWER (\d+) ###[ \t]*$", re.MULTILINE)
MAX_BATCH = 8


def concat_queries(template: PromptTemplate, queries: Sequence[str], k: int | None = None,
                   max_k: int = MAX_BATCH, llm_id: str | None = None
                   ) -> tuple[str, Callable[[str], list[str]]]:
    """One prompt answering k queries; returns it with a parser splitting the reply into k answers."""
    queries = list(queries)
    k = len(queries) if k is None else k
    if not queries:
        raise DataError("no queries to concatenate")
    if not 1 <= k <= max_k:
        raise DataError(f"batch size {k} outside [1, {max_k}]")
    if k != len(queries):
        raise DataError(f"k={k} but {len(queries)} queries given")
    if k == 1:
        return template.render(queries[0], llm_id), lambda text: [text.strip()]

    contract = (f"Answer each of the {k} numbered questions below. Before each answer write "
                f"the line {ANSWER_MARK.format(i='<n>')} with <n> the question number, "
                f"and give exactly {k} answers in order.")
    shared = template.shared_text(llm_id)
    numbered = "\n".join(f"{i}. {q}" for i, q in enumerate(queries, start=1))
    prompt = "\n\n".join(p for p in (shared, contract, f"Questions:\n{numbered}", "Answers:") if p)

    def parse(text: str) -> list[str]:
        marks = list(_MARK_RE.finditer(text))
        if len(marks) != k:
            raise BatchParseError(k, len(marks))
        answers = []
        for j, mk in enumerate(marks):
            if int(mk.group(1)) != j + 1:
                raise DataError(f"answer markers out of order: expected {j + 1}, found {mk.group(1)}")
            end = marks[j + 1].start() if j + 1 < k else len(text)
            answers.append(text[mk.end():end].strip())
        return answers

    return prompt, parse


def render_batch_answers(answers: Sequence[str]) -> str:
    """The reply format the batch contract asks for (used by mocks and tests)."""
    return "\n".join(f"{ANSWER_MARK.format(i=i)}\n{a}" for i, a in enumerate(answers, start=1))


def concat_savings(prompt_tokens: int, query_tokens: int, k: int) -> Fraction:
    """Input-token savings of batching k queries under one shared prompt."""
    batched = prompt_tokens + k * query_tokens
    separate = k * (prompt_tokens + query_tokens)
    return 1 - Fraction(batched, separate)


def select_prompt_examples(template: PromptTemplate, train: Dataset | Sequence[TraceRecord],
                           provider, n: int, reward: Callable[[str, str], Fraction] = reward_exact_match,
                           max_failures: int = 0) -> PromptTemplate:
    """Greedy forward selection of n in-context examples by validation reward.

    ``train`` is the held-out slice the candidates are scored on. Selected
    examples keep their original relative order; ties go to the earlier example.
    """
    from .providers import CompletionRequest

    records = as_records(train)
    if not 0 <= n <= len(template.examples):
        raise DataError(f"n={n} outside [0, {len(template.examples)}]")
    if n > 0 and not records:
        raise DataError("need held-out records to select examples")
    failures = 0

    def value(chosen: Sequence[int]) -> Fraction:
        nonlocal failures
        t = replace(template, examples=tuple(template.examples[i] for i in sorted(chosen)), meta={})
        total = Fraction(0)
        for rec in records:
            try:
                resp = provider.complete(CompletionRequest(provider.spec.llm_id, t.render(rec.query_text)))
            except ProviderError:
                failures += 1
                if failures > max_failures:
                    raise
                continue
            total += reward(rec.true_answer, resp.text)
        return total / len(records) if records else Fraction(0)

    chosen: list[int] = []
    path = [value(chosen)] if records else [Fraction(0)]
    while len(chosen) < n:
        best_i, best_v = None, None
        for i in range(len(template.examples)):
            if i in chosen:
                continue
            v = value(chosen + [i])
            if best_v is None or v > best_v:
                best_i, best_v = i, v
        chosen.append(best_i)
        path.append(best_v)
    return replace(template, examples=tuple(template.examples[i] for i in sorted(chosen)),
                   meta={"selected": sorted(chosen), "validation_rewards": [str(v) for v in path],
                         "empty_reward": str(path[0]), "final_reward": str(path[-1])})
