"""Seeded generator of labeled traces with controlled per-LLM accuracy and overlap.

Correctness patterns across LLMs are drawn from a joint distribution over the
2^K right/wrong patterns that matches the requested marginals and pairwise
joint-correctness probabilities. Among all such distributions the one closest
(in L1) to independence is used. Query texts carry cue tokens that reveal each
LLM's correctness with probability ``signal`` so that a text scorer can learn it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linprog

from .errors import DataError
from .money import Usage
from .trace import LlmResponse, TraceRecord, reward_exact_match

DEFAULT_LABELS = ("up", "down", "neutral", "none")
_FILLER = ("gold", "prices", "futures", "market", "dollar", "rally", "slump", "data",
           "fed", "rates", "ounce", "traders", "outlook", "week", "session", "report")
MAX_LLMS = 12


@dataclass(frozen=True)
class SyntheticLlm:
    llm_id: str
    accuracy: float
    signal: float = 1.0
    input_tokens: tuple[int, int] = (40, 60)
    output_tokens: tuple[int, int] = (1, 3)


@dataclass(frozen=True)
class SyntheticSpec:
    llms: Sequence[SyntheticLlm]
    overlap: Mapping[tuple[str, str], float] = field(default_factory=dict)
    labels: Sequence[str] = DEFAULT_LABELS
    filler_words: int = 4

    @classmethod
    def from_dict(cls, obj: dict) -> "SyntheticSpec":
        llms = [SyntheticLlm(d["llm_id"], float(d["accuracy"]), float(d.get("signal", 1.0)),
                             tuple(d.get("input_tokens", (40, 60))),
                             tuple(d.get("output_tokens", (1, 3))))
                for d in obj["llms"]]
        overlap = {tuple(k.split(",")): float(v) for k, v in obj.get("overlap", {}).items()}
        return cls(llms, overlap, tuple(obj.get("labels", DEFAULT_LABELS)),
                   int(obj.get("filler_words", 4)))


def pattern_distribution(spec: SyntheticSpec) -> np.ndarray:
    """Probabilities of each correctness pattern; bit j of the index is LLM j's correctness."""
    k = len(spec.llms)
    if k == 0:
        raise DataError("synthetic spec needs at least one LLM")
    if k > MAX_LLMS:
        raise DataError(f"at most {MAX_LLMS} synthetic LLMs supported")
    ids = [m.llm_id for m in spec.llms]
    if len(set(ids)) != k:
        raise DataError("duplicate llm_id in synthetic spec")
    p = np.array([m.accuracy for m in spec.llms], dtype=float)
    for m in spec.llms:
        if not 0 <= m.accuracy <= 1 or not 0 <= m.signal <= 1:
            raise DataError(f"{m.llm_id}: probabilities must lie in [0, 1]")
        if m.input_tokens[0] > m.input_tokens[1] or m.output_tokens[0] > m.output_tokens[1]:
            raise DataError(f"{m.llm_id}: token range lo > hi")

    patterns = np.array(list(itertools.product([0, 1], repeat=k)))[:, ::-1]  # [2^k, k], bit j
    indep = np.prod(np.where(patterns == 1, p, 1 - p), axis=1)
    if not spec.overlap:
        return indep

    index = {llm: j for j, llm in enumerate(ids)}
    a_eq = [np.ones(len(patterns))]
    b_eq = [1.0]
    for j in range(k):
        a_eq.append(patterns[:, j].astype(float))
        b_eq.append(p[j])
    for (a, b), joint in spec.overlap.items():
        if a not in index or b not in index or a == b:
            raise DataError(f"overlap pair ({a}, {b}) does not name two distinct LLMs")
        pa, pb = p[index[a]], p[index[b]]
        if not max(0.0, pa + pb - 1) - 1e-12 <= joint <= min(pa, pb) + 1e-12:
            raise DataError(f"overlap {joint} for ({a}, {b}) infeasible with accuracies {pa}, {pb}")
        a_eq.append((patterns[:, index[a]] * patterns[:, index[b]]).astype(float))
        b_eq.append(joint)

    # variables [x (2^k), t (2^k)]: min sum t  s.t.  |x - indep| <= t, equality constraints on x
    m = len(patterns)
    c = np.concatenate([np.zeros(m), np.ones(m)])
    eye = np.eye(m)
    a_ub = np.block([[eye, -eye], [-eye, -eye]])
    b_ub = np.concatenate([indep, -indep])
    a_eq_full = np.hstack([np.array(a_eq), np.zeros((len(a_eq), m))])
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq_full, b_eq=np.array(b_eq),
                  bounds=[(0, None)] * (2 * m), method="highs")
    if res.status != 0:
        raise DataError(f"overlap constraints are jointly infeasible ({res.message})")
    x = res.x[:m]
    x[x < 1e-12] = 0.0
    return x / x.sum()


def synthesize_trace(spec: SyntheticSpec, n: int, seed: int) -> list[TraceRecord]:
    if n < 0:
        raise DataError("n must be non-negative")
    probs = pattern_distribution(spec)
    rng = np.random.default_rng(seed)
    pattern_idx = rng.choice(len(probs), size=n, p=probs)
    labels = list(spec.labels)
    if len(labels) < 2:
        raise DataError("need at least two answer labels")
    records = []
    for i in range(n):
        code = int(pattern_idx[i])
        truth = labels[rng.integers(len(labels))]
        words = [_FILLER[j] for j in rng.integers(len(_FILLER), size=spec.filler_words)]
        cues = []
        responses = {}
        for j, llm in enumerate(spec.llms):
            ok = bool((code >> j) & 1)
            if rng.random() < llm.signal:
                cue_ok = ok
            else:
                cue_ok = bool(rng.integers(2))
            cues.append(f"cue-{llm.llm_id}-{'ok' if cue_ok else 'bad'}")
            if ok:
                answer = truth
            else:
                wrong = [lab for lab in labels if lab != truth]
                answer = wrong[rng.integers(len(wrong))]
            usage = Usage(int(rng.integers(llm.input_tokens[0], llm.input_tokens[1] + 1)),
                          int(rng.integers(llm.output_tokens[0], llm.output_tokens[1] + 1)))
            responses[llm.llm_id] = LlmResponse(answer, usage, reward_exact_match(truth, answer))
        text = f"headline {i}: " + " ".join(words + cues)
        records.append(TraceRecord(f"q{i:06d}", text, truth, responses))
    return records
