"""Learn the LLM list and thresholds that maximize mean reward under a mean-cost budget.

Search space: every ordered, repeat-free list of up to ``max_length`` LLMs,
with one threshold per non-final position drawn from a per-LLM grid of
empirical score quantiles plus {0, 1}. Lists whose adjacent LLMs barely
disagree are pruned; the objective over the whole threshold grid of a list is
computed in one histogram pass (see ``_kernels.stage_sums``).
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _kernels
from .cascade import CascadeConfig, evaluate_cascade
from .errors import DataError
from .money import Money, ProviderSpec
from .scorer import Scorer, score_table
from .trace import Dataset, TraceRecord, as_records, trace_arrays

logger = logging.getLogger(__name__)

ORACLE_MAX_LLMS = 5
ORACLE_MAX_RECORDS = 500


@dataclass(frozen=True)
class OptimizerConfig:
    budget: Money
    max_length: int = 3
    grid_size: int = 19  # per position, including the anchors 0 and 1
    disagreement_floor: float = 0.02
    subsample: float = 1.0
    rerank_top: int = 20
    seed: int = 0
    scorer_ref: str = ""

    def __post_init__(self):
        if self.max_length < 1:
            raise DataError("max_length must be >= 1")
        if self.grid_size < 2:
            raise DataError("grid_size must be >= 2")
        if not 0.0 <= self.disagreement_floor <= 1.0:
            raise DataError("disagreement_floor must lie in [0, 1]")
        if not 0.0 < self.subsample <= 1.0:
            raise DataError("subsample must lie in (0, 1]")
        if self.rerank_top < 1:
            raise DataError("rerank_top must be >= 1")


@dataclass(frozen=True)
class OptimizerResult:
    best: CascadeConfig
    train_mean_reward: Fraction
    train_mean_cost: Money
    train_total_cost: Money
    n_train: int
    feasible: bool
    search_stats: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        from .money import format_money

        return {
            "cascade": self.best.to_json(),
            "train_mean_reward": str(self.train_mean_reward),
            "train_mean_reward_float": float(self.train_mean_reward),
            "train_mean_cost_usd": format_money(self.train_mean_cost),
            "train_total_cost_usd": format_money(self.train_total_cost),
            "n_train": self.n_train,
            "feasible": self.feasible,
            "search_stats": self.search_stats,
        }


def threshold_grid(scores: np.ndarray, grid_size: int) -> np.ndarray:
    """{0, 1} plus (grid_size - 2) empirical quantiles of the scores, deduplicated and sorted."""
    scores = np.asarray(scores, dtype=np.float64)
    inner = grid_size - 2
    points = [0.0, 1.0]
    if inner > 0 and scores.size:
        levels = np.arange(1, inner + 1) / (inner + 1)
        points.extend(np.quantile(scores, levels, method="inverted_cdf").tolist())
    return np.unique(np.array(points, dtype=np.float64))


def _registry_ids(registry: Mapping[str, ProviderSpec] | Iterable[str]) -> list[str]:
    return sorted(registry.keys() if isinstance(registry, Mapping) else registry)


def _candidate_llms(registry, records: Sequence[TraceRecord]) -> list[str]:
    ids = _registry_ids(registry)
    if not records:
        return ids
    covered = set(Dataset(tuple(records)).llm_ids())
    dropped = [x for x in ids if x not in covered]
    if dropped:
        logger.warning("skipping LLMs not answered in every record: %s", dropped)
    return [x for x in ids if x in covered]


def pairwise_disagreement(dataset: Dataset | Sequence[TraceRecord], llm_a: str, llm_b: str) -> Fraction:
    """Fraction of shared records on which exactly one of the two LLMs is correct."""
    both = 0
    differ = 0
    excluded = 0
    for rec in as_records(dataset):
        ra = rec.responses.get(llm_a)
        rb = rec.responses.get(llm_b)
        if ra is None or rb is None:
            excluded += 1
            continue
        both += 1
        differ += ra.correct != rb.correct
    if excluded:
        logger.debug("disagreement(%s, %s): %d records excluded", llm_a, llm_b, excluded)
    if both == 0:
        raise DataError(f"no records answered by both {llm_a!r} and {llm_b!r}")
    return Fraction(differ, both)


def _enumerate(llms: Sequence[str], correct: np.ndarray | None, max_length: int,
               floor: float) -> tuple[list[tuple[int, ...]], int]:
    """Index lists that survive pruning, and the count before pruning."""
    k = len(llms)
    dis = None
    if correct is not None and k > 1 and floor > 0:
        n = correct.shape[0]
        dis = np.array([[np.count_nonzero(correct[:, a] != correct[:, b]) / n for b in range(k)]
                        for a in range(k)])
    kept = []
    total = 0
    for length in range(1, min(max_length, k) + 1):
        for perm in itertools.permutations(range(k), length):
            total += 1
            if length > 1 and dis is not None and any(
                    dis[perm[i], perm[i + 1]] < floor for i in range(length - 1)):
                continue
            kept.append(perm)
    return kept, total


def enumerate_lists(registry, dataset: Dataset | Sequence[TraceRecord],
                    config: OptimizerConfig) -> list[tuple[str, ...]]:
    """Ordered repeat-free lists of length 1..max_length, minus low-disagreement lists.

    A list of length >= 2 is dropped when any adjacent pair disagrees on fewer
    than ``disagreement_floor`` of the records. Singletons are always kept.
    """
    records = as_records(dataset)
    llms = _candidate_llms(registry, records)
    if not llms:
        raise DataError("registry is empty")
    correct = None
    if records:
        correct = np.array([[rec.responses[x].correct for x in llms] for rec in records], dtype=bool)
    kept, _ = _enumerate(llms, correct, config.max_length, config.disagreement_floor)
    return [tuple(llms[i] for i in perm) for perm in kept]


@dataclass(frozen=True, order=True)
class _Key:
    """Sort key: better configurations compare smaller."""

    neg_reward: float
    cost: int
    length: int
    names: tuple[str, ...]
    tindex: tuple[int, ...]


class _Problem:
    """Precomputed per-(record, LLM) arrays shared by all candidate lists."""

    def __init__(self, records, scorer, marketplace, llms, grid_size):
        self.records = records
        self.llms = llms
        arr = trace_arrays(records, llms, marketplace)
        self.rewards = arr.rewards
        self.correct = arr.correct
        self.costs = arr.costs
        self.scores = score_table(scorer, records, llms)
        self.grids = [threshold_grid(self.scores[:, k], grid_size) for k in range(len(llms))]
        self.bins = np.stack(
            [np.searchsorted(self.grids[k], self.scores[:, k], side="right") for k in range(len(llms))],
            axis=1).astype(np.int64)

    def list_sums(self, perm: tuple[int, ...], rows: np.ndarray | None):
        cols = list(perm)
        sel = slice(None) if rows is None else rows
        rewards = self.rewards[sel][:, cols]
        cum = np.cumsum(self.costs[sel][:, cols], axis=1)
        bins = self.bins[sel][:, cols[:-1]]
        sizes = np.array([len(self.grids[c]) for c in cols[:-1]], dtype=np.int64)
        r, c = _kernels.stage_sums(bins, rewards, cum, sizes)
        return r, c, sizes

    def direct(self, perm: tuple[int, ...], tindex: tuple[int, ...]) -> tuple[float, int]:
        """Reward and cost totals on every record for one (list, threshold-index) pair."""
        n = self.rewards.shape[0]
        stop = np.full(n, len(perm) - 1)
        open_ = np.ones(n, dtype=bool)
        for j, t in enumerate(tindex):
            acc = open_ & (self.bins[:, perm[j]] > t)
            stop[acc] = j
            open_ &= ~acc
        cols = np.array(perm)
        rew = self.rewards[np.arange(n), cols[stop]]
        cum = np.cumsum(self.costs[:, cols], axis=1)
        return float(rew.sum()), int(cum[np.arange(n), stop].sum())

    def config(self, perm, tindex, cfg: OptimizerConfig) -> CascadeConfig:
        thresholds = [float(self.grids[perm[j]][t]) for j, t in enumerate(tindex)] + [0.0]
        return CascadeConfig(tuple(self.llms[k] for k in perm), tuple(thresholds), cfg.scorer_ref,
                             cfg.budget, max(cfg.max_length, len(perm)))


def _top_in_list(r: np.ndarray, c: np.ndarray, limit_cost: int, k: int) -> np.ndarray:
    """Flat indices of the k best feasible tuples, best first."""
    feas = np.flatnonzero(c <= limit_cost)
    if feas.size == 0:
        return feas
    order = np.lexsort((feas, c[feas], -r[feas]))
    return feas[order[:k]]


def _unflatten(flat: int, sizes: np.ndarray) -> tuple[int, ...]:
    if sizes.size == 0:
        return ()
    return tuple(int(x) for x in np.unravel_index(flat, tuple(int(s) for s in sizes)))


def _finish(problem: _Problem, perm, tindex, cfg, feasible, stats, scorer, marketplace) -> OptimizerResult:
    best = problem.config(perm, tindex, cfg)
    ev = evaluate_cascade(best, scorer, problem.records, marketplace)
    if feasible and not ev.within(cfg.budget):
        raise AssertionError("kernel marked a configuration feasible that replays over budget")
    return OptimizerResult(best, ev.mean_reward, ev.mean_cost, ev.total_cost, ev.n,
                           feasible, stats)


def optimize(train: Dataset | Sequence[TraceRecord], scorer: Scorer,
             registry: Mapping[str, ProviderSpec], config: OptimizerConfig) -> OptimizerResult:
    """Best feasible (list, thresholds) on the training split; cheapest config if none fits.

    Ties go to lower cost, then shorter list, then lexicographic LLM ids, then
    lower thresholds.
    """
    records = as_records(train)
    if not records:
        raise DataError("cannot optimize on an empty training set")
    if config.budget.nano_usd <= 0:
        raise DataError("budget must be positive")
    llms = _candidate_llms(registry, records)
    if not llms:
        raise DataError("no registered LLM is answered in every training record")
    problem = _Problem(records, scorer, registry, llms, config.grid_size)
    perms, total = _enumerate(llms, problem.correct, config.max_length, config.disagreement_floor)
    if not perms:
        raise DataError("no candidate lists")
    n = len(records)
    stats = {"lists_enumerated": total, "lists_pruned": total - len(perms),
             "grid_points_evaluated": 0, "n_llms": len(llms), "backend": _kernels.BACKEND}

    # cheapest configuration overall is always a singleton: a cascade pays at least its first LLM
    singles = [(_Key(-float(problem.rewards[:, k].sum()), int(problem.costs[:, k].sum()), 1,
                     (llms[k],), ()), k) for k in range(len(llms))]
    cheapest = min(singles, key=lambda s: (s[0].cost, s[0]))

    rows = None
    if config.subsample < 1.0:
        m_rows = max(1, min(n, round(n * config.subsample)))
        rows = np.sort(np.random.default_rng(config.seed).choice(n, size=m_rows, replace=False))
    n_rows = n if rows is None else len(rows)
    limit = config.budget.nano_usd * n_rows
    keep = 1 if rows is None else config.rerank_top

    pool: list[tuple[_Key, tuple[int, ...], tuple[int, ...]]] = []
    for perm in perms:
        r, c, sizes = problem.list_sums(perm, rows)
        stats["grid_points_evaluated"] += int(r.size)
        names = tuple(llms[k] for k in perm)
        for flat in _top_in_list(r, c, limit, keep):
            tindex = _unflatten(int(flat), sizes)
            pool.append((_Key(-float(r[flat]), int(c[flat]), len(perm), names, tindex), perm, tindex))
        if rows is not None and len(pool) > 4 * config.rerank_top:
            pool = heapq.nsmallest(config.rerank_top, pool)

    if rows is not None:
        finalists = heapq.nsmallest(config.rerank_top, pool)
        pool = []
        for _, perm, tindex in finalists:
            rs, cs = problem.direct(perm, tindex)
            stats["grid_points_evaluated"] += 1
            if cs <= config.budget.nano_usd * n:
                pool.append((_Key(-rs, cs, len(perm), tuple(llms[k] for k in perm), tindex), perm, tindex))

    if pool:
        _, perm, tindex = min(pool)
        return _finish(problem, perm, tindex, config, True, stats, scorer, registry)
    _, k = cheapest
    return _finish(problem, (k,), (), config, False, stats, scorer, registry)


def brute_force_oracle(train: Dataset | Sequence[TraceRecord], scorer: Scorer,
                       registry: Mapping[str, ProviderSpec], config: OptimizerConfig) -> OptimizerResult:
    """Exhaustive search over the same grid: no pruning, no subsampling, exact rational rewards."""
    records = as_records(train)
    if not records:
        raise DataError("cannot optimize on an empty training set")
    if config.budget.nano_usd <= 0:
        raise DataError("budget must be positive")
    llms = _candidate_llms(registry, records)
    if len(llms) > ORACLE_MAX_LLMS or len(records) > ORACLE_MAX_RECORDS:
        raise DataError(f"oracle guard: needs <= {ORACLE_MAX_LLMS} LLMs and <= {ORACLE_MAX_RECORDS} "
                        f"records, got {len(llms)} and {len(records)}")
    if not llms:
        raise DataError("no registered LLM is answered in every training record")
    n = len(records)
    k = len(llms)

    scores = np.array([[scorer.score(rec.query_text, rec.responses[x].answer_text, x) for x in llms]
                       for rec in records])
    grids = [threshold_grid(scores[:, j], config.grid_size) for j in range(k)]
    from .money import query_cost

    costs = np.array([[query_cost(registry[x].pricing, rec.responses[x].usage).nano_usd for x in llms]
                      for rec in records], dtype=object)
    fracs = [[rec.responses[x].reward for x in llms] for rec in records]
    den = math.lcm(*[f.denominator for row in fracs for f in row])
    nums = np.array([[f.numerator * (den // f.denominator) for f in row] for row in fracs], dtype=object)

    budget_total = config.budget.nano_usd * n
    idx = np.arange(n)
    best = None       # (key, list, thresholds)
    cheapest = None
    evaluated = 0
    for length in range(1, min(config.max_length, k) + 1):
        for perm in itertools.permutations(range(k), length):
            cols = np.array(perm)
            cum = np.cumsum(costs[:, cols], axis=1)
            names = tuple(llms[j] for j in perm)
            for taus in itertools.product(*(grids[j] for j in perm[:-1])):
                evaluated += 1
                stop = np.full(n, length - 1)
                undecided = np.ones(n, dtype=bool)
                for pos, tau in enumerate(taus):
                    accept = undecided & (scores[:, perm[pos]] >= tau)
                    stop[accept] = pos
                    undecided &= ~accept
                reward = int(nums[idx, cols[stop]].sum())
                cost = int(cum[idx, stop].sum())
                cand = ((-reward, cost, length, names, taus), perm, taus, reward, cost)
                if cost <= budget_total and (best is None or cand[0] < best[0]):
                    best = cand
                ckey = (cost, -reward, length, names, taus)
                if cheapest is None or ckey < cheapest[0]:
                    cheapest = (ckey,) + cand[1:]
    feasible = best is not None
    _, perm, taus, reward, cost = best if feasible else cheapest
    cfg = CascadeConfig(tuple(llms[j] for j in perm), tuple(float(t) for t in taus) + (0.0,),
                        config.scorer_ref, config.budget, max(config.max_length, len(perm)))
    stats = {"lists_enumerated": sum(math.perm(k, m) for m in range(1, min(config.max_length, k) + 1)),
             "lists_pruned": 0, "grid_points_evaluated": evaluated, "n_llms": k}
    return OptimizerResult(cfg, Fraction(reward, den * n), Money(round(Fraction(cost, n))),
                           Money(cost), n, feasible, stats)
