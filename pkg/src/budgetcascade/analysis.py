"""Evaluation reports: pairwise MPI matrices, cost/accuracy frontiers, cost-savings summaries."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .cascade import CascadeConfig, evaluate_cascade
from .errors import DataError
from .money import Money, ProviderSpec, format_money, parse_money
from .optimizer import OptimizerConfig, optimize
from .scorer import MemoScorer, Scorer
from .trace import Dataset, TraceRecord, as_records


def mpi(dataset: Dataset | Sequence[TraceRecord], llm_a: str, llm_b: str) -> Fraction:
    """Share of records where A is right and B is wrong, over records both answered."""
    both = [r for r in as_records(dataset) if llm_a in r.responses and llm_b in r.responses]
    if not both:
        raise DataError(f"no records answered by both {llm_a!r} and {llm_b!r}")
    hits = sum(1 for r in both if r.responses[llm_a].correct and not r.responses[llm_b].correct)
    return Fraction(hits, len(both))


@dataclass(frozen=True)
class MpiMatrix:
    llm_ids: tuple[str, ...]
    values: tuple[tuple[Fraction, ...], ...]  # values[row][col] = mpi(col wrt row)

    def __getitem__(self, pair: tuple[str, str]) -> Fraction:
        row, col = pair
        return self.values[self.llm_ids.index(row)][self.llm_ids.index(col)]


def _ids(registry: Mapping[str, object] | Iterable[str]) -> list[str]:
    return list(registry.keys()) if isinstance(registry, Mapping) else list(registry)


def mpi_matrix(dataset: Dataset | Sequence[TraceRecord],
               registry: Mapping[str, object] | Iterable[str]) -> MpiMatrix:
    records = as_records(dataset)
    ids = [x for x in _ids(registry) if any(x in r.responses for r in records)]
    if not ids:
        raise DataError("no registered LLM appears in the trace")
    values = tuple(tuple(Fraction(0) if a == b else mpi(records, b, a) for b in ids) for a in ids)
    return MpiMatrix(tuple(ids), values)


def write_mpi_csv(matrix: MpiMatrix, path: str | os.PathLike | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row_llm", "col_llm", "value", "value_exact"])
    for i, a in enumerate(matrix.llm_ids):
        for j, b in enumerate(matrix.llm_ids):
            v = matrix.values[i][j]
            w.writerow([a, b, f"{float(v):.6f}", str(v)])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def read_mpi_csv(text: str) -> MpiMatrix:
    rows = list(csv.DictReader(io.StringIO(text)))
    ids: list[str] = []
    for r in rows:
        if r["row_llm"] not in ids:
            ids.append(r["row_llm"])
    cells = {(r["row_llm"], r["col_llm"]): Fraction(r["value_exact"]) for r in rows}
    try:
        values = tuple(tuple(cells[(a, b)] for b in ids) for a in ids)
    except KeyError as exc:
        raise DataError(f"mpi.csv is missing cell {exc}") from None
    return MpiMatrix(tuple(ids), values)


@dataclass(frozen=True)
class FrontierPoint:
    budget: Money
    config: CascadeConfig
    test_mean_reward: Fraction
    test_mean_cost: Money
    train_mean_reward: Fraction = Fraction(0)
    feasible: bool = True


def budget_sweep(train: Dataset | Sequence[TraceRecord], test: Dataset | Sequence[TraceRecord],
                 scorer: Scorer, registry: Mapping[str, ProviderSpec], budgets: Sequence[Money],
                 base: OptimizerConfig | None = None) -> list[FrontierPoint]:
    """Optimize at each budget on train, then evaluate the winner on test."""
    budgets = list(budgets)
    if any(b2 < b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise DataError("budgets must be sorted ascending")
    base = base or OptimizerConfig(budget=budgets[0] if budgets else Money(1))
    scorer = scorer if isinstance(scorer, MemoScorer) else MemoScorer(scorer)
    points = []
    for b in budgets:
        cfg = replace(base, budget=b)
        res = optimize(train, scorer, registry, cfg)
        ev = evaluate_cascade(res.best, scorer, test, registry)
        points.append(FrontierPoint(b, res.best, ev.mean_reward, ev.mean_cost,
                                    res.train_mean_reward, res.feasible))
    return points


_FRONTIER_COLS = ["budget_usd", "reward", "cost_usd", "list", "thresholds",
                  "reward_exact", "train_reward", "feasible"]


def write_frontier_csv(points: Sequence[FrontierPoint], path: str | os.PathLike | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_FRONTIER_COLS)
    for p in points:
        w.writerow([format_money(p.budget), f"{float(p.test_mean_reward):.6f}",
                    format_money(p.test_mean_cost), "|".join(p.config.llm_ids),
                    "|".join(repr(t) for t in p.config.thresholds), str(p.test_mean_reward),
                    str(p.train_mean_reward), "true" if p.feasible else "false"])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def read_frontier_csv(text: str) -> list[FrontierPoint]:
    out = []
    for i, r in enumerate(csv.DictReader(io.StringIO(text)), start=2):
        try:
            budget = parse_money(r["budget_usd"])
            cfg = CascadeConfig(tuple(r["list"].split("|")),
                                tuple(float(t) for t in r["thresholds"].split("|")), budget=budget)
            out.append(FrontierPoint(budget, cfg, Fraction(r["reward_exact"]),
                                     parse_money(r["cost_usd"]), Fraction(r["train_reward"]),
                                     r["feasible"] == "true"))
        except (KeyError, ValueError) as exc:
            raise DataError(f"frontier.csv line {i}: {exc}") from None
    return out


@dataclass(frozen=True)
class SingletonReport:
    llm_id: str
    reward: Fraction
    mean_cost: Money


def best_singleton(train: Dataset | Sequence[TraceRecord], test: Dataset | Sequence[TraceRecord],
                   registry: Mapping[str, ProviderSpec]) -> SingletonReport:
    """Highest train-accuracy single LLM (cheaper wins ties), with its test reward and cost."""
    train_r, test_r = as_records(train), as_records(test)
    ids = [x for x in registry if train_r and all(x in r.responses for r in train_r + test_r)]
    if not ids or not test_r:
        raise DataError("no LLM answers every train and test record")

    def train_key(x):
        reward = sum((r.responses[x].reward for r in train_r), Fraction(0))
        cost = sum(r.cost(x, registry).nano_usd for r in train_r)
        return (-reward, cost, x)

    best = min(ids, key=train_key)
    reward = sum((r.responses[best].reward for r in test_r), Fraction(0)) / len(test_r)
    cost = Money(round(Fraction(sum(r.cost(best, registry).nano_usd for r in test_r), len(test_r))))
    return SingletonReport(best, reward, cost)


@dataclass(frozen=True)
class SavingsReport:
    singleton_llm: str
    singleton_reward: Fraction
    singleton_cost: Money
    matching_cost: Money | None  # None: no frontier point reaches the singleton's reward
    savings_fraction: Fraction | None
    matching_budget: Money | None = None

    @property
    def matched(self) -> bool:
        return self.matching_cost is not None


def cost_savings_report(frontier: Sequence[FrontierPoint], singleton: SingletonReport) -> SavingsReport:
    if not frontier:
        raise DataError("empty frontier")
    matches = [p for p in frontier if p.test_mean_reward >= singleton.reward]
    if not matches:
        return SavingsReport(singleton.llm_id, singleton.reward, singleton.mean_cost, None, None)
    best = min(matches, key=lambda p: (p.test_mean_cost, p.budget))
    if singleton.mean_cost.nano_usd == 0:
        savings = Fraction(0)
    else:
        savings = 1 - Fraction(best.test_mean_cost.nano_usd, singleton.mean_cost.nano_usd)
    return SavingsReport(singleton.llm_id, singleton.reward, singleton.mean_cost,
                         best.test_mean_cost, savings, best.budget)


_SAVINGS_COLS = ["singleton_llm", "singleton_reward", "singleton_cost_usd", "matching_cost_usd",
                 "savings_fraction", "matching_budget_usd"]
NO_MATCH = "no match"


def write_savings_csv(reports: Sequence[SavingsReport], path: str | os.PathLike | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_SAVINGS_COLS)
    for s in reports:
        w.writerow([s.singleton_llm, str(s.singleton_reward), format_money(s.singleton_cost),
                    format_money(s.matching_cost) if s.matched else NO_MATCH,
                    str(s.savings_fraction) if s.matched else NO_MATCH,
                    format_money(s.matching_budget) if s.matching_budget is not None else NO_MATCH])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def read_savings_csv(text: str) -> list[SavingsReport]:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        matched = r["matching_cost_usd"] != NO_MATCH
        out.append(SavingsReport(
            r["singleton_llm"], Fraction(r["singleton_reward"]), parse_money(r["singleton_cost_usd"]),
            parse_money(r["matching_cost_usd"]) if matched else None,
            Fraction(r["savings_fraction"]) if matched else None,
            parse_money(r["matching_budget_usd"]) if r["matching_budget_usd"] != NO_MATCH else None))
    return out


def summarize(points: Sequence[FrontierPoint], savings: SavingsReport | None = None) -> str:
    """Plain-text table for terminals."""
    lines = [f"{'budget':>12} {'test_reward':>11} {'test_cost':>12} {'train_reward':>12}  cascade"]
    for p in points:
        cascade = " > ".join(f"{x}@{t:g}" for x, t in zip(p.config.llm_ids, p.config.thresholds))
        flag = "" if p.feasible else "  (infeasible)"
        lines.append(f"{format_money(p.budget):>12} {float(p.test_mean_reward):>11.4f} "
                     f"{format_money(p.test_mean_cost):>12} {float(p.train_mean_reward):>12.4f}  "
                     f"{cascade}{flag}")
    if savings is not None:
        if savings.matched:
            lines.append(f"matches {savings.singleton_llm} (reward {float(savings.singleton_reward):.4f}, "
                         f"cost {format_money(savings.singleton_cost)}) at cost "
                         f"{format_money(savings.matching_cost)}: savings {float(savings.savings_fraction):.1%}")
        else:
            lines.append(f"no frontier point reaches {savings.singleton_llm}'s reward "
                         f"{float(savings.singleton_reward):.4f}")
    return "\n".join(lines)
