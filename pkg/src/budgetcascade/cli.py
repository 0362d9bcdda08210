"""Command-line entry point: ``budgetcascade <subcommand> ...``.

Exit codes: 0 ok, 2 usage, 3 data, 4 provider.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Sequence

from . import analysis
from .approximation import CompletionCache, cached_route
from .cascade import FailurePolicy, evaluate_cascade, load_config, route, save_config
from .errors import CascadeError, CascadeExhausted, DataError, ProviderError
from .money import Money, bundled_marketplace, format_money, parse_pricing_table
from .optimizer import OptimizerConfig, optimize
from .providers import build_providers
from .scorer import TrainConfig, load_model, save_model, train_scorer
from .synthetic import SyntheticSpec, synthesize_trace
from .trace import load_trace, save_trace, split_trace

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PROVIDER = 0, 2, 3, 4
BUNDLED = ("table1", "synthetic")

logger = logging.getLogger("budgetcascade")


def _marketplace(ref: str):
    if ref in BUNDLED:
        return bundled_marketplace(ref)
    return parse_pricing_table(ref)


def _budget(text: str) -> Money:
    try:
        m = Money.from_usd(text)
    except (DataError, ValueError, ArithmeticError):
        raise argparse.ArgumentTypeError(f"invalid dollar amount {text!r}") from None
    if m.nano_usd <= 0:
        raise argparse.ArgumentTypeError("budget must be positive")
    return m


def _budgets(text: str) -> list[Money]:
    return [_budget(x) for x in text.split(",") if x.strip()]


def _write_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _load(args, key: str = "trace"):
    return load_trace(getattr(args, key), _marketplace(args.marketplace), args.reward)


# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    market = _marketplace(args.marketplace)
    if args.synthetic:
        with open(args.synthetic, encoding="utf-8") as fh:
            spec = SyntheticSpec.from_dict(json.load(fh))
        records = synthesize_trace(spec, args.n, args.seed)
        missing = sorted({x for r in records for x in r.responses} - market.keys())
        if missing:
            raise DataError(f"synthetic LLMs {missing} are not in the marketplace")
    else:
        records = load_trace(args.trace, market, args.reward)
    os.makedirs(args.out_dir, exist_ok=True)
    save_trace(records, os.path.join(args.out_dir, "trace.jsonl"))
    summary = {"records": len(records)}
    if args.test_fraction is not None:
        train, test = split_trace(records, args.test_fraction, args.seed)
        save_trace(train.records, os.path.join(args.out_dir, "train.jsonl"))
        save_trace(test.records, os.path.join(args.out_dir, "test.jsonl"))
        summary.update(train=len(train), test=len(test))
    _write_json(summary, None)
    return EXIT_OK


def cmd_train_scorer(args) -> int:
    records = _load(args)
    cfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr, l2=args.l2, batch_size=args.batch_size,
                      seed=args.seed, per_llm=not args.shared_only)
    model = train_scorer(records, cfg)
    save_model(model, args.out)
    meta = model.training_meta
    for w in meta.get("warnings", []):
        logger.warning("%s", w)
    _write_json({"model": args.out, "heads": sorted(model.per_llm),
                 "final_loss": meta.get("loss_history", [None])[-1]}, None)
    return EXIT_OK


def cmd_optimize(args) -> int:
    records = _load(args)
    market = _marketplace(args.marketplace)
    scorer = load_model(args.scorer)
    cfg = OptimizerConfig(budget=args.budget, max_length=args.max_length, grid_size=args.grid_size,
                          disagreement_floor=args.disagreement, subsample=args.subsample,
                          rerank_top=args.rerank_top, seed=args.seed, scorer_ref=args.scorer)
    res = optimize(records, scorer, market, cfg)
    save_config(res.best, args.out)
    stats = res.to_json()
    if not res.feasible:
        logger.warning("no cascade meets the budget; wrote the cheapest single LLM instead")
    _write_json(stats, args.stats)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    records = _load(args)
    market = _marketplace(args.marketplace)
    cfg = load_config(args.cascade)
    ev = evaluate_cascade(cfg, load_model(args.scorer), records, market)
    stops: dict[str, int] = {}
    for q in ev.per_query:
        stops[q.outcome.llm_used] = stops.get(q.outcome.llm_used, 0) + 1
    _write_json({"n": ev.n, "mean_reward": str(ev.mean_reward), "mean_reward_float": float(ev.mean_reward),
                 "mean_cost_usd": format_money(ev.mean_cost), "total_cost_usd": format_money(ev.total_cost),
                 "within_budget": ev.within(cfg.budget), "answered_by": dict(sorted(stops.items()))},
                args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    market = _marketplace(args.marketplace)
    train = _load(args, "train")
    test = _load(args, "test")
    scorer = load_model(args.scorer)
    base = OptimizerConfig(budget=args.budgets[0], max_length=args.max_length, grid_size=args.grid_size,
                           disagreement_floor=args.disagreement, seed=args.seed, scorer_ref=args.scorer)
    points = analysis.budget_sweep(train, test, scorer, market, sorted(args.budgets), base)
    single = analysis.best_singleton(train, test, market)
    savings = analysis.cost_savings_report(points, single)
    os.makedirs(args.out_dir, exist_ok=True)
    analysis.write_frontier_csv(points, os.path.join(args.out_dir, "frontier.csv"))
    analysis.write_savings_csv([savings], os.path.join(args.out_dir, "savings.csv"))
    summary = analysis.summarize(points, savings)
    with open(os.path.join(args.out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary + "\n")
    print(summary)
    return EXIT_OK


def cmd_mpi(args) -> int:
    records = _load(args)
    market = _marketplace(args.marketplace)
    ids = [x for x in market if any(x in r.responses for r in records)]
    matrix = analysis.mpi_matrix(records, ids)
    text = analysis.write_mpi_csv(matrix, args.out)
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


def _providers(trace: str | None, reward: str, market, llm_ids):
    """Providers for the cascade's LLMs only, so unrelated entries need no credentials."""
    records = load_trace(trace, market, reward) if trace else None
    return build_providers({x: market[x] for x in llm_ids}, records)


def cmd_route(args) -> int:
    market = _marketplace(args.marketplace)
    cfg = load_config(args.cascade)
    cfg.check_registered(market)
    scorer = load_model(args.scorer)
    providers = _providers(args.trace, args.reward, market, cfg.llm_ids)
    if args.cache:
        cache = CompletionCache(args.cache, args.cache_threshold)
        out = cached_route(cache, cfg, scorer, providers, args.query, args.policy)
    else:
        out = route(cfg, scorer, providers, args.query, args.policy)
    from .gateway import outcome_json

    _write_json(outcome_json(out), None)
    return EXIT_OK


def cmd_serve(args) -> int:
    from .gateway import GatewayConfig, load_gateway_config, serve

    if args.config:
        gcfg = load_gateway_config(args.config)
    else:
        if not (args.cascade and args.scorer):
            raise DataError("serve needs --config or both --cascade and --scorer")
        host, _, port = args.listen.rpartition(":")
        gcfg = GatewayConfig(load_config(args.cascade), bool(args.cache), args.cache_threshold,
                             args.cache, host or "127.0.0.1", int(port), args.max_concurrency,
                             args.window, args.rolling_n, args.strict, args.policy, args.scorer,
                             args.marketplace, args.trace or "")
    market = _marketplace(gcfg.marketplace_path or args.marketplace)
    gcfg.cascade.check_registered(market)
    providers = _providers(gcfg.trace_path or None, args.reward, market, gcfg.cascade.llm_ids)
    serve(gcfg, load_model(gcfg.scorer_path), providers)
    return EXIT_OK


def cmd_cache_stats(args) -> int:
    if not os.path.exists(args.cache):
        raise DataError(f"{args.cache}: no such cache log")
    _write_json(CompletionCache(args.cache).stats(), None)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="budgetcascade",
                                description="Learn and run budget-constrained LLM cascades.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, trace=True):
        sp.add_argument("--marketplace", default="table1",
                        help="pricing CSV path, or a bundled name: table1, synthetic")
        sp.add_argument("--reward", default="exact_match", choices=["exact_match", "token_f1"])
        if trace:
            sp.add_argument("--trace", required=True)

    def search(sp):
        sp.add_argument("--max-length", type=int, default=3)
        sp.add_argument("--grid-size", type=int, default=19)
        sp.add_argument("--disagreement", type=float, default=0.02)
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("ingest", help="validate a trace (or synthesize one) and split it")
    common(sp, trace=False)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--trace")
    src.add_argument("--synthetic", metavar="SPEC_JSON")
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--test-fraction", type=float)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("train-scorer", help="fit the answer-reliability scorer")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--lr", type=float, default=2.0)
    sp.add_argument("--l2", type=float, default=1e-4)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--shared-only", action="store_true", help="one head for all LLMs")
    sp.set_defaults(func=cmd_train_scorer)

    sp = sub.add_parser("optimize", help="search the best cascade under a budget")
    common(sp)
    search(sp)
    sp.add_argument("--scorer", required=True)
    sp.add_argument("--budget", type=_budget, required=True, help="mean USD per query")
    sp.add_argument("--subsample", type=float, default=1.0)
    sp.add_argument("--rerank-top", type=int, default=20)
    sp.add_argument("--out", required=True, help="cascade config JSON")
    sp.add_argument("--stats", help="search report JSON (stdout if omitted)")
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("evaluate", help="replay a cascade over a trace")
    common(sp)
    sp.add_argument("--scorer", required=True)
    sp.add_argument("--cascade", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep", help="cost/accuracy frontier over budgets")
    common(sp, trace=False)
    search(sp)
    sp.add_argument("--train", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--scorer", required=True)
    sp.add_argument("--budgets", type=_budgets, required=True, help="comma-separated USD values")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("mpi", help="pairwise maximum-improvement matrix")
    common(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_mpi)

    def live(sp):
        sp.add_argument("--trace", help="trace for trace_replay providers")
        sp.add_argument("--policy", default="skip", choices=[x.value for x in FailurePolicy])
        sp.add_argument("--cache", help="cache log path (enables the cache)")
        sp.add_argument("--cache-threshold", type=float, default=None,
                        help="cosine threshold for approximate hits; >1 disables the cache")

    sp = sub.add_parser("route", help="answer one query through a cascade")
    common(sp, trace=False)
    live(sp)
    sp.add_argument("--cascade", required=True)
    sp.add_argument("--scorer", required=True)
    sp.add_argument("--query", required=True)
    sp.set_defaults(func=cmd_route)

    sp = sub.add_parser("serve", help="run the HTTP gateway")
    common(sp, trace=False)
    live(sp)
    sp.add_argument("--config", help="gateway config JSON (overrides the flags below)")
    sp.add_argument("--cascade")
    sp.add_argument("--scorer")
    sp.add_argument("--listen", default="127.0.0.1:8080")
    sp.add_argument("--max-concurrency", type=int, default=8)
    sp.add_argument("--window", default="per_query_mean", choices=["per_query_mean", "rolling_n"])
    sp.add_argument("--rolling-n", type=int, default=100)
    sp.add_argument("--strict", action="store_true", help="shed to the cheapest LLM when over budget")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("cache-stats", help="summarize a cache log")
    sp.add_argument("--cache", required=True)
    sp.set_defaults(func=cmd_cache_stats)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ProviderError, CascadeExhausted) as exc:
        print(f"error: provider: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (DataError, CascadeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
