"""HTTP gateway: route live queries through a learned cascade and keep a running budget ledger."""

from __future__ import annotations

import collections
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from fastapi.concurrency import run_in_threadpool

from .approximation import CompletionCache, cached_route
from .cascade import CascadeConfig, FailurePolicy, RouteOutcome, route
from .errors import CascadeExhausted, DataError
from .money import ZERO, Money, Usage, format_money, query_cost
from .scorer import Scorer

logger = logging.getLogger(__name__)

WINDOWS = ("per_query_mean", "rolling_n")
SHED_REFERENCE_USAGE = Usage(1000, 100)  # prices LLMs when picking the strict-mode fallback


class BudgetLedger:
    """Exact running spend. ``per_query_mean`` averages over everything served,
    ``rolling_n`` over the last ``n`` queries."""

    def __init__(self, budget: Money, window: str = "per_query_mean", n: int = 100):
        if window not in WINDOWS:
            raise DataError(f"unknown ledger window {window!r}; expected one of {WINDOWS}")
        if n < 1:
            raise DataError("rolling window must be >= 1")
        self.budget = budget
        self.window = window
        self.n = n
        self._lock = threading.Lock()
        self._spent = 0
        self._served = 0
        self._recent: collections.deque[int] = collections.deque(maxlen=n)
        self._recent_sum = 0

    def record(self, cost: Money) -> None:
        with self._lock:
            self._spent += cost.nano_usd
            self._served += 1
            if len(self._recent) == self.n:
                self._recent_sum -= self._recent[0]
            self._recent.append(cost.nano_usd)
            self._recent_sum += cost.nano_usd

    def _window(self) -> tuple[int, int]:
        if self.window == "rolling_n":
            return self._recent_sum, len(self._recent)
        return self._spent, self._served

    def over_budget(self) -> bool:
        with self._lock:
            total, count = self._window()
        return count > 0 and total > self.budget.nano_usd * count

    def snapshot(self) -> dict:
        with self._lock:
            spent, served = self._spent, self._served
            total, count = self._window()
        mean = Money(round(Fraction(total, count))) if count else ZERO
        return {"served": served, "spent_usd": format_money(spent),
                "mean_cost_usd": format_money(mean), "budget_usd": format_money(self.budget),
                "over_budget": count > 0 and total > self.budget.nano_usd * count,
                "window": self.window}

    @property
    def spent(self) -> Money:
        with self._lock:
            return Money(self._spent)

    @property
    def served(self) -> int:
        with self._lock:
            return self._served


@dataclass(frozen=True)
class GatewayConfig:
    cascade: CascadeConfig
    cache_enabled: bool = False
    cache_threshold: float | None = None  # None: exact matches only
    cache_path: str | None = None
    host: str = "127.0.0.1"
    port: int = 8080
    max_concurrency: int = 8
    ledger_window: str = "per_query_mean"
    rolling_n: int = 100
    strict: bool = False
    policy: str = "skip"
    scorer_path: str = ""
    marketplace_path: str = ""
    trace_path: str = ""
    extra: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.max_concurrency < 1:
            raise DataError("max_concurrency must be >= 1")
        if self.ledger_window not in WINDOWS:
            raise DataError(f"unknown ledger window {self.ledger_window!r}")
        FailurePolicy(self.policy)

    @classmethod
    def from_json(cls, obj: dict, base_dir: str = ".") -> "GatewayConfig":
        def path(key):
            p = obj.get(key, "")
            return os.path.join(base_dir, p) if p and not os.path.isabs(p) else p

        cascade = obj.get("cascade")
        if isinstance(cascade, str):
            from .cascade import load_config
            cascade = load_config(os.path.join(base_dir, cascade))
        elif isinstance(cascade, dict):
            cascade = CascadeConfig.from_json(cascade)
        else:
            raise DataError("gateway config needs a 'cascade' (path or object)")
        cache = obj.get("cache", {})
        known = {"cascade", "cache", "listen", "max_concurrency", "ledger", "strict", "policy",
                 "scorer", "marketplace", "trace"}
        listen = obj.get("listen", "127.0.0.1:8080")
        host, _, port = listen.rpartition(":")
        ledger = obj.get("ledger", {})
        try:
            return cls(cascade, bool(cache.get("enabled", False)), cache.get("threshold"),
                       path_or_none(cache.get("path"), base_dir), host or "127.0.0.1", int(port),
                       int(obj.get("max_concurrency", 8)), ledger.get("window", "per_query_mean"),
                       int(ledger.get("n", 100)), bool(obj.get("strict", False)),
                       obj.get("policy", "skip"), path("scorer"), path("marketplace"), path("trace"),
                       {k: v for k, v in obj.items() if k not in known})
        except (TypeError, ValueError) as exc:
            raise DataError(f"malformed gateway config: {exc}") from None


def path_or_none(p: str | None, base_dir: str) -> str | None:
    if not p:
        return None
    return p if os.path.isabs(p) else os.path.join(base_dir, p)


def load_gateway_config(path: str | os.PathLike) -> GatewayConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc.msg})") from None
    return GatewayConfig.from_json(obj, os.path.dirname(os.path.abspath(path)))


def cheapest_llm(config: CascadeConfig, providers: Mapping[str, object]) -> str:
    return min(config.llm_ids,
               key=lambda x: (query_cost(providers[x].spec.pricing, SHED_REFERENCE_USAGE), x))


class Gateway:
    """Framework-free core of the service; the FastAPI app is a thin wrapper."""

    def __init__(self, config: GatewayConfig, scorer: Scorer, providers: Mapping[str, object],
                 cache: CompletionCache | None = None):
        config.cascade.check_registered(providers)
        self.config = config
        self.scorer = scorer
        self.providers = providers
        self.ledger = BudgetLedger(config.cascade.budget, config.ledger_window, config.rolling_n)
        if cache is None and config.cache_enabled:
            cache = CompletionCache(config.cache_path, config.cache_threshold)
        self.cache = cache if config.cache_enabled else None
        self._slots = threading.BoundedSemaphore(config.max_concurrency)
        self._shed = CascadeConfig((cheapest_llm(config.cascade, providers),), (0.0,),
                                   config.cascade.scorer_ref, config.cascade.budget)
        self.started_at = time.time()

    def route(self, query: str) -> tuple[RouteOutcome, bool]:
        """Route one query; returns the outcome and whether strict mode shed it."""
        with self._slots:
            shed = self.config.strict and self.ledger.over_budget()
            cascade = self._shed if shed else self.config.cascade
            if self.cache is not None:
                out = cached_route(self.cache, cascade, self.scorer, self.providers, query,
                                   self.config.policy)
            else:
                out = route(cascade, self.scorer, self.providers, query, self.config.policy)
            self.ledger.record(out.total_cost)
            return out, shed

    def stats(self) -> dict:
        snap = self.ledger.snapshot()
        if self.cache is not None:
            snap["cache"] = {"entries": len(self.cache), "hits": self.cache.hits,
                             "misses": self.cache.misses}
        return snap

    def health(self) -> dict:
        checks = {}
        for llm_id in self.config.cascade.llm_ids:
            st = self.providers[llm_id].health_check()
            checks[llm_id] = {"healthy": st.healthy, "reason": st.reason}
        healthy = all(c["healthy"] for c in checks.values())
        return {"status": "ok" if healthy else "degraded", "providers": checks}


def outcome_json(out: RouteOutcome, shed: bool = False) -> dict:
    return {
        "answer": out.answer,
        "llm_used": out.llm_used,
        "stop_index": out.stop_index,
        "cost_usd": format_money(out.total_cost),
        "cached": out.cached,
        "shed": shed,
        "steps": [{"llm_id": s.llm_id, "score": s.score, "cost_usd": format_money(s.cost),
                   "accepted": s.accepted} for s in out.steps],
        "failures": [{"llm_id": x, "error": e} for x, e in out.failures],
    }


def create_app(gateway: Gateway) -> FastAPI:
    app = FastAPI(title="budgetcascade gateway")
    app.state.gateway = gateway

    @app.post("/v1/route")
    async def route_endpoint(request: Request):
        try:
            body = json.loads(await request.body())
        except (json.JSONDecodeError, UnicodeDecodeError):
            return JSONResponse({"error": "request body is not valid JSON"}, status_code=400)
        if not isinstance(body, dict) or "query" not in body:
            return JSONResponse({"error": "expected a JSON object with a 'query' field"}, status_code=400)
        query = body["query"]
        if not isinstance(query, str) or not query.strip():
            return JSONResponse({"error": "'query' must be a non-empty string"}, status_code=400)
        try:
            out, shed = await run_in_threadpool(gateway.route, query)
        except CascadeExhausted as exc:
            return JSONResponse({"error": str(exc),
                                 "failures": [{"llm_id": x, "error": e} for x, e in exc.failures]},
                                status_code=502)
        return outcome_json(out, shed)

    @app.get("/v1/stats")
    def stats_endpoint():
        return gateway.stats()

    @app.get("/v1/healthz")
    def health_endpoint():
        return gateway.health()

    return app


class BackgroundServer:
    """Run the app under uvicorn in a daemon thread (tests, notebooks)."""

    def __init__(self, app: FastAPI, host: str = "127.0.0.1", port: int = 0):
        import uvicorn

        self._config = uvicorn.Config(app, host=host, port=port, log_level="warning", access_log=False)
        self.server = uvicorn.Server(self._config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    def __enter__(self) -> "BackgroundServer":
        self.thread.start()
        deadline = time.time() + 10
        while not self.server.started:
            if time.time() > deadline or not self.thread.is_alive():
                raise RuntimeError("gateway did not start")
            time.sleep(0.01)
        return self

    @property
    def url(self) -> str:
        sock = self.server.servers[0].sockets[0]
        host, port = sock.getsockname()[:2]
        return f"http://{host}:{port}"

    def __exit__(self, *exc) -> None:
        self.server.should_exit = True
        self.thread.join(timeout=10)


def serve(config: GatewayConfig, scorer: Scorer, providers: Mapping[str, object]) -> None:
    """Blocking: run the gateway until interrupted."""
    import uvicorn

    gateway = Gateway(config, scorer, providers)
    logger.info("serving cascade %s on %s:%d", config.cascade.llm_ids, config.host, config.port)
    uvicorn.run(create_app(gateway), host=config.host, port=config.port, log_level="info")
