"""Budget-aware LLM cascades: learn which LLMs to ask, in what order, and when to stop."""

from .analysis import (FrontierPoint, MpiMatrix, SavingsReport, SingletonReport, best_singleton,
                       budget_sweep, cost_savings_report, mpi, mpi_matrix)
from .approximation import (CacheEntry, CompletionCache, PromptTemplate, cache_lookup, cached_route,
                            concat_queries, select_prompt_examples)
from .cascade import (CascadeConfig, CascadeEvaluation, FailurePolicy, RouteOutcome, RouteStep,
                      evaluate_cascade, load_config, replay_route, route, run_cascade, save_config)
from .errors import (BatchParseError, CascadeError, CascadeExhausted, DataError, MoneyOverflow,
                     ProviderError, ProviderHTTPError, ProviderTimeout, RetriesExhausted, UnknownQuery)
from .money import (Money, PricingPlan, ProviderKind, ProviderSpec, Usage, bundled_marketplace,
                    format_money, parse_pricing_table, query_cost)
from .optimizer import OptimizerConfig, OptimizerResult, brute_force_oracle, optimize
from .providers import (CompletionRequest, CompletionResponse, HttpProvider, MockProvider,
                        RetryPolicy, TraceReplayProvider, complete, health_check)
from .scorer import (ConstantScorer, MemoScorer, ScorerModel, TableScorer, TrainConfig, load_model,
                     save_model, score, train_scorer)
from .synthetic import SyntheticLlm, SyntheticSpec, synthesize_trace
from .trace import Dataset, LlmResponse, TraceRecord, load_trace, save_trace, split_trace

__version__ = "0.1.0"
