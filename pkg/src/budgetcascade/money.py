"""Fixed-point currency and the three-part LLM API price model.

Every amount is an integer count of nano-USD (1e-9 dollars). Rates quoted in
dollars per 10M tokens convert exactly as long as they have at most two
fractional digits, which covers every published rate we ship.
"""

from __future__ import annotations

import csv
import enum
import io
import os
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from typing import Iterable, Mapping

from .errors import DataError, MoneyOverflow

NANO_PER_USD = 1_000_000_000
TOKENS_PER_RATE_UNIT = 10_000_000
_LIMIT = 1 << 62
_U32 = 1 << 32


def _checked(value: int) -> int:
    if not -_LIMIT < value < _LIMIT:
        raise MoneyOverflow(f"money value {value} nano-USD outside +/-2^62")
    return value


@dataclass(frozen=True, order=True)
class Money:
    nano_usd: int = 0

    def __post_init__(self):
        if not isinstance(self.nano_usd, int) or isinstance(self.nano_usd, bool):
            raise TypeError(f"Money needs an int nano_usd, got {type(self.nano_usd).__name__}")
        _checked(self.nano_usd)

    @classmethod
    def from_usd(cls, amount: str | Decimal | int) -> "Money":
        return cls(parse_usd(amount))

    def __add__(self, other: "Money") -> "Money":
        if not isinstance(other, Money):
            return NotImplemented
        return Money(_checked(self.nano_usd + other.nano_usd))

    def __radd__(self, other):
        # lets sum() start from the int 0
        if other == 0:
            return self
        return NotImplemented

    def __sub__(self, other: "Money") -> "Money":
        if not isinstance(other, Money):
            return NotImplemented
        return Money(_checked(self.nano_usd - other.nano_usd))

    def __neg__(self) -> "Money":
        return Money(-self.nano_usd)

    def __mul__(self, k: int) -> "Money":
        if not isinstance(k, int) or isinstance(k, bool):
            return NotImplemented
        return Money(_checked(self.nano_usd * k))

    __rmul__ = __mul__

    def __str__(self) -> str:
        return format_money(self)

    @property
    def usd(self) -> Decimal:
        return Decimal(self.nano_usd).scaleb(-9)


ZERO = Money(0)


def format_money(m: Money | int) -> str:
    """Render nano-USD as a plain decimal dollar string without trailing zeros."""
    nano = m.nano_usd if isinstance(m, Money) else int(m)
    sign = "-" if nano < 0 else ""
    whole, frac = divmod(abs(nano), NANO_PER_USD)
    if frac == 0:
        return f"{sign}{whole}"
    return f"{sign}{whole}.{frac:09d}".rstrip("0")


def parse_usd(amount: str | Decimal | int) -> int:
    """Exact dollars -> nano-USD. Refuses anything finer than one nano-USD."""
    try:
        d = Decimal(str(amount).strip()) if not isinstance(amount, Decimal) else amount
    except InvalidOperation:
        raise DataError(f"not a decimal amount: {amount!r}") from None
    if not d.is_finite():
        raise DataError(f"not a finite amount: {amount!r}")
    nano = d.scaleb(9)
    if nano != nano.to_integral_value():
        raise DataError(f"{amount!r} is not representable in whole nano-USD")
    return _checked(int(nano))


def parse_money(text: str) -> Money:
    return Money(parse_usd(text))


@dataclass(frozen=True)
class Usage:
    input_tokens: int = 0
    output_tokens: int = 0

    def __post_init__(self):
        for name in ("input_tokens", "output_tokens"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or not 0 <= v < _U32:
                raise DataError(f"{name} must be an int in [0, 2^32), got {v!r}")

    def __add__(self, other: "Usage") -> "Usage":
        return Usage(self.input_tokens + other.input_tokens,
                     self.output_tokens + other.output_tokens)


@dataclass(frozen=True)
class PricingPlan:
    """Per-token input/output rates plus a flat per-request fee, all in Money."""

    input_rate: Money
    output_rate: Money
    fixed_per_request: Money = ZERO

    def __post_init__(self):
        for name in ("input_rate", "output_rate", "fixed_per_request"):
            if getattr(self, name).nano_usd < 0:
                raise DataError(f"{name} must be >= 0")

    @classmethod
    def per_10m(cls, input_usd, output_usd, fixed_usd=0) -> "PricingPlan":
        """Build from the usual 'dollars per 10M tokens' quoting."""
        return cls(
            Money(_rate_per_token(input_usd)),
            Money(_rate_per_token(output_usd)),
            Money(parse_usd(fixed_usd)),
        )


def _rate_per_token(usd_per_10m) -> int:
    d = Decimal(str(usd_per_10m).strip())
    nano = d.scaleb(9) / TOKENS_PER_RATE_UNIT
    if nano != nano.to_integral_value():
        raise DataError(f"rate {usd_per_10m} per 10M tokens is not a whole nano-USD per token")
    return int(nano)


def query_cost(plan: PricingPlan, usage: Usage) -> Money:
    """output*out_rate + input*in_rate + fixed, in exact integer arithmetic."""
    total = (
        usage.output_tokens * plan.output_rate.nano_usd
        + usage.input_tokens * plan.input_rate.nano_usd
        + plan.fixed_per_request.nano_usd
    )
    return Money(_checked(total))


class ProviderKind(str, enum.Enum):
    MOCK = "mock"
    TRACE_REPLAY = "trace_replay"
    HTTP = "http"


@dataclass(frozen=True)
class ProviderSpec:
    llm_id: str
    display_name: str
    pricing: PricingPlan
    provider_kind: ProviderKind = ProviderKind.TRACE_REPLAY
    provider: str = ""


Marketplace = dict  # llm_id -> ProviderSpec, insertion-ordered

_COLUMNS = ["llm_id", "provider", "input_usd_per_10m", "output_usd_per_10m",
            "fixed_usd_per_request"]
_OPTIONAL = ["display_name", "kind"]


def _usd_per_10m(rate: Money) -> str:
    # inverse of _rate_per_token: nano/token * 1e7 tokens -> nano per 10M
    return format_money(rate.nano_usd * TOKENS_PER_RATE_UNIT)


def read_pricing_table(text: str) -> Marketplace:
    """Parse marketplace CSV text. Blank lines and '#' comments are skipped."""
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    registry: Marketplace = {}
    if not lines:
        return registry
    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader)]
    missing = [c for c in _COLUMNS if c not in header]
    if missing:
        raise DataError(f"row 1: header missing columns {missing}")
    for rowno, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise DataError(f"row {rowno}: expected {len(header)} fields, got {len(row)}")
        rec = {k: v.strip() for k, v in zip(header, row)}
        llm_id = rec["llm_id"]
        if not llm_id:
            raise DataError(f"row {rowno}: empty llm_id")
        if llm_id in registry:
            raise DataError(f"row {rowno}: duplicate llm_id {llm_id!r}")
        try:
            plan = PricingPlan.per_10m(rec["input_usd_per_10m"], rec["output_usd_per_10m"],
                                       rec["fixed_usd_per_request"])
            kind = ProviderKind(rec.get("kind") or ProviderKind.TRACE_REPLAY.value)
        except (DataError, InvalidOperation, ValueError) as exc:
            raise DataError(f"row {rowno}: {exc}") from None
        registry[llm_id] = ProviderSpec(
            llm_id=llm_id,
            display_name=rec.get("display_name") or llm_id,
            pricing=plan,
            provider_kind=kind,
            provider=rec["provider"],
        )
    return registry


def parse_pricing_table(path: str | os.PathLike) -> Marketplace:
    with open(path, encoding="utf-8") as fh:
        return read_pricing_table(fh.read())


def dump_pricing_table(registry: Mapping[str, ProviderSpec]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_COLUMNS + _OPTIONAL)
    for spec in registry.values():
        p = spec.pricing
        w.writerow([spec.llm_id, spec.provider, _usd_per_10m(p.input_rate),
                    _usd_per_10m(p.output_rate), format_money(p.fixed_per_request),
                    spec.display_name, spec.provider_kind.value])
    return buf.getvalue()


def write_pricing_table(registry: Mapping[str, ProviderSpec], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_pricing_table(registry))


def bundled_marketplace(name: str = "table1") -> Marketplace:
    """Load a marketplace shipped with the package ('table1' or 'synthetic')."""
    from importlib import resources

    text = resources.files(__package__).joinpath(f"data/{name}_marketplace.csv").read_text("utf-8")
    return read_pricing_table(text)


def total(costs: Iterable[Money]) -> Money:
    return sum(costs, ZERO)
