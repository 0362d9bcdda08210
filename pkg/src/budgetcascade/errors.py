"""Exception hierarchy shared by every module."""


class CascadeError(Exception):
    """Base class for all package errors."""


class DataError(CascadeError, ValueError):
    """Malformed or inconsistent input data (pricing tables, traces, configs)."""


class MoneyOverflow(CascadeError, ArithmeticError):
    pass


class ProviderError(CascadeError):
    """A provider could not produce a completion."""


class ProviderTimeout(ProviderError):
    pass


class ProviderHTTPError(ProviderError):
    def __init__(self, status: int, message: str = ""):
        super().__init__(f"HTTP {status}: {message}" if message else f"HTTP {status}")
        self.status = status


class ProviderBusy(ProviderError):
    pass


class RetriesExhausted(ProviderError):
    def __init__(self, attempts: int, last: Exception | None):
        super().__init__(f"gave up after {attempts} attempts: {last}")
        self.attempts = attempts
        self.last = last


class UnknownQuery(ProviderError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class CascadeExhausted(ProviderError):
    """Every step of a cascade failed, or the final step failed."""

    def __init__(self, message: str, failures: list):
        super().__init__(message)
        self.failures = failures


class BatchParseError(DataError):
    def __init__(self, expected: int, found: int):
        super().__init__(f"expected {expected} answers, found {found}")
        self.expected = expected
        self.found = found
