"""Exception hierarchy.

Every error carries a stable ``code`` string. The codes are part of the wire
contract: a server turns an exception into ``{"code": ..., "message": ...}``
and a client turns it back into the same exception class with
:func:`error_from_code`.
"""

from __future__ import annotations


class GridBankError(Exception):
    code = "INTERNAL_ERROR"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.details = details

    def to_wire(self) -> dict:
        return {"code": self.code, "message": self.message}


# ledger
class DuplicateSubject(GridBankError):
    code = "DUPLICATE_SUBJECT"


class NoSuchAccount(GridBankError):
    code = "NO_SUCH_ACCOUNT"


class AccountClosed(NoSuchAccount):
    code = "ACCOUNT_CLOSED"


class NonPositiveAmount(GridBankError):
    code = "NON_POSITIVE_AMOUNT"


class NotAdmin(GridBankError):
    code = "NOT_ADMIN"


class InsufficientFunds(GridBankError):
    code = "INSUFFICIENT_FUNDS"


class WouldViolateBalance(GridBankError):
    code = "WOULD_VIOLATE_BALANCE"


class SelfTransfer(GridBankError):
    code = "SELF_TRANSFER"


class CurrencyMismatch(GridBankError):
    code = "CURRENCY_MISMATCH"


class BadRange(GridBankError):
    code = "BAD_RANGE"


class NoSuchLock(GridBankError):
    code = "NO_SUCH_LOCK"


class ExceedsLock(GridBankError):
    code = "EXCEEDS_LOCK"


class NoSuchTransfer(GridBankError):
    code = "NO_SUCH_TRANSFER"


class AlreadyCancelled(GridBankError):
    code = "ALREADY_CANCELLED"


class HasLockedFunds(GridBankError):
    code = "HAS_LOCKED_FUNDS"


class NegativeBalance(GridBankError):
    code = "NEGATIVE_BALANCE"


class CorruptJournal(GridBankError):
    code = "CORRUPT_JOURNAL"


# security
class UnknownSubject(GridBankError):
    code = "UNKNOWN_SUBJECT"


class BadSignature(GridBankError):
    code = "BAD_SIGNATURE"


class UnencodableValue(GridBankError):
    code = "UNENCODABLE_VALUE"


class ConnectionRefused(GridBankError):
    code = "CONNECTION_REFUSED"


# rur
class NegativeUsage(GridBankError):
    code = "NEGATIVE_USAGE"


class ClockSkew(GridBankError):
    code = "CLOCK_SKEW"


class EmptyList(GridBankError):
    code = "EMPTY_LIST"


class MixedJobs(GridBankError):
    code = "MIXED_JOBS"


class MixedRates(GridBankError):
    code = "MIXED_RATES"


class RateMismatch(GridBankError):
    code = "RATE_MISMATCH"


# instruments
class NoSuchInstrument(GridBankError):
    code = "NO_SUCH_INSTRUMENT"


class ExceedsLimit(GridBankError):
    code = "EXCEEDS_LIMIT"


class AlreadyRedeemed(GridBankError):
    code = "ALREADY_REDEEMED"


class WrongPayee(GridBankError):
    code = "WRONG_PAYEE"


class Expired(GridBankError):
    code = "EXPIRED"


class PayeeHasNoAccount(GridBankError):
    code = "PAYEE_HAS_NO_ACCOUNT"


class BadParameters(GridBankError):
    code = "BAD_PARAMETERS"


class BadPreimage(GridBankError):
    code = "BAD_PREIMAGE"


class StaleIndex(GridBankError):
    code = "STALE_INDEX"


class IndexOverflow(GridBankError):
    code = "INDEX_OVERFLOW"


class UnreachableEndpoint(GridBankError):
    code = "UNREACHABLE_ENDPOINT"


# bank server
class UnknownOp(GridBankError):
    code = "UNKNOWN_OP"


class SchemaViolation(GridBankError):
    code = "SCHEMA_VIOLATION"


class Forbidden(GridBankError):
    code = "FORBIDDEN"


class NoHistory(GridBankError):
    code = "NO_HISTORY"


class ConfigError(GridBankError):
    code = "CONFIG_ERROR"


# provider side
class InvalidInstrument(GridBankError):
    code = "INVALID_INSTRUMENT"


class RatesExpired(GridBankError):
    code = "RATES_EXPIRED"


class PoolExhausted(GridBankError):
    code = "POOL_EXHAUSTED"


class NotActive(GridBankError):
    code = "NOT_ACTIVE"


class BankUnreachable(GridBankError):
    code = "BANK_UNREACHABLE"


# consumer side
class BudgetExceeded(GridBankError):
    code = "BUDGET_EXCEEDED"


class BelowCommitted(GridBankError):
    code = "BELOW_COMMITTED"


def _all_subclasses(cls):
    for sub in cls.__subclasses__():
        yield sub
        yield from _all_subclasses(sub)


ERROR_CODES: dict[str, type[GridBankError]] = {
    cls.code: cls for cls in [GridBankError, *_all_subclasses(GridBankError)]
}


def error_from_code(code: str, message: str = "") -> GridBankError:
    """Rebuild the exception named by a wire error code."""
    cls = ERROR_CODES.get(code, GridBankError)
    err = cls(message or code)
    if cls is GridBankError:
        err.code = code
    return err
