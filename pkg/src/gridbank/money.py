"""Exact money amounts in integer milli-units."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from fractions import Fraction

from .errors import BadParameters, CurrencyMismatch

DEFAULT_CURRENCY = "G$"
MILLI = 1000


@dataclass(frozen=True)
class Money:
    amount_milli: int
    currency: str = DEFAULT_CURRENCY

    def __post_init__(self):
        if not isinstance(self.amount_milli, int) or isinstance(self.amount_milli, bool):
            raise BadParameters(f"amount_milli must be int, got {self.amount_milli!r}")
        if not self.currency or len(self.currency) > 10:
            raise BadParameters(f"bad currency code {self.currency!r}")

    @classmethod
    def of(cls, value, currency: str = DEFAULT_CURRENCY) -> "Money":
        """Parse an exact decimal amount such as ``"9.224"`` or ``60``.

        Amounts with more than three decimal places are rejected rather than
        rounded; use :meth:`from_decimal` for rounding.
        """
        if isinstance(value, float):
            value = repr(value)
        try:
            d = Decimal(str(value))
        except InvalidOperation:
            raise BadParameters(f"not a decimal amount: {value!r}") from None
        scaled = d * MILLI
        if not scaled.is_finite() or scaled != scaled.to_integral_value():
            raise BadParameters(f"amount {value!r} is not a whole number of milli-units")
        return cls(int(scaled), currency)

    @classmethod
    def from_decimal(cls, value: Decimal | Fraction, currency: str = DEFAULT_CURRENCY) -> "Money":
        """Round an arbitrary amount half-up (away from zero) to milli-units."""
        if isinstance(value, Fraction):
            return cls(round_half_up(value * MILLI), currency)
        q = (Decimal(value) * MILLI).quantize(Decimal(1), rounding=ROUND_HALF_UP)
        return cls(int(q), currency)

    @classmethod
    def zero(cls, currency: str = DEFAULT_CURRENCY) -> "Money":
        return cls(0, currency)

    def _check(self, other: "Money") -> None:
        if not isinstance(other, Money):
            raise TypeError(f"expected Money, got {type(other).__name__}")
        if other.currency != self.currency:
            raise CurrencyMismatch(f"{self.currency} vs {other.currency}")

    def __add__(self, other: "Money") -> "Money":
        self._check(other)
        return Money(self.amount_milli + other.amount_milli, self.currency)

    def __sub__(self, other: "Money") -> "Money":
        self._check(other)
        return Money(self.amount_milli - other.amount_milli, self.currency)

    def __neg__(self) -> "Money":
        return Money(-self.amount_milli, self.currency)

    def __mul__(self, n: int) -> "Money":
        if not isinstance(n, int):
            return NotImplemented
        return Money(self.amount_milli * n, self.currency)

    __rmul__ = __mul__

    def __lt__(self, other: "Money") -> bool:
        self._check(other)
        return self.amount_milli < other.amount_milli

    def __le__(self, other: "Money") -> bool:
        self._check(other)
        return self.amount_milli <= other.amount_milli

    def __gt__(self, other: "Money") -> bool:
        self._check(other)
        return self.amount_milli > other.amount_milli

    def __ge__(self, other: "Money") -> bool:
        self._check(other)
        return self.amount_milli >= other.amount_milli

    def is_positive(self) -> bool:
        return self.amount_milli > 0

    def to_decimal(self) -> Decimal:
        return Decimal(self.amount_milli).scaleb(-3)

    def text(self) -> str:
        """Amount only, always three decimals: ``-40.000``."""
        sign = "-" if self.amount_milli < 0 else ""
        whole, frac = divmod(abs(self.amount_milli), MILLI)
        return f"{sign}{whole}.{frac:03d}"

    def __str__(self) -> str:
        return f"{self.text()} {self.currency}"

    def to_wire(self) -> dict:
        return {"amount_milli": self.amount_milli, "currency": self.currency}

    @classmethod
    def from_wire(cls, data: dict) -> "Money":
        try:
            return cls(data["amount_milli"], data["currency"])
        except (KeyError, TypeError):
            raise BadParameters(f"malformed money value {data!r}") from None


def round_half_up(value: Fraction) -> int:
    """Round to the nearest integer, halves away from zero."""
    value = Fraction(value)
    sign = -1 if value < 0 else 1
    a = abs(value)
    floor = a.numerator // a.denominator
    if (a - floor) * 2 >= 1:
        floor += 1
    return sign * floor


def total(amounts, currency: str = DEFAULT_CURRENCY) -> Money:
    acc = Money.zero(currency)
    for m in amounts:
        acc = acc + m
    return acc
