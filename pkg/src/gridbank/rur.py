"""Resource Usage Records: conversion from raw usage, aggregation and
itemized charging.

Quantities and rates are :class:`~decimal.Decimal` values and are written
to the canonical text form as plain decimal strings. Durations converted
from seconds to hours are quantized to 9 decimal places (half-even) so the
serialized record has a finite exact form; charging then works from the
serialized quantities only, so a charge recomputed from a stored RUR blob
always matches the original.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from decimal import ROUND_HALF_EVEN, Decimal, InvalidOperation, localcontext

from .clock import format_ts, parse_ts, utc
from .errors import (
    BadParameters,
    BadSignature,
    ClockSkew,
    CurrencyMismatch,
    EmptyList,
    MixedJobs,
    MixedRates,
    NegativeUsage,
    RateMismatch,
)
from .money import DEFAULT_CURRENCY, Money
from .security import Identity, canonical_decode, canonical_encode, sign_body, verify_body

HOUR = Decimal(3600)
QUANTUM = Decimal("1e-9")

# chargeable item -> RUR field name
ITEM_FIELDS = {
    "wall_clock": "WallClockTime",
    "cpu": "CPUTime",
    "memory": "MainMemory",
    "storage": "SecondaryStorage",
    "network": "NetworkActivity",
    "software": "SoftwareService",
}
FIELD_ITEMS = {v: k for k, v in ITEM_FIELDS.items()}
ITEMS = tuple(ITEM_FIELDS)
# items whose rate is a price per hour of elapsed or CPU time
TIME_ITEMS = ("wall_clock", "cpu", "software")


def dec(value) -> Decimal:
    if isinstance(value, Decimal):
        d = value
    else:
        try:
            d = Decimal(repr(value) if isinstance(value, float) else str(value))
        except InvalidOperation:
            raise BadParameters(f"not a number: {value!r}") from None
    if not d.is_finite():
        raise BadParameters(f"non-finite quantity {value!r}")
    return d


def dec_str(d: Decimal) -> str:
    s = format(d.normalize(), "f")
    return "0" if s in ("-0", "") else s


@dataclass(frozen=True)
class RawUsage:
    local_job_id: str
    wall_start: datetime
    wall_end: datetime
    user_cpu_seconds: Decimal = Decimal(0)
    sys_cpu_seconds: Decimal = Decimal(0)
    memory_mb_hours: Decimal = Decimal(0)
    storage_mb_hours: Decimal = Decimal(0)
    network_mb_total: Decimal = Decimal(0)

    def __post_init__(self):
        for name in ("user_cpu_seconds", "sys_cpu_seconds", "memory_mb_hours",
                     "storage_mb_hours", "network_mb_total"):
            object.__setattr__(self, name, dec(getattr(self, name)))
        object.__setattr__(self, "wall_start", utc(self.wall_start))
        object.__setattr__(self, "wall_end", utc(self.wall_end))

    def validate(self) -> None:
        if self.wall_end < self.wall_start:
            raise ClockSkew(f"job ends {format_ts(self.wall_end)} before it starts")
        for name in ("user_cpu_seconds", "sys_cpu_seconds", "memory_mb_hours",
                     "storage_mb_hours", "network_mb_total"):
            if getattr(self, name) < 0:
                raise NegativeUsage(f"{name} is negative")

    @property
    def wall_seconds(self) -> int:
        return int((self.wall_end - self.wall_start).total_seconds())

    def to_wire(self) -> dict:
        return {
            "local_job_id": self.local_job_id,
            "wall_start": format_ts(self.wall_start),
            "wall_end": format_ts(self.wall_end),
            "user_cpu_seconds": dec_str(self.user_cpu_seconds),
            "sys_cpu_seconds": dec_str(self.sys_cpu_seconds),
            "memory_mb_hours": dec_str(self.memory_mb_hours),
            "storage_mb_hours": dec_str(self.storage_mb_hours),
            "network_mb_total": dec_str(self.network_mb_total),
        }

    @classmethod
    def from_wire(cls, d: dict) -> "RawUsage":
        try:
            return cls(
                d.get("local_job_id", ""), parse_ts(d["wall_start"]), parse_ts(d["wall_end"]),
                **{k: dec(d.get(k, "0")) for k in (
                    "user_cpu_seconds", "sys_cpu_seconds", "memory_mb_hours",
                    "storage_mb_hours", "network_mb_total")})
        except KeyError as exc:
            raise BadParameters(f"usage record missing {exc}") from None

    def scaled(self, fraction: Decimal) -> "RawUsage":
        """The first ``fraction`` of this usage, as reported part-way through a job."""
        end = self.wall_start + timedelta(seconds=int(self.wall_seconds * fraction))
        return RawUsage(self.local_job_id, self.wall_start, end,
                        self.user_cpu_seconds * fraction, self.sys_cpu_seconds * fraction,
                        self.memory_mb_hours * fraction, self.storage_mb_hours * fraction,
                        self.network_mb_total * fraction)


@dataclass(frozen=True)
class ChargeableRates:
    """A provider's posted price list. Only items present are charged."""

    items: dict[str, Decimal]
    currency: str = DEFAULT_CURRENCY
    gsp_subject: str = ""
    valid_until: datetime | None = None
    fixed_price: Money | None = None
    signature: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        items = {}
        for k, v in self.items.items():
            if k not in ITEM_FIELDS:
                raise BadParameters(f"unknown chargeable item {k!r}")
            v = dec(v)
            if v < 0:
                raise BadParameters(f"negative rate for {k}")
            items[k] = v
        object.__setattr__(self, "items", items)
        if self.valid_until is not None:
            object.__setattr__(self, "valid_until", utc(self.valid_until))

    def body(self) -> dict:
        return {
            "items": {k: dec_str(v) for k, v in sorted(self.items.items())},
            "currency": self.currency,
            "gsp_subject": self.gsp_subject,
            "valid_until": format_ts(self.valid_until) if self.valid_until else None,
            "fixed_price": self.fixed_price.to_wire() if self.fixed_price else None,
        }

    @classmethod
    def from_body(cls, b: dict, signature: dict | None = None) -> "ChargeableRates":
        try:
            return cls(
                {k: dec(v) for k, v in b["items"].items()}, b["currency"], b["gsp_subject"],
                parse_ts(b["valid_until"]) if b.get("valid_until") else None,
                Money.from_wire(b["fixed_price"]) if b.get("fixed_price") else None,
                signature)
        except (KeyError, TypeError, AttributeError):
            raise BadParameters("malformed rates record") from None

    def signed_by(self, identity: Identity) -> "ChargeableRates":
        rates = replace(self, gsp_subject=identity.subject)
        return replace(rates, signature=sign_body(identity, rates.body()))

    def to_wire(self) -> dict:
        return self.signature if self.signature else {"body": self.body()}

    @classmethod
    def from_wire(cls, data: dict) -> "ChargeableRates":
        if not isinstance(data, dict) or "body" not in data:
            raise BadParameters("malformed rates record")
        return cls.from_body(data["body"], data if "signature" in data else None)

    def verify(self, public_key: bytes) -> None:
        if self.signature is None:
            raise BadSignature("rates are unsigned")
        body = verify_body(public_key, self.signature, self.gsp_subject)
        if body != self.body():
            raise BadSignature("rates differ from their signed body")

    def total_price_per_hour(self) -> Decimal:
        return sum((self.items[k] for k in TIME_ITEMS if k in self.items), Decimal(0))


@dataclass(frozen=True)
class ResourceUsageRecord:
    user_host: str
    user_certificate_name: str
    job_id: str
    application_name: str
    start_date: datetime
    end_date: datetime
    resource_host: str
    resource_certificate_name: str
    local_job_id: str
    usage: dict[str, Decimal]
    rates: dict[str, Decimal]
    currency: str = DEFAULT_CURRENCY
    host_type: str | None = None
    description: dict | None = None

    @property
    def total_price_per_time_unit(self) -> Decimal:
        return sum((self.rates[k] for k in TIME_ITEMS if k in self.rates), Decimal(0))

    @property
    def job_cost(self) -> Money:
        hours = Decimal(int((self.end_date - self.start_date).total_seconds())) / HOUR
        return Money.from_decimal(hours * self.total_price_per_time_unit, self.currency)

    def to_wire(self) -> dict:
        resource = {
            "HostName": self.resource_host,
            "CertificateName": self.resource_certificate_name,
            "LocalJobID": self.local_job_id,
        }
        if self.host_type is not None:
            resource["HostType"] = self.host_type
        if self.description is not None:
            resource["ResourceDescription"] = self.description
        for item in self.usage:
            resource[ITEM_FIELDS[item]] = {"Usage": dec_str(self.usage[item]),
                                           "Price": dec_str(self.rates[item])}
        return {
            "UserDetails": {"HostName": self.user_host, "CertificateName": self.user_certificate_name},
            "JobDetails": {"JobID": self.job_id, "ApplicationName": self.application_name,
                           "JobStartDate": format_ts(self.start_date),
                           "JobEndDate": format_ts(self.end_date)},
            "ResourceDetails": resource,
            "TotalPricePerTimeUnit": dec_str(self.total_price_per_time_unit),
            "JobCost": self.job_cost.text(),
            "Currency": self.currency,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "ResourceUsageRecord":
        try:
            user, job, res = d["UserDetails"], d["JobDetails"], d["ResourceDetails"]
            usage, rates = {}, {}
            for fname, item in FIELD_ITEMS.items():
                if fname in res:
                    usage[item] = dec(res[fname]["Usage"])
                    rates[item] = dec(res[fname]["Price"])
            return cls(
                user["HostName"], user["CertificateName"], job["JobID"], job["ApplicationName"],
                parse_ts(job["JobStartDate"]), parse_ts(job["JobEndDate"]),
                res["HostName"], res["CertificateName"], res["LocalJobID"], usage, rates,
                d.get("Currency", DEFAULT_CURRENCY), res.get("HostType"), res.get("ResourceDescription"))
        except (KeyError, TypeError):
            raise BadParameters("malformed resource usage record") from None

    def to_bytes(self) -> bytes:
        return canonical_encode(self.to_wire())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ResourceUsageRecord":
        return cls.from_wire(canonical_decode(blob))

    def digest(self) -> str:
        return rur_digest(self.to_bytes())


def rur_digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def _hours(seconds: Decimal) -> Decimal:
    with localcontext() as ctx:
        ctx.prec = 60
        return (seconds / HOUR).quantize(QUANTUM, rounding=ROUND_HALF_EVEN)


def usage_quantities(raw: RawUsage) -> dict[str, Decimal]:
    """Chargeable quantities in billing units (hours, MB*hours, MB)."""
    return {
        "wall_clock": _hours(Decimal(raw.wall_seconds)),
        "cpu": _hours(raw.user_cpu_seconds),
        "memory": raw.memory_mb_hours,
        "storage": raw.storage_mb_hours,
        "network": raw.network_mb_total,
        "software": _hours(raw.sys_cpu_seconds),
    }


def convert_raw_usage(raw: RawUsage, user_meta: dict, job_meta: dict, resource_meta: dict,
                      rates: ChargeableRates) -> ResourceUsageRecord:
    """Build the OS-independent record for one job.

    The record carries exactly the items priced in ``rates``.
    ``user_meta`` holds ``host`` and ``certificate_name``; ``job_meta`` holds
    ``job_id`` and ``application_name``; ``resource_meta`` holds ``host``,
    ``certificate_name`` and optionally ``host_type`` and ``description``.
    """
    raw.validate()
    quantities = usage_quantities(raw)
    usage = {item: quantities[item] for item in ITEMS if item in rates.items}
    return ResourceUsageRecord(
        user_host=user_meta.get("host", ""),
        user_certificate_name=user_meta["certificate_name"],
        job_id=str(job_meta["job_id"]),
        application_name=job_meta.get("application_name", ""),
        start_date=raw.wall_start,
        end_date=raw.wall_end,
        resource_host=resource_meta.get("host", ""),
        resource_certificate_name=resource_meta.get("certificate_name", rates.gsp_subject),
        local_job_id=raw.local_job_id,
        usage=usage,
        rates={item: rates.items[item] for item in usage},
        currency=rates.currency,
        host_type=resource_meta.get("host_type"),
        description=resource_meta.get("description"),
    )


def aggregate_rurs(records: list[ResourceUsageRecord], host: str | None = None) -> ResourceUsageRecord:
    if not records:
        raise EmptyList("nothing to aggregate")
    first = records[0]
    usage = dict.fromkeys(first.usage, Decimal(0))
    local_ids = []
    for r in records:
        if r.job_id != first.job_id or r.user_certificate_name != first.user_certificate_name:
            raise MixedJobs(f"records for {r.job_id!r} and {first.job_id!r} cannot be combined")
        if r.rates != first.rates or r.currency != first.currency:
            raise MixedRates(f"record for {r.resource_host!r} was priced differently")
        for item, q in r.usage.items():
            usage[item] += q
        if r.local_job_id not in local_ids:
            local_ids.append(r.local_job_id)
    return replace(
        first,
        start_date=min(r.start_date for r in records),
        end_date=max(r.end_date for r in records),
        resource_host=first.resource_host if host is None else host,
        local_job_id=",".join(local_ids),
        usage=usage,
    )


@dataclass(frozen=True)
class ChargeItem:
    item: str
    usage: Decimal
    rate: Decimal
    charge: Money

    def to_wire(self) -> dict:
        return {"item": self.item, "usage": dec_str(self.usage), "rate": dec_str(self.rate),
                "charge": self.charge.to_wire()}

    @classmethod
    def from_wire(cls, d: dict) -> "ChargeItem":
        return cls(d["item"], dec(d["usage"]), dec(d["rate"]), Money.from_wire(d["charge"]))


@dataclass(frozen=True)
class ChargeBreakdown:
    items: tuple[ChargeItem, ...]
    total: Money
    rur_digest: str

    def to_wire(self) -> dict:
        return {"items": [i.to_wire() for i in self.items], "total": self.total.to_wire(),
                "rur_digest": self.rur_digest}

    @classmethod
    def from_wire(cls, d: dict) -> "ChargeBreakdown":
        return cls(tuple(ChargeItem.from_wire(i) for i in d["items"]), Money.from_wire(d["total"]),
                   d["rur_digest"])


def compute_charge(rur: ResourceUsageRecord, rates: ChargeableRates | dict | None = None) -> ChargeBreakdown:
    """Multiply usage by rate per item, round each half-up to milli-units, sum.

    ``rates`` defaults to the rates embedded in the record. When given, its
    item set and prices must match the record's exactly.
    """
    if rates is None:
        rate_items, currency = rur.rates, rur.currency
    elif isinstance(rates, ChargeableRates):
        rate_items, currency = rates.items, rates.currency
    else:
        rate_items, currency = {k: dec(v) for k, v in rates.items()}, rur.currency
    if currency != rur.currency:
        raise CurrencyMismatch(f"rates in {currency}, record in {rur.currency}")
    if set(rate_items) != set(rur.usage):
        missing = sorted(set(rate_items) ^ set(rur.usage))
        raise RateMismatch(f"rates and usage record disagree on items {missing}")
    for item, r in rate_items.items():
        if rur.rates.get(item) != r:
            raise RateMismatch(f"record was priced at {rur.rates.get(item)} for {item}, not {r}")
    charges = []
    total = Money.zero(currency)
    with localcontext() as ctx:
        ctx.prec = 80
        for item in ITEMS:
            if item not in rate_items:
                continue
            c = Money.from_decimal(rur.usage[item] * rate_items[item], currency)
            charges.append(ChargeItem(item, rur.usage[item], rate_items[item], c))
            total = total + c
    return ChargeBreakdown(tuple(charges), total, rur.digest())
