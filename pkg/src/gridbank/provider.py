"""Provider-side components.

* :class:`GridTradeService` posts signed, time-limited rates.
* :class:`TemplateAccountPool` lends local accounts to consumers for the
  duration of a job and mirrors live mappings into a grid-mapfile.
* :class:`ChargingModule` validates instruments, meters and settles jobs and
  redeems the resulting claims at the bank in batches.
* :class:`ProviderNode` exposes all of it to consumers as a signed-request
  endpoint.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from decimal import ROUND_CEILING, Decimal
from pathlib import Path
from typing import Callable

from .clock import SystemClock
from .errors import (
    BadSignature,
    BankUnreachable,
    ConfigError,
    GridBankError,
    InvalidInstrument,
    NotActive,
    PoolExhausted,
    RatesExpired,
    SchemaViolation,
    UnknownOp,
)
from .instruments import (
    GridCheque,
    HashChainCommitment,
    PayWord,
    iterate_hash,
    verify_payword,
)
from .money import Money
from .rur import (
    ChargeableRates,
    ChargeBreakdown,
    RawUsage,
    compute_charge,
    convert_raw_usage,
    dec,
)
from .security import (
    Identity,
    KeyRegistry,
    b64d,
    b64e,
    sign_body,
    verify_body,
    verify_envelope,
)
from .wire import ConnectionClosed, error_response, ok_response, parse_request

log = logging.getLogger(__name__)

DEFAULT_POOL_SIZE = 4
DISCREPANCY_TOLERANCE = Decimal("0.05")
# Redemption failures worth retrying; every other code is final.
TRANSIENT_CODES = frozenset({"INTERNAL_ERROR", "PAYEE_HAS_NO_ACCOUNT", "CONNECTION_CLOSED",
                             "BANK_UNREACHABLE", "UNREACHABLE_ENDPOINT"})


# -- configuration ------------------------------------------------------------

@dataclass
class ProviderConfig:
    subject: str
    rates: dict[str, str]
    pool_accounts: list[str]
    bank_endpoint: str = ""
    listen: str = ""
    rates_ttl_seconds: int = 3600
    currency: str = "G$"
    fixed_price: str | None = None
    host: str = ""
    host_type: str | None = None
    description: dict | None = None
    mapfile: str | None = None
    key_file: str | None = None
    keys: str | None = None
    bank_subject: str = "CN=GridBank"

    @classmethod
    def from_dict(cls, d: dict) -> "ProviderConfig":
        pool = d.get("pool_accounts")
        if pool is None:
            pool = template_account_names(int(d.get("pool_size", DEFAULT_POOL_SIZE)))
        try:
            return cls(subject=d["subject"], rates={k: str(v) for k, v in d["rates"].items()},
                       pool_accounts=list(pool), bank_endpoint=d.get("bank_endpoint", ""),
                       listen=d.get("listen", ""), rates_ttl_seconds=int(d.get("rates_ttl_seconds", 3600)),
                       currency=d.get("currency", "G$"), fixed_price=d.get("fixed_price"),
                       host=d.get("host", ""), host_type=d.get("host_type"),
                       description=d.get("description"), mapfile=d.get("mapfile"),
                       key_file=d.get("key_file"), keys=d.get("keys"),
                       bank_subject=d.get("bank_subject", "CN=GridBank"))
        except (KeyError, AttributeError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad provider config: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "ProviderConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read provider config {path}: {exc}") from None
        base = Path(path).parent
        cfg = cls.from_dict(data)
        for attr in ("mapfile", "key_file", "keys"):
            value = getattr(cfg, attr)
            if value and not Path(value).is_absolute():
                setattr(cfg, attr, str(base / value))
        return cfg


def template_account_names(n: int) -> list[str]:
    return [f"grid{i:04d}" for i in range(1, n + 1)]


# -- trade service --------------------------------------------------------------

class GridTradeService:
    """Quotes the posted price list; anything beyond the machine is refused."""

    def __init__(self, identity: Identity, items: dict, clock=None, ttl_seconds: int = 3600,
                 currency: str = "G$", fixed_price: Money | None = None, description: dict | None = None):
        self.identity = identity
        self.items = {k: dec(v) for k, v in items.items()}
        self.clock = clock or SystemClock()
        self.ttl = timedelta(seconds=ttl_seconds)
        self.currency = currency
        self.fixed_price = fixed_price
        self.description = description

    def negotiate_rates(self, requirements: dict | None = None) -> ChargeableRates | None:
        if requirements and self.description:
            for key, wanted in requirements.items():
                have = self.description.get(key)
                if have is not None and dec(wanted) > dec(have):
                    return None
        rates = ChargeableRates(self.items, self.currency, self.identity.subject,
                                self.clock.now() + self.ttl, self.fixed_price)
        return rates.signed_by(self.identity)


# -- template accounts ------------------------------------------------------------

def format_mapfile(entries) -> str:
    lines = []
    for subject, account in entries:
        if '"' in subject or "\n" in subject:
            raise SchemaViolation(f"subject {subject!r} cannot be written to a mapfile")
        lines.append(f'"{subject}" {account}\n')
    return "".join(lines)


def parse_mapfile(text: str) -> list[tuple[str, str]]:
    """``"subject" local_account`` lines, sorted."""
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        line = line.strip()
        if not line.startswith('"'):
            raise ConfigError(f"mapfile line {lineno}: subject must be quoted")
        end = line.find('"', 1)
        account = line[end + 1:].strip() if end > 0 else ""
        if end < 0 or not account or " " in account:
            raise ConfigError(f"mapfile line {lineno}: malformed")
        entries.append((line[1:end], account))
    return sorted(entries)


@dataclass(frozen=True)
class Mapping:
    consumer_subject: str
    local_account: str
    allocated_at: datetime
    instrument_id: str


class TemplateAccountPool:
    def __init__(self, accounts: list[str], mapfile: str | Path | None = None):
        if len(set(accounts)) != len(accounts) or not accounts:
            raise ConfigError("template accounts must be a non-empty list of distinct names")
        self.accounts = tuple(accounts)
        self._free = list(accounts)
        self._mappings: dict[str, Mapping] = {}
        self._lock = threading.Lock()
        self.mapfile = Path(mapfile) if mapfile else None
        self._write()

    @property
    def free_set(self) -> frozenset[str]:
        with self._lock:
            return frozenset(self._free)

    def mappings(self) -> list[Mapping]:
        with self._lock:
            return sorted(self._mappings.values(), key=lambda m: m.local_account)

    def entries(self) -> list[tuple[str, str]]:
        return sorted((m.consumer_subject, m.local_account) for m in self.mappings())

    def allocate(self, consumer_subject: str, instrument_id: str, now: datetime) -> str:
        with self._lock:
            for m in self._mappings.values():
                if (m.consumer_subject, m.instrument_id) == (consumer_subject, instrument_id):
                    raise InvalidInstrument(f"{instrument_id} already holds {m.local_account}")
            if not self._free:
                raise PoolExhausted(f"all {len(self.accounts)} template accounts are in use")
            account = self._free.pop(0)
            self._mappings[account] = Mapping(consumer_subject, account, now, instrument_id)
            self._write_locked()
            return account

    def release(self, account: str) -> None:
        with self._lock:
            if self._mappings.pop(account, None) is None:
                raise NotActive(f"{account} is not mapped")
            self._free.append(account)
            self._free.sort(key=self.accounts.index)
            self._write_locked()

    def _write(self) -> None:
        with self._lock:
            self._write_locked()

    def _write_locked(self) -> None:
        if self.mapfile is None:
            return
        text = format_mapfile(sorted((m.consumer_subject, m.local_account) for m in self._mappings.values()))
        self.mapfile.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.mapfile.parent, prefix=".mapfile.")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, self.mapfile)

    def mapfile_entries(self) -> list[tuple[str, str]]:
        if self.mapfile is None:
            return self.entries()
        return parse_mapfile(self.mapfile.read_text(encoding="utf-8"))


# -- charging -------------------------------------------------------------------

@dataclass
class Allocation:
    allocation_id: str
    local_account: str
    consumer_subject: str
    kind: str  # cheque | chain | direct
    instrument: GridCheque | HashChainCommitment | dict
    rates: ChargeableRates
    job: dict
    state: str = "Active"
    usage: RawUsage | None = None
    discrepancy: dict | None = None
    highest_payword: PayWord | None = None

    @property
    def instrument_id(self) -> str:
        if self.kind == "direct":
            return f"TXN-{self.instrument['body']['transaction_id']}"
        return self.instrument.instrument_id


@dataclass
class SignedCharge:
    allocation_id: str
    instrument_id: str
    breakdown: ChargeBreakdown
    rates: ChargeableRates
    rur: bytes
    claim: Money
    shortfall: Money
    discrepancy: dict | None
    signature: dict | None = field(default=None, compare=False)

    def body(self) -> dict:
        return {"allocation_id": self.allocation_id, "instrument_id": self.instrument_id,
                "breakdown": self.breakdown.to_wire(), "rates": self.rates.to_wire(),
                "rur": b64e(self.rur), "claim": self.claim.to_wire(),
                "shortfall": self.shortfall.to_wire(), "discrepancy": self.discrepancy}

    def to_wire(self) -> dict:
        return self.signature or {"body": self.body()}

    @classmethod
    def from_wire(cls, data: dict) -> "SignedCharge":
        b = data["body"]
        return cls(b["allocation_id"], b["instrument_id"], ChargeBreakdown.from_wire(b["breakdown"]),
                   ChargeableRates.from_wire(b["rates"]), b64d(b["rur"]), Money.from_wire(b["claim"]),
                   Money.from_wire(b["shortfall"]), b.get("discrepancy"),
                   data if "signature" in data else None)

    def verify(self, public_key: bytes, gsp_subject: str) -> None:
        if self.signature is None or verify_body(public_key, self.signature, gsp_subject) != self.body():
            raise BadSignature("charge does not match its signature")


@dataclass
class QueuedClaim:
    charge: SignedCharge
    item: dict
    retries: int = 0


@dataclass
class BatchResult:
    redeemed: list[dict] = field(default_factory=list)
    failed: list[dict] = field(default_factory=list)
    retained: int = 0
    sent: bool = False

    def to_wire(self) -> dict:
        return {"redeemed": self.redeemed, "failed": self.failed, "retained": self.retained,
                "sent": self.sent}


def cpu_hours(raw: RawUsage) -> Decimal:
    return (dec(raw.user_cpu_seconds) + dec(raw.sys_cpu_seconds)) / 3600


class ChargingModule:
    def __init__(self, identity: Identity, bank_public_key: bytes, bank_subject: str,
                 pool: TemplateAccountPool, clock=None, bank_client: Callable | None = None,
                 resource_meta: dict | None = None, own_account_id: str | None = None):
        self.identity = identity
        self.bank_public_key = bank_public_key
        self.bank_subject = bank_subject
        self.pool = pool
        self.clock = clock or SystemClock()
        self._bank_client = bank_client
        self.resource_meta = {"certificate_name": identity.subject, **(resource_meta or {})}
        self._own_account_id = own_account_id
        self.allocations: dict[str, Allocation] = {}
        self.queue: list[QueuedClaim] = []
        self.confirmations: dict[int, dict] = {}
        self._seen_instruments: set[str] = set()
        self._counter = 0
        self._lock = threading.RLock()

    @property
    def own_account_id(self) -> str:
        if self._own_account_id is None:
            client = self._connect_bank()
            try:
                self._own_account_id = client.call("my_account")["AccountID"]
            finally:
                client.close()
        return self._own_account_id

    def _connect_bank(self):
        if self._bank_client is None:
            raise BankUnreachable("no bank connection configured")
        try:
            return self._bank_client()
        except (ConnectionClosed, OSError, GridBankError) as exc:
            if isinstance(exc, GridBankError) and exc.code not in TRANSIENT_CODES | {"CONNECTION_REFUSED"}:
                raise
            raise BankUnreachable(f"cannot reach the bank: {exc}") from exc

    # -- validation -----------------------------------------------------------

    def _check_rates(self, rates: ChargeableRates) -> None:
        if rates.gsp_subject != self.identity.subject:
            raise BadSignature("rates were not posted by this provider")
        rates.verify(self.identity.public_key)
        if rates.valid_until is None or self.clock.now() >= rates.valid_until:
            raise RatesExpired("rates are past valid_until; negotiate again")

    def _check_instrument(self, kind: str, instrument, rates: ChargeableRates) -> None:
        now = self.clock.now()
        if kind in ("cheque", "chain"):
            if not instrument.signature_valid(self.bank_public_key, self.bank_subject):
                raise InvalidInstrument("instrument signature does not verify")
            if instrument.payee_subject != self.identity.subject:
                raise InvalidInstrument(f"instrument is payable to {instrument.payee_subject!r}")
            if now >= instrument.expires_at:
                raise InvalidInstrument("instrument has expired")
            currency = (instrument.amount_limit if kind == "cheque" else instrument.link_value).currency
            if currency != rates.currency:
                raise InvalidInstrument("instrument currency differs from the rates")
        elif kind == "direct":
            try:
                body = verify_body(self.bank_public_key, instrument, self.bank_subject)
            except BadSignature as exc:
                raise InvalidInstrument(f"transfer confirmation rejected: {exc}") from None
            if body.get("recipient_account_id") != self.own_account_id:
                raise InvalidInstrument("transfer was not made to this provider")
            if rates.fixed_price is not None and Money.from_wire(body["amount"]) < rates.fixed_price:
                raise InvalidInstrument("transfer is below the fixed price")
        else:
            raise InvalidInstrument(f"unknown instrument kind {kind!r}")

    # -- lifecycle --------------------------------------------------------------

    def authorize_access(self, consumer_subject: str, kind: str, instrument, rates: ChargeableRates,
                         job: dict | None = None) -> Allocation:
        self._check_rates(rates)
        self._check_instrument(kind, instrument, rates)
        with self._lock:
            probe = Allocation("", "", consumer_subject, kind, instrument, rates, {})
            iid = probe.instrument_id
            if iid in self._seen_instruments:
                raise InvalidInstrument(f"{iid} has already been used for a job")
            account = self.pool.allocate(consumer_subject, iid, self.clock.now())
            self._seen_instruments.add(iid)
            self._counter += 1
            alloc = Allocation(f"ALLOC-{self._counter:06d}", account, consumer_subject, kind, instrument,
                               rates, dict(job or {}))
            self.allocations[alloc.allocation_id] = alloc
            return alloc

    def _active(self, allocation_id: str) -> Allocation:
        alloc = self.allocations.get(allocation_id)
        if alloc is None or alloc.state != "Active":
            raise NotActive(f"allocation {allocation_id} is not active")
        return alloc

    def accept_payword(self, allocation_id: str, payword: PayWord) -> int:
        """Check a streamed payword locally; returns the highest index held."""
        with self._lock:
            alloc = self._active(allocation_id)
            if alloc.kind != "chain":
                raise InvalidInstrument("allocation is not paid by hash chain")
            last = alloc.highest_payword.index if alloc.highest_payword else 0
            verify_payword(alloc.instrument, payword, last, self.clock.now()).raise_unless_valid()
            alloc.highest_payword = payword
            return payword.index

    def meter_job(self, allocation_id: str, declared: RawUsage, agent_usage: RawUsage | None = None) -> RawUsage:
        with self._lock:
            alloc = self._active(allocation_id)
            usage = RawUsage(f"{alloc.local_account}:{alloc.job.get('job_id', allocation_id)}",
                             declared.wall_start, declared.wall_end, declared.user_cpu_seconds,
                             declared.sys_cpu_seconds, declared.memory_mb_hours, declared.storage_mb_hours,
                             declared.network_mb_total)
            usage.validate()
            alloc.usage = usage
            alloc.discrepancy = None
            if agent_usage is not None:
                meter, agent = cpu_hours(usage), cpu_hours(agent_usage)
                base = agent if agent else meter
                if base and abs(meter - agent) / base > DISCREPANCY_TOLERANCE:
                    alloc.discrepancy = {"metered_cpu_hours": str(meter), "agent_cpu_hours": str(agent)}
            return usage

    def _claim(self, alloc: Allocation, charge: Money) -> tuple[Money, Money, dict | None]:
        """Amount to claim, shortfall, and the batch item for the bank."""
        zero = Money.zero(charge.currency)
        if alloc.kind == "direct":
            paid = Money.from_wire(alloc.instrument["body"]["amount"])
            return zero, max(charge - paid, zero), None
        if alloc.kind == "cheque":
            claim = min(charge, alloc.instrument.amount_limit)
            item = {"kind": "cheque", "cheque": alloc.instrument.to_wire(), "amount": claim.to_wire()}
            return claim, charge - claim, item
        link = alloc.instrument.link_value
        needed = int((Decimal(charge.amount_milli) / link.amount_milli).to_integral_value(ROUND_CEILING))
        held = alloc.highest_payword.index if alloc.highest_payword else 0
        index = min(needed, held)
        claim = link * index
        shortfall = max(charge - claim, zero)
        if index == 0:
            return zero, shortfall, None
        top = alloc.highest_payword
        word = PayWord(top.chain_id, index, iterate_hash(top.preimage, top.index - index))
        return claim, shortfall, {"kind": "chain", "commitment": alloc.instrument.to_wire(),
                                  "payword": word.to_wire()}

    def settle_job(self, allocation_id: str, usage: RawUsage | None = None) -> SignedCharge:
        with self._lock:
            alloc = self._active(allocation_id)
            if usage is not None:
                self.meter_job(allocation_id, usage)
            if alloc.usage is None:
                raise NotActive(f"allocation {allocation_id} has no metered usage")
            user = {"certificate_name": alloc.consumer_subject, "host": alloc.job.get("host", "")}
            job = {"job_id": alloc.job.get("job_id", allocation_id),
                   "application_name": alloc.job.get("application_name", "")}
            rur = convert_raw_usage(alloc.usage, user, job, self.resource_meta, alloc.rates)
            breakdown = compute_charge(rur, alloc.rates)
            charge = breakdown.total
            if alloc.rates.fixed_price is not None and alloc.kind == "direct":
                charge = alloc.rates.fixed_price
            claim, shortfall, item = self._claim(alloc, charge)
            blob = rur.to_bytes()
            signed = SignedCharge(alloc.allocation_id, alloc.instrument_id, breakdown, alloc.rates, blob,
                                  claim, shortfall, alloc.discrepancy)
            signed.signature = sign_body(self.identity, signed.body())
            self.pool.release(alloc.local_account)
            alloc.state = "Settled"
            if item is not None and claim.is_positive():
                item["rur"] = b64e(blob)
                self.queue.append(QueuedClaim(signed, item))
            return signed

    def record_confirmation(self, confirmation: dict) -> int:
        body = verify_body(self.bank_public_key, confirmation, self.bank_subject)
        with self._lock:
            self.confirmations[body["transaction_id"]] = confirmation
        return body["transaction_id"]

    # -- redemption ----------------------------------------------------------------

    def redeem_batch(self) -> BatchResult:
        with self._lock:
            queue = list(self.queue)
        result = BatchResult()
        if not queue:
            return result
        client = self._connect_bank()
        try:
            try:
                replies = client.call("redeem_batch", items=[q.item for q in queue])["results"]
            except (ConnectionClosed, OSError) as exc:
                raise BankUnreachable(f"batch redemption interrupted: {exc}") from exc
        finally:
            client.close()
        result.sent = True
        keep = []
        for q, r in zip(queue, replies):
            entry = {"allocation_id": q.charge.allocation_id, "instrument_id": q.charge.instrument_id,
                     "claim": q.charge.claim.to_wire()}
            if r["ok"]:
                result.redeemed.append({**entry, "transaction_id": r["transaction_id"]})
            elif r["error"]["code"] in TRANSIENT_CODES:
                q.retries += 1
                keep.append(q)
            else:
                result.failed.append({**entry, "error": r["error"]})
        with self._lock:
            sent = {id(q) for q in queue}
            self.queue = keep + [q for q in self.queue if id(q) not in sent]
            result.retained = len(self.queue)
        return result


# -- network endpoint -------------------------------------------------------------

def _instrument_from_wire(kind: str, data):
    try:
        if kind == "cheque":
            return GridCheque.from_wire(data)
        if kind == "chain":
            return HashChainCommitment.from_wire(data)
        if kind == "direct":
            return data
    except GridBankError as exc:
        raise InvalidInstrument(f"malformed instrument: {exc}") from None
    raise InvalidInstrument(f"unknown instrument kind {kind!r}")


class ProviderNode:
    """GTS, GBCM and GRM behind one signed-request endpoint."""

    def __init__(self, config: ProviderConfig, identity: Identity, registry: KeyRegistry,
                 bank_subject: str, clock=None, bank_client: Callable | None = None,
                 own_account_id: str | None = None):
        self.config = config
        self.identity = identity
        self.registry = registry
        self.clock = clock or SystemClock()
        self.speed = Decimal(1)  # relative processing speed, used only by the scenario runner
        fixed = Money.of(config.fixed_price, config.currency) if config.fixed_price else None
        self.gts = GridTradeService(identity, config.rates, self.clock, config.rates_ttl_seconds,
                                    config.currency, fixed, config.description)
        self.pool = TemplateAccountPool(config.pool_accounts, config.mapfile)
        meta = {"host": config.host, "host_type": config.host_type, "description": config.description}
        self.gbcm = ChargingModule(identity, registry.get(bank_subject), bank_subject, self.pool, self.clock,
                                   bank_client, {k: v for k, v in meta.items() if v}, own_account_id)

    def session(self) -> "ProviderSession":
        return ProviderSession(self)

    def dispatch(self, subject: str, op: str, p: dict):
        g = self.gbcm
        if op == "negotiate_rates":
            rates = self.gts.negotiate_rates(p.get("requirements"))
            if rates is None:
                return {"refused": True, "reason": "requirements exceed this resource"}
            return {"refused": False, "rates": rates.to_wire(), "payee_account_id": g.own_account_id}
        if op == "authorize_access":
            kind = p["kind"]
            instrument = _instrument_from_wire(kind, p["instrument"])
            alloc = g.authorize_access(subject, kind, instrument, ChargeableRates.from_wire(p["rates"]),
                                       p.get("job"))
            return {"allocation_id": alloc.allocation_id, "local_account": alloc.local_account}
        if op in ("submit_job", "payword", "complete_job"):
            alloc = g.allocations.get(p.get("allocation_id", ""))
            if alloc is None or alloc.consumer_subject != subject:
                raise NotActive("no such allocation for this consumer")
        if op == "submit_job":
            agent = RawUsage.from_wire(p["agent_usage"]) if p.get("agent_usage") else None
            usage = g.meter_job(p["allocation_id"], RawUsage.from_wire(p["declared_usage"]), agent)
            return {"local_job_id": usage.local_job_id}
        if op == "payword":
            return {"highest_index": g.accept_payword(p["allocation_id"], PayWord.from_wire(p["payword"]))}
        if op == "complete_job":
            return {"charge": g.settle_job(p["allocation_id"]).to_wire()}
        if op == "payment_confirmation":
            if subject != g.bank_subject:
                raise BadSignature("only the bank may deliver confirmations")
            return {"transaction_id": g.record_confirmation(p["confirmation"])}
        if op == "flush":
            return g.redeem_batch().to_wire()
        if op == "pool_status":
            return {"free": sorted(self.pool.free_set),
                    "mappings": [[s, a] for s, a in self.pool.entries()]}
        raise UnknownOp(f"unknown provider operation {op!r}")


class ProviderSession:
    def __init__(self, node: ProviderNode):
        self.node = node
        self.closed = False
        self._last_request_id = 0

    def handle(self, message) -> dict:
        rid = None
        try:
            env = parse_request(message)
            subject = verify_envelope(self.node.registry, env)
            payload = env.message()
            if not isinstance(payload, dict) or set(payload) != {"request_id", "op", "params"}:
                raise SchemaViolation("malformed request")
            rid = payload["request_id"]
            if not isinstance(rid, int) or rid <= self._last_request_id:
                raise SchemaViolation("request ids must strictly increase")
            self._last_request_id = rid
            if not isinstance(payload["params"], dict):
                raise SchemaViolation("params must be a map")
            return ok_response(rid, self.node.dispatch(subject, payload["op"], payload["params"]))
        except GridBankError as err:
            return error_response(rid, err)
        except (KeyError, TypeError, ValueError) as exc:
            return error_response(rid, SchemaViolation(f"bad parameters: {exc}"))
