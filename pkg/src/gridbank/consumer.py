"""Consumer side: the payment module and the job submission flow.

A :class:`PaymentModule` holds one consumer identity and its bank account.
It buys instruments within a budget, drives a job through a provider
(negotiate, pay, authorize, submit, stream paywords, collect the signed
charge) and keeps its book of committed money in step with the bank's
locked balance via :meth:`PaymentModule.reconcile`.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from decimal import ROUND_CEILING, Decimal
from typing import Callable

from .errors import (
    BadParameters,
    BelowCommitted,
    BudgetExceeded,
    GridBankError,
    UnreachableEndpoint,
)
from .instruments import GridCheque, HashChainCommitment, PayWord
from .money import Money
from .provider import SignedCharge, cpu_hours
from .rur import ChargeableRates, RawUsage, ResourceUsageRecord, compute_charge, dec
from .security import Identity
from .wire import SignedClient

DEFAULT_QUANTUM_CPU_HOURS = Decimal("0.1")
DEFAULT_TTL_SECONDS = 86400


class Strategy(str, enum.Enum):
    PAY_BEFORE_USE = "PayBeforeUse"
    PAY_AS_YOU_GO = "PayAsYouGo"
    PAY_AFTER_USE = "PayAfterUse"


class Budget:
    """``committed + spent <= total`` at all times."""

    def __init__(self, total: Money):
        self.total = total
        self.committed = Money.zero(total.currency)
        self.spent = Money.zero(total.currency)
        self._lock = threading.Lock()

    @property
    def headroom(self) -> Money:
        return self.total - self.committed - self.spent

    def set_total(self, amount: Money) -> None:
        with self._lock:
            if amount < self.committed + self.spent:
                raise BelowCommitted(f"budget {amount} is below committed+spent "
                                     f"{self.committed + self.spent}")
            self.total = amount

    def reserve(self, amount: Money) -> None:
        with self._lock:
            if self.committed + self.spent + amount > self.total:
                raise BudgetExceeded(f"{amount} exceeds remaining budget {self.headroom}")
            self.committed += amount

    def release(self, amount: Money) -> None:
        with self._lock:
            self.committed -= amount

    def spend(self, committed_amount: Money, paid: Money) -> None:
        """Move ``paid`` out of the commitment into spending."""
        with self._lock:
            self.committed -= committed_amount
            self.spent += paid

    def to_wire(self) -> dict:
        return {"total": self.total.to_wire(), "committed": self.committed.to_wire(),
                "spent": self.spent.to_wire()}


@dataclass
class JobSpec:
    job_id: str
    application_name: str
    gsp_endpoint: str
    gsp_subject: str
    strategy: Strategy
    declared_usage: RawUsage
    budget: Money
    link_value: Money | None = None
    requirements: dict | None = None

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if not self.budget.is_positive():
            raise BadParameters("a job needs a positive budget slice")

    @classmethod
    def from_wire(cls, d: dict) -> "JobSpec":
        try:
            cur = d.get("currency", "G$")
            return cls(d["job_id"], d.get("application_name", ""), d["gsp_endpoint"], d["gsp_subject"],
                       Strategy(d["strategy"]), RawUsage.from_wire(d["declared_usage"]),
                       Money.of(d["budget"], cur),
                       Money.of(d["link_value"], cur) if d.get("link_value") else None,
                       d.get("requirements"))
        except (KeyError, ValueError, TypeError) as exc:
            raise BadParameters(f"bad job spec: {exc}") from None


@dataclass
class _Outstanding:
    instrument_id: str
    reserved: Money
    paid: Money


@dataclass
class JobReport:
    job_id: str
    gsp_subject: str
    strategy: str
    steps: list[str] = field(default_factory=list)
    allocation_id: str | None = None
    local_account: str | None = None
    instrument_id: str | None = None
    charge: SignedCharge | None = None
    charge_verified: bool | None = None
    instrument_status: dict | None = None
    error: dict | None = None

    def to_wire(self) -> dict:
        return {
            "job_id": self.job_id, "gsp_subject": self.gsp_subject, "strategy": self.strategy,
            "steps": list(self.steps), "allocation_id": self.allocation_id,
            "local_account": self.local_account, "instrument_id": self.instrument_id,
            "charge": self.charge.body() if self.charge else None,
            "charge_verified": self.charge_verified, "instrument_status": self.instrument_status,
            "error": self.error,
        }


class PaymentModule:
    def __init__(self, identity: Identity, bank: Callable, account_id: str, network, budget: Money,
                 link_value: Money | None = None, quantum_cpu_hours: Decimal = DEFAULT_QUANTUM_CPU_HOURS,
                 ttl_seconds: int = DEFAULT_TTL_SECONDS, host: str = ""):
        self.identity = identity
        self._bank_factory = bank
        self._bank = None
        self.account_id = account_id
        self.network = network
        self.budget = Budget(budget)
        self.link_value = link_value or Money.of("0.5", budget.currency)
        self.quantum = dec(quantum_cpu_hours)
        self.ttl_seconds = ttl_seconds
        self.host = host
        self.outstanding: dict[str, _Outstanding] = {}
        self._chains: dict[str, list[bytes]] = {}
        self._lock = threading.RLock()

    @property
    def bank(self):
        if self._bank is None:
            self._bank = self._bank_factory()
        return self._bank

    def close(self) -> None:
        if self._bank is not None:
            self._bank.close()
            self._bank = None

    def set_budget(self, amount: Money) -> dict:
        self.budget.set_total(amount)
        return self.budget.to_wire()

    # -- instruments ----------------------------------------------------------

    def request_instrument(self, strategy: Strategy, gsp_subject: str, amount: Money,
                           link_value: Money | None = None):
        strategy = Strategy(strategy)
        if strategy is Strategy.PAY_BEFORE_USE:
            return None  # paid by direct transfer at submission
        if strategy is Strategy.PAY_AS_YOU_GO:
            link = link_value or self.link_value
            n_links = amount.amount_milli // link.amount_milli
            if n_links < 1:
                raise BadParameters(f"{amount} does not cover one link of {link}")
            amount = link * n_links
        with self._lock:
            self.budget.reserve(amount)
            try:
                if strategy is Strategy.PAY_AFTER_USE:
                    inst = self.bank.request_cheque(self.account_id, gsp_subject, amount, self.ttl_seconds)
                else:
                    inst, chain = self.bank.request_hash_chain(self.account_id, gsp_subject, n_links, link,
                                                               self.ttl_seconds)
                    self._chains[inst.chain_id] = chain
            except BaseException:
                self.budget.release(amount)
                raise
            self.outstanding[inst.instrument_id] = _Outstanding(inst.instrument_id, amount,
                                                                Money.zero(amount.currency))
            return inst

    def pay_direct(self, recipient_account: str, amount: Money, confirmation_endpoint: str) -> dict:
        with self._lock:
            self.budget.reserve(amount)
            try:
                conf = self.bank.direct_transfer(self.account_id, recipient_account, amount,
                                                 confirmation_endpoint)
            except UnreachableEndpoint as exc:
                conf = exc.details.get("confirmation")
                if conf is None:
                    self.budget.release(amount)
                    raise
            except BaseException:
                self.budget.release(amount)
                raise
            self.budget.spend(amount, amount)
            return conf

    def reconcile(self) -> dict:
        """Pull instrument states from the bank and settle the budget book."""
        with self._lock:
            for iid, out in list(self.outstanding.items()):
                status = self.bank.instrument_status(iid)
                paid = Money.from_wire(status["paid"])
                delta = paid - out.paid
                self.budget.spend(delta, delta)
                out.paid = paid
                if status["state"] != "Unredeemed" and status["state"] != "Active":
                    self.budget.release(out.reserved - out.paid)
                    del self.outstanding[iid]
                    self._chains.pop(iid, None)
            return self.budget.to_wire()

    # -- job flow ---------------------------------------------------------------

    def _provider(self, endpoint: str) -> SignedClient:
        return SignedClient(self.identity, self.network.connect(endpoint))

    def gb_job_submit(self, job: JobSpec, running: Callable[[RawUsage], None] | None = None) -> JobReport:
        """Run ``job`` through the provider; errors are recorded, never half-applied."""
        report = JobReport(job.job_id, job.gsp_subject, job.strategy.value)
        try:
            gsp = self._provider(job.gsp_endpoint)
        except GridBankError as err:
            report.error = err.to_wire()
            return report
        try:
            self._run(job, gsp, report, running)
        except GridBankError as err:
            report.error = err.to_wire()
        finally:
            gsp.close()
        if report.instrument_id and report.instrument_id in self.outstanding:
            try:
                report.instrument_status = self.bank.instrument_status(report.instrument_id)
            except GridBankError:
                pass
        return report

    def _run(self, job: JobSpec, gsp: SignedClient, report: JobReport, running) -> None:
        quote = gsp.call("negotiate_rates", requirements=job.requirements or {})
        if quote.get("refused"):
            raise BadParameters(f"{job.gsp_subject} refused: {quote.get('reason')}")
        rates = ChargeableRates.from_wire(quote["rates"])
        report.steps.append("negotiate_rates")

        if job.strategy is Strategy.PAY_BEFORE_USE:
            if rates.fixed_price is None:
                raise BadParameters("provider posts no fixed price for pay-before-use")
            conf = self.pay_direct(quote["payee_account_id"], rates.fixed_price, job.gsp_endpoint)
            kind, wire = "direct", conf
            report.instrument_id = f"TXN-{conf['body']['transaction_id']}"
        else:
            inst = self.request_instrument(job.strategy, job.gsp_subject, job.budget, job.link_value)
            kind = "cheque" if isinstance(inst, GridCheque) else "chain"
            wire = inst.to_wire()
            report.instrument_id = inst.instrument_id
        report.steps.append("request_instrument")

        alloc = gsp.call("authorize_access", kind=kind, instrument=wire, rates=rates.to_wire(),
                         job={"job_id": job.job_id, "application_name": job.application_name,
                              "host": self.host})
        report.allocation_id, report.local_account = alloc["allocation_id"], alloc["local_account"]
        report.steps.append("authorize_access")

        # the grid agent echoes the declared usage for the provider's cross-check
        gsp.call("submit_job", allocation_id=report.allocation_id,
                 declared_usage=job.declared_usage.to_wire(), agent_usage=job.declared_usage.to_wire())
        report.steps.append("submit_job")
        if running is not None:
            running(job.declared_usage)
        if kind == "chain":
            self._stream_paywords(gsp, report.allocation_id, inst, job.declared_usage)
            report.steps.append("stream_paywords")

        charge = SignedCharge.from_wire(gsp.call("complete_job", allocation_id=report.allocation_id)["charge"])
        report.charge = charge
        rur = ResourceUsageRecord.from_bytes(charge.rur)
        report.charge_verified = (charge.rates.body() == rates.body()
                                  and compute_charge(rur, rates).total == charge.breakdown.total)
        report.steps.append("receive_charge")

    def _stream_paywords(self, gsp: SignedClient, allocation_id: str, commitment: HashChainCommitment,
                         usage: RawUsage) -> int:
        quanta = int((cpu_hours(usage) / self.quantum).to_integral_value(ROUND_CEILING))
        chain = self._chains[commitment.chain_id]
        sent = min(quanta, commitment.length)
        for i in range(1, sent + 1):
            gsp.call("payword", allocation_id=allocation_id,
                     payword=PayWord(commitment.chain_id, i, chain[i]).to_wire())
        return sent

    # -- account operations ---------------------------------------------------------

    def account_passthrough(self, op: str, **params):
        return self.bank.call(op, **params)
