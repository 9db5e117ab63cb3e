"""Scenario runner: one bank, some providers and consumers, a virtual clock.

Scenarios are JSON files (see ``gridbank/scenarios``)::

    {"name": ..., "seed": 1, "start": "2026-03-01T09:00:00Z",
     "participants": [{"subject": ..., "deposit": "100"}],
     "providers":    [{"subject": ..., "rates": {...}, "pool_size": 4, "speed": 1, ...}],
     "consumers":    [{"subject": ..., "budget": "100", "link_value": "0.5"}],
     "jobs":         [{"job_id": ..., "consumer": ..., "provider": ..., "strategy": ...,
                       "budget": "60", "work_hours": "2"  |  "usage": {...}}],
     "estimates":    [{"description": {...}, "k": 5}],
     "redeem_every": 0, "close_out": true}

A job either gives explicit ``usage`` (``wall_hours`` plus raw usage
fields) or ``work_hours`` of CPU on a speed-1 machine, which a provider of
speed ``s`` completes in ``work_hours / s`` hours. ``jitter`` perturbs CPU
time by up to that fraction, drawn from the scenario seed.

Providers redeem their queued claims every ``redeem_every`` jobs (0: only
at the end). With ``close_out`` the clock then moves past every instrument
expiry so unspent locks return to their drawers before the report.

The report is computed from the ledger after every queue has drained and is
rendered as canonical text, so the same scenario and seed always give the
same bytes.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from datetime import timedelta
from decimal import Decimal
from importlib import resources
from pathlib import Path

from .bank import Bank, BankClient
from .clock import ManualClock
from .consumer import JobSpec, PaymentModule, Strategy
from .errors import ConfigError, GridBankError
from .money import Money
from .pricing import ResourceDescription
from .provider import ProviderConfig, ProviderNode
from .rur import RawUsage, ResourceUsageRecord, compute_charge, dec
from .security import KeyRegistry, canonical_encode, generate_identity
from .wire import LocalNetwork

BANK_ENDPOINT = "bank.grid:5000"
BANK_SUBJECT = "CN=GridBank,O=Grid"
ADMIN_SUBJECT = "CN=GridBank Operator,O=Grid"
BUNDLED = ("fig1_single_job", "fig4_coop4", "competitive_estimate")
JOB_FLOW_STEPS = ("negotiate_rates", "request_instrument", "authorize_access", "submit_job",
                 "receive_charge", "redeem")


@dataclass
class Participant:
    subject: str
    identity: object
    account_id: str
    initial: Money


class Grid:
    """An in-process grid on a loopback network that still frames every message."""

    def __init__(self, seed: int = 0, start: str = "2026-03-01T09:00:00Z"):
        self.rng = random.Random(seed)
        self.clock = ManualClock(start)
        self.network = LocalNetwork()
        self.registry = KeyRegistry()
        self.admin = self.identity(ADMIN_SUBJECT)
        self.bank = Bank(self.identity(BANK_SUBJECT), self.registry, {ADMIN_SUBJECT}, self.clock,
                         endpoint=BANK_ENDPOINT, network=self.network, entropy=self.rng.randbytes)
        self.network.register(BANK_ENDPOINT, self.bank.session)
        self.admin_client = self.bank_client(self.admin)
        self.participants: dict[str, Participant] = {}
        self.providers: dict[str, ProviderNode] = {}
        self.consumers: dict[str, PaymentModule] = {}
        self.endpoints: dict[str, str] = {}

    def identity(self, subject: str):
        # keys come from the seed so that signatures, and thus reports, repeat exactly
        return generate_identity(subject, self.registry, seed=self.rng.randbytes(32))

    def bank_client(self, identity) -> BankClient:
        return BankClient.connect(self.network, BANK_ENDPOINT, identity)

    def add_participant(self, subject: str, deposit="0") -> Participant:
        if subject in self.participants:
            raise ConfigError(f"participant {subject!r} defined twice")
        ident = self.identity(subject)
        acct = self.admin_client.call("create_account", certificate_name=subject)["account_id"]
        amount = Money.of(deposit)
        if amount.is_positive():
            self.admin_client.call("deposit", account_id=acct, amount=amount.to_wire())
        p = Participant(subject, ident, acct, amount)
        self.participants[subject] = p
        return p

    def _participant(self, subject: str) -> Participant:
        try:
            return self.participants[subject]
        except KeyError:
            raise ConfigError(f"undefined participant {subject!r}") from None

    def add_provider(self, spec: dict) -> ProviderNode:
        p = self._participant(spec["subject"])
        endpoint = spec.get("endpoint") or f"gsp{len(self.providers) + 1}.grid:7000"
        cfg = ProviderConfig.from_dict({**spec, "bank_endpoint": BANK_ENDPOINT, "listen": endpoint})
        node = ProviderNode(cfg, p.identity, self.registry, BANK_SUBJECT, self.clock,
                            bank_client=lambda: self.bank_client(p.identity), own_account_id=p.account_id)
        node.speed = dec(spec.get("speed", 1))
        self.network.register(endpoint, node.session)
        self.providers[p.subject] = node
        self.endpoints[p.subject] = endpoint
        return node

    def add_consumer(self, spec: dict) -> PaymentModule:
        p = self._participant(spec["subject"])
        link = Money.of(spec["link_value"]) if spec.get("link_value") else None
        module = PaymentModule(p.identity, lambda: self.bank_client(p.identity), p.account_id, self.network,
                               Money.of(spec.get("budget", "0")), link_value=link,
                               quantum_cpu_hours=dec(spec.get("quantum_cpu_hours", "0.1")),
                               host=spec.get("host", ""))
        self.consumers[p.subject] = module
        return module

    def declared_usage(self, job: dict) -> RawUsage:
        start = self.clock.now()
        if "usage" in job:
            u = dict(job["usage"])
            hours = dec(u.pop("wall_hours", "0"))
            end = start + timedelta(seconds=int(hours * 3600))
            return RawUsage(job["job_id"], start, end, **{k: dec(v) for k, v in u.items()})
        speed = self.providers[job["provider"]].speed
        hours = dec(job["work_hours"]) / speed
        cpu = hours * 3600
        jitter = dec(job.get("jitter", "0"))
        if jitter:
            cpu *= 1 + jitter * Decimal(self.rng.randint(-1000, 1000)) / 1000
        end = start + timedelta(seconds=int(hours * 3600))
        extra = {k: dec(job[k]) for k in ("memory_mb_hours", "storage_mb_hours", "network_mb_total") if k in job}
        return RawUsage(job["job_id"], start, end, user_cpu_seconds=cpu.quantize(Decimal(1)), **extra)

    def run_job(self, job: dict) -> dict:
        consumer = self.consumers.get(job["consumer"])
        if consumer is None or job["provider"] not in self.providers:
            raise ConfigError(f"job {job.get('job_id')!r} names an undefined consumer or provider")
        cur = consumer.budget.total.currency
        usage = self.declared_usage(job)
        spec = JobSpec(job["job_id"], job.get("application_name", ""), self.endpoints[job["provider"]],
                       job["provider"], Strategy(job.get("strategy", "PayAfterUse")), usage,
                       Money.of(job.get("budget", "60"), cur),
                       Money.of(job["link_value"], cur) if job.get("link_value") else None)
        report = consumer.gb_job_submit(spec, running=lambda u: self.clock.set(u.wall_end))
        return report.to_wire()

    def drain(self, rounds: int = 3) -> list[dict]:
        results = []
        for _ in range(rounds):
            pending = False
            for subject, node in sorted(self.providers.items()):
                try:
                    res = node.gbcm.redeem_batch()
                except GridBankError as err:
                    res = None
                    results.append({"provider": subject, "error": err.to_wire()})
                if res is not None and res.sent:
                    results.append({"provider": subject, **res.to_wire()})
                pending |= bool(node.gbcm.queue)
            if not pending:
                break
        for module in self.consumers.values():
            module.reconcile()
        return results


    def close_out(self) -> None:
        """Let every live instrument expire so unspent locks return to their drawers."""
        horizon = max((m.ttl_seconds for m in self.consumers.values()), default=0)
        self.clock.advance(horizon + 1)
        self.admin_client.call("sweep_expired")
        for module in self.consumers.values():
            module.reconcile()


def _ledger_flows(bank: Bank) -> tuple[dict[str, int], dict[str, int]]:
    consumed: dict[str, int] = {}
    provided: dict[str, int] = {}
    for t in bank.ledger.transfers():
        consumed[t.drawer_account_id] = consumed.get(t.drawer_account_id, 0) + t.amount.amount_milli
        provided[t.recipient_account_id] = provided.get(t.recipient_account_id, 0) + t.amount.amount_milli
    return consumed, provided


def _milli_text(milli: int) -> str:
    return Money(milli).text()


def build_report(grid: Grid, name: str, seed: int, jobs: list[dict], redemptions: list[dict],
                 estimates: list[dict]) -> dict:
    ledger = grid.bank.ledger
    consumed, provided = _ledger_flows(grid.bank)
    accounts = {}
    imbalance = 0
    for subject, p in sorted(grid.participants.items()):
        acct = ledger.account_record(p.account_id)
        c, pr = consumed.get(p.account_id, 0), provided.get(p.account_id, 0)
        imbalance = max(imbalance, abs(pr - c))
        accounts[subject] = {"account_id": p.account_id, "initial": p.initial.text(),
                             "available": acct.available_balance.text(), "locked": acct.locked_balance.text(),
                             "consumed": _milli_text(c), "provided": _milli_text(pr)}
    initial = sum(p.initial.amount_milli for p in grid.participants.values())
    final = ledger.holdings().amount_milli
    for job in jobs:
        _attach_settlement(grid, job, redemptions)
        job["steps_completed"] = len(job["steps"])
    return {
        "scenario": name,
        "seed": seed,
        "accounts": accounts,
        "conservation": {"initial_total": _milli_text(initial), "final_total": _milli_text(final),
                         "holds": initial == final},
        "jobs": jobs,
        "redemptions": redemptions,
        "imbalance": _milli_text(imbalance),
        "rur_backing": _rur_backing(grid, redemptions),
        "estimates": estimates,
    }


def _attach_settlement(grid: Grid, job: dict, redemptions: list[dict]) -> None:
    ledger = grid.bank.ledger
    job["transfers"] = []
    for batch in redemptions:
        for r in batch.get("redeemed", []):
            if r["allocation_id"] == job["allocation_id"] and batch["provider"] == job["gsp_subject"]:
                t = ledger.get_transfer(r["transaction_id"])
                rur = ResourceUsageRecord.from_bytes(t.resource_usage_record)
                job["transfers"].append({
                    "transaction_id": t.transaction_id, "amount": t.amount.text(),
                    "rur_present": bool(t.resource_usage_record),
                    "recomputed_charge": compute_charge(rur).total.text(),
                })
        for f in batch.get("failed", []):
            if f["allocation_id"] == job["allocation_id"] and batch["provider"] == job["gsp_subject"]:
                job.setdefault("redemption_errors", []).append(f["error"])
    if job["transfers"] and "redeem" not in job["steps"]:
        job["steps"].append("redeem")
    elif job["strategy"] == Strategy.PAY_BEFORE_USE.value and job.get("charge") and not job.get("error"):
        job["steps"].append("redeem")  # settled up front by direct transfer


def _rur_backing(grid: Grid, redemptions: list[dict]) -> dict:
    """Every instrument payment into a provider carries an RUR that prices it.

    Cheques pay at most the recomputed charge. Hash chains settle in whole
    links, so they may collect less than one link above it.
    """
    ledger = grid.bank.ledger
    links = {}
    for node in grid.providers.values():
        for alloc in node.gbcm.allocations.values():
            if alloc.kind == "chain":
                links[alloc.instrument_id] = alloc.instrument.link_value
    slack = {}
    for batch in redemptions:
        for r in batch.get("redeemed", []):
            slack[r["transaction_id"]] = links.get(r["instrument_id"])
    provider_accounts = {grid.participants[s].account_id for s in grid.providers}
    checked = violations = 0
    for t in ledger.transfers():
        if t.recipient_account_id not in provider_accounts or ledger.is_cancelled(t.transaction_id):
            continue
        if not t.resource_usage_record:
            continue  # fixed-price direct transfer, backed by the bank's signed confirmation
        checked += 1
        charge = compute_charge(ResourceUsageRecord.from_bytes(t.resource_usage_record)).total
        link = slack.get(t.transaction_id)
        ok = t.amount <= charge or (link is not None and t.amount - charge < link)
        violations += not ok
    return {"checked": checked, "violations": violations, "holds": violations == 0}


def run_scenario(scenario: dict | str | Path, seed: int | None = None) -> dict:
    """Run a scenario (dict, file path or bundled name) and return its report."""
    return play_scenario(scenario, seed)[1]


def play_scenario(scenario: dict | str | Path, seed: int | None = None) -> tuple[Grid, dict]:
    """Like :func:`run_scenario` but also hands back the finished grid."""
    data = load_scenario(scenario)
    seed = int(data.get("seed", 0) if seed is None else seed)
    grid = Grid(seed, data.get("start", "2026-03-01T09:00:00Z"))
    for p in data.get("participants", []):
        grid.add_participant(p["subject"], p.get("deposit", "0"))
    for spec in data.get("providers", []):
        grid.add_provider(spec)
    for spec in data.get("consumers", []):
        grid.add_consumer(spec)
    jobs, redemptions = [], []
    every = int(data.get("redeem_every", 0))
    for n, job in enumerate(data.get("jobs", []), 1):
        try:
            jobs.append(grid.run_job(job))
        except ConfigError:
            raise
        except GridBankError as err:
            jobs.append({"job_id": job.get("job_id"), "gsp_subject": job.get("provider"), "steps": [],
                         "allocation_id": None, "strategy": job.get("strategy"), "error": err.to_wire()})
        if every and n % every == 0:
            redemptions += grid.drain()
    redemptions += grid.drain()
    if data.get("close_out", True):
        grid.close_out()
    estimates = []
    for q in data.get("estimates", []):
        try:
            est = grid.admin_client.call("estimate_price", description=ResourceDescription.from_wire(
                q["description"]).to_wire(), k=int(q.get("k", 5)))
            estimates.append({"description": q["description"], "k": int(q.get("k", 5)), **est})
        except GridBankError as err:
            estimates.append({"description": q["description"], "error": err.to_wire()})
    return grid, build_report(grid, data.get("name", "scenario"), seed, jobs, redemptions, estimates)


def load_scenario(scenario: dict | str | Path) -> dict:
    if isinstance(scenario, dict):
        return scenario
    text = str(scenario)
    if text in BUNDLED:
        raw = resources.files("gridbank").joinpath("scenarios", f"{text}.json").read_text(encoding="utf-8")
    else:
        try:
            raw = Path(text).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read scenario {text}: {exc}") from None
    try:
        return json.loads(raw)
    except ValueError as exc:
        raise ConfigError(f"scenario {text} is not valid JSON: {exc}") from None


def render_report(report: dict) -> bytes:
    return canonical_encode(report) + b"\n"


def report_coop_balance(report: dict) -> Money:
    """Largest gap between value provided and value consumed by any participant."""
    gaps = [abs(Money.of(a["provided"]).amount_milli - Money.of(a["consumed"]).amount_milli)
            for a in report["accounts"].values()]
    return Money(max(gaps, default=0))
