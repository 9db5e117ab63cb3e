"""Acceptance gate: one marked group of tests per numbered criterion.

Every check is exact (integer milli-units, byte equality or digest equality)
and compares the package against the independent helpers in ``oracles``.
"""

from __future__ import annotations

import json
import random
import shutil
import signal
import subprocess
import sys
import threading
from dataclasses import replace
from datetime import timedelta
from decimal import Decimal
from fractions import Fraction

import pytest

from gridbank import errors
from gridbank.bank import OPS, Bank, BankClient
from gridbank.clock import ManualClock, parse_ts
from gridbank.harness import JOB_FLOW_STEPS, load_scenario, play_scenario, report_coop_balance
from gridbank.instruments import GridCheque, HashChainCommitment, InstrumentBook, PayWord, Verdict
from gridbank.journal import Journal
from gridbank.ledger import Ledger
from gridbank.money import Money
from gridbank.pricing import PriceSample, ResourceDescription, estimate_price
from gridbank.provider import parse_mapfile, template_account_names
from gridbank.rur import (
    ChargeableRates,
    RawUsage,
    ResourceUsageRecord,
    aggregate_rurs,
    compute_charge,
    convert_raw_usage,
    dec_str,
)
from gridbank.security import KeyRegistry, canonical_decode, canonical_encode, generate_identity
from gridbank.wire import LocalNetwork, decode_frame, encode_frame, request_message

from conftest import ALICE, GSP_A
from oracles import charge_oracle, half_up_milli, knn_oracle, sha256_iter

G = Money.of
T0 = parse_ts("2026-03-01T10:00:00Z")
acceptance = pytest.mark.acceptance


# -- shared fixtures ------------------------------------------------------------------

class Economy:
    """Ledger plus instrument book with ``n`` funded accounts, driven directly."""

    def __init__(self, seed: int, n: int = 10, deposit: str = "1000", credit_limit: str | None = None):
        self.rng = random.Random(seed)
        self.clock = ManualClock("2026-03-01T12:00:00Z")
        self.ledger = Ledger(clock=self.clock)
        self.book = InstrumentBook(self.ledger, generate_identity("CN=GridBank", seed=b"b" * 32),
                                   endpoint="bank.grid:5000", entropy=self.rng.randbytes)
        self.subjects = [f"CN=P{i:02d}" for i in range(n)]
        self.accounts = [self.ledger.create_account(s) for s in self.subjects]
        for acct in self.accounts:
            self.ledger.deposit(acct, G(deposit), admin=True)
            if credit_limit is not None:
                self.ledger.set_credit_limit(acct, G(credit_limit), admin=True)
        self.cheques: list[GridCheque] = []
        self.chains: list[tuple[HashChainCommitment, list[bytes]]] = []
        self.transfers: list[int] = []
        self.plain_locks: list[int] = []

    def holdings_milli(self) -> int:
        return sum(a.available_balance.amount_milli + a.locked_balance.amount_milli
                   for a in self.ledger.accounts())

    def amount(self, hi_milli: int) -> Money:
        return Money(self.rng.randint(1, hi_milli))

    def pick(self) -> tuple[int, int]:
        a, b = self.rng.sample(range(len(self.accounts)), 2)
        return a, b

    def step(self, adversarial: bool = False) -> None:
        """One random operation; refused operations must leave no trace."""
        rng = self.rng
        op = rng.choice(["transfer", "cheque", "redeem_cheque", "chain", "redeem_chain", "lock",
                         "advance", "cancel", "direct"])
        drawer, payee = self.pick()
        # adversarial runs mix plausible amounts with ones far beyond any balance
        big = 3_000_000 if adversarial and rng.random() < 0.4 else 200_000
        try:
            if op == "transfer":
                self.transfers.append(self.ledger.transfer(self.accounts[drawer], self.accounts[payee],
                                                           self.amount(big)))
            elif op == "direct":
                conf = self.book.direct_transfer_payment(self.accounts[drawer], self.accounts[payee],
                                                         self.amount(big), None)
                self.transfers.append(conf["body"]["transaction_id"])
            elif op == "cheque":
                self.cheques.append(self.book.issue_cheque(self.accounts[drawer], self.subjects[payee],
                                                           self.amount(big), ttl=rng.randint(60, 7200)))
            elif op == "redeem_cheque" and self.cheques:
                c = rng.choice(self.cheques[-8:])
                limit = c.amount_limit.amount_milli
                claim = Money(rng.randint(1, limit * 2 if adversarial else limit))
                presenter = c.payee_subject
                if adversarial and rng.random() < 0.2:
                    presenter = rng.choice(self.subjects)
                if adversarial and rng.random() < 0.2:
                    c = replace(c, amount_limit=c.amount_limit * 10)
                self.book.redeem_cheque(c, claim, b"rur", presenter)
            elif op == "chain":
                link = Money(rng.randint(1, 5000))
                n = rng.randint(1, 80 if adversarial else 40)
                self.chains.append(self.book.issue_hash_chain(self.accounts[drawer], self.subjects[payee], n,
                                                              link, ttl=rng.randint(60, 7200)))
            elif op == "redeem_chain" and self.chains:
                c, chain = rng.choice(self.chains[-8:])
                idx = rng.randint(1, c.length + (3 if adversarial else 0))
                word = chain[idx] if idx <= c.length else rng.randbytes(32)
                if adversarial and rng.random() < 0.2:
                    c = replace(c, length=c.length * 2)
                self.book.redeem_hash_chain(c, PayWord(c.chain_id, idx, word), b"rur", c.payee_subject)
            elif op == "lock":
                lock = self.ledger.lock_funds(self.accounts[drawer], self.amount(big), "check:test")
                if rng.random() < 0.7:
                    self.ledger.release_lock(lock)
                else:
                    self.plain_locks.append(lock)
            elif op == "advance":
                self.clock.advance(rng.randint(1, 1800))
                self.book.sweep_expired()
            elif op == "cancel" and self.transfers:
                self.ledger.cancel_transfer(rng.choice(self.transfers), admin=True)
        except errors.GridBankError:
            pass


# -- 1. conservation ------------------------------------------------------------------

@acceptance(1)
@pytest.mark.parametrize("seed", range(20))
def test_conservation_random_workload(seed):
    eco = Economy(seed)
    initial = 10 * 1000 * 1000
    assert eco.holdings_milli() == initial
    for _ in range(1000):
        eco.step()
        assert eco.holdings_milli() == initial
    eco.clock.advance(10 * 86400)
    eco.book.sweep_expired()
    for lock in eco.plain_locks:
        eco.ledger.release_lock(lock)
    assert eco.holdings_milli() == initial
    assert all(a.locked_balance.amount_milli == 0 for a in eco.ledger.accounts())
    # the workload did exercise every instrument path
    assert eco.cheques and eco.chains and eco.ledger.transfers()


# -- 2. no overspend --------------------------------------------------------------------

@acceptance(2)
@pytest.mark.parametrize("credit_limit", ["0", "250"])
@pytest.mark.parametrize("seed", range(10))
def test_no_overspend(seed, credit_limit):
    eco = Economy(1000 + seed, deposit="500", credit_limit=credit_limit)
    floor = -G(credit_limit).amount_milli
    for _ in range(1000):
        eco.step(adversarial=True)
        for a in eco.ledger.accounts():
            assert a.available_balance.amount_milli >= floor, a
            assert a.locked_balance.amount_milli >= 0, a
    # every lock is backed by exactly what its instruments can still pay
    for a in eco.ledger.accounts():
        assert a.locked_balance.amount_milli == sum(
            lock.remaining.amount_milli for lock in eco.ledger.locks(a.account_id))


# -- 3. cheque lifecycle ------------------------------------------------------------------

@acceptance(3)
def test_cheque_lifecycle(ledger, book):
    drawer = ledger.create_account(ALICE)
    ledger.deposit(drawer, G(100), admin=True)
    payee = ledger.create_account(GSP_A)
    cheque = book.issue_cheque(drawer, GSP_A, G(60), ttl=3600)
    d = ledger.get_account(drawer)
    assert (d.available_balance.amount_milli, d.locked_balance.amount_milli) == (40_000, 60_000)

    with pytest.raises(errors.WrongPayee):
        book.redeem_cheque(cheque, G(45), b"rur", "CN=Mallory")
    assert ledger.get_account(drawer).locked_balance == G(60)

    book.redeem_cheque(cheque, G(45), b"rur", GSP_A)
    assert ledger.get_account(payee).available_balance.amount_milli == 45_000
    d = ledger.get_account(drawer)
    assert d.available_balance.amount_milli == 40_000 + 15_000
    assert d.locked_balance.amount_milli == 0
    with pytest.raises(errors.AlreadyRedeemed):
        book.redeem_cheque(cheque, G(1), b"rur", GSP_A)
    assert ledger.get_account(payee).available_balance.amount_milli == 45_000


# -- 4. hash chains ---------------------------------------------------------------------------

@acceptance(4)
@pytest.mark.parametrize("n", [1, 10, 64])
def test_hash_chain(ledger, book, clock, n):
    drawer = ledger.create_account(ALICE)
    ledger.deposit(drawer, G(100), admin=True)
    payee = ledger.create_account(GSP_A)
    v = G("0.25")
    c, chain = book.issue_hash_chain(drawer, GSP_A, n, v, ttl=3600)
    # (a) w_0 is reached by hashing w_i exactly i times
    assert c.root == chain[0]
    for i in range(n + 1):
        assert sha256_iter(chain[i], i) == chain[0]

    # (b) indices 3 then 7 pay 3v then 4v; a one-link chain pays its only link
    path = [3, 7] if n >= 7 else [1]
    paid_before, prev = 0, 0
    for idx in path:
        book.redeem_hash_chain(c, PayWord(c.chain_id, idx, chain[idx]), b"rur", GSP_A)
        got = ledger.get_account(payee).available_balance.amount_milli
        assert got - paid_before == (idx - prev) * v.amount_milli
        paid_before, prev = got, idx

    # (c) a replayed index pays nothing
    with pytest.raises(errors.GridBankError):
        book.redeem_hash_chain(c, PayWord(c.chain_id, prev, chain[prev]), b"rur", GSP_A)
    assert ledger.get_account(payee).available_balance.amount_milli == paid_before

    # (d) expiry hands the unspent (N - last) links back to the drawer
    before = ledger.get_account(drawer).available_balance.amount_milli
    clock.advance(3600)
    book.sweep_expired()
    d = ledger.get_account(drawer)
    assert d.available_balance.amount_milli - before == (n - prev) * v.amount_milli
    assert d.locked_balance.amount_milli == 0


@acceptance(4)
def test_hash_chain_unspent_expiry_returns_everything(ledger, book, clock):
    drawer = ledger.create_account(ALICE)
    ledger.deposit(drawer, G(10), admin=True)
    ledger.create_account(GSP_A)
    book.issue_hash_chain(drawer, GSP_A, 1, G("0.5"), ttl=60)
    clock.advance(60)
    book.sweep_expired()
    assert ledger.get_account(drawer).available_balance.amount_milli == 10_000


# -- 5. charge computation ---------------------------------------------------------------------

ITEMS = ["wall_clock", "cpu", "memory", "storage", "network", "software"]
WIRE_NAMES = {"wall_clock": "WallClockTime", "cpu": "CPUTime", "memory": "MainMemory",
              "storage": "SecondaryStorage", "network": "NetworkActivity", "software": "SoftwareService"}
USER = {"host": "gsc.example.org", "certificate_name": ALICE}
RESOURCE = {"host": "node1.gsp.org", "certificate_name": GSP_A}


def _rates(items: dict) -> ChargeableRates:
    return ChargeableRates({k: Decimal(v) for k, v in items.items()}, gsp_subject=GSP_A)


@acceptance(5)
def test_charge_matches_decimal_oracle():
    rng = random.Random(5)
    for _ in range(100):
        items = rng.sample(ITEMS, rng.randint(1, 6))
        r = _rates({k: str(Decimal(rng.randint(0, 10**7)) / Decimal(10**rng.randint(0, 7))) for k in items})
        start = T0 + timedelta(seconds=rng.randint(0, 10**6))
        usage = RawUsage("pid", start, start + timedelta(seconds=rng.randint(0, 10**6)),
                         user_cpu_seconds=Decimal(rng.randint(0, 10**8)) / 100,
                         sys_cpu_seconds=Decimal(rng.randint(0, 10**6)) / 10,
                         memory_mb_hours=Decimal(rng.randint(0, 10**9)) / 10**rng.randint(0, 4),
                         storage_mb_hours=Decimal(rng.randint(0, 10**9)) / 100,
                         network_mb_total=Decimal(rng.randint(0, 10**8)) / 10**rng.randint(0, 4))
        rur = convert_raw_usage(usage, USER, {"job_id": "j"}, RESOURCE, r)
        # the oracle sees only what travels in the serialized record
        wire = ResourceUsageRecord.from_bytes(rur.to_bytes()).to_wire()["ResourceDetails"]
        quantities = {k: wire[WIRE_NAMES[k]]["Usage"] for k in items}
        prices = {k: dec_str(v) for k, v in r.items.items()}
        assert compute_charge(rur, r).total.amount_milli == charge_oracle(quantities, prices)


@acceptance(5)
def test_worked_example_totals_9_224():
    r = _rates({"cpu": "3.6", "memory": "0.002", "network": "0.01"})
    usage = RawUsage("pid", T0, T0 + timedelta(hours=2), user_cpu_seconds=7200, memory_mb_hours=512,
                     network_mb_total=100)
    bd = compute_charge(convert_raw_usage(usage, USER, {"job_id": "j"}, RESOURCE, r), r)
    assert bd.total.amount_milli == 9224
    assert charge_oracle({"cpu": "2.0", "memory": "512", "network": "100"},
                         {"cpu": "3.6", "memory": "0.002", "network": "0.01"}) == 9224


# -- 6. aggregation ------------------------------------------------------------------------------

@acceptance(6)
def test_sum_then_charge_equals_charge_then_sum():
    rng = random.Random(6)
    for case in range(50):
        items = rng.sample(ITEMS, rng.randint(1, 6))
        if case % 2:
            r = _rates({k: str(rng.randint(0, 50)) for k in items})  # whole G$ rates
        else:
            r = _rates({k: str(Decimal(rng.randint(0, 50_000)) / 1000) for k in items})
        parts, t = [], T0
        for p in range(rng.randint(2, 6)):
            # quantities land on exact milli-units, or on whole units for milli rates
            if case % 2:
                wall, cpu, sys_s = 18 * rng.randint(0, 2000), Decimal("3.6") * rng.randint(0, 10**5), \
                    Decimal("3.6") * rng.randint(0, 10**4)
                mem, sto, net = (Decimal(rng.randint(0, 10**7)) / 1000 for _ in range(3))
            else:
                wall, cpu, sys_s = 3600 * rng.randint(0, 48), Decimal(3600 * rng.randint(0, 100)), \
                    Decimal(3600 * rng.randint(0, 10))
                mem, sto, net = (Decimal(rng.randint(0, 10**5)) for _ in range(3))
            raw = RawUsage(f"pid-{p}", t, t + timedelta(seconds=wall), user_cpu_seconds=cpu,
                           sys_cpu_seconds=sys_s, memory_mb_hours=mem, storage_mb_hours=sto,
                           network_mb_total=net)
            t += timedelta(seconds=wall)
            parts.append(convert_raw_usage(raw, USER, {"job_id": f"job-{case}"}, RESOURCE, r))
        separately = sum(compute_charge(p, r).total.amount_milli for p in parts)
        assert compute_charge(aggregate_rurs(parts), r).total.amount_milli == separately


# -- 7. template pool --------------------------------------------------------------------------

@acceptance(7)
def test_template_pool_concurrency_and_mapfile(grid, tmp_path):
    node = grid.providers[GSP_A]
    pool = node.pool
    mapfile = tmp_path / "grid-mapfile"
    alice = grid.participants[ALICE]
    client = grid.bank_client(alice.identity)
    rates = node.gts.negotiate_rates()
    cheques = [client.request_cheque(alice.account_id, GSP_A, G(10), 3600) for _ in range(5)]

    def checkpoint():
        assert parse_mapfile(mapfile.read_text(encoding="utf-8")) == pool.entries()

    checkpoint()
    results, barrier = [], threading.Barrier(5)

    def worker(c):
        barrier.wait()
        try:
            alloc = node.gbcm.authorize_access(ALICE, "cheque", c, rates, {"job_id": c.cheque_id})
            results.append(alloc)
        except errors.PoolExhausted as exc:
            results.append(exc)

    threads = [threading.Thread(target=worker, args=(c,)) for c in cheques]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    allocs = [r for r in results if not isinstance(r, Exception)]
    assert sum(isinstance(r, errors.PoolExhausted) for r in results) == 1
    assert sorted(a.local_account for a in allocs) == template_account_names(4)
    assert pool.free_set == frozenset()
    checkpoint()

    for alloc in allocs:
        t0 = grid.clock.now()
        usage = RawUsage("x", t0, t0 + timedelta(hours=1), user_cpu_seconds=3600)
        node.gbcm.settle_job(alloc.allocation_id, usage)
        checkpoint()
    assert parse_mapfile(mapfile.read_text(encoding="utf-8")) == []
    assert pool.free_set == frozenset(template_account_names(4))
    node.gbcm.redeem_batch()
    checkpoint()


# -- 8. single job end-to-end ----------------------------------------------------------------------

@acceptance(8)
def test_fig1_end_to_end():
    grid, report = play_scenario("fig1_single_job")
    (job,) = report["jobs"]
    assert job["steps"] == list(JOB_FLOW_STEPS) and len(JOB_FLOW_STEPS) == 6 and not job.get("error")
    alice = grid.participants["CN=Alice,O=Consumers"].account_id
    gsp = grid.participants["CN=GSP-A,O=Providers"].account_id
    (transfer,) = [t for t in grid.bank.ledger.transfers() if t.drawer_account_id == alice]
    assert transfer.recipient_account_id == gsp
    assert transfer.resource_usage_record
    rur = ResourceUsageRecord.from_bytes(transfer.resource_usage_record)
    assert rur.user_certificate_name == "CN=Alice,O=Consumers" and rur.job_id == "job-0001"
    assert compute_charge(rur).total == transfer.amount
    wire = rur.to_wire()["ResourceDetails"]
    usage = {k: wire[WIRE_NAMES[k]]["Usage"] for k in rur.usage}
    prices = {k: wire[WIRE_NAMES[k]]["Price"] for k in rur.usage}
    assert charge_oracle(usage, prices) == transfer.amount.amount_milli == 9224


# -- 9. co-operative balance -----------------------------------------------------------------------

@acceptance(9)
def test_fig4_coop_balances():
    scenario = load_scenario("fig4_coop4")
    providers = {p["subject"]: p for p in scenario["providers"]}
    fast = [p for p in providers.values() if Decimal(p["speed"]) == 2]
    standard = [p for p in providers.values() if Decimal(p["speed"]) == 1]
    assert len(fast) == 1 and len(standard) == 3
    assert all(Decimal(fast[0]["rates"]["cpu"]) == 2 * Decimal(s["rates"]["cpu"]) for s in standard)

    grid, report = play_scenario(scenario)
    assert report["imbalance"] == "0.000" and report_coop_balance(report) == Money(0)
    assert all(not j.get("error") and j["transfers"] for j in report["jobs"])
    initial = sum(G(a["initial"]).amount_milli for a in report["accounts"].values())
    assert grid.bank.ledger.holdings().amount_milli == initial
    assert report["conservation"]["holds"]
    # the fast member finished its jobs in half the time of the others
    hours = {}
    for t in grid.bank.ledger.transfers():
        rur = ResourceUsageRecord.from_bytes(t.resource_usage_record)
        hours.setdefault(rur.resource_certificate_name, set()).add(rur.usage["cpu"])
    assert hours[fast[0]["subject"]] == {Decimal(1)}
    assert all(hours[s["subject"]] == {Decimal(2)} for s in standard)


# -- 10. price estimator -------------------------------------------------------------------------

def _desc(speed, cpus=4):
    return ResourceDescription(cpus, Decimal(speed), 8192, 500, Decimal(100))


def _rate_text(x: Fraction) -> Decimal:
    return Decimal(half_up_milli(x)).scaleb(-3)


@acceptance(10)
def test_estimator_uniform_history():
    machine = ResourceDescription(4, Decimal("2.4"), 8192, 500, Decimal(1000))
    history = [PriceSample(_desc(s, c), Fraction("3.6")) for s, c in [("1.0", 2), ("2.4", 4), ("3.0", 8)]]
    assert estimate_price(history, machine).estimated_rate == Decimal("3.600")


@acceptance(10)
def test_estimator_two_clusters():
    history = [PriceSample(_desc(s), Fraction(r)) for s, r in
               [("1.0", 2), ("1.0", 2), ("0.5", 2), ("0.5", 2), ("3.0", 4), ("3.0", 4), ("3.5", 4), ("3.5", 4)]]
    assert estimate_price(history, _desc("2.0"), k=4).estimated_rate == Decimal("3.000")


@acceptance(10)
def test_estimator_matches_brute_force():
    rng = random.Random(10)
    for _ in range(50):
        samples, vectors, rates = [], [], []
        for _ in range(rng.randint(1, 40)):
            d = ResourceDescription(rng.randint(1, 64), Decimal(rng.randint(5, 40)) / 10,
                                    rng.choice([1024, 4096, 16384]), rng.randint(10, 2000),
                                    Decimal(rng.choice([10, 100, 1000])))
            rate = Fraction(rng.randint(1, 20000), 1000)
            samples.append(PriceSample(d, rate))
            vectors.append(d.to_vector())
            rates.append(rate)
        query = ResourceDescription(rng.randint(1, 64), Decimal(rng.randint(5, 40)) / 10, 4096,
                                    rng.randint(10, 2000), Decimal(100))
        k = rng.randint(1, 10)
        mean, chosen = knn_oracle(vectors, rates, query.to_vector(), k)
        est = estimate_price(samples, query, k)
        assert est.estimated_rate == _rate_text(mean) and est.sample_count == len(chosen)


# -- 11. security ----------------------------------------------------------------------------------

BANK_EP = "bank.grid:5000"


class Deployment:
    def __init__(self, clock, journal=None, bank_identity=None, registry=None, seed=7):
        self.registry = registry or KeyRegistry()
        self.admin = self._ident("CN=Admin", b"a")
        self.alice = self._ident(ALICE, b"c")
        self.bob = self._ident(GSP_A, b"p")
        self.network = LocalNetwork()
        self.bank = Bank(bank_identity or generate_identity("CN=GridBank", seed=b"k" * 32), self.registry,
                         {"CN=Admin"}, clock, journal=journal, endpoint=BANK_EP, network=self.network,
                         entropy=random.Random(seed).randbytes)
        self.network.register(BANK_EP, self.bank.session)

    def _ident(self, subject, tag):
        ident = generate_identity(subject, seed=tag * 32)
        if subject not in self.registry:
            self.registry.register(subject, ident.public_key)
        return ident

    def client(self, identity):
        return BankClient.connect(self.network, BANK_EP, identity)

    def setup_accounts(self):
        adm = self.client(self.admin)
        self.a_acct = adm.call("create_account", certificate_name=ALICE)["account_id"]
        self.b_acct = adm.call("create_account", certificate_name=GSP_A)["account_id"]
        adm.call("deposit", account_id=self.a_acct, amount=G(100).to_wire())
        adm.call("deposit", account_id=self.b_acct, amount=G(100).to_wire())
        return adm


@pytest.fixture
def deployment(clock):
    d = Deployment(clock)
    d.setup_accounts()
    return d


@acceptance(11)
def test_unregistered_subject_gets_closed_connection(deployment):
    stranger = generate_identity("CN=Mallory")
    executed = deployment.bank.executed_requests
    digest = deployment.bank.state_digest()
    conn = deployment.network.connect(BANK_EP)
    with pytest.raises(errors.GridBankError):
        BankClient(stranger, conn)
    # nothing further is accepted on that connection
    assert not _accepted(conn, request_message(stranger, 1, "whoami", {}))
    # skipping the handshake does not help either
    raw = deployment.network.connect(BANK_EP)
    reply = raw.request(request_message(stranger, 1, "deposit", {"account_id": deployment.a_acct,
                                                                  "amount": G(1).to_wire()}))
    assert reply.get("ok") is not True
    assert deployment.bank.executed_requests == executed
    assert deployment.bank.refused_connections >= 1
    assert deployment.bank.state_digest() == digest


def _accepted(conn, message) -> bool:
    try:
        return conn.request(message).get("ok") is True
    except Exception:
        return False  # closed


def _mutations(data: bytes):
    rng = random.Random(len(data))
    for pos in range(len(data)):
        mutated = bytearray(data)
        mutated[pos] ^= rng.randrange(1, 256)
        yield pos, bytes(mutated)


@acceptance(11)
@pytest.mark.parametrize("kind", ["cheque", "chain"])
def test_every_single_byte_mutation_of_instrument_rejected(deployment, kind):
    alice = deployment.client(deployment.alice)
    book = deployment.bank.book
    if kind == "cheque":
        inst = alice.request_cheque(deployment.a_acct, GSP_A, G(10), 3600)
    else:
        inst, chain = alice.request_hash_chain(deployment.a_acct, GSP_A, 4, G(1), 3600)
    data = canonical_encode(inst.to_wire())
    assert book.verify_cheque(inst, GSP_A) is Verdict.VALID if kind == "cheque" else True
    for pos, mutated in _mutations(data):
        try:
            wire = canonical_decode(mutated)
            forged = (GridCheque if kind == "cheque" else HashChainCommitment).from_wire(wire)
        except (errors.GridBankError, KeyError, TypeError, ValueError, AttributeError):
            continue
        if kind == "cheque":
            assert book.verify_cheque(forged, GSP_A) is not Verdict.VALID, pos
        else:
            assert not forged.signature_valid(deployment.bank.identity.public_key,
                                             deployment.bank.identity.subject), pos
            with pytest.raises(errors.GridBankError):
                book.redeem_hash_chain(forged, PayWord(inst.chain_id, 1, chain[1]), b"", GSP_A)


@acceptance(11)
def test_every_single_byte_mutation_of_wire_message_rejected(deployment):
    frame = encode_frame(request_message(deployment.alice, 10, "direct_transfer", {
        "drawer": deployment.a_acct, "recipient": deployment.b_acct, "amount": G(1).to_wire()}))
    before = deployment.bank.state_digest()
    for pos, mutated in _mutations(frame):
        conn = deployment.network.connect(BANK_EP)
        BankClient(deployment.alice, conn)
        try:
            reply = decode_frame(conn.request_bytes(mutated))
        except Exception:
            continue  # the connection was dropped
        assert reply.get("ok") is not True, pos
    assert deployment.bank.state_digest() == before
    # the unmutated frame is a valid request, so the rejections above were earned
    conn = deployment.network.connect(BANK_EP)
    BankClient(deployment.alice, conn)
    assert decode_frame(conn.request_bytes(frame))["ok"] is True
    assert deployment.bank.state_digest() != before


@acceptance(11)
def test_op_role_fuzz_admin_ops_never_run_for_holder(deployment):
    admin_ops = sorted(n for n, o in OPS.items() if o.admin_only)
    assert {"deposit", "withdraw", "set_credit_limit", "cancel_transfer", "close_account",
            "create_account"} <= set(admin_ops)
    holders = [deployment.client(deployment.alice), deployment.client(deployment.bob)]
    rng = random.Random(11)
    accts = [deployment.a_acct, deployment.b_acct]
    pool = {
        "account_id": accts, "destination_account_id": accts,
        "amount": [G(1).to_wire(), G(1000).to_wire()], "limit": [G(10**6).to_wire()],
        "transaction_id": [1, 2, 3], "certificate_name": ["CN=Zed", ALICE],
    }
    before = deployment.bank.state_digest()
    for _ in range(400):
        op = rng.choice(admin_ops)
        params = {k: rng.choice(v) for k, v in pool.items() if rng.random() < 0.6}
        with pytest.raises(errors.GridBankError) as info:
            rng.choice(holders).call(op, **params)
        assert info.value.code in ("FORBIDDEN", "SCHEMA_VIOLATION"), info.value
    # well-formed admin requests from holders are refused on role, not on shape
    for op, params in [("deposit", {"account_id": accts[0], "amount": G(5).to_wire()}),
                       ("withdraw", {"account_id": accts[1], "amount": G(5).to_wire()}),
                       ("set_credit_limit", {"account_id": accts[0], "limit": G(9).to_wire()}),
                       ("close_account", {"account_id": accts[1], "destination_account_id": accts[0]}),
                       ("create_account", {"certificate_name": "CN=Zed"})]:
        for h in holders:
            with pytest.raises(errors.Forbidden):
                h.call(op, **params)
    assert deployment.bank.state_digest() == before


# -- 12. crash consistency ------------------------------------------------------------------------

def _random_committed_ops(d: Deployment, rng: random.Random, clock, want: int = 50) -> int:
    adm = d.client(d.admin)
    alice, bob = d.client(d.alice), d.client(d.bob)
    cheques, chains, txns = [], [], []
    done = 0
    while done < want:
        op = rng.choice(["deposit", "transfer", "cheque", "redeem", "chain", "payword", "lock", "advance",
                         "cancel", "credit"])
        try:
            if op == "deposit":
                adm.call("deposit", account_id=rng.choice([d.a_acct, d.b_acct]),
                         amount=Money(rng.randint(1, 5000)).to_wire())
            elif op == "transfer":
                txns.append(alice.direct_transfer(d.a_acct, d.b_acct, Money(rng.randint(1, 3000)))["body"]
                            ["transaction_id"])
            elif op == "cheque":
                cheques.append(alice.request_cheque(d.a_acct, GSP_A, Money(rng.randint(1, 9000)),
                                                    rng.randint(60, 3600)))
            elif op == "redeem" and cheques:
                c = cheques.pop(rng.randrange(len(cheques)))
                bob.call("redeem_cheque", cheque=c.to_wire(),
                         amount=Money(rng.randint(1, c.amount_limit.amount_milli)).to_wire(), rur="")
            elif op == "chain":
                chains.append(alice.request_hash_chain(d.a_acct, GSP_A, rng.randint(1, 20),
                                                       Money(rng.randint(1, 500)), rng.randint(60, 3600)))
            elif op == "payword" and chains:
                c, chain = rng.choice(chains)
                i = rng.randint(1, c.length)
                bob.call("redeem_hash_chain", commitment=c.to_wire(),
                         payword=PayWord(c.chain_id, i, chain[i]).to_wire(), rur="")
            elif op == "lock":
                alice.call("lock_funds", account_id=d.a_acct, amount=Money(rng.randint(1, 2000)).to_wire())
            elif op == "advance":
                clock.advance(rng.randint(1, 900))
                adm.call("sweep_expired")
            elif op == "cancel" and txns:
                adm.call("cancel_transfer", transaction_id=txns.pop())
            elif op == "credit":
                adm.call("set_credit_limit", account_id=d.a_acct, limit=Money(rng.randint(0, 20000)).to_wire())
            else:
                continue
        except errors.GridBankError:
            continue
        done += 1
    return done


@acceptance(12)
@pytest.mark.parametrize("torn_tail", [False, True])
@pytest.mark.parametrize("seed", range(3))
def test_crash_and_replay_reproduces_digest(tmp_path, seed, torn_tail):
    clock = ManualClock("2026-03-01T12:00:00Z")
    path = tmp_path / "journal.jsonl"
    d = Deployment(clock, journal=Journal(path), seed=seed)
    d.setup_accounts()
    assert _random_committed_ops(d, random.Random(seed), clock) == 50
    digest = d.bank.state_digest()
    # a killed process leaves exactly what it had written; the bank is never closed
    crashed = tmp_path / "crashed.jsonl"
    shutil.copyfile(path, crashed)
    if torn_tail:
        with crashed.open("ab") as fh:
            fh.write(b'{"entries":[{"args":{"account_id":"01-0')
    again = Bank(d.bank.identity, d.registry, {"CN=Admin"}, clock, journal=Journal(crashed),
                 endpoint=BANK_EP)
    assert again.state_digest() == digest
    assert again.ledger.holdings() == d.bank.ledger.holdings()


def _observed_state(client: BankClient, accounts: list[str], instruments: list[str]) -> dict:
    return {"accounts": [client.call("get_account", account_id=a) for a in accounts],
            "instruments": [client.call("instrument_status", instrument_id=i) for i in instruments],
            "transfers": [client.statement(a, T0 - timedelta(days=1), T0 + timedelta(days=400))
                          for a in accounts]}


@acceptance(12)
def test_sigkilled_server_restarts_to_same_state(tmp_path):
    from gridbank.wire import TcpNetwork

    bank_dir = tmp_path / "bank"
    bank_dir.mkdir()
    keys = bank_dir / "keys.tsv"
    (bank_dir / "admins.txt").write_text("CN=Admin\n")
    registry = KeyRegistry()
    admin = generate_identity("CN=Admin", registry, seed=b"a" * 32)
    alice = generate_identity(ALICE, registry, seed=b"c" * 32)
    bob = generate_identity(GSP_A, registry, seed=b"p" * 32)
    registry.save(keys)
    argv = [sys.executable, "-c", "import sys; from gridbank.cli import server_main; sys.exit(server_main())",
            "--listen", "127.0.0.1:0", "--journal", str(bank_dir / "journal.jsonl"), "--keys", str(keys),
            "--admins", str(bank_dir / "admins.txt")]

    def launch():
        proc = subprocess.Popen(argv, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True)
        line = proc.stdout.readline()
        assert line.startswith("listening on "), line
        return proc, line.split()[-1]

    net = TcpNetwork()
    proc, ep = launch()
    try:
        adm = BankClient.connect(net, ep, admin)
        a = adm.call("create_account", certificate_name=ALICE)["account_id"]
        b = adm.call("create_account", certificate_name=GSP_A)["account_id"]
        adm.call("deposit", account_id=a, amount=G(500).to_wire())
        ca, cb = BankClient.connect(net, ep, alice), BankClient.connect(net, ep, bob)
        rng = random.Random(12)
        instruments, ops = [], 3
        while ops < 50:
            choice = rng.randrange(4)
            if choice == 0:
                ca.direct_transfer(a, b, Money(rng.randint(1, 2000)))
            elif choice == 1:
                instruments.append(ca.request_cheque(a, GSP_A, Money(rng.randint(1, 5000)), 86400))
            elif choice == 2 and instruments:
                c = instruments[rng.randrange(len(instruments))]
                try:
                    cb.call("redeem_cheque", cheque=c.to_wire(), amount=Money(1).to_wire(), rur="")
                except errors.AlreadyRedeemed:
                    continue
            else:
                adm.call("deposit", account_id=rng.choice([a, b]), amount=Money(rng.randint(1, 999)).to_wire())
            ops += 1
        ids = [c.instrument_id for c in instruments]
        before = _observed_state(adm, [a, b], ids)
        for c in (adm, ca, cb):
            c.close()
    finally:
        proc.send_signal(signal.SIGKILL)
        proc.wait(timeout=10)
        proc.stdout.close()
    proc, ep = launch()
    try:
        adm = BankClient.connect(net, ep, admin)
        after = _observed_state(adm, [a, b], ids)
        adm.close()
    finally:
        proc.terminate()
        proc.wait(timeout=10)
        proc.stdout.close()
    assert json.dumps(after, sort_keys=True) == json.dumps(before, sort_keys=True)
