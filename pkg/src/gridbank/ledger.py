"""Accounts layer: account state, fund locks and the audit trail.

All mutations run under one re-entrant mutex and are recorded as journal
entries. Each public operation validates everything first and then applies
one or more entries through the same ``_apply_*`` functions used for replay,
so a replayed journal reproduces the live state exactly.
"""

from __future__ import annotations

import hashlib
import re
import threading
from contextlib import contextmanager
from dataclasses import dataclass, replace
from datetime import datetime
from typing import Callable, NamedTuple

from .clock import SystemClock, format_ts, parse_ts, utc
from .errors import (
    AccountClosed,
    AlreadyCancelled,
    BadParameters,
    BadRange,
    CorruptJournal,
    CurrencyMismatch,
    DuplicateSubject,
    ExceedsLock,
    GridBankError,
    HasLockedFunds,
    InsufficientFunds,
    NegativeBalance,
    NoSuchAccount,
    NoSuchLock,
    NoSuchTransfer,
    NonPositiveAmount,
    NotAdmin,
    SelfTransfer,
    WouldViolateBalance,
)
from .journal import Journal
from .money import DEFAULT_CURRENCY, Money
from .security import b64d, b64e, canonical_encode

BANK_NUMBER = "01"
BRANCH_NUMBER = "0001"
ACCOUNT_ID_RE = re.compile(r"^(\d{2})-(\d{4})-(\d{8})$")

MAX_CERTIFICATE_NAME = 150
MAX_ORGANIZATION_NAME = 30

DEPOSIT = "Deposit"
WITHDRAWAL = "Withdrawal"
TRANSFER = "Transfer"


def format_account_id(bank: int | str, branch: int | str, number: int) -> str:
    return f"{int(bank):02d}-{int(branch):04d}-{int(number):08d}"


def parse_account_id(text: str) -> tuple[str, str, int]:
    m = ACCOUNT_ID_RE.match(text) if isinstance(text, str) else None
    if not m:
        raise BadParameters(f"malformed account id {text!r}")
    return m.group(1), m.group(2), int(m.group(3))


@dataclass(frozen=True)
class Account:
    account_id: str
    certificate_name: str
    organization_name: str | None
    available_balance: Money
    locked_balance: Money
    credit_limit: Money
    closed: bool = False

    @property
    def currency(self) -> str:
        return self.available_balance.currency

    def to_record(self) -> dict:
        return {
            "AccountID": self.account_id,
            "CertificateName": self.certificate_name,
            "OrganizationName": self.organization_name,
            "AvailableBalance": self.available_balance.text(),
            "LockedBalance": self.locked_balance.text(),
            "Currency": self.currency,
            "CreditLimit": self.credit_limit.text(),
            "Closed": self.closed,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Account":
        cur = rec["Currency"]
        return cls(
            rec["AccountID"], rec["CertificateName"], rec.get("OrganizationName"),
            Money.of(rec["AvailableBalance"], cur), Money.of(rec["LockedBalance"], cur),
            Money.of(rec["CreditLimit"], cur), bool(rec.get("Closed", False)),
        )


@dataclass(frozen=True)
class TransactionRecord:
    transaction_id: int
    account_id: str
    txn_type: str
    timestamp: datetime
    amount: Money

    def to_record(self) -> dict:
        return {
            "TransactionID": self.transaction_id,
            "AccountID": self.account_id,
            "Type": self.txn_type,
            "Date": format_ts(self.timestamp),
            "Amount": self.amount.text(),
            "Currency": self.amount.currency,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TransactionRecord":
        return cls(rec["TransactionID"], rec["AccountID"], rec["Type"], parse_ts(rec["Date"]),
                   Money.of(rec["Amount"], rec["Currency"]))


@dataclass(frozen=True)
class TransferRecord:
    transaction_id: int
    timestamp: datetime
    drawer_account_id: str
    amount: Money
    recipient_account_id: str
    resource_usage_record: bytes = b""

    def to_record(self) -> dict:
        return {
            "TransactionID": self.transaction_id,
            "Date": format_ts(self.timestamp),
            "DrawerAccountID": self.drawer_account_id,
            "Amount": self.amount.text(),
            "Currency": self.amount.currency,
            "RecipientAccountID": self.recipient_account_id,
            "ResourceUsageRecord": b64e(self.resource_usage_record),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TransferRecord":
        return cls(rec["TransactionID"], parse_ts(rec["Date"]), rec["DrawerAccountID"],
                   Money.of(rec["Amount"], rec["Currency"]), rec["RecipientAccountID"],
                   b64d(rec["ResourceUsageRecord"]))


@dataclass(frozen=True)
class Lock:
    lock_id: int
    account_id: str
    remaining: Money
    created: datetime
    purpose: str

    def to_record(self) -> dict:
        return {
            "LockID": self.lock_id,
            "AccountID": self.account_id,
            "Remaining": self.remaining.text(),
            "Currency": self.remaining.currency,
            "Created": format_ts(self.created),
            "Purpose": self.purpose,
        }


class Statement(NamedTuple):
    account: Account
    transactions: list[TransactionRecord]
    transfers: list[TransferRecord]


class Ledger:
    def __init__(self, clock=None, journal: Journal | None = None):
        self.clock = clock or SystemClock()
        self.journal = journal
        self._mutex = threading.RLock()
        self._depth = 0
        self._pending: list[dict] = []
        self._replaying = False
        self._external: dict[str, Callable[[str, dict], None]] = {}

        self._accounts: dict[str, Account] = {}
        self._by_subject: dict[str, str] = {}
        self._transactions: list[TransactionRecord] = []
        self._transfers: dict[int, TransferRecord] = {}
        self._cancelled: set[int] = set()
        self._locks: dict[int, Lock] = {}
        self._next_account = 1
        self._next_txn = 1
        self._next_lock = 1

    # -- commit / replay machinery -------------------------------------

    @contextmanager
    def atomic(self):
        """Serialize a group of operations and journal them as one line."""
        with self._mutex:
            self._depth += 1
            try:
                yield self
            finally:
                self._depth -= 1
                if self._depth == 0 and self._pending:
                    pending, self._pending = self._pending, []
                    if self.journal is not None:
                        self.journal.append(pending)

    def register_applier(self, prefix: str, fn: Callable[[str, dict], None]) -> None:
        self._external[prefix] = fn

    def commit(self, kind: str, args: dict) -> None:
        """Apply an entry and queue it for the journal. Caller holds ``atomic()``."""
        if self._depth == 0:
            raise RuntimeError("commit outside atomic()")
        self._apply(kind, args)
        self._pending.append({"kind": kind, "args": args})

    def _apply(self, kind: str, args: dict) -> None:
        prefix, _, name = kind.partition(".")
        if prefix == "ledger":
            fn = getattr(self, f"_apply_{name}", None)
            if fn is None:
                raise CorruptJournal(f"unknown ledger entry kind {kind!r}")
            fn(args)
        elif prefix in self._external:
            self._external[prefix](name, args)
        else:
            raise CorruptJournal(f"no applier for entry kind {kind!r}")

    def replay(self) -> int:
        """Rebuild state from the attached journal. Returns the number of commits."""
        if self.journal is None:
            return 0
        n = 0
        with self._mutex:
            self._replaying = True
            try:
                for entries in self.journal.read():
                    for e in entries:
                        try:
                            self._apply(e["kind"], e["args"])
                        except GridBankError as exc:
                            if isinstance(exc, CorruptJournal):
                                raise
                            raise CorruptJournal(f"replay failed at {e.get('kind')}: {exc}") from exc
                    n += 1
            finally:
                self._replaying = False
        return n

    def _ts(self) -> str:
        return format_ts(self.clock.now())

    # -- apply functions (shared by live path and replay) ---------------

    def _apply_open(self, a: dict) -> None:
        cur = a["currency"]
        acct = Account(a["account_id"], a["certificate_name"], a.get("organization_name"),
                       Money.zero(cur), Money.zero(cur), Money.zero(cur))
        self._accounts[acct.account_id] = acct
        self._by_subject[acct.certificate_name] = acct.account_id
        seq = parse_account_id(acct.account_id)[2]
        self._next_account = max(self._next_account, seq + 1)

    def _apply_update(self, a: dict) -> None:
        acct = self._accounts[a["account_id"]]
        del self._by_subject[acct.certificate_name]
        self._accounts[acct.account_id] = replace(
            acct, certificate_name=a["certificate_name"], organization_name=a.get("organization_name"))
        self._by_subject[a["certificate_name"]] = acct.account_id

    def _adjust(self, account_id: str, available: int = 0, locked: int = 0) -> Account:
        acct = self._accounts[account_id]
        cur = acct.currency
        acct = replace(acct,
                       available_balance=acct.available_balance + Money(available, cur),
                       locked_balance=acct.locked_balance + Money(locked, cur))
        self._accounts[account_id] = acct
        return acct

    def _txn(self, txn_id: int, account_id: str, kind: str, ts: datetime, amount_milli: int) -> None:
        cur = self._accounts[account_id].currency
        self._transactions.append(TransactionRecord(txn_id, account_id, kind, ts, Money(amount_milli, cur)))
        self._next_txn = max(self._next_txn, txn_id + 1)

    def _apply_deposit(self, a: dict) -> None:
        self._adjust(a["account_id"], available=a["amount_milli"])
        self._txn(a["transaction_id"], a["account_id"], DEPOSIT, parse_ts(a["ts"]), a["amount_milli"])

    def _apply_withdraw(self, a: dict) -> None:
        self._adjust(a["account_id"], available=-a["amount_milli"])
        self._txn(a["transaction_id"], a["account_id"], WITHDRAWAL, parse_ts(a["ts"]), -a["amount_milli"])

    def _apply_credit_limit(self, a: dict) -> None:
        acct = self._accounts[a["account_id"]]
        self._accounts[acct.account_id] = replace(acct, credit_limit=Money(a["limit_milli"], acct.currency))

    def _record_transfer(self, txn_id: int, drawer: str, recipient: str, amount_milli: int,
                         rur: bytes, ts: datetime) -> None:
        self._txn(txn_id, drawer, TRANSFER, ts, -amount_milli)
        self._txn(txn_id, recipient, TRANSFER, ts, amount_milli)
        cur = self._accounts[drawer].currency
        self._transfers[txn_id] = TransferRecord(txn_id, ts, drawer, Money(amount_milli, cur), recipient, rur)

    def _apply_transfer(self, a: dict) -> None:
        amt = a["amount_milli"]
        self._adjust(a["drawer"], available=-amt)
        self._adjust(a["recipient"], available=amt)
        self._record_transfer(a["transaction_id"], a["drawer"], a["recipient"], amt,
                              b64d(a["rur"]), parse_ts(a["ts"]))

    def _apply_lock(self, a: dict) -> None:
        amt = a["amount_milli"]
        acct = self._adjust(a["account_id"], available=-amt, locked=amt)
        self._locks[a["lock_id"]] = Lock(a["lock_id"], acct.account_id, Money(amt, acct.currency),
                                         parse_ts(a["ts"]), a["purpose"])
        self._next_lock = max(self._next_lock, a["lock_id"] + 1)

    def _apply_redeem_lock(self, a: dict) -> None:
        lock = self._locks[a["lock_id"]]
        amt = a["amount_milli"]
        self._adjust(lock.account_id, locked=-amt)
        self._adjust(a["recipient"], available=amt)
        remaining = lock.remaining - Money(amt, lock.remaining.currency)
        if remaining.amount_milli == 0:
            del self._locks[lock.lock_id]
        else:
            self._locks[lock.lock_id] = replace(lock, remaining=remaining)
        self._record_transfer(a["transaction_id"], lock.account_id, a["recipient"], amt,
                              b64d(a["rur"]), parse_ts(a["ts"]))

    def _apply_release(self, a: dict) -> None:
        lock = self._locks.pop(a["lock_id"])
        amt = lock.remaining.amount_milli
        self._adjust(lock.account_id, available=amt, locked=-amt)

    def _apply_cancel(self, a: dict) -> None:
        orig = self._transfers[a["original"]]
        amt = orig.amount.amount_milli
        self._cancelled.add(orig.transaction_id)
        self._adjust(orig.recipient_account_id, available=-amt)
        self._adjust(orig.drawer_account_id, available=amt)
        self._record_transfer(a["transaction_id"], orig.recipient_account_id, orig.drawer_account_id,
                              amt, b"", parse_ts(a["ts"]))

    def _apply_close(self, a: dict) -> None:
        acct = self._accounts[a["account_id"]]
        amt = a["amount_milli"]
        if amt:
            self._adjust(acct.account_id, available=-amt)
            self._adjust(a["destination"], available=amt)
            self._record_transfer(a["transaction_id"], acct.account_id, a["destination"], amt, b"",
                                  parse_ts(a["ts"]))
        self._accounts[acct.account_id] = replace(self._accounts[acct.account_id], closed=True)
        del self._by_subject[acct.certificate_name]

    # -- validation helpers ----------------------------------------------

    def _account(self, account_id: str) -> Account:
        try:
            return self._accounts[account_id]
        except (KeyError, TypeError):
            raise NoSuchAccount(f"no account {account_id!r}") from None

    def _open(self, account_id: str) -> Account:
        acct = self._account(account_id)
        if acct.closed:
            raise AccountClosed(f"account {account_id} is closed")
        return acct

    @staticmethod
    def _positive(amount: Money, acct: Account) -> None:
        if not isinstance(amount, Money):
            raise BadParameters(f"expected Money, got {amount!r}")
        if amount.currency != acct.currency:
            raise CurrencyMismatch(f"{amount.currency} amount for {acct.currency} account")
        if amount.amount_milli <= 0:
            raise NonPositiveAmount(f"amount must be positive, got {amount}")

    @staticmethod
    def _can_debit(acct: Account, amount: Money) -> None:
        if (acct.available_balance - amount) < -acct.credit_limit:
            raise InsufficientFunds(
                f"{acct.account_id}: available {acct.available_balance}, credit limit "
                f"{acct.credit_limit}, requested {amount}")

    @staticmethod
    def _check_names(certificate_name, organization_name) -> None:
        if not isinstance(certificate_name, str) or not certificate_name.strip():
            raise BadParameters("certificate_name must be non-empty")
        if len(certificate_name) > MAX_CERTIFICATE_NAME:
            raise BadParameters(f"certificate_name longer than {MAX_CERTIFICATE_NAME} chars")
        if organization_name is not None and (
                not isinstance(organization_name, str) or len(organization_name) > MAX_ORGANIZATION_NAME):
            raise BadParameters(f"organization_name must be a string of at most {MAX_ORGANIZATION_NAME} chars")

    # -- account operations ------------------------------------------------

    def create_account(self, certificate_name: str, organization_name: str | None = None,
                       currency: str = DEFAULT_CURRENCY) -> str:
        with self.atomic():
            self._check_names(certificate_name, organization_name)
            Money.zero(currency)  # validates the code
            if certificate_name in self._by_subject:
                raise DuplicateSubject(f"{certificate_name!r} already has an open account")
            account_id = format_account_id(BANK_NUMBER, BRANCH_NUMBER, self._next_account)
            self.commit("ledger.open", {
                "account_id": account_id, "certificate_name": certificate_name,
                "organization_name": organization_name, "currency": currency, "ts": self._ts()})
            return account_id

    def get_account(self, account_id: str) -> Account:
        with self._mutex:
            return self._open(account_id)

    def update_account(self, record: Account | dict) -> bool:
        """Change only the certificate and organization names of an account."""
        if isinstance(record, Account):
            account_id, cert, org = record.account_id, record.certificate_name, record.organization_name
        else:
            account_id = record.get("account_id", record.get("AccountID"))
            cert = record.get("certificate_name", record.get("CertificateName"))
            org = record.get("organization_name", record.get("OrganizationName"))
        with self.atomic():
            acct = self._open(account_id)
            self._check_names(cert, org)
            holder = self._by_subject.get(cert)
            if holder is not None and holder != acct.account_id:
                raise DuplicateSubject(f"{cert!r} already has an open account")
            self.commit("ledger.update", {"account_id": acct.account_id, "certificate_name": cert,
                                          "organization_name": org})
            return True

    def statement(self, account_id: str, start: datetime, end: datetime) -> Statement:
        start, end = utc(start), utc(end)
        if start > end:
            raise BadRange(f"start {format_ts(start)} after end {format_ts(end)}")
        with self._mutex:
            acct = self._account(account_id)
            txns = [t for t in self._transactions
                    if t.account_id == account_id and start <= t.timestamp <= end]
            txns.sort(key=lambda t: (t.timestamp, t.transaction_id))
            ids = {t.transaction_id for t in txns if t.txn_type == TRANSFER}
            transfers = sorted((self._transfers[i] for i in ids),
                               key=lambda r: (r.timestamp, r.transaction_id))
            return Statement(acct, txns, transfers)

    def deposit(self, account_id: str, amount: Money, *, admin: bool) -> int:
        with self.atomic():
            if not admin:
                raise NotAdmin("deposit requires administrator privilege")
            acct = self._open(account_id)
            self._positive(amount, acct)
            txn = self._next_txn
            self.commit("ledger.deposit", {"transaction_id": txn, "account_id": account_id,
                                           "amount_milli": amount.amount_milli, "ts": self._ts()})
            return txn

    def withdraw(self, account_id: str, amount: Money, *, admin: bool) -> int:
        with self.atomic():
            if not admin:
                raise NotAdmin("withdraw requires administrator privilege")
            acct = self._open(account_id)
            self._positive(amount, acct)
            self._can_debit(acct, amount)
            txn = self._next_txn
            self.commit("ledger.withdraw", {"transaction_id": txn, "account_id": account_id,
                                            "amount_milli": amount.amount_milli, "ts": self._ts()})
            return txn

    def set_credit_limit(self, account_id: str, limit: Money, *, admin: bool) -> bool:
        with self.atomic():
            if not admin:
                raise NotAdmin("changing a credit limit requires administrator privilege")
            acct = self._open(account_id)
            if not isinstance(limit, Money) or limit.currency != acct.currency:
                raise CurrencyMismatch("credit limit currency differs from account")
            if limit.amount_milli < 0:
                raise BadParameters("credit limit must be non-negative")
            if acct.available_balance < -limit:
                raise WouldViolateBalance(
                    f"available {acct.available_balance} is below -{limit}")
            self.commit("ledger.credit_limit", {"account_id": account_id,
                                                "limit_milli": limit.amount_milli})
            return True

    def transfer(self, drawer: str, recipient: str, amount: Money, rur_blob: bytes = b"") -> int:
        with self.atomic():
            d = self._open(drawer)
            r = self._open(recipient)
            if drawer == recipient:
                raise SelfTransfer("drawer and recipient are the same account")
            if d.currency != r.currency:
                raise CurrencyMismatch(f"{d.currency} -> {r.currency}")
            self._positive(amount, d)
            self._can_debit(d, amount)
            txn = self._next_txn
            self.commit("ledger.transfer", {
                "transaction_id": txn, "drawer": drawer, "recipient": recipient,
                "amount_milli": amount.amount_milli, "rur": b64e(bytes(rur_blob)), "ts": self._ts()})
            return txn

    def lock_funds(self, account_id: str, amount: Money, purpose: str = "") -> int:
        with self.atomic():
            acct = self._open(account_id)
            self._positive(amount, acct)
            self._can_debit(acct, amount)
            lock_id = self._next_lock
            self.commit("ledger.lock", {"lock_id": lock_id, "account_id": account_id,
                                        "amount_milli": amount.amount_milli, "purpose": str(purpose),
                                        "ts": self._ts()})
            return lock_id

    def transfer_from_locked(self, lock_id: int, recipient: str, amount: Money,
                             rur_blob: bytes = b"") -> int:
        with self.atomic():
            lock = self.get_lock(lock_id)
            r = self._open(recipient)
            if recipient == lock.account_id:
                raise SelfTransfer("cannot redeem a lock into its own account")
            if r.currency != lock.remaining.currency:
                raise CurrencyMismatch(f"{lock.remaining.currency} -> {r.currency}")
            self._positive(amount, r)
            if amount > lock.remaining:
                raise ExceedsLock(f"lock {lock_id} holds {lock.remaining}, requested {amount}")
            txn = self._next_txn
            self.commit("ledger.redeem_lock", {
                "transaction_id": txn, "lock_id": lock_id, "recipient": recipient,
                "amount_milli": amount.amount_milli, "rur": b64e(bytes(rur_blob)), "ts": self._ts()})
            return txn

    def release_lock(self, lock_id: int) -> Money:
        """Return a lock's remainder to available funds and retire it."""
        with self.atomic():
            lock = self.get_lock(lock_id)
            self.commit("ledger.release", {"lock_id": lock_id})
            return lock.remaining

    def cancel_transfer(self, transaction_id: int, *, admin: bool) -> int:
        with self.atomic():
            if not admin:
                raise NotAdmin("cancelling a transfer requires administrator privilege")
            orig = self._transfers.get(transaction_id)
            if orig is None:
                raise NoSuchTransfer(f"no transfer {transaction_id!r}")
            if transaction_id in self._cancelled:
                raise AlreadyCancelled(f"transfer {transaction_id} already cancelled")
            payer = self._open(orig.recipient_account_id)
            self._open(orig.drawer_account_id)
            self._can_debit(payer, orig.amount)
            txn = self._next_txn
            self.commit("ledger.cancel", {"original": transaction_id, "transaction_id": txn,
                                          "ts": self._ts()})
            return txn

    def close_account(self, account_id: str, destination_account_id: str, *, admin: bool) -> bool:
        with self.atomic():
            if not admin:
                raise NotAdmin("closing an account requires administrator privilege")
            acct = self._open(account_id)
            dest = self._open(destination_account_id)
            if dest.account_id == acct.account_id:
                raise SelfTransfer("destination is the account being closed")
            if dest.currency != acct.currency:
                raise CurrencyMismatch(f"{acct.currency} -> {dest.currency}")
            if acct.locked_balance.amount_milli != 0:
                raise HasLockedFunds(f"{account_id} has {acct.locked_balance} locked")
            if acct.available_balance.amount_milli < 0:
                raise NegativeBalance(f"{account_id} is overdrawn: {acct.available_balance}")
            amt = acct.available_balance.amount_milli
            self.commit("ledger.close", {
                "account_id": account_id, "destination": destination_account_id,
                "amount_milli": amt, "transaction_id": self._next_txn if amt else 0, "ts": self._ts()})
            return True

    # -- queries -------------------------------------------------------------

    def get_lock(self, lock_id: int) -> Lock:
        with self._mutex:
            try:
                return self._locks[lock_id]
            except (KeyError, TypeError):
                raise NoSuchLock(f"no live lock {lock_id!r}") from None

    def has_lock(self, lock_id: int) -> bool:
        with self._mutex:
            return lock_id in self._locks

    def locks(self, account_id: str | None = None) -> list[Lock]:
        with self._mutex:
            return [l for l in self._locks.values() if account_id is None or l.account_id == account_id]

    def account_for_subject(self, subject: str) -> str:
        with self._mutex:
            try:
                return self._by_subject[subject]
            except KeyError:
                raise NoSuchAccount(f"no open account for {subject!r}") from None

    def open_subjects(self) -> frozenset[str]:
        with self._mutex:
            return frozenset(self._by_subject)

    def accounts(self, include_closed: bool = True) -> list[Account]:
        with self._mutex:
            return [a for a in self._accounts.values() if include_closed or not a.closed]

    def account_record(self, account_id: str) -> Account:
        """Snapshot of any account, closed or not."""
        with self._mutex:
            return self._account(account_id)

    def transactions(self) -> list[TransactionRecord]:
        with self._mutex:
            return list(self._transactions)

    def transfers(self) -> list[TransferRecord]:
        with self._mutex:
            return sorted(self._transfers.values(), key=lambda r: r.transaction_id)

    def get_transfer(self, transaction_id: int) -> TransferRecord:
        with self._mutex:
            try:
                return self._transfers[transaction_id]
            except (KeyError, TypeError):
                raise NoSuchTransfer(f"no transfer {transaction_id!r}") from None

    def is_cancelled(self, transaction_id: int) -> bool:
        with self._mutex:
            return transaction_id in self._cancelled

    def holdings(self, currency: str = DEFAULT_CURRENCY) -> Money:
        """Sum of available plus locked funds over all accounts."""
        with self._mutex:
            total = 0
            for a in self._accounts.values():
                if a.currency == currency:
                    total += a.available_balance.amount_milli + a.locked_balance.amount_milli
            return Money(total, currency)

    def snapshot(self) -> dict:
        with self._mutex:
            return {
                "accounts": [a.to_record() for a in sorted(self._accounts.values(),
                                                           key=lambda a: a.account_id)],
                "transactions": [t.to_record() for t in self._transactions],
                "transfers": [t.to_record() for t in self.transfers()],
                "cancelled": sorted(self._cancelled),
                "locks": [l.to_record() for _, l in sorted(self._locks.items())],
            }

    def state_digest(self) -> str:
        return hashlib.sha256(canonical_encode(self.snapshot())).hexdigest()
