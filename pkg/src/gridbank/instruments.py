"""Payment instruments: GridCheques, PayWord-style hash chains and direct
transfers, plus the bank-side redemption state.

Both instrument kinds are backed by a ledger lock taken at issue time, so a
payee can never be paid more than the drawer set aside. A cheque is paid out
once; its remainder goes straight back to the drawer. A hash chain of N
links locks ``N * link_value`` and pays ``(i - highest_redeemed) *
link_value`` when a preimage of index ``i`` is presented.
"""

from __future__ import annotations

import enum
import hashlib
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Callable

from .clock import format_ts, parse_ts, utc
from .errors import (
    AlreadyRedeemed,
    BadParameters,
    BadPreimage,
    BadSignature,
    Expired,
    ExceedsLimit,
    IndexOverflow,
    NoSuchAccount,
    NoSuchInstrument,
    NonPositiveAmount,
    PayeeHasNoAccount,
    StaleIndex,
    UnreachableEndpoint,
    WrongPayee,
)
from .ledger import Ledger
from .money import Money
from .security import Identity, b64d, b64e, sign_body, verify_body

PREIMAGE_BYTES = 32


def hash_once(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def iterate_hash(data: bytes, times: int) -> bytes:
    for _ in range(times):
        data = hashlib.sha256(data).digest()
    return data


def make_hash_chain(n_links: int, seed: bytes) -> list[bytes]:
    """Return ``[w_0, w_1, ..., w_N]`` with ``w_N = seed`` and ``w_i = H(w_{i+1})``."""
    if n_links < 1:
        raise BadParameters("a hash chain needs at least one link")
    if len(seed) != PREIMAGE_BYTES:
        raise BadParameters(f"chain seed must be {PREIMAGE_BYTES} bytes")
    chain = [seed]
    for _ in range(n_links):
        chain.append(hash_once(chain[-1]))
    chain.reverse()
    return chain


class Verdict(str, enum.Enum):
    VALID = "VALID"
    BAD_SIGNATURE = "BAD_SIGNATURE"
    WRONG_PAYEE = "WRONG_PAYEE"
    EXPIRED = "EXPIRED"
    ALREADY_REDEEMED = "ALREADY_REDEEMED"
    BAD_PREIMAGE = "BAD_PREIMAGE"
    STALE_INDEX = "STALE_INDEX"
    INDEX_OVERFLOW = "INDEX_OVERFLOW"

    def raise_unless_valid(self) -> None:
        if self is not Verdict.VALID:
            raise _VERDICT_ERRORS[self](self.value)


_VERDICT_ERRORS = {
    Verdict.BAD_SIGNATURE: BadSignature,
    Verdict.WRONG_PAYEE: WrongPayee,
    Verdict.EXPIRED: Expired,
    Verdict.ALREADY_REDEEMED: AlreadyRedeemed,
    Verdict.BAD_PREIMAGE: BadPreimage,
    Verdict.STALE_INDEX: StaleIndex,
    Verdict.INDEX_OVERFLOW: IndexOverflow,
}


def _ttl(ttl) -> timedelta:
    td = ttl if isinstance(ttl, timedelta) else timedelta(seconds=int(ttl))
    if td <= timedelta(0):
        raise BadParameters("instrument lifetime must be positive")
    return td


@dataclass(frozen=True)
class GridCheque:
    cheque_id: str
    drawer_account_id: str
    payee_subject: str
    bank_endpoint: str
    amount_limit: Money
    lock_id: int
    issued_at: datetime
    expires_at: datetime
    signature: dict | None = field(default=None, compare=False, repr=False)

    def body(self) -> dict:
        return {
            "type": "GridCheque",
            "cheque_id": self.cheque_id,
            "drawer_account_id": self.drawer_account_id,
            "payee_subject": self.payee_subject,
            "bank_endpoint": self.bank_endpoint,
            "amount_limit": self.amount_limit.to_wire(),
            "lock_id": self.lock_id,
            "issued_at": format_ts(self.issued_at),
            "expires_at": format_ts(self.expires_at),
        }

    @classmethod
    def from_body(cls, b: dict, signature: dict | None = None) -> "GridCheque":
        try:
            if b["type"] != "GridCheque":
                raise BadParameters("not a cheque")
            return cls(b["cheque_id"], b["drawer_account_id"], b["payee_subject"], b["bank_endpoint"],
                       Money.from_wire(b["amount_limit"]), b["lock_id"], parse_ts(b["issued_at"]),
                       parse_ts(b["expires_at"]), signature)
        except (KeyError, TypeError):
            raise BadParameters("malformed cheque") from None

    def to_wire(self) -> dict:
        return self.signature if self.signature else {"body": self.body()}

    @classmethod
    def from_wire(cls, data) -> "GridCheque":
        if not isinstance(data, dict) or not isinstance(data.get("body"), dict):
            raise BadParameters("malformed cheque")
        return cls.from_body(data["body"], data if "signature" in data else None)

    def signature_valid(self, bank_public_key: bytes, bank_subject: str | None = None) -> bool:
        try:
            return self.signature is not None and verify_body(
                bank_public_key, self.signature, bank_subject) == self.body()
        except BadSignature:
            return False

    @property
    def instrument_id(self) -> str:
        return self.cheque_id


@dataclass(frozen=True)
class HashChainCommitment:
    chain_id: str
    drawer_account_id: str
    payee_subject: str
    bank_endpoint: str
    root: bytes
    length: int
    link_value: Money
    lock_id: int
    issued_at: datetime
    expires_at: datetime
    signature: dict | None = field(default=None, compare=False, repr=False)

    def body(self) -> dict:
        return {
            "type": "GridHashChain",
            "chain_id": self.chain_id,
            "drawer_account_id": self.drawer_account_id,
            "payee_subject": self.payee_subject,
            "bank_endpoint": self.bank_endpoint,
            "root": b64e(self.root),
            "length": self.length,
            "link_value": self.link_value.to_wire(),
            "lock_id": self.lock_id,
            "issued_at": format_ts(self.issued_at),
            "expires_at": format_ts(self.expires_at),
        }

    @classmethod
    def from_body(cls, b: dict, signature: dict | None = None) -> "HashChainCommitment":
        try:
            if b["type"] != "GridHashChain":
                raise BadParameters("not a hash chain commitment")
            return cls(b["chain_id"], b["drawer_account_id"], b["payee_subject"], b["bank_endpoint"],
                       b64d(b["root"]), b["length"], Money.from_wire(b["link_value"]), b["lock_id"],
                       parse_ts(b["issued_at"]), parse_ts(b["expires_at"]), signature)
        except (KeyError, TypeError):
            raise BadParameters("malformed hash chain commitment") from None

    def to_wire(self) -> dict:
        return self.signature if self.signature else {"body": self.body()}

    @classmethod
    def from_wire(cls, data) -> "HashChainCommitment":
        if not isinstance(data, dict) or not isinstance(data.get("body"), dict):
            raise BadParameters("malformed hash chain commitment")
        return cls.from_body(data["body"], data if "signature" in data else None)

    def signature_valid(self, bank_public_key: bytes, bank_subject: str | None = None) -> bool:
        try:
            return self.signature is not None and verify_body(
                bank_public_key, self.signature, bank_subject) == self.body()
        except BadSignature:
            return False

    @property
    def instrument_id(self) -> str:
        return self.chain_id

    @property
    def capacity(self) -> Money:
        return self.link_value * self.length


@dataclass(frozen=True)
class PayWord:
    chain_id: str
    index: int
    preimage: bytes

    def to_wire(self) -> dict:
        return {"chain_id": self.chain_id, "index": self.index, "preimage": b64e(self.preimage)}

    @classmethod
    def from_wire(cls, d: dict) -> "PayWord":
        try:
            return cls(d["chain_id"], int(d["index"]), b64d(d["preimage"]))
        except (KeyError, TypeError, ValueError):
            raise BadParameters("malformed payword") from None


def verify_payword(commitment: HashChainCommitment, payword: PayWord, last_accepted_index: int,
                   now: datetime | None = None) -> Verdict:
    """Check a payword against a commitment. Owed value is ``index * link_value``."""
    if now is not None and utc(now) >= commitment.expires_at:
        return Verdict.EXPIRED
    if payword.chain_id != commitment.chain_id:
        return Verdict.BAD_PREIMAGE
    if payword.index > commitment.length:
        return Verdict.INDEX_OVERFLOW
    if payword.index <= last_accepted_index or payword.index < 1:
        return Verdict.STALE_INDEX
    if len(payword.preimage) != PREIMAGE_BYTES:
        return Verdict.BAD_PREIMAGE
    if iterate_hash(payword.preimage, payword.index) != commitment.root:
        return Verdict.BAD_PREIMAGE
    return Verdict.VALID


@dataclass
class _ChequeState:
    cheque: GridCheque
    redeemed: int | None = None  # milli-units paid, once redeemed
    released: bool = False


@dataclass
class _ChainState:
    commitment: HashChainCommitment
    highest: int = 0
    closed: bool = False


class InstrumentBook:
    """Bank-side issuing and redemption. Shares the ledger's serialization point."""

    def __init__(self, ledger: Ledger, bank: Identity, endpoint: str = "",
                 entropy: Callable[[int], bytes] = os.urandom):
        self.ledger = ledger
        self.bank = bank
        self.endpoint = endpoint
        self.entropy = entropy
        self._cheques: dict[str, _ChequeState] = {}
        self._chains: dict[str, _ChainState] = {}
        self._next_cheque = 1
        self._next_chain = 1
        ledger.register_applier("instr", self._apply)

    # -- journal appliers ----------------------------------------------

    def _apply(self, name: str, a: dict) -> None:
        if name == "cheque_issue":
            cheque = GridCheque.from_wire(a["cheque"])
            self._cheques[cheque.cheque_id] = _ChequeState(cheque)
            self._next_cheque = max(self._next_cheque, int(cheque.cheque_id.split("-")[1]) + 1)
        elif name == "cheque_redeem":
            self._cheques[a["cheque_id"]].redeemed = a["amount_milli"]
        elif name == "cheque_expire":
            self._cheques[a["cheque_id"]].released = True
        elif name == "chain_issue":
            c = HashChainCommitment.from_wire(a["commitment"])
            self._chains[c.chain_id] = _ChainState(c)
            self._next_chain = max(self._next_chain, int(c.chain_id.split("-")[1]) + 1)
        elif name == "chain_redeem":
            st = self._chains[a["chain_id"]]
            st.highest = a["index"]
            st.closed = st.highest == st.commitment.length
        elif name == "chain_expire":
            self._chains[a["chain_id"]].closed = True
        else:
            raise BadParameters(f"unknown instrument entry {name!r}")

    # -- cheques ---------------------------------------------------------

    def issue_cheque(self, drawer: str, payee_subject: str, amount_limit: Money, ttl) -> GridCheque:
        if not payee_subject:
            raise BadParameters("cheque needs a payee")
        lifetime = _ttl(ttl)
        with self.ledger.atomic():
            cheque_id = f"CHQ-{self._next_cheque:08d}"
            if not amount_limit.is_positive():
                raise NonPositiveAmount("cheque limit must be positive")
            lock_id = self.ledger.lock_funds(drawer, amount_limit, purpose=f"cheque:{cheque_id}")
            now = self.ledger.clock.now()
            cheque = GridCheque(cheque_id, drawer, payee_subject, self.endpoint, amount_limit,
                                lock_id, now, now + lifetime)
            signed = sign_body(self.bank, cheque.body())
            self.ledger.commit("instr.cheque_issue", {"cheque": signed})
            return GridCheque.from_wire(signed)

    def _known_cheque(self, cheque: GridCheque) -> _ChequeState | None:
        st = self._cheques.get(cheque.cheque_id)
        return st if st is not None and st.cheque == cheque else None

    def verify_cheque(self, cheque: GridCheque, presenting_subject: str,
                      now: datetime | None = None) -> Verdict:
        now = utc(now) if now is not None else self.ledger.clock.now()
        with self.ledger.atomic():
            if not cheque.signature_valid(self.bank.public_key, self.bank.subject):
                return Verdict.BAD_SIGNATURE
            st = self._known_cheque(cheque)
            if st is None:
                return Verdict.BAD_SIGNATURE
            if presenting_subject != cheque.payee_subject:
                return Verdict.WRONG_PAYEE
            if st.redeemed is not None:
                return Verdict.ALREADY_REDEEMED
            if now >= cheque.expires_at or st.released:
                return Verdict.EXPIRED
            return Verdict.VALID

    def redeem_cheque(self, cheque: GridCheque, claimed: Money, rur_blob: bytes,
                      presenter_subject: str) -> int:
        with self.ledger.atomic():
            self.verify_cheque(cheque, presenter_subject).raise_unless_valid()
            if claimed.amount_milli <= 0:
                raise NonPositiveAmount("claim must be positive")
            if claimed > cheque.amount_limit:
                raise ExceedsLimit(f"claim {claimed} exceeds cheque limit {cheque.amount_limit}")
            payee = self._payee_account(cheque.payee_subject)
            txn = self.ledger.transfer_from_locked(cheque.lock_id, payee, claimed, rur_blob)
            if self.ledger.has_lock(cheque.lock_id):
                self.ledger.release_lock(cheque.lock_id)
            self.ledger.commit("instr.cheque_redeem", {"cheque_id": cheque.cheque_id,
                                                       "amount_milli": claimed.amount_milli,
                                                       "transaction_id": txn})
            return txn

    def _payee_account(self, subject: str) -> str:
        try:
            return self.ledger.account_for_subject(subject)
        except NoSuchAccount:
            raise PayeeHasNoAccount(f"payee {subject!r} has no open account") from None

    # -- hash chains -------------------------------------------------------

    def issue_hash_chain(self, drawer: str, payee_subject: str, n_links: int, link_value: Money,
                         ttl) -> tuple[HashChainCommitment, list[bytes]]:
        """Lock the whole chain's value and return the commitment plus the
        secret chain ``[w_0, ..., w_N]`` (for the drawer only)."""
        if not isinstance(n_links, int) or n_links < 1:
            raise BadParameters("chain length must be at least 1")
        if not link_value.is_positive():
            raise BadParameters("link value must be positive")
        if not payee_subject:
            raise BadParameters("hash chain needs a payee")
        lifetime = _ttl(ttl)
        with self.ledger.atomic():
            chain_id = f"GHC-{self._next_chain:08d}"
            lock_id = self.ledger.lock_funds(drawer, link_value * n_links, purpose=f"chain:{chain_id}")
            chain = make_hash_chain(n_links, self.entropy(PREIMAGE_BYTES))
            now = self.ledger.clock.now()
            c = HashChainCommitment(chain_id, drawer, payee_subject, self.endpoint, chain[0],
                                    n_links, link_value, lock_id, now, now + lifetime)
            signed = sign_body(self.bank, c.body())
            self.ledger.commit("instr.chain_issue", {"commitment": signed})
            return HashChainCommitment.from_wire(signed), chain

    def _known_chain(self, commitment: HashChainCommitment) -> _ChainState:
        if not commitment.signature_valid(self.bank.public_key, self.bank.subject):
            raise BadSignature("commitment signature does not verify")
        st = self._chains.get(commitment.chain_id)
        if st is None or st.commitment != commitment:
            raise BadSignature(f"commitment {commitment.chain_id!r} was not issued here")
        return st

    def verify_payword(self, commitment: HashChainCommitment, payword: PayWord) -> Verdict:
        with self.ledger.atomic():
            st = self._known_chain(commitment)
            if st.closed and not self.ledger.has_lock(commitment.lock_id) and st.highest < commitment.length:
                return Verdict.EXPIRED
            return verify_payword(commitment, payword, st.highest, self.ledger.clock.now())

    def redeem_hash_chain(self, commitment: HashChainCommitment, payword: PayWord, rur_blob: bytes,
                          presenter_subject: str) -> int:
        with self.ledger.atomic():
            st = self._known_chain(commitment)
            if presenter_subject != commitment.payee_subject:
                raise WrongPayee(f"{presenter_subject!r} is not the payee of {commitment.chain_id}")
            self.verify_payword(commitment, payword).raise_unless_valid()
            payee = self._payee_account(commitment.payee_subject)
            delta = commitment.link_value * (payword.index - st.highest)
            txn = self.ledger.transfer_from_locked(commitment.lock_id, payee, delta, rur_blob)
            self.ledger.commit("instr.chain_redeem", {"chain_id": commitment.chain_id,
                                                      "index": payword.index, "transaction_id": txn})
            return txn

    # -- expiry ---------------------------------------------------------------

    def sweep_expired(self, now: datetime | None = None) -> list[str]:
        """Release the locks behind expired, unspent instruments."""
        released = []
        with self.ledger.atomic():
            now = utc(now) if now is not None else self.ledger.clock.now()
            for cid, st in self._cheques.items():
                if st.redeemed is None and not st.released and now >= st.cheque.expires_at:
                    if self.ledger.has_lock(st.cheque.lock_id):
                        self.ledger.release_lock(st.cheque.lock_id)
                    self.ledger.commit("instr.cheque_expire", {"cheque_id": cid})
                    released.append(cid)
            for cid, st in self._chains.items():
                if not st.closed and now >= st.commitment.expires_at:
                    if self.ledger.has_lock(st.commitment.lock_id):
                        self.ledger.release_lock(st.commitment.lock_id)
                    self.ledger.commit("instr.chain_expire", {"chain_id": cid})
                    released.append(cid)
        return released

    # -- direct transfer ------------------------------------------------------

    def direct_transfer_payment(self, drawer: str, recipient: str, amount: Money,
                                confirmation_endpoint: str | None,
                                deliver: Callable[[str, dict], object] | None = None) -> dict:
        """Transfer now and send a bank-signed confirmation to the payee.

        The transfer commits even if the confirmation cannot be delivered; in
        that case UnreachableEndpoint is raised carrying the confirmation.
        """
        with self.ledger.atomic():
            txn = self.ledger.transfer(drawer, recipient, amount)
            ts = format_ts(self.ledger.clock.now())
        confirmation = sign_body(self.bank, {
            "type": "TransferConfirmation",
            "transaction_id": txn,
            "amount": amount.to_wire(),
            "drawer_account_id": drawer,
            "recipient_account_id": recipient,
            "timestamp": ts,
        })
        if confirmation_endpoint and deliver is not None:
            try:
                deliver(confirmation_endpoint, confirmation)
            except Exception as exc:
                raise UnreachableEndpoint(
                    f"transfer {txn} committed; confirmation to {confirmation_endpoint} failed: {exc}",
                    transaction_id=txn, confirmation=confirmation) from exc
        return confirmation

    # -- queries ---------------------------------------------------------------

    def cheque_status(self, cheque_id: str) -> dict:
        with self.ledger.atomic():
            st = self._cheques.get(cheque_id)
            if st is None:
                raise NoSuchInstrument(f"no cheque {cheque_id!r}")
            c = st.cheque
            locked = self.ledger.get_lock(c.lock_id).remaining if self.ledger.has_lock(c.lock_id) \
                else Money.zero(c.amount_limit.currency)
            state = "Redeemed" if st.redeemed is not None else ("Expired" if st.released else "Unredeemed")
            return {"instrument_id": cheque_id, "kind": "cheque", "state": state,
                    "drawer_account_id": c.drawer_account_id,
                    "paid": Money(st.redeemed or 0, c.amount_limit.currency).to_wire(),
                    "locked": locked.to_wire(), "limit": c.amount_limit.to_wire()}

    def chain_status(self, chain_id: str) -> dict:
        with self.ledger.atomic():
            st = self._chains.get(chain_id)
            if st is None:
                raise NoSuchInstrument(f"no hash chain {chain_id!r}")
            c = st.commitment
            locked = self.ledger.get_lock(c.lock_id).remaining if self.ledger.has_lock(c.lock_id) \
                else Money.zero(c.link_value.currency)
            if st.highest == c.length:
                state = "Exhausted"
            elif st.closed:
                state = "Expired"
            else:
                state = "Active"
            return {"instrument_id": chain_id, "kind": "chain", "state": state,
                    "drawer_account_id": c.drawer_account_id,
                    "highest_redeemed_index": st.highest,
                    "paid": (c.link_value * st.highest).to_wire(),
                    "locked": locked.to_wire(), "limit": c.capacity.to_wire()}

    def instrument_status(self, instrument_id: str) -> dict:
        if instrument_id.startswith("GHC-"):
            return self.chain_status(instrument_id)
        return self.cheque_status(instrument_id)

    def snapshot(self) -> dict:
        with self.ledger.atomic():
            return {
                "cheques": {k: {"redeemed": v.redeemed, "released": v.released,
                                "cheque": v.cheque.body()} for k, v in sorted(self._cheques.items())},
                "chains": {k: {"highest": v.highest, "closed": v.closed,
                               "commitment": v.commitment.body()} for k, v in sorted(self._chains.items())},
            }
