"""The bank service: session handshake, authorization, request dispatch.

Session protocol (every message is one frame)::

    client -> {"type": "hello"}
    bank   -> {"type": "challenge", "nonce": b64, "bank": subject}
    client -> {"type": "auth", "envelope": sign({"challenge": nonce, "subject": s})}
    bank   -> {"type": "welcome", "role": ...}  or  {"type": "refused", ...} + close
    client -> {"type": "request", "envelope": sign({"request_id", "op", "params"})}
    bank   -> {"type": "response", "request_id", "ok", "result" | "error"}

Request ids must strictly increase within a session. A subject that is
neither an administrator nor an open account holder is refused before any
request is read.
"""

from __future__ import annotations

import hashlib
import logging
import os
import secrets
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Callable

from jsonschema import Draft202012Validator

from .clock import format_ts, parse_ts
from .errors import (
    BadParameters,
    BadSignature,
    ConnectionRefused,
    Forbidden,
    GridBankError,
    NoSuchAccount,
    SchemaViolation,
    UnknownOp,
)
from .instruments import GridCheque, HashChainCommitment, InstrumentBook, PayWord
from .journal import Journal
from .ledger import Ledger
from .money import Money
from .pricing import ResourceDescription, estimate_price, history_from_transfers
from .security import (
    Identity,
    KeyRegistry,
    Role,
    SignedEnvelope,
    authorize_connection,
    b64d,
    b64e,
    canonical_encode,
    load_admin_table,
    new_keypair,
    sign,
    verify_envelope,
)
from .wire import (
    LocalNetwork,
    SignedClient,
    error_response,
    ok_response,
    parse_request,
    raise_for_response,
)

log = logging.getLogger(__name__)

CHECK_LOCK_PREFIX = "check:"

_MONEY = {
    "type": "object",
    "properties": {"amount_milli": {"type": "integer"},
                   "currency": {"type": "string", "minLength": 1, "maxLength": 10}},
    "required": ["amount_milli", "currency"],
    "additionalProperties": False,
}
_ACCOUNT_ID = {"type": "string", "pattern": r"^\d{2}-\d{4}-\d{8}$"}
_TS = {"type": "string", "pattern": r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}Z$"}
_SIGNED = {
    "type": "object",
    "properties": {"body": {"type": "object"}, "signer": {"type": "string"},
                   "signature": {"type": "string"}},
    "required": ["body", "signer", "signature"],
    "additionalProperties": False,
}
_B64 = {"type": "string"}
_PAYWORD = {
    "type": "object",
    "properties": {"chain_id": {"type": "string"}, "index": {"type": "integer"},
                   "preimage": {"type": "string"}},
    "required": ["chain_id", "index", "preimage"],
    "additionalProperties": False,
}
_POS_INT = {"type": "integer", "minimum": 1}
_BATCH_ITEM = {
    "oneOf": [
        {"type": "object",
         "properties": {"kind": {"const": "cheque"}, "cheque": _SIGNED, "amount": _MONEY, "rur": _B64},
         "required": ["kind", "cheque", "amount", "rur"], "additionalProperties": False},
        {"type": "object",
         "properties": {"kind": {"const": "chain"}, "commitment": _SIGNED, "payword": _PAYWORD,
                        "rur": _B64},
         "required": ["kind", "commitment", "payword", "rur"], "additionalProperties": False},
    ]
}
_REQUEST = Draft202012Validator({
    "type": "object",
    "properties": {"request_id": _POS_INT, "op": {"type": "string"}, "params": {"type": "object"}},
    "required": ["request_id", "op", "params"],
    "additionalProperties": False,
})


@dataclass(frozen=True)
class _Op:
    name: str
    handler: Callable
    validator: Draft202012Validator
    admin_only: bool
    mutating: bool


OPS: dict[str, _Op] = {}


def bank_op(name: str, properties: dict | None = None, required=(), *, admin: bool = False,
            mutating: bool = True):
    schema = {"type": "object", "properties": properties or {}, "required": list(required),
              "additionalProperties": False}
    validator = Draft202012Validator(schema)

    def deco(fn):
        OPS[name] = _Op(name, fn, validator, admin, mutating)
        return fn
    return deco


class Bank:
    def __init__(self, identity: Identity, registry: KeyRegistry, admins=frozenset(), clock=None,
                 journal: Journal | None = None, endpoint: str = "", network=None,
                 entropy: Callable[[int], bytes] = os.urandom):
        self.identity = identity
        self.registry = registry
        self.admins = frozenset(admins)
        self.endpoint = endpoint
        self.network = network if network is not None else LocalNetwork()
        self.ledger = Ledger(clock=clock, journal=journal)
        self.book = InstrumentBook(self.ledger, identity, endpoint, entropy)
        self.refused_connections = 0
        self.executed_requests = 0
        if identity.subject not in registry:
            registry.register(identity.subject, identity.public_key)
        self.ledger.replay()

    @property
    def clock(self):
        return self.ledger.clock

    @classmethod
    def open(cls, journal_path, keys_path, admins_path, bank_key_path=None,
             bank_subject: str = "CN=GridBank", fsync: bool = False, **kwargs) -> "Bank":
        """Start from files: replays the journal, loads keys and the admin table."""
        registry = KeyRegistry.load(keys_path)
        admins = load_admin_table(admins_path)
        if bank_key_path is None:
            bank_key_path = Path(journal_path).with_name("bank_key.json")
        bank_key_path = Path(bank_key_path)
        if bank_key_path.exists():
            identity = Identity.load(bank_key_path)
        else:
            identity = new_keypair(bank_subject)
            bank_key_path.parent.mkdir(parents=True, exist_ok=True)
            identity.save(bank_key_path)
            os.chmod(bank_key_path, 0o600)
        Path(journal_path).parent.mkdir(parents=True, exist_ok=True)
        return cls(identity, registry, admins, journal=Journal(journal_path, fsync=fsync), **kwargs)

    def close(self) -> None:
        if self.ledger.journal is not None:
            self.ledger.journal.close()

    def session(self) -> "BankSession":
        return BankSession(self)

    def state_digest(self) -> str:
        state = {"ledger": self.ledger.snapshot(), "instruments": self.book.snapshot()}
        return hashlib.sha256(canonical_encode(state)).hexdigest()

    def authorize(self, subject: str) -> Role:
        return authorize_connection(subject, self.admins, self.ledger.open_subjects())

    # -- dispatch -------------------------------------------------------------

    def dispatch(self, subject: str, message) -> dict:
        rid = message.get("request_id") if isinstance(message, dict) else None
        try:
            errors = sorted(_REQUEST.iter_errors(message), key=str)
            if errors:
                raise SchemaViolation(errors[0].message)
            spec = OPS.get(message["op"])
            if spec is None:
                raise UnknownOp(f"unknown operation {message['op']!r}")
            errors = sorted(spec.validator.iter_errors(message["params"]), key=str)
            if errors:
                raise SchemaViolation(f"{spec.name}: {errors[0].message}")
            role = self.authorize(subject)
            if role is Role.REFUSED:
                raise ConnectionRefused(f"{subject!r} is no longer authorized")
            if spec.admin_only and role is not Role.ADMIN:
                raise Forbidden(f"{spec.name} requires administrator privilege")
            with self.ledger.atomic():
                if spec.mutating:
                    self.book.sweep_expired()
                result = spec.handler(self, subject, role, message["params"])
                self.executed_requests += 1
            return ok_response(rid, result)
        except GridBankError as err:
            return error_response(rid, err)
        except Exception as exc:  # never leak a traceback over the wire
            log.exception("internal error in %r", message)
            return error_response(rid, GridBankError(f"internal error: {type(exc).__name__}"))

    def _owned(self, subject: str, role: Role, account_id: str):
        try:
            acct = self.ledger.account_record(account_id)
        except NoSuchAccount:
            if role is Role.ADMIN:
                raise
            raise Forbidden(f"{subject!r} does not own {account_id}") from None
        if role is not Role.ADMIN and acct.certificate_name != subject:
            raise Forbidden(f"{subject!r} does not own {account_id}")
        return acct

    def deliver_confirmation(self, endpoint: str, confirmation: dict) -> None:
        conn = self.network.connect(endpoint)
        try:
            SignedClient(self.identity, conn).call("payment_confirmation", confirmation=confirmation)
        finally:
            conn.close()

    # -- account operations -----------------------------------------------

    @bank_op("whoami", mutating=False)
    def _whoami(self, subject, role, p):
        return {"subject": subject, "role": role.value, "bank": self.identity.subject,
                "bank_public_key": b64e(self.identity.public_key)}

    @bank_op("create_account", {
        "certificate_name": {"type": "string", "minLength": 1, "maxLength": 150},
        "organization_name": {"type": ["string", "null"], "maxLength": 30},
        "currency": {"type": "string", "minLength": 1, "maxLength": 10},
        "public_key": _B64,
    }, ["certificate_name"], admin=True)
    def _create_account(self, subject, role, p):
        key = b64d(p["public_key"]) if "public_key" in p else None
        account_id = self.ledger.create_account(p["certificate_name"], p.get("organization_name"),
                                                p.get("currency", "G$"))
        if key is not None:
            if p["certificate_name"] not in self.registry:
                self.registry.register(p["certificate_name"], key)
            elif self.registry.get(p["certificate_name"]) != key:
                log.warning("key for %s differs from registry; registry kept", p["certificate_name"])
        return {"account_id": account_id}

    @bank_op("get_account", {"account_id": _ACCOUNT_ID}, ["account_id"], mutating=False)
    def _get_account(self, subject, role, p):
        self._owned(subject, role, p["account_id"])
        return self.ledger.get_account(p["account_id"]).to_record()

    @bank_op("my_account", mutating=False)
    def _my_account(self, subject, role, p):
        return self.ledger.get_account(self.ledger.account_for_subject(subject)).to_record()

    @bank_op("update_account", {"account": {
        "type": "object",
        "properties": {"AccountID": _ACCOUNT_ID, "CertificateName": {"type": "string"},
                       "OrganizationName": {"type": ["string", "null"]}},
        "required": ["AccountID", "CertificateName"],
    }}, ["account"])
    def _update_account(self, subject, role, p):
        rec = p["account"]
        self._owned(subject, role, rec["AccountID"])
        self.ledger.update_account({"account_id": rec["AccountID"],
                                    "certificate_name": rec["CertificateName"],
                                    "organization_name": rec.get("OrganizationName")})
        return {"confirmed": True}

    @bank_op("statement", {"account_id": _ACCOUNT_ID, "start": _TS, "end": _TS},
             ["account_id", "start", "end"], mutating=False)
    def _statement(self, subject, role, p):
        self._owned(subject, role, p["account_id"])
        s = self.ledger.statement(p["account_id"], parse_ts(p["start"]), parse_ts(p["end"]))
        return {"account": s.account.to_record(),
                "transactions": [t.to_record() for t in s.transactions],
                "transfers": [t.to_record() for t in s.transfers]}

    @bank_op("lock_funds", {"account_id": _ACCOUNT_ID, "amount": _MONEY,
                            "purpose": {"type": "string", "maxLength": 100}}, ["account_id", "amount"])
    def _lock_funds(self, subject, role, p):
        self._owned(subject, role, p["account_id"])
        lock_id = self.ledger.lock_funds(p["account_id"], Money.from_wire(p["amount"]),
                                         CHECK_LOCK_PREFIX + p.get("purpose", ""))
        return {"lock_id": lock_id}

    @bank_op("release_lock", {"lock_id": _POS_INT}, ["lock_id"])
    def _release_lock(self, subject, role, p):
        lock = self.ledger.get_lock(p["lock_id"])
        self._owned(subject, role, lock.account_id)
        if not lock.purpose.startswith(CHECK_LOCK_PREFIX):
            raise Forbidden("locks backing payment instruments are released by redemption or expiry")
        self.ledger.release_lock(lock.lock_id)
        return {"released": lock.remaining.to_wire()}

    @bank_op("direct_transfer", {"drawer": _ACCOUNT_ID, "recipient": _ACCOUNT_ID, "amount": _MONEY,
                                 "confirmation_endpoint": {"type": "string"}},
             ["drawer", "recipient", "amount"])
    def _direct_transfer(self, subject, role, p):
        self._owned(subject, role, p["drawer"])
        return self.book.direct_transfer_payment(
            p["drawer"], p["recipient"], Money.from_wire(p["amount"]),
            p.get("confirmation_endpoint"), self.deliver_confirmation)

    # -- instruments ----------------------------------------------------------

    @bank_op("request_cheque", {"account_id": _ACCOUNT_ID, "payee_subject": {"type": "string", "minLength": 1},
                                "amount": _MONEY, "ttl_seconds": _POS_INT},
             ["account_id", "payee_subject", "amount", "ttl_seconds"])
    def _request_cheque(self, subject, role, p):
        self._owned(subject, role, p["account_id"])
        cheque = self.book.issue_cheque(p["account_id"], p["payee_subject"],
                                        Money.from_wire(p["amount"]), p["ttl_seconds"])
        return {"cheque": cheque.to_wire()}

    @bank_op("redeem_cheque", {"cheque": _SIGNED, "amount": _MONEY, "rur": _B64},
             ["cheque", "amount", "rur"])
    def _redeem_cheque(self, subject, role, p):
        txn = self.book.redeem_cheque(GridCheque.from_wire(p["cheque"]), Money.from_wire(p["amount"]),
                                      b64d(p["rur"]), subject)
        return {"transaction_id": txn}

    @bank_op("request_hash_chain", {"account_id": _ACCOUNT_ID,
                                    "payee_subject": {"type": "string", "minLength": 1},
                                    "n_links": _POS_INT, "link_value": _MONEY, "ttl_seconds": _POS_INT},
             ["account_id", "payee_subject", "n_links", "link_value", "ttl_seconds"])
    def _request_hash_chain(self, subject, role, p):
        self._owned(subject, role, p["account_id"])
        commitment, chain = self.book.issue_hash_chain(
            p["account_id"], p["payee_subject"], p["n_links"], Money.from_wire(p["link_value"]),
            p["ttl_seconds"])
        return {"commitment": commitment.to_wire(), "chain": [b64e(w) for w in chain]}

    @bank_op("redeem_hash_chain", {"commitment": _SIGNED, "payword": _PAYWORD, "rur": _B64},
             ["commitment", "payword", "rur"])
    def _redeem_hash_chain(self, subject, role, p):
        txn = self.book.redeem_hash_chain(HashChainCommitment.from_wire(p["commitment"]),
                                          PayWord.from_wire(p["payword"]), b64d(p["rur"]), subject)
        return {"transaction_id": txn}

    @bank_op("redeem_batch", {"items": {"type": "array", "items": _BATCH_ITEM, "maxItems": 1000}},
             ["items"])
    def _redeem_batch(self, subject, role, p):
        results = []
        for item in p["items"]:
            try:
                if item["kind"] == "cheque":
                    txn = self.book.redeem_cheque(GridCheque.from_wire(item["cheque"]),
                                                  Money.from_wire(item["amount"]), b64d(item["rur"]), subject)
                else:
                    txn = self.book.redeem_hash_chain(HashChainCommitment.from_wire(item["commitment"]),
                                                      PayWord.from_wire(item["payword"]),
                                                      b64d(item["rur"]), subject)
                results.append({"ok": True, "transaction_id": txn})
            except GridBankError as err:
                results.append({"ok": False, "error": err.to_wire()})
        return {"results": results}

    @bank_op("instrument_status", {"instrument_id": {"type": "string"}}, ["instrument_id"],
             mutating=False)
    def _instrument_status(self, subject, role, p):
        status = self.book.instrument_status(p["instrument_id"])
        owner = self.ledger.account_record(status["drawer_account_id"]).certificate_name
        if role is not Role.ADMIN and subject != owner:
            raise Forbidden("only the drawer may query an instrument")
        return status

    @bank_op("estimate_price", {"description": {"type": "object"}, "k": _POS_INT}, ["description"],
             mutating=False)
    def _estimate_price(self, subject, role, p):
        desc = ResourceDescription.from_wire(p["description"])
        ledger = self.ledger
        cancelled = [t.transaction_id for t in ledger.transfers() if ledger.is_cancelled(t.transaction_id)]
        history = history_from_transfers(ledger.transfers(), cancelled)
        return estimate_price(history, desc, p.get("k", 5)).to_wire()

    # -- administration ---------------------------------------------------------

    @bank_op("deposit", {"account_id": _ACCOUNT_ID, "amount": _MONEY}, ["account_id", "amount"], admin=True)
    def _deposit(self, subject, role, p):
        return {"transaction_id": self.ledger.deposit(p["account_id"], Money.from_wire(p["amount"]),
                                                      admin=role is Role.ADMIN)}

    @bank_op("withdraw", {"account_id": _ACCOUNT_ID, "amount": _MONEY}, ["account_id", "amount"], admin=True)
    def _withdraw(self, subject, role, p):
        return {"transaction_id": self.ledger.withdraw(p["account_id"], Money.from_wire(p["amount"]),
                                                       admin=role is Role.ADMIN)}

    @bank_op("set_credit_limit", {"account_id": _ACCOUNT_ID, "limit": _MONEY}, ["account_id", "limit"],
             admin=True)
    def _set_credit_limit(self, subject, role, p):
        self.ledger.set_credit_limit(p["account_id"], Money.from_wire(p["limit"]), admin=role is Role.ADMIN)
        return {"confirmed": True}

    @bank_op("cancel_transfer", {"transaction_id": _POS_INT}, ["transaction_id"], admin=True)
    def _cancel_transfer(self, subject, role, p):
        return {"transaction_id": self.ledger.cancel_transfer(p["transaction_id"], admin=role is Role.ADMIN)}

    @bank_op("close_account", {"account_id": _ACCOUNT_ID, "destination_account_id": _ACCOUNT_ID},
             ["account_id", "destination_account_id"], admin=True)
    def _close_account(self, subject, role, p):
        self.ledger.close_account(p["account_id"], p["destination_account_id"], admin=role is Role.ADMIN)
        return {"confirmed": True}

    @bank_op("sweep_expired", admin=True)
    def _sweep_expired(self, subject, role, p):
        return {"released": self.book.sweep_expired()}


class BankSession:
    def __init__(self, bank: Bank):
        self.bank = bank
        self.closed = False
        self.subject: str | None = None
        self.role: Role | None = None
        self._nonce: str | None = None
        self._last_request_id = 0

    def _refuse(self, err: GridBankError) -> dict:
        self.closed = True
        self.bank.refused_connections += 1
        return {"type": "refused", "error": err.to_wire()}

    def handle(self, message) -> dict:
        if self.closed:
            return {"type": "refused", "error": ConnectionRefused("session closed").to_wire()}
        if not isinstance(message, dict):
            return self._refuse(SchemaViolation("malformed frame"))
        kind = message.get("type")
        if self.subject is None:
            if kind == "hello" and self._nonce is None:
                self._nonce = b64e(secrets.token_bytes(16))
                return {"type": "challenge", "nonce": self._nonce, "bank": self.bank.identity.subject}
            if kind == "auth" and self._nonce is not None:
                return self._authenticate(message)
            return self._refuse(ConnectionRefused("handshake required before requests"))
        if kind != "request":
            return error_response(None, SchemaViolation("expected a request frame"))
        try:
            env = parse_request(message)
            if env.signer_subject != self.subject:
                raise BadSignature("request signed by a different subject than the session")
            verify_envelope(self.bank.registry, env)
            payload = env.message()
        except GridBankError as err:
            return error_response(None, err)
        rid = payload.get("request_id") if isinstance(payload, dict) else None
        if not isinstance(rid, int) or rid <= self._last_request_id:
            return error_response(rid, SchemaViolation("request ids must strictly increase"))
        self._last_request_id = rid
        return self.bank.dispatch(self.subject, payload)

    def _authenticate(self, message) -> dict:
        try:
            if set(message) != {"type", "envelope"}:
                raise SchemaViolation("malformed auth frame")
            env = SignedEnvelope.from_wire(message["envelope"])
            subject = verify_envelope(self.bank.registry, env)
            if env.message() != {"challenge": self._nonce, "subject": subject}:
                raise BadSignature("auth does not answer this session's challenge")
        except GridBankError as err:
            return self._refuse(err)
        role = self.bank.authorize(subject)
        if role is Role.REFUSED:
            return self._refuse(ConnectionRefused(f"{subject!r} has no account or admin privilege"))
        self.subject, self.role = subject, role
        return {"type": "welcome", "subject": subject, "role": role.value}


class BankClient(SignedClient):
    """Client side of a bank session, performing the handshake on connect."""

    def __init__(self, identity: Identity, connection):
        super().__init__(identity, connection)
        challenge = connection.request({"type": "hello"})
        if challenge.get("type") != "challenge":
            raise_for_response(challenge)
            raise SchemaViolation("bank did not send a challenge")
        self.bank_subject = challenge["bank"]
        env = sign(identity, {"challenge": challenge["nonce"], "subject": identity.subject})
        welcome = connection.request({"type": "auth", "envelope": env.to_wire()})
        if welcome.get("type") != "welcome":
            connection.close()
            raise_for_response(welcome)
            raise ConnectionRefused("bank refused the connection")
        self.role = Role(welcome["role"])

    @classmethod
    def connect(cls, network, endpoint: str, identity: Identity) -> "BankClient":
        return cls(identity, network.connect(endpoint))

    # convenience wrappers -------------------------------------------------------

    def get_account(self, account_id: str) -> dict:
        return self.call("get_account", account_id=account_id)

    def statement(self, account_id: str, start: datetime, end: datetime) -> dict:
        return self.call("statement", account_id=account_id, start=format_ts(start), end=format_ts(end))

    def request_cheque(self, account_id: str, payee_subject: str, amount: Money, ttl_seconds: int) -> GridCheque:
        r = self.call("request_cheque", account_id=account_id, payee_subject=payee_subject,
                      amount=amount.to_wire(), ttl_seconds=ttl_seconds)
        return GridCheque.from_wire(r["cheque"])

    def request_hash_chain(self, account_id: str, payee_subject: str, n_links: int, link_value: Money,
                           ttl_seconds: int) -> tuple[HashChainCommitment, list[bytes]]:
        r = self.call("request_hash_chain", account_id=account_id, payee_subject=payee_subject,
                      n_links=n_links, link_value=link_value.to_wire(), ttl_seconds=ttl_seconds)
        return HashChainCommitment.from_wire(r["commitment"]), [b64d(w) for w in r["chain"]]

    def direct_transfer(self, drawer: str, recipient: str, amount: Money,
                        confirmation_endpoint: str | None = None) -> dict:
        params = {"drawer": drawer, "recipient": recipient, "amount": amount.to_wire()}
        if confirmation_endpoint:
            params["confirmation_endpoint"] = confirmation_endpoint
        return self.call("direct_transfer", **params)

    def instrument_status(self, instrument_id: str) -> dict:
        return self.call("instrument_status", instrument_id=instrument_id)


def parse_money_arg(text: str, currency: str = "G$") -> Money:
    try:
        return Money.of(text, currency)
    except BadParameters:
        raise BadParameters(f"bad amount {text!r}") from None
