from __future__ import annotations

import os
from dataclasses import replace
from datetime import timedelta

import pytest

from gridbank import errors
from gridbank.instruments import (
    GridCheque,
    HashChainCommitment,
    PayWord,
    Verdict,
    make_hash_chain,
    verify_payword,
)
from gridbank.money import Money

from oracles import sha256_iter

G = Money.of
GSP = "CN=GSP-A,O=Grid"


@pytest.fixture
def accounts(ledger):
    drawer = ledger.create_account("CN=Alice")
    ledger.deposit(drawer, G(100), admin=True)
    payee = ledger.create_account(GSP)
    return drawer, payee


class TestCheques:
    def test_issue_locks_funds(self, ledger, book, accounts, bank_identity):
        drawer, _ = accounts
        cheque = book.issue_cheque(drawer, GSP, G(60), ttl=3600)
        acct = ledger.get_account(drawer)
        assert acct.available_balance == G(40) and acct.locked_balance == G(60)
        assert cheque.signature_valid(bank_identity.public_key, bank_identity.subject)
        assert book.cheque_status(cheque.cheque_id)["state"] == "Unredeemed"

    def test_insufficient_funds_creates_no_lock(self, ledger, book):
        poor = ledger.create_account("CN=Poor")
        ledger.deposit(poor, G(10), admin=True)
        with pytest.raises(errors.InsufficientFunds):
            book.issue_cheque(poor, GSP, G(60), ttl=3600)
        assert ledger.locks(poor) == []

    def test_zero_cheque(self, book, accounts):
        with pytest.raises(errors.NonPositiveAmount):
            book.issue_cheque(accounts[0], GSP, G(0), ttl=3600)

    def test_verify(self, book, accounts, clock):
        cheque = book.issue_cheque(accounts[0], GSP, G(60), ttl=3600)
        assert book.verify_cheque(cheque, GSP) is Verdict.VALID
        assert book.verify_cheque(cheque, "CN=Other") is Verdict.WRONG_PAYEE
        assert book.verify_cheque(cheque, GSP, clock.now() + timedelta(hours=2)) is Verdict.EXPIRED

    def test_redeem_partial(self, ledger, book, accounts):
        drawer, payee = accounts
        cheque = book.issue_cheque(drawer, GSP, G(60), ttl=3600)
        txn = book.redeem_cheque(cheque, G(45), b"rur-bytes", GSP)
        assert ledger.get_account(payee).available_balance == G(45)
        d = ledger.get_account(drawer)
        assert d.available_balance == G(55) and d.locked_balance == G(0)
        assert ledger.get_transfer(txn).resource_usage_record == b"rur-bytes"
        with pytest.raises(errors.AlreadyRedeemed):
            book.redeem_cheque(cheque, G(1), b"", GSP)

    def test_exceeds_limit(self, book, accounts):
        cheque = book.issue_cheque(accounts[0], GSP, G(60), ttl=3600)
        with pytest.raises(errors.ExceedsLimit):
            book.redeem_cheque(cheque, G(61), b"", GSP)

    def test_wrong_payee_and_expired(self, book, accounts, clock):
        cheque = book.issue_cheque(accounts[0], GSP, G(60), ttl=3600)
        with pytest.raises(errors.WrongPayee):
            book.redeem_cheque(cheque, G(1), b"", "CN=Alice")
        clock.advance(3600)
        with pytest.raises(errors.Expired):
            book.redeem_cheque(cheque, G(1), b"", GSP)

    def test_payee_without_account(self, book, accounts):
        cheque = book.issue_cheque(accounts[0], "CN=Nobody", G(5), ttl=3600)
        with pytest.raises(errors.PayeeHasNoAccount):
            book.redeem_cheque(cheque, G(1), b"", "CN=Nobody")

    def test_tampered_cheque_rejected(self, book, accounts):
        cheque = book.issue_cheque(accounts[0], GSP, G(10), ttl=3600)
        inflated = replace(cheque, amount_limit=G(100))
        assert book.verify_cheque(inflated, GSP) is Verdict.BAD_SIGNATURE
        wire = cheque.to_wire()
        wire = {**wire, "body": {**wire["body"], "payee_subject": "CN=Mallory"}}
        assert book.verify_cheque(GridCheque.from_wire(wire), "CN=Mallory") is Verdict.BAD_SIGNATURE

    def test_expiry_sweep_releases(self, ledger, book, accounts, clock):
        drawer, _ = accounts
        cheque = book.issue_cheque(drawer, GSP, G(60), ttl=60)
        clock.advance(61)
        assert book.sweep_expired() == [cheque.cheque_id]
        assert ledger.get_account(drawer).available_balance == G(100)
        assert book.cheque_status(cheque.cheque_id)["state"] == "Expired"
        assert book.sweep_expired() == []

    def test_redeemed_plus_released_equals_limit(self, ledger, book, accounts):
        drawer, payee = accounts
        for claim in ("0.001", "12.345", "60"):
            before = ledger.get_account(drawer).available_balance
            cheque = book.issue_cheque(drawer, GSP, G(60), ttl=3600)
            book.redeem_cheque(cheque, G(claim), b"", GSP)
            released = ledger.get_account(drawer).available_balance - (before - G(60))
            assert released + G(claim) == G(60)


class TestHashChains:
    @pytest.mark.parametrize("n", [1, 10, 64])
    def test_chain_definition(self, n):
        chain = make_hash_chain(n, os.urandom(32))
        assert len(chain) == n + 1
        for i in range(n + 1):
            assert sha256_iter(chain[i], i) == chain[0]

    def test_issue_locks_full_value(self, ledger, book, accounts):
        drawer, _ = accounts
        c, chain = book.issue_hash_chain(drawer, GSP, 10, G("0.5"), ttl=3600)
        assert ledger.get_account(drawer).locked_balance == G("5.000")
        assert sha256_iter(chain[1], 1) == c.root
        assert c.capacity == G(5)

    def test_bad_parameters(self, book, accounts):
        with pytest.raises(errors.BadParameters):
            book.issue_hash_chain(accounts[0], GSP, 0, G("0.5"), ttl=3600)

    def test_verify_payword(self, book, accounts):
        c, chain = book.issue_hash_chain(accounts[0], GSP, 10, G("0.5"), ttl=3600)
        assert verify_payword(c, PayWord(c.chain_id, 3, chain[3]), 0) is Verdict.VALID
        assert verify_payword(c, PayWord(c.chain_id, 2, chain[2]), 3) is Verdict.STALE_INDEX
        assert verify_payword(c, PayWord(c.chain_id, 5, os.urandom(32)), 0) is Verdict.BAD_PREIMAGE
        assert verify_payword(c, PayWord(c.chain_id, 11, chain[10]), 0) is Verdict.INDEX_OVERFLOW
        assert verify_payword(c, PayWord(c.chain_id, 3, chain[3]), 0,
                              c.expires_at) is Verdict.EXPIRED

    def test_incremental_redemption(self, ledger, book, accounts, clock):
        drawer, payee = accounts
        c, chain = book.issue_hash_chain(drawer, GSP, 10, G("0.5"), ttl=3600)
        book.redeem_hash_chain(c, PayWord(c.chain_id, 3, chain[3]), b"", GSP)
        assert ledger.get_account(payee).available_balance == G("1.500")
        book.redeem_hash_chain(c, PayWord(c.chain_id, 7, chain[7]), b"", GSP)
        assert ledger.get_account(payee).available_balance == G("3.500")
        with pytest.raises(errors.StaleIndex):
            book.redeem_hash_chain(c, PayWord(c.chain_id, 7, chain[7]), b"", GSP)
        assert ledger.get_account(payee).available_balance == G("3.500")
        clock.advance(3600)
        book.sweep_expired()
        d = ledger.get_account(drawer)
        assert d.available_balance == G("96.500") and d.locked_balance == G(0)
        with pytest.raises(errors.Expired):
            book.redeem_hash_chain(c, PayWord(c.chain_id, 8, chain[8]), b"", GSP)

    def test_wrong_payee(self, book, accounts):
        c, chain = book.issue_hash_chain(accounts[0], GSP, 3, G(1), ttl=3600)
        with pytest.raises(errors.WrongPayee):
            book.redeem_hash_chain(c, PayWord(c.chain_id, 1, chain[1]), b"", "CN=Other")

    def test_forged_commitment(self, book, accounts):
        c, chain = book.issue_hash_chain(accounts[0], GSP, 3, G(1), ttl=3600)
        longer = replace(c, length=30)
        with pytest.raises(errors.BadSignature):
            book.redeem_hash_chain(longer, PayWord(c.chain_id, 1, chain[1]), b"", GSP)

    def test_withheld_preimage_caps_payment(self, ledger, book, accounts):
        drawer, payee = accounts
        c, chain = book.issue_hash_chain(drawer, GSP, 10, G(1), ttl=3600)
        # the payee only ever saw w_1..w_4; guessing deeper links fails
        book.redeem_hash_chain(c, PayWord(c.chain_id, 4, chain[4]), b"", GSP)
        for i in range(5, 11):
            with pytest.raises(errors.BadPreimage):
                book.redeem_hash_chain(c, PayWord(c.chain_id, i, os.urandom(32)), b"", GSP)
        assert ledger.get_account(payee).available_balance == G(4)

    def test_honest_full_payment(self, ledger, book, accounts):
        drawer, payee = accounts
        c, chain = book.issue_hash_chain(drawer, GSP, 10, G("0.25"), ttl=3600)
        for i in range(1, 11):
            book.redeem_hash_chain(c, PayWord(c.chain_id, i, chain[i]), b"", GSP)
        assert ledger.get_account(payee).available_balance == G("2.5")
        assert book.chain_status(c.chain_id)["state"] == "Exhausted"
        assert ledger.get_account(drawer).locked_balance == G(0)

    def test_commitment_wire_roundtrip(self, book, accounts, bank_identity):
        c, _ = book.issue_hash_chain(accounts[0], GSP, 3, G(1), ttl=3600)
        back = HashChainCommitment.from_wire(c.to_wire())
        assert back == c and back.signature_valid(bank_identity.public_key)


class TestDirectTransfer:
    def test_confirmation_delivered(self, ledger, book, accounts, bank_identity):
        drawer, payee = accounts
        inbox = []
        conf = book.direct_transfer_payment(drawer, payee, G(2), "gsp:7000",
                                            lambda ep, msg: inbox.append((ep, msg)))
        assert inbox == [("gsp:7000", conf)]
        assert conf["body"]["amount"] == G(2).to_wire()
        assert ledger.get_account(payee).available_balance == G(2)

    def test_insufficient_funds_sends_nothing(self, ledger, book, accounts):
        _, payee = accounts
        poor = ledger.create_account("CN=Poor")
        inbox = []
        with pytest.raises(errors.InsufficientFunds):
            book.direct_transfer_payment(poor, payee, G(2), "gsp:7000", lambda e, m: inbox.append(m))
        assert inbox == []

    def test_unreachable_endpoint_keeps_transfer(self, ledger, book, accounts):
        drawer, payee = accounts

        def down(endpoint, msg):
            raise ConnectionRefusedError(endpoint)

        with pytest.raises(errors.UnreachableEndpoint) as exc:
            book.direct_transfer_payment(drawer, payee, G(2), "gsp:7000", down)
        assert ledger.get_account(payee).available_balance == G(2)
        assert exc.value.details["transaction_id"] > 0
