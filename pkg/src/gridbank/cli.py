"""Command-line entry points.

Paths default to locations under ``$GRIDBANK_HOME`` (``~/.gridbank`` when
unset)::

    bank/journal.jsonl  bank/keys.tsv  bank/admins.txt  bank/bank_key.json
    identity.json       gsp.json       gsc.json

Every command prints its result as JSON on stdout. Failures print
``error: CODE: message`` on stderr and exit with status 1; bad usage or
configuration exits with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from .bank import Bank, BankClient
from .consumer import JobSpec, PaymentModule
from .errors import ConfigError, CorruptJournal, GridBankError
from .harness import render_report, run_scenario
from .money import Money
from .provider import ProviderConfig, ProviderNode
from .security import Identity, KeyRegistry, b64e, generate_identity
from .wire import FramedServer, TcpNetwork, parse_endpoint

DEFAULT_BANK = "127.0.0.1:5000"
log = logging.getLogger("gridbank")


def gridbank_home() -> Path:
    return Path(os.environ.get("GRIDBANK_HOME") or Path.home() / ".gridbank")


def _emit(result) -> None:
    json.dump(result, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _fail(err: GridBankError) -> int:
    print(f"error: {err.code}: {err.message}", file=sys.stderr)
    return 1


def _load_identity(path: str | Path) -> Identity:
    try:
        ident = Identity.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load identity {path}: {exc}") from None
    if ident.private_key is None:
        raise ConfigError(f"identity {path} holds no private key")
    return ident


def _load_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


def _serve(server: FramedServer) -> None:
    stop = threading.Event()

    def handler(signum, frame):
        stop.set()

    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, handler)
    server.start_background()
    try:
        stop.wait()
    finally:
        server.shutdown()
        server.server_close()


def _listen_address(text: str) -> tuple[str, int]:
    try:
        return parse_endpoint(text)
    except GridBankError as err:
        raise ConfigError(err.message) from None


# -- gridbank-server ------------------------------------------------------------

def server_main(argv=None) -> int:
    home = gridbank_home() / "bank"
    ap = argparse.ArgumentParser(prog="gridbank-server", description="Run the GridBank server.")
    ap.add_argument("--listen", default=DEFAULT_BANK, help="address:port to accept connections on")
    ap.add_argument("--journal", default=str(home / "journal.jsonl"))
    ap.add_argument("--keys", default=str(home / "keys.tsv"), help="subject<TAB>base64 key registry")
    ap.add_argument("--admins", default=str(home / "admins.txt"), help="one administrator subject per line")
    ap.add_argument("--bank-key", default=None, help="bank signing key (created on first start)")
    ap.add_argument("--bank-subject", default="CN=GridBank")
    ap.add_argument("--fsync", action="store_true", help="fsync the journal after every commit")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        address = _listen_address(args.listen)
        bank = Bank.open(args.journal, args.keys, args.admins, args.bank_key, args.bank_subject,
                         fsync=args.fsync, endpoint=args.listen, network=TcpNetwork())
        server = FramedServer(address, bank.session)
    except (ConfigError, CorruptJournal, OSError, ValueError) as exc:
        print(f"gridbank-server: cannot start: {exc}", file=sys.stderr)
        return 2
    log.info("bank %s listening on %s (%d accounts replayed)", bank.identity.subject, server.endpoint,
             len(bank.ledger.accounts()))
    print(f"listening on {server.endpoint}", flush=True)
    try:
        _serve(server)
    finally:
        bank.close()
    return 0


# -- gridbank-admin -------------------------------------------------------------

def _bank_args(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--bank", default=os.environ.get("GRIDBANK_BANK", DEFAULT_BANK), help="bank address:port")
    ap.add_argument("--identity", default=str(gridbank_home() / "identity.json"),
                    help="signing identity file")


def admin_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="gridbank-admin", description="Signed administrator requests.")
    _bank_args(ap)
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("deposit")
    p.add_argument("account_id")
    p.add_argument("amount")
    p = sub.add_parser("withdraw")
    p.add_argument("account_id")
    p.add_argument("amount")
    p = sub.add_parser("credit-limit")
    p.add_argument("account_id")
    p.add_argument("amount")
    p = sub.add_parser("cancel")
    p.add_argument("transaction_id", type=int)
    p = sub.add_parser("close")
    p.add_argument("account_id")
    p.add_argument("destination_account_id")
    p = sub.add_parser("create-account")
    p.add_argument("subject")
    p.add_argument("--org", default=None)
    p.add_argument("--public-key-from", default=None, metavar="IDENTITY_FILE",
                   help="register this identity's public key with the account")
    p = sub.add_parser("keygen", help="create an identity file (no bank contact)")
    p.add_argument("subject")
    p.add_argument("--out", required=True)
    p.add_argument("--register", default=None, metavar="KEYS_TSV", help="append the public key here")
    args = ap.parse_args(argv)

    try:
        if args.command == "keygen":
            registry = KeyRegistry.load(args.register) if args.register else None
            ident = generate_identity(args.subject, registry)
            out = Path(args.out)
            out.parent.mkdir(parents=True, exist_ok=True)
            ident.save(out)
            os.chmod(out, 0o600)
            _emit({"subject": ident.subject, "public_key": b64e(ident.public_key), "file": str(out)})
            return 0
        client = BankClient.connect(TcpNetwork(), args.bank, _load_identity(args.identity))
        try:
            _emit(_admin_call(client, args))
        finally:
            client.close()
    except ConfigError as err:
        print(f"gridbank-admin: {err.message}", file=sys.stderr)
        return 2
    except GridBankError as err:
        return _fail(err)
    return 0


def _admin_call(client: BankClient, args):
    cmd = args.command
    if cmd in ("deposit", "withdraw"):
        return client.call(cmd, account_id=args.account_id, amount=Money.of(args.amount).to_wire())
    if cmd == "credit-limit":
        return client.call("set_credit_limit", account_id=args.account_id, limit=Money.of(args.amount).to_wire())
    if cmd == "cancel":
        return client.call("cancel_transfer", transaction_id=args.transaction_id)
    if cmd == "close":
        return client.call("close_account", account_id=args.account_id,
                           destination_account_id=args.destination_account_id)
    params = {"certificate_name": args.subject}
    if args.org:
        params["organization_name"] = args.org
    if args.public_key_from:
        params["public_key"] = b64e(Identity.load(args.public_key_from).public_key)
    return client.call("create_account", **params)


# -- gridbank-gsp ---------------------------------------------------------------

def gsp_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="gridbank-gsp", description="Run a provider: trade service, "
                                 "charging module and resource meter.")
    ap.add_argument("--config", default=str(gridbank_home() / "gsp.json"))
    ap.add_argument("--flush-interval", type=float, default=60.0,
                    help="seconds between batch redemptions (0 disables)")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = ProviderConfig.load(args.config)
        if not cfg.key_file or not cfg.keys or not cfg.listen or not cfg.bank_endpoint:
            raise ConfigError("provider config needs key_file, keys, listen and bank_endpoint")
        identity = _load_identity(cfg.key_file)
        registry = KeyRegistry.load(cfg.keys)
        if cfg.mapfile is None:
            cfg.mapfile = str(Path(args.config).with_name("grid-mapfile"))
        network = TcpNetwork()
        node = ProviderNode(cfg, identity, registry, cfg.bank_subject,
                            bank_client=lambda: BankClient.connect(network, cfg.bank_endpoint, identity))
        server = FramedServer(_listen_address(cfg.listen), node.session)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"gridbank-gsp: cannot start: {exc}", file=sys.stderr)
        return 2
    except GridBankError as err:
        print(f"gridbank-gsp: cannot start: {err.code}: {err.message}", file=sys.stderr)
        return 2

    stop = threading.Event()
    if args.flush_interval > 0:
        def flusher():
            while not stop.wait(args.flush_interval):
                try:
                    res = node.gbcm.redeem_batch()
                    if res.sent:
                        log.info("redeemed %d, failed %d, retained %d", len(res.redeemed),
                                 len(res.failed), res.retained)
                except GridBankError as err:
                    log.warning("batch redemption deferred: %s", err.message)
        threading.Thread(target=flusher, daemon=True).start()
    print(f"listening on {server.endpoint}", flush=True)
    try:
        _serve(server)
    finally:
        stop.set()
    return 0


# -- gridbank-gsc ---------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def _payment_module(config_path: str) -> PaymentModule:
    cfg = _load_json(config_path)
    base = Path(config_path).parent
    try:
        ident_path = Path(cfg["identity"])
        identity = _load_identity(ident_path if ident_path.is_absolute() else base / ident_path)
        bank_ep = cfg.get("bank_endpoint", DEFAULT_BANK)
        network = TcpNetwork()
        factory = lambda: BankClient.connect(network, bank_ep, identity)  # noqa: E731
        account_id = cfg.get("account_id")
        if not account_id:
            probe = factory()
            try:
                account_id = probe.call("my_account")["AccountID"]
            finally:
                probe.close()
        link = Money.of(cfg["link_value"]) if cfg.get("link_value") else None
        return PaymentModule(identity, factory, account_id, network, Money.of(cfg.get("budget", "0")),
                             link_value=link, host=cfg.get("host", ""))
    except KeyError as exc:
        raise ConfigError(f"consumer config lacks {exc}") from None


def gsc_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="gridbank-gsc", description="Consumer payment module.")
    ap.add_argument("--config", default=str(gridbank_home() / "gsc.json"))
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("submit", help="run one job through a provider")
    p.add_argument("--job", required=True, help="job spec file")
    p = sub.add_parser("account", help="forward an account operation to the bank")
    p.add_argument("op", help="e.g. get_account, statement, update_account")
    p.add_argument("params", nargs="*", metavar="KEY=VALUE")
    args = ap.parse_args(argv)
    try:
        module = _payment_module(args.config)
        try:
            if args.command == "submit":
                job = JobSpec.from_wire(_load_json(args.job))
                report = module.gb_job_submit(job)
                _emit({"job": report.to_wire(), "budget": module.budget.to_wire()})
                return 1 if report.error else 0
            params = {}
            for item in args.params:
                key, sep, value = item.partition("=")
                if not sep:
                    raise ConfigError(f"parameter {item!r} is not KEY=VALUE")
                params[key] = _parse_value(value)
            if args.op in ("get_account", "statement") and "account_id" not in params:
                params["account_id"] = module.account_id
            _emit(module.account_passthrough(args.op, **params))
        finally:
            module.close()
    except ConfigError as err:
        print(f"gridbank-gsc: {err.message}", file=sys.stderr)
        return 2
    except GridBankError as err:
        return _fail(err)
    return 0


# -- gridbank-sim ---------------------------------------------------------------

def sim_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="gridbank-sim", description="Run grid economy scenarios.")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run")
    p.add_argument("scenario", help="bundled name (fig1_single_job, fig4_coop4, "
                   "competitive_estimate) or a scenario file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="write the report here instead of stdout")
    args = ap.parse_args(argv)
    try:
        report = run_scenario(args.scenario, seed=args.seed)
    except GridBankError as err:
        print(f"gridbank-sim: {err.code}: {err.message}", file=sys.stderr)
        return 2
    data = render_report(report)
    if args.out:
        Path(args.out).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
    cons = report["conservation"]
    print(f"{report['scenario']}: {len(report['jobs'])} job(s), conservation "
          f"{'holds' if cons['holds'] else 'VIOLATED'}, imbalance {report['imbalance']}", file=sys.stderr)
    return 0 if cons["holds"] else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(sim_main())
