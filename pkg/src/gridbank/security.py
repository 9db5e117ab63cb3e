"""Identities, canonical encoding, detached Ed25519 signatures and
connection authorization.

Canonical encoding is JSON with lexicographically sorted keys, no
insignificant whitespace, UTF-8 output. Only maps with string keys, lists,
strings, integers, booleans and null are encodable; floats are refused so
that every signed payload has exactly one byte representation.
"""

from __future__ import annotations

import base64
import enum
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .errors import BadSignature, DuplicateSubject, SchemaViolation, UnencodableValue, UnknownSubject


def b64e(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64d(text: str) -> bytes:
    try:
        data = base64.b64decode(text.encode("ascii"), validate=True)
    except (ValueError, AttributeError, UnicodeEncodeError):
        raise SchemaViolation(f"bad base64 value {text!r:.40}") from None
    # stray padding bits would give one value several spellings
    if base64.b64encode(data).decode("ascii") != text:
        raise SchemaViolation(f"non-canonical base64 value {text!r:.40}")
    return data


def _check_encodable(value, path="$"):
    if value is None or isinstance(value, (bool, str)):
        return
    if isinstance(value, int):
        return
    if isinstance(value, float):
        raise UnencodableValue(f"float at {path}; use integers or decimal strings")
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise UnencodableValue(f"non-string key {k!r} at {path}")
            _check_encodable(v, f"{path}.{k}")
        return
    if isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            _check_encodable(v, f"{path}[{i}]")
        return
    raise UnencodableValue(f"cannot encode {type(value).__name__} at {path}")


def canonical_encode(message) -> bytes:
    _check_encodable(message)
    return json.dumps(
        message, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def _no_floats(text):
    raise SchemaViolation(f"float literal {text} not allowed")


def canonical_decode(data: bytes):
    try:
        return json.loads(data.decode("utf-8"), parse_float=_no_floats,
                          parse_constant=_no_floats)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaViolation(f"undecodable message: {exc}") from None


@dataclass(frozen=True)
class Identity:
    subject: str
    public_key: bytes
    private_key: bytes | None = None

    def sign(self, payload: bytes) -> bytes:
        if self.private_key is None:
            raise ValueError(f"identity {self.subject!r} has no private key")
        return Ed25519PrivateKey.from_private_bytes(self.private_key).sign(payload)

    def public(self) -> "Identity":
        return Identity(self.subject, self.public_key)

    def to_file_dict(self) -> dict:
        out = {"subject": self.subject, "public_key": b64e(self.public_key)}
        if self.private_key is not None:
            out["private_key"] = b64e(self.private_key)
        return out

    @classmethod
    def from_file_dict(cls, data: dict) -> "Identity":
        priv = data.get("private_key")
        return cls(data["subject"], b64d(data["public_key"]), b64d(priv) if priv else None)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_file_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Identity":
        return cls.from_file_dict(json.loads(Path(path).read_text()))


def new_keypair(subject: str, seed: bytes | None = None) -> Identity:
    """Fresh keypair; a 32-byte ``seed`` makes it reproducible (simulations only)."""
    if not subject:
        raise ValueError("subject must be non-empty")
    key = Ed25519PrivateKey.from_private_bytes(seed) if seed is not None else Ed25519PrivateKey.generate()
    priv = key.private_bytes(
        serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption()
    )
    pub = key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    return Identity(subject, pub, priv)


def verify_signature(public_key: bytes, payload: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, payload)
    except (InvalidSignature, ValueError):
        return False
    return True


class KeyRegistry:
    """Subject -> public key table, optionally backed by a TSV file."""

    def __init__(self, keys: dict[str, bytes] | None = None, path: str | Path | None = None):
        self._keys = dict(keys or {})
        self._path = Path(path) if path else None
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path: str | Path) -> "KeyRegistry":
        keys = {}
        p = Path(path)
        if p.exists():
            for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
                if not line.strip() or line.startswith("#"):
                    continue
                try:
                    subject, key = line.rsplit("\t", 1)
                    keys[subject] = b64d(key.strip())
                except (ValueError, SchemaViolation):
                    raise ValueError(f"{path}:{lineno}: malformed key registry line") from None
        return cls(keys, path=p)

    def register(self, subject: str, public_key: bytes) -> None:
        with self._lock:
            if subject in self._keys:
                raise DuplicateSubject(f"subject {subject!r} already registered")
            self._keys[subject] = public_key
            if self._path is not None:
                with self._path.open("a", encoding="utf-8") as fh:
                    fh.write(f"{subject}\t{b64e(public_key)}\n")

    def get(self, subject: str) -> bytes:
        try:
            return self._keys[subject]
        except KeyError:
            raise UnknownSubject(f"unregistered subject {subject!r}") from None

    def __contains__(self, subject: str) -> bool:
        return subject in self._keys

    def subjects(self) -> list[str]:
        return sorted(self._keys)

    def save(self, path: str | Path) -> None:
        lines = [f"{s}\t{b64e(k)}\n" for s, k in sorted(self._keys.items())]
        Path(path).write_text("".join(lines), encoding="utf-8")


def generate_identity(subject: str, registry: KeyRegistry | None = None,
                      seed: bytes | None = None) -> Identity:
    """Create a keypair for ``subject`` and register its public half."""
    if registry is not None and subject in registry:
        raise DuplicateSubject(f"subject {subject!r} already registered")
    ident = new_keypair(subject, seed)
    if registry is not None:
        registry.register(subject, ident.public_key)
    return ident


@dataclass(frozen=True)
class SignedEnvelope:
    payload: bytes
    signer_subject: str
    signature: bytes

    def to_wire(self) -> dict:
        return {
            "payload": b64e(self.payload),
            "signer": self.signer_subject,
            "signature": b64e(self.signature),
        }

    @classmethod
    def from_wire(cls, data) -> "SignedEnvelope":
        if not isinstance(data, dict) or set(data) != {"payload", "signer", "signature"}:
            raise SchemaViolation("malformed envelope")
        if not isinstance(data["signer"], str):
            raise SchemaViolation("malformed envelope signer")
        return cls(b64d(data["payload"]), data["signer"], b64d(data["signature"]))

    def message(self):
        return canonical_decode(self.payload)


def sign(identity: Identity, message) -> SignedEnvelope:
    payload = message if isinstance(message, bytes) else canonical_encode(message)
    return SignedEnvelope(payload, identity.subject, identity.sign(payload))


def verify_envelope(registry: KeyRegistry, envelope: SignedEnvelope) -> str:
    """Return the signer's subject, or raise UnknownSubject / BadSignature."""
    key = registry.get(envelope.signer_subject)
    if not verify_signature(key, envelope.payload, envelope.signature):
        raise BadSignature(f"signature by {envelope.signer_subject!r} does not verify")
    return envelope.signer_subject


def sign_body(identity: Identity, body: dict) -> dict:
    """Wire form of a signed record: the body itself plus a detached signature."""
    return {"body": body, "signer": identity.subject,
            "signature": b64e(identity.sign(canonical_encode(body)))}


def verify_body(public_key: bytes, signed: dict, signer: str | None = None) -> dict:
    if not isinstance(signed, dict) or set(signed) != {"body", "signer", "signature"}:
        raise BadSignature("malformed signed record")
    if signer is not None and signed["signer"] != signer:
        raise BadSignature(f"record signed by {signed['signer']!r}, expected {signer!r}")
    try:
        payload = canonical_encode(signed["body"])
        sig = b64d(signed["signature"])
    except (UnencodableValue, SchemaViolation):
        raise BadSignature("unverifiable signed record") from None
    if not verify_signature(public_key, payload, sig):
        raise BadSignature("record signature does not verify")
    return signed["body"]


class Role(str, enum.Enum):
    ACCOUNT_HOLDER = "AccountHolder"
    ADMIN = "Admin"
    REFUSED = "Refused"


def authorize_connection(subject: str, admin_subjects: Iterable[str],
                         account_subjects: Iterable[str]) -> Role:
    if subject in set(admin_subjects):
        return Role.ADMIN
    if subject in set(account_subjects):
        return Role.ACCOUNT_HOLDER
    return Role.REFUSED


def load_admin_table(path: str | Path) -> frozenset[str]:
    p = Path(path)
    if not p.exists():
        return frozenset()
    return frozenset(
        line.strip() for line in p.read_text(encoding="utf-8").splitlines()
        if line.strip() and not line.startswith("#")
    )
