"""Dual-domain credentials: user tokens and delegated grid proxy chains.

User-side authentication is an HMAC-SHA-256 token under a realm key; the
grid side is a chain of delegated links whose per-link MACs are keyed by
issuer secrets derived top-down from the grid root secret. The trust
topology (expiry, delegation depth, link integrity) is what matters here,
not the cryptosystems it stands in for.

Timestamps are integer milliseconds on whatever clock the caller uses
(simulation time in SIMULATED mode, wall time in LOCAL mode). A credential
is valid strictly before its expiry instant: now == expires_at is expired.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import json
import re
from dataclasses import dataclass

from .model import DeskcafError


class AuthFailed(DeskcafError):
    pass


class TokenExpired(AuthFailed):
    pass


class BadSignature(AuthFailed):
    pass


class ProxyExpired(AuthFailed):
    pass


class DepthExceeded(AuthFailed):
    pass


class BrokenChain(AuthFailed):
    pass


class UnmappedPrincipal(AuthFailed):
    pass


_MAC_RE = re.compile(r"^[0-9a-f]{64}$")


def _mac(key: bytes, payload: bytes) -> str:
    return hmac.new(key, payload, hashlib.sha256).hexdigest()


# ---------------------------------------------------------------------------
# User tokens


@dataclass(frozen=True)
class UserToken:
    principal: str
    issued_at: int
    expires_at: int
    mac: str


def _token_payload(principal: str, issued_at: int, expires_at: int) -> bytes:
    return f"{principal}|{issued_at}|{expires_at}".encode()


def issue_token(principal: str, ttl_s: float, realm_key: bytes, now: int = 0) -> UserToken:
    if ttl_s <= 0:
        raise ValueError("ttl must be positive")
    if "|" in principal or "@" not in principal:
        raise ValueError("principal must look like name@REALM without '|'")
    expires = now + int(ttl_s * 1000)
    return UserToken(principal, now, expires, _mac(realm_key, _token_payload(principal, now, expires)))


def verify_token(token: UserToken, now: int, realm_key: bytes) -> str:
    """Return the principal iff the MAC verifies and the token is unexpired."""
    if not _MAC_RE.match(token.mac):
        raise BadSignature("malformed token MAC")
    expected = _mac(realm_key, _token_payload(token.principal, token.issued_at, token.expires_at))
    if not hmac.compare_digest(expected, token.mac):
        raise BadSignature("token MAC mismatch")
    if now >= token.expires_at:
        raise TokenExpired(f"token expired at {token.expires_at}, now {now}")
    return token.principal


def serialize_token(token: UserToken) -> str:
    raw = f"{token.principal}|{token.issued_at}|{token.expires_at}|{token.mac}".encode()
    return base64.b64encode(raw).decode("ascii")


def deserialize_token(text: str) -> UserToken:
    """Decode a serialized token, rejecting any non-canonical encoding."""
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError, ValueError) as exc:
        raise BadSignature(f"undecodable token: {exc}") from exc
    if base64.b64encode(raw).decode("ascii") != text:
        raise BadSignature("non-canonical token encoding")
    try:
        principal, issued, expires, mac = raw.decode("utf-8").split("|")
        issued_at, expires_at = int(issued), int(expires)
    except (UnicodeDecodeError, ValueError) as exc:
        raise BadSignature(f"malformed token: {exc}") from exc
    if str(issued_at) != issued or str(expires_at) != expires:
        raise BadSignature("non-canonical timestamp encoding")
    if not _MAC_RE.match(mac):
        raise BadSignature("malformed token MAC")
    return UserToken(principal, issued_at, expires_at, mac)


# ---------------------------------------------------------------------------
# Grid proxies
#
# A chain is leaf-first and ends in the self-issued root link. Issuer
# secrets derive from the root secret: secret(child) = HMAC(secret(parent),
# subject), so a verifier holding the root secret can recompute every MAC.


@dataclass(frozen=True)
class ProxyLink:
    subject: str
    issuer: str
    not_after: int
    depth_allowed: int
    mac: str


@dataclass(frozen=True)
class GridProxy:
    chain: tuple  # of ProxyLink, leaf first

    @property
    def subject(self) -> str:
        return self.chain[0].subject

    @property
    def not_after(self) -> int:
        return self.chain[0].not_after

    @property
    def depth_allowed(self) -> int:
        return self.chain[0].depth_allowed


def _link_payload(subject: str, issuer: str, not_after: int, depth_allowed: int) -> bytes:
    return f"{subject}|{issuer}|{not_after}|{depth_allowed}".encode()


def _derive_secret(parent_secret: bytes, subject: str) -> bytes:
    return hmac.new(parent_secret, subject.encode(), hashlib.sha256).digest()


def make_root_identity(subject: str, root_secret: bytes, not_after: int, depth_allowed: int = 4) -> GridProxy:
    """Self-issued root link; the anchor every chain must end in."""
    mac = _mac(root_secret, _link_payload(subject, subject, not_after, depth_allowed))
    return GridProxy((ProxyLink(subject, subject, not_after, depth_allowed, mac),))


def delegate_proxy(parent: GridProxy, parent_secret: bytes, subject: str, ttl_s: float, now: int) -> tuple:
    """Delegate a child proxy; returns (GridProxy, child_secret).

    The child expires no later than its parent and inherits one less level
    of delegation depth.
    """
    head = parent.chain[0]
    if now >= head.not_after:
        raise ProxyExpired(f"parent proxy expired at {head.not_after}")
    if head.depth_allowed <= 0:
        raise DepthExceeded(f"{head.subject} cannot delegate further")
    not_after = min(head.not_after, now + int(ttl_s * 1000))
    depth = head.depth_allowed - 1
    child_secret = _derive_secret(parent_secret, subject)
    mac = _mac(parent_secret, _link_payload(subject, head.subject, not_after, depth))
    return GridProxy((ProxyLink(subject, head.subject, not_after, depth, mac),) + parent.chain), child_secret


def verify_proxy(proxy: GridProxy, now: int, root_secret: bytes) -> str:
    """Walk leaf -> root checking linkage, expiry, depth, and MACs; return the leaf subject."""
    chain = proxy.chain
    if not chain:
        raise BrokenChain("empty chain")
    root = chain[-1]
    if root.subject != root.issuer:
        raise BrokenChain("chain does not end in a self-issued root")
    for link in chain:
        if not _MAC_RE.match(link.mac):
            raise BrokenChain(f"malformed MAC on {link.subject}")
        if now >= link.not_after:
            raise ProxyExpired(f"{link.subject} expired at {link.not_after}")
    # linkage and depth arithmetic, leaf -> root
    for child, parent in zip(chain, chain[1:]):
        if child.issuer != parent.subject:
            raise BrokenChain(f"{child.subject} issued by {child.issuer}, expected {parent.subject}")
        if child.depth_allowed != parent.depth_allowed - 1:
            raise BrokenChain(f"depth arithmetic broken at {child.subject}")
        if child.not_after > parent.not_after:
            raise BrokenChain(f"{child.subject} outlives its issuer")
    if len(chain) - 1 > root.depth_allowed:
        raise DepthExceeded(f"chain of {len(chain) - 1} delegations exceeds root budget {root.depth_allowed}")
    # MACs, root -> leaf, deriving issuer secrets as we go
    secret = root_secret
    expected = _mac(secret, _link_payload(root.subject, root.issuer, root.not_after, root.depth_allowed))
    if not hmac.compare_digest(expected, root.mac):
        raise BrokenChain("root MAC mismatch")
    for link in reversed(chain[:-1]):
        expected = _mac(secret, _link_payload(link.subject, link.issuer, link.not_after, link.depth_allowed))
        if not hmac.compare_digest(expected, link.mac):
            raise BrokenChain(f"MAC mismatch on {link.subject}")
        secret = _derive_secret(secret, link.subject)
    return chain[0].subject


def serialize_proxy(proxy: GridProxy) -> str:
    links = [[l.subject, l.issuer, l.not_after, l.depth_allowed, l.mac] for l in proxy.chain]
    raw = json.dumps(links, separators=(",", ":"), sort_keys=False).encode()
    return base64.b64encode(raw).decode("ascii")


def deserialize_proxy(text: str) -> GridProxy:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError, ValueError) as exc:
        raise BrokenChain(f"undecodable proxy: {exc}") from exc
    if base64.b64encode(raw).decode("ascii") != text:
        raise BrokenChain("non-canonical proxy encoding")
    try:
        links = json.loads(raw.decode("utf-8"))
        chain = tuple(ProxyLink(str(s), str(i), int(na), int(d), str(m)) for s, i, na, d, m in links)
    except (UnicodeDecodeError, ValueError, TypeError) as exc:
        raise BrokenChain(f"malformed proxy: {exc}") from exc
    reencoded = json.dumps(
        [[l.subject, l.issuer, l.not_after, l.depth_allowed, l.mac] for l in chain],
        separators=(",", ":"),
        sort_keys=False,
    ).encode()
    if reencoded != raw:
        raise BrokenChain("non-canonical proxy payload")
    return GridProxy(chain)


# ---------------------------------------------------------------------------
# Identity map


class IdentityMap:
    """Injective principal -> grid subject table."""

    def __init__(self, entries: dict):
        subjects = list(entries.values())
        if len(set(subjects)) != len(subjects):
            dupes = sorted({s for s in subjects if subjects.count(s) > 1})
            raise ValueError(f"identity map is not injective: {dupes}")
        self._entries = dict(entries)

    @classmethod
    def load(cls, path) -> "IdentityMap":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def map_identity(self, principal: str) -> str:
        try:
            return self._entries[principal]
        except KeyError:
            raise UnmappedPrincipal(f"no grid subject mapped for {principal!r}") from None

    def __contains__(self, principal: str) -> bool:
        return principal in self._entries
