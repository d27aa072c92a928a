"""Self-hosted identity and group management.

Accounts authenticate with passwords and act through bearer tokens;
federations are the trust boundary inside which endpoints register and
experiments run. Agent credentials are long-lived tokens scoped to a
single endpoint. Every API and dispatch call funnels through
:meth:`IamService.authorize`.

Passwords are stored only as salted PBKDF2 hashes. Tokens are stored
only as SHA-256 digests and compared constant-time, so neither a leaked
metadata file nor a timing probe recovers a usable credential.
"""

from __future__ import annotations

import hashlib
import hmac
import secrets
import threading
import time
from dataclasses import dataclass
from typing import Optional

from .errors import (
    AlreadyMember,
    BadCredentials,
    DuplicateEmail,
    Forbidden,
    NoSuchAccount,
    NoSuchFederation,
    NoSuchInvitation,
    NotAdmin,
    Unauthorized,
    WeakPassword,
)
from .store import DataDir

PBKDF2_ITERATIONS = 60_000
MIN_PASSWORD_LEN = 10
API_TOKEN_TTL_S = 24 * 3600.0

SCOPE_API = "api"
SCOPE_AGENT = "agent"


def _hash_password(password: str, salt: bytes) -> str:
    return hashlib.pbkdf2_hmac("sha256", password.encode(), salt, PBKDF2_ITERATIONS).hex()


def _token_digest(token: str) -> str:
    return hashlib.sha256(token.encode()).hexdigest()


@dataclass(frozen=True)
class Account:
    account_id: str
    display_name: str
    email: str


@dataclass(frozen=True)
class AccessToken:
    token: str
    account_id: str
    scopes: tuple[str, ...]
    expires_at: Optional[float]


class IamService:
    def __init__(self, data: DataDir, clock=time.time):
        self.clock = clock
        self._lock = threading.RLock()
        self.accounts = data.table("accounts")
        self.federations = data.table("federations")
        self.tokens = data.table("tokens")
        # dummy credentials so login timing does not reveal unknown emails
        self._decoy_salt = b"fedsilo-decoy-salt"
        self._decoy_hash = _hash_password("decoy-password", self._decoy_salt)

    # --- accounts ---------------------------------------------------------

    def create_account(self, display_name: str, email: str, password: str) -> Account:
        email = email.strip().lower()
        if len(password) < MIN_PASSWORD_LEN:
            raise WeakPassword(f"password must be at least {MIN_PASSWORD_LEN} characters")
        with self._lock:
            if any(r["email"] == email for r in self.accounts.rows.values()):
                raise DuplicateEmail(f"{email} is already registered")
            account_id = "acct_" + secrets.token_hex(8)
            salt = secrets.token_bytes(16)
            self.accounts.mutate(
                lambda rows: rows.__setitem__(
                    account_id,
                    {
                        "display_name": display_name,
                        "email": email,
                        "password_salt": salt.hex(),
                        "password_hash": _hash_password(password, salt),
                    },
                )
            )
        return Account(account_id, display_name, email)

    def login(self, email: str, password: str) -> AccessToken:
        email = email.strip().lower()
        with self._lock:
            found = [
                (aid, r) for aid, r in self.accounts.rows.items() if r["email"] == email
            ]
        if not found:
            # burn the same hashing cost as a real attempt
            _hash_password(password, self._decoy_salt)
            raise BadCredentials("unknown email or wrong password")
        account_id, row = found[0]
        attempt = _hash_password(password, bytes.fromhex(row["password_salt"]))
        if not hmac.compare_digest(attempt, row["password_hash"]):
            raise BadCredentials("unknown email or wrong password")
        return self._issue_token(account_id, (SCOPE_API,), self.clock() + API_TOKEN_TTL_S)

    def get_account(self, account_id: str) -> Account:
        row = self.accounts.rows.get(account_id)
        if row is None:
            raise NoSuchAccount(f"no account {account_id}")
        return Account(account_id, row["display_name"], row["email"])

    def _account_id_for_email(self, email: str) -> str:
        email = email.strip().lower()
        for aid, r in self.accounts.rows.items():
            if r["email"] == email:
                return aid
        raise NoSuchAccount(f"no account with email {email}")

    # --- tokens -----------------------------------------------------------

    def _issue_token(
        self,
        account_id: str,
        scopes: tuple[str, ...],
        expires_at: Optional[float],
        endpoint_id: Optional[str] = None,
    ) -> AccessToken:
        token = secrets.token_hex(32)  # 256 bits of entropy
        record = {
            "digest": _token_digest(token),
            "account_id": account_id,
            "scopes": list(scopes),
            "expires_at": expires_at,
            "endpoint_id": endpoint_id,
        }
        self.tokens.mutate(lambda rows: rows.__setitem__(record["digest"], record))
        return AccessToken(token, account_id, scopes, expires_at)

    def issue_agent_token(self, account_id: str, endpoint_id: str) -> AccessToken:
        """Long-lived endpoint credential, issued exactly once at registration."""
        return self._issue_token(account_id, (SCOPE_AGENT,), None, endpoint_id=endpoint_id)

    def revoke_token(self, token: str) -> None:
        digest = _token_digest(token)
        self.tokens.mutate(lambda rows: rows.pop(digest, None))

    def _resolve_token(self, token: Optional[str]) -> dict:
        if not token:
            raise Unauthorized("missing bearer token")
        digest = _token_digest(token)
        with self._lock:
            record = self.tokens.rows.get(digest)
        if record is None or not hmac.compare_digest(record["digest"], digest):
            raise Unauthorized("unknown or revoked token")
        if record["expires_at"] is not None and self.clock() > record["expires_at"]:
            raise Unauthorized("token expired")
        return record

    # --- federations --------------------------------------------------------

    def create_federation(self, token: str, name: str) -> dict:
        record = self._resolve_token(token)
        self._require_scope(record, SCOPE_API)
        fed_id = "fed_" + secrets.token_hex(8)
        row = {
            "name": name,
            "admin_id": record["account_id"],
            "members": [
                {"account_id": record["account_id"], "role": "admin", "status": "active"}
            ],
            "created_at": self.clock(),
        }
        self.federations.mutate(lambda rows: rows.__setitem__(fed_id, row))
        return self.federation_view(fed_id)

    def federation_view(self, federation_id: str) -> dict:
        row = self.federations.rows.get(federation_id)
        if row is None:
            raise NoSuchFederation(f"no federation {federation_id}")
        return {"federation_id": federation_id, **row}

    def list_federations(self, token: str) -> list[dict]:
        record = self._resolve_token(token)
        self._require_scope(record, SCOPE_API)
        me = record["account_id"]
        out = []
        with self._lock:
            for fid, row in self.federations.rows.items():
                mine = [m for m in row["members"] if m["account_id"] == me]
                if mine:
                    out.append(
                        {
                            "federation_id": fid,
                            "name": row["name"],
                            "role": mine[0]["role"],
                            "status": mine[0]["status"],
                        }
                    )
        return out

    def invite_member(self, token: str, federation_id: str, email: str) -> dict:
        admin_id = self.authorize(token, federation_id, required_role="admin")
        invitee = self._account_id_for_email(email)
        with self._lock:
            fed = self.federations.rows.get(federation_id)
            if any(m["account_id"] == invitee for m in fed["members"]):
                raise AlreadyMember(f"{email} already belongs to this federation")
            membership = {"account_id": invitee, "role": "member", "status": "invited"}
            fed["members"].append(membership)
            self.federations.save()
        return dict(membership, invited_by=admin_id)

    def accept_invitation(self, token: str, federation_id: str) -> dict:
        record = self._resolve_token(token)
        self._require_scope(record, SCOPE_API)
        me = record["account_id"]
        with self._lock:
            fed = self.federations.rows.get(federation_id)
            if fed is None:
                raise NoSuchFederation(f"no federation {federation_id}")
            for m in fed["members"]:
                if m["account_id"] == me and m["status"] == "invited":
                    m["status"] = "active"
                    self.federations.save()
                    return dict(m)
        raise NoSuchInvitation("no pending invitation for this federation")

    def list_invitations(self, token: str) -> list[dict]:
        record = self._resolve_token(token)
        self._require_scope(record, SCOPE_API)
        me = record["account_id"]
        out = []
        with self._lock:
            for fid, row in self.federations.rows.items():
                for m in row["members"]:
                    if m["account_id"] == me and m["status"] == "invited":
                        out.append({"federation_id": fid, "name": row["name"]})
        return out

    def remove_member(self, token: str, federation_id: str, account_id: str) -> None:
        self.authorize(token, federation_id, required_role="admin")
        with self._lock:
            fed = self.federations.rows.get(federation_id)
            if fed["admin_id"] == account_id:
                raise Forbidden("the federation admin cannot be removed")
            before = len(fed["members"])
            fed["members"] = [m for m in fed["members"] if m["account_id"] != account_id]
            if len(fed["members"]) == before:
                raise NoSuchAccount(f"{account_id} is not a member")
            self.federations.save()

    # --- authorization -------------------------------------------------------

    @staticmethod
    def _require_scope(record: dict, scope: str) -> None:
        if scope not in record["scopes"]:
            raise Forbidden(f"token lacks the {scope!r} scope")

    def authorize(
        self,
        token: Optional[str],
        federation_id: Optional[str] = None,
        required_role: str = "member",
        required_scope: str = SCOPE_API,
    ) -> str:
        """Validate token, scope, and (optionally) active federation membership.

        Returns the account id. Bad or expired tokens raise Unauthorized;
        a valid token with the wrong scope, federation, or role raises
        Forbidden.
        """
        record = self._resolve_token(token)
        self._require_scope(record, required_scope)
        if federation_id is not None:
            fed = self.federations.rows.get(federation_id)
            if fed is None:
                raise NoSuchFederation(f"no federation {federation_id}")
            me = record["account_id"]
            mine = [m for m in fed["members"] if m["account_id"] == me]
            if not mine or mine[0]["status"] != "active":
                raise Forbidden("not an active member of this federation")
            if required_role == "admin" and mine[0]["role"] != "admin":
                raise NotAdmin("administrator role required")
        return record["account_id"]

    def token_endpoint_id(self, token: str) -> Optional[str]:
        """Endpoint bound to an agent token, if any."""
        return self._resolve_token(token).get("endpoint_id")

    def account_id_for(self, token: str) -> str:
        return self._resolve_token(token)["account_id"]
