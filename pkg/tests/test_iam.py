"""Identity, federation, and token behavior tests."""

import json

import pytest

from fedsilo.errors import (
    AlreadyMember,
    BadCredentials,
    DuplicateEmail,
    Forbidden,
    NoSuchInvitation,
    NotAdmin,
    Unauthorized,
    WeakPassword,
)
from fedsilo.iam import IamService
from fedsilo.store import DataDir

PW = "correct horse battery"


class FakeClock:
    def __init__(self, t=1000.0):
        self.t = t

    def __call__(self):
        return self.t

    def advance(self, dt):
        self.t += dt


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def iam(tmp_path, clock):
    return IamService(DataDir(tmp_path), clock=clock)


def make_user(iam, email="alice@example.org", name="Alice"):
    iam.create_account(name, email, PW)
    return iam.login(email, PW)


class TestAccounts:
    def test_create_and_login(self, iam):
        token = make_user(iam)
        assert token.token and token.scopes == ("api",)

    def test_duplicate_email(self, iam):
        iam.create_account("A", "a@x.org", PW)
        with pytest.raises(DuplicateEmail):
            iam.create_account("B", "a@x.org", PW)

    def test_email_case_insensitive_uniqueness(self, iam):
        iam.create_account("A", "a@x.org", PW)
        with pytest.raises(DuplicateEmail):
            iam.create_account("B", "A@X.ORG", PW)

    def test_weak_password(self, iam):
        with pytest.raises(WeakPassword):
            iam.create_account("A", "a@x.org", "abc")

    def test_wrong_password_same_error_as_unknown_email(self, iam):
        iam.create_account("A", "a@x.org", PW)
        with pytest.raises(BadCredentials) as wrong:
            iam.login("a@x.org", "not-the-password")
        with pytest.raises(BadCredentials) as unknown:
            iam.login("nobody@x.org", PW)
        assert str(wrong.value) == str(unknown.value)

    def test_password_never_stored_in_clear(self, iam, tmp_path):
        iam.create_account("A", "a@x.org", PW)
        raw = (tmp_path / "meta" / "accounts.json").read_text()
        assert PW not in raw

    def test_tokens_stored_only_as_digests(self, iam, tmp_path):
        token = make_user(iam)
        raw = (tmp_path / "meta" / "tokens.json").read_text()
        assert token.token not in raw


class TestTokens:
    def test_expired_token_unauthorized(self, iam, clock):
        token = make_user(iam)
        iam.authorize(token.token)
        clock.advance(24 * 3600 + 1)
        with pytest.raises(Unauthorized):
            iam.authorize(token.token)

    def test_revoked_token_fails_immediately(self, iam):
        token = make_user(iam)
        iam.revoke_token(token.token)
        with pytest.raises(Unauthorized):
            iam.authorize(token.token)

    def test_garbage_token(self, iam):
        with pytest.raises(Unauthorized):
            iam.authorize("not-a-token")
        with pytest.raises(Unauthorized):
            iam.authorize(None)

    def test_agent_token_lacks_api_scope(self, iam):
        token = make_user(iam)
        agent = iam.issue_agent_token(iam.account_id_for(token.token), "ep_1")
        with pytest.raises(Forbidden):
            iam.authorize(agent.token, required_scope="api")
        assert iam.token_endpoint_id(agent.token) == "ep_1"


class TestFederations:
    def test_create_makes_caller_active_admin(self, iam):
        token = make_user(iam)
        fed = iam.create_federation(token.token, "midrc")
        assert fed["members"][0]["role"] == "admin"
        assert fed["members"][0]["status"] == "active"

    def test_same_name_twice_allowed(self, iam):
        a = make_user(iam, "a@x.org")
        b = make_user(iam, "b@x.org")
        fa = iam.create_federation(a.token, "midrc")
        fb = iam.create_federation(b.token, "midrc")
        assert fa["federation_id"] != fb["federation_id"]

    def test_invite_accept_flow(self, iam):
        admin = make_user(iam, "admin@x.org")
        invitee = make_user(iam, "bob@x.org", "Bob")
        fed = iam.create_federation(admin.token, "f")
        fid = fed["federation_id"]
        iam.invite_member(admin.token, fid, "bob@x.org")
        assert iam.list_invitations(invitee.token) == [{"federation_id": fid, "name": "f"}]
        # invited but not yet accepted: no access
        with pytest.raises(Forbidden):
            iam.authorize(invitee.token, fid)
        iam.accept_invitation(invitee.token, fid)
        assert iam.authorize(invitee.token, fid)

    def test_non_admin_cannot_invite(self, iam):
        admin = make_user(iam, "admin@x.org")
        bob = make_user(iam, "bob@x.org")
        make_user(iam, "carol@x.org")
        fid = iam.create_federation(admin.token, "f")["federation_id"]
        iam.invite_member(admin.token, fid, "bob@x.org")
        iam.accept_invitation(bob.token, fid)
        with pytest.raises(NotAdmin):
            iam.invite_member(bob.token, fid, "carol@x.org")

    def test_double_invite_rejected(self, iam):
        admin = make_user(iam, "admin@x.org")
        make_user(iam, "bob@x.org")
        fid = iam.create_federation(admin.token, "f")["federation_id"]
        iam.invite_member(admin.token, fid, "bob@x.org")
        with pytest.raises(AlreadyMember):
            iam.invite_member(admin.token, fid, "bob@x.org")

    def test_accept_without_invitation(self, iam):
        admin = make_user(iam, "admin@x.org")
        bob = make_user(iam, "bob@x.org")
        fid = iam.create_federation(admin.token, "f")["federation_id"]
        with pytest.raises(NoSuchInvitation):
            iam.accept_invitation(bob.token, fid)

    def test_cross_federation_forbidden(self, iam):
        a = make_user(iam, "a@x.org")
        b = make_user(iam, "b@x.org")
        fid_b = iam.create_federation(b.token, "fb")["federation_id"]
        iam.create_federation(a.token, "fa")
        with pytest.raises(Forbidden):
            iam.authorize(a.token, fid_b)

    def test_admin_role_required(self, iam):
        admin = make_user(iam, "admin@x.org")
        bob = make_user(iam, "bob@x.org")
        fid = iam.create_federation(admin.token, "f")["federation_id"]
        iam.invite_member(admin.token, fid, "bob@x.org")
        iam.accept_invitation(bob.token, fid)
        assert iam.authorize(bob.token, fid, required_role="member")
        with pytest.raises(NotAdmin):
            iam.authorize(bob.token, fid, required_role="admin")

    def test_remove_member(self, iam):
        admin = make_user(iam, "admin@x.org")
        bob = make_user(iam, "bob@x.org")
        fid = iam.create_federation(admin.token, "f")["federation_id"]
        iam.invite_member(admin.token, fid, "bob@x.org")
        iam.accept_invitation(bob.token, fid)
        bob_id = iam.account_id_for(bob.token)
        iam.remove_member(admin.token, fid, bob_id)
        with pytest.raises(Forbidden):
            iam.authorize(bob.token, fid)

    def test_admin_cannot_be_removed(self, iam):
        admin = make_user(iam, "admin@x.org")
        fid = iam.create_federation(admin.token, "f")["federation_id"]
        with pytest.raises(Forbidden):
            iam.remove_member(admin.token, fid, iam.account_id_for(admin.token))


class TestPersistence:
    def test_state_survives_reload(self, tmp_path, clock):
        iam1 = IamService(DataDir(tmp_path), clock=clock)
        token = make_user(iam1)
        fid = iam1.create_federation(token.token, "f")["federation_id"]
        iam2 = IamService(DataDir(tmp_path), clock=clock)
        assert iam2.authorize(token.token, fid, required_role="admin")
