import numpy as np
import pytest

from onboardsim.sessiongen import SessionGenConfig, SessionGenModel, rollout_sessions
from onboardsim.simsvc import (
    USER_DATA_TEMPLATE, OnboardingService, OverlayStore, ProductionStore,
    ServiceClient, ServiceError, ServiceServer, canonical_hash,
    derive_account_seed, handle_message, run_campaign,
)
from onboardsim.stategen import StateGenConfig, StateGenModel
from onboardsim.world import ObservableContext, UserState, WorldConfig, sample_corpus
from onboardsim.policies import BaselinePolicyFactory


@pytest.fixture(scope="module")
def corpus():
    return sample_corpus(31, m=50, d=8, n_genres=4)


@pytest.fixture(scope="module")
def state_model(corpus):
    return StateGenModel(corpus, StateGenConfig(hidden=8, k_max=5, seed=0))


@pytest.fixture(scope="module")
def session_model(corpus):
    return SessionGenModel(corpus, SessionGenConfig(hidden=16, response_dim=4, seed=1))


def make_service(corpus, state_model, read_mode="merge", policy_factory=None,
                 n_demo=20):
    production = ProductionStore()
    production.seed_demo_accounts(corpus, n_demo, seed=5)
    return OnboardingService(
        corpus,
        policy_factory or BaselinePolicyFactory(corpus),
        lambda seed: state_model.sample_state(seed),
        production=production, overlay=OverlayStore(), read_mode=read_mode,
    )


class TestAccounts:
    def test_fresh_ids_unique(self, corpus, state_model):
        service = make_service(corpus, state_model)
        ids = {service.create_account(seed=i).account_id for i in range(500)}
        assert len(ids) == 500

    def test_same_seed_same_initial_state(self, corpus, state_model):
        a = make_service(corpus, state_model).create_account(seed=7)
        b = make_service(corpus, state_model).create_account(seed=7)
        sa = make_service(corpus, state_model)
        acc = sa.create_account(seed=7)
        data = sa.udss_read(acc.account_id)
        sb = make_service(corpus, state_model)
        acc2 = sb.create_account(seed=7)
        assert sb.udss_read(acc2.account_id) == data

    def test_creation_leaves_production_untouched(self, corpus, state_model):
        service = make_service(corpus, state_model)
        before = service.production.content_hash()
        for i in range(50):
            service.create_account(seed=i)
        assert service.production.content_hash() == before

    def test_duplicate_id_rejected(self, corpus, state_model):
        service = make_service(corpus, state_model)
        service.create_account(seed=0, account_id="sim-abc")
        with pytest.raises(ServiceError, match="duplicate"):
            service.create_account(seed=1, account_id="sim-abc")


class TestDataPaths:
    def test_write_then_read_visible(self, corpus, state_model):
        service = make_service(corpus, state_model)
        account = service.create_account(seed=3)
        service.dos_write(account.account_id, {"interests": [1, 2, 3]})
        assert service.udss_read(account.account_id)["interests"] == [1, 2, 3]

    def test_production_namespace_write_rejected(self, corpus, state_model):
        service = make_service(corpus, state_model)
        with pytest.raises(ServiceError, match="isolation"):
            service.dos_write("user-000001", {"interests": [1]})

    def test_last_writer_wins(self, corpus, state_model):
        service = make_service(corpus, state_model)
        account = service.create_account(seed=3)
        service.dos_write(account.account_id, {"geo": 1})
        service.dos_write(account.account_id, {"geo": 2})
        assert service.udss_read(account.account_id)["geo"] == 2

    def test_real_account_never_sees_overlay(self, corpus, state_model):
        service = make_service(corpus, state_model)
        account = service.create_account(seed=1)
        service.dos_write(account.account_id, {"interests": [9]})
        real = service.udss_read("user-000001")
        assert real == service.production.read("user-000001")

    def test_replace_mode_returns_exact_overlay(self, corpus, state_model):
        service = make_service(corpus, state_model, read_mode="replace")
        account = service.create_account(seed=2)
        record = service.overlay.read(account.account_id)
        assert service.udss_read(account.account_id) == record

    def test_merge_mode_overlay_wins_on_conflict(self, corpus, state_model):
        service = make_service(corpus, state_model)
        # partial overlay written around the service: template field f
        # (onboarding_complete) survives, overlay field g (geo) wins
        service.overlay.write("sim-partial", {"geo": 3})
        merged = service.udss_read("sim-partial")
        assert merged["geo"] == 3
        assert merged["onboarding_complete"] is False
        assert set(merged) == set(USER_DATA_TEMPLATE)

    def test_removing_overlay_restores_template(self, corpus, state_model):
        service = make_service(corpus, state_model)
        account = service.create_account(seed=4)
        service.overlay.delete(account.account_id)
        assert service.udss_read(account.account_id) == USER_DATA_TEMPLATE

    def test_unknown_account_not_found(self, corpus, state_model):
        service = make_service(corpus, state_model)
        with pytest.raises(ServiceError, match="not-found"):
            service.udss_read("user-999999")

    def test_bad_spec_fields_rejected(self, corpus, state_model):
        service = make_service(corpus, state_model)
        account = service.create_account(seed=5)
        with pytest.raises(ServiceError, match="bad-spec"):
            service.dos_write(account.account_id, {"nonsense": 1})


class SpyPolicyFactory:
    """Records what the serving layer hands to the policy."""

    policy_id = "spy"

    def __init__(self, corpus):
        self.corpus = corpus
        self.contexts = []

    def __call__(self, context):
        self.contexts.append(context)
        return BaselinePolicyFactory(self.corpus, policy_id="spy")(context)


class TestOnboardingOps:
    def _serve(self, service, account_id, op, **payload):
        return service.serve_onboarding({
            "account_id": account_id, "op": op, "payload": payload,
            "request_id": "t",
        })

    def test_policy_sees_observable_context_only(self, corpus, state_model):
        spy = SpyPolicyFactory(corpus)
        service = make_service(corpus, state_model, policy_factory=spy)
        account = service.create_account(seed=6)
        data = service.udss_read(account.account_id)
        self._serve(service, account.account_id, "navigate")
        assert spy.contexts == [ObservableContext(data["geo"], data["device"])]

    def test_preseed_then_slate_uses_configured_policy(self, corpus, state_model):
        service = make_service(corpus, state_model)
        account = service.create_account(seed=7)
        self._serve(service, account.account_id, "preseed", interests=[1, 2], geo=1,
                    device=0)
        reply = self._serve(service, account.account_id, "navigate")
        factory = BaselinePolicyFactory(corpus)
        want = factory(ObservableContext(1, 0)).initial_slate()[0]
        assert reply["artist_id"] == want

    def test_preseed_after_navigation_rejected(self, corpus, state_model):
        service = make_service(corpus, state_model)
        account = service.create_account(seed=8)
        self._serve(service, account.account_id, "navigate")
        with pytest.raises(ServiceError, match="session-started"):
            self._serve(service, account.account_id, "preseed", interests=[1])

    def test_select_returns_policy_insertions(self, corpus, state_model):
        service = make_service(corpus, state_model)
        account = service.create_account(seed=9)
        reply = self._serve(service, account.account_id, "navigate")
        artist = reply["artist_id"]
        data = service.udss_read(account.account_id)
        reference = BaselinePolicyFactory(corpus)(
            ObservableContext(data["geo"], data["device"]))
        reference.initial_slate()
        want = reference.on_select(artist)
        got = self._serve(service, account.account_id, "select", artist_id=artist)
        assert got["inserted"] == want
        upcoming = self._serve(service, account.account_id, "dynamic-update")
        assert upcoming["upcoming"][:len(want)] == want

    def test_select_requires_current_artist(self, corpus, state_model):
        service = make_service(corpus, state_model)
        account = service.create_account(seed=10)
        self._serve(service, account.account_id, "navigate")
        with pytest.raises(ServiceError, match="bad-select"):
            self._serve(service, account.account_id, "select", artist_id=49)
        with pytest.raises(ServiceError, match="bad-artist"):
            self._serve(service, account.account_id, "select", artist_id=500)

    def test_submit_persists_and_homepage_personalizes(self, corpus, state_model):
        service = make_service(corpus, state_model)
        account = service.create_account(seed=11)
        picks = []
        for _ in range(6):
            reply = self._serve(service, account.account_id, "navigate")
            if len(picks) < 3:
                self._serve(service, account.account_id, "select",
                            artist_id=reply["artist_id"])
                picks.append(reply["artist_id"])
        done = self._serve(service, account.account_id, "submit")
        assert done["n_selections"] == 3
        data = service.udss_read(account.account_id)
        assert data["selections"] == picks
        assert data["onboarding_complete"] is True
        home = self._serve(service, account.account_id, "homepage")
        recs = home["recommendations"]
        sims = corpus.similarity()
        rec_sim = np.mean([sims[r][picks].mean() for r in recs])
        corpus_sim = np.mean([sims[a][picks].mean() for a in range(corpus.n_artists)])
        assert rec_sim > corpus_sim

    def test_operation_after_submit_rejected(self, corpus, state_model):
        service = make_service(corpus, state_model)
        account = service.create_account(seed=12)
        self._serve(service, account.account_id, "navigate")
        self._serve(service, account.account_id, "submit")
        with pytest.raises(ServiceError, match="session-closed"):
            self._serve(service, account.account_id, "navigate")

    def test_unknown_operation_rejected(self, corpus, state_model):
        service = make_service(corpus, state_model)
        account = service.create_account(seed=13)
        with pytest.raises(ServiceError, match="bad-op"):
            self._serve(service, account.account_id, "scroll")

    def test_real_and_test_accounts_share_response_schema(self, corpus, state_model):
        service = make_service(corpus, state_model)
        account = service.create_account(seed=14)
        real_id = "user-000003"
        for op in ("navigate", "dynamic-update"):
            sim_reply = self._serve(service, account.account_id, op)
            real_reply = self._serve(service, real_id, op)
            assert set(sim_reply) == set(real_reply)

    def test_real_submissions_do_update_production(self, corpus, state_model):
        service = make_service(corpus, state_model)
        before = service.production.content_hash()
        real_id = "user-000004"
        reply = self._serve(service, real_id, "navigate")
        self._serve(service, real_id, "select", artist_id=reply["artist_id"])
        self._serve(service, real_id, "submit")
        assert service.production.content_hash() != before
        record = service.production.read(real_id)
        assert record["selections"] == [reply["artist_id"]]


class TestBatchGateway:
    def test_batch_of_one_equals_direct_call(self, corpus, state_model):
        service_a = make_service(corpus, state_model)
        service_b = make_service(corpus, state_model)
        acc_a = service_a.create_account(seed=15)
        acc_b = service_b.create_account(seed=15)
        direct = service_a.serve_onboarding(
            {"account_id": acc_a.account_id, "op": "navigate", "request_id": "r"})
        batched = service_b.batch_gateway(
            [{"account_id": acc_b.account_id, "op": "navigate", "request_id": "r"}])
        assert batched[0]["status"] == "ok"
        assert batched[0]["response"]["artist_id"] == direct["artist_id"]

    def test_interleaving_matches_sequential_stores(self, corpus, state_model):
        def script(service, ids):
            reqs = []
            for i in ids:
                reqs.extend([
                    {"account_id": i, "op": "navigate", "request_id": f"{i}-n1"},
                    {"account_id": i, "op": "navigate", "request_id": f"{i}-n2"},
                    {"account_id": i, "op": "submit", "request_id": f"{i}-s"},
                ])
            return reqs

        seq_service = make_service(corpus, state_model)
        seq_ids = [seq_service.create_account(seed=i).account_id for i in range(6)]
        for req in script(seq_service, seq_ids):
            seq_service.serve_onboarding(req)

        bat_service = make_service(corpus, state_model)
        bat_ids = [bat_service.create_account(seed=i).account_id for i in range(6)]
        replies = bat_service.batch_gateway(script(bat_service, bat_ids))
        assert all(r["status"] == "ok" for r in replies)
        assert (bat_service.overlay.content_hash()
                == seq_service.overlay.content_hash())
        assert (bat_service.production.content_hash()
                == seq_service.production.content_hash())

    def test_errors_are_isolated_per_request(self, corpus, state_model):
        service = make_service(corpus, state_model)
        account = service.create_account(seed=16)
        replies = service.batch_gateway([
            {"account_id": account.account_id, "op": "navigate", "request_id": "good"},
            {"account_id": account.account_id, "op": "bogus", "request_id": "bad"},
            {"account_id": account.account_id, "op": "navigate", "request_id": "good2"},
        ])
        assert [r["status"] for r in replies] == ["ok", "error", "ok"]
        assert replies[1]["code"] == "bad-op"

    def test_per_account_order_preserved(self, corpus, state_model):
        service = make_service(corpus, state_model)
        account = service.create_account(seed=17)
        replies = service.batch_gateway([
            {"account_id": account.account_id, "op": "navigate", "request_id": "n1"},
            {"account_id": account.account_id, "op": "navigate", "request_id": "n2"},
        ])
        assert replies[0]["response"]["position"] == 0
        assert replies[1]["response"]["position"] == 1


class TestCampaign:
    def test_campaign_matches_direct_rollout(self, corpus, state_model, session_model):
        service = make_service(corpus, state_model)
        campaign = run_campaign(service, session_model, 12, seed=77, policy_id="svc")
        states = [state_model.sample_state(derive_account_seed(77, i))
                  for i in range(12)]
        direct = rollout_sessions(session_model, states,
                                  BaselinePolicyFactory(corpus), seed=77)
        assert [r.session.turns() for r in campaign] == [s.turns() for s in direct]
        assert all(r.simulated for r in campaign)

    def test_campaign_is_isolated(self, corpus, state_model, session_model):
        service = make_service(corpus, state_model)
        before = service.production.content_hash()
        run_campaign(service, session_model, 30, seed=78)
        report = service.isolation_report()
        assert report["production_hash"] == before
        assert report["overlay_keys_in_production"] == []
        assert report["n_test_accounts"] == 30

    def test_campaign_persists_selections(self, corpus, state_model, session_model):
        service = make_service(corpus, state_model)
        logs = run_campaign(service, session_model, 10, seed=79)
        for record in logs:
            account_id = f"sim-{record.user_id:08d}"
            data = service.udss_read(account_id)
            want = [a for a, r in zip(record.session.artists,
                                      record.session.responses) if r]
            assert data["selections"] == want
            assert data["onboarding_complete"] is True


class TestWireProtocol:
    def test_handle_message_roundtrip(self, corpus, state_model):
        service = make_service(corpus, state_model)
        created = handle_message(service, {
            "v": 1, "kind": "create_account", "seed": 5, "request_id": "c1"})
        assert created["status"] == "ok"
        account_id = created["payload"]["account_id"]
        nav = handle_message(service, {
            "v": 1, "kind": "onboarding", "account_id": account_id,
            "op": "navigate", "request_id": "n1"})
        assert nav["status"] == "ok"
        read = handle_message(service, {
            "v": 1, "kind": "read", "account_id": account_id, "request_id": "r1"})
        assert set(read["payload"]) == set(USER_DATA_TEMPLATE)

    def test_version_and_kind_guards(self, corpus, state_model):
        service = make_service(corpus, state_model)
        bad_version = handle_message(service, {"v": 99, "kind": "read"})
        assert bad_version["status"] == "error" and bad_version["code"] == "bad-version"
        bad_kind = handle_message(service, {"v": 1, "kind": "dance"})
        assert bad_kind["code"] == "bad-kind"

    def test_socket_server_roundtrip(self, corpus, state_model):
        service = make_service(corpus, state_model)
        server = ServiceServer(service, port=0)
        server.start()
        try:
            client = ServiceClient(*server.address)
            created = client.request("create_account", seed=9)
            assert created["status"] == "ok"
            account_id = created["payload"]["account_id"]
            nav = client.request("onboarding", account_id=account_id, op="navigate")
            assert nav["status"] == "ok"
            sel = client.request(
                "onboarding", account_id=account_id, op="select",
                payload={"artist_id": nav["payload"]["artist_id"]})
            assert sel["status"] == "ok"
            audit = client.request("isolation")
            assert audit["payload"]["overlay_keys_in_production"] == []
            client.close()
        finally:
            server.stop()


class TestHashing:
    def test_canonical_hash_key_order_invariant(self):
        assert canonical_hash({"a": 1, "b": 2}) == canonical_hash({"b": 2, "a": 1})

    def test_store_hash_tracks_content(self, corpus):
        store = ProductionStore()
        store.seed_demo_accounts(corpus, 5, seed=1)
        h1 = store.content_hash()
        store.increment_counter("geo0-device0", 1)
        assert store.content_hash() != h1
