"""Run a simulation campaign through the production-style service layer and
audit the isolation guarantees: untouched production data, disjoint
keyspaces, overlay reads for test accounts only, and a wire-protocol
round trip.

Run:  python3 demos/04_service_isolation.py
"""

from onboardsim.policies import BaselinePolicyFactory
from onboardsim.sessiongen import SessionGenConfig, SessionGenModel, train_sessiongen
from onboardsim.simsvc import (
    OnboardingService, OverlayStore, ProductionStore, ServiceClient, ServiceServer,
    run_campaign, state_sampler_from_model,
)
from onboardsim.stategen import StateGenConfig, train_stategen
from onboardsim.world import WorldConfig, collect_logs, sample_corpus

corpus = sample_corpus(seed=0, m=200, d=16, n_genres=5)
world = WorldConfig()
baseline = BaselinePolicyFactory(corpus)
logs = collect_logs(corpus, [baseline], 1500, seed=1, config=world)
state_model, _ = train_stategen(
    logs, corpus, StateGenConfig(epochs=4, lr=5e-3, batch_size=128, seed=11))
session_model, _ = train_sessiongen(
    logs, corpus, SessionGenConfig(epochs=3, lr=3e-3, seed=12))

production = ProductionStore()
production.seed_demo_accounts(corpus, 40, seed=5)
service = OnboardingService(
    corpus, baseline, state_sampler_from_model(state_model),
    production=production, overlay=OverlayStore(), read_mode="merge",
)

before = production.content_hash()
campaign = run_campaign(service, session_model, n_users=500, seed=99,
                        policy_id="baseline")
after = production.content_hash()

print(f"campaign: {len(campaign)} simulated sessions, "
      f"mean length {campaign.session_lengths().mean():.1f}, "
      f"mean selections {campaign.selection_counts().mean():.2f}")
print(f"production store hash unchanged: {before == after}")
report = service.isolation_report()
print(f"overlay keys leaked into production: {report['overlay_keys_in_production']}")
print(f"test accounts created: {report['n_test_accounts']}")

# the same service is reachable over the newline-delimited socket protocol
server = ServiceServer(service, port=0)
server.start()
client = ServiceClient(*server.address)
created = client.request("create_account", seed=123456)
account_id = created["payload"]["account_id"]
nav = client.request("onboarding", account_id=account_id, op="navigate")
print(f"\nwire protocol: created {account_id}, "
      f"first artist to examine: {nav['payload']['artist_id']}")
sel = client.request("onboarding", account_id=account_id, op="select",
                     payload={"artist_id": nav["payload"]["artist_id"]})
print(f"selection acknowledged, inserted artists: {sel['payload']['inserted']}")
client.request("onboarding", account_id=account_id, op="submit")
home = client.request("onboarding", account_id=account_id, op="homepage")
print(f"homepage recommendations: {home['payload']['recommendations'][:5]} ...")
client.close()
server.stop()
