"""Calibration scratchpad: model fit quality and policy effect sizes.
Not part of the package."""
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from onboardsim.world import sample_corpus, WorldConfig, collect_logs
from onboardsim.policies import (
    BaselinePolicyFactory, DiversityPolicyFactory, fit_pctr, ScoredPolicyFactory,
    TurnFilter)
from onboardsim.stategen import train_stategen, StateGenConfig
from onboardsim.sessiongen import (
    train_sessiongen, SessionGenConfig, rollout_sessions, auc_loss)
from onboardsim.metrics import ks_gap, wasserstein_1d

N_TRAIN = int(sys.argv[1]) if len(sys.argv) > 1 else 20000
MIXED = len(sys.argv) > 2 and sys.argv[2] == "mixed"

corpus = sample_corpus(0, m=500, d=16, n_genres=5)
wc = WorldConfig()
base = BaselinePolicyFactory(corpus)
div = DiversityPolicyFactory(corpus)
behavior = [base, div] if MIXED else [base]

t0 = time.time()
logs = collect_logs(corpus, behavior, N_TRAIN, seed=1, config=wc)
held = collect_logs(corpus, behavior, 4096, seed=2, config=wc)
print(f"collect: {time.time()-t0:.0f}s  len={logs.session_lengths().mean():.2f} "
      f"sel={logs.selection_counts().mean():.2f} "
      f"interests={np.mean([len(r.state.interests) for r in logs]):.2f}", flush=True)

t0 = time.time()
sg_cfg = StateGenConfig(epochs=12, lr=5e-3, lr_decay=0.93, batch_size=128, seed=11)
eval_lengths = np.array([len(r.state.interests) for r in held])
smodel, shist = train_stategen(logs, corpus, sg_cfg, eval_lengths=eval_lengths)
print(f"stategen {time.time()-t0:.0f}s", flush=True)
for h in shist[::4] + [shist[-1]]:
    print("  ", {k: round(v, 4) for k, v in h.items() if v is not None}, flush=True)

t0 = time.time()
ss_cfg = SessionGenConfig(epochs=10, lr=3e-3, lr_decay=0.9, seed=12)
gmodel, ghist = train_sessiongen(logs, corpus, ss_cfg)
print(f"sessiongen {time.time()-t0:.0f}s", flush=True)
for h in ghist[::3] + [ghist[-1]]:
    print("  ", {k: round(v, 4) for k, v in h.items() if v is not None}, flush=True)

t0 = time.time()
states = smodel.sample_states(4096, seed=21)
sessions = rollout_sessions(gmodel, states, base, seed=22)
gen_len = np.array([len(s) for s in sessions])
gen_sel = np.array([s.n_selections for s in sessions])
held_base = held if not MIXED else None
if held_base is None:
    from onboardsim.world import LogDataset
    held_base = LogDataset(0)
    for r in held.by_policy("baseline"):
        held_base.append(r)
print(f"rollout 4096: {time.time()-t0:.0f}s", flush=True)
print(f"KS length: {ks_gap(gen_len, held_base.session_lengths()):.4f} (<0.05)"
      f"  KS selections: {ks_gap(gen_sel, held_base.selection_counts()):.4f} (<0.07)", flush=True)
print(f"gen len {gen_len.mean():.2f} vs held {held_base.session_lengths().mean():.2f}; "
      f"gen sel {gen_sel.mean():.2f} vs held {held_base.selection_counts().mean():.2f}", flush=True)
print(f"W interests: {wasserstein_1d(np.array([len(s.interests) for s in states]), eval_lengths):.3f}", flush=True)
print(f"AUCLoss train: {auc_loss(gmodel, logs):.4f}", flush=True)

pctr = fit_pctr(logs, corpus)
pctr_sweep = fit_pctr(logs, corpus, TurnFilter(drop_features=("log_geo_popularity",)))
print("pctr weights", np.round(pctr.weights, 3), "aucloss", round(pctr.heldout_aucloss, 3), flush=True)
pfac = ScoredPolicyFactory(corpus, pctr, 0.0, policy_id="pctr")
oracle_p = collect_logs(corpus, [pfac], 6000, seed=31, config=wc)
oracle_b = collect_logs(corpus, [base], 6000, seed=32, config=wc)
sim_states = smodel.sample_states(6000, seed=33)
sim_p = rollout_sessions(gmodel, sim_states, pfac, seed=34)
sim_b = rollout_sessions(gmodel, sim_states, base, seed=34)
def chg(t, c): return (np.mean(t) - np.mean(c)) / np.mean(c) * 100
print(f"oracle: pctr sel {oracle_p.selection_counts().mean():.3f} vs base {oracle_b.selection_counts().mean():.3f} ({chg(oracle_p.selection_counts(), oracle_b.selection_counts()):+.2f}%)", flush=True)
print(f"sim:    pctr sel {np.mean([s.n_selections for s in sim_p]):.3f} vs base {np.mean([s.n_selections for s in sim_b]):.3f} ({chg([s.n_selections for s in sim_p], [s.n_selections for s in sim_b]):+.2f}%)", flush=True)
print(f"oracle imp {chg(oracle_p.session_lengths(), oracle_b.session_lengths()):+.2f}%  sim imp {chg([len(s) for s in sim_p], [len(s) for s in sim_b]):+.2f}%", flush=True)
print(f"KS length sim-pctr vs oracle-pctr: {ks_gap([len(s) for s in sim_p], oracle_p.session_lengths()):.4f} (<0.10)", flush=True)
print(f"AUCLoss unseen: {auc_loss(gmodel, oracle_p):.4f}", flush=True)

for lam in [0.001, 0.05, 0.2, 0.5, 2.0, 10.0]:
    arm = collect_logs(corpus, [ScoredPolicyFactory(corpus, pctr_sweep, lam)], 8000, seed=41, config=wc)
    print(f"lam={lam}: oracle sel {arm.selection_counts().mean():.4f} len {arm.session_lengths().mean():.2f}", flush=True)
