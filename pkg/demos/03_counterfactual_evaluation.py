"""Counterfactual policy evaluation: train user models on behavior-policy
logs only, then replay an unseen predicted-CTR policy and compare the
simulated lift against the ground-truth oracle playing the same policy.

Run:  python3 demos/03_counterfactual_evaluation.py
"""

import numpy as np

from onboardsim.metrics import ks_gap, percent_change_ci
from onboardsim.policies import (
    BaselinePolicyFactory, DiversityPolicyFactory, ScoredPolicyFactory, fit_pctr,
)
from onboardsim.sessiongen import SessionGenConfig, auc_loss, rollout_sessions, train_sessiongen
from onboardsim.stategen import StateGenConfig, train_stategen
from onboardsim.world import LogDataset, LogRecord, WorldConfig, collect_logs, sample_corpus

corpus = sample_corpus(seed=0, m=300, d=16, n_genres=5)
world = WorldConfig()
baseline = BaselinePolicyFactory(corpus)
behavior = [baseline, DiversityPolicyFactory(corpus)]

train_logs = collect_logs(corpus, behavior, 5000, seed=1, config=world)
state_model, _ = train_stategen(
    train_logs, corpus,
    StateGenConfig(epochs=8, lr=5e-3, lr_decay=0.93, batch_size=128, seed=11))
session_model, _ = train_sessiongen(
    train_logs, corpus, SessionGenConfig(epochs=6, lr=3e-3, lr_decay=0.9, seed=12))

# the unseen policy: greedy re-ranking by predicted CTR
pctr = fit_pctr(train_logs, corpus)
unseen = ScoredPolicyFactory(corpus, pctr, 0.0, policy_id="pctr")
print(f"pCTR model heldout AUCLoss: {pctr.heldout_aucloss:.3f}")

n = 3000
states = state_model.sample_states(n, seed=33)
sim_treat = rollout_sessions(session_model, states, unseen, seed=34)
sim_ctrl = rollout_sessions(session_model, states, baseline, seed=34)
oracle_treat = collect_logs(corpus, [unseen], n, seed=35, config=world)
oracle_ctrl = collect_logs(corpus, [baseline], n, seed=36, config=world)


def lift(label, treat_vals, ctrl_vals, seed):
    est = percent_change_ci(treat_vals, ctrl_vals, n_boot=1000, seed=seed)
    print(f"  {label}: {est.point:+.2f}%  [{est.lower:+.2f}%, {est.upper:+.2f}%]")
    return est


print("\nselections lift of the unseen policy vs baseline:")
sim_est = lift("simulated", [s.n_selections for s in sim_treat],
               [s.n_selections for s in sim_ctrl], seed=1)
oracle_est = lift("oracle   ", oracle_treat.selection_counts(),
                  oracle_ctrl.selection_counts(), seed=2)
print(f"  confidence intervals overlap: {sim_est.overlaps(oracle_est)}")

print("\nimpressions lift:")
lift("simulated", [len(s) for s in sim_treat], [len(s) for s in sim_ctrl], seed=3)
lift("oracle   ", oracle_treat.session_lengths(), oracle_ctrl.session_lengths(), seed=4)

gap = ks_gap([len(s) for s in sim_treat], oracle_treat.session_lengths())
print(f"\nsession-length KS gap, simulated vs oracle under the unseen policy: {gap:.3f}")

# selection-prediction accuracy transfers to the unseen policy's logs
sim_logs = LogDataset(0)
for i, (state, session) in enumerate(zip(states, sim_treat)):
    sim_logs.append(LogRecord(user_id=i, policy_id="pctr", state=state,
                              session=session, seed=0, simulated=True))
print(f"AUCLoss on training logs:      {auc_loss(session_model, train_logs):.3f}")
print(f"AUCLoss on unseen-policy logs: {auc_loss(session_model, oracle_treat):.3f}")
