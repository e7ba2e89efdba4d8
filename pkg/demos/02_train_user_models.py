"""Train the user state generator and the session generator on collected
logs, then check on-policy fidelity of the generated sessions.

Desk-scale demo (a few minutes); the full-scale equivalents live in the
acceptance suite. Run:  python3 demos/02_train_user_models.py
"""

import numpy as np

from onboardsim.metrics import interest_pr, ks_gap, wasserstein_1d
from onboardsim.policies import BaselinePolicyFactory
from onboardsim.sessiongen import SessionGenConfig, rollout_sessions, train_sessiongen
from onboardsim.stategen import StateGenConfig, train_stategen
from onboardsim.world import WorldConfig, collect_logs, sample_corpus

corpus = sample_corpus(seed=0, m=300, d=16, n_genres=5)
world = WorldConfig()
baseline = BaselinePolicyFactory(corpus)
train_logs = collect_logs(corpus, [baseline], 4000, seed=1, config=world)
held_logs = collect_logs(corpus, [baseline], 1500, seed=2, config=world)
held_lengths = np.array([len(r.state.interests) for r in held_logs])

print("== user state generator ==")
state_model, history = train_stategen(
    train_logs, corpus,
    StateGenConfig(epochs=8, lr=5e-3, lr_decay=0.93, batch_size=128, seed=11),
    eval_lengths=held_lengths,
)
for row in history:
    print(f"  epoch {row['epoch']:2d}  train nll {row['train_nll']:7.3f}  "
          f"interest-count W {row['wasserstein_interest_count']:6.3f}")

states = state_model.sample_states(1500, seed=21)
gen_lengths = np.array([len(s.interests) for s in states])
print(f"interest count: generated mean {gen_lengths.mean():.2f} "
      f"vs real {held_lengths.mean():.2f} "
      f"(W = {wasserstein_1d(gen_lengths, held_lengths):.3f})")
precision, recall = interest_pr(states, [r.state for r in held_logs], n=30)
print(f"top-30 artist marginals: precision {precision:.2f}, recall {recall:.2f}")

print("\n== session generator ==")
session_model, history = train_sessiongen(
    train_logs, corpus,
    SessionGenConfig(epochs=6, lr=3e-3, lr_decay=0.9, seed=12),
)
for row in history:
    print(f"  epoch {row['epoch']:2d}  train nll {row['train_nll']:.4f}")

sessions = rollout_sessions(session_model, states, baseline, seed=22)
gen_len = np.array([len(s) for s in sessions])
gen_sel = np.array([s.n_selections for s in sessions])
print(f"session length: generated mean {gen_len.mean():.1f} vs "
      f"real {held_logs.session_lengths().mean():.1f} "
      f"(KS gap {ks_gap(gen_len, held_logs.session_lengths()):.3f})")
print(f"selections: generated mean {gen_sel.mean():.2f} vs "
      f"real {held_logs.selection_counts().mean():.2f} "
      f"(KS gap {ks_gap(gen_sel, held_logs.selection_counts()):.3f})")
