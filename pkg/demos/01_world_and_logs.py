"""Build a synthetic artist corpus, sample ground-truth users, and collect
onboarding logs under the two behavior policies.

Run from the repository root:  python3 demos/01_world_and_logs.py
"""

import numpy as np

from onboardsim.policies import BaselinePolicyFactory, DiversityPolicyFactory
from onboardsim.world import WorldConfig, collect_logs, sample_corpus, sample_user

corpus = sample_corpus(seed=0, m=300, d=16, n_genres=5)
print(f"corpus: {corpus.n_artists} artists, {corpus.n_genres} genres, "
      f"dim {corpus.dim}")
print(f"top-5 popularity share: {np.sort(corpus.popularity)[-5:].sum():.2f}")

config = WorldConfig()
policies = [BaselinePolicyFactory(corpus), DiversityPolicyFactory(corpus)]
logs = collect_logs(corpus, policies, n_users=2000, seed=7, config=config)

lengths = logs.session_lengths()
selections = logs.selection_counts()
print(f"\ncollected {len(logs)} sessions "
      f"({len(logs.by_policy('baseline'))} baseline / "
      f"{len(logs.by_policy('diversity'))} diversity)")
print(f"session length: mean {lengths.mean():.1f}, p50 {np.median(lengths):.0f}, "
      f"p95 {np.percentile(lengths, 95):.0f}")
print(f"selections/session: mean {selections.mean():.2f}; "
      f"overall CTR {selections.sum() / lengths.sum():.3f}")

# the shape behind the behavioral oracle: click-through rises with the
# cosine similarity between the queried artist and the user's taste
cosines, clicks = [], []
for record in logs:
    user = sample_user(corpus, record.user_id, logs.seed, config)
    cos = corpus.embeddings @ user.taste
    for artist, r, _s in record.session.turns():
        cosines.append(cos[artist])
        clicks.append(r)
cosines, clicks = np.array(cosines), np.array(clicks)
print("\nCTR by query-taste cosine bucket:")
edges = np.quantile(cosines, np.linspace(0, 1, 7))
for lo, hi in zip(edges[:-1], edges[1:]):
    mask = (cosines >= lo) & (cosines <= hi)
    bar = "#" * int(40 * clicks[mask].mean())
    print(f"  [{lo:+.2f}, {hi:+.2f}]  {clicks[mask].mean():.3f}  {bar}")

# selected artists sit closer to post-onboarding interests than skips
sel_sims, skip_sims = [], []
for record in logs:
    centroid = corpus.embeddings[record.state.interests].mean(axis=0)
    centroid /= np.linalg.norm(centroid)
    for artist, r, _s in record.session.turns():
        (sel_sims if r else skip_sims).append(corpus.embeddings[artist] @ centroid)
print(f"\ninterest similarity of selected artists: {np.mean(sel_sims):+.3f}")
print(f"interest similarity of skipped artists:  {np.mean(skip_sims):+.3f}")
