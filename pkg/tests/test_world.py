import math

import numpy as np
import pytest

from onboardsim.slates import PolicyViolation, SlateWalk
from onboardsim.world import (
    MAX_SESSION_TURNS, EmbeddingSpace, LogDataset, ObservableContext, OracleUser,
    Session, UserState, WorldConfig, WorldError, collect_logs, oracle_respond,
    post_onboarding_topk, rollout_oracle_session, sample_corpus, sample_user,
)
from onboardsim.rng import rng_for


def hand_corpus(vectors, genres=None, null=None, popularity=None):
    emb = np.array(vectors, dtype=float)
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    m, d = emb.shape
    genres = np.array(genres if genres is not None else [0] * m)
    pop = np.array(popularity if popularity is not None else [1.0 / m] * m)
    n_genres = int(genres.max()) + 1
    centroids = np.stack([
        emb[genres == g].mean(axis=0) if (genres == g).any() else np.eye(d)[0]
        for g in range(n_genres)
    ])
    return EmbeddingSpace(
        dim=d, embeddings=emb,
        null_embedding=np.array(null) if null is not None else np.eye(d)[-1],
        genres=genres, popularity=pop / pop.sum(), genre_centroids=centroids,
        geo_genre_affinity=np.ones((4, n_genres)), n_geo=4, n_device=2,
    )


class ListPolicy:
    """Scripted policy: fixed slate plus fixed insertions on select."""

    policy_id = "scripted"

    def __init__(self, slate, inserts=None):
        self.slate = list(slate)
        self.inserts = dict(inserts or {})

    def initial_slate(self):
        return list(self.slate)

    def on_select(self, artist):
        return list(self.inserts.get(artist, []))

    def on_skip(self, artist):
        return []


class TestSampleCorpus:
    def test_tiny_corpus_one_artist_per_genre(self):
        corpus = sample_corpus(3, m=3, d=8, n_genres=3)
        norms = np.linalg.norm(corpus.embeddings, axis=1)
        np.testing.assert_allclose(norms, 1.0)
        assert list(corpus.genres) == [0, 1, 2]
        for i in range(3):
            cos = corpus.embeddings[i] @ corpus.genre_centroids[i]
            assert cos > 0.95  # own centroid plus small noise

    def test_same_seed_identical(self):
        a = sample_corpus(7, m=40, d=8, n_genres=4)
        b = sample_corpus(7, m=40, d=8, n_genres=4)
        np.testing.assert_array_equal(a.embeddings, b.embeddings)
        np.testing.assert_array_equal(a.popularity, b.popularity)
        np.testing.assert_array_equal(a.null_embedding, b.null_embedding)

    def test_within_genre_cosine_exceeds_cross_genre(self):
        corpus = sample_corpus(0, m=200, d=16, n_genres=5)
        sims = corpus.embeddings @ corpus.embeddings.T
        same = corpus.genres[:, None] == corpus.genres[None, :]
        off_diag = ~np.eye(200, dtype=bool)
        within = sims[same & off_diag].mean()
        cross = sims[~same].mean()
        assert within > cross

    def test_centroid_separation_enforced(self):
        corpus = sample_corpus(0, m=50, d=16, n_genres=5)
        gram = corpus.genre_centroids @ corpus.genre_centroids.T
        np.fill_diagonal(gram, 0)
        assert gram.max() < 0.5

    def test_infeasible_separation_raises(self):
        with pytest.raises(WorldError, match="separate"):
            sample_corpus(0, m=40, d=2, n_genres=12, max_attempts=5)

    def test_popularity_is_power_law(self):
        corpus = sample_corpus(0, m=100, d=8, n_genres=4)
        pop = np.sort(corpus.popularity)[::-1]
        assert pop.sum() == pytest.approx(1.0)
        assert pop[0] / pop[-1] > 10  # heavy head


def _user(corpus, taste, patience=100.0, gain=4.0, bias=-2.0, geo=0, device=0):
    taste = np.asarray(taste, dtype=float)
    return OracleUser(
        user_id=0, context=ObservableContext(geo, device),
        genre_mixture=np.ones(corpus.n_genres) / corpus.n_genres,
        taste=taste / np.linalg.norm(taste), patience=patience,
        select_gain=gain, select_bias=bias, n_interests=3,
    )


class TestOracleRespond:
    def test_alignment_monotonicity(self):
        corpus = hand_corpus([[1, 0], [0, 1]])
        user = _user(corpus, [1, 0])
        empty = Session([], [], [])
        p_aligned, _ = oracle_respond(user, empty, 0, corpus, WorldConfig())
        p_orth, _ = oracle_respond(user, empty, 1, corpus, WorldConfig())
        assert p_aligned > p_orth

    def test_first_turn_continuation_is_ceiling(self):
        corpus = hand_corpus([[1, 0]])
        user = _user(corpus, [1, 0])
        _, p_continue = oracle_respond(user, Session([], [], []), 0, corpus, WorldConfig())
        assert p_continue == pytest.approx(0.98)

    def test_sigmoid_midpoint_at_half_cosine(self):
        # gain 4, bias -2, cosine 0.5 -> logistic(0) = 0.5
        corpus = hand_corpus([[0.5, math.sqrt(3) / 2]])
        user = _user(corpus, [1, 0], gain=4.0, bias=-2.0)
        p_select, _ = oracle_respond(user, Session([], [], []), 0, corpus, WorldConfig())
        assert p_select == pytest.approx(0.5, abs=1e-12)

    def test_repeated_query_rejected(self):
        corpus = hand_corpus([[1, 0], [0, 1]])
        user = _user(corpus, [1, 0])
        history = Session([0], [1], [1])
        with pytest.raises(WorldError):
            oracle_respond(user, history, 0, corpus, WorldConfig())

    def test_recent_selections_lift_continuation(self):
        corpus = hand_corpus([[1, 0], [0, 1], [1, 1]])
        user = _user(corpus, [1, 0])
        config = WorldConfig()
        with_sel = Session([0, 1], [1, 1], [1, 1])
        without = Session([0, 1], [0, 0], [1, 1])
        _, p_hot = oracle_respond(user, with_sel, 2, corpus, config)
        _, p_cold = oracle_respond(user, without, 2, corpus, config)
        assert p_hot > p_cold


class TestPostOnboardingTopk:
    def test_pure_taste_gives_nearest_by_cosine(self):
        corpus = sample_corpus(5, m=30, d=8, n_genres=3)
        user = _user(corpus, corpus.embeddings[4])
        config = WorldConfig(exploration_weight=0.0, selection_seed_weight=0.5)
        state = post_onboarding_topk(user, [], 5, corpus, config, rng_for(0, "t"))
        cosines = corpus.embeddings @ user.taste
        want = list(np.argsort(-cosines)[:5])
        assert state.interests == want

    def test_k_one_singleton(self):
        corpus = sample_corpus(5, m=10, d=8, n_genres=2)
        user = _user(corpus, corpus.embeddings[0])
        config = WorldConfig(exploration_weight=0.0)
        state = post_onboarding_topk(user, [], 1, corpus, config, rng_for(0, "t"))
        assert len(state.interests) == 1

    def test_selection_seed_dominates(self):
        corpus = sample_corpus(6, m=25, d=8, n_genres=3)
        user = _user(corpus, corpus.embeddings[1])
        config = WorldConfig(taste_weight=0.0, exploration_weight=0.0,
                             selection_seed_weight=1.0)
        state = post_onboarding_topk(user, [17], 4, corpus, config, rng_for(0, "t"))
        assert state.interests[0] == 17

    def test_k_above_cap_rejected(self):
        corpus = sample_corpus(5, m=30, d=8, n_genres=3)
        user = _user(corpus, corpus.embeddings[0])
        with pytest.raises(WorldError):
            post_onboarding_topk(user, [], 21, corpus, WorldConfig(), rng_for(0, "t"))


class TestCollectLogs:
    def test_zero_users_empty_dataset(self):
        corpus = sample_corpus(1, m=20, d=8, n_genres=2)
        ds = collect_logs(corpus, [lambda ctx: ListPolicy(range(20))], 0, seed=0)
        assert len(ds) == 0

    def test_forced_continuation_truncates_at_300(self):
        corpus = sample_corpus(1, m=400, d=8, n_genres=2)
        config = WorldConfig(continue_ceiling=1.0,
                             patience_clip=(math.inf, math.inf))
        ds = collect_logs(corpus, [lambda ctx: ListPolicy(range(400))], 3,
                          seed=0, config=config)
        for record in ds:
            assert len(record.session) == MAX_SESSION_TURNS
            assert record.session.truncated
            assert record.session.continuations[-1] == 1

    def test_round_robin_assignment_splits_evenly(self):
        corpus = sample_corpus(1, m=30, d=8, n_genres=2)

        def named(pid):
            def factory(ctx):
                policy = ListPolicy(range(30))
                policy.policy_id = pid
                return policy
            return factory

        ds = collect_logs(corpus, [named("a"), named("b")], 100, seed=0)
        assert len(ds.by_policy("a")) == 50
        assert len(ds.by_policy("b")) == 50

    def test_same_seed_byte_identical_file(self, tmp_path):
        corpus = sample_corpus(1, m=30, d=8, n_genres=2)
        for name in ("one", "two"):
            ds = collect_logs(corpus, [lambda ctx: ListPolicy(range(30))], 20, seed=9)
            ds.save(tmp_path / name)
        assert (tmp_path / "one").read_bytes() == (tmp_path / "two").read_bytes()

    def test_empty_slate_raises(self):
        corpus = sample_corpus(1, m=10, d=8, n_genres=2)
        with pytest.raises(WorldError, match="empty slate"):
            collect_logs(corpus, [lambda ctx: ListPolicy([])], 1, seed=0)

    def test_exhaustion_forces_termination_with_flag(self):
        corpus = sample_corpus(1, m=6, d=8, n_genres=2)
        config = WorldConfig(continue_ceiling=1.0,
                             patience_clip=(math.inf, math.inf))
        ds = collect_logs(corpus, [lambda ctx: ListPolicy(range(6))], 2,
                          seed=0, config=config)
        for record in ds:
            assert record.session.exhausted
            assert len(record.session) == 6
            assert record.session.continuations[-1] == 0

    def test_no_behavior_policy_rejected(self):
        corpus = sample_corpus(1, m=10, d=8, n_genres=2)
        with pytest.raises(WorldError):
            collect_logs(corpus, [], 5, seed=0)


@pytest.fixture(scope="module")
def collected():
    corpus = sample_corpus(2, m=200, d=16, n_genres=5)
    config = WorldConfig()
    from onboardsim.policies import BaselinePolicyFactory
    logs = collect_logs(corpus, [BaselinePolicyFactory(corpus)], 1200,
                        seed=4, config=config)
    return corpus, config, logs


class TestWorldInvariants:
    def test_ctr_monotone_in_cosine_buckets(self, collected):
        corpus, config, logs = collected
        cosines, clicks = [], []
        for record in logs:
            user = sample_user(corpus, record.user_id, logs.seed, config)
            cos = corpus.embeddings @ user.taste
            for artist, r, _s in record.session.turns():
                cosines.append(cos[artist])
                clicks.append(r)
        cosines = np.array(cosines)
        clicks = np.array(clicks)
        edges = np.quantile(cosines, np.linspace(0, 1, 7))
        ctrs = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            mask = (cosines >= lo) & (cosines <= hi)
            ctrs.append(clicks[mask].mean())
        assert all(b >= a for a, b in zip(ctrs, ctrs[1:]))

    def test_interest_similarity_separates_selected_from_skipped(self, collected):
        corpus, config, logs = collected
        sel_sims, skip_sims = [], []
        for record in logs:
            interests = record.state.interests
            centroid = corpus.embeddings[interests].mean(axis=0)
            centroid /= np.linalg.norm(centroid)
            for artist, r, _s in record.session.turns():
                (sel_sims if r else skip_sims).append(corpus.embeddings[artist] @ centroid)
        assert np.mean(sel_sims) > np.mean(skip_sims)

    def test_sessions_validate(self, collected):
        _, _, logs = collected
        for record in logs:
            record.session.validate()


class TestSessionAndDataset:
    def test_session_invariants_enforced(self):
        with pytest.raises(WorldError):
            Session([1, 2], [0, 0], [0, 0]).validate()  # early termination flag
        with pytest.raises(WorldError):
            Session([1, 1], [0, 0], [1, 0]).validate()  # duplicate artist
        with pytest.raises(WorldError):
            Session([1, 2], [0, 0], [1, 1]).validate()  # dangling continuation
        Session([1, 2], [0, 1], [1, 0]).validate()

    def test_duplicate_interests_rejected(self):
        with pytest.raises(WorldError):
            UserState(ObservableContext(0, 0), [1, 1])

    def test_dataset_roundtrip(self, tmp_path):
        corpus = sample_corpus(1, m=30, d=8, n_genres=2)
        ds = collect_logs(corpus, [lambda ctx: ListPolicy(range(30))], 10, seed=3)
        path = tmp_path / "logs.jsonl"
        ds.save(path)
        loaded = LogDataset.load(path)
        assert len(loaded) == len(ds)
        for a, b in zip(ds, loaded):
            assert a.to_json() == b.to_json()

    def test_load_rejects_other_files(self, tmp_path):
        path = tmp_path / "junk.jsonl"
        path.write_text('{"format": "something-else"}\n')
        with pytest.raises(WorldError):
            LogDataset.load(path)


class TestSlateWalk:
    def test_cascade_insertion_order(self):
        # select a1 -> its insertions are examined immediately after,
        # then the original slate resumes
        policy = ListPolicy([10, 11, 12], inserts={10: [20, 21]})
        walk = SlateWalk(policy)
        seen = []
        artist = walk.next()
        seen.append(artist)
        walk.feed(artist, True)
        for _ in range(4):
            artist = walk.next()
            if artist is None:
                break
            seen.append(artist)
            walk.feed(artist, False)
        assert seen == [10, 20, 21, 11, 12]

    def test_duplicate_queue_entries_deduped(self):
        policy = ListPolicy([1, 2, 3], inserts={1: [3]})
        walk = SlateWalk(policy)
        a = walk.next(); walk.feed(a, True)   # 1 -> inserts 3
        b = walk.next(); walk.feed(b, False)  # 3 (jumped the queue)
        c = walk.next(); walk.feed(c, False)  # 2
        assert (a, b, c) == (1, 3, 2)
        assert walk.next() is None            # the later 3 is skipped

    def test_reproposing_shown_artist_raises(self):
        policy = ListPolicy([1, 2], inserts={2: [1]})
        walk = SlateWalk(policy)
        walk.feed(walk.next(), False)  # shows 1
        with pytest.raises(PolicyViolation):
            walk.feed(walk.next(), True)  # selecting 2 re-proposes 1

    def test_upcoming_is_readonly_view(self):
        policy = ListPolicy([5, 6, 7])
        walk = SlateWalk(policy)
        walk.next()
        assert walk.upcoming() == [6, 7]
        assert walk.next() == 6
