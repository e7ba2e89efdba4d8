import math

import numpy as np
import pytest

from onboardsim.nn import TrainingDiverged
from onboardsim.stategen import (
    StateGenConfig, StateGenError, StateGenModel, dataset_nll, fit_context_prior,
    train_stategen,
)
from onboardsim.world import (
    LogDataset, LogRecord, ObservableContext, Session, UserState, sample_corpus,
)
from tests.test_world import hand_corpus


def record_for(state, user_id=0):
    return LogRecord(
        user_id=user_id, policy_id="x", state=state,
        session=Session([0], [1], [0]), seed=0,
    )


def dataset_of(interest_lists, contexts=None):
    ds = LogDataset(0)
    for i, ints in enumerate(interest_lists):
        ctx = contexts[i] if contexts else ObservableContext(0, 0)
        ds.append(record_for(UserState(ctx, list(ints)), user_id=i))
    return ds


class TestContextPrior:
    def test_single_cell_dominates_up_to_smoothing(self):
        ds = dataset_of([[0]] * 40, [ObservableContext(1, 1)] * 40)
        prior = fit_context_prior(ds, 4, 2)
        assert prior[1, 1] == pytest.approx(41 / 48)
        assert prior.sum() == pytest.approx(1.0)

    def test_uniform_logs_give_uniform_prior(self):
        contexts = [ObservableContext(g, d) for g in range(4) for d in range(2)] * 5
        ds = dataset_of([[0]] * len(contexts), contexts)
        prior = fit_context_prior(ds, 4, 2)
        np.testing.assert_allclose(prior, 1 / 8)

    def test_add_one_smoothing_hand_counts(self):
        contexts = [ObservableContext(0, 0)] * 30 + [ObservableContext(0, 1)] * 10
        ds = dataset_of([[0]] * 40, contexts)
        prior = fit_context_prior(ds, 4, 2)
        want = np.ones((4, 2))
        want[0, 0], want[0, 1] = 31, 11
        np.testing.assert_allclose(prior, want / 48)

    def test_empty_logs_rejected(self):
        with pytest.raises(StateGenError):
            fit_context_prior(LogDataset(0), 4, 2)


@pytest.fixture
def tiny_model():
    corpus = hand_corpus([[1, 0, 0], [0, 1, 0], [0.6, 0.8, 0]],
                         null=[0, 0, 1])
    config = StateGenConfig(hidden=8, k_max=5, seed=3)
    return corpus, StateGenModel(corpus, config)


class TestStepAndDistribution:
    def test_zeroed_core_gives_zero_output(self, tiny_model):
        corpus, model = tiny_model
        for _, tensor in model.store.trainable():
            tensor.data = np.zeros_like(tensor.data)
        h, c, out = model.initial_state(np.array([0]))
        h, c, out = model.step(h, c, np.array([1]), np.array([1]))
        np.testing.assert_allclose(out.data, 0.0)

    def test_step_purity(self, tiny_model):
        corpus, model = tiny_model
        h, c, out = model.initial_state(np.array([2]))
        a = model.step(h, c, np.array([0]), np.array([1]))[2].data
        b = model.step(h, c, np.array([0]), np.array([1]))[2].data
        np.testing.assert_array_equal(a, b)

    def test_unknown_artist_rejected(self, tiny_model):
        corpus, model = tiny_model
        h, c, out = model.initial_state(np.array([0]))
        with pytest.raises(StateGenError):
            model.step(h, c, np.array([7]), np.array([1]))

    def test_single_unit_core_matches_lstm_oracle(self):
        # model's recurrent step must equal a bare LSTM cell step on the
        # same concatenated input
        from onboardsim.nn import LstmCell, ParamStore, Tensor

        corpus = hand_corpus([[1, 0], [0, 1]], null=[1, 1])
        model = StateGenModel(corpus, StateGenConfig(hidden=4, k_max=3, seed=9))
        h, c, _ = model.initial_state(np.array([1]))
        h2, c2, _ = model.step(h, c, np.array([0]), np.array([1]))
        x = np.concatenate([corpus.embeddings[[0]],
                            np.eye(4)[[1]]], axis=1)
        ref_h, ref_c, _ = model.core.step(h, c, Tensor(x))
        np.testing.assert_array_equal(h2.data, ref_h.data)
        np.testing.assert_array_equal(c2.data, ref_c.data)

    def test_zero_output_uniform_distribution(self, tiny_model):
        corpus, model = tiny_model
        dist = model.next_interest_dist(np.zeros(3), excluded=[2])
        # artists 0, 1 and the null share the mass equally
        np.testing.assert_allclose(dist[[0, 1, 3]], 1 / 3)
        assert dist[2] == 0.0

    def test_hand_logits_ln2(self):
        corpus = hand_corpus([[1, 0, 0], [0, 1, 0]], null=[0, 0, 1])
        model = StateGenModel(corpus, StateGenConfig(hidden=4, k_max=3, seed=0))
        out = np.array([math.log(2.0), 0.0, 0.0])
        dist = model.next_interest_dist(out, excluded=[])
        np.testing.assert_allclose(dist, [0.5, 0.25, 0.25])
        dist2 = model.next_interest_dist(out, excluded=[0])
        np.testing.assert_allclose(dist2, [0.0, 0.5, 0.5])

    def test_all_excluded_is_point_mass_on_null(self, tiny_model):
        corpus, model = tiny_model
        dist = model.next_interest_dist(np.ones(3), excluded=[0, 1, 2])
        np.testing.assert_array_equal(dist, [0, 0, 0, 1.0])

    def test_distribution_sums_to_one_and_zeroes_excluded(self, tiny_model):
        corpus, model = tiny_model
        rng = np.random.default_rng(0)
        for _ in range(20):
            out = rng.normal(size=3) * 3
            excluded = [int(a) for a in
                        rng.choice(3, size=rng.integers(0, 3), replace=False)]
            dist = model.next_interest_dist(out, excluded)
            assert dist.sum() == pytest.approx(1.0, abs=1e-9)
            assert (dist >= 0).all()
            for e in excluded:
                assert dist[e] == 0.0


class TestSampling:
    def test_null_dominant_head_gives_empty_interests(self, tiny_model):
        corpus, model = tiny_model
        # force the output toward the null embedding regardless of input
        model.readout.weights[0].data[:] = 0.0
        model.readout.biases[0].data = 30.0 * corpus.null_embedding
        state = model.sample_state(seed=4)
        assert state.interests == []

    def test_anti_null_head_caps_at_k_max(self):
        corpus = sample_corpus(5, m=30, d=8, n_genres=3)
        model = StateGenModel(corpus, StateGenConfig(hidden=8, k_max=5, seed=3))
        model.readout.weights[0].data[:] = 0.0
        model.readout.biases[0].data = -30.0 * corpus.null_embedding
        state = model.sample_state(seed=4)
        assert len(state.interests) == model.config.k_max

    def test_same_seed_identical_state(self, tiny_model):
        corpus, model = tiny_model
        a = model.sample_state(seed=11)
        b = model.sample_state(seed=11)
        assert a == b

    def test_no_duplicates_in_samples(self):
        corpus = sample_corpus(1, m=12, d=8, n_genres=3)
        model = StateGenModel(corpus, StateGenConfig(hidden=8, k_max=8, seed=2))
        for state in model.sample_states(200, seed=3):
            assert len(set(state.interests)) == len(state.interests)

    def test_monte_carlo_frequencies_match_distribution(self):
        # 5-artist corpus, fixed output: 100k draws inside 3 binomial sd,
        # including the null mass and a without-replacement renormalization
        corpus = sample_corpus(2, m=5, d=8, n_genres=2)
        model = StateGenModel(corpus, StateGenConfig(hidden=8, k_max=4, seed=0))
        rng = np.random.default_rng(0)
        out = rng.normal(size=8)
        for excluded in ([], [2, 4]):
            dist = model.next_interest_dist(out, excluded)
            n = 100_000
            draws = rng.choice(6, size=n, p=dist)  # oracle sampler
            model_draws = model._draw(np.tile(dist, (n, 1)), np.random.default_rng(1))
            for idx in range(6):
                p = dist[idx]
                sd = math.sqrt(max(p * (1 - p) / n, 1e-12))
                freq = (model_draws == idx).mean()
                assert abs(freq - p) <= max(3 * sd, 1e-9)
            assert (np.bincount(model_draws, minlength=6)[excluded] == 0).all()


class TestTraining:
    def test_init_loss_matches_uniform_cross_entropy(self):
        corpus = sample_corpus(3, m=50, d=8, n_genres=2)
        config = StateGenConfig(hidden=8, k_max=6, seed=1)
        model = StateGenModel(corpus, config)
        model.readout.weights[0].data[:] = 0.0
        model.readout.biases[0].data[:] = 0.0
        lists = [[1, 2, 3], [4], [5, 6]]
        ds = dataset_of(lists)
        # per user: sum over steps k=0..K of ln(eligible_k + 1)
        want = np.mean([
            sum(math.log(50 - k + 1) for k in range(len(ints) + 1))
            for ints in lists
        ])
        got = dataset_nll(model, list(ds))
        assert got == pytest.approx(want, rel=1e-9)
        # and the coarse closed form from the uniform logits
        approx = np.mean([(len(ints) + 1) * math.log(51) for ints in lists])
        assert got == pytest.approx(approx, rel=0.01)

    def test_memorizes_single_repeated_sequence(self):
        corpus = sample_corpus(4, m=15, d=8, n_genres=3)
        ds = dataset_of([[3, 7, 1]] * 60)
        config = StateGenConfig(hidden=16, k_max=5, epochs=30, lr=2e-2,
                                batch_size=30, seed=2, heldout_fraction=0.0)
        model, _ = train_stategen(ds, corpus, config)
        # greedy decode must reproduce the sequence then stop
        h, c, out = model.initial_state(np.array([0]))
        seq = []
        excluded: list[int] = []
        for k in range(5):
            dist = model.next_interest_dist(out.data[0], excluded)
            pick = int(np.argmax(dist))
            if pick == model.null_index:
                break
            seq.append(pick)
            excluded.append(pick)
            h, c, out = model.step(h, c, np.array([pick]), np.array([len(seq)]))
        assert seq == [3, 7, 1]

    def test_full_batch_loss_invariant_to_record_order(self):
        corpus = sample_corpus(5, m=20, d=8, n_genres=2)
        lists = [[1, 2], [3], [4, 5, 6], [7], [8, 9], [10], [11, 12], [13]]
        config = StateGenConfig(hidden=8, k_max=5, epochs=3, batch_size=64,
                                seed=6, heldout_fraction=0.0)
        _, hist_a = train_stategen(dataset_of(lists), corpus, config)
        _, hist_b = train_stategen(dataset_of(lists[::-1]), corpus, config)
        assert hist_a[-1]["train_nll"] == pytest.approx(
            hist_b[-1]["train_nll"], abs=1e-6)

    def test_diverging_loss_aborts(self):
        # a step size big enough to overflow parameters to inf produces a
        # NaN loss on the next batch, which must abort with a diagnostic
        corpus = sample_corpus(5, m=20, d=8, n_genres=2)
        ds = dataset_of([[1, 2], [3, 4]] * 10)
        config = StateGenConfig(hidden=8, k_max=5, epochs=2, lr=1e300,
                                batch_size=4, seed=0, heldout_fraction=0.0)
        with pytest.raises(TrainingDiverged):
            train_stategen(ds, corpus, config)

    def test_checkpoint_roundtrip(self, tmp_path):
        corpus = sample_corpus(6, m=20, d=8, n_genres=2)
        ds = dataset_of([[1, 2], [3]] * 8)
        config = StateGenConfig(hidden=8, k_max=4, epochs=1, seed=3)
        model, _ = train_stategen(ds, corpus, config)
        path = tmp_path / "stategen.ckpt"
        model.save(path)
        loaded = StateGenModel.load(path, corpus)
        np.testing.assert_array_equal(loaded.prior, model.prior)
        a = model.sample_states(20, seed=5)
        b = loaded.sample_states(20, seed=5)
        assert a == b


class TestTransformerBackend:
    def _model(self, corpus, **kw):
        config = StateGenConfig(hidden=16, k_max=5, backend="transformer",
                                n_layers=1, n_heads=2, seed=4, **kw)
        return StateGenModel(corpus, config)

    def test_first_output_depends_only_on_context(self):
        corpus = sample_corpus(7, m=10, d=8, n_genres=2)
        model = self._model(corpus)
        out_a = model._transformer_outputs(np.array([3]), [])
        out_b = model._transformer_outputs(np.array([3]), [np.array([4])])
        np.testing.assert_allclose(out_a.data[0, 0], out_b.data[0, 0], atol=1e-12)

    def test_same_seed_identical_samples(self):
        corpus = sample_corpus(7, m=10, d=8, n_genres=2)
        model = self._model(corpus)
        assert model.sample_states(8, seed=1) == model.sample_states(8, seed=1)

    def test_one_artist_corpus_support(self):
        corpus = sample_corpus(8, m=1, d=4, n_genres=1)
        model = self._model(corpus)
        for state in model.sample_states(40, seed=2):
            assert state.interests in ([], [0])

    def test_training_learns_on_tiny_data(self):
        corpus = sample_corpus(9, m=12, d=8, n_genres=3)
        ds = dataset_of([[2, 5], [2, 5], [2, 5], [7]] * 8)
        config = StateGenConfig(hidden=16, k_max=4, backend="transformer",
                                n_layers=1, n_heads=2, epochs=6, lr=5e-3,
                                seed=1, heldout_fraction=0.0)
        model, hist = train_stategen(ds, corpus, config)
        assert hist[-1]["train_nll"] < hist[0]["train_nll"]
