import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sacdnet.dataset import Batch, Standardizer, Vocabulary, encode
from sacdnet.model import SACDNet, SACDNetConfig, build_model, predict_proba
from sacdnet.nn.layers import DropoutMode
from sacdnet.nn.rng import RngStream
from sacdnet.uncertainty import (
    MAX_BINARY_ENTROPY,
    McPrediction,
    entropy_histogram,
    mc_forward,
    mc_mean,
    predict_with_abstention,
    predictive_entropy,
    probability_band_flags,
    read_predictions,
    theta_sweep,
    write_predictions,
)

from test_dataset import random_examples


def logit(p):
    return math.log(p / (1.0 - p))


@pytest.fixture(scope="module")
def encoded_setup():
    examples = random_examples(10, 10, seed=44)
    vocab = Vocabulary.build(examples, max_sequence_length=8)
    std = Standardizer.fit(examples)
    return vocab, std, encode(examples, vocab, std)


def fresh_model(vocab, std, dropout_rate=0.1, seed=50):
    cfg = SACDNetConfig(vocab_size=vocab.size, n_dense_features=std.n_features,
                        max_sequence_length=8, dropout_rate=dropout_rate)
    return SACDNet(cfg, RngStream(seed))


def rigged_model(vocab, std, prob, dropout_rate=0.1):
    """All-zero weights, output bias set so every pass emits ``prob``."""
    model = fresh_model(vocab, std, dropout_rate=dropout_rate)
    for t in model.parameters().values():
        t.data[...] = 0.0
    model.output.bias.data[...] = logit(prob)
    return model


class TestPredictiveEntropy:
    def test_maximum_at_half(self):
        assert predictive_entropy(0.5) == pytest.approx(math.log(2), abs=1e-15)

    def test_extremes_are_zero_after_clamp(self):
        assert predictive_entropy(0.0) == pytest.approx(0.0, abs=1e-9)
        assert predictive_entropy(1.0) == pytest.approx(0.0, abs=1e-9)

    def test_hand_value(self):
        assert predictive_entropy(0.9) == pytest.approx(0.3251, abs=1e-4)
        assert predictive_entropy(0.99) == pytest.approx(0.0560, abs=1e-4)

    def test_vectorized_bounds(self):
        rng = RngStream(51)
        h = predictive_entropy(rng.random(100_000))
        assert (h >= 0.0).all() and (h <= MAX_BINARY_ENTROPY + 1e-15).all()

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.0, 0.5), st.floats(0.0, 0.5))
    def test_monotone_in_distance_from_half(self, a, b):
        lo, hi = sorted((a, b))
        # larger distance from 0.5 gives lower (or equal) entropy
        assert predictive_entropy(0.5 + hi) <= predictive_entropy(0.5 + lo) + 1e-12
        assert predictive_entropy(0.5 - hi) <= predictive_entropy(0.5 - lo) + 1e-12

    def test_symmetry(self):
        for p in (0.1, 0.25, 0.4):
            assert predictive_entropy(p) == pytest.approx(
                predictive_entropy(1.0 - p), abs=1e-15)


class TestMcForward:
    def test_rate_zero_all_passes_bit_identical(self, encoded_setup):
        vocab, std, encoded = encoded_setup
        model = fresh_model(vocab, std, dropout_rate=0.0)
        deterministic = model.forward(Batch.stack(encoded)).data
        passes = mc_forward(model, encoded, 100, RngStream(1))
        for t in range(100):
            np.testing.assert_array_equal(passes[t], deterministic)

    def test_single_pass_mean(self, encoded_setup):
        vocab, std, encoded = encoded_setup
        model = fresh_model(vocab, std)
        passes = mc_forward(model, encoded[:4], 1, RngStream(2))
        np.testing.assert_array_equal(mc_mean(passes), passes[0])

    def test_zero_passes_rejected(self, encoded_setup):
        vocab, std, encoded = encoded_setup
        with pytest.raises(ValueError, match="num_passes"):
            mc_forward(fresh_model(vocab, std), encoded, 0, RngStream(3))

    def test_model_without_dropout_rejected(self, encoded_setup):
        vocab, std, encoded = encoded_setup
        logreg = build_model("logreg", vocab.size, std.n_features, 8,
                             RngStream(4))
        with pytest.raises(ValueError, match="no dropout layer"):
            mc_forward(logreg, encoded, 10, RngStream(5))

    def test_active_dropout_produces_variance(self, encoded_setup):
        vocab, std, encoded = encoded_setup
        model = fresh_model(vocab, std, dropout_rate=0.1)
        passes = mc_forward(model, encoded[:5], 100, RngStream(6))
        assert (passes.var(axis=0) > 0.0).all()

    def test_passes_are_rerunnable_individually(self, encoded_setup):
        # sub-stream per pass: executing pass 5 alone replays row 5
        vocab, std, encoded = encoded_setup
        model = fresh_model(vocab, std)
        full = mc_forward(model, encoded[:6], 8, RngStream(7))
        single = predict_proba(model, encoded[:6], DropoutMode.INFERENCE_ACTIVE,
                               RngStream(7).derive(5))
        np.testing.assert_array_equal(full[5], single)

    def test_mean_is_order_invariant(self, encoded_setup):
        vocab, std, encoded = encoded_setup
        model = fresh_model(vocab, std)
        passes = mc_forward(model, encoded[:6], 32, RngStream(8))
        forward_mean = mc_mean(passes)
        reversed_mean = mc_mean(passes[::-1])
        np.testing.assert_array_equal(forward_mean, reversed_mean)


class TestPredictWithAbstention:
    def test_confident_prediction_is_certain(self, encoded_setup):
        vocab, std, encoded = encoded_setup
        model = rigged_model(vocab, std, prob=0.99)
        preds = predict_with_abstention(model, encoded[:3], num_passes=100,
                                        theta=0.55, rng=RngStream(9))
        for p in preds:
            assert p.per_pass_probs == tuple([0.99] * 100)
            assert p.mean_prob == pytest.approx(0.99, abs=1e-12)
            assert p.entropy_nats == pytest.approx(0.056, abs=1e-3)
            assert p.label == 1
            assert p.certain

    def test_coin_flip_is_uncertain_below_ln2(self, encoded_setup):
        vocab, std, encoded = encoded_setup
        model = rigged_model(vocab, std, prob=0.5)
        preds = predict_with_abstention(model, encoded[:2], num_passes=10,
                                        theta=0.69, rng=RngStream(10))
        for p in preds:
            assert p.entropy_nats == pytest.approx(math.log(2), abs=1e-12)
            assert not p.certain

    def test_theta_ln2_marks_everything_certain(self, encoded_setup):
        vocab, std, encoded = encoded_setup
        model = fresh_model(vocab, std)
        preds = predict_with_abstention(model, encoded, num_passes=20,
                                        theta=math.log(2), rng=RngStream(11))
        assert all(p.certain for p in preds)

    def test_raising_theta_never_shrinks_certain_set(self, encoded_setup):
        vocab, std, encoded = encoded_setup
        model = fresh_model(vocab, std)
        counts = []
        for theta in (0.1, 0.3, 0.5, 0.69, math.log(2)):
            preds = predict_with_abstention(model, encoded, num_passes=20,
                                            theta=theta, rng=RngStream(12))
            counts.append(sum(p.certain for p in preds))
        assert counts == sorted(counts)

    def test_mean_matches_fsum_of_passes(self, encoded_setup):
        vocab, std, encoded = encoded_setup
        model = fresh_model(vocab, std)
        preds = predict_with_abstention(model, encoded[:4], num_passes=33,
                                        theta=0.5, rng=RngStream(13))
        for p in preds:
            assert p.mean_prob == math.fsum(p.per_pass_probs) / 33

    def test_negative_theta_rejected(self, encoded_setup):
        vocab, std, encoded = encoded_setup
        with pytest.raises(ValueError, match="theta"):
            predict_with_abstention(fresh_model(vocab, std), encoded[:1],
                                    num_passes=2, theta=-0.1)

    def test_rate_zero_mean_equals_deterministic_exactly(self, encoded_setup):
        vocab, std, encoded = encoded_setup
        model = fresh_model(vocab, std, dropout_rate=0.0)
        deterministic = model.forward(Batch.stack(encoded[:5])).data
        preds = predict_with_abstention(model, encoded[:5], num_passes=50,
                                        theta=0.5, rng=RngStream(14))
        for det, p in zip(deterministic, preds):
            assert p.mean_prob == det
            assert p.entropy_nats == predictive_entropy(det)


class TestEntropyHistogram:
    def _pred(self, entropy):
        return McPrediction(per_pass_probs=(0.5,), mean_prob=0.5,
                            entropy_nats=entropy, label=1, certain=True,
                            threshold=0.5)

    def test_all_zero_entropies_land_in_first_bin(self):
        preds = [self._pred(0.0) for _ in range(5)]
        table = entropy_histogram(preds, [True] * 5, bins=4)
        assert table[0].correct_count == 5
        assert sum(b.correct_count + b.misclassified_count for b in table) == 5

    def test_counts_conserved(self):
        rng = RngStream(15)
        entropies = rng.uniform(0, math.log(2), 200)
        preds = [self._pred(float(h)) for h in entropies]
        ok = (rng.random(200) < 0.5).tolist()
        table = entropy_histogram(preds, ok, bins=7)
        assert sum(b.correct_count + b.misclassified_count for b in table) == 200
        assert sum(b.correct_count for b in table) == sum(ok)

    def test_max_entropy_lands_in_last_bin(self):
        table = entropy_histogram([self._pred(math.log(2))], [False], bins=10)
        assert table[-1].misclassified_count == 1

    def test_bad_bin_count_rejected(self):
        with pytest.raises(ValueError, match="bins"):
            entropy_histogram([], [], bins=0)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="lengths"):
            entropy_histogram([self._pred(0.1)], [True, False], bins=2)

    def test_bin_edges_cover_entropy_range(self):
        table = entropy_histogram([], [], bins=5)
        assert table[0].bin_low == 0.0
        assert table[-1].bin_high == pytest.approx(math.log(2), abs=1e-15)


class TestThetaSweep:
    def _preds(self, entropies, labels):
        return [McPrediction(per_pass_probs=(0.5,), mean_prob=0.5,
                             entropy_nats=h, label=l, certain=True,
                             threshold=0.5)
                for h, l in zip(entropies, labels)]

    def test_coverage_monotone_in_theta(self):
        rng = RngStream(17)
        entropies = rng.uniform(0, math.log(2), 50)
        preds = self._preds(entropies, [1] * 50)
        rows = theta_sweep(preds, [1] * 50, n_points=12)
        coverages = [r.coverage for r in rows]
        assert coverages == sorted(coverages)
        assert rows[-1].coverage == 1.0  # theta = ln 2 accepts everything

    def test_counts_partition(self):
        preds = self._preds([0.1, 0.3, 0.6], [1, 0, 1])
        for row in theta_sweep(preds, [1, 1, 1], n_points=5):
            assert row.n_certain + row.n_uncertain == 3

    def test_accuracy_certain_only(self):
        preds = self._preds([0.0, 0.69], [1, 1])
        rows = theta_sweep(preds, [1, 0], n_points=3)
        assert rows[0].accuracy_certain_only == 1.0  # only the correct one
        assert rows[-1].accuracy_certain_only == 0.5

    def test_empty_certain_set_is_undefined(self):
        preds = self._preds([0.5], [1])
        rows = theta_sweep(preds, [1], n_points=4)
        assert rows[0].accuracy_certain_only is None

    def test_bad_points_rejected(self):
        with pytest.raises(ValueError, match="n_points"):
            theta_sweep([], [], n_points=1)


class TestProbabilityBand:
    def test_band_membership(self):
        flags = probability_band_flags([0.1, 0.4, 0.5, 0.6, 0.9], 0.4, 0.6)
        assert flags.tolist() == [False, True, True, True, False]

    def test_invalid_band_rejected(self):
        with pytest.raises(ValueError, match="band_low"):
            probability_band_flags([0.5], 0.7, 0.3)


class TestSerialization:
    def test_round_trip_with_labels(self, tmp_path, encoded_setup):
        vocab, std, encoded = encoded_setup
        model = fresh_model(vocab, std)
        preds = predict_with_abstention(model, encoded[:4], num_passes=5,
                                        theta=0.4, rng=RngStream(16))
        path = tmp_path / "mc.jsonl"
        write_predictions(preds, path, true_labels=[1, 0, 1, 0])
        rows = read_predictions(path)
        assert len(rows) == 4
        assert rows[0]["true_label"] == 1
        restored = McPrediction.from_dict(
            {k: v for k, v in rows[0].items() if k != "true_label"})
        assert restored == preds[0]
