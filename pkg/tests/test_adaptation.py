import math

import numpy as np
import pytest

from core.errors import DivergenceError, InvalidArgumentError
from models.domain import SpeakerAdapter, Utterance, WeightedGraph
from models.schemas import AdaptConfig, CorpusSpec, ObjectiveConfig, PriorSpec, TrainConfig
from services.acoustic_net import forward
from services.adaptation import (
    _apply_update,
    _item_loss_and_grads,
    bucket_utterance_lengths,
    confidence_score,
    default_buckets,
    estimate_adapter,
    estimate_blhuc,
    estimate_lhuc,
    gaussian_kl,
    gaussian_kl_grad,
    kl_output_penalty,
    map_penalty,
    prepare_items,
    run_unsupervised_adaptation,
    sat_train,
    select_by_confidence,
)
from services.corpus_sim import generate_corpus
from services.decoding import decode_corpus
from services.graph_inference import generate_lattice, viterbi_best_path
from services.training import train_acoustic_model
from tests.oracles import (
    brute_force_occupancies,
    central_difference,
    graph_path_table,
    lattice_path_table,
    table_occupancies,
    within_beam,
)

MMI_CE = ObjectiveConfig(gamma1=1.0, gamma2=0.1, gamma3=0.0)
# CE targets taken from the numerator occupancies are held constant in the gradient,
# so finite-difference checks use objectives whose targets do not move with r
MMI_ONLY = ObjectiveConfig(gamma1=1.0, gamma2=0.0, gamma3=0.0)
CE_ONLY = ObjectiveConfig(gamma1=0.0, gamma2=1.0, gamma3=0.0)
PRIOR = PriorSpec(mu0=0.0, sigma0=1.0)


def _cfg(**overrides):
    base = dict(epochs=2, objective=MMI_CE, bucket_lengths=False, oracle=True, seed=9)
    return AdaptConfig(**{**base, **overrides})


@pytest.fixture
def speaker_utts(small_corpus):
    return small_corpus.by_speaker()["test-spk000"]


@pytest.fixture
def items(small_net, graphs, small_corpus, speaker_utts):
    return prepare_items(small_net, graphs, speaker_utts, _cfg(), small_corpus.silence)


def _utt(utt_id, confidence):
    return Utterance(id=utt_id, speaker_id="s", features=np.zeros((1, 1)), labels=("a",), confidence=confidence)


class TestGaussianKl:
    def test_prior_match_is_zero(self):
        assert gaussian_kl(np.zeros(3), np.ones(3), PRIOR) == pytest.approx(0.0)

    def test_mean_shift(self):
        assert gaussian_kl([1.0], [1.0], PRIOR) == pytest.approx(0.5)

    def test_wider_posterior(self):
        assert gaussian_kl([0.0], [2.0], PRIOR) == pytest.approx(0.806853, abs=1e-6)

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_non_positive_sigma(self, sigma):
        with pytest.raises(InvalidArgumentError):
            gaussian_kl([0.0], [sigma], PRIOR)

    def test_agrees_with_monte_carlo(self):
        mu, sigma = 0.3, 0.7
        prior = PriorSpec(mu0=-0.2, sigma0=1.3)
        r = np.random.default_rng(0).normal(mu, sigma, size=1_000_000)
        log_q = -0.5 * ((r - mu) / sigma) ** 2 - math.log(sigma)
        log_p = -0.5 * ((r - prior.mu0) / prior.sigma0) ** 2 - math.log(prior.sigma0)
        samples = log_q - log_p
        standard_error = samples.std() / math.sqrt(len(samples))
        assert abs(samples.mean() - gaussian_kl([mu], [sigma], prior)) < 3 * standard_error

    def test_gradient(self):
        mu = np.array([0.4, -1.2])
        log_sigma = np.array([-0.3, 0.5])
        d_mu, d_log_sigma = gaussian_kl_grad(mu, log_sigma, PRIOR)
        kl = lambda: gaussian_kl(mu, np.exp(log_sigma), PRIOR)  # noqa: E731
        for i in range(2):
            assert central_difference(kl, mu, i) == pytest.approx(d_mu[i], abs=1e-6)
            assert central_difference(kl, log_sigma, i) == pytest.approx(d_log_sigma[i], abs=1e-6)


class TestPenalties:
    def test_map_at_prior_mean(self):
        penalty, grad = map_penalty(np.zeros(4), PRIOR)
        assert penalty == 0.0
        assert not grad.any()

    def test_map_quadratic(self):
        penalty, grad = map_penalty(np.array([2.0]), PRIOR, weight=1.0)
        assert penalty == pytest.approx(2.0)
        assert grad[0] == pytest.approx(2.0)

    def test_map_weight_shrinks_towards_prior(self):
        # minimise (r - 3)^2 / 2 plus the MAP pull; the optimum 3 / (1 + weight) shrinks with weight
        finals = []
        for weight in (0.0, 0.5, 2.0, 8.0):
            r = np.array([0.0])
            for _ in range(500):
                r = r - 0.05 * ((r - 3.0) + map_penalty(r, PRIOR, weight)[1])
            finals.append(abs(r[0]))
        assert finals == sorted(finals, reverse=True)
        assert finals[2] == pytest.approx(1.0, abs=1e-3)

    def test_kl_output_identical_is_zero(self, rng):
        ce = rng.normal(size=(4, 6))
        penalty, grad = kl_output_penalty(ce, ce.copy())
        assert penalty == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_kl_output_non_negative_and_gradient(self, rng):
        adapted = rng.normal(size=(4, 6))
        si = rng.normal(size=(4, 6))
        penalty, grad = kl_output_penalty(adapted, si, weight=0.7)
        assert penalty >= 0.0
        value = lambda: kl_output_penalty(adapted, si, weight=0.7)[0]  # noqa: E731
        for index in [(0, 0), (1, 3), (3, 5)]:
            assert central_difference(value, adapted, index) == pytest.approx(grad[index], abs=1e-7)

    def test_kl_output_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            kl_output_penalty(np.zeros((2, 3)), np.zeros((3, 3)))


class TestConfidence:
    def test_single_path_lattice(self, graphs, rng):
        scores = rng.normal(size=(5, graphs.pdf_count))
        best = viterbi_best_path(graphs.decode, scores)
        assert confidence_score(generate_lattice(graphs.decode, scores, 1e-9), best) == pytest.approx(1.0)

    def test_two_equal_paths(self):
        graph = WeightedGraph(num_states=3, start=0, src=[0, 0], dst=[1, 2], pdf=[0, 1], olabel=[0, 1],
                              log_weight=[0.0, 0.0], final_log_weight=[-np.inf, 0.0, 0.0], pdf_count=2)
        scores = np.zeros((1, 2))
        best = viterbi_best_path(graph, scores)
        assert confidence_score(generate_lattice(graph, scores, np.inf), best) == pytest.approx(0.5)

    def test_matches_enumerated_posteriors(self, graphs, rng):
        scores = rng.normal(size=(5, graphs.pdf_count))
        best = viterbi_best_path(graphs.decode, scores)
        occupancies = brute_force_occupancies(graphs.decode, scores)
        expected = np.mean([occupancies[t, pdf] for t, pdf in enumerate(best.pdfs)])
        lattice = generate_lattice(graphs.decode, scores, np.inf)
        assert confidence_score(lattice, best) == pytest.approx(expected, abs=1e-10)

    @pytest.mark.parametrize("beam,scale", [(2.0, 1.0), (4.0, 0.5)])
    def test_finite_beam_normalises_over_kept_paths(self, graphs, rng, beam, scale):
        scores = rng.normal(scale=2.0, size=(5, graphs.pdf_count))
        best = viterbi_best_path(graphs.decode, scores)
        kept = within_beam(graph_path_table(graphs.decode, scores), beam)
        lattice = generate_lattice(graphs.decode, scores, beam)
        assert [key for key, _ in lattice_path_table(lattice)] == [key for key, _ in kept]
        occupancies = table_occupancies(lattice_path_table(lattice, acoustic_scale=scale), *scores.shape)
        expected = np.mean([occupancies[t, pdf] for t, pdf in enumerate(best.pdfs)])
        assert confidence_score(lattice, best, acoustic_scale=scale) == pytest.approx(expected, abs=1e-10)


class TestSelection:
    def test_rate_080_of_ten(self):
        utts = [_utt(f"u{i}", i / 10) for i in range(10)]
        selected = select_by_confidence(utts, 0.8)
        assert len(selected) == 8
        assert {u.id for u in selected} == {f"u{i}" for i in range(2, 10)}

    def test_rate_one_keeps_all(self):
        utts = [_utt(f"u{i}", 0.5) for i in range(3)]
        assert len(select_by_confidence(utts, 1.0)) == 3

    def test_ties_broken_by_id(self):
        utts = [_utt("c", 0.9), _utt("b", 0.5), _utt("a", 0.5), _utt("d", 0.5)]
        assert [u.id for u in select_by_confidence(utts, 0.5)] == ["c", "a"]

    def test_missing_confidence_ranks_last(self):
        utts = [_utt("a", None), _utt("b", 0.1)]
        assert [u.id for u in select_by_confidence(utts, 0.5)] == ["b"]

    def test_empty(self):
        assert select_by_confidence([], 0.8) == []

    def test_bad_rate(self):
        with pytest.raises(InvalidArgumentError):
            select_by_confidence([_utt("a", 1.0)], 0.0)


class TestBuckets:
    def test_ceiling(self):
        assert bucket_utterance_lengths(37, [30, 35, 40, 45]) == 40

    def test_exact(self):
        assert bucket_utterance_lengths(35, [30, 35, 40]) == 35

    def test_too_long(self):
        with pytest.raises(InvalidArgumentError):
            bucket_utterance_lengths(46, [30, 45])

    def test_default_table(self):
        table = default_buckets([12, 250, 80, 31])
        assert table[0] == 12 and table[-1] == 250
        assert table == sorted(set(table))
        assert len(table) <= 41
        assert all(bucket_utterance_lengths(n, table) >= n for n in range(12, 251))


class TestPrepareItems:
    def test_alignment_targets_are_one_hot(self, small_net, graphs, small_corpus, speaker_utts):
        items = prepare_items(small_net, graphs, speaker_utts, _cfg(supervision="alignment"), small_corpus.silence)
        assert len(items) == len(speaker_utts)
        for item in items:
            np.testing.assert_array_equal(item.ce_targets.sum(axis=1), 1.0)
            assert set(np.unique(item.ce_targets)) <= {0.0, 1.0}

    def test_kl_regulariser_keeps_si_scores(self, small_net, graphs, small_corpus, speaker_utts):
        items = prepare_items(small_net, graphs, speaker_utts, _cfg(method="kl"), small_corpus.silence)
        _, si_ce, _ = forward(small_net, speaker_utts[0].features)
        np.testing.assert_array_equal(items[0].si_ce, si_ce)

    def test_bucket_padding(self, small_net, graphs, small_corpus, speaker_utts):
        longest = max(u.num_frames for u in speaker_utts)
        items = prepare_items(small_net, graphs, speaker_utts, _cfg(bucket_lengths=True), small_corpus.silence,
                              buckets=[longest + 2])
        for item, utt in zip(items, speaker_utts):
            assert item.num_frames == longest + 2
            assert item.utterance.labels == (*utt.labels, "sil")

    def test_infeasible_dropped(self, small_net, graphs, small_corpus):
        utt = Utterance(id="short", speaker_id="s", features=np.zeros((3, 4)), labels=("a", "b"))
        empty = Utterance(id="empty", speaker_id="s", features=np.zeros((3, 4)), labels=())
        assert prepare_items(small_net, graphs, [utt, empty], _cfg(), small_corpus.silence) == []


class TestEstimateLhuc:
    def test_no_items_gives_identity(self, small_net, graphs):
        adapter = estimate_lhuc(small_net, graphs.den, [], _cfg(), "spk")
        assert adapter.mode == "deterministic"
        assert all(not v.any() for v in adapter.params.values())
        assert adapter.layers == (0, 1)

    @pytest.mark.parametrize("objective,supervision", [(MMI_ONLY, "lattice-free"), (CE_ONLY, "alignment")])
    def test_gradient_matches_central_difference(self, small_net, graphs, small_corpus, speaker_utts, rng,
                                                 objective, supervision):
        cfg = _cfg(supervision=supervision)
        item = prepare_items(small_net, graphs, speaker_utts, cfg, small_corpus.silence)[0]
        r_by_layer = {0: rng.normal(scale=0.3, size=8), 1: rng.normal(scale=0.3, size=8)}
        _, grads = _item_loss_and_grads(small_net, graphs.den, item, r_by_layer, objective, cfg)
        loss = lambda: _item_loss_and_grads(small_net, graphs.den, item, r_by_layer, objective, cfg)[0]  # noqa: E731
        for layer, unit in [(0, 0), (0, 5), (1, 2), (1, 7)]:
            assert central_difference(loss, r_by_layer[layer], unit) == pytest.approx(grads[layer][unit], abs=1e-6)

    def test_only_adapter_changes(self, small_net, graphs, items):
        checksum = small_net.checksum()
        adapter = estimate_lhuc(small_net, graphs.den, items, _cfg(), "spk")
        assert small_net.checksum() == checksum
        assert any(np.any(v != 0.0) for v in adapter.params.values())

    def test_hooked_layers(self, small_net, graphs, items):
        adapter = estimate_lhuc(small_net, graphs.den, items, _cfg(hooked_layers=[1]), "spk")
        assert adapter.layers == (1,)

    def test_map_shrinks_norm(self, small_net, graphs, items):
        plain = estimate_lhuc(small_net, graphs.den, items, _cfg(), "spk")
        pulled = estimate_lhuc(small_net, graphs.den, items, _cfg(method="map", map_weight=200.0), "spk")
        norm = lambda a: math.sqrt(sum(float(np.sum(v ** 2)) for v in a.params.values()))  # noqa: E731
        assert norm(pulled) < norm(plain)

    def test_divergence_carries_last_adapter(self):
        adapter = SpeakerAdapter.identity("spk", {0: 3})
        with pytest.raises(DivergenceError) as info:
            _apply_update(adapter, {"r.0": np.ones(3)}, 0.1, float("nan"), "epoch 0 step 0")
        np.testing.assert_array_equal(info.value.last_adapter.params["r.0"], np.zeros(3))
        with pytest.raises(DivergenceError):
            _apply_update(adapter, {"r.0": np.array([np.inf, 0.0, 0.0])}, 0.1, 1.0, "epoch 0 step 1")


class TestEstimateBlhuc:
    def test_initial_posterior_is_prior(self, small_net, graphs):
        adapter = estimate_blhuc(small_net, graphs.den, [], PRIOR, _cfg(method="blhuc"), "spk")
        for layer in adapter.layers:
            assert gaussian_kl(adapter.params[f"mu.{layer}"], adapter.sigma(layer), PRIOR) == 0.0

    def test_degenerates_to_lhuc(self, small_net, graphs, items):
        lhuc = estimate_lhuc(small_net, graphs.den, items, _cfg(), "spk")
        cfg = _cfg(method="blhuc", init_log_sigma=-math.inf, freeze_sigma=True, mc_samples=1)
        blhuc = estimate_blhuc(small_net, graphs.den, items, PRIOR, cfg, "spk")
        for layer in lhuc.layers:
            np.testing.assert_array_equal(blhuc.params[f"mu.{layer}"], lhuc.params[f"r.{layer}"])
            assert np.all(np.isneginf(blhuc.params[f"log_sigma.{layer}"]))

    def test_sampled_bound_gradients_with_frozen_noise(self, small_net, graphs, items, rng):
        mu = {0: rng.normal(scale=0.3, size=8)}
        log_sigma = {0: rng.normal(scale=0.2, size=8) - 1.0}
        eps = {0: rng.standard_normal(8)}
        cfg = _cfg(method="blhuc", hooked_layers=[0])

        def bound():
            r = {0: mu[0] + np.exp(log_sigma[0]) * eps[0]}
            return _item_loss_and_grads(small_net, graphs.den, items[1], r, MMI_ONLY, cfg)[0]

        r = {0: mu[0] + np.exp(log_sigma[0]) * eps[0]}
        _, grad_r = _item_loss_and_grads(small_net, graphs.den, items[1], r, MMI_ONLY, cfg)
        for unit in (0, 3, 6):
            assert central_difference(bound, mu[0], unit) == pytest.approx(grad_r[0][unit], abs=1e-6)
            expected = grad_r[0][unit] * np.exp(log_sigma[0][unit]) * eps[0][unit]
            assert central_difference(bound, log_sigma[0], unit) == pytest.approx(expected, abs=1e-6)

    def test_sigma_moves_with_kl(self, small_net, graphs, items):
        cfg = _cfg(method="blhuc", objective=ObjectiveConfig(gamma1=1.0, gamma2=0.1))
        adapter = estimate_adapter(small_net, graphs, items, cfg, "spk")
        assert adapter.mode == "bayesian"
        assert all(np.all(np.isfinite(adapter.params[f"log_sigma.{layer}"])) for layer in adapter.layers)
        assert any(np.any(adapter.params[f"log_sigma.{layer}"] != 0.0) for layer in adapter.layers)

    def test_deterministic_per_seed(self, small_net, graphs, items):
        cfg = _cfg(method="blhuc")
        a = estimate_blhuc(small_net, graphs.den, items, PRIOR, cfg, "spk")
        b = estimate_blhuc(small_net, graphs.den, items, PRIOR, cfg, "spk")
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])


class TestRunUnsupervisedAdaptation:
    def test_si_net_untouched(self, small_net, graphs, small_corpus):
        checksum = small_net.checksum()
        cfg = _cfg(oracle=False, use_confidence=True, bucket_lengths=True)
        adapters = run_unsupervised_adaptation(small_net, graphs, small_corpus.by_speaker(), cfg,
                                               small_corpus.silence)
        assert small_net.checksum() == checksum
        assert sorted(adapters) == ["test-spk000", "test-spk001"]

    def test_zero_epochs_decode_equals_baseline(self, small_net, graphs, small_corpus):
        adapters = run_unsupervised_adaptation(small_net, graphs, small_corpus.by_speaker(),
                                               _cfg(epochs=0, oracle=False), small_corpus.silence)
        baseline = decode_corpus(small_net, graphs, small_corpus.utterances)
        assert decode_corpus(small_net, graphs, small_corpus.utterances, adapters) == baseline

    def test_speaker_without_data_gets_identity(self, small_net, graphs, small_corpus):
        adapters = run_unsupervised_adaptation(small_net, graphs, {"ghost": []}, _cfg(method="blhuc"),
                                               small_corpus.silence)
        adapter = adapters["ghost"]
        assert adapter.mode == "bayesian"
        assert all(not adapter.params[f"mu.{layer}"].any() for layer in adapter.layers)

    def test_max_utterances_caps_data(self, small_net, graphs, small_corpus):
        one = run_unsupervised_adaptation(small_net, graphs, small_corpus.by_speaker(), _cfg(max_utterances=1),
                                          small_corpus.silence)
        first = small_corpus.by_speaker()["test-spk000"][:1]
        items = prepare_items(small_net, graphs, first, _cfg(), small_corpus.silence)
        direct = estimate_lhuc(small_net, graphs.den, items, _cfg(), "test-spk000")
        for name in direct.params:
            np.testing.assert_array_equal(one["test-spk000"].params[name], direct.params[name])


class TestSatTrain:
    def test_adapters_for_training_speakers(self, small_net, graphs, small_corpus):
        cfg = TrainConfig(epochs=1, learning_rate=0.05, sat_layers=[0], seed=1)
        result = sat_train(small_net, small_corpus.by_speaker(), cfg, graphs)
        assert sorted(result.adapters) == ["test-spk000", "test-spk001"]
        assert all(a.layers == (0,) for a in result.adapters.values())
        assert len(result.loss_history) == 1

    def test_bad_layer(self, small_net, graphs, small_corpus):
        with pytest.raises(InvalidArgumentError):
            sat_train(small_net, small_corpus.by_speaker(), TrainConfig(sat_layers=[5]), graphs)

    @pytest.mark.slow
    def test_single_speaker_matches_plain_training(self, small_net, graphs, small_corpus):
        data = {"test-spk000": small_corpus.by_speaker()["test-spk000"]}
        cfg = TrainConfig(epochs=3, learning_rate=0.02, seed=1)
        plain = train_acoustic_model(small_net, graphs, data, cfg)
        sat = sat_train(small_net, data, cfg, graphs)
        assert sat.loss_history[-1] == pytest.approx(plain.loss_history[-1], rel=0.02)

    @pytest.mark.slow
    def test_adapters_leave_identity(self, inventory, graphs, small_net):
        spec = CorpusSpec(n_speakers=3, utts_per_speaker=6, min_tokens=1, max_tokens=3, feature_dim=4,
                          speaker_scale=2.0, seed=21)
        corpus = generate_corpus(inventory, spec)
        result = sat_train(small_net, corpus.by_speaker(), TrainConfig(epochs=6, learning_rate=0.1, seed=2), graphs)
        assert all(np.linalg.norm(a.params["r.0"]) > 0.1 for a in result.adapters.values())
