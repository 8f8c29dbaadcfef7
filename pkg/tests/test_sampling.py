"""Tests for pair/triplet sampling and the synthetic corpus generator."""

import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sasvkit.data import UtteranceRecord
from sasvkit.sampling import (
    PAIR_SCENARIO_WEIGHTS,
    PAIR_SCENARIOS,
    SynthConfig,
    Triplet,
    TrainingPair,
    apportion_counts,
    generate_synthetic,
    sample_training_pairs,
    sample_triplets,
)


def make_records(n_speakers=4, bona_per_speaker=5, spoof_per_speaker=3):
    records = []
    for s in range(n_speakers):
        speaker = f"SPK{s}"
        for i in range(bona_per_speaker):
            records.append(UtteranceRecord(f"{speaker}_b{i}", speaker, "bonafide"))
        for i in range(spoof_per_speaker):
            records.append(UtteranceRecord(f"{speaker}_f{i}", speaker, "spoof", "A01"))
    return records


class TestApportionment:
    def test_canonical_2000(self):
        assert apportion_counts(2000, PAIR_SCENARIO_WEIGHTS) == (901, 499, 300, 300)

    def test_exact_666(self):
        assert apportion_counts(666, PAIR_SCENARIO_WEIGHTS) == (300, 166, 100, 100)

    def test_equal_weights_tie_break_prefers_earlier(self):
        assert apportion_counts(3, (1.0, 1.0)) == (2, 1)

    def test_zero_total(self):
        assert apportion_counts(0, PAIR_SCENARIO_WEIGHTS) == (0, 0, 0, 0)

    def test_invalid_weights_rejected(self):
        with pytest.raises(ValueError):
            apportion_counts(10, (1.0, 0.0))
        with pytest.raises(ValueError):
            apportion_counts(10, ())

    @given(st.integers(0, 5000), st.lists(st.floats(0.1, 10.0), min_size=1, max_size=6))
    def test_counts_sum_to_total(self, total, weights):
        counts = apportion_counts(total, weights)
        assert sum(counts) == total
        assert all(c >= 0 for c in counts)

    @given(st.integers(0, 2000))
    def test_each_count_within_one_of_quota(self, total):
        counts = apportion_counts(total, PAIR_SCENARIO_WEIGHTS)
        weight_sum = sum(PAIR_SCENARIO_WEIGHTS)
        for c, w in zip(counts, PAIR_SCENARIO_WEIGHTS):
            assert abs(c - total * w / weight_sum) < 1.0 + 1e-9


class TestTrainingPairValidation:
    def test_label_consistency_enforced(self):
        with pytest.raises(ValueError):
            TrainingPair("e", "t", "target", "same", "spoof-same")
        with pytest.raises(ValueError):
            TrainingPair("e", "t", "nontarget", "different", "bonafide-same")

    def test_valid_pairs_construct(self):
        TrainingPair("e", "t", "target", "same", "bonafide-same")
        TrainingPair("e", "t", "nontarget", "same", "spoof-same")
        TrainingPair("e", "t", "nontarget", "different", "spoof-diff")


class TestSampleTrainingPairs:
    def test_scenario_counts_match_apportionment(self):
        records = make_records()
        pairs = sample_training_pairs(records, 2000, np.random.default_rng(0))
        by_scenario = collections.Counter(p.scenario for p in pairs)
        assert by_scenario["bonafide-same"] == 901
        assert by_scenario["bonafide-diff"] == 499
        assert by_scenario["spoof-same"] == 300
        assert by_scenario["spoof-diff"] == 300

    def test_pair_invariants(self):
        records = make_records()
        bona = {r.utterance_id for r in records if r.is_bonafide}
        speaker_of = {r.utterance_id: r.speaker_id for r in records}
        pairs = sample_training_pairs(records, 400, np.random.default_rng(1))
        for p in pairs:
            assert p.enroll_utterance_id in bona
            same = speaker_of[p.enroll_utterance_id] == speaker_of[p.test_utterance_id]
            assert (p.sv_label == "same") == same
            if p.scenario == "bonafide-same":
                assert p.test_utterance_id in bona
                assert p.enroll_utterance_id != p.test_utterance_id
                assert p.sasv_label == "target"
            elif p.scenario == "bonafide-diff":
                assert p.test_utterance_id in bona
            else:
                assert p.test_utterance_id not in bona

    def test_unsatisfiable_scenario_is_named(self):
        # a single speaker makes every cross-speaker scenario impossible
        records = make_records(n_speakers=1)
        with pytest.raises(ValueError, match="bonafide-diff"):
            sample_training_pairs(records, 100, np.random.default_rng(0))

    def test_no_spoofs_is_reported(self):
        records = make_records(spoof_per_speaker=0)
        with pytest.raises(ValueError, match="spoof-same"):
            sample_training_pairs(records, 100, np.random.default_rng(0))

    def test_deterministic_given_seed(self):
        records = make_records()
        a = sample_training_pairs(records, 300, np.random.default_rng(42))
        b = sample_training_pairs(records, 300, np.random.default_rng(42))
        assert a == b

    def test_different_seeds_differ(self):
        records = make_records()
        a = sample_training_pairs(records, 300, np.random.default_rng(1))
        b = sample_training_pairs(records, 300, np.random.default_rng(2))
        assert a != b

    def test_within_scenario_coverage_is_broad(self):
        # uniform in-scenario sampling should touch every speaker
        records = make_records(n_speakers=6)
        pairs = sample_training_pairs(records, 3000, np.random.default_rng(3))
        speaker_of = {r.utterance_id: r.speaker_id for r in records}
        enrolled = {speaker_of[p.enroll_utterance_id] for p in pairs}
        assert len(enrolled) == 6


class TestSampleTriplets:
    def test_basic_invariants(self):
        records = make_records()
        bona = {r.utterance_id for r in records if r.is_bonafide}
        speaker_of = {r.utterance_id: r.speaker_id for r in records}
        triplets = sample_triplets(records, 500, np.random.default_rng(0))
        assert len(triplets) == 500
        for t in triplets:
            assert t.anchor_id in bona and t.positive_id in bona
            assert t.anchor_id != t.positive_id
            assert speaker_of[t.anchor_id] == speaker_of[t.positive_id]
            if t.negative_kind == "same-speaker-spoof":
                assert t.negative_id not in bona
                assert speaker_of[t.negative_id] == speaker_of[t.anchor_id]
            else:
                assert t.negative_id in bona
                assert speaker_of[t.negative_id] != speaker_of[t.anchor_id]

    def test_single_speaker_uses_spoof_negatives(self):
        records = [
            UtteranceRecord("b1", "S", "bonafide"),
            UtteranceRecord("b2", "S", "bonafide"),
            UtteranceRecord("f1", "S", "spoof", "A01"),
        ]
        triplets = sample_triplets(records, 50, np.random.default_rng(0))
        assert all(t.negative_kind == "same-speaker-spoof" for t in triplets)
        assert all(t.negative_id == "f1" for t in triplets)

    def test_no_spoofs_uses_other_speakers(self):
        records = make_records(n_speakers=2, spoof_per_speaker=0)
        triplets = sample_triplets(records, 50, np.random.default_rng(0))
        assert all(t.negative_kind == "other-speaker-bonafide" for t in triplets)

    def test_both_kinds_drawn_evenly(self):
        records = make_records()
        triplets = sample_triplets(records, 4000, np.random.default_rng(7))
        kinds = collections.Counter(t.negative_kind for t in triplets)
        ratio = kinds["same-speaker-spoof"] / len(triplets)
        assert 0.45 < ratio < 0.55

    def test_impossible_corpus_rejected(self):
        records = [UtteranceRecord("b1", "S", "bonafide")]
        with pytest.raises(ValueError):
            sample_triplets(records, 10, np.random.default_rng(0))

    def test_deterministic_given_seed(self):
        records = make_records()
        a = sample_triplets(records, 200, np.random.default_rng(9))
        b = sample_triplets(records, 200, np.random.default_rng(9))
        assert a == b

    def test_triplet_validation(self):
        with pytest.raises(ValueError):
            Triplet("a", "a", "n", "same-speaker-spoof")
        with pytest.raises(ValueError):
            Triplet("a", "p", "n", "hard-negative")


def small_synth(**overrides):
    defaults = dict(
        n_speakers=6,
        utts_per_speaker=8,
        spoofs_per_speaker=6,
        asv_dim=24,
        cm_dim=16,
        seed=99,
    )
    defaults.update(overrides)
    return SynthConfig(**defaults)


class TestGenerateSynthetic:
    def test_store_contents_and_dims(self):
        config = small_synth()
        ds = generate_synthetic(config)
        n_utts = config.n_speakers * (config.utts_per_speaker + config.spoofs_per_speaker)
        assert len(ds.asv_store) == n_utts
        assert len(ds.cm_store) == n_utts
        assert ds.asv_store.dim == config.asv_dim
        assert ds.cm_store.dim == config.cm_dim

    def test_asv_vectors_unit_norm(self):
        ds = generate_synthetic(small_synth())
        for _, vec in ds.asv_store.items():
            # stored at float32 precision, so the norm is 1 up to that rounding
            assert abs(np.linalg.norm(vec) - 1.0) < 1e-6

    def test_train_records_exclude_enrollment_and_test_audio(self):
        config = small_synth()
        ds = generate_synthetic(config)
        train_ids = {r.utterance_id for r in ds.train_records}
        for speaker, utts in ds.enrollment.items():
            assert not train_ids.intersection(utts)
        for trial in ds.dev_trials + ds.eval_trials:
            assert trial.test_utterance_id not in train_ids

    def test_trial_composition(self):
        config = small_synth()
        ds = generate_synthetic(config)
        labels = collections.Counter(t.label for t in ds.eval_trials)
        assert labels["target"] == config.n_speakers * 1
        assert labels["nontarget"] == config.n_speakers * config.nontarget_neighbors * 1
        assert labels["spoof"] == config.n_speakers * 1
        for trial in ds.eval_trials:
            assert trial.enroll_utterance_ids == ds.enrollment[trial.enroll_speaker_id]

    def test_deterministic_given_seed(self):
        a = generate_synthetic(small_synth())
        b = generate_synthetic(small_synth())
        assert a.train_records == b.train_records
        assert a.dev_trials == b.dev_trials
        for utt_id, vec in a.asv_store.items():
            np.testing.assert_array_equal(vec, b.asv_store.get(utt_id))
        for utt_id, vec in a.cm_store.items():
            np.testing.assert_array_equal(vec, b.cm_store.get(utt_id))

    def test_different_seed_changes_vectors(self):
        a = generate_synthetic(small_synth(seed=1))
        b = generate_synthetic(small_synth(seed=2))
        some_id = a.asv_store.ids()[0]
        assert not np.array_equal(a.asv_store.get(some_id), b.asv_store.get(some_id))

    def test_single_speaker_rejected(self):
        with pytest.raises(ValueError):
            SynthConfig(n_speakers=1)

    def test_cm_clusters_are_linearly_separable(self):
        # with separation 8 the sign of the first coordinate splits the
        # classes with error well under 0.1 percent
        config = SynthConfig(
            n_speakers=25,
            utts_per_speaker=200,
            spoofs_per_speaker=200,
            asv_dim=8,
            cm_dim=160,
            cm_separation=8.0,
            asv_channel_dims=2,
            seed=5,
        )
        ds = generate_synthetic(config)
        wrong = 0
        total = 0
        for utt_id, vec in ds.cm_store.items():
            is_bona = "_B" in utt_id
            predicted_bona = vec[0] > 0
            wrong += int(is_bona != predicted_bona)
            total += 1
        assert total == 10000
        assert wrong / total < 0.001

    def test_spoof_spread_equal_to_noise_makes_asv_blind(self):
        # spoofs drawn exactly like bonafide audio: the cosine score cannot
        # separate target from spoof trials, so the two populations overlap
        config = SynthConfig(
            n_speakers=12,
            utts_per_speaker=40,
            spoofs_per_speaker=40,
            asv_dim=64,
            cm_dim=8,
            asv_noise=0.1,
            spoof_asv_spread=0.1,
            seed=11,
        )
        ds = generate_synthetic(config)
        from sasvkit.data import enrollment_embedding

        target_scores = []
        spoof_scores = []
        for trial in ds.eval_trials:
            if trial.label == "nontarget":
                continue
            e = enrollment_embedding(ds.asv_store, trial.enroll_utterance_ids)
            t = ds.asv_store.get(trial.test_utterance_id)
            score = float(e @ t / (np.linalg.norm(e) * np.linalg.norm(t)))
            (target_scores if trial.label == "target" else spoof_scores).append(score)
        t_mean = np.mean(target_scores)
        s_mean = np.mean(spoof_scores)
        pooled = np.std(target_scores + spoof_scores)
        assert abs(t_mean - s_mean) < 0.5 * pooled

    def test_cm_speaker_trait_is_shared_across_bonafide_and_spoof(self):
        # a speaker's spoofed audio imitates their voice, so after removing
        # each class cluster's global mean, the per-speaker residuals of the
        # bonafide and spoofed CM embeddings point the same way
        config = SynthConfig(
            n_speakers=10,
            utts_per_speaker=24,
            spoofs_per_speaker=24,
            asv_dim=16,
            cm_dim=160,
            cm_speaker_scale=5.0,
            asv_channel_dims=4,
            seed=21,
        )
        ds = generate_synthetic(config)
        by_speaker = {}
        for utt_id, vec in ds.cm_store.items():
            speaker = utt_id.split("_")[0]
            kind = "bona" if "_B" in utt_id else "spoof"
            by_speaker.setdefault(speaker, {"bona": [], "spoof": []})[kind].append(vec)
        bona_means = {s: np.mean(d["bona"], axis=0) for s, d in by_speaker.items()}
        spoof_means = {s: np.mean(d["spoof"], axis=0) for s, d in by_speaker.items()}
        bona_center = np.mean(list(bona_means.values()), axis=0)
        spoof_center = np.mean(list(spoof_means.values()), axis=0)
        for speaker in by_speaker:
            a = bona_means[speaker] - bona_center
            b = spoof_means[speaker] - spoof_center
            cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
            assert cos > 0.5

    def test_channel_noise_is_confined_to_leading_coordinates(self):
        config = SynthConfig(
            n_speakers=8,
            utts_per_speaker=12,
            spoofs_per_speaker=8,
            asv_dim=64,
            cm_dim=8,
            asv_noise=0.01,
            spoof_asv_spread=0.011,
            asv_channel_dims=8,
            asv_channel_scale=5.0,
            seed=13,
        )
        ds = generate_synthetic(config)
        vectors = np.stack([ds.asv_store.get(u) for u in ds.asv_store.ids()])
        leading = np.abs(vectors[:, :8]).mean()
        trailing = np.abs(vectors[:, 8:]).mean()
        assert leading > 5 * trailing

    def test_channel_config_validation(self):
        with pytest.raises(ValueError, match="asv_channel_dims"):
            SynthConfig(asv_dim=16, asv_channel_dims=24)
        with pytest.raises(ValueError, match="asv_channel_scale"):
            SynthConfig(asv_channel_scale=-0.1)
        with pytest.raises(ValueError, match="cm_speaker_scale"):
            SynthConfig(cm_speaker_scale=-1.0)
