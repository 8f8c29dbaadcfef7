"""Tests for embedding stores and protocol parsing."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sasvkit.data import (
    EmbeddingStore,
    TrialRecord,
    UtteranceRecord,
    enrollment_embedding,
    load_embedding_store,
    parse_cm_protocol,
    parse_enrollment_map,
    parse_trial_lines,
    parse_trial_list,
    write_embedding_store,
    write_enrollment_map,
    write_protocol,
    write_trial_list,
)

PROTOCOL_SAMPLE = """\
LA_0079 LA_T_1138215 - - bonafide
LA_0079 LA_T_1271820 - A01 spoof
LA_0081 LA_T_1331467 - - bonafide
"""


class TestProtocolParsing:
    def test_basic_rows(self):
        records = parse_cm_protocol(PROTOCOL_SAMPLE)
        assert len(records) == 3
        assert records[0] == UtteranceRecord("LA_T_1138215", "LA_0079", "bonafide", None)
        assert records[1].spoof_key == "spoof"
        assert records[1].system_id == "A01"

    def test_unknown_key_maps_to_spoof(self):
        records = parse_cm_protocol("SPK1 U1 - A07 tts\n")
        assert records[0].spoof_key == "spoof"

    def test_wrong_column_count_names_line(self):
        with pytest.raises(ValueError, match="line 2"):
            parse_cm_protocol("S U - - bonafide\nS U - bonafide\n")

    def test_blank_lines_skipped(self):
        records = parse_cm_protocol("\nS U - - bonafide\n\n")
        assert len(records) == 1

    def test_round_trip(self, tmp_path):
        records = parse_cm_protocol(PROTOCOL_SAMPLE)
        out = tmp_path / "protocol.txt"
        write_protocol(records, out)
        assert parse_cm_protocol(out.read_text()) == records


class TestEnrollmentMap:
    def test_parse(self):
        mapping = parse_enrollment_map("SPK1 U1,U2,U3\nSPK2 U9\n")
        assert mapping == {"SPK1": ("U1", "U2", "U3"), "SPK2": ("U9",)}

    def test_duplicate_speaker_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            parse_enrollment_map("S U1\nS U2\n")

    def test_empty_utterances_rejected(self):
        with pytest.raises(ValueError):
            parse_enrollment_map("S ,\n")

    def test_round_trip(self, tmp_path):
        mapping = {"A": ("U1", "U2"), "B": ("U3",)}
        out = tmp_path / "enroll.txt"
        write_enrollment_map(mapping, out)
        assert parse_enrollment_map(out.read_text()) == mapping


class TestTrialList:
    def test_resolution_against_map(self):
        mapping = {"SPK1": ("U1", "U2")}
        trials = parse_trial_list("SPK1 U7 target\nSPK1 U8 spoof\n", mapping)
        assert trials[0] == TrialRecord("SPK1", ("U1", "U2"), "U7", "target")
        assert trials[1].label == "spoof"

    def test_bonafide_label_rejected(self):
        with pytest.raises(ValueError, match="label"):
            parse_trial_lines("SPK1 U7 bonafide\n")

    def test_missing_speaker_rejected(self):
        with pytest.raises(ValueError, match="enrollment map"):
            parse_trial_list("SPK9 U7 target\n", {"SPK1": ("U1",)})

    def test_wrong_columns_named(self):
        with pytest.raises(ValueError, match="line 1"):
            parse_trial_lines("SPK1 target\n")

    def test_round_trip(self, tmp_path):
        mapping = {"A": ("U1",), "B": ("U2",)}
        trials = [
            TrialRecord("A", ("U1",), "T1", "target"),
            TrialRecord("B", ("U2",), "T2", "nontarget"),
        ]
        out = tmp_path / "trials.txt"
        write_trial_list(trials, out)
        assert parse_trial_list(out.read_text(), mapping) == trials

    def test_empty_enrollment_rejected(self):
        with pytest.raises(ValueError):
            TrialRecord("A", (), "T1", "target")


def make_store(dim=4, kind="asv", n=5, seed=0):
    rng = np.random.default_rng(seed)
    store = EmbeddingStore(dim, kind)
    for i in range(n):
        store.add(f"U{i:03d}", rng.standard_normal(dim))
    return store


class TestEmbeddingStore:
    def test_add_and_get(self):
        store = EmbeddingStore(2, "cm")
        store.add("U1", [0.5, -0.25])
        np.testing.assert_array_equal(store.get("U1"), [0.5, -0.25])
        assert "U1" in store
        assert len(store) == 1

    def test_duplicate_id_rejected(self):
        store = EmbeddingStore(2, "asv")
        store.add("U1", [0.0, 0.0])
        with pytest.raises(ValueError, match="duplicate"):
            store.add("U1", [1.0, 1.0])

    def test_dim_mismatch_rejected(self):
        store = EmbeddingStore(3, "asv")
        with pytest.raises(ValueError):
            store.add("U1", [1.0, 2.0])

    def test_non_finite_rejected(self):
        store = EmbeddingStore(2, "asv")
        with pytest.raises(ValueError):
            store.add("U1", [np.nan, 0.0])

    def test_missing_id_error_names_store_kind(self):
        store = EmbeddingStore(2, "cm")
        with pytest.raises(KeyError, match="cm store"):
            store.get("nope")

    def test_matrix_lists_all_missing(self):
        store = make_store(n=2)
        with pytest.raises(KeyError) as err:
            store.matrix(["U000", "X1", "X2"])
        assert "X1" in str(err.value) and "X2" in str(err.value)

    def test_lookup_is_pure(self):
        store = make_store()
        a = store.get("U001")
        b = store.get("U001")
        np.testing.assert_array_equal(a, b)

    def test_single_precision_rounding_on_insert(self):
        store = EmbeddingStore(1, "asv")
        value = 0.1  # not representable in float32
        store.add("U1", [value])
        assert store.get("U1")[0] == np.float64(np.float32(value))

    def test_mean_vector(self):
        store = EmbeddingStore(2, "cm")
        store.add("A", [1.0, 0.0])
        store.add("B", [3.0, 2.0])
        np.testing.assert_allclose(store.mean_vector(), [2.0, 1.0])

    def test_invalid_kind_rejected(self):
        with pytest.raises(ValueError):
            EmbeddingStore(4, "xvector")


class TestStoreSerialization:
    def test_binary_round_trip_bit_exact(self, tmp_path):
        store = make_store(dim=7, n=9, seed=3)
        path = tmp_path / "store.emb"
        write_embedding_store(store, path, fmt="binary")
        loaded = load_embedding_store(path, "asv")
        assert loaded.dim == store.dim
        assert loaded.ids() == store.ids()
        for utt_id, vec in store.items():
            np.testing.assert_array_equal(loaded.get(utt_id), vec)

    def test_tsv_round_trip_within_tolerance(self, tmp_path):
        store = make_store(dim=5, n=6, seed=4, kind="cm")
        path = tmp_path / "store.tsv"
        write_embedding_store(store, path, fmt="tsv")
        loaded = load_embedding_store(path, "cm")
        for utt_id, vec in store.items():
            np.testing.assert_allclose(loaded.get(utt_id), vec, atol=1e-6)

    def test_tsv_parse_minimal(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("utt1\t0.1\t0.2\n")
        store = load_embedding_store(path, "asv")
        assert store.dim == 2
        assert len(store) == 1

    def test_tsv_ragged_rows_rejected(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("utt1\t0.1\t0.2\nutt2\t0.3\n")
        with pytest.raises(ValueError, match="line 2"):
            load_embedding_store(path, "asv")

    def test_truncated_binary_rejected(self, tmp_path):
        store = make_store()
        path = tmp_path / "store.emb"
        write_embedding_store(store, path, fmt="binary")
        raw = path.read_bytes()
        path.write_bytes(raw[:-3])
        with pytest.raises(ValueError, match="truncated"):
            load_embedding_store(path, "asv")

    def test_trailing_garbage_rejected(self, tmp_path):
        store = make_store()
        path = tmp_path / "store.emb"
        write_embedding_store(store, path, fmt="binary")
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(ValueError):
            load_embedding_store(path, "asv")

    def test_duplicate_in_file_rejected(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("utt1\t0.1\nutt1\t0.2\n")
        with pytest.raises(ValueError, match="duplicate"):
            load_embedding_store(path, "asv")

    def test_non_finite_in_file_rejected(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("utt1\tnan\n")
        with pytest.raises(ValueError):
            load_embedding_store(path, "asv")

    @settings(max_examples=25, deadline=None)
    @given(
        dim=st.integers(1, 16),
        n=st.integers(1, 12),
        seed=st.integers(0, 2**16),
    )
    def test_binary_round_trip_property(self, tmp_path_factory, dim, n, seed):
        tmp = tmp_path_factory.mktemp("store")
        store = make_store(dim=dim, n=n, seed=seed)
        path = tmp / "s.emb"
        write_embedding_store(store, path, fmt="binary")
        loaded = load_embedding_store(path, "asv")
        for utt_id, vec in store.items():
            np.testing.assert_array_equal(loaded.get(utt_id), vec)


class TestEnrollmentEmbedding:
    def test_mean_of_vectors(self):
        store = EmbeddingStore(2, "asv")
        store.add("U1", [1.0, 0.0])
        store.add("U2", [0.0, 1.0])
        np.testing.assert_allclose(enrollment_embedding(store, ["U1", "U2"]), [0.5, 0.5])

    def test_single_utterance_identity(self):
        store = EmbeddingStore(2, "asv")
        store.add("U1", [0.25, -0.5])
        np.testing.assert_array_equal(enrollment_embedding(store, ["U1"]), [0.25, -0.5])

    def test_missing_id_rejected(self):
        store = EmbeddingStore(2, "asv")
        store.add("U1", [0.0, 0.0])
        with pytest.raises(KeyError, match="U9"):
            enrollment_embedding(store, ["U1", "U9"])

    def test_empty_rejected(self):
        store = EmbeddingStore(2, "asv")
        with pytest.raises(ValueError):
            enrollment_embedding(store, [])
