"""Embedding stores and protocol / trial-list file handling.

Two embedding kinds flow through the pipeline: speaker-verification ("asv")
embeddings and countermeasure ("cm") embeddings. Stores keep one vector per
utterance id. On disk a store is either a small binary format (magic
``SASVEMB1``, little-endian, single-precision vectors) or a TSV file with the
utterance id followed by the vector components. Vectors are rounded to single
precision when they enter a store so that the binary round trip is bit-exact.

Protocol files use the ASVspoof layout: five whitespace-separated columns
``speaker utterance _ system key``. Trial lists carry three columns
``enroll_speaker test_utterance label`` and are resolved against a separate
enrollment map ``speaker utt1,utt2,...``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

STORE_MAGIC = b"SASVEMB1"
STORE_KINDS = ("asv", "cm")
SPOOF_KEYS = ("bonafide", "spoof")
TRIAL_LABELS = ("target", "nontarget", "spoof")


@dataclass(frozen=True)
class UtteranceRecord:
    """One protocol row: an utterance, its speaker, and its spoofing status."""

    utterance_id: str
    speaker_id: str
    spoof_key: str
    system_id: str | None = None

    def __post_init__(self):
        if self.spoof_key not in SPOOF_KEYS:
            raise ValueError(f"spoof_key must be one of {SPOOF_KEYS}, got {self.spoof_key!r}")
        if not self.utterance_id or not self.speaker_id:
            raise ValueError("utterance_id and speaker_id must be non-empty")

    @property
    def is_bonafide(self) -> bool:
        return self.spoof_key == "bonafide"


@dataclass(frozen=True)
class TrialRecord:
    """A verification trial: enrolled speaker vs. one test utterance."""

    enroll_speaker_id: str
    enroll_utterance_ids: tuple
    test_utterance_id: str
    label: str

    def __post_init__(self):
        object.__setattr__(self, "enroll_utterance_ids", tuple(self.enroll_utterance_ids))
        if not self.enroll_utterance_ids:
            raise ValueError("a trial needs at least one enrollment utterance")
        if self.label not in TRIAL_LABELS:
            raise ValueError(f"label must be one of {TRIAL_LABELS}, got {self.label!r}")


class EmbeddingStore:
    """Mapping from utterance id to a fixed-dimension embedding vector.

    Vectors are held as float64 but rounded through float32 on insertion,
    matching the precision of the binary file format.
    """

    def __init__(self, dim: int, kind: str):
        if dim <= 0:
            raise ValueError("embedding dimension must be positive")
        if kind not in STORE_KINDS:
            raise ValueError(f"kind must be one of {STORE_KINDS}, got {kind!r}")
        self.dim = int(dim)
        self.kind = kind
        self._entries: dict[str, np.ndarray] = {}

    def add(self, utterance_id: str, vector) -> None:
        if not utterance_id:
            raise ValueError("utterance id must be non-empty")
        if utterance_id in self._entries:
            raise ValueError(f"duplicate utterance id {utterance_id!r}")
        arr = np.asarray(vector, dtype=np.float64)
        if arr.shape != (self.dim,):
            raise ValueError(
                f"vector for {utterance_id!r} has shape {arr.shape}, expected ({self.dim},)"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"vector for {utterance_id!r} contains non-finite values")
        self._entries[utterance_id] = arr.astype(np.float32).astype(np.float64)

    def get(self, utterance_id: str) -> np.ndarray:
        try:
            return self._entries[utterance_id]
        except KeyError:
            raise KeyError(f"utterance {utterance_id!r} not in {self.kind} store") from None

    def __contains__(self, utterance_id: str) -> bool:
        return utterance_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def ids(self) -> list:
        return list(self._entries.keys())

    def items(self):
        return self._entries.items()

    def matrix(self, utterance_ids) -> np.ndarray:
        """Stack vectors for the given ids; reports all missing ids at once."""
        missing = [u for u in utterance_ids if u not in self._entries]
        if missing:
            raise KeyError(
                f"{len(missing)} utterance(s) missing from {self.kind} store: "
                + ", ".join(sorted(missing)[:10])
                + ("..." if len(missing) > 10 else "")
            )
        if not utterance_ids:
            return np.empty((0, self.dim))
        return np.stack([self._entries[u] for u in utterance_ids])

    def mean_vector(self) -> np.ndarray:
        """Store-wide mean, used as the zero-information stand-in vector."""
        if not self._entries:
            raise ValueError(f"{self.kind} store is empty")
        return np.mean(np.stack(list(self._entries.values())), axis=0)


def enrollment_embedding(store: EmbeddingStore, utterance_ids) -> np.ndarray:
    """Arithmetic mean of the enrollment utterances' vectors."""
    ids = list(utterance_ids)
    if not ids:
        raise ValueError("enrollment needs at least one utterance id")
    return store.matrix(ids).mean(axis=0)


def write_embedding_store(store: EmbeddingStore, path, fmt: str = "binary") -> None:
    path = Path(path)
    if fmt == "binary":
        with open(path, "wb") as fh:
            fh.write(STORE_MAGIC)
            fh.write(struct.pack("<II", store.dim, len(store)))
            for utt_id, vec in store.items():
                encoded = utt_id.encode("utf-8")
                if len(encoded) > 0xFFFF:
                    raise ValueError(f"utterance id too long: {utt_id!r}")
                fh.write(struct.pack("<H", len(encoded)))
                fh.write(encoded)
                fh.write(vec.astype("<f4").tobytes())
    elif fmt == "tsv":
        with open(path, "w", encoding="utf-8") as fh:
            for utt_id, vec in store.items():
                fh.write(utt_id + "\t" + "\t".join(repr(float(v)) for v in vec) + "\n")
    else:
        raise ValueError(f"unknown store format {fmt!r}")


def _load_binary_store(raw: bytes, kind: str) -> EmbeddingStore:
    if raw[: len(STORE_MAGIC)] != STORE_MAGIC:
        raise ValueError("bad magic bytes: not an embedding store")
    offset = len(STORE_MAGIC)
    if len(raw) < offset + 8:
        raise ValueError("truncated store header")
    dim, count = struct.unpack_from("<II", raw, offset)
    offset += 8
    store = EmbeddingStore(dim, kind)
    vec_bytes = 4 * dim
    for i in range(count):
        if len(raw) < offset + 2:
            raise ValueError(f"truncated store: record {i} header missing")
        (id_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        if len(raw) < offset + id_len + vec_bytes:
            raise ValueError(f"truncated store: record {i} incomplete")
        utt_id = raw[offset : offset + id_len].decode("utf-8")
        offset += id_len
        vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=offset).astype(np.float64)
        offset += vec_bytes
        store.add(utt_id, vec)
    if offset != len(raw):
        raise ValueError("trailing bytes after last store record")
    return store


def _load_tsv_store(text: str, kind: str) -> EmbeddingStore:
    store = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 2:
            raise ValueError(f"line {lineno}: expected an id and at least one component")
        try:
            vec = np.array([float(v) for v in fields[1:]])
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric embedding component") from None
        if store is None:
            store = EmbeddingStore(len(fields) - 1, kind)
        if len(fields) - 1 != store.dim:
            raise ValueError(
                f"line {lineno}: dimension {len(fields) - 1} differs from first row ({store.dim})"
            )
        try:
            store.add(fields[0], vec)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if store is None:
        raise ValueError("empty embedding store file")
    return store


def load_embedding_store(path, kind: str) -> EmbeddingStore:
    """Load a store from disk, sniffing binary vs. TSV by the magic bytes."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(STORE_MAGIC)] == STORE_MAGIC:
        return _load_binary_store(raw, kind)
    return _load_tsv_store(raw.decode("utf-8"), kind)


def parse_cm_protocol(text: str) -> list:
    """Parse a five-column ASVspoof protocol into utterance records."""
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 5:
            raise ValueError(f"line {lineno}: expected 5 columns, got {len(fields)}")
        speaker, utt, _, system, key = fields
        records.append(
            UtteranceRecord(
                utterance_id=utt,
                speaker_id=speaker,
                spoof_key="bonafide" if key == "bonafide" else "spoof",
                system_id=None if system == "-" else system,
            )
        )
    return records


def write_protocol(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            system = rec.system_id if rec.system_id is not None else "-"
            fh.write(f"{rec.speaker_id} {rec.utterance_id} - {system} {rec.spoof_key}\n")


def parse_enrollment_map(text: str) -> dict:
    """Parse ``speaker utt1,utt2,...`` lines into a speaker -> ids mapping."""
    mapping: dict[str, tuple] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 2:
            raise ValueError(f"line {lineno}: expected 'speaker utt1,utt2,...'")
        speaker, utts = fields
        if speaker in mapping:
            raise ValueError(f"line {lineno}: duplicate speaker {speaker!r}")
        ids = tuple(u for u in utts.split(",") if u)
        if not ids:
            raise ValueError(f"line {lineno}: speaker {speaker!r} has no utterances")
        mapping[speaker] = ids
    return mapping


def write_enrollment_map(mapping: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for speaker, ids in mapping.items():
            fh.write(f"{speaker} {','.join(ids)}\n")


def parse_trial_lines(text: str) -> list:
    """Parse the raw three-column trial rows without resolving enrollment."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 3:
            raise ValueError(f"line {lineno}: expected 3 columns, got {len(fields)}")
        speaker, test_utt, label = fields
        if label not in TRIAL_LABELS:
            raise ValueError(
                f"line {lineno}: label must be one of {TRIAL_LABELS}, got {label!r}"
            )
        rows.append((speaker, test_utt, label))
    return rows


def parse_trial_list(text: str, enrollment_map: dict) -> list:
    """Resolve trial rows against the enrollment map into TrialRecords."""
    trials = []
    for speaker, test_utt, label in parse_trial_lines(text):
        if speaker not in enrollment_map:
            raise ValueError(f"speaker {speaker!r} missing from the enrollment map")
        trials.append(
            TrialRecord(
                enroll_speaker_id=speaker,
                enroll_utterance_ids=enrollment_map[speaker],
                test_utterance_id=test_utt,
                label=label,
            )
        )
    return trials


def write_trial_list(trials, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trial in trials:
            fh.write(f"{trial.enroll_speaker_id} {trial.test_utterance_id} {trial.label}\n")
