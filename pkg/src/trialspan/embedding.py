"""Feature construction: turn parsed records into numeric feature bundles.

Embedding vectors come from a pluggable provider. Two providers exist: a
deterministic feature-hashing provider (desk-scale stand-in for an external
language model) and an exact-lookup cache provider for precomputed vectors.
Both are immutable after construction and pure, so embedding calls are safe
to run in parallel across records.
"""

from __future__ import annotations

import hashlib
import io
import json
import re
import unicodedata
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CacheFormatError, DataFormatError, MissingEmbeddingError
from .ingest import TrialRecord

S_MAX = 32  # sentence slots per criteria segment
S_TOTAL = 2 * S_MAX  # inclusion block then exclusion block

CACHE_FORMAT = "tdem-jsonl"

_WORD = re.compile(r"\w+")


def normalize_key(text: str) -> str:
    """NFC-normalize and collapse whitespace; the canonical embedding key."""
    return " ".join(unicodedata.normalize("NFC", text).split())


def hash_embed(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic text vector from hashed words and character 3-grams.

    Lowercased word tokens and character trigrams of the token stream are
    each hashed (keyed blake2b, so the seed changes the whole map) into one
    of ``dim`` buckets with a +/-1 sign; the accumulated vector is
    L2-normalized. Empty text gives the zero vector.
    """
    vec = np.zeros(dim, dtype=np.float64)
    tokens = _WORD.findall(text.lower())
    if not tokens:
        return vec
    stream = " ".join(tokens)
    features = [f"w:{tok}" for tok in tokens]
    features += [f"c:{stream[i:i + 3]}" for i in range(len(stream) - 2)]
    key = (seed % 2**64).to_bytes(8, "little")
    for feature in features:
        digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=9, key=key).digest()
        bucket = int.from_bytes(digest[:8], "little") % dim
        vec[bucket] += 1.0 if digest[8] & 1 else -1.0
    norm = np.linalg.norm(vec)
    if norm > 0.0:
        vec /= norm
    return vec


@dataclass(frozen=True)
class HashedProvider:
    """Feature-hashing embedding provider; same (dim, seed, text) -> same vector."""

    dim: int
    seed: int = 0
    kind: str = field(default="hashed", init=False)

    def embed(self, text: str) -> np.ndarray:
        return hash_embed(normalize_key(text), self.dim, self.seed)


class CacheProvider:
    """Exact-lookup provider over precomputed vectors; misses are hard errors."""

    kind = "precomputed-cache"

    def __init__(self, dim: int, table: dict[str, np.ndarray], path: Optional[str] = None):
        self.dim = dim
        self._table = table
        self.cache_path = path

    def embed(self, text: str) -> np.ndarray:
        key = normalize_key(text)
        try:
            return self._table[key]
        except KeyError:
            raise MissingEmbeddingError(f"no embedding cached for key {key!r}") from None

    def __contains__(self, text: str) -> bool:
        return normalize_key(text) in self._table

    def __len__(self) -> int:
        return len(self._table)


def load_cache(path: str | Path) -> CacheProvider:
    """Load a tdem-jsonl embedding cache (header line, then key/vec records)."""
    with open(path, encoding="utf-8") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as err:
            raise CacheFormatError(f"{path}: bad header line: {err}") from err
        if header.get("format") != CACHE_FORMAT:
            raise CacheFormatError(f"{path}: unknown cache format {header.get('format')!r}")
        dim = header.get("dim")
        if not isinstance(dim, int) or dim <= 0:
            raise CacheFormatError(f"{path}: bad dim in header: {dim!r}")
        table: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                key, vec = row["key"], row["vec"]
            except (json.JSONDecodeError, KeyError, TypeError) as err:
                raise CacheFormatError(f"{path}:{lineno}: bad record: {err}") from err
            if len(vec) != dim:
                raise CacheFormatError(
                    f"{path}:{lineno}: vector length {len(vec)} != header dim {dim}"
                )
            table[normalize_key(key)] = np.asarray(vec, dtype=np.float64)
    return CacheProvider(dim, table, path=str(path))


def save_cache(path: str | Path, table: dict[str, np.ndarray], dim: int) -> None:
    """Write a tdem-jsonl cache; keys are normalized on the way out."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"format": CACHE_FORMAT, "dim": dim}) + "\n")
        for key, vec in table.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (dim,):
                raise CacheFormatError(f"vector for {key!r} has shape {vec.shape}, want ({dim},)")
            fh.write(json.dumps({"key": normalize_key(key), "vec": vec.tolist()}) + "\n")


def phase_onehot(phase: int) -> np.ndarray:
    """Unit basis vector over the four trial phases."""
    if phase not in (1, 2, 3, 4):
        raise ValueError(f"phase must be 1..4, got {phase!r}")
    vec = np.zeros(4, dtype=np.float64)
    vec[phase - 1] = 1.0
    return vec


def embed_set(provider, names: list[str]) -> np.ndarray:
    """Arithmetic mean of the per-name vectors.

    Accumulation follows a canonical (sorted) name order so reordering the
    input changes nothing, not even the last bit.
    """
    if not names:
        raise ValueError("cannot embed an empty name set")
    vecs = [provider.embed(name) for name in sorted(names, key=normalize_key)]
    return np.mean(vecs, axis=0)


@dataclass
class EmbeddedTrial:
    """Numeric feature bundle for one trial.

    ``sentence_mat`` has 64 rows: inclusion sentences fill slots 0..31 in
    order, exclusion sentences slots 32..63; overflow is truncated and the
    shortfall stays zero with ``sentence_mask`` false. Masked rows must be
    all-zero so padding never leaks into the model.
    """

    nct_id: str
    phase_onehot: np.ndarray  # (4,)
    drug_vec: np.ndarray  # (d,)
    disease_vec: np.ndarray  # (d,)
    sentence_mat: np.ndarray  # (64, d)
    sentence_mask: np.ndarray  # (64,) bool
    label: Optional[float] = None  # duration in years; absent at inference

    @property
    def dim(self) -> int:
        return self.drug_vec.shape[0]

    @property
    def phase(self) -> int:
        return int(np.argmax(self.phase_onehot)) + 1

    @property
    def segment(self) -> tuple[str, ...]:
        return ("inclusion",) * S_MAX + ("exclusion",) * S_MAX


def build_features(provider, record: TrialRecord) -> EmbeddedTrial:
    """Embed one eligible record: one provider vector per criterion sentence."""
    d = provider.dim
    mat = np.zeros((S_TOTAL, d), dtype=np.float64)
    mask = np.zeros(S_TOTAL, dtype=bool)
    for slot, sentence in enumerate(record.inclusion[:S_MAX]):
        mat[slot] = provider.embed(sentence)
        mask[slot] = True
    for slot, sentence in enumerate(record.exclusion[:S_MAX]):
        mat[S_MAX + slot] = provider.embed(sentence)
        mask[S_MAX + slot] = True
    return EmbeddedTrial(
        nct_id=record.nct_id,
        phase_onehot=phase_onehot(record.phase),
        drug_vec=embed_set(provider, record.drugs),
        disease_vec=embed_set(provider, record.diseases),
        sentence_mat=mat,
        sentence_mask=mask,
        label=record.duration_years,
    )


def embed_dataset(provider, records: list[TrialRecord]) -> list[EmbeddedTrial]:
    return [build_features(provider, record) for record in records]


# --- embedded-dataset artifact --------------------------------------------
# A zip of .npy members with fixed timestamps: rerunning `embed` on the same
# inputs must reproduce the artifact byte for byte (np.savez stamps wall
# time into the zip, which would break that).


def save_embedded(trials: list[EmbeddedTrial], path: str | Path) -> None:
    if not trials:
        raise DataFormatError("refusing to write an empty embedded dataset")
    d = trials[0].dim
    for t in trials:
        if t.dim != d:
            raise DataFormatError(f"mixed embedding dims: {t.nct_id} has d={t.dim}, want {d}")
    arrays = {
        "nct_id": np.asarray([t.nct_id for t in trials]),
        "phase_onehot": np.stack([t.phase_onehot for t in trials]),
        "drug_vec": np.stack([t.drug_vec for t in trials]),
        "disease_vec": np.stack([t.disease_vec for t in trials]),
        "sentence_mat": np.stack([t.sentence_mat for t in trials]),
        "sentence_mask": np.stack([t.sentence_mask for t in trials]),
        "label": np.asarray(
            [np.nan if t.label is None else t.label for t in trials], dtype=np.float64
        ),
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr))
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_embedded(path: str | Path) -> list[EmbeddedTrial]:
    try:
        data = np.load(path)
    except (OSError, ValueError) as err:
        raise DataFormatError(f"{path}: not an embedded dataset: {err}") from err
    required = {"nct_id", "phase_onehot", "drug_vec", "disease_vec",
                "sentence_mat", "sentence_mask", "label"}
    missing = required - set(data.files)
    if missing:
        raise DataFormatError(f"{path}: missing arrays: {sorted(missing)}")
    trials = []
    for i in range(len(data["nct_id"])):
        label = float(data["label"][i])
        trials.append(
            EmbeddedTrial(
                nct_id=str(data["nct_id"][i]),
                phase_onehot=data["phase_onehot"][i],
                drug_vec=data["drug_vec"][i],
                disease_vec=data["disease_vec"][i],
                sentence_mat=data["sentence_mat"][i],
                sentence_mask=data["sentence_mask"][i],
                label=None if np.isnan(label) else label,
            )
        )
    return trials
