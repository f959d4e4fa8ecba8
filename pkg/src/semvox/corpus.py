"""Study corpus: JSONL ingest, deterministic splits, tokenization, TF-IDF retrieval.

The TF-IDF machinery is deliberately plain: raw term counts, smoothed IDF
ln((1+N)/(1+df)) + 1, L2-normalized document vectors, cosine scoring through
an inverted index.
"""

from __future__ import annotations

import json
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

REQUIRED_SPACE = "MNI152"
# Literal token substituted for masked-out words in the degraded query
# environment; the refinement mock treats it as noise.
MASK_TOKEN = "mask"
SPLIT_NAMES = ("train", "val", "test")
DEFAULT_RATIOS = (0.6, 0.2, 0.2)

INDEX_MAGIC = b"C2BIDX01"
INDEX_VERSION = 1

_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")


class CorpusError(ValueError):
    """Raised for unrecoverable corpus problems (duplicate ids, bad files)."""


class DuplicateIdError(CorpusError):
    pass


class IndexFormatError(ValueError):
    """An index cache file violates the expected binary layout."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split on every non-alphanumeric character, drop empties."""
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


@dataclass(frozen=True)
class StudyRecord:
    """One study: id, title text, peak coordinates, and optional text variants."""

    id: str
    title: str
    coordinates: tuple[tuple[float, float, float], ...] = ()
    space: str = REQUIRED_SPACE
    variants: Mapping[str, str] | None = None

    @property
    def has_coordinates(self) -> bool:
        return len(self.coordinates) > 0


class Corpus:
    """An ordered set of study records with unique ids."""

    def __init__(self, records: Iterable[StudyRecord]):
        self.records: tuple[StudyRecord, ...] = tuple(records)
        by_id: dict[str, StudyRecord] = {}
        for rec in self.records:
            if rec.id in by_id:
                raise DuplicateIdError(f"duplicate study id {rec.id!r}")
            by_id[rec.id] = rec
        self.by_id = by_id

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, study_id: str) -> StudyRecord:
        return self.by_id[study_id]

    def ids(self) -> list[str]:
        return [r.id for r in self.records]


@dataclass(frozen=True)
class LineDiagnostic:
    line_no: int
    field: str
    message: str

    def __str__(self) -> str:
        return f"line {self.line_no}: field {self.field!r}: {self.message}"


@dataclass
class IngestResult:
    corpus: Corpus
    rejected: list[LineDiagnostic]

    @property
    def n_rejected(self) -> int:
        return len(self.rejected)


def _parse_record(obj: dict, line_no: int) -> StudyRecord:
    """Validate one JSONL object; raises ValueError tagged with the bad field."""

    def fail(fieldname: str, msg: str):
        raise _FieldError(fieldname, msg)

    if not isinstance(obj, dict):
        fail("<line>", "not a JSON object")
    sid = obj.get("id")
    if not isinstance(sid, str) or not sid:
        fail("id", "missing or empty id")
    title = obj.get("title")
    if not isinstance(title, str):
        fail("title", "missing or non-string title")
    space = obj.get("space")
    if space != REQUIRED_SPACE:
        fail("space", f"space must be {REQUIRED_SPACE!r}, got {space!r}")
    raw_coords = obj.get("coordinates")
    if not isinstance(raw_coords, list):
        fail("coordinates", "missing or non-list coordinates")
    coords = []
    for i, c in enumerate(raw_coords):
        if not isinstance(c, (list, tuple)) or len(c) != 3:
            fail("coordinates", f"entry {i} is not a 3-element array")
        try:
            xyz = tuple(float(v) for v in c)
        except (TypeError, ValueError):
            fail("coordinates", f"entry {i} has non-numeric values")
        if any(not math.isfinite(v) for v in xyz):
            fail("coordinates", f"entry {i} has non-finite values")
        coords.append(xyz)
    variants = obj.get("variants")
    if variants is not None:
        if not isinstance(variants, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in variants.items()
        ):
            fail("variants", "variants must map strings to strings")
    return StudyRecord(
        id=sid, title=title, coordinates=tuple(coords), space=space, variants=variants
    )


class _FieldError(ValueError):
    def __init__(self, fieldname: str, message: str):
        super().__init__(message)
        self.fieldname = fieldname


def ingest_jsonl(path) -> IngestResult:
    """Read a JSONL corpus; invalid lines are rejected with diagnostics.

    Duplicate ids across valid lines are a hard error, not a diagnostic.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus file {path}: {exc}") from exc

    records: list[StudyRecord] = []
    seen: set[str] = set()
    rejected: list[LineDiagnostic] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            rejected.append(LineDiagnostic(line_no, "<line>", f"invalid JSON: {exc.msg}"))
            continue
        try:
            rec = _parse_record(obj, line_no)
        except _FieldError as exc:
            rejected.append(LineDiagnostic(line_no, exc.fieldname, str(exc)))
            continue
        if rec.id in seen:
            raise DuplicateIdError(f"line {line_no}: duplicate study id {rec.id!r}")
        seen.add(rec.id)
        records.append(rec)
    return IngestResult(corpus=Corpus(records), rejected=rejected)


def record_to_json_obj(rec: StudyRecord) -> dict:
    obj = {
        "id": rec.id,
        "title": rec.title,
        "coordinates": [list(c) for c in rec.coordinates],
        "space": rec.space,
    }
    if rec.variants is not None:
        obj["variants"] = dict(rec.variants)
    return obj


def write_jsonl(corpus: Corpus, path) -> None:
    lines = [json.dumps(record_to_json_obj(r), sort_keys=True) for r in corpus]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


# ---------------------------------------------------------------------------
# Deterministic ratio split
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitAssignment:
    ratios: tuple[float, float, float]
    seed: int
    assignment: Mapping[str, str]

    def ids_for(self, split: str) -> list[str]:
        if split not in SPLIT_NAMES:
            raise ValueError(f"unknown split {split!r}")
        return [sid for sid, s in self.assignment.items() if s == split]

    def counts(self) -> dict[str, int]:
        out = {name: 0 for name in SPLIT_NAMES}
        for s in self.assignment.values():
            out[s] += 1
        return out


def split_corpus(corpus: Corpus, ratios=DEFAULT_RATIOS, seed: int = 0) -> SplitAssignment:
    """Partition record ids into train/val/test by seeded shuffle.

    Record positions are permuted with numpy PCG64(seed). Per-split counts are
    floor(ratio*N); leftovers go to val then test, alternating. The assignment
    map preserves corpus record order.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be three non-negative reals, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1 within 1e-9, got sum {sum(ratios)!r}")

    n = len(corpus)
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(n)
    # Guard against float products landing epsilon below an exact integer.
    counts = [math.floor(r * n + 1e-9) for r in ratios]
    leftover = n - sum(counts)
    slot = 1  # val first, then test, alternating
    while leftover > 0:
        counts[slot] += 1
        leftover -= 1
        slot = 2 if slot == 1 else 1

    ids = corpus.ids()
    split_of = {}
    pos = 0
    for name, count in zip(SPLIT_NAMES, counts):
        for i in order[pos : pos + count]:
            split_of[ids[i]] = name
        pos += count
    assignment = {sid: split_of[sid] for sid in ids}
    return SplitAssignment(ratios=ratios, seed=int(seed), assignment=assignment)


# ---------------------------------------------------------------------------
# TF-IDF index
# ---------------------------------------------------------------------------

@dataclass
class TfIdfIndex:
    """Immutable term-weight index over a document set.

    Document vectors are L2-normalized tf*idf stored as CSR arrays; an
    inverted index (per-term postings) is derived for query scoring.
    """

    vocabulary: dict[str, int]
    idf: np.ndarray  # float64, per term
    doc_ids: tuple[str, ...]
    doc_texts: tuple[str, ...]
    indptr: np.ndarray   # uint64, len n_docs+1
    indices: np.ndarray  # uint32, term column per stored entry
    values: np.ndarray   # float64, normalized tf*idf
    _postings: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)
    _id_to_pos: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._id_to_pos:
            self._id_to_pos = {sid: i for i, sid in enumerate(self.doc_ids)}
        if not self._postings:
            self._postings = self._build_postings()

    def _build_postings(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        doc_of_entry = np.repeat(
            np.arange(len(self.doc_ids), dtype=np.uint32),
            np.diff(self.indptr).astype(np.int64),
        )
        order = np.argsort(self.indices, kind="stable")
        sorted_terms = self.indices[order]
        sorted_docs = doc_of_entry[order]
        sorted_vals = self.values[order]
        postings: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        if len(sorted_terms) == 0:
            return postings
        bounds = np.nonzero(np.diff(sorted_terms))[0] + 1
        starts = np.concatenate(([0], bounds))
        ends = np.concatenate((bounds, [len(sorted_terms)]))
        for s, e in zip(starts, ends):
            postings[int(sorted_terms[s])] = (sorted_docs[s:e].copy(), sorted_vals[s:e].copy())
        return postings

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)

    @property
    def n_terms(self) -> int:
        return len(self.vocabulary)

    def vectorize(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        """Normalized tf*idf vector of a text under this index's vocabulary.

        Returns (term columns, values); out-of-vocabulary tokens are ignored.
        Empty or fully out-of-vocabulary text gives the zero vector.
        """
        counts = Counter(tokenize(text))
        cols = []
        vals = []
        for term in sorted(counts):
            col = self.vocabulary.get(term)
            if col is None:
                continue
            cols.append(col)
            vals.append(counts[term] * self.idf[col])
        if not cols:
            return np.empty(0, dtype=np.uint32), np.empty(0, dtype=np.float64)
        v = np.asarray(vals, dtype=np.float64)
        norm = math.sqrt(float(np.dot(v, v)))
        if norm > 0:
            v = v / norm
        return np.asarray(cols, dtype=np.uint32), v

    def doc_vector(self, study_id: str) -> tuple[np.ndarray, np.ndarray]:
        pos = self._id_to_pos.get(study_id)
        if pos is None:
            raise KeyError(f"unknown document id {study_id!r}")
        lo, hi = int(self.indptr[pos]), int(self.indptr[pos + 1])
        return self.indices[lo:hi], self.values[lo:hi]

    def doc_text(self, study_id: str) -> str:
        pos = self._id_to_pos.get(study_id)
        if pos is None:
            raise KeyError(f"unknown document id {study_id!r}")
        return self.doc_texts[pos]

    def term_weights(self, text: str) -> dict[str, float]:
        """Unnormalized tf*idf weight of each in-vocabulary token of a text."""
        counts = Counter(tokenize(text))
        out = {}
        for term, tf in counts.items():
            col = self.vocabulary.get(term)
            if col is not None:
                out[term] = tf * float(self.idf[col])
        return out


def build_index(source) -> TfIdfIndex:
    """Build a TF-IDF index from a Corpus (titles) or any id -> text mapping."""
    if isinstance(source, Corpus):
        items = [(r.id, r.title) for r in source]
    elif isinstance(source, Mapping):
        items = list(source.items())
    else:
        items = [(sid, text) for sid, text in source]
    if not items:
        raise CorpusError("cannot build an index over zero documents")

    doc_ids = tuple(sid for sid, _ in items)
    doc_texts = tuple(text for _, text in items)
    if len(set(doc_ids)) != len(doc_ids):
        raise DuplicateIdError("duplicate document ids in index source")

    doc_counts = [Counter(tokenize(t)) for t in doc_texts]
    df: Counter = Counter()
    for counts in doc_counts:
        df.update(counts.keys())
    # Order-independent vocabulary: sorted terms.
    terms = sorted(df)
    vocabulary = {t: i for i, t in enumerate(terms)}
    n = len(items)
    idf = np.array(
        [math.log((1.0 + n) / (1.0 + df[t])) + 1.0 for t in terms], dtype=np.float64
    )

    indptr = np.zeros(n + 1, dtype=np.uint64)
    all_cols: list[np.ndarray] = []
    all_vals: list[np.ndarray] = []
    nnz = 0
    for i, counts in enumerate(doc_counts):
        cols = []
        vals = []
        for term in sorted(counts):
            col = vocabulary[term]
            cols.append(col)
            vals.append(counts[term] * idf[col])
        v = np.asarray(vals, dtype=np.float64)
        norm = math.sqrt(float(np.dot(v, v)))
        if norm > 0:
            v = v / norm
        all_cols.append(np.asarray(cols, dtype=np.uint32))
        all_vals.append(v)
        nnz += len(cols)
        indptr[i + 1] = nnz

    indices = (
        np.concatenate(all_cols) if nnz else np.empty(0, dtype=np.uint32)
    ).astype(np.uint32)
    values = (
        np.concatenate(all_vals) if nnz else np.empty(0, dtype=np.float64)
    ).astype(np.float64)
    return TfIdfIndex(
        vocabulary=vocabulary,
        idf=idf,
        doc_ids=doc_ids,
        doc_texts=doc_texts,
        indptr=indptr,
        indices=indices,
        values=values,
    )


def _sparse_dot(cols_a, vals_a, cols_b, vals_b) -> float:
    if len(cols_a) == 0 or len(cols_b) == 0:
        return 0.0
    pos_b = {int(c): i for i, c in enumerate(cols_b)}
    acc = 0.0
    for c, v in zip(cols_a, vals_a):
        j = pos_b.get(int(c))
        if j is not None:
            acc += float(v) * float(vals_b[j])
    return acc


def search(index: TfIdfIndex, query_text: str, k: int) -> list[tuple[str, float]]:
    """Top-k documents by cosine similarity to the query.

    Descending score, ties broken by ascending id; zero-score documents are
    omitted, so fewer than k results are possible.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q_cols, q_vals = index.vectorize(query_text)
    if len(q_cols) == 0:
        return []
    scores = np.zeros(index.n_docs, dtype=np.float64)
    for col, qv in zip(q_cols, q_vals):
        posting = index._postings.get(int(col))
        if posting is None:
            continue
        docs, vals = posting
        scores[docs] += qv * vals
    hit = np.nonzero(scores > 0.0)[0]
    results = [(index.doc_ids[i], min(float(scores[i]), 1.0)) for i in hit]
    results.sort(key=lambda item: (-item[1], item[0]))
    return results[:k]


def cosine_similarity(index: TfIdfIndex, text_a: str, text_b: str) -> float:
    """Cosine of two texts' tf*idf vectors under the index vocabulary, in [0,1]."""
    ca, va = index.vectorize(text_a)
    cb, vb = index.vectorize(text_b)
    return min(max(_sparse_dot(ca, va, cb, vb), 0.0), 1.0)


def doc_cosine(index: TfIdfIndex, text: str, study_id: str) -> float:
    """Cosine between a text and a stored document's vector."""
    ct, vt = index.vectorize(text)
    cd, vd = index.doc_vector(study_id)
    return min(max(_sparse_dot(ct, vt, cd, vd), 0.0), 1.0)


# ---------------------------------------------------------------------------
# Index cache: magic, version, JSON header (terms/ids/texts/sizes), raw arrays.
# Roundtrip is bit-exact.
# ---------------------------------------------------------------------------

def index_to_bytes(index: TfIdfIndex) -> bytes:
    terms = [None] * index.n_terms
    for term, col in index.vocabulary.items():
        terms[col] = term
    meta = {
        "version": INDEX_VERSION,
        "n_docs": index.n_docs,
        "n_terms": index.n_terms,
        "nnz": int(len(index.indices)),
        "terms": terms,
        "doc_ids": list(index.doc_ids),
        "doc_texts": list(index.doc_texts),
    }
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray()
    out += INDEX_MAGIC
    out += struct.pack("<I", INDEX_VERSION)
    out += struct.pack("<Q", len(meta_blob))
    out += meta_blob
    out += index.idf.astype("<f8").tobytes()
    out += index.indptr.astype("<u8").tobytes()
    out += index.indices.astype("<u4").tobytes()
    out += index.values.astype("<f8").tobytes()
    return bytes(out)


def index_from_bytes(blob: bytes) -> TfIdfIndex:
    if len(blob) < 8 or blob[:8] != INDEX_MAGIC:
        raise IndexFormatError(f"bad magic {blob[:8]!r}, expected {INDEX_MAGIC!r}")
    off = 8
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != INDEX_VERSION:
        raise IndexFormatError(f"unsupported index version {version}")
    (meta_len,) = struct.unpack_from("<Q", blob, off)
    off += 8
    try:
        meta = json.loads(blob[off : off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IndexFormatError(f"corrupt metadata block: {exc}") from exc
    off += meta_len
    n_docs = int(meta["n_docs"])
    n_terms = int(meta["n_terms"])
    nnz = int(meta["nnz"])
    expected = n_terms * 8 + (n_docs + 1) * 8 + nnz * 4 + nnz * 8
    if len(blob) - off != expected:
        raise IndexFormatError(
            f"payload length mismatch: expected {expected} bytes, got {len(blob) - off}"
        )
    idf = np.frombuffer(blob, dtype="<f8", count=n_terms, offset=off).copy()
    off += n_terms * 8
    indptr = np.frombuffer(blob, dtype="<u8", count=n_docs + 1, offset=off).copy()
    off += (n_docs + 1) * 8
    indices = np.frombuffer(blob, dtype="<u4", count=nnz, offset=off).copy()
    off += nnz * 4
    values = np.frombuffer(blob, dtype="<f8", count=nnz, offset=off).copy()
    vocabulary = {t: i for i, t in enumerate(meta["terms"])}
    return TfIdfIndex(
        vocabulary=vocabulary,
        idf=idf,
        doc_ids=tuple(meta["doc_ids"]),
        doc_texts=tuple(meta["doc_texts"]),
        indptr=indptr,
        indices=indices,
        values=values,
    )


def save_index(index: TfIdfIndex, path) -> None:
    Path(path).write_bytes(index_to_bytes(index))


def load_index(path) -> TfIdfIndex:
    return index_from_bytes(Path(path).read_bytes())
