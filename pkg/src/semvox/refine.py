"""Query refinement: retrieval, dynamic prompts, and iterative candidate scoring.

A raw text query is turned into a semantic query in three moves: retrieve the
most similar corpus samples by keyword search, ask a completion client to
rewrite the query with those samples as context, then iterate, feeding each
candidate back into the prompt as a positive or negative example depending on
whether it improved the running best similarity. The best-scoring candidate
over the whole history wins.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from semvox.corpus import TfIdfIndex, doc_cosine, search
from semvox.llm import (
    NEGATIVE_LABEL,
    POSITIVE_LABEL,
    QUERY_LABEL,
    SAMPLES_LABEL,
    LlmClient,
    LlmError,
)

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass
class T2SConfig:
    """Settings for one refinement session."""

    client: LlmClient
    retrieve_k: int = 5
    iterations: int = 3
    keyword_count: int = 8

    def __post_init__(self):
        if self.retrieve_k < 1:
            raise ValueError(f"retrieve_k must be >= 1, got {self.retrieve_k}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.keyword_count < 1:
            raise ValueError(f"keyword_count must be >= 1, got {self.keyword_count}")


@dataclass(frozen=True)
class IterationRecord:
    index: int
    candidate: str
    score: float
    classification: str  # POSITIVE or NEGATIVE
    prompt: str


@dataclass
class SemanticQuery:
    """A finished refinement session: full history plus the selected best."""

    original: str
    retrieved_ids: list[str]
    history: list[IterationRecord]
    best: IterationRecord

    def to_json_obj(self) -> dict:
        return {
            "original": self.original,
            "retrieved_ids": list(self.retrieved_ids),
            "history": [
                {
                    "index": r.index,
                    "candidate": r.candidate,
                    "score": r.score,
                    "classification": r.classification,
                    "prompt": r.prompt,
                }
                for r in self.history
            ],
            "best": {
                "index": self.best.index,
                "candidate": self.best.candidate,
                "score": self.best.score,
            },
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_json_obj(), sort_keys=True, indent=indent)


class RefineError(RuntimeError):
    """Refinement aborted mid-session; carries the partial history."""

    def __init__(self, message: str, history: list[IterationRecord]):
        super().__init__(message)
        self.history = history


def extract_keywords(index: TfIdfIndex, text: str, m: int) -> list[str]:
    """Top-m tokens of a text ranked by tf*idf weight under the index.

    Out-of-vocabulary tokens carry no weight and are dropped; ties break by
    ascending lexicographic order.
    """
    weights = index.term_weights(text)
    ranked = sorted(weights.items(), key=lambda kv: (-kv[1], kv[0]))
    return [t for t, _ in ranked[:m]]


def build_dynamic_prompt(
    query: str,
    retrieved_titles: list[str],
    positives: list[str],
    negatives: list[str],
) -> str:
    """Deterministic labeled prompt; empty example lists omit their sections."""
    lines = [
        "Rewrite the query below as a concise semantic query describing the "
        "underlying cognitive process.",
        f"{QUERY_LABEL} {query}",
    ]
    if retrieved_titles:
        lines.append(SAMPLES_LABEL)
        lines.extend(f"- {t}" for t in retrieved_titles)
    if positives:
        lines.append(POSITIVE_LABEL)
        lines.extend(f"- {t}" for t in positives)
    if negatives:
        lines.append(NEGATIVE_LABEL)
        lines.extend(f"- {t}" for t in negatives)
    lines.append("Respond with the refined query only.")
    return "\n".join(lines)


def score_candidate(index: TfIdfIndex, candidate: str, retrieved_ids: list[str]) -> float:
    """Mean cosine similarity between a candidate and each retrieved sample's text."""
    if not retrieved_ids:
        raise ValueError("retrieved id list is empty")
    total = sum(doc_cosine(index, candidate, sid) for sid in retrieved_ids)
    return total / len(retrieved_ids)


def classify_example(score: float, best_so_far: float) -> str:
    """Positive iff the score strictly improves on the running best."""
    return POSITIVE if score > best_so_far else NEGATIVE


def refine_query(index: TfIdfIndex, config: T2SConfig, raw_query: str) -> SemanticQuery:
    """Run a full refinement session over an immutable index.

    When retrieval finds nothing (empty or fully out-of-vocabulary query),
    candidates cannot be assessed; every candidate scores 0.0 and is negative,
    and the loop still runs so the session shape stays uniform.
    """
    keywords = extract_keywords(index, raw_query, config.keyword_count)
    hits = search(index, " ".join(keywords), config.retrieve_k) if keywords else []
    retrieved_ids = [sid for sid, _ in hits]
    retrieved_titles = [index.doc_text(sid) for sid in retrieved_ids]

    history: list[IterationRecord] = []
    positives: list[str] = []
    negatives: list[str] = []
    best_so_far = 0.0
    for it in range(config.iterations + 1):
        prompt = build_dynamic_prompt(raw_query, retrieved_titles, positives, negatives)
        try:
            candidate = config.client.complete(prompt, temperature=0.0)
        except LlmError as exc:
            raise RefineError(
                f"client failed at iteration {it}: {exc}", history
            ) from exc
        score = (
            score_candidate(index, candidate, retrieved_ids) if retrieved_ids else 0.0
        )
        classification = classify_example(score, best_so_far)
        record = IterationRecord(
            index=it,
            candidate=candidate,
            score=score,
            classification=classification,
            prompt=prompt,
        )
        history.append(record)
        if classification == POSITIVE:
            positives.append(candidate)
            best_so_far = score
        else:
            negatives.append(candidate)

    best = max(history, key=lambda r: (r.score, -r.index))
    return SemanticQuery(
        original=raw_query,
        retrieved_ids=retrieved_ids,
        history=history,
        best=best,
    )
