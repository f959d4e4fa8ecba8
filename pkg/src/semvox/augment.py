"""Text augmentation: five templated variants per study plus the training schedule.

Each study title is expanded into five variant texts (two synonymous titles,
an abstract, an experiment description, and keywords) through a pluggable
completion client. Completions are cached on disk keyed by study, kind, and
prompt hash, so reruns and template changes behave predictably.
"""

from __future__ import annotations

import enum
import hashlib
import json
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping

from semvox.corpus import StudyRecord
from semvox.llm import TITLE_LABEL, LlmClient, LlmError

DEFAULT_CACHE_FILENAME = "aug_cache.jsonl"
# Timestamp recorded for deterministic clients, keeping outputs reproducible.
EPOCH_TIMESTAMP = "1970-01-01T00:00:00Z"


class AugVariantKind(enum.Enum):
    """The five augmentation variants, in generation order."""

    TITLE_SYN_MAJOR = "title_syn_major"
    TITLE_SYN_MINOR = "title_syn_minor"
    ABSTRACT = "abstract"
    EXPERIMENT_DESIGN = "experiment_design"
    KEYWORDS = "keywords"


class TextVariant(enum.Enum):
    """Selectable training text: the original title or one of the five variants."""

    TITLE = "title"
    TITLE_SYN_MAJOR = "title_syn_major"
    TITLE_SYN_MINOR = "title_syn_minor"
    ABSTRACT = "abstract"
    EXPERIMENT_DESIGN = "experiment_design"
    KEYWORDS = "keywords"


# Period-7 training schedule: title, the five variants, title again.
VARIANT_SCHEDULE = (
    TextVariant.TITLE,
    TextVariant.TITLE_SYN_MAJOR,
    TextVariant.TITLE_SYN_MINOR,
    TextVariant.ABSTRACT,
    TextVariant.EXPERIMENT_DESIGN,
    TextVariant.KEYWORDS,
    TextVariant.TITLE,
)


def variant_schedule(step: int) -> TextVariant:
    """Text variant used at a global training step (cyclic, period 7)."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    return VARIANT_SCHEDULE[step % len(VARIANT_SCHEDULE)]


_KIND_INSTRUCTIONS = {
    AugVariantKind.TITLE_SYN_MAJOR: (
        "Rewrite the title as a synonymous title whose wording "
        "differs substantially from the original."
    ),
    AugVariantKind.TITLE_SYN_MINOR: (
        "Rewrite the title as a synonymous title with minimal wording changes."
    ),
    AugVariantKind.ABSTRACT: "Write a plausible abstract for the study.",
    AugVariantKind.EXPERIMENT_DESIGN: (
        "Describe a plausible experimental design for the study."
    ),
    AugVariantKind.KEYWORDS: (
        "List the most informative keywords of the study, comma separated."
    ),
}


@dataclass(frozen=True)
class Provenance:
    client: str
    timestamp: str


@dataclass(frozen=True)
class AugmentedStudy:
    """All five variant texts for one study."""

    study_id: str
    variants: Mapping[AugVariantKind, str]
    provenance: Provenance

    def __post_init__(self):
        missing = [k for k in AugVariantKind if k not in self.variants]
        if missing:
            raise ValueError(f"missing variants: {[k.value for k in missing]}")
        empty = [k.value for k, v in self.variants.items() if not v.strip()]
        if empty:
            raise ValueError(f"empty variant text for: {empty}")

    def as_str_map(self) -> dict[str, str]:
        return {k.value: self.variants[k] for k in AugVariantKind}


class AugmentError(RuntimeError):
    """Augmentation failed for one variant kind; earlier kinds stay cached."""

    def __init__(self, study_id: str, kind: AugVariantKind, cause: Exception):
        super().__init__(f"augmentation of study {study_id!r} failed at kind "
                         f"{kind.value}: {cause}")
        self.study_id = study_id
        self.kind = kind
        self.cause = cause


def build_aug_prompt(study: StudyRecord, kind: AugVariantKind) -> str:
    """Deterministic prompt for one variant kind, embedding the title verbatim."""
    if not study.title.strip():
        raise ValueError(f"study {study.id!r} has an empty title")
    return (
        "You are helping index a neuroscience study.\n"
        f"Task: {_KIND_INSTRUCTIONS[kind]}\n"
        f"{TITLE_LABEL} {study.title}\n"
        "Answer with the requested text only."
    )


def _prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class AugmentCache:
    """JSONL completion cache keyed by (study_id, kind, prompt hash).

    Reads are lock-free after load; writes are serialized and appended so
    partial progress survives failures.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[tuple[str, str, str], dict] = {}
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                entry = json.loads(line)
                key = (entry["study_id"], entry["kind"], entry["prompt_sha256"])
                self._entries[key] = entry

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, study_id: str, kind: AugVariantKind, prompt: str) -> dict | None:
        return self._entries.get((study_id, kind.value, _prompt_hash(prompt)))

    def put(
        self, study_id: str, kind: AugVariantKind, prompt: str, text: str,
        client: str, timestamp: str,
    ) -> dict:
        entry = {
            "study_id": study_id,
            "kind": kind.value,
            "prompt_sha256": _prompt_hash(prompt),
            "text": text,
            "client": client,
            "timestamp": timestamp,
        }
        with self._lock:
            self._entries[(study_id, kind.value, entry["prompt_sha256"])] = entry
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return entry


def _now_timestamp(client: LlmClient) -> str:
    if getattr(client, "deterministic", False):
        return EPOCH_TIMESTAMP
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def augment_study(
    client: LlmClient,
    cache: AugmentCache,
    study: StudyRecord,
    *,
    max_retries: int = 2,
) -> AugmentedStudy:
    """Produce all five variants for a study, consulting the cache first.

    A cache hit bypasses the client entirely. On a client failure the error
    names the failing kind; variants completed before it remain cached.
    """
    variants: dict[AugVariantKind, str] = {}
    for kind in AugVariantKind:
        prompt = build_aug_prompt(study, kind)
        hit = cache.get(study.id, kind, prompt)
        if hit is not None:
            variants[kind] = hit["text"]
            continue
        text = None
        last_error: Exception | None = None
        for _ in range(max_retries + 1):
            try:
                text = client.complete(prompt, temperature=0.0)
                if not text.strip():
                    raise LlmError("empty completion")
                break
            except LlmError as exc:
                last_error = exc
                text = None
        if text is None:
            assert last_error is not None
            raise AugmentError(study.id, kind, last_error)
        cache.put(study.id, kind, prompt, text, client.name, _now_timestamp(client))
        variants[kind] = text
    return AugmentedStudy(
        study_id=study.id,
        variants=variants,
        provenance=Provenance(client=client.name, timestamp=_now_timestamp(client)),
    )


def augment_corpus(
    client: LlmClient,
    cache: AugmentCache,
    studies,
    *,
    max_retries: int = 2,
) -> dict[str, AugmentedStudy]:
    return {
        s.id: augment_study(client, cache, s, max_retries=max_retries) for s in studies
    }


def variants_from_record(record: StudyRecord) -> dict[AugVariantKind, str] | None:
    """Parse a record's stored variants map back into enum keys, if complete."""
    if record.variants is None:
        return None
    out = {}
    for kind in AugVariantKind:
        text = record.variants.get(kind.value)
        if not text:
            return None
        out[kind] = text
    return out
