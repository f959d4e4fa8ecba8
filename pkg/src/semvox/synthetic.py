"""Synthetic corpora for tests and demos: concept clusters with fixed peak sets.

Each cluster couples a small topic vocabulary to its own coordinate set, so a
model can genuinely learn text-to-location structure and retrieval has real
neighborhoods to find. Titles mix the cluster topic words with per-study
filler; targets are synthesized from the cluster coordinates.
"""

from __future__ import annotations

import numpy as np

from semvox.corpus import Corpus, StudyRecord, write_jsonl
from semvox.volgrid import BrainVolume, GridSpec, synthesize_target

# (topic words, MNI-ish peak coordinate set) per concept cluster. Several
# peaks per cluster, as real studies report, so targets carry usable mass.
CLUSTER_THEMES = [
    (
        ("pain", "nociception", "somatosensory"),
        ((-38.0, -22.0, 52.0), (40.0, -20.0, 50.0), (-6.0, 8.0, 40.0),
         (38.0, 16.0, 4.0), (-36.0, 14.0, 6.0), (2.0, -16.0, 44.0)),
    ),
    (
        ("memory", "hippocampus", "recall"),
        ((-26.0, -18.0, -16.0), (28.0, -16.0, -14.0), (-40.0, -64.0, 36.0),
         (42.0, -62.0, 34.0), (0.0, -56.0, 28.0)),
    ),
    (
        ("language", "speech", "semantics"),
        ((-50.0, 22.0, 10.0), (-54.0, -40.0, 2.0), (-46.0, -2.0, 48.0),
         (-34.0, -66.0, 30.0), (52.0, -32.0, 0.0)),
    ),
    (
        ("motor", "movement", "grip"),
        ((-36.0, -24.0, 58.0), (8.0, -2.0, 54.0), (38.0, -22.0, 56.0),
         (-20.0, -52.0, -22.0), (22.0, -50.0, -24.0)),
    ),
    (
        ("vision", "visual", "object"),
        ((14.0, -88.0, 2.0), (-12.0, -92.0, 0.0), (-40.0, -76.0, -10.0),
         (42.0, -72.0, -12.0), (0.0, -80.0, 24.0)),
    ),
    (
        ("reward", "dopamine", "valuation"),
        ((10.0, 10.0, -8.0), (-8.0, 12.0, -6.0), (2.0, 44.0, -10.0),
         (-28.0, 44.0, 18.0), (30.0, 42.0, 16.0)),
    ),
    (
        ("emotion", "amygdala", "fear"),
        ((-22.0, -4.0, -18.0), (24.0, -2.0, -20.0), (0.0, 28.0, 24.0),
         (-44.0, 20.0, -6.0), (46.0, 22.0, -4.0)),
    ),
    (
        ("attention", "vigilance", "orienting"),
        ((30.0, 48.0, 24.0), (-28.0, 50.0, 22.0), (26.0, -60.0, 48.0),
         (-24.0, -62.0, 46.0), (6.0, 24.0, 40.0)),
    ),
]

FILLER_WORDS = (
    "cortical", "response", "during", "task", "human", "brain", "functional",
    "activation", "study", "effects", "processing", "networks", "evidence",
    "mapping", "patterns", "correlates",
)


def make_synthetic_corpus(
    n_studies: int,
    *,
    n_clusters: int = 4,
    seed: int = 0,
    coord_jitter_mm: float = 0.0,
) -> Corpus:
    """Generate studies round-robin over concept clusters."""
    if not (1 <= n_clusters <= len(CLUSTER_THEMES)):
        raise ValueError(f"n_clusters must be in [1, {len(CLUSTER_THEMES)}]")
    rng = np.random.Generator(np.random.PCG64(seed))
    records = []
    for i in range(n_studies):
        topic_words, coords = CLUSTER_THEMES[i % n_clusters]
        filler = rng.choice(len(FILLER_WORDS), size=3, replace=False)
        title = " ".join(
            [topic_words[0], FILLER_WORDS[filler[0]], topic_words[1],
             FILLER_WORDS[filler[1]], topic_words[2], FILLER_WORDS[filler[2]]]
        )
        if coord_jitter_mm > 0.0:
            jitter = rng.uniform(-coord_jitter_mm, coord_jitter_mm, size=(len(coords), 3))
            coords = tuple(
                tuple(float(c + j) for c, j in zip(coord, row))
                for coord, row in zip(coords, jitter)
            )
        records.append(
            StudyRecord(id=f"s{i:05d}", title=title, coordinates=tuple(coords))
        )
    return Corpus(records)


def make_targets(
    corpus: Corpus, grid: GridSpec | None = None, fwhm_mm: float = 9.0
) -> list[tuple[StudyRecord, BrainVolume]]:
    grid = grid or GridSpec()
    return [(rec, synthesize_target(grid, rec.coordinates, fwhm_mm)) for rec in corpus]


def write_demo_corpus(path, n_studies: int = 50, *, n_clusters: int = 4, seed: int = 0) -> None:
    """Write a ready-to-ingest JSONL corpus for CLI walkthroughs."""
    write_jsonl(make_synthetic_corpus(n_studies, n_clusters=n_clusters, seed=seed), path)
