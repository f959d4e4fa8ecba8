"""End-to-end evaluation: corrupt queries, optionally refine, predict, score.

For every evaluation sample the title is tokenized, optionally corrupted by
random masking (the non-standard query environment), optionally refined
through the query-refinement loop, then encoded and decoded into a predicted
volume. At each retention fraction the target's top-k mask supplies AUC
labels for the raw prediction, while Dice and IoU compare the two top-k
masks. Rows pair the plain condition ("non-chat") with the refined one
("chat") and report the relative improvement, mirroring the usual table
layout ("non-aug-90", "aug-10", ...).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from semvox.corpus import StudyRecord, TfIdfIndex, tokenize
from semvox.metrics import (
    CANONICAL_SWEEP,
    DegenerateMaskError,
    auc,
    dice,
    iou,
    mask_tokens,
    topk_mask,
)
from semvox.nn.checkpoint import Checkpoint
from semvox.nn.model import ENCODER_KIND_HASHING, encode, fnv1a64, generator_forward
from semvox.refine import T2SConfig, refine_query
from semvox.volgrid import BrainVolume


@dataclass(frozen=True)
class EnvironmentConfig:
    """Query environment: mask_rate 0 is the standard environment."""

    mask_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.mask_rate <= 1.0):
            raise ValueError(f"mask_rate must be in [0, 1], got {self.mask_rate}")


@dataclass
class MeanMetrics:
    auc: float | None
    dice: float
    iou: float
    n_auc: int


@dataclass
class RetentionRow:
    label: str
    retention: float
    n: int
    non_chat: MeanMetrics
    chat: MeanMetrics | None = None
    over_pct: dict[str, float | None] | None = None


@dataclass
class MetricsReport:
    condition_base: str
    mask_rate: float
    seed: int
    retentions: tuple[float, ...]
    n_samples: int
    rows: list[RetentionRow] = field(default_factory=list)

    def to_json_obj(self) -> dict:
        def metrics_obj(m: MeanMetrics | None):
            if m is None:
                return None
            return {"auc": m.auc, "dice": m.dice, "iou": m.iou, "n_auc": m.n_auc}

        return {
            "condition_base": self.condition_base,
            "environment": {"mask_rate": self.mask_rate, "seed": self.seed},
            "retentions": list(self.retentions),
            "n_samples": self.n_samples,
            "rows": [
                {
                    "label": r.label,
                    "retention": r.retention,
                    "n": r.n,
                    "non_chat": metrics_obj(r.non_chat),
                    "chat": metrics_obj(r.chat),
                    "over_pct": r.over_pct,
                }
                for r in self.rows
            ],
        }

    def row(self, label: str) -> RetentionRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(f"no row labeled {label!r}")


def sample_mask_seed(base_seed: int, study_id: str) -> int:
    """Stable per-sample masking seed so paired conditions see identical noise."""
    return (int(base_seed) ^ fnv1a64(study_id.encode("utf-8"))) & 0x7FFFFFFFFFFFFFFF


def _predict(checkpoint: Checkpoint, tokens: list[str]) -> np.ndarray:
    latent = encode(checkpoint.params.encoder, tokens)
    vols, _ = generator_forward(
        checkpoint.params.generator,
        latent[None, :].astype(checkpoint.params.generator.fc_w.dtype),
    )
    return vols[0]


def _retention_label(base: str, k: float) -> str:
    pct = k * 100.0
    text = f"{pct:.10g}"
    return f"{base}-{text}"


def evaluate_model(
    checkpoint: Checkpoint,
    samples: Sequence[tuple[StudyRecord, BrainVolume]],
    *,
    retentions: Sequence[float] = CANONICAL_SWEEP,
    environment: EnvironmentConfig = EnvironmentConfig(),
    t2s: T2SConfig | None = None,
    index: TfIdfIndex | None = None,
    condition_base: str = "non-aug",
) -> MetricsReport:
    """Score a checkpoint over samples at every retention fraction.

    With a refinement config the report carries paired non-chat/chat columns
    plus their relative delta; refinement retrieves against ``index``, which
    is then required. Per-sample AUC is undefined when the label mask is
    degenerate (always at 100% retention); such samples are excluded from the
    AUC mean and ``n_auc`` records how many remained.
    """
    if not samples:
        raise ValueError("evaluation split is empty")
    if t2s is not None and index is None:
        raise ValueError("refinement requires a retrieval index")
    if checkpoint.params.encoder.kind != ENCODER_KIND_HASHING:
        raise ValueError("evaluation needs the token-path encoder")
    grid_dims = checkpoint.params.spec.output_dims()
    for rec, vol in samples:
        if vol.grid.dims != grid_dims:
            raise ValueError(
                f"target grid {vol.grid.dims} does not match model output {grid_dims} "
                f"for study {rec.id!r}"
            )

    retentions = tuple(float(k) for k in retentions)
    conditions = ["non_chat"] + (["chat"] if t2s is not None else [])
    # accumulators[condition][k] -> dict of metric sums
    acc = {
        c: {k: {"auc": 0.0, "n_auc": 0, "dice": 0.0, "iou": 0.0} for k in retentions}
        for c in conditions
    }

    for rec, target in samples:
        tokens = tokenize(rec.title)
        if environment.mask_rate > 0.0:
            tokens = mask_tokens(
                tokens, environment.mask_rate, sample_mask_seed(environment.seed, rec.id)
            )
        query_text = " ".join(tokens)

        per_condition_tokens = {"non_chat": tokens}
        if t2s is not None:
            refined = refine_query(index, t2s, query_text)
            per_condition_tokens["chat"] = tokenize(refined.best.candidate)

        target_masks = {k: topk_mask(target, k) for k in retentions}
        for cond in conditions:
            pred = _predict(checkpoint, per_condition_tokens[cond])
            for k in retentions:
                label_mask = target_masks[k]
                try:
                    acc[cond][k]["auc"] += auc(pred, label_mask)
                    acc[cond][k]["n_auc"] += 1
                except DegenerateMaskError:
                    pass
                pred_mask = topk_mask(pred, k)
                acc[cond][k]["dice"] += dice(pred_mask, label_mask)
                acc[cond][k]["iou"] += iou(pred_mask, label_mask)

    n = len(samples)
    report = MetricsReport(
        condition_base=condition_base,
        mask_rate=environment.mask_rate,
        seed=environment.seed,
        retentions=retentions,
        n_samples=n,
    )
    for k in retentions:
        means = {}
        for cond in conditions:
            a = acc[cond][k]
            means[cond] = MeanMetrics(
                auc=(a["auc"] / a["n_auc"]) if a["n_auc"] else None,
                dice=a["dice"] / n,
                iou=a["iou"] / n,
                n_auc=a["n_auc"],
            )
        over = None
        if t2s is not None:
            over = {}
            for name in ("auc", "dice", "iou"):
                base = getattr(means["non_chat"], name)
                new = getattr(means["chat"], name)
                if base is None or new is None or base == 0.0:
                    over[name] = None
                else:
                    over[name] = (new - base) / base * 100.0
        report.rows.append(
            RetentionRow(
                label=_retention_label(condition_base, k),
                retention=k,
                n=n,
                non_chat=means["non_chat"],
                chat=means.get("chat"),
                over_pct=over,
            )
        )
    return report
