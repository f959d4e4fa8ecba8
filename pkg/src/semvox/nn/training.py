"""Training loop (seeded sampling, variant schedule, AdamW) and gradient checking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from semvox.augment import AugmentedStudy, AugVariantKind, TextVariant, variant_schedule
from semvox.corpus import StudyRecord, tokenize
from semvox.nn import ops
from semvox.nn.model import (
    ENCODER_KIND_EXTERNAL,
    ENCODER_KIND_HASHING,
    ModelParams,
    ModelSpec,
    encode_batch,
    generator_forward,
    init_params,
    loss_and_grads,
)
from semvox.nn.optim import AdamWConfig, OptimizerState, adamw_update
from semvox.volgrid import BrainVolume, GridSpec


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; defaults are desk-scale, not production-scale."""

    epochs: int = 50
    batch_size: int = 4
    lr_encoder: float = 1e-5
    lr_generator: float = 3e-2
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    dtype: str = "float32"
    # Scale the (effectively frozen) embedding at startup so the initial
    # output RMS matches the target RMS; avoids burning steps on crushing an
    # arbitrary initial output magnitude.
    calibrate_output: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_encoder <= 0 or self.lr_generator <= 0:
            raise ValueError("learning rates must be > 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_encoder": self.lr_encoder,
            "lr_generator": self.lr_generator,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "seed": self.seed,
            "dtype": self.dtype,
            "calibrate_output": self.calibrate_output,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    params: ModelParams
    opt_state: OptimizerState
    grid: GridSpec
    config: TrainConfig
    epoch_losses: list[float]
    initial_full_mse: float
    final_full_mse: float
    steps_run: int

    def summary(self) -> dict:
        return {
            "epochs_run": len(self.epoch_losses),
            "steps_run": self.steps_run,
            "initial_full_mse": self.initial_full_mse,
            "final_full_mse": self.final_full_mse,
            "epoch_losses": list(self.epoch_losses),
        }


_VARIANT_TO_KIND = {
    TextVariant.TITLE_SYN_MAJOR: AugVariantKind.TITLE_SYN_MAJOR,
    TextVariant.TITLE_SYN_MINOR: AugVariantKind.TITLE_SYN_MINOR,
    TextVariant.ABSTRACT: AugVariantKind.ABSTRACT,
    TextVariant.EXPERIMENT_DESIGN: AugVariantKind.EXPERIMENT_DESIGN,
    TextVariant.KEYWORDS: AugVariantKind.KEYWORDS,
}


def text_for_variant(
    record: StudyRecord,
    variant: TextVariant,
    variants: Mapping[str, AugmentedStudy] | Mapping[str, Mapping[AugVariantKind, str]] | None,
) -> str:
    """The text a study contributes at a schedule position.

    Falls back to the original title when no augmentation is available, so an
    un-augmented run degenerates to the title at every step.
    """
    if variant is TextVariant.TITLE or variants is None:
        return record.title
    aug = variants.get(record.id)
    if aug is None:
        return record.title
    variant_map = aug.variants if isinstance(aug, AugmentedStudy) else aug
    return variant_map[_VARIANT_TO_KIND[variant]]


def _calibrate_output_scale(
    params: ModelParams, samples: Sequence[tuple[StudyRecord, BrainVolume]]
) -> None:
    """Match the initial output RMS to the target RMS by scaling the embedding.

    With zero biases the rectifier stack is positively homogeneous, so
    scaling the embedding scales the output exactly linearly. The embedding
    trains at a tiny rate, making it the safe place to put the overall gain.
    """
    probe = samples[: min(8, len(samples))]
    latents = encode_batch(params.encoder, [tokenize(rec.title) for rec, _ in probe])
    vols, _ = generator_forward(params.generator, latents)
    out_rms = float(np.sqrt(np.mean(np.square(vols), dtype=np.float64)))
    targets = np.stack([vol.data for _, vol in probe])
    target_rms = float(np.sqrt(np.mean(np.square(targets), dtype=np.float64)))
    if out_rms > 0 and target_rms > 0:
        params.encoder.embedding *= np.asarray(
            target_rms / out_rms, dtype=params.encoder.embedding.dtype
        )


def _full_set_mse(
    params: ModelParams,
    samples: Sequence[tuple[StudyRecord, BrainVolume]],
    latents_by_id: Mapping[str, np.ndarray] | None,
    batch_size: int = 8,
) -> float:
    """Mean MSE over all samples using the original titles."""
    total = 0.0
    count = 0
    for pos in range(0, len(samples), batch_size):
        chunk = samples[pos : pos + batch_size]
        targets = np.stack([vol.data for _, vol in chunk])
        if latents_by_id is not None:
            latents = np.stack([latents_by_id[rec.id] for rec, _ in chunk]).astype(
                params.generator.fc_w.dtype
            )
        else:
            latents = encode_batch(
                params.encoder, [tokenize(rec.title) for rec, _ in chunk]
            )
        vols, _ = generator_forward(params.generator, latents)
        total += ops.mse_loss(vols, targets.astype(vols.dtype)) * len(chunk)
        count += len(chunk)
    return total / count


def train(
    config: TrainConfig,
    samples: Sequence[tuple[StudyRecord, BrainVolume]],
    variants: Mapping[str, AugmentedStudy] | None = None,
    *,
    model_spec: ModelSpec | None = None,
    external_latents: Mapping[str, np.ndarray] | None = None,
    initial_params: ModelParams | None = None,
) -> TrainResult:
    """Train the text-to-volume model on (study, target volume) pairs.

    Per step, ``batch_size`` samples are drawn uniformly with replacement from
    a PCG64(seed) stream, and every drawn sample's text is selected by the
    period-7 variant schedule at the global step. One epoch is
    ceil(n/batch_size) steps. Single-threaded and bit-reproducible for a fixed
    seed.
    """
    if not samples:
        raise ValueError("training set is empty")
    grid = samples[0][1].grid
    for rec, vol in samples:
        if vol.grid != grid:
            raise ValueError(f"target grid mismatch for study {rec.id!r}")

    spec = model_spec or ModelSpec()
    if spec.output_dims() != grid.dims:
        raise ValueError(
            f"generator output {spec.output_dims()} does not match target grid {grid.dims}"
        )
    encoder_kind = (
        ENCODER_KIND_EXTERNAL if external_latents is not None else ENCODER_KIND_HASHING
    )
    if external_latents is not None:
        missing = [rec.id for rec, _ in samples if rec.id not in external_latents]
        if missing:
            raise ValueError(f"missing external latents for studies: {missing[:5]}")

    dtype = np.float32 if config.dtype == "float32" else np.float64
    params = initial_params or init_params(
        spec, seed=config.seed, dtype=dtype, encoder_kind=encoder_kind
    )
    if (
        config.calibrate_output
        and initial_params is None
        and encoder_kind == ENCODER_KIND_HASHING
    ):
        _calibrate_output_scale(params, samples)
    tensors = params.named_tensors()
    opt_state = OptimizerState.zeros_like(tensors)
    adamw = AdamWConfig(
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )

    def lr_for(name: str) -> float:
        return config.lr_encoder if name.startswith("encoder.") else config.lr_generator

    rng = np.random.Generator(np.random.PCG64(config.seed))
    n = len(samples)
    steps_per_epoch = math.ceil(n / config.batch_size)
    initial_mse = _full_set_mse(params, samples, external_latents)

    epoch_losses: list[float] = []
    global_step = 0
    for _epoch in range(config.epochs):
        step_losses = []
        for _ in range(steps_per_epoch):
            idx = rng.integers(0, n, size=config.batch_size)
            variant = variant_schedule(global_step)
            batch = [samples[int(i)] for i in idx]
            targets = np.stack([vol.data for _, vol in batch])
            if external_latents is not None:
                latents = np.stack([external_latents[rec.id] for rec, _ in batch])
                loss, grads = loss_and_grads(params, [], targets, latents=latents)
            else:
                token_lists = [
                    tokenize(text_for_variant(rec, variant, variants)) for rec, _ in batch
                ]
                loss, grads = loss_and_grads(params, token_lists, targets)
            adamw_update(tensors, grads, opt_state, adamw, lr_for)
            step_losses.append(loss)
            global_step += 1
        epoch_losses.append(float(np.mean(step_losses)))

    final_mse = _full_set_mse(params, samples, external_latents)
    return TrainResult(
        params=params,
        opt_state=opt_state,
        grid=grid,
        config=config,
        epoch_losses=epoch_losses,
        initial_full_mse=initial_mse,
        final_full_mse=final_mse,
        steps_run=global_step,
    )


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

TINY_SPEC = ModelSpec(
    latent_dim=12,
    base_grid=(2, 3, 2),
    base_channels=4,
    deconv_channels=(3, 2, 2),
    hash_buckets=16,
)


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    worst_tensor: str
    worst_index: int
    dtype: str
    fd_step: float
    per_tensor_max: dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        return (
            f"gradient check ({self.dtype}): max relative error "
            f"{self.max_rel_err:.3e} over {self.n_checked} parameters "
            f"(worst: {self.worst_tensor}[{self.worst_index}], fd step {self.fd_step:g})"
        )


def _loss_and_masks(params: ModelParams, token_lists, targets):
    """Forward-only loss plus the rectifier on/off pattern of every layer."""
    latents = encode_batch(params.encoder, token_lists)
    vols, cache = generator_forward(params.generator, latents)
    loss = ops.mse_loss(vols, targets.astype(vols.dtype))
    masks = [(cache["fc_pre"] > 0).tobytes()]
    masks.extend((pre > 0).tobytes() for pre in cache["layer_pres"])
    return loss, b"".join(masks)


def gradient_check(
    spec: ModelSpec = TINY_SPEC,
    *,
    dtype=np.float64,
    n_samples: int = 200,
    seed: int = 0,
    fd_step: float | None = None,
    batch_size: int = 2,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Parameters are sampled uniformly across all tensors. Biases are
    randomized at the check point so no pre-activation sits exactly on the
    rectifier kink, and any sampled parameter whose +-h interval still
    crosses a kink is skipped and resampled: finite differences only estimate
    the derivative within a smooth region. The loss accumulates in float64;
    the relative-error denominator is floored per precision so near-zero
    gradient pairs do not divide by noise.
    """
    dt = np.dtype(dtype)
    if max(spec.output_dims()) > 32:
        raise ValueError("gradient_check expects a small config")
    # Within a kink-free region the loss is quadratic in any single parameter,
    # so the central difference has no truncation error and a larger step only
    # reduces roundoff.
    if fd_step is None:
        fd_step = 1e-3 if dt == np.float64 else 1e-2
    floor = 1e-6 if dt == np.float64 else 1e-3

    rng = np.random.Generator(np.random.PCG64(seed))
    params = init_params(spec, seed=seed, dtype=dt)
    n_params = params.n_parameters()
    if n_params > 10_000:
        raise ValueError(f"config has {n_params} parameters, expected <= 10000")
    tensors = params.named_tensors()
    for name, t in tensors.items():
        if name.endswith(".bias"):
            t[...] = rng.normal(0.0, 0.05, size=t.shape).astype(dt)

    vocab = [f"tok{i}" for i in range(40)]
    token_lists = [
        [vocab[int(j)] for j in rng.integers(0, len(vocab), size=5)]
        for _ in range(batch_size)
    ]
    targets = rng.random(size=(batch_size, *spec.output_dims()))

    _, grads = loss_and_grads(params, token_lists, targets)
    _, center_masks = _loss_and_masks(params, token_lists, targets)

    names = list(tensors)
    sizes = np.array([tensors[k].size for k in names], dtype=np.int64)
    cum = np.cumsum(sizes)

    max_rel = 0.0
    worst = (names[0], 0)
    per_tensor: dict[str, float] = {k: 0.0 for k in names}
    checked = 0
    skipped = 0
    max_attempts = n_samples * 20
    attempts = 0
    while checked < n_samples and attempts < max_attempts:
        attempts += 1
        pick = int(rng.integers(0, cum[-1]))
        ti = int(np.searchsorted(cum, pick, side="right"))
        name = names[ti]
        flat_idx = int(pick - (cum[ti - 1] if ti > 0 else 0))
        t = tensors[name]
        orig = t.flat[flat_idx]
        h = np.asarray(fd_step, dtype=dt)
        t.flat[flat_idx] = orig + h
        lp, masks_p = _loss_and_masks(params, token_lists, targets)
        t.flat[flat_idx] = orig - h
        lm, masks_m = _loss_and_masks(params, token_lists, targets)
        t.flat[flat_idx] = orig
        if masks_p != center_masks or masks_m != center_masks:
            skipped += 1
            continue
        fd = (lp - lm) / (2.0 * float(h))
        analytic = float(grads[name].flat[flat_idx])
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), floor)
        per_tensor[name] = max(per_tensor[name], rel)
        if rel > max_rel:
            max_rel = rel
            worst = (name, flat_idx)
        checked += 1
    if checked < n_samples:
        raise RuntimeError(
            f"could not find {n_samples} kink-free parameters "
            f"({checked} checked, {skipped} skipped)"
        )

    return GradCheckReport(
        max_rel_err=max_rel,
        n_checked=checked,
        worst_tensor=worst[0],
        worst_index=worst[1],
        dtype=str(dt),
        fd_step=float(fd_step),
        per_tensor_max=per_tensor,
    )
