"""The text-to-volume model: hashing text encoder plus transposed-conv generator.

The encoder hashes tokens into a learnable embedding table and averages the
hit rows into a latent vector. The generator projects the latent through a
fully connected layer onto a coarse channel grid, then upsamples through
three stride-2 transposed 3D convolutions and a 1x1x1 head to a single-channel
volume. Output is linear (no final rectifier).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from semvox.nn import ops
from semvox.volgrid import BrainVolume, GridSpec

LATENT_DIM = 768

ENCODER_KIND_HASHING = "baseline-hashing"
ENCODER_KIND_EXTERNAL = "external-vectors"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash; the documented token-to-bucket hash."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h


def token_bucket(token: str, hash_buckets: int) -> int:
    return fnv1a64(token.encode("utf-8")) % hash_buckets


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters; defaults give the 40x48x40 production model."""

    latent_dim: int = LATENT_DIM
    base_grid: tuple[int, int, int] = (5, 6, 5)
    base_channels: int = 64
    deconv_channels: tuple[int, ...] = (32, 16, 8)
    hash_buckets: int = 8192
    kernel_size: int = 4
    stride: int = 2
    padding: int = 1

    def __post_init__(self):
        object.__setattr__(self, "base_grid", tuple(int(d) for d in self.base_grid))
        object.__setattr__(
            self, "deconv_channels", tuple(int(c) for c in self.deconv_channels)
        )
        if self.latent_dim < 1 or self.base_channels < 1 or self.hash_buckets < 1:
            raise ValueError("latent_dim, base_channels, hash_buckets must be >= 1")
        if any(d < 1 for d in self.base_grid) or any(
            c < 1 for c in self.deconv_channels
        ):
            raise ValueError("grid dims and channel counts must be >= 1")

    @property
    def fc_out(self) -> int:
        g = self.base_grid
        return self.base_channels * g[0] * g[1] * g[2]

    def output_dims(self) -> tuple[int, int, int]:
        dims = self.base_grid
        for _ in self.deconv_channels:
            dims = ops.conv_transpose3d_output_shape(
                dims, self.kernel_size, self.stride, self.padding
            )
        return dims

    def shape_chain(self) -> list[tuple[tuple[int, int, int], int]]:
        """(spatial dims, channels) after the fc reshape and each deconv stage."""
        chain = [(self.base_grid, self.base_channels)]
        dims = self.base_grid
        for ch in self.deconv_channels:
            dims = ops.conv_transpose3d_output_shape(
                dims, self.kernel_size, self.stride, self.padding
            )
            chain.append((dims, ch))
        chain.append((dims, 1))
        return chain

    def to_dict(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "base_grid": list(self.base_grid),
            "base_channels": self.base_channels,
            "deconv_channels": list(self.deconv_channels),
            "hash_buckets": self.hash_buckets,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            latent_dim=d["latent_dim"],
            base_grid=tuple(d["base_grid"]),
            base_channels=d["base_channels"],
            deconv_channels=tuple(d["deconv_channels"]),
            hash_buckets=d["hash_buckets"],
            kernel_size=d["kernel_size"],
            stride=d["stride"],
            padding=d["padding"],
        )


@dataclass
class EncoderParams:
    kind: str
    hash_buckets: int
    embedding: np.ndarray  # (hash_buckets, latent_dim); empty for external-vectors

    def __post_init__(self):
        if self.kind not in (ENCODER_KIND_HASHING, ENCODER_KIND_EXTERNAL):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if not np.all(np.isfinite(self.embedding)):
            raise ValueError("embedding table contains non-finite values")


@dataclass
class GeneratorParams:
    spec: ModelSpec
    fc_w: np.ndarray
    fc_b: np.ndarray
    deconvs: list[tuple[np.ndarray, np.ndarray]]
    head_w: np.ndarray
    head_b: np.ndarray


@dataclass
class ModelParams:
    spec: ModelSpec
    encoder: EncoderParams
    generator: GeneratorParams

    def named_tensors(self) -> dict[str, np.ndarray]:
        """All trainable tensors in a fixed, documented order."""
        out = {"encoder.embedding": self.encoder.embedding}
        gen = self.generator
        out["generator.fc.weight"] = gen.fc_w
        out["generator.fc.bias"] = gen.fc_b
        for i, (w, b) in enumerate(gen.deconvs, start=1):
            out[f"generator.deconv{i}.weight"] = w
            out[f"generator.deconv{i}.bias"] = b
        out["generator.head.weight"] = gen.head_w
        out["generator.head.bias"] = gen.head_b
        return out

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        tensors = self.named_tensors()
        if name not in tensors:
            raise KeyError(f"unknown tensor {name!r}")
        if tensors[name].shape != value.shape:
            raise ValueError(
                f"shape mismatch for {name}: {tensors[name].shape} vs {value.shape}"
            )
        tensors[name][...] = value

    @property
    def dtype(self) -> np.dtype:
        return self.generator.fc_w.dtype

    def n_parameters(self) -> int:
        return sum(t.size for t in self.named_tensors().values())


DEFAULT_WEIGHT_STD = 0.3
DEFAULT_EMBEDDING_STD = 1.0


def init_params(
    spec: ModelSpec,
    *,
    seed: int = 0,
    dtype=np.float32,
    encoder_kind: str = ENCODER_KIND_HASHING,
    weight_std: float = DEFAULT_WEIGHT_STD,
    embedding_std: float = DEFAULT_EMBEDDING_STD,
) -> ModelParams:
    """Seeded initialization: flat-scale normal weights, zero biases.

    The default training rate for the generator is aggressive (3e-2), and
    AdamW moves every parameter by roughly the learning rate per step early
    on. Weight scales well above that step size keep the rectifier stack from
    being wiped out by the first optimizer transient; fan-in-scaled inits sit
    near the step size and collapse. Variance growth through the stack is
    tolerated rather than normalized away.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    dt = np.dtype(dtype)
    k = spec.kernel_size

    if encoder_kind == ENCODER_KIND_HASHING:
        emb = rng.normal(0.0, embedding_std, size=(spec.hash_buckets, spec.latent_dim))
    else:
        emb = np.zeros((0, spec.latent_dim))
    encoder = EncoderParams(
        kind=encoder_kind, hash_buckets=spec.hash_buckets, embedding=emb.astype(dt)
    )

    fc_w = rng.normal(0.0, weight_std, size=(spec.latent_dim, spec.fc_out))
    deconvs = []
    in_ch = spec.base_channels
    for out_ch in spec.deconv_channels:
        w = rng.normal(0.0, weight_std, size=(in_ch, out_ch, k, k, k))
        deconvs.append((w.astype(dt), np.zeros(out_ch, dtype=dt)))
        in_ch = out_ch
    head_w = rng.normal(0.0, weight_std, size=(in_ch, 1))
    generator = GeneratorParams(
        spec=spec,
        fc_w=fc_w.astype(dt),
        fc_b=np.zeros(spec.fc_out, dtype=dt),
        deconvs=deconvs,
        head_w=head_w.astype(dt),
        head_b=np.zeros(1, dtype=dt),
    )
    return ModelParams(spec=spec, encoder=encoder, generator=generator)


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

def encode(params: EncoderParams, tokens: Sequence[str]) -> np.ndarray:
    """Latent vector for a token list: mean of the hashed embedding rows.

    An empty token list encodes to the zero vector.
    """
    if params.kind != ENCODER_KIND_HASHING:
        raise ValueError(
            "external-vectors encoder has no token path; look latents up by id"
        )
    latent_dim = params.embedding.shape[1]
    if not tokens:
        return np.zeros(latent_dim, dtype=params.embedding.dtype)
    buckets = np.fromiter(
        (token_bucket(t, params.hash_buckets) for t in tokens),
        dtype=np.int64,
        count=len(tokens),
    )
    return params.embedding[buckets].mean(axis=0)


def encode_batch(params: EncoderParams, token_lists: Sequence[Sequence[str]]) -> np.ndarray:
    return np.stack([encode(params, toks) for toks in token_lists])


def encode_backward(
    params: EncoderParams,
    token_lists: Sequence[Sequence[str]],
    grad_latents: np.ndarray,
) -> np.ndarray:
    """Gradient of the embedding table for a batch of token lists."""
    grad = np.zeros_like(params.embedding)
    for toks, g in zip(token_lists, grad_latents):
        if not toks:
            continue
        buckets = np.fromiter(
            (token_bucket(t, params.hash_buckets) for t in toks),
            dtype=np.int64,
            count=len(toks),
        )
        np.add.at(grad, buckets, (g / len(toks))[None, :].astype(grad.dtype))
    return grad


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

def generator_forward(gen: GeneratorParams, latents: np.ndarray):
    """Batched forward pass; returns (volumes (N, dx, dy, dz), cache for backward)."""
    spec = gen.spec
    if latents.ndim != 2 or latents.shape[1] != spec.latent_dim:
        raise ValueError(
            f"latents must have shape (N, {spec.latent_dim}), got {latents.shape}"
        )
    n = latents.shape[0]
    cache: dict = {"latents": latents}
    fc_pre = ops.dense_forward(latents, gen.fc_w, gen.fc_b)
    cache["fc_pre"] = fc_pre
    x = ops.relu(fc_pre).reshape(n, *spec.base_grid, spec.base_channels)
    layer_inputs = []
    layer_pres = []
    for w, b in gen.deconvs:
        layer_inputs.append(x)
        pre = ops.conv_transpose3d_forward(
            x, w, b, stride=spec.stride, padding=spec.padding
        )
        layer_pres.append(pre)
        x = ops.relu(pre)
    cache["layer_inputs"] = layer_inputs
    cache["layer_pres"] = layer_pres
    cache["head_in"] = x
    out = x @ gen.head_w + gen.head_b  # linear 1x1x1 head
    vols = out[..., 0]
    return vols, cache


def generator_backward(gen: GeneratorParams, cache: dict, grad_vols: np.ndarray):
    """Gradients of all generator tensors plus the latent inputs."""
    spec = gen.spec
    grads: dict[str, np.ndarray] = {}
    g = grad_vols[..., None]
    head_in = cache["head_in"]
    grads["generator.head.weight"] = np.tensordot(
        head_in, g, axes=([0, 1, 2, 3], [0, 1, 2, 3])
    )
    grads["generator.head.bias"] = g.sum(axis=(0, 1, 2, 3))
    gx = g @ gen.head_w.T
    for i in range(len(gen.deconvs) - 1, -1, -1):
        w, _ = gen.deconvs[i]
        gx = ops.relu_backward(cache["layer_pres"][i], gx)
        gx, gw, gb = ops.conv_transpose3d_backward(
            cache["layer_inputs"][i], w, gx, stride=spec.stride, padding=spec.padding
        )
        grads[f"generator.deconv{i + 1}.weight"] = gw
        grads[f"generator.deconv{i + 1}.bias"] = gb
    n = gx.shape[0]
    g_flat = gx.reshape(n, spec.fc_out)
    g_flat = ops.relu_backward(cache["fc_pre"], g_flat)
    grad_latents, gw, gb = ops.dense_backward(cache["latents"], gen.fc_w, g_flat)
    grads["generator.fc.weight"] = gw
    grads["generator.fc.bias"] = gb
    return grads, grad_latents


def generate(params, latent: np.ndarray, grid: GridSpec | None = None) -> BrainVolume:
    """Decode one latent vector into a BrainVolume.

    Accepts ModelParams or GeneratorParams. The grid defaults to the standard
    geometry when its dims match the generator output.
    """
    gen = params.generator if isinstance(params, ModelParams) else params
    latent = np.asarray(latent)
    if latent.ndim != 1 or latent.shape[0] != gen.spec.latent_dim:
        raise ValueError(
            f"latent must have length {gen.spec.latent_dim}, got shape {latent.shape}"
        )
    vols, _ = generator_forward(gen, latent[None, :].astype(gen.fc_w.dtype))
    dims = gen.spec.output_dims()
    if grid is None:
        default = GridSpec()
        grid = default if default.dims == dims else GridSpec(
            dims=dims, voxel_size_mm=(1.0, 1.0, 1.0), origin_mm=(0.0, 0.0, 0.0)
        )
    if grid.dims != dims:
        raise ValueError(f"grid dims {grid.dims} do not match generator output {dims}")
    return BrainVolume(grid=grid, data=vols[0].astype(np.float32))


# ---------------------------------------------------------------------------
# Whole-model loss and gradients
# ---------------------------------------------------------------------------

def forward_batch(params: ModelParams, token_lists: Sequence[Sequence[str]]):
    latents = encode_batch(params.encoder, token_lists)
    vols, cache = generator_forward(params.generator, latents)
    return vols, cache


def loss_and_grads(
    params: ModelParams,
    token_lists: Sequence[Sequence[str]],
    targets: np.ndarray,
    *,
    latents: np.ndarray | None = None,
):
    """Mean batch MSE and exact gradients for every trainable tensor.

    ``latents`` overrides the encoder (external-vectors path); the embedding
    gradient is then zero.
    """
    if len(token_lists) == 0 and (latents is None or len(latents) == 0):
        raise ValueError("batch must be non-empty")
    use_encoder = latents is None
    if use_encoder:
        latents = encode_batch(params.encoder, token_lists)
    latents = np.asarray(latents, dtype=params.generator.fc_w.dtype)
    vols, cache = generator_forward(params.generator, latents)
    targets = np.asarray(targets, dtype=vols.dtype)
    loss = ops.mse_loss(vols, targets)
    grad_vols = ops.mse_grad(vols, targets)
    grads, grad_latents = generator_backward(params.generator, cache, grad_vols)
    if use_encoder and params.encoder.kind == ENCODER_KIND_HASHING:
        grads["encoder.embedding"] = encode_backward(
            params.encoder, token_lists, grad_latents
        )
    else:
        grads["encoder.embedding"] = np.zeros_like(params.encoder.embedding)
    return loss, grads


# ---------------------------------------------------------------------------
# External latent vectors (JSONL of {"id": ..., "vector": [...]})
# ---------------------------------------------------------------------------

def load_external_latents(path, latent_dim: int = LATENT_DIM) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    from pathlib import Path

    for line_no, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            sid = obj["id"]
            vec = np.asarray(obj["vector"], dtype=np.float64)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"line {line_no}: invalid latent record: {exc}") from exc
        if vec.shape != (latent_dim,):
            raise ValueError(
                f"line {line_no}: vector must have length {latent_dim}, got {vec.shape}"
            )
        if sid in out:
            raise ValueError(f"line {line_no}: duplicate id {sid!r}")
        out[sid] = vec
    return out
