"""Checkpoint persistence: JSON metadata block plus raw little-endian tensors.

Layout: 8-byte magic, u32 format version, u64 metadata length, UTF-8 JSON
metadata (sorted keys), then every tensor's bytes in the order listed in the
metadata: parameters first, then optimizer first and second moments when
present. Roundtrips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from semvox.nn.model import (
    EncoderParams,
    GeneratorParams,
    ModelParams,
    ModelSpec,
)
from semvox.nn.optim import OptimizerState
from semvox.volgrid import GridSpec

CHECKPOINT_MAGIC = b"C2BCKPT1"
CHECKPOINT_VERSION = 1

_DTYPE_TAGS = {"float32": "<f4", "float64": "<f8"}


class CheckpointFormatError(ValueError):
    """A checkpoint file violates the expected binary layout."""


@dataclass
class Checkpoint:
    grid: GridSpec
    params: ModelParams
    opt_state: OptimizerState | None = None
    train_config: dict | None = None
    log_summary: dict | None = None
    format_version: int = CHECKPOINT_VERSION


def _grid_to_dict(grid: GridSpec) -> dict:
    return {
        "dims": list(grid.dims),
        "voxel_size_mm": list(grid.voxel_size_mm),
        "origin_mm": list(grid.origin_mm),
    }


def _grid_from_dict(d: dict) -> GridSpec:
    return GridSpec(
        dims=tuple(d["dims"]),
        voxel_size_mm=tuple(d["voxel_size_mm"]),
        origin_mm=tuple(d["origin_mm"]),
    )


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    tensors = ckpt.params.named_tensors()
    dtype_name = str(ckpt.params.dtype)
    if dtype_name not in _DTYPE_TAGS:
        raise CheckpointFormatError(f"unsupported parameter dtype {dtype_name}")
    tag = _DTYPE_TAGS[dtype_name]

    tensor_meta = [{"name": k, "shape": list(t.shape)} for k, t in tensors.items()]
    meta = {
        "format_version": ckpt.format_version,
        "grid": _grid_to_dict(ckpt.grid),
        "model_spec": ckpt.params.spec.to_dict(),
        "encoder_kind": ckpt.params.encoder.kind,
        "dtype": dtype_name,
        "tensors": tensor_meta,
        "optimizer": {"step": ckpt.opt_state.step} if ckpt.opt_state else None,
        "train_config": ckpt.train_config,
        "log_summary": ckpt.log_summary,
    }
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<Q", len(meta_blob))
    out += meta_blob
    for t in tensors.values():
        out += np.ascontiguousarray(t, dtype=tag).tobytes()
    if ckpt.opt_state is not None:
        for moments in (ckpt.opt_state.m, ckpt.opt_state.v):
            for name in tensors:
                out += np.ascontiguousarray(moments[name], dtype=tag).tobytes()
    return bytes(out)


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 8 or blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(
            f"bad magic {blob[:8]!r}, expected {CHECKPOINT_MAGIC!r}"
        )
    off = 8
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<Q", blob, off)
    off += 8
    try:
        meta = json.loads(blob[off : off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt metadata block: {exc}") from exc
    off += meta_len

    tag = _DTYPE_TAGS.get(meta["dtype"])
    if tag is None:
        raise CheckpointFormatError(f"unsupported dtype {meta['dtype']!r}")
    itemsize = np.dtype(tag).itemsize
    tensor_meta = meta["tensors"]
    n_param_items = sum(int(np.prod(t["shape"], dtype=np.int64)) for t in tensor_meta)
    has_opt = meta["optimizer"] is not None
    expected = n_param_items * itemsize * (3 if has_opt else 1)
    if len(blob) - off != expected:
        raise CheckpointFormatError(
            f"payload length mismatch: expected {expected} bytes, got {len(blob) - off}"
        )

    def read_block() -> dict[str, np.ndarray]:
        nonlocal off
        block = {}
        for t in tensor_meta:
            shape = tuple(int(s) for s in t["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(blob, dtype=tag, count=count, offset=off).copy()
            off += count * itemsize
            block[t["name"]] = arr.reshape(shape)
        return block

    values = read_block()
    opt_state = None
    if has_opt:
        m = read_block()
        v = read_block()
        opt_state = OptimizerState(step=int(meta["optimizer"]["step"]), m=m, v=v)

    spec = ModelSpec.from_dict(meta["model_spec"])
    encoder = EncoderParams(
        kind=meta["encoder_kind"],
        hash_buckets=spec.hash_buckets,
        embedding=values["encoder.embedding"],
    )
    deconvs = []
    for i in range(1, len(spec.deconv_channels) + 1):
        deconvs.append(
            (values[f"generator.deconv{i}.weight"], values[f"generator.deconv{i}.bias"])
        )
    generator = GeneratorParams(
        spec=spec,
        fc_w=values["generator.fc.weight"],
        fc_b=values["generator.fc.bias"],
        deconvs=deconvs,
        head_w=values["generator.head.weight"],
        head_b=values["generator.head.bias"],
    )
    params = ModelParams(spec=spec, encoder=encoder, generator=generator)
    return Checkpoint(
        grid=_grid_from_dict(meta["grid"]),
        params=params,
        opt_state=opt_state,
        train_config=meta["train_config"],
        log_summary=meta["log_summary"],
        format_version=int(meta["format_version"]),
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
