"""Binary checkpoint format for network parameters.

Layout (little endian): magic ``RFCK``, u32 config block length, UTF-8
``key=value`` lines describing the model configuration and normalization
mode, u32 tensor count, then per tensor: u16 name length, name, u8 rank,
u32 dims, float32 payload.  Weights train in float64 but serialize as
float32; round-tripping is exact at float32 resolution.
"""

from __future__ import annotations

import struct

import numpy as np

from ..cloudio import atomic_write_bytes
from . import autodiff as ad
from .model import ModelConfig

CHECKPOINT_MAGIC = b"RFCK"


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(params: dict, cfg: ModelConfig,
                     norm_mode: str = "centroid") -> bytes:
    meta = dict(cfg.to_dict())
    meta["norm_mode"] = norm_mode
    config_block = "".join(f"{k}={v}\n" for k, v in sorted(meta.items()))
    blob = config_block.encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<I", len(blob)), blob,
           struct.pack("<I", len(params))]
    for name in sorted(params):
        tensor = params[name]
        # accepts Tensor params or the bare arrays NonFiniteLoss carries;
        # values beyond float32 range saturate to inf by design
        with np.errstate(over="ignore"):
            value = np.asarray(getattr(tensor, "value", tensor), dtype="<f4")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", value.ndim))
        out.append(struct.pack(f"<{value.ndim}I", *value.shape))
        out.append(value.tobytes())
    return b"".join(out)


def save_checkpoint(path, params: dict, cfg: ModelConfig,
                    norm_mode: str = "centroid") -> None:
    atomic_write_bytes(path, checkpoint_bytes(params, cfg, norm_mode))


def load_checkpoint(path):
    """Returns (params dict of float64 Tensors, ModelConfig, norm_mode)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    off = 4
    (blob_len,) = struct.unpack_from("<I", data, off)
    off += 4
    blob = data[off:off + blob_len]
    if len(blob) != blob_len:
        raise CheckpointError(f"{path}: truncated config block")
    off += blob_len
    meta = {}
    for line in blob.decode("utf-8").splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointError(f"{path}: malformed config line {line!r}")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    norm_mode = meta.pop("norm_mode", "centroid")
    try:
        cfg = ModelConfig.from_dict(meta)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model config: {exc}") from None
    try:
        (n_tensors,) = struct.unpack_from("<I", data, off)
        off += 4
        params = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=off)
            off += 4 * count
            params[name] = ad.parameter(
                arr.astype(np.float64).reshape(shape), name=name)
    except (struct.error, ValueError):
        raise CheckpointError(f"{path}: truncated tensor data") from None
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    _validate_shapes(params, cfg, path)
    return params, cfg, norm_mode


def _validate_shapes(params: dict, cfg: ModelConfig, path) -> None:
    from .model import _layer_sizes

    expected = {}
    for name, fan_in, fan_out in _layer_sizes(cfg):
        expected[f"{name}.W"] = (fan_in, fan_out)
        expected[f"{name}.b"] = (fan_out,)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise CheckpointError(
            f"{path}: parameter names disagree with config "
            f"(missing {missing[:3]}, extra {extra[:3]})")
    for name, shape in expected.items():
        if tuple(params[name].value.shape) != shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape "
                f"{tuple(params[name].value.shape)}, config implies {shape}")
