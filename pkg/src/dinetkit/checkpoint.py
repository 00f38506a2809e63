"""Binary checkpoint container.

Layout (all integers little-endian uint32)::

    b"DINETKIT"                       8-byte magic
    version                           currently 1
    meta_len, meta                    UTF-8 "key=value" lines describing the architecture
    n_arrays
    n_arrays times:
        name_len, name                UTF-8 parameter name
        ndim, dim_0 ... dim_{ndim-1}
        prod(dims) float32 values     little-endian, C order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import DilationRates, DimVariant, ModelGraph, build_model

MAGIC = b"DINETKIT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_arrays(path, arrays: dict[str, np.ndarray], meta: dict[str, str]) -> None:
    meta_blob = "".join(f"{k}={v}\n" for k, v in meta.items()).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_blob)), meta_blob, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        nb = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    version, meta_len = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta_text = blob[pos: pos + meta_len].decode()
    pos += meta_len
    meta = dict(line.split("=", 1) for line in meta_text.splitlines() if line)
    (n,) = take("<I")
    arrays = {}
    for _ in range(n):
        (name_len,) = take("<I")
        name = blob[pos: pos + name_len].decode()
        pos += name_len
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        if pos + 4 * count > len(blob):
            raise CheckpointError(f"{path}: truncated data for {name}")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += 4 * count
    return arrays, meta


def save_model(model: ModelGraph, path, extra_meta: dict | None = None) -> None:
    arrays = {k: t.data for k, t in model.parameters().items()}
    meta = {k: str(v) for k, v in model.meta.items()}
    meta.update({k: str(v) for k, v in (extra_meta or {}).items()})
    write_arrays(path, arrays, meta)


def assign_params(model: ModelGraph, arrays: dict[str, np.ndarray]) -> None:
    params = model.parameters()
    missing = sorted(set(params) - set(arrays))
    unexpected = sorted(set(arrays) - set(params))
    if missing or unexpected:
        raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {unexpected}")
    for name, t in params.items():
        if arrays[name].shape != t.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {arrays[name].shape}, model {t.shape}"
            )
    for name, t in params.items():
        t.data[...] = arrays[name]


def model_from_meta(meta: dict[str, str], dtype=np.float64) -> ModelGraph:
    try:
        return build_model(
            DimVariant(meta["variant"], meta["fusion"]),
            DilationRates.parse(meta["rates"]),
            backbone_channels=int(meta["backbone_channels"]),
            branch_channels=int(meta["branch_channels"]),
            decoder_layers=int(meta["decoder_layers"]),
            decoder_width=int(meta["decoder_width"]),
            output_stride=int(meta["output_stride"]),
            widths=tuple(int(v) for v in meta["widths"].split(",")),
            aux_linear_decoder=bool(int(meta.get("aux_linear_decoder", "0"))),
            seed=0,
            dtype=dtype,
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint metadata lacks {exc.args[0]!r}") from None


def load_model(path, dtype=np.float64, expect: ModelGraph | None = None) -> ModelGraph:
    """Rebuild the model described in the checkpoint (or fill ``expect``) and load its weights."""
    arrays, meta = read_arrays(path)
    model = expect if expect is not None else model_from_meta(meta, dtype)
    assign_params(model, arrays)
    return model
