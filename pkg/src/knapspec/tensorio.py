"""Manifest + flat float32 tensor files, used for weights and reference traces.

Layout::

    knapspec-tensors 1
    meta <key> <value>
    tensor <name> <dim>x<dim>... <byte offset>
    end
    <little-endian float32 payload>

Offsets are relative to the first payload byte.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .model import ModelConfig, ModelWeights, ToyModel

MAGIC = "knapspec-tensors 1"
_LE_F32 = np.dtype("<f4")


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict[str, object] | None = None) -> None:
    lines = [MAGIC]
    for key, value in (meta or {}).items():
        if any(ch.isspace() for ch in str(key)) or "\n" in str(value):
            raise FormatError(f"meta entry {key!r} must be single-token key and single-line value")
        lines.append(f"meta {key} {value}")
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        a = np.array(arr, dtype=_LE_F32, order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        shape = "x".join(str(s) for s in a.shape) or "scalar"
        lines.append(f"tensor {name} {shape} {offset}")
        blobs.append(a.tobytes())
        offset += a.nbytes
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for blob in blobs:
            fh.write(blob)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode()) or cut < 0:
        raise FormatError(f"{path}: not a knapspec tensor file")
    header = raw[:cut].decode("ascii").splitlines()[1:]
    payload = memoryview(raw)[cut + len(marker):]
    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    for line in header:
        parts = line.split(" ", 2)
        if parts[0] == "meta" and len(parts) == 3:
            meta[parts[1]] = parts[2]
        elif parts[0] == "tensor" and len(parts) == 3:
            name = parts[1]
            shape_s, off_s = parts[2].split(" ")
            shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
            off = int(off_s)
            nbytes = 4 * math.prod(shape)
            if off < 0 or off + nbytes > len(payload):
                raise FormatError(f"{path}: tensor {name} runs past end of file")
            arr = np.frombuffer(payload[off:off + nbytes], dtype=_LE_F32).reshape(shape)
            tensors[name] = arr.astype(np.float32)
        else:
            raise FormatError(f"{path}: bad manifest line {line!r}")
    return tensors, meta


_CONFIG_KEYS = ("L", "d", "n_heads", "d_ff", "V", "max_seq")


def save_weights(path, model: ToyModel) -> None:
    c = model.config
    meta = {k: getattr(c, k) for k in _CONFIG_KEYS}
    meta["eps"] = repr(c.eps)
    save_tensors(path, model.weights.as_dict(), meta)


def config_from_meta(meta: dict[str, str]) -> ModelConfig:
    try:
        kw = {k: int(meta[k]) for k in _CONFIG_KEYS}
        kw["eps"] = float(meta["eps"])
    except KeyError as exc:
        raise FormatError(f"weight manifest lacks config key {exc}") from None
    return ModelConfig(**kw)


def load_weights(path, config: ModelConfig | None = None) -> ToyModel:
    """Load a model; when ``config`` is given the file must match it exactly."""
    tensors, meta = load_tensors(path)
    file_config = config_from_meta(meta)
    if config is not None and config != file_config:
        raise ContractError(f"{path}: weight file config {file_config} != requested {config}")
    config = file_config
    missing = set(ModelWeights.names()) - set(tensors)
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)}")
    for name in ModelWeights.names():
        want = ModelWeights.expected_shape(name, config)
        if tensors[name].shape != want:
            raise ContractError(f"{path}: {name} has shape {tensors[name].shape}, expected {want}")
    weights = ModelWeights(**{n: tensors[n] for n in ModelWeights.names()}).replace()
    return ToyModel(config, weights)
