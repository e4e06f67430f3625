"""Fixed-layout binary checkpoint container.

Layout (all integers little-endian):
    8 bytes   magic  b"FATCKPT\\0"
    u32       format version (1)
    u64       metadata length, then that many bytes of UTF-8 JSON
              (model spec, epoch, config echo, prior metadata)
    u32       tensor count
    per tensor:
        u32   name length, then name bytes (UTF-8)
        u32   ndim, then ndim * u64 dims
        raw   float32 little-endian payload (C order)

Parameters round-trip bit-exactly; the optional perturbation-prior store
is carried as a tensor named "prior/deltas" plus metadata.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .attacks import PerturbationPrior
from .model import Model, ModelSpec, build_model

MAGIC = b"FATCKPT\x00"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Bad magic, unknown version, or truncated payload."""


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    epoch: int = 0
    config_echo: dict = None
    prior: Optional[PerturbationPrior] = None

    def model(self, dtype: torch.dtype = torch.float32) -> Model:
        m = build_model(self.spec, dtype=dtype)
        m.load_params({k: torch.from_numpy(v) for k, v in self.params.items()})
        return m


def _spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
        "stage_widths": list(spec.stage_widths),
        "node_names": list(spec.node_names),
        "seed": spec.seed,
    }


def _spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(
        input_shape=tuple(d["input_shape"]),
        num_classes=d["num_classes"],
        stage_widths=tuple(d["stage_widths"]),
        node_names=tuple(d["node_names"]),
        seed=d["seed"],
    )


def _write_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    payload = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode("utf-8")
    buf.write(struct.pack("<I", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<I", payload.ndim))
    for d in payload.shape:
        buf.write(struct.pack("<Q", d))
    buf.write(payload.tobytes())


def _read_exact(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointFormatError("truncated payload")
    return data


def _read_tensor(buf: io.BytesIO) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<I", _read_exact(buf, 4))
    name = _read_exact(buf, nlen).decode("utf-8")
    (ndim,) = struct.unpack("<I", _read_exact(buf, 4))
    shape = tuple(struct.unpack("<Q", _read_exact(buf, 8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(_read_exact(buf, count * 4), dtype="<f4").reshape(shape)
    return name, arr.copy()


def save_checkpoint(path: str | Path, model: Model, epoch: int = 0,
                    config_echo: dict | None = None,
                    prior: PerturbationPrior | None = None) -> Path:
    meta = {
        "model_spec": _spec_to_dict(model.spec),
        "epoch": int(epoch),
        "config_echo": config_echo or {},
        "prior": None if prior is None else {"momentum": prior.momentum, "budget": prior.budget},
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(meta_bytes)))
    buf.write(meta_bytes)
    tensors = [(k, v.detach().cpu().numpy()) for k, v in sorted(model.params.items())]
    if prior is not None:
        tensors.append(("prior/deltas", prior.deltas.detach().cpu().numpy()))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(buf.getvalue())
    return out


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    if _read_exact(buf, len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint file")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != VERSION:
        raise CheckpointFormatError(f"unknown checkpoint version {version}")
    (mlen,) = struct.unpack("<Q", _read_exact(buf, 8))
    meta = json.loads(_read_exact(buf, mlen).decode("utf-8"))
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    tensors = dict(_read_tensor(buf) for _ in range(count))
    if buf.read(1):
        raise CheckpointFormatError("trailing bytes after last tensor")
    prior = None
    if meta.get("prior") is not None:
        deltas = tensors.pop("prior/deltas", None)
        if deltas is None:
            raise CheckpointFormatError("prior metadata without prior/deltas tensor")
        prior = PerturbationPrior(torch.from_numpy(deltas), momentum=meta["prior"]["momentum"],
                                  budget=meta["prior"]["budget"])
    return Checkpoint(
        spec=_spec_from_dict(meta["model_spec"]),
        params=tensors,
        epoch=meta["epoch"],
        config_echo=meta.get("config_echo") or {},
        prior=prior,
    )
