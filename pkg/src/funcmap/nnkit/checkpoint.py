"""Checkpoint format: ``manifest.json`` plus one raw little-endian tensor blob."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


class CorruptArtifactError(ValueError):
    pass


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_checkpoint(model: nn.Module, directory: str | Path, arch: dict, *, optimizer: torch.optim.Optimizer | None = None,
                    extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table, chunks, offset = [], [], 0
    for name, t in model.state_dict().items():
        code = _DTYPES.get(t.dtype)
        if code is None:
            raise TypeError(f"cannot serialize {name} of dtype {t.dtype}")
        raw = np.ascontiguousarray(t.detach().cpu().numpy().astype(code)).tobytes()
        table.append({"name": name, "shape": list(t.shape), "dtype": code, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    (directory / "params.bin").write_bytes(blob)
    opt_meta = None
    if optimizer is not None:
        opt_meta = [
            {"lr": g["lr"], "weight_decay": g["weight_decay"], "betas": list(g.get("betas", ())), "n_params": len(g["params"]),
             "step": max((optimizer.state[p].get("step", 0) for p in g["params"] if p in optimizer.state), default=0)}
            for g in optimizer.param_groups
        ]
    manifest = {
        "artifact": "checkpoint",
        "version": VERSION,
        "arch": arch,
        "tensors": table,
        "sha256": _sha256(blob),
        "torch_rng_state": _sha256(torch.get_rng_state().numpy().tobytes()),
        "optimizer": opt_meta,
        "extra": extra or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def read_manifest(directory: str | Path) -> dict:
    m = json.loads((Path(directory) / "manifest.json").read_text())
    if m.get("artifact") != "checkpoint":
        raise CorruptArtifactError(f"{directory} is not a checkpoint")
    if m.get("version") != VERSION:
        raise CorruptArtifactError(f"unsupported checkpoint version {m.get('version')}")
    return m


def load_state(directory: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    directory = Path(directory)
    m = read_manifest(directory)
    blob = (directory / "params.bin").read_bytes()
    if _sha256(blob) != m["sha256"]:
        raise CorruptArtifactError(f"{directory}/params.bin does not match its manifest hash")
    state = {}
    for row in m["tensors"]:
        arr = np.frombuffer(blob, dtype=row["dtype"], count=int(np.prod(row["shape"], dtype=np.int64)), offset=row["offset"])
        state[row["name"]] = torch.from_numpy(arr.reshape(row["shape"]).copy())
    return m, state


def load_into(model: nn.Module, directory: str | Path) -> dict:
    m, state = load_state(directory)
    model.load_state_dict(state)
    return m
