"""Output manifests, atomic stage directories, and typed artifact round-trips."""

from __future__ import annotations

import contextlib
import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Iterator

from .nnkit.checkpoint import CorruptArtifactError

MANIFEST = "artifact.json"
SCHEMA_VERSION = 1


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def write_manifest(directory: str | Path, artifact: str, *, config_text: str = "", inputs: dict[str, str] | None = None,
                   extra: dict | None = None) -> dict:
    """Hash every file below ``directory`` (except the manifest) into ``artifact.json``."""
    directory = Path(directory)
    files = {}
    for p in sorted(directory.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            files[p.relative_to(directory).as_posix()] = sha256_file(p)
    m = {
        "artifact": artifact,
        "version": SCHEMA_VERSION,
        "config": config_text,
        "config_hash": sha256_text(config_text),
        "inputs": inputs or {},
        "files": files,
        "extra": extra or {},
    }
    (directory / MANIFEST).write_text(json.dumps(m, indent=1, sort_keys=True))
    return m


def manifest_hash(directory: str | Path) -> str:
    return sha256_file(Path(directory) / MANIFEST)


def verify_manifest(directory: str | Path, artifact: str | None = None) -> dict:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise CorruptArtifactError(f"{directory} has no {MANIFEST}")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptArtifactError(f"{path} is not valid JSON") from exc
    if m.get("version") != SCHEMA_VERSION:
        raise CorruptArtifactError(f"unsupported manifest version {m.get('version')}")
    if artifact is not None and m.get("artifact") != artifact:
        raise CorruptArtifactError(f"{directory} holds a {m.get('artifact')!r} artifact, expected {artifact!r}")
    if m.get("config_hash") != sha256_text(m.get("config", "")):
        raise CorruptArtifactError(f"{directory}: stored config does not match its hash")
    for rel, digest in m.get("files", {}).items():
        f = directory / rel
        if not f.exists():
            raise CorruptArtifactError(f"{directory}: missing file {rel}")
        if sha256_file(f) != digest:
            raise CorruptArtifactError(f"{directory}: {rel} does not match its manifest hash")
    return m


@contextlib.contextmanager
def atomic_dir(out: str | Path) -> Iterator[Path]:
    """Yield a scratch directory that replaces ``out`` only if the block succeeds."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        old = out.with_name(f".{out.name}.old")
        shutil.rmtree(old, ignore_errors=True)
        os.replace(out, old)
        os.replace(tmp, out)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(tmp, out)


# -- typed round-trips ---------------------------------------------------------------


def save_artifact(obj, path: str | Path, *, config_text: str = "", inputs: dict[str, str] | None = None,
                  extra: dict | None = None, sidecars: dict[str, str] | None = None) -> Path:
    """Persist a SimDataset, encoder or reconstruction model under ``path`` with a manifest.

    ``sidecars`` maps extra file names to text content written (and hashed) alongside.
    """
    from .encoder import FunctionalEncoder
    from .nnkit import save_checkpoint
    from .recon import FunctionalTransformer
    from .simgen import SimDataset, save_dataset

    path = Path(path)
    with atomic_dir(path) as tmp:
        if isinstance(obj, SimDataset):
            save_dataset(obj, tmp)
            kind = "dataset"
        elif isinstance(obj, FunctionalEncoder):
            save_checkpoint(obj, tmp, {"model": "encoder", **obj.arch, "layers": [sp.to_dict() for sp in obj.specs]})
            kind = "encoder"
        elif isinstance(obj, FunctionalTransformer):
            save_checkpoint(obj, tmp, {"model": "recon", "config": obj.cfg.to_dict()})
            kind = "recon"
        else:
            raise TypeError(f"cannot save {type(obj).__name__}")
        for name, text in (sidecars or {}).items():
            (tmp / name).write_text(text)
        write_manifest(tmp, kind, config_text=config_text, inputs=inputs, extra=extra)
    return path


def load_artifact(path: str | Path, expect: str | None = None):
    """Inverse of :func:`save_artifact`; refuses tampered or mismatched directories."""
    from .encoder import FunctionalEncoder
    from .nnkit import load_into
    from .nnkit.checkpoint import read_manifest
    from .recon import FunctionalTransformer, ReconConfig
    from .simgen import load_dataset

    m = verify_manifest(path, expect)
    kind = m["artifact"]
    if kind == "dataset":
        return load_dataset(path)
    if kind == "encoder":
        arch = read_manifest(path)["arch"]
        model = FunctionalEncoder(arch["variant"], arch.get("conv_dropout"), arch.get("head_dropout", 0.1))
        load_into(model, path)
        return model.eval()
    if kind == "recon":
        arch = read_manifest(path)["arch"]
        model = FunctionalTransformer(ReconConfig.from_dict(arch["config"]))
        load_into(model, path)
        return model.eval()
    raise CorruptArtifactError(f"unknown artifact kind {kind!r}")
