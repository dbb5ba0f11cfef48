"""Versioned checkpoint archives.

An archive is an uncompressed zip file with fixed entry timestamps so that the
same content always produces the same bytes:

    manifest.json          version, stage name, config snapshot + hash,
                           pipeline hash, iteration, loss trace, array index
    arrays/<name>.npy      one ``.npy`` entry per named array, sorted by name

Array names use the prefixes ``param/``, ``optim/`` and ``rng/``.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

ARCHIVE_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


@dataclass
class CheckpointManifest:
    stage_name: str
    config: dict
    arrays: dict[str, np.ndarray]
    iteration: int = 0
    loss_trace: list[float] = field(default_factory=list)
    pipeline_hash: str = ""
    extra: dict = field(default_factory=dict)
    version: int = ARCHIVE_VERSION

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix.rstrip("/") + "/"
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def to_bytes(ckpt: CheckpointManifest) -> bytes:
    index = {
        name: {"shape": list(a.shape), "dtype": a.dtype.str}
        for name, a in sorted(ckpt.arrays.items())
    }
    header = {
        "version": ckpt.version,
        "stage_name": ckpt.stage_name,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "pipeline_hash": ckpt.pipeline_hash,
        "iteration": int(ckpt.iteration),
        "loss_trace": [float(x) for x in ckpt.loss_trace],
        "extra": ckpt.extra,
        "arrays": index,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _write_entry(zf, "manifest.json", json.dumps(header, sort_keys=True, indent=1).encode())
        for name in sorted(ckpt.arrays):
            arr = io.BytesIO()
            np.lib.format.write_array(arr, np.asarray(ckpt.arrays[name]).copy(order="C"), allow_pickle=False)
            _write_entry(zf, f"arrays/{name}.npy", arr.getvalue())
    return buf.getvalue()


def from_bytes(data: bytes, expected_hash: Optional[str] = None) -> CheckpointManifest:
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
        header = json.loads(zf.read("manifest.json"))
        arrays = {}
        for name, spec in header["arrays"].items():
            a = np.lib.format.read_array(io.BytesIO(zf.read(f"arrays/{name}.npy")), allow_pickle=False)
            if list(a.shape) != spec["shape"] or a.dtype.str != spec["dtype"]:
                raise CheckpointError(f"array {name} does not match its index entry")
            arrays[name] = a
    except CheckpointError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError) as exc:
        raise CheckpointError(f"corrupt checkpoint archive: {exc}") from exc
    if header.get("version") != ARCHIVE_VERSION:
        raise CheckpointError(f"unsupported archive version {header.get('version')}")
    ckpt = CheckpointManifest(
        stage_name=header["stage_name"],
        config=header["config"],
        arrays=arrays,
        iteration=header["iteration"],
        loss_trace=header["loss_trace"],
        pipeline_hash=header["pipeline_hash"],
        extra=header["extra"],
        version=header["version"],
    )
    if ckpt.config_hash != header["config_hash"]:
        raise CheckpointError("config hash mismatch: stored hash does not match stored config")
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise CheckpointError(
            f"config hash mismatch: expected {expected_hash[:12]}, archive has {header['config_hash'][:12]}"
        )
    return ckpt


def save_checkpoint(ckpt: CheckpointManifest, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path: Union[str, Path], expected_hash: Optional[str] = None) -> CheckpointManifest:
    return from_bytes(Path(path).read_bytes(), expected_hash=expected_hash)
