"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"ERNNCKPT"              8 bytes magic
    version                  uint32
    header_length            uint64
    header                   UTF-8 JSON, header_length bytes
    data                     float32 blobs at the offsets listed in the header

The header holds ``config``, ``data_bytes`` and an ordered ``parameters``
manifest of ``{name, shape, offset}`` entries (offsets relative to the start of
the data section). Optimizer moments, when saved, follow the parameters under
``adam.m.<name>`` / ``adam.v.<name>`` with the scalar state in ``header["adam"]``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import MaskModel, ModelConfig
from .numerics import AdamState

MAGIC = b"ERNNCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_F32 = np.dtype("<f4")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ManifestMismatchError(CheckpointError):
    """Manifest, declared config and data size disagree."""


def save_checkpoint(model: MaskModel, path, adam: AdamState | None = None) -> None:
    blobs = [(p.name, p.data) for p in model.store]
    if adam is not None:
        blobs += [(f"adam.m.{k}", v) for k, v in adam.m.items()]
        blobs += [(f"adam.v.{k}", v) for k, v in adam.v.items()]
    manifest, chunks, offset = [], [], 0
    for name, arr in blobs:
        raw = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {"config": model.cfg.to_dict(), "parameters": manifest, "data_bytes": offset}
    if adam is not None:
        header["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t}
    head = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)


def _read(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        if not MAGIC.startswith(raw[:8]):
            raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
        raise TruncatedCheckpointError(f"{path}: file ends inside the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise TruncatedCheckpointError(f"{path}: header declares {hlen} bytes, file too short")
    header = json.loads(raw[_PREFIX.size : start].decode("utf-8"))
    data = raw[start:]
    if len(data) < header["data_bytes"]:
        raise TruncatedCheckpointError(f"{path}: data section has {len(data)} of {header['data_bytes']} bytes")
    return header, data


def load_checkpoint(path, with_adam: bool = False):
    """Rebuild the model (and optionally its Adam state) stored at ``path``."""
    header, data = _read(path)
    cfg = ModelConfig.from_dict(header["config"])
    model = MaskModel(cfg, np.float32)
    entries = {e["name"]: e for e in header["parameters"]}
    expected = sum(p.data.size for p in model.store) * _F32.itemsize
    if "adam" in header:
        expected *= 3
    if expected != header["data_bytes"]:
        raise ManifestMismatchError(
            f"{path}: config {cfg.arch}/n_state={cfg.n_state} needs {expected} data bytes, header declares {header['data_bytes']}"
        )

    def blob(name, shape):
        e = entries.get(name)
        if e is None:
            raise ManifestMismatchError(f"{path}: manifest has no entry for {name!r}")
        if tuple(e["shape"]) != tuple(shape):
            raise ManifestMismatchError(f"{path}: {name!r} has shape {tuple(e['shape'])}, config implies {tuple(shape)}")
        n = int(np.prod(shape, dtype=np.int64))
        end = e["offset"] + n * _F32.itemsize
        if e["offset"] < 0 or end > header["data_bytes"]:
            raise ManifestMismatchError(f"{path}: {name!r} extends past the declared data section")
        return np.frombuffer(data, _F32, n, e["offset"]).reshape(shape).astype(np.float32)

    for p in model.store:
        p.data = blob(p.name, p.shape)
        p.zero_grad()
    if not with_adam:
        return model
    adam = None
    if "adam" in header:
        a = header["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"])
        for p in model.store:
            adam.m[p.name] = blob(f"adam.m.{p.name}", p.shape)
            adam.v[p.name] = blob(f"adam.v.{p.name}", p.shape)
    return model, adam
