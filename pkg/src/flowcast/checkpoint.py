"""Binary checkpoint format.

Layout: magic, format version, length-prefixed JSON header (config echo,
metadata, shape manifest), float64 little-endian payload, sha256 digest of
everything before it. The JSON header is serialized canonically so that
save -> load -> save is byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatchError, ShapeMismatchError
from .model import ForecastModel
from .training import AdamState, adam_init

MAGIC = b"FCCKPT01"
VERSION = 1


def _canon_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict,
                    meta: dict) -> None:
    manifest = []
    chunks = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        if a.ndim != 2:
            raise ShapeMismatchError(f"checkpoint array {name} must be 2-D")
        manifest.append([name, int(a.shape[0]), int(a.shape[1])])
        chunks.append(a.tobytes())
    header = _canon_json({"config": config, "meta": meta, "manifest": manifest})
    body = (
        MAGIC
        + struct.pack("<I", VERSION)
        + struct.pack("<Q", len(header))
        + header
        + b"".join(chunks)
    )
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)


def load_checkpoint(path):
    """Returns (arrays, config, meta); validates checksum and manifest."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 12 + 32 or not blob.startswith(MAGIC):
        raise ChecksumMismatchError(f"{path} is not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatchError(f"{path}: content checksum mismatch")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != VERSION:
        raise ChecksumMismatchError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack_from("<Q", body, off)
    off += 8
    header = json.loads(body[off : off + hlen].decode())
    off += hlen
    arrays = {}
    for name, rows, cols in header["manifest"]:
        n = rows * cols * 8
        arrays[name] = np.frombuffer(
            body, dtype="<f8", count=rows * cols, offset=off
        ).reshape(rows, cols).copy()
        off += n
    if off != len(body):
        raise ChecksumMismatchError(f"{path}: payload length mismatch")
    return arrays, header["config"], header["meta"]


def save_model_checkpoint(path, model: ForecastModel, config: dict,
                          meta: dict, opt: AdamState | None = None) -> None:
    arrays = dict(model.parameters())
    if opt is not None:
        arrays.update(opt.arrays())
        meta = dict(meta, adam_t=opt.t)
    save_checkpoint(path, arrays, config, meta)


def load_model_checkpoint(path, build_model):
    """Rebuild (model, opt, config, meta) from a checkpoint.

    build_model(config) must construct a model with the same architecture
    the checkpoint was saved from; parameters are then overwritten.
    """
    arrays, config, meta = load_checkpoint(path)
    model = build_model(config)
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    model.set_parameters(params)
    opt = None
    if any(k.startswith("adam.") for k in arrays):
        opt = adam_init(model)
        opt.t = int(meta.get("adam_t", 0))
        for name in opt.m:
            opt.m[name][...] = arrays[f"adam.m.{name}"]
            opt.v[name][...] = arrays[f"adam.v.{name}"]
    return model, opt, config, meta
