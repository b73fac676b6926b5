"""Binary checkpoint files.

Layout (all integers little-endian)::

    magic        8 bytes   b"MASKCKPT"
    version      uint32
    header_len   uint64
    header       UTF-8 JSON, keys sorted: metadata, parameter table,
                 optimizer scalars, payload sha256
    payload      row-major float64 little-endian: every parameter in table
                 order, then first and second moments in the same order

The JSON header is serialized with sorted keys and fixed separators, so the
same state always produces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import CorruptionError, VersionError
from .optim import OptimizerState
from .tensor import Tensor

MAGIC = b"MASKCKPT"
VERSION = 1
_OPT_SCALARS = ("lr", "warmup", "total_steps", "weight_decay", "beta1", "beta2", "eps", "step")


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def encode_checkpoint(params: dict[str, Tensor], meta: dict,
                      opt: OptimizerState | None = None) -> bytes:
    names = list(params)
    chunks = [np.ascontiguousarray(params[n].data, dtype="<f8").tobytes() for n in names]
    moments = []
    if opt is not None:
        moments = [n for n in names if n in opt.first_moment]
        for store in (opt.first_moment, opt.second_moment):
            chunks += [np.ascontiguousarray(store[n], dtype="<f8").tobytes() for n in moments]
    payload = b"".join(chunks)
    header = {
        "meta": meta,
        "params": [[n, list(params[n].shape)] for n in names],
        "optimizer": None if opt is None else {
            **{k: getattr(opt, k) for k in _OPT_SCALARS}, "moments": moments},
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hb = _dumps(header)
    return MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb + payload


def decode_checkpoint(blob: bytes):
    """Inverse of :func:`encode_checkpoint`; returns ``(params, meta, opt)``."""
    if len(blob) < 20 or blob[:8] != MAGIC:
        raise CorruptionError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, expected {VERSION}")
    if 20 + hlen > len(blob):
        raise CorruptionError("truncated checkpoint header")
    try:
        header = json.loads(blob[20:20 + hlen])
    except ValueError as exc:
        raise CorruptionError(f"unreadable checkpoint header: {exc}") from None
    payload = blob[20 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptionError("checkpoint payload digest mismatch")

    offset = 0

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        return arr.astype(np.float64).reshape(shape)

    params = {name: Tensor(take(shape), requires_grad=True, name=name)
              for name, shape in header["params"]}
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = OptimizerState(**{k: o[k] for k in _OPT_SCALARS})
        for store in (opt.first_moment, opt.second_moment):
            for name in o["moments"]:
                store[name] = take(params[name].shape)
    if offset != len(payload):
        raise CorruptionError("checkpoint payload length mismatch")
    return params, header["meta"], opt


def save_checkpoint(path, params, meta, opt=None) -> None:
    path = Path(path)
    blob = encode_checkpoint(params, meta, opt)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
