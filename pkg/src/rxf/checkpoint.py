"""Checkpoint files: a JSON header followed by named parameter blocks.

Layout:

    bytes 0..3   magic "RXFC"
    bytes 4..7   header length, u32 little-endian
    ...          UTF-8 JSON header
    ...          per tensor: parameter block, then (optionally) the two
                 Adam moment blocks, in header order

The header records the engine version, a hash of the rebuild metadata, and
tensor names/shapes, so a checkpoint is self-describing: loading it restores
both the weights and everything needed to rerun the forward pass.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from ._version import __version__
from .autograd import Tensor
from .matrixio import read_block, write_block
from .optim import ParamSet

MAGIC = b"RXFC"
FORMAT = "rxf-checkpoint/1"


def config_hash(meta: dict) -> str:
    canon = json.dumps(meta, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def save_checkpoint(pset: ParamSet, path: str | Path, include_moments: bool = True) -> None:
    path = Path(path)
    names = list(pset.params)
    header = {
        "format": FORMAT,
        "engine_version": __version__,
        "config_hash": config_hash(pset.meta),
        "meta": pset.meta,
        "step": pset.step,
        "moments": include_moments,
        "tensors": [
            {"name": n, "shape": list(pset.params[n].shape), "dtype": str(pset.params[n].dtype)}
            for n in names
        ],
    }
    blob = json.dumps(header).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for n in names:
        p = pset.params[n]
        write_block(buf, p.data.reshape(1, -1))
        if include_moments:
            write_block(buf, pset.m[n].reshape(1, -1))
            write_block(buf, pset.v[n].reshape(1, -1))
    path.write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> ParamSet:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic in {path}: {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("format") != FORMAT:
            raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
        if header["config_hash"] != config_hash(header["meta"]):
            raise ValueError("checkpoint config hash does not match its metadata")
        params: dict[str, Tensor] = {}
        m: dict[str, np.ndarray] = {}
        v: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            name, shape = entry["name"], tuple(entry["shape"])
            block = read_block(f)
            if block.size != int(np.prod(shape, dtype=np.int64)):
                raise ValueError(f"checkpoint tensor '{name}' has {block.size} values; expected shape {shape}")
            params[name] = Tensor(block.reshape(shape), requires_grad=True)
            if header["moments"]:
                m[name] = read_block(f).reshape(shape)
                v[name] = read_block(f).reshape(shape)
    return ParamSet(params=params, m=m, v=v, step=header["step"], meta=header["meta"])
