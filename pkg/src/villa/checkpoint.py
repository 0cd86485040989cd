"""Checkpoint file: magic, version, JSON header, then little-endian float64 arrays.

Layout::

    b"VLLACKPT" | u32 version | u32 header bytes | header JSON | array data

The header lists every array (model parameters, then optimizer moments) with
its name, shape and byte offset into the data section.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import RunConfig, from_dict
from .errors import FormatError
from .numerics import DTYPE

MAGIC = b"VLLACKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model, cfg: RunConfig, iteration: int = 0, opt_state: Optional[dict] = None):
    arrays: list[tuple[str, np.ndarray]] = []
    for name, p in model.named_parameters():
        arrays.append((f"param/{name}", p.detach().cpu().numpy()))
    names = [n for n, _ in model.named_parameters()]
    if opt_state is not None:
        for key in ("m", "v"):
            for name, t in zip(names, opt_state[key]):
                arrays.append((f"{key}/{name}", t.detach().cpu().numpy()))
    index, blobs, offset = [], [], 0
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "version": CHECKPOINT_VERSION,
        "iteration": iteration,
        "config": cfg.to_json(),
        "config_digest": cfg.digest(),
        "vocab": list(model.vocab.symbols),
        "arrays": index,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version} != {CHECKPOINT_VERSION}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        buf = raw[start : start + entry["nbytes"]]
        if len(buf) != entry["nbytes"]:
            raise FormatError(f"{path}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(entry["shape"]).copy()
    return header, arrays


def load_checkpoint(path):
    """Returns ``(model, config, iteration, optimizer state or None)``."""
    from .model import ViLLa

    header, arrays = read_checkpoint(path)
    cfg = from_dict(RunConfig, header["config"])
    model = ViLLa(cfg)
    if list(model.vocab.symbols) != header["vocab"]:
        raise FormatError(f"{path}: vocabulary differs from this build")
    names = [n for n, _ in model.named_parameters()]
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"param/{name}"
            if key not in arrays:
                raise FormatError(f"{path}: missing parameter {name}")
            p.copy_(torch.as_tensor(arrays[key], dtype=DTYPE))
    opt_state = None
    if all(f"m/{n}" in arrays for n in names):
        opt_state = {
            k: [torch.as_tensor(arrays[f"{k}/{n}"], dtype=DTYPE) for n in names] for k in ("m", "v")
        }
    return model, cfg, header["iteration"], opt_state
