"""Checkpoint file format.

Line 1 is a compact JSON header terminated by ``\\n``::

    {"format": "domino-checkpoint", "version": 1, "config": {...}, "seed": 0,
     "params": [{"name": ..., "shape": [...], "offset": 0, "count": ...}, ...], ...}

followed by every parameter as raw little-endian float32, concatenated in
manifest order. ``offset`` and ``count`` are in float32 elements from the
start of the payload.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError

FORMAT = "domino-checkpoint"
VERSION = 1


def serialize(model, config, seed: int, extra=None) -> bytes:
    manifest = []
    blocks = []
    offset = 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blocks.append(arr.tobytes())
        offset += arr.size
    header = {
        "format": FORMAT,
        "version": VERSION,
        "config": config.to_dict(),
        "seed": int(seed),
        "combination": config.model.combination,
        "params": manifest,
    }
    if extra:
        header["extra"] = extra
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n" + b"".join(blocks)


def save_checkpoint(path, model, config, seed: int, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize(model, config, seed, extra))
    return path


def read_header(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint {str(path)!r} does not exist")
    with path.open("rb") as fh:
        line = fh.readline()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{str(path)!r} is not a checkpoint: bad header") from exc
    if header.get("format") != FORMAT:
        raise ConfigurationError(f"{str(path)!r} is not a checkpoint")
    return header


def load_checkpoint(path):
    """Return ``(model, config, header)`` rebuilt from a checkpoint file."""
    from .config import ExperimentConfig
    from .model import build_model

    path = Path(path)
    header = read_header(path)
    raw = path.read_bytes()
    payload = np.frombuffer(raw[raw.index(b"\n") + 1:], dtype="<f4")
    # catalog files referenced at training time need not exist at load time
    cfg_dict = header["config"]
    cfg_dict = {**cfg_dict, "domain": {**cfg_dict["domain"], "catalog_path": None}}
    config = ExperimentConfig.from_dict(cfg_dict)
    config.domain.catalog_path = header["config"]["domain"]["catalog_path"]
    model = build_model(config, header["seed"])
    state = {}
    for entry in header["params"]:
        block = payload[entry["offset"]: entry["offset"] + entry["count"]]
        if block.size != entry["count"]:
            raise ConfigurationError(f"checkpoint {str(path)!r} is truncated at {entry['name']}")
        state[entry["name"]] = torch.from_numpy(block.reshape(entry["shape"]).astype(np.float32))
    model.load_state_dict(state)
    return model, config, header
