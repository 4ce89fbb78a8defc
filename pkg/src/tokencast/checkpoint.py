"""Self-describing checkpoint container: "MCTP1" header, JSON config record,
then named row-major float32 tensors."""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .errors import CheckpointError
from .model import ModelConfig, SpeechModel

MAGIC = b"MCTP1\n"


def save_checkpoint(model: SpeechModel, path: str) -> None:
    state = model.state_dict()
    names = sorted(state.keys())
    header = {
        "config": model.cfg.to_dict(),
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(state[n].detach().cpu().to(torch.float32).numpy().tobytes())


def read_header(path: str) -> dict:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (n,) = struct.unpack("<I", f.read(4))
        return json.loads(f.read(n))


def load_checkpoint(path: str) -> SpeechModel:
    header = read_header(path)
    cfg = ModelConfig.from_dict(header["config"])
    model = SpeechModel(cfg)
    offset = len(MAGIC) + 4 + len(json.dumps(header, sort_keys=True).encode())
    state = {}
    with open(path, "rb") as f:
        f.seek(offset)
        for rec in header["tensors"]:
            shape = rec["shape"]
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise CheckpointError(f"{path}: truncated tensor {rec['name']}")
            arr = np.frombuffer(buf, dtype=np.float32).reshape(shape)
            state[rec["name"]] = torch.from_numpy(arr.copy())
    missing = model.load_state_dict(state, strict=True)
    return model
