"""Fixed-length sample packing with per-sample position reset.

Each window carries segment ids that imply a block-diagonal causal mask:
a position may attend only to earlier positions of the same segment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .vocab import JointVocab, Sample

PAD_SEGMENT = -1


@dataclass
class PackedBatch:
    ids: np.ndarray  # int64 [L]
    positions: np.ndarray  # int64 [L], reset to 0 at each sample start
    segments: np.ndarray  # int64 [L], PAD_SEGMENT on padding
    loss_mask: np.ndarray  # bool [L]
    n_samples: int

    @property
    def window(self) -> int:
        return len(self.ids)


def pack(samples: Sequence[Sample], window: int, pad_id: int) -> list[PackedBatch]:
    """Greedy first-fit packing of samples into fixed windows.

    Samples are considered in order; each goes into the first window with
    room.  A sample longer than the window is rejected.
    """
    windows: list[list[Sample]] = []
    used: list[int] = []
    for idx, s in enumerate(samples):
        if len(s) > window:
            raise ConfigError(f"sample {idx} has length {len(s)} > window {window}")
        for w, u in enumerate(used):
            if u + len(s) <= window:
                windows[w].append(s)
                used[w] += len(s)
                break
        else:
            windows.append([s])
            used.append(len(s))
    return [_materialize(w, window, pad_id) for w in windows]


def _materialize(samples: list[Sample], window: int, pad_id: int) -> PackedBatch:
    ids = np.full(window, pad_id, dtype=np.int64)
    positions = np.zeros(window, dtype=np.int64)
    segments = np.full(window, PAD_SEGMENT, dtype=np.int64)
    loss = np.zeros(window, dtype=bool)
    at = 0
    for seg, s in enumerate(samples):
        n = len(s)
        ids[at : at + n] = s.ids
        positions[at : at + n] = np.arange(n)
        segments[at : at + n] = seg
        loss[at : at + n] = s.loss_mask
        at += n
    return PackedBatch(ids, positions, segments, loss, n_samples=len(samples))


def mask_rule(batch: PackedBatch) -> np.ndarray:
    """Boolean [L, L] matrix: query j may attend key k iff same segment, k <= j."""
    seg = batch.segments
    same = (seg[:, None] == seg[None, :]) & (seg[:, None] != PAD_SEGMENT)
    causal = np.tril(np.ones((batch.window, batch.window), dtype=bool))
    return same & causal


def unpack(batches: Iterable[PackedBatch], vocab: JointVocab) -> list[list[int]]:
    """Recover the original sample id lists, in packing order."""
    out = []
    for b in batches:
        for seg in range(b.n_samples):
            sel = b.segments == seg
            out.append([int(t) for t in b.ids[sel]])
    return out


def save_packed(batches: Iterable[PackedBatch], path: str) -> None:
    with open(path, "w") as f:
        for b in batches:
            rec = {
                "ids": b.ids.tolist(),
                "positions": b.positions.tolist(),
                "segments": b.segments.tolist(),
                "loss_mask": [bool(x) for x in b.loss_mask],
            }
            f.write(json.dumps(rec) + "\n")


def load_packed(path: str) -> list[PackedBatch]:
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            segs = np.asarray(rec["segments"], dtype=np.int64)
            out.append(
                PackedBatch(
                    np.asarray(rec["ids"], dtype=np.int64),
                    np.asarray(rec["positions"], dtype=np.int64),
                    segs,
                    np.asarray(rec["loss_mask"], dtype=bool),
                    n_samples=int(segs.max()) + 1 if (segs >= 0).any() else 0,
                )
            )
    return out
