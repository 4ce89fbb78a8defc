"""Joint text/audio token space and the synthetic text-to-audio corpus.

The corpus stands in for real speech data: every text symbol has an exact
two-token audio realization, and a small set of "homograph" symbols realize
differently depending on the class of the preceding symbol.  Because the
mapping is an exact oracle, downstream accuracy checks can be bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .errors import ConfigError, DomainError

SPECIAL_NAMES = ("audio_begin", "audio_end", "pad", "eos", "user", "assistant")

DEFAULT_CONTEXT_CLASS = 0


class TokenKind(str, Enum):
    Text = "text"
    AudioContent = "audio"
    AudioBegin = "audio_begin"
    AudioEnd = "audio_end"
    Pad = "pad"
    Eos = "eos"
    Tag = "tag"  # user/assistant role markers


AUDIO_KINDS = frozenset({TokenKind.AudioContent, TokenKind.AudioBegin, TokenKind.AudioEnd})


@dataclass(frozen=True)
class JointVocab:
    """Disjoint contiguous id ranges: text, audio content, then specials."""

    text_size: int
    audio_size: int
    special_ids: dict[str, int]

    @property
    def total(self) -> int:
        return self.text_size + self.audio_size + len(self.special_ids)

    @property
    def audio_start(self) -> int:
        return self.text_size

    @property
    def audio_begin(self) -> int:
        return self.special_ids["audio_begin"]

    @property
    def audio_end(self) -> int:
        return self.special_ids["audio_end"]

    @property
    def pad(self) -> int:
        return self.special_ids["pad"]

    @property
    def eos(self) -> int:
        return self.special_ids["eos"]

    @property
    def user(self) -> int:
        return self.special_ids["user"]

    @property
    def assistant(self) -> int:
        return self.special_ids["assistant"]

    def is_text(self, tid: int) -> bool:
        return 0 <= tid < self.text_size

    def is_audio_content(self, tid: int) -> bool:
        return self.text_size <= tid < self.text_size + self.audio_size

    def kind_of(self, tid: int) -> TokenKind:
        if self.is_text(tid):
            return TokenKind.Text
        if self.is_audio_content(tid):
            return TokenKind.AudioContent
        if tid == self.audio_begin:
            return TokenKind.AudioBegin
        if tid == self.audio_end:
            return TokenKind.AudioEnd
        if tid == self.pad:
            return TokenKind.Pad
        if tid == self.eos:
            return TokenKind.Eos
        if tid in (self.user, self.assistant):
            return TokenKind.Tag
        raise DomainError(f"id {tid} outside vocabulary of size {self.total}")

    def text_ids(self) -> range:
        return range(0, self.text_size)

    def audio_content_ids(self) -> range:
        return range(self.text_size, self.text_size + self.audio_size)

    def to_dict(self) -> dict:
        return {
            "text_size": self.text_size,
            "audio_size": self.audio_size,
            "special_ids": dict(self.special_ids),
        }

    @staticmethod
    def from_dict(d: dict) -> "JointVocab":
        return JointVocab(d["text_size"], d["audio_size"], dict(d["special_ids"]))


def build_vocab(text_size: int, audio_size: int) -> JointVocab:
    """Build the joint vocabulary with the six special ids registered last."""
    if text_size < 2:
        raise ConfigError(f"text_size must be >= 2, got {text_size}")
    if audio_size < 2 * text_size:
        raise ConfigError(
            f"audio_size must be >= 2*text_size ({2 * text_size}), got {audio_size}"
        )
    base = text_size + audio_size
    specials = {name: base + i for i, name in enumerate(SPECIAL_NAMES)}
    return JointVocab(text_size, audio_size, specials)


@dataclass(frozen=True)
class OracleSpec:
    """Exact text-to-audio mapping: realization(symbol, prev symbol's class).

    Non-homograph symbols have one fixed audio pair.  Homographs have one
    pair per context class, all pairwise distinct.  Pairs never share audio
    ids across realizations, so the inverse (audio to text) is also exact.
    """

    text_size: int
    n_classes: int
    seed: int
    context_classes: dict[int, int]
    per_symbol_audio: dict[int, tuple[int, int]]
    homograph_set: frozenset[int]
    homograph_rules: dict[tuple[int, int], tuple[int, int]]

    def class_of(self, symbol: int) -> int:
        return self.context_classes[symbol]

    def realization(self, symbol: int, prev_class: int) -> tuple[int, int]:
        if symbol in self.homograph_set:
            return self.homograph_rules[(symbol, prev_class)]
        return self.per_symbol_audio[symbol]

    def to_json(self) -> str:
        return json.dumps(
            {
                "text_size": self.text_size,
                "n_classes": self.n_classes,
                "seed": self.seed,
                "context_classes": {str(k): v for k, v in self.context_classes.items()},
                "per_symbol_audio": {str(k): list(v) for k, v in self.per_symbol_audio.items()},
                "homograph_set": sorted(self.homograph_set),
                "homograph_rules": [
                    [h, c, list(pair)] for (h, c), pair in sorted(self.homograph_rules.items())
                ],
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "OracleSpec":
        d = json.loads(text)
        return OracleSpec(
            text_size=d["text_size"],
            n_classes=d["n_classes"],
            seed=d["seed"],
            context_classes={int(k): v for k, v in d["context_classes"].items()},
            per_symbol_audio={int(k): tuple(v) for k, v in d["per_symbol_audio"].items()},
            homograph_set=frozenset(d["homograph_set"]),
            homograph_rules={(h, c): tuple(pair) for h, c, pair in d["homograph_rules"]},
        )


def build_oracle(
    vocab: JointVocab, n_homographs: int, n_classes: int, seed: int
) -> OracleSpec:
    """Deterministically assign audio pairs; homographs get one per class."""
    import random

    if n_homographs >= vocab.text_size:
        raise ConfigError("n_homographs must be < text_size")
    if n_classes < 2:
        raise ConfigError("n_classes must be >= 2")
    n_real = (vocab.text_size - n_homographs) + n_homographs * n_classes
    if 2 * n_real > vocab.audio_size:
        raise ConfigError(
            f"audio pairs exhausted: need {2 * n_real} audio ids, have {vocab.audio_size}"
        )
    rng = random.Random(seed)
    symbols = list(vocab.text_ids())
    classes = {s: rng.randrange(n_classes) for s in symbols}
    homographs = frozenset(rng.sample(symbols, n_homographs))
    pool = list(vocab.audio_content_ids())
    rng.shuffle(pool)
    it = iter(pool)

    def take_pair() -> tuple[int, int]:
        return (next(it), next(it))

    per_symbol: dict[int, tuple[int, int]] = {}
    rules: dict[tuple[int, int], tuple[int, int]] = {}
    for s in symbols:
        if s in homographs:
            for c in range(n_classes):
                rules[(s, c)] = take_pair()
        else:
            per_symbol[s] = take_pair()
    return OracleSpec(
        text_size=vocab.text_size,
        n_classes=n_classes,
        seed=seed,
        context_classes=classes,
        per_symbol_audio=per_symbol,
        homograph_set=homographs,
        homograph_rules=rules,
    )


def oracle_audio(oracle: OracleSpec, text_ids: Sequence[int]) -> list[int]:
    """Concatenate each symbol's realization given its predecessor's class.

    The first symbol uses context class 0.  Output length is always
    2 * len(text_ids).
    """
    out: list[int] = []
    prev_class = DEFAULT_CONTEXT_CLASS
    for tid in text_ids:
        if not (0 <= tid < oracle.text_size):
            raise DomainError(f"id {tid} is not a text id")
        out.extend(oracle.realization(tid, prev_class))
        prev_class = oracle.class_of(tid)
    return out


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------

# Interleave layouts: (text run, audio content run) units for the opening of
# a stream, then a repeating (4 text, 8 content) cycle.  "balance" keeps a
# strict 1:2 text:audio ratio in every unit; "boost" front-loads audio.
INTERLEAVE_LAYOUTS = {
    "balance": ([(1, 2), (3, 6)], (4, 8)),
    "boost": ([(1, 8)], (4, 8)),
}


@dataclass
class Sample:
    """One role-tagged token sequence plus its ground-truth text symbols."""

    task: str  # "tts" | "asr" | "sqa"
    ids: list[int]
    kinds: list[TokenKind]
    loss_mask: list[bool]
    text: list[int]  # underlying text symbols (the oracle input)

    def __len__(self) -> int:
        return len(self.ids)


def _loss_mask_after_assistant(ids: Sequence[int], vocab: JointVocab) -> list[bool]:
    mask = []
    seen = False
    for tid in ids:
        mask.append(seen)
        if tid == vocab.assistant:
            seen = True
    return mask


def _finish(task: str, ids: list[int], text: list[int], vocab: JointVocab) -> Sample:
    kinds = [vocab.kind_of(t) for t in ids]
    return Sample(task, ids, kinds, _loss_mask_after_assistant(ids, vocab), text)


def interleave_streams(
    text_ids: Sequence[int],
    audio_ids: Sequence[int],
    vocab: JointVocab,
    layout: str = "balance",
) -> list[int]:
    """Weave text and bracketed audio segments following a layout grammar.

    Both streams are consumed in order.  When the audio stream runs out
    mid-segment the segment is closed early; trailing text is then emitted
    unsegmented.
    """
    if layout not in INTERLEAVE_LAYOUTS:
        raise ConfigError(f"unknown interleave layout {layout!r}")
    first_units, cycle = INTERLEAVE_LAYOUTS[layout]
    out: list[int] = []
    ti, ai = 0, 0
    unit_idx = 0
    while ti < len(text_ids) or ai < len(audio_ids):
        t_run, c_run = first_units[unit_idx] if unit_idx < len(first_units) else cycle
        unit_idx += 1
        take_t = min(t_run, len(text_ids) - ti)
        out.extend(text_ids[ti : ti + take_t])
        ti += take_t
        if ai < len(audio_ids):
            take_c = min(c_run, len(audio_ids) - ai)
            out.append(vocab.audio_begin)
            out.extend(audio_ids[ai : ai + take_c])
            out.append(vocab.audio_end)
            ai += take_c
    return out


def gen_corpus(
    oracle: OracleSpec,
    vocab: JointVocab,
    n_samples: int,
    task_mix: dict[str, float],
    len_range: tuple[int, int],
    seed: int,
    sqa_layout: str = "balance",
) -> list[Sample]:
    """Generate TTS / ASR / interleaved-SQA samples, deterministic per seed."""
    import random

    if not task_mix:
        raise ConfigError("task_mix is empty")
    unknown = set(task_mix) - {"tts", "asr", "sqa"}
    if unknown:
        raise ConfigError(f"unknown tasks in mix: {sorted(unknown)}")
    if abs(sum(task_mix.values()) - 1.0) > 1e-9:
        raise ConfigError("task_mix fractions must sum to 1")
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise ConfigError(f"invalid len_range {len_range}")

    rng = random.Random(seed)
    tasks = sorted(task_mix)
    weights = [task_mix[t] for t in tasks]
    samples = []
    for _ in range(n_samples):
        task = rng.choices(tasks, weights)[0]
        n = rng.randint(lo, hi)
        if task == "sqa" and sqa_layout == "balance":
            # balance units consume text in multiples of 4
            n = max(4, n - n % 4)
        text = [rng.randrange(vocab.text_size) for _ in range(n)]
        audio = oracle_audio(oracle, text)
        if task == "tts":
            ids = (
                [vocab.user]
                + text
                + [vocab.assistant, vocab.audio_begin]
                + audio
                + [vocab.audio_end, vocab.eos]
            )
        elif task == "asr":
            ids = (
                [vocab.user, vocab.audio_begin]
                + audio
                + [vocab.audio_end, vocab.assistant]
                + text
                + [vocab.eos]
            )
        else:  # sqa: audio question, the assistant echoes text + audio interleaved
            body = interleave_streams(text, audio, vocab, sqa_layout)
            ids = (
                [vocab.user, vocab.audio_begin]
                + audio
                + [vocab.audio_end, vocab.assistant]
                + body
                + [vocab.eos]
            )
        samples.append(_finish(task, ids, text, vocab))
    return samples


def save_corpus(samples: Iterable[Sample], path: str) -> None:
    with open(path, "w") as f:
        for s in samples:
            rec = {"role": s.task, "ids": s.ids, "kinds": [k.value for k in s.kinds]}
            f.write(json.dumps(rec) + "\n")


def load_corpus(path: str, vocab: JointVocab) -> list[Sample]:
    samples = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            ids = rec["ids"]
            kinds = [TokenKind(k) for k in rec["kinds"]]
            text = _recover_text(rec["role"], ids, kinds, vocab)
            samples.append(
                Sample(rec["role"], ids, kinds, _loss_mask_after_assistant(ids, vocab), text)
            )
    return samples


def _recover_text(
    task: str, ids: Sequence[int], kinds: Sequence[TokenKind], vocab: JointVocab
) -> list[int]:
    if task == "tts":
        # text lives in the user span
        end = ids.index(vocab.assistant)
        return [t for t in ids[:end] if vocab.is_text(t)]
    # asr/sqa: text lives in the assistant span
    start = ids.index(vocab.assistant)
    return [t for t in ids[start:] if vocab.is_text(t)]
