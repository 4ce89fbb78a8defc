"""Token-stream grammars and producer assignment for the four inference modes.

A mode is a declarative pattern: an opening block of token-kind slots, a
repeating cycle block, and a producer rule deciding which slots the backbone
fills versus the cascade modules.  Slot kinds are enforced by masking logits
before sampling, so kind conformance holds for any model, trained or not.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .errors import ConfigError, ScheduleError
from .model import Session, SpeechModel, TokenEvent, allowed_ids_mask
from .vocab import AUDIO_KINDS, JointVocab, TokenKind

MODES = ("turbo", "boost", "balance", "vanilla")

_T = TokenKind.Text
_B = TokenKind.AudioBegin
_C = TokenKind.AudioContent
_E = TokenKind.AudioEnd

# Turbo/Boost share one stream; Balance/Vanilla share the other.
_FAST_FIRST = [_T, _B] + [_C] * 8 + [_E]
_RATIO_FIRST = [_T, _B, _C, _C, _E, _T, _T, _T, _B] + [_C] * 6 + [_E]
_CYCLE = [_T] * 4 + [_B] + [_C] * 8 + [_E]


@dataclass(frozen=True)
class SchedulePattern:
    name: str
    first_block: tuple[TokenKind, ...]
    cycle_block: tuple[TokenKind, ...]
    producer_rule: str  # FillAllSlots | MainTextMctpAudio | MainOnly

    def slot(self, index: int) -> TokenKind:
        if index < len(self.first_block):
            return self.first_block[index]
        return self.cycle_block[(index - len(self.first_block)) % len(self.cycle_block)]


@dataclass
class PassPlan:
    pass_index: int
    main_slot: TokenKind
    mctp_slots: tuple[TokenKind, ...]

    @property
    def width(self) -> int:
        return 1 + len(self.mctp_slots)


@dataclass
class ChunkRule:
    kind: str  # "complete_segment" | "min_content"
    n: int = 0

    @staticmethod
    def complete_segment() -> "ChunkRule":
        return ChunkRule("complete_segment")

    @staticmethod
    def min_content(n: int) -> "ChunkRule":
        return ChunkRule("min_content", n)


@dataclass
class ChunkEvent:
    content: list[int]
    pass_index: int


@dataclass
class DelayReport:
    audio_token_delay: Optional[int]
    audio_generation_delay: Optional[int]
    chunk_rule: ChunkRule


@dataclass
class ScheduleResult:
    mode: str
    events: list[TokenEvent]
    delay: DelayReport
    chunks: list[ChunkEvent]
    pass_sizes: list[int]
    pass_seconds: list[float]
    truncated: bool
    session: Session

    @property
    def n_passes(self) -> int:
        return len(self.pass_sizes)

    @property
    def total_seconds(self) -> float:
        return sum(self.pass_seconds)


def build_pattern(mode: str) -> SchedulePattern:
    if mode == "turbo":
        return SchedulePattern("turbo", tuple(_FAST_FIRST), tuple(_CYCLE), "FillAllSlots")
    if mode == "boost":
        return SchedulePattern("boost", tuple(_FAST_FIRST), tuple(_CYCLE), "MainTextMctpAudio")
    if mode == "balance":
        return SchedulePattern(
            "balance", tuple(_RATIO_FIRST), tuple(_CYCLE), "MainTextMctpAudio"
        )
    if mode == "vanilla":
        return SchedulePattern("vanilla", tuple(_RATIO_FIRST), tuple(_CYCLE), "MainOnly")
    raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")


def next_pass(
    pattern: SchedulePattern,
    cursor: int,
    n_mctp: int = 10,
    budget: Optional[int] = None,
    pass_index: int = 1,
) -> PassPlan:
    """Plan one forward pass starting at the given stream position."""
    limit = n_mctp if budget is None else min(n_mctp, budget - 1)
    if limit < 0:
        raise ScheduleError("budget must allow at least the main token")
    main = pattern.slot(cursor)
    mctp: list[TokenKind] = []
    if pattern.producer_rule == "FillAllSlots":
        mctp = [pattern.slot(cursor + 1 + i) for i in range(limit)]
    elif pattern.producer_rule == "MainTextMctpAudio":
        if main is not _T:
            raise ScheduleError(
                f"schedule corruption: main producer at non-text slot {main} (cursor {cursor})"
            )
        while len(mctp) < limit and pattern.slot(cursor + 1 + len(mctp)) in AUDIO_KINDS:
            mctp.append(pattern.slot(cursor + 1 + len(mctp)))
    elif pattern.producer_rule == "MainOnly":
        mctp = []
    else:
        raise ConfigError(f"unknown producer rule {pattern.producer_rule}")
    return PassPlan(pass_index, main, tuple(mctp))


def _slot_mask(
    vocab: JointVocab, slot: TokenKind, allow_stop: bool, is_main: bool
) -> torch.Tensor:
    if slot is _T:
        ids = list(vocab.text_ids())
        if allow_stop and is_main:
            ids.append(vocab.eos)
    elif slot is _C:
        ids = list(vocab.audio_content_ids())
        if allow_stop:
            ids.append(vocab.audio_end)
    elif slot is _B:
        ids = [vocab.audio_begin]
    elif slot is _E:
        ids = [vocab.audio_end]
    else:
        raise ScheduleError(f"no sampling mask for slot kind {slot}")
    return allowed_ids_mask(vocab, ids)


def _skip_past_segment_end(pattern: SchedulePattern, cursor: int) -> int:
    while pattern.slot(cursor) is not _E:
        cursor += 1
    return cursor + 1


def run_schedule(
    model: SpeechModel,
    prompt_ids: Sequence[int],
    mode: str,
    max_tokens: int,
    temperature: float = 0.0,
    seed: int = 0,
    allow_stop: bool = False,
    chunk_rule: Optional[ChunkRule] = None,
    session: Optional[Session] = None,
) -> ScheduleResult:
    """Drive a session through a mode's stream grammar.

    ``allow_stop`` additionally permits the backbone to emit EOS at a text
    slot and the cascade to close an audio segment early; either deviation
    truncates the stream (the bracket invariant is exempted on the final
    segment).
    """
    pattern = build_pattern(mode)
    if max_tokens < len(pattern.first_block):
        raise ConfigError(
            f"max_tokens {max_tokens} below first block length {len(pattern.first_block)}"
        )
    chunk_rule = chunk_rule or ChunkRule.complete_segment()
    vocab = model.cfg.vocab
    if session is None:
        session = Session(model, prompt_ids, temperature=temperature, seed=seed)
    n_mctp = model.cfg.n_mctp

    mask_cache: dict[tuple[TokenKind, bool], torch.Tensor] = {}

    def cached_mask(slot: TokenKind, is_main: bool) -> torch.Tensor:
        key = (slot, is_main)
        if key not in mask_cache:
            mask_cache[key] = _slot_mask(vocab, slot, allow_stop, is_main)
        return mask_cache[key]

    cursor = 0
    emitted = 0
    truncated = False
    pass_sizes: list[int] = []
    pass_seconds: list[float] = []
    while emitted < max_tokens and not session.eos_emitted:
        plan = next_pass(
            pattern, cursor, n_mctp, budget=max_tokens - emitted, pass_index=session.pass_count + 1
        )
        slots = [plan.main_slot, *plan.mctp_slots]
        masks = [cached_mask(s, i == 0) for i, s in enumerate(slots)]
        state = {"i": 0}

        def deviates(tid: int) -> bool:
            slot = slots[state["i"]]
            state["i"] += 1
            return vocab.kind_of(tid) is not slot

        t0 = time.perf_counter()
        events = session.generate_pass(len(plan.mctp_slots), masks, stop_when=deviates)
        pass_seconds.append(time.perf_counter() - t0)
        pass_sizes.append(len(events))
        emitted += len(events)
        # reconcile the cursor with what was actually emitted
        for ev, slot in zip(events, slots):
            if ev.kind is slot:
                cursor += 1
            elif ev.kind is TokenKind.Eos:
                truncated = True
                break
            elif ev.kind is _E and slot is _C:
                cursor = _skip_past_segment_end(pattern, cursor)
                truncated = True
                break
            else:  # pragma: no cover - masks make this unreachable
                raise ScheduleError(f"emitted {ev.kind} at {slot} slot")

    gen_events = session.events
    chunks = stream_chunks(gen_events, chunk_rule)
    delay = DelayReport(
        audio_token_delay=_first_pass(gen_events, lambda e: e.kind in AUDIO_KINDS),
        audio_generation_delay=(chunks[0].pass_index - 1) if chunks else None,
        chunk_rule=chunk_rule,
    )
    return ScheduleResult(
        mode, gen_events, delay, chunks, pass_sizes, pass_seconds, truncated, session
    )


def _first_pass(events, pred) -> Optional[int]:
    for e in events:
        if pred(e):
            return e.pass_index - 1
    return None


def stream_chunks(events: Sequence[TokenEvent], rule: ChunkRule) -> list[ChunkEvent]:
    """Assemble audio-chunk events from a generated transcript."""
    out: list[ChunkEvent] = []
    if rule.kind == "complete_segment":
        open_seg: Optional[list[int]] = None
        for e in events:
            if e.kind is TokenKind.AudioBegin:
                open_seg = []
            elif e.kind is TokenKind.AudioContent and open_seg is not None:
                open_seg.append(e.id)
            elif e.kind is TokenKind.AudioEnd and open_seg is not None:
                out.append(ChunkEvent(open_seg, e.pass_index))
                open_seg = None
        return out
    if rule.kind == "min_content":
        if rule.n <= 0:
            raise ConfigError("min_content threshold must be positive")
        acc: list[int] = []
        for e in events:
            if e.kind is TokenKind.AudioContent:
                acc.append(e.id)
                if len(acc) >= rule.n:
                    out.append(ChunkEvent(acc, e.pass_index))
                    acc = []
        return out
    raise ConfigError(f"unknown chunk rule {rule.kind!r}")


def pattern_check(
    kinds: Sequence[TokenKind],
    mode: str,
    allow_truncation: bool = True,
) -> bool:
    """Validate a kind sequence against a mode's stream grammar.

    With truncation allowed, an audio segment may close early once (no
    segment may open afterwards) and the stream may end with EOS at a text
    slot.
    """
    pattern = build_pattern(mode)
    cursor = 0
    early_closed = False
    for i, kind in enumerate(kinds):
        slot = pattern.slot(cursor)
        if kind is slot:
            if kind is _B and early_closed:
                return False
            cursor += 1
        elif allow_truncation and kind is TokenKind.Eos and slot is _T:
            return i == len(kinds) - 1
        elif allow_truncation and kind is _E and slot is _C:
            cursor = _skip_past_segment_end(pattern, cursor)
            early_closed = True
        else:
            return False
    return True


def export_transcript(events: Sequence[TokenEvent], path: str) -> None:
    """Line-delimited transcript records: pass, producer, id, kind."""
    with open(path, "w") as f:
        for e in events:
            f.write(
                json.dumps(
                    {"pass": e.pass_index, "producer": e.producer, "id": e.id, "kind": e.kind.value}
                )
                + "\n"
            )
