"""Chat-record serialization: JSON message lists <-> token sequences.

Content strings mix space-separated decimal text ids and audio segments
written between the literal delimiters, e.g.
``"5 12 <|begin_of_audio|> 70 71 <|end_of_audio|>"``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

from .errors import DomainError
from .vocab import JointVocab, TokenKind

BEGIN_AUDIO = "<|begin_of_audio|>"
END_AUDIO = "<|end_of_audio|>"


@dataclass
class ChatMessage:
    role: str  # "user" | "assistant"
    content: str


@dataclass
class ChatRecord:
    messages: list[ChatMessage]
    partial: bool = False  # last audio segment was truncated mid-stream

    def to_json(self) -> str:
        return json.dumps(
            {"messages": [{"role": m.role, "content": m.content} for m in self.messages]}
        )

    @staticmethod
    def from_json(text: str) -> "ChatRecord":
        d = json.loads(text)
        return ChatRecord([ChatMessage(m["role"], m["content"]) for m in d["messages"]])


def _validate_roles(record: ChatRecord) -> None:
    for i, msg in enumerate(record.messages):
        expected = "user" if i % 2 == 0 else "assistant"
        if msg.role != expected:
            raise DomainError(f"message {i}: expected role {expected!r}, got {msg.role!r}")


def encode_chat(record: ChatRecord, vocab: JointVocab) -> tuple[list[int], list[bool]]:
    """Tokenize a chat record; the loss mask is true on assistant tokens only."""
    _validate_roles(record)
    ids: list[int] = []
    mask: list[bool] = []

    def emit(tid: int, train: bool) -> None:
        ids.append(tid)
        mask.append(train)

    for msg in record.messages:
        train = msg.role == "assistant"
        if not msg.content.strip():
            raise DomainError(f"empty {msg.role} content")
        emit(vocab.user if msg.role == "user" else vocab.assistant, False)
        in_audio = False
        for token in msg.content.split():
            if token == BEGIN_AUDIO:
                if in_audio:
                    raise DomainError("nested audio segment")
                in_audio = True
                emit(vocab.audio_begin, train)
            elif token == END_AUDIO:
                if not in_audio:
                    raise DomainError("unmatched end-of-audio delimiter")
                in_audio = False
                emit(vocab.audio_end, train)
            else:
                tid = int(token)
                if in_audio:
                    if not vocab.is_audio_content(tid):
                        raise DomainError(f"id {tid} is not an audio id")
                else:
                    if not vocab.is_text(tid):
                        raise DomainError(f"id {tid} is not a text id")
                emit(tid, train)
        if in_audio:
            raise DomainError("dangling audio segment in content")
    emit(vocab.eos, True)
    return ids, mask


def decode_chat(tokens: Sequence[int], vocab: JointVocab) -> ChatRecord:
    """Inverse of :func:`encode_chat`; tolerant of a truncated final segment."""
    messages: list[ChatMessage] = []
    parts: list[str] = []
    role: str | None = None
    partial = False

    def flush() -> None:
        nonlocal parts
        if role is not None:
            messages.append(ChatMessage(role, " ".join(parts)))
        parts = []

    in_audio = False
    for tid in tokens:
        kind = vocab.kind_of(tid)
        if kind is TokenKind.Tag:
            if in_audio:
                raise DomainError("role tag inside audio segment")
            flush()
            role = "user" if tid == vocab.user else "assistant"
        elif kind is TokenKind.Eos:
            break
        elif kind is TokenKind.Pad:
            continue
        elif kind is TokenKind.AudioBegin:
            in_audio = True
            parts.append(BEGIN_AUDIO)
        elif kind is TokenKind.AudioEnd:
            in_audio = False
            parts.append(END_AUDIO)
        else:
            parts.append(str(tid))
    if in_audio:
        parts.append(END_AUDIO)
        partial = True
    flush()
    rec = ChatRecord(messages, partial=partial)
    return rec


def sample_to_record(ids: Sequence[int], vocab: JointVocab) -> ChatRecord:
    """Convenience view of a corpus sample as a chat record."""
    return decode_chat(ids, vocab)
