"""Toy decoder-only backbone plus the cascade of extra-token predictor modules.

The backbone is a standard pre-norm transformer with rotary positions and a
KV cache.  Each cascade module consumes the previous producer's hidden state
and output token, projects their concatenation back to model width, runs one
(or more) transformer blocks over its own running per-session context, and
emits one token through the shared output head.  Embedding table and output
head are shared by the backbone and every cascade module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DomainError, ScheduleError
from .vocab import JointVocab, TokenKind


@dataclass
class ModelConfig:
    vocab: JointVocab
    d_model: int = 256
    n_layers_backbone: int = 8
    n_heads: int = 4
    d_ffn: int = 1024
    n_mctp: int = 10
    blocks_per_mctp: int = 1
    max_positions: int = 4096
    rotary: bool = True

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.n_mctp < 0:
            raise ConfigError("n_mctp must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        d = {
            "d_model": self.d_model,
            "n_layers_backbone": self.n_layers_backbone,
            "n_heads": self.n_heads,
            "d_ffn": self.d_ffn,
            "n_mctp": self.n_mctp,
            "blocks_per_mctp": self.blocks_per_mctp,
            "max_positions": self.max_positions,
            "rotary": self.rotary,
            "vocab": self.vocab.to_dict(),
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["vocab"] = JointVocab.from_dict(d["vocab"])
        return ModelConfig(**d)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        dtype = x.dtype
        x = x.float()
        x = x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        return (x * self.weight).to(dtype)


def build_rope(max_positions: int, head_dim: int, theta: float = 10000.0):
    freqs = 1.0 / (theta ** (torch.arange(0, head_dim, 2).float() / head_dim))
    t = torch.arange(max_positions, dtype=torch.float32)
    angles = torch.outer(t, freqs)  # [P, hd/2]
    angles = torch.cat([angles, angles], dim=-1)  # [P, hd]
    return angles.cos(), angles.sin()


def _rotate_half(x: torch.Tensor) -> torch.Tensor:
    h = x.shape[-1] // 2
    return torch.cat([-x[..., h:], x[..., :h]], dim=-1)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: [B, H, T, hd]; cos/sin: [B, T, hd] gathered per position id
    cos = cos.unsqueeze(1)
    sin = sin.unsqueeze(1)
    return x * cos + _rotate_half(x) * sin


class LayerCache:
    """Accumulated key/value tensors for one attention layer of one session."""

    __slots__ = ("k", "v")

    def __init__(self) -> None:
        self.k: Optional[torch.Tensor] = None  # [B, H, T, hd]
        self.v: Optional[torch.Tensor] = None

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[2]

    def append(self, k: torch.Tensor, v: torch.Tensor):
        if self.k is None:
            self.k, self.v = k, v
        else:
            self.k = torch.cat([self.k, k], dim=2)
            self.v = torch.cat([self.v, v], dim=2)
        return self.k, self.v

    def truncate(self, n: int) -> None:
        if self.k is not None:
            if n == 0:
                self.k = self.v = None
            else:
                self.k = self.k[:, :, :n]
                self.v = self.v[:, :, :n]


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.head_dim
        self.wqkv = nn.Linear(cfg.d_model, 3 * cfg.d_model, bias=False)
        self.wo = nn.Linear(cfg.d_model, cfg.d_model, bias=False)

    def forward(self, x, cos, sin, mask, cache: Optional[LayerCache]):
        B, T, _ = x.shape
        q, k, v = self.wqkv(x).chunk(3, dim=-1)
        q = q.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        if cos is not None:
            q = apply_rope(q, cos, sin)
            k = apply_rope(k, cos, sin)
        if cache is not None:
            k, v = cache.append(k, v)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        out = out.transpose(1, 2).reshape(B, T, -1)
        return self.wo(out)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = RMSNorm(cfg.d_model)
        self.attn = Attention(cfg)
        self.ln2 = RMSNorm(cfg.d_model)
        self.w1 = nn.Linear(cfg.d_model, cfg.d_ffn, bias=False)
        self.w2 = nn.Linear(cfg.d_ffn, cfg.d_model, bias=False)

    def forward(self, x, cos, sin, mask, cache: Optional[LayerCache] = None):
        x = x + self.attn(self.ln1(x), cos, sin, mask, cache)
        x = x + self.w2(F.gelu(self.w1(self.ln2(x))))
        return x


class CascadeModule(nn.Module):
    """One extra-token predictor: norm both inputs, concat, project, block(s)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm_h = RMSNorm(cfg.d_model)
        self.norm_e = RMSNorm(cfg.d_model)
        self.proj = nn.Linear(2 * cfg.d_model, cfg.d_model, bias=False)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.blocks_per_mctp))
        self.out_norm = RMSNorm(cfg.d_model)

    def fuse(self, h_prev: torch.Tensor, tok_emb: torch.Tensor) -> torch.Tensor:
        return self.proj(torch.cat([self.norm_h(h_prev), self.norm_e(tok_emb)], dim=-1))

    def forward(self, h_prev, tok_emb, cos, sin, mask, caches=None):
        x = self.fuse(h_prev, tok_emb)
        for j, blk in enumerate(self.blocks):
            x = blk(x, cos, sin, mask, caches[j] if caches is not None else None)
        return self.out_norm(x)


class SpeechModel(nn.Module):
    """Shared embedding/head, backbone blocks, and the cascade modules."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab.total, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers_backbone))
        self.norm_f = RMSNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab.total, bias=False)
        self.cascade = nn.ModuleList(CascadeModule(cfg) for _ in range(cfg.n_mctp))
        cos, sin = build_rope(cfg.max_positions, cfg.head_dim)
        if not cfg.rotary:
            cos = torch.ones_like(cos)
            sin = torch.zeros_like(sin)
        self.register_buffer("rope_cos", cos, persistent=False)
        self.register_buffer("rope_sin", sin, persistent=False)

    # -- parameter groups -------------------------------------------------
    def backbone_parameters(self):
        for m in (self.blocks, self.norm_f):
            yield from m.parameters()

    def shared_parameters(self):
        yield from self.embed.parameters()
        yield from self.head.parameters()

    def cascade_parameters(self, idx: int):
        yield from self.cascade[idx].parameters()

    # -- forward paths -----------------------------------------------------
    def _rope_at(self, positions: torch.Tensor):
        if positions.max() >= self.cfg.max_positions:
            raise DomainError(
                f"position {int(positions.max())} exceeds max_positions {self.cfg.max_positions}"
            )
        return self.rope_cos[positions], self.rope_sin[positions]

    def forward_hidden(
        self,
        ids: torch.Tensor,  # [B, T]
        positions: torch.Tensor,  # [B, T]
        mask: Optional[torch.Tensor],  # bool, broadcastable to [B, 1, T, K]
        caches: Optional[list[LayerCache]] = None,
    ) -> torch.Tensor:
        cos, sin = self._rope_at(positions)
        x = self.embed(ids)
        for i, blk in enumerate(self.blocks):
            x = blk(x, cos, sin, mask, caches[i] if caches is not None else None)
        return self.norm_f(x)

    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.head(hidden)

    def cascade_hidden(
        self,
        idx: int,
        h_prev: torch.Tensor,  # [B, T, d]
        tok: torch.Tensor,  # [B, T]
        positions: torch.Tensor,  # [B, T]
        mask: Optional[torch.Tensor],
        caches: Optional[list[LayerCache]] = None,
    ) -> torch.Tensor:
        if not (0 <= idx < self.cfg.n_mctp):
            raise DomainError(f"cascade module index {idx} out of range")
        cos, sin = self._rope_at(positions)
        return self.cascade[idx](h_prev, self.embed(tok), cos, sin, mask, caches)


def causal_segment_mask(segments: torch.Tensor, pad_segment: int = -1) -> torch.Tensor:
    """[B, 1, L, L] bool mask: same segment, key <= query, no padding."""
    same = (segments[:, :, None] == segments[:, None, :]) & (
        segments[:, :, None] != pad_segment
    )
    L = segments.shape[1]
    causal = torch.tril(torch.ones(L, L, dtype=torch.bool, device=segments.device))
    m = same & causal
    # sdpa dislikes rows with no visible key; let padding attend to itself
    m |= torch.eye(L, dtype=torch.bool, device=segments.device)
    return m.unsqueeze(1)


def sample_token(
    logits: torch.Tensor,
    allowed: Optional[torch.Tensor] = None,
    temperature: float = 0.0,
    generator: Optional[torch.Generator] = None,
) -> int:
    """Greedy (temperature 0) or softmax sampling restricted to allowed ids."""
    logits = logits.float()
    if allowed is not None:
        logits = logits.masked_fill(~allowed, float("-inf"))
    if temperature <= 0.0:
        return int(torch.argmax(logits).item())
    probs = F.softmax(logits / temperature, dim=-1)
    return int(torch.multinomial(probs, 1, generator=generator).item())


@dataclass
class TokenEvent:
    id: int
    kind: TokenKind
    pass_index: int  # 1-based backbone pass counter
    producer: str  # "main" | "mctp<i>"
    position: int


class Session:
    """One generation session: KV caches, transcript, per-module contexts.

    Model parameters are shared read-only; each session owns its caches and
    is single-threaded.
    """

    def __init__(
        self,
        model: SpeechModel,
        prompt_ids: Sequence[int],
        temperature: float = 0.0,
        seed: int = 0,
    ):
        self.model = model
        self.vocab = model.cfg.vocab
        self.caches = [LayerCache() for _ in model.blocks]
        self.mctp_caches = [
            [LayerCache() for _ in mod.blocks] for mod in model.cascade
        ]
        self.ids: list[int] = list(prompt_ids)
        self.kinds: list[TokenKind] = [self.vocab.kind_of(t) for t in prompt_ids]
        self.pending: list[int] = list(prompt_ids)
        self.n_absorbed = 0
        self.pass_count = 0
        self.events: list[TokenEvent] = []
        self.eos_emitted = False
        self.temperature = temperature
        self.masked_positions: set[int] = set()
        self.rng = torch.Generator().manual_seed(seed)

    @property
    def prompt_len(self) -> int:
        return len(self.ids) - len(self.events)

    # -- attention-mask control (hidden-view masking) ----------------------
    def set_masked_text_positions(self, keep: Callable[[int], bool]) -> None:
        """Hide text keys (by absolute position) from all subsequent queries."""
        self.masked_positions = {
            j
            for j, k in enumerate(self.kinds)
            if k is TokenKind.Text and not keep(j)
        }

    def clear_mask(self) -> None:
        self.masked_positions = set()

    def _incremental_mask(self, t_new: int) -> Optional[torch.Tensor]:
        k_total = self.n_absorbed + t_new
        q_pos = torch.arange(self.n_absorbed, k_total)
        k_pos = torch.arange(k_total)
        allowed = k_pos[None, :] <= q_pos[:, None]
        if self.masked_positions:
            hide = torch.tensor(sorted(self.masked_positions), dtype=torch.long)
            hide = hide[hide < k_total]
            allowed = allowed.clone()
            allowed[:, hide] = False
        return allowed.view(1, 1, t_new, k_total)

    @torch.no_grad()
    def prefill(self) -> None:
        """Absorb all but the last prompt token, so the next pass costs one token."""
        if len(self.pending) <= 1:
            return
        last = self.pending[-1]
        self.pending = self.pending[:-1]
        self.absorb_pending()
        self.pending = [last]

    # -- forward steps ------------------------------------------------------
    @torch.no_grad()
    def absorb_pending(self) -> tuple[torch.Tensor, torch.Tensor]:
        """One backbone pass over every token produced since the last pass."""
        if not self.pending:
            raise ScheduleError("nothing to absorb")
        t_new = len(self.pending)
        ids = torch.tensor([self.pending], dtype=torch.long)
        positions = torch.arange(self.n_absorbed, self.n_absorbed + t_new).view(1, -1)
        mask = self._incremental_mask(t_new)
        hidden = self.model.forward_hidden(ids, positions, mask, self.caches)
        self.n_absorbed += t_new
        self.pending = []
        logits = self.model.logits(hidden[:, -1])
        return hidden[0], logits[0]

    @torch.no_grad()
    def cascade_step(
        self, idx: int, h_prev: torch.Tensor, tok: int, position: int
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Run cascade module ``idx`` (0-based) on one (hidden, token) input."""
        h = h_prev.view(1, 1, -1)
        t = torch.tensor([[tok]], dtype=torch.long)
        pos = torch.tensor([[position]], dtype=torch.long)
        hidden = self.model.cascade_hidden(
            idx, h, t, pos, mask=None, caches=self.mctp_caches[idx]
        )
        return hidden[0, 0], self.model.logits(hidden[0, 0])

    def _emit(self, tid: int, producer: str) -> TokenEvent:
        ev = TokenEvent(
            id=tid,
            kind=self.vocab.kind_of(tid),
            pass_index=self.pass_count,
            producer=producer,
            position=len(self.ids),
        )
        self.ids.append(tid)
        self.kinds.append(ev.kind)
        self.pending.append(tid)
        self.events.append(ev)
        if ev.kind is TokenKind.Eos:
            self.eos_emitted = True
        return ev

    def generate_pass(
        self,
        n_mctp_used: int,
        slot_masks: Optional[Sequence[Optional[torch.Tensor]]] = None,
        stop_when: Optional[Callable[[int], bool]] = None,
    ) -> list[TokenEvent]:
        """One backbone pass plus a chain of ``n_mctp_used`` cascade modules.

        ``slot_masks`` restricts sampling per emitted token: entry 0 for the
        backbone token, entry i for cascade module i.
        """
        if self.eos_emitted:
            raise ScheduleError("session exhausted: eos already emitted")
        if not 0 <= n_mctp_used <= self.model.cfg.n_mctp:
            raise ScheduleError(f"n_mctp_used {n_mctp_used} out of range")
        self.pass_count += 1
        hidden, logits = self.absorb_pending()
        mask0 = slot_masks[0] if slot_masks else None
        tok = sample_token(logits, mask0, self.temperature, self.rng)
        events = [self._emit(tok, "main")]
        if self.eos_emitted or (stop_when and stop_when(tok)):
            return events
        h = hidden[-1]
        base = len(self.ids) - 1  # position of the token the backbone just sampled
        for i in range(1, n_mctp_used + 1):
            h, logits = self.cascade_step(i - 1, h, tok, base + (i - 1))
            m = slot_masks[i] if slot_masks and i < len(slot_masks) else None
            tok = sample_token(logits, m, self.temperature, self.rng)
            events.append(self._emit(tok, f"mctp{i}"))
            if self.eos_emitted or (stop_when and stop_when(tok)):
                break
        return events


@torch.no_grad()
def full_logits(model: SpeechModel, ids: Sequence[int]) -> torch.Tensor:
    """Cache-free recomputation over one contiguous sequence (oracle path)."""
    t = torch.tensor([list(ids)], dtype=torch.long)
    positions = torch.arange(len(ids)).view(1, -1)
    L = len(ids)
    mask = torch.tril(torch.ones(L, L, dtype=torch.bool)).view(1, 1, L, L)
    hidden = model.forward_hidden(t, positions, mask, caches=None)
    return model.logits(hidden)[0]


def allowed_ids_mask(vocab: JointVocab, ids: Sequence[int]) -> torch.Tensor:
    m = torch.zeros(vocab.total, dtype=torch.bool)
    m[list(ids)] = True
    return m
