"""Four-stage training pipeline for the backbone and the cascade modules.

Stage 1 teaches the backbone the joint text/audio distribution; stage 2
trains the first cascade module (initialized from the backbone's final
block, inputs gradient-detached); stage 3 clones it into the full cascade
and trains every offset; stage 4 fine-tunes on interleaved dialogue data.
The backbone keeps its own LM loss in every stage; detachment only blocks
gradients that originate in a cascade module's loss.
"""

from __future__ import annotations

import copy
import csv
import math
import random
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, TokencastError
from .model import ModelConfig, Session, SpeechModel, causal_segment_mask
from .scheduler import ChunkRule, run_schedule
from .vocab import (
    AUDIO_KINDS,
    JointVocab,
    OracleSpec,
    Sample,
    TokenKind,
    oracle_audio,
)

PAD_SEGMENT = -1


class TrainingDiverged(TokencastError):
    pass


@dataclass
class StageConfig:
    stage: int
    steps: int = 1000
    batch_windows: int = 2
    window: int = 256
    lr_backbone: float = 3e-4
    lr_mctp: float = 6e-4
    weight_decay: float = 0.01
    warmup_frac: float = 0.03
    data_mix: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    target_acc: Optional[float] = None  # early stop once held-out accuracy reaches this
    eval_every: int = 50
    eval_windows: int = 8
    chained: bool = True  # cascade modules consume the previous module's hidden/token
    metrics_csv: Optional[str] = None

    def __post_init__(self) -> None:
        if not 1 <= self.stage <= 4:
            raise ConfigError(f"stage must be 1..4, got {self.stage}")


@dataclass
class MctpLoss:
    backbone_loss: torch.Tensor
    per_module: list[torch.Tensor]
    weights: list[float]

    @property
    def total(self) -> torch.Tensor:
        t = self.backbone_loss
        for w, l in zip(self.weights, self.per_module):
            t = t + w * l
        return t


@dataclass
class TrainReport:
    stage: int
    steps_run: int
    history: list[dict]
    final_eval: dict


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


class BatchSampler:
    """Draws samples by task mix and packs them into fixed training windows."""

    def __init__(
        self,
        samples: Sequence[Sample],
        mix: dict[str, float],
        window: int,
        batch_windows: int,
        vocab: JointVocab,
        seed: int,
    ):
        by_task: dict[str, list[Sample]] = {}
        for s in samples:
            by_task.setdefault(s.task, []).append(s)
        self.tasks = [t for t in sorted(mix) if mix[t] > 0 and by_task.get(t)]
        if not self.tasks:
            raise ConfigError("data mix selects no available samples")
        self.weights = [mix[t] for t in self.tasks]
        self.by_task = by_task
        self.window = window
        self.batch_windows = batch_windows
        self.vocab = vocab
        self.rng = random.Random(seed)

    def draw(self) -> Sample:
        task = self.rng.choices(self.tasks, self.weights)[0]
        pool = self.by_task[task]
        return pool[self.rng.randrange(len(pool))]

    def next_batch(self) -> dict[str, torch.Tensor]:
        B, L = self.batch_windows, self.window
        ids = torch.full((B, L), self.vocab.pad, dtype=torch.long)
        positions = torch.zeros((B, L), dtype=torch.long)
        segments = torch.full((B, L), PAD_SEGMENT, dtype=torch.long)
        loss_mask = torch.zeros((B, L), dtype=torch.bool)
        for b in range(B):
            at = 0
            seg = 0
            while True:
                s = self.draw()
                if len(s) > L:
                    continue
                if at + len(s) > L:
                    break
                n = len(s)
                ids[b, at : at + n] = torch.tensor(s.ids)
                positions[b, at : at + n] = torch.arange(n)
                segments[b, at : at + n] = seg
                loss_mask[b, at : at + n] = torch.tensor(s.loss_mask)
                at += n
                seg += 1
        return {
            "ids": ids,
            "positions": positions,
            "segments": segments,
            "loss_mask": loss_mask,
        }


def _shift(x: torch.Tensor, k: int, fill: int) -> torch.Tensor:
    if k == 0:
        return x
    out = torch.full_like(x, fill)
    out[:, :-k] = x[:, k:]
    return out


def _audio_target(ids: torch.Tensor, vocab: JointVocab) -> torch.Tensor:
    return (
        ((ids >= vocab.audio_start) & (ids < vocab.audio_start + vocab.audio_size))
        | (ids == vocab.audio_begin)
        | (ids == vocab.audio_end)
    )


def compute_losses(
    model: SpeechModel,
    batch: dict[str, torch.Tensor],
    modules: Sequence[int],
    chained: bool = True,
    mctp_weights: Optional[Sequence[float]] = None,
) -> tuple[MctpLoss, dict]:
    """Teacher-forced losses: backbone next-token plus per-offset module CE.

    Module i (1-based) consumes the detached hidden state of the previous
    producer and ground-truth token t+i, and is scored on token t+1+i.
    """
    ids, positions, segments, loss_mask = (
        batch["ids"],
        batch["positions"],
        batch["segments"],
        batch["loss_mask"],
    )
    vocab = model.cfg.vocab
    mask = causal_segment_mask(segments, PAD_SEGMENT)
    hidden = model.forward_hidden(ids, positions, mask)
    logits = model.logits(hidden)

    def offset_valid(k: int) -> torch.Tensor:
        seg_k = _shift(segments, k, PAD_SEGMENT)
        return (seg_k == segments) & (segments != PAD_SEGMENT) & _shift(loss_mask, k, 0)

    def ce(lg: torch.Tensor, k: int) -> tuple[torch.Tensor, dict]:
        target = _shift(ids, k, vocab.pad)
        valid = offset_valid(k)
        if valid.sum() == 0:
            return lg.sum() * 0.0, {"acc": float("nan"), "n": 0}
        lg_v = lg[valid]
        tg_v = target[valid]
        loss = F.cross_entropy(lg_v.float(), tg_v)
        with torch.no_grad():
            audio_sel = _audio_target(tg_v, vocab)
            acc = (
                (lg_v.argmax(-1) == tg_v)[audio_sel].float().mean().item()
                if audio_sel.any()
                else float("nan")
            )
        return loss, {"acc": acc, "n": int(valid.sum())}

    backbone_loss, backbone_stats = ce(logits, 1)

    per_module: list[torch.Tensor] = []
    stats = {"backbone": backbone_stats, "modules": {}}
    h_prev = hidden.detach()
    for i in modules:
        if chained:
            tok = _shift(ids, i, vocab.pad)
            pos = _shift(positions, i, 0)
            seg = _shift(segments, i, PAD_SEGMENT)
            h_in = h_prev
        else:
            tok = _shift(ids, 1, vocab.pad)
            pos = _shift(positions, 1, 0)
            seg = _shift(segments, 1, PAD_SEGMENT)
            h_in = hidden.detach()
        m_i = causal_segment_mask(seg, PAD_SEGMENT)
        h_i = model.cascade_hidden(i - 1, h_in, tok, pos, m_i)
        loss_i, st = ce(model.logits(h_i), i + 1)
        per_module.append(loss_i)
        stats["modules"][i] = st
        h_prev = h_i.detach()

    n = max(len(modules), 1)
    weights = list(mctp_weights) if mctp_weights else [1.0 / n] * len(modules)
    return MctpLoss(backbone_loss, per_module, weights), stats


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@torch.no_grad()
def eval_offsets(
    model: SpeechModel,
    sampler: BatchSampler,
    modules: Sequence[int],
    n_batches: int = 4,
    chained: bool = True,
) -> dict:
    """Held-out teacher-forced audio-token accuracy per prediction offset."""
    model.eval()
    hits = {0: 0}
    tot = {0: 0}
    losses = {0: 0.0}
    for i in modules:
        hits[i], tot[i], losses[i] = 0, 0, 0.0
    for _ in range(n_batches):
        batch = sampler.next_batch()
        loss, stats = compute_losses(model, batch, modules, chained)
        _accumulate(stats["backbone"], hits, tot, 0)
        losses[0] += float(loss.backbone_loss)
        for j, i in enumerate(modules):
            _accumulate(stats["modules"][i], hits, tot, i)
            losses[i] += float(loss.per_module[j])
    model.train()
    return {
        "acc": {k: (hits[k] / tot[k] if tot[k] else float("nan")) for k in hits},
        "loss": {k: losses[k] / n_batches for k in losses},
    }


def _accumulate(st: dict, hits: dict, tot: dict, key: int) -> None:
    if not math.isnan(st["acc"]):
        hits[key] += st["acc"] * st["n"]
        tot[key] += st["n"]


# ---------------------------------------------------------------------------
# Stage runners
# ---------------------------------------------------------------------------


def _optimizer(model: SpeechModel, cfg: StageConfig, modules: Sequence[int]):
    groups = [
        {"params": list(model.backbone_parameters()), "lr": cfg.lr_backbone},
        {"params": list(model.shared_parameters()), "lr": cfg.lr_backbone},
    ]
    for i in modules:
        groups.append({"params": list(model.cascade_parameters(i - 1)), "lr": cfg.lr_mctp})
    opt = torch.optim.AdamW(groups, weight_decay=cfg.weight_decay)
    warmup = max(1, int(cfg.warmup_frac * cfg.steps))

    def lr_lambda(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        t = (step - warmup) / max(1, cfg.steps - warmup)
        return 0.5 * (1 + math.cos(math.pi * min(t, 1.0)))

    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda)
    return opt, sched


def _split_corpus(corpus: Sequence[Sample], holdout_frac: float = 0.06):
    n_hold = max(8, int(len(corpus) * holdout_frac))
    return list(corpus[:-n_hold]), list(corpus[-n_hold:])


def _target_metric(evals: dict, modules: Sequence[int]) -> float:
    keys = list(modules) if modules else [0]
    return min(evals["acc"][k] for k in keys)


def run_stage(
    model: SpeechModel,
    corpus: Sequence[Sample],
    cfg: StageConfig,
    modules: Sequence[int],
) -> TrainReport:
    torch.manual_seed(cfg.seed)
    train, hold = _split_corpus(corpus)
    mix = cfg.data_mix or {"tts": 1 / 3, "asr": 1 / 3, "sqa": 1 / 3}
    sampler = BatchSampler(train, mix, cfg.window, cfg.batch_windows, model.cfg.vocab, cfg.seed)
    eval_sampler = BatchSampler(
        hold, mix, cfg.window, cfg.eval_windows, model.cfg.vocab, cfg.seed + 1
    )
    opt, sched = _optimizer(model, cfg, modules)
    history: list[dict] = []
    writer = _MetricsWriter(cfg.metrics_csv, cfg.stage, modules) if cfg.metrics_csv else None

    model.train()
    step = 0
    for step in range(1, cfg.steps + 1):
        batch = sampler.next_batch()
        loss, stats = compute_losses(model, batch, modules, cfg.chained)
        total = loss.total
        if not torch.isfinite(total):
            raise TrainingDiverged(
                f"stage {cfg.stage}: non-finite loss at step {step}: "
                f"backbone={float(loss.backbone_loss)}, "
                f"modules={[float(l) for l in loss.per_module]}"
            )
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        sched.step()
        rec = {
            "step": step,
            "loss_total": float(total),
            "loss_backbone": float(loss.backbone_loss),
            "loss_modules": [float(l) for l in loss.per_module],
        }
        history.append(rec)
        if writer:
            writer.row(rec)
        if cfg.target_acc is not None and step % cfg.eval_every == 0:
            evals = eval_offsets(model, eval_sampler, modules, chained=cfg.chained)
            rec["eval"] = evals
            if _target_metric(evals, modules) >= cfg.target_acc:
                break
    final = eval_offsets(model, eval_sampler, modules, chained=cfg.chained)
    if writer:
        writer.close()
    return TrainReport(cfg.stage, step, history, final)


def init_first_module_from_backbone(model: SpeechModel) -> None:
    """Warm-start: cascade module 1's block(s) copy the backbone's final block."""
    final_state = model.blocks[-1].state_dict()
    for blk in model.cascade[0].blocks:
        blk.load_state_dict(copy.deepcopy(final_state))


def clone_cascade_from_first(model: SpeechModel) -> None:
    first = model.cascade[0].state_dict()
    for mod in list(model.cascade)[1:]:
        mod.load_state_dict(copy.deepcopy(first))


def stage1_train(model: SpeechModel, corpus, cfg: StageConfig) -> TrainReport:
    if cfg.stage != 1:
        raise ConfigError("stage1_train requires cfg.stage == 1")
    return run_stage(model, corpus, cfg, modules=[])


def stage2_train(model: SpeechModel, corpus, cfg: StageConfig) -> TrainReport:
    if cfg.stage != 2:
        raise ConfigError("stage2_train requires cfg.stage == 2")
    if model.cfg.n_mctp < 1:
        raise ConfigError("model has no cascade modules")
    init_first_module_from_backbone(model)
    return run_stage(model, corpus, cfg, modules=[1])


def stage3_train(model: SpeechModel, corpus, cfg: StageConfig) -> TrainReport:
    if cfg.stage != 3:
        raise ConfigError("stage3_train requires cfg.stage == 3")
    clone_cascade_from_first(model)
    return run_stage(model, corpus, cfg, modules=list(range(1, model.cfg.n_mctp + 1)))


def stage4_sft(model: SpeechModel, corpus, cfg: StageConfig) -> TrainReport:
    if cfg.stage != 4:
        raise ConfigError("stage4_sft requires cfg.stage == 4")
    return run_stage(model, corpus, cfg, modules=list(range(1, model.cfg.n_mctp + 1)))


class _MetricsWriter:
    def __init__(self, path: str, stage: int, modules: Sequence[int]):
        self.f = open(path, "w", newline="")
        self.w = csv.writer(self.f)
        self.modules = list(modules)
        self.stage = stage
        self.w.writerow(
            ["step", "stage", "loss_total", "loss_backbone"]
            + [f"loss_m{i}" for i in self.modules]
        )

    def row(self, rec: dict) -> None:
        self.w.writerow(
            [rec["step"], self.stage, f"{rec['loss_total']:.6f}", f"{rec['loss_backbone']:.6f}"]
            + [f"{l:.6f}" for l in rec["loss_modules"]]
        )

    def close(self) -> None:
        self.f.close()


# ---------------------------------------------------------------------------
# Masked-attention ablation (hidden-state sufficiency experiment)
# ---------------------------------------------------------------------------


@dataclass
class AblationReport:
    condition: str
    overall: float
    homograph: float
    non_homograph: float
    chance: float
    n_tokens: int


@torch.no_grad()
def eval_ablation(
    model: SpeechModel,
    oracle: OracleSpec,
    vocab: JointVocab,
    condition: str,
    n_prompts: int = 24,
    len_range: tuple[int, int] = (6, 12),
    seed: int = 123,
    force_homographs: bool = True,
) -> AblationReport:
    """Generate audio for text prompts under an attention-mask condition.

    Conditions: "full" keeps every text key; "aligned" keeps only the text
    position whose realization is currently pending; "notext" hides all
    text keys.  Audio-to-audio attention is never touched.
    """
    if condition not in ("full", "aligned", "notext"):
        raise ConfigError(f"unknown ablation condition {condition!r}")
    rng = random.Random(seed)
    model.eval()
    hits = {"homo": [0, 0], "plain": [0, 0]}
    homographs = oracle.homograph_set
    from .model import allowed_ids_mask

    begin_mask = allowed_ids_mask(vocab, [vocab.audio_begin])
    end_mask = allowed_ids_mask(vocab, [vocab.audio_end])
    content_mask = allowed_ids_mask(vocab, list(vocab.audio_content_ids()))

    for _ in range(n_prompts):
        n = rng.randint(*len_range)
        text = [rng.randrange(vocab.text_size) for _ in range(n)]
        if force_homographs and homographs:
            # make sure homograph positions occur in every prompt
            k = rng.randrange(1, n)
            text[k] = rng.choice(sorted(homographs))
        expected = oracle_audio(oracle, text)
        prompt = [vocab.user] + text + [vocab.assistant]
        session = Session(model, prompt)
        text_pos0 = 1  # text occupies positions 1..n
        if condition == "notext":
            session.set_masked_text_positions(lambda j: False)
        session.generate_pass(0, [begin_mask])
        for j in range(2 * n):
            if condition == "aligned":
                pending = text_pos0 + j // 2
                session.set_masked_text_positions(lambda p, q=pending: p == q)
            ev = session.generate_pass(0, [content_mask])[0]
            symbol = text[j // 2]
            bucket = "homo" if symbol in homographs else "plain"
            hits[bucket][0] += int(ev.id == expected[j])
            hits[bucket][1] += 1
        session.generate_pass(0, [end_mask])

    def rate(b):
        return hits[b][0] / hits[b][1] if hits[b][1] else float("nan")

    total = hits["homo"][0] + hits["plain"][0]
    count = hits["homo"][1] + hits["plain"][1]
    return AblationReport(
        condition=condition,
        overall=total / count,
        homograph=rate("homo"),
        non_homograph=rate("plain"),
        chance=1.0 / vocab.audio_size,
        n_tokens=count,
    )


# ---------------------------------------------------------------------------
# End-to-end interleaved generation scoring
# ---------------------------------------------------------------------------


@torch.no_grad()
def eval_end_to_end(
    model: SpeechModel,
    oracle: OracleSpec,
    vocab: JointVocab,
    n_prompts: int = 16,
    len_range: tuple[int, int] = (4, 10),
    mode: str = "boost",
    seed: int = 321,
) -> float:
    """Run the interleaved schedule on audio questions and score the emitted
    audio against the oracle realization of the emitted text."""
    rng = random.Random(seed)
    model.eval()
    total_hits = 0
    total_count = 0
    for _ in range(n_prompts):
        n = rng.randint(*len_range)
        question = [rng.randrange(vocab.text_size) for _ in range(n)]
        prompt = (
            [vocab.user, vocab.audio_begin]
            + oracle_audio(oracle, question)
            + [vocab.audio_end, vocab.assistant]
        )
        budget = 4 * n + 24
        result = run_schedule(model, prompt, mode, max_tokens=budget, allow_stop=True)
        text_ids = [e.id for e in result.events if e.kind is TokenKind.Text]
        audio_ids = [e.id for e in result.events if e.kind is TokenKind.AudioContent]
        expected = oracle_audio(oracle, text_ids) if text_ids else []
        span = max(len(expected), len(audio_ids), 1)
        hits = sum(
            1 for a, b in zip(audio_ids, expected) if a == b
        )
        total_hits += hits
        total_count += span
    return total_hits / total_count
