"""Throughput and first-chunk latency benchmark across the four modes.

Measured numbers are validated against an analytical cost model: one pass
of the backbone costs ``t_backbone``, one cascade module call ``t_mctp``,
and the steady-state schedules determine tokens per unit cost.
"""

from __future__ import annotations

import csv
import os
import statistics
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .errors import ConfigError, MeasurementError
from .model import Session, SpeechModel
from .scheduler import ChunkRule, ScheduleResult, build_pattern, run_schedule

REPS_ENV = "TOKENCAST_BENCH_REPS"

CSV_HEADER = "mode,total_s,tok_per_s,speedup,predicted"


@dataclass
class CostModel:
    t_backbone: float  # seconds per single-token backbone pass
    t_mctp: float  # seconds per cascade module call
    reps: int
    cache_len: int

    @property
    def r(self) -> float:
        return self.t_mctp / self.t_backbone


@dataclass
class BenchReport:
    mode: str
    total_seconds: float
    tokens_emitted: int
    passes: int
    first_chunk_seconds: float
    predicted_speedup: float
    speedup_vs_vanilla: float = float("nan")
    pass_seconds: list[float] = field(default_factory=list)
    pass_sizes: list[int] = field(default_factory=list)

    @property
    def tokens_per_second(self) -> float:
        return self.tokens_emitted / self.total_seconds


def _reps(default: int = 100) -> int:
    return int(os.environ.get(REPS_ENV, default))


@torch.no_grad()
def measure_costs(
    model: SpeechModel, cache_len: int = 256, reps: Optional[int] = None, warmup: int = 10
) -> CostModel:
    """Median wall time of a single-token backbone pass and one cascade call."""
    reps = reps or _reps()
    vocab = model.cfg.vocab
    model.eval()
    prompt = [i % vocab.text_size for i in range(cache_len)]
    session = Session(model, prompt)
    session.absorb_pending()
    base = session.n_absorbed

    def timed(fn, restore) -> float:
        ts = []
        for i in range(warmup + reps):
            t0 = time.perf_counter()
            fn()
            dt = time.perf_counter() - t0
            restore()
            if i >= warmup:
                ts.append(dt)
        return statistics.median(ts)

    def backbone_once():
        session.pending = [0]
        session.absorb_pending()

    def backbone_restore():
        for c in session.caches:
            c.truncate(base)
        session.n_absorbed = base

    h = torch.zeros(model.cfg.d_model)
    mod_caches = session.mctp_caches[0] if model.cfg.n_mctp else None
    if mod_caches is not None:
        # give the module a small running context, as it has mid-stream
        for j in range(8):
            session.cascade_step(0, h, 0, j)
        ctx = mod_caches[0].length

    t_backbone = timed(backbone_once, backbone_restore)
    if model.cfg.n_mctp == 0:
        return CostModel(t_backbone, float("nan"), reps, cache_len)

    def mctp_once():
        session.cascade_step(0, h, 0, ctx)

    def mctp_restore():
        for c in mod_caches:
            c.truncate(ctx)

    t_mctp = timed(mctp_once, mctp_restore)
    resolution = time.get_clock_info("perf_counter").resolution
    if resolution > 0.01 * t_mctp:
        raise MeasurementError(
            f"timer resolution {resolution:.2e}s too coarse for t_mctp {t_mctp:.2e}s"
        )
    return CostModel(t_backbone, t_mctp, reps, cache_len)


def predict_speedup(cost: CostModel, mode: str) -> float:
    """Steady-state analytical speedup over the one-token-per-pass baseline."""
    r = cost.r
    if mode == "turbo":
        return 11.0 / (1.0 + 10.0 * r)
    if mode in ("boost", "balance"):
        # 14-token cycle: 4 backbone passes, 10 cascade calls
        return 14.0 / (4.0 + 10.0 * r)
    if mode == "vanilla":
        return 1.0
    raise ConfigError(f"unknown mode {mode!r}")


@torch.no_grad()
def run_bench(
    model: SpeechModel,
    mode: str,
    n_tokens: int,
    n_prefill: int = 32,
    cost: Optional[CostModel] = None,
    seed: int = 0,
    runs: int = 5,
) -> BenchReport:
    """Generate exactly ``n_tokens`` under one mode and time it.

    Prefill (the prompt) is processed before the clock starts; the
    first-chunk latency is measured from the start of decoding.  The
    schedule is repeated ``runs`` times and each pass's wall time is the
    median across runs, which keeps one burst of machine jitter from
    polluting the measurement (the pass structure is deterministic, so
    per-pass times line up across runs).
    """
    vocab = model.cfg.vocab
    model.eval()
    prompt = [(seed + i) % vocab.text_size for i in range(n_prefill)]
    # untimed warmup pass so allocator and kernel setup costs land outside the clock
    warm = Session(model, prompt, seed=seed)
    run_schedule(model, prompt, mode, max_tokens=len(build_pattern(mode).first_block), session=warm)

    results: list[ScheduleResult] = []
    for _ in range(max(1, runs)):
        session = Session(model, prompt, seed=seed)
        session.prefill()
        results.append(
            run_schedule(
                model,
                prompt,
                mode,
                max_tokens=n_tokens,
                chunk_rule=ChunkRule.complete_segment(),
                session=session,
            )
        )
    result = results[0]
    per_pass = [
        statistics.median(res.pass_seconds[i] for res in results)
        for i in range(result.n_passes)
    ]
    total = sum(per_pass)
    first_chunk = float("nan")
    if result.chunks:
        first_chunk = sum(per_pass[: result.chunks[0].pass_index])
    predicted = predict_speedup(cost, mode) if cost else float("nan")
    return BenchReport(
        mode=mode,
        total_seconds=total,
        tokens_emitted=len(result.events),
        passes=result.n_passes,
        first_chunk_seconds=first_chunk,
        predicted_speedup=predicted,
        pass_seconds=per_pass,
        pass_sizes=result.pass_sizes,
    )


def bench_modes(
    model: SpeechModel,
    modes: Sequence[str],
    n_tokens: int,
    n_prefill: int = 32,
    cost: Optional[CostModel] = None,
    seed: int = 0,
    runs: int = 5,
) -> list[BenchReport]:
    """Benchmark several modes with a shared token budget and baseline."""
    reports = [run_bench(model, m, n_tokens, n_prefill, cost, seed, runs) for m in modes]
    vanilla = next((r for r in reports if r.mode == "vanilla"), None)
    if vanilla is not None:
        for r in reports:
            r.speedup_vs_vanilla = r.tokens_per_second / vanilla.tokens_per_second
    return reports


def summary_table(reports: Sequence[BenchReport]) -> str:
    lines = [
        f"{'mode':<10}{'total s':>10}{'tok/s':>10}{'speedup':>10}{'predicted':>11}{'chunk ms':>10}{'passes':>8}"
    ]
    for r in reports:
        lines.append(
            f"{r.mode:<10}{r.total_seconds:>10.3f}{r.tokens_per_second:>10.1f}"
            f"{r.speedup_vs_vanilla:>10.2f}{r.predicted_speedup:>11.2f}"
            f"{r.first_chunk_seconds * 1e3:>10.1f}{r.passes:>8}"
        )
    return "\n".join(lines)


def emit_report(reports: Sequence[BenchReport], out_dir: str) -> str:
    """Write the CSV, a text summary, and the figures; return the CSV path."""
    if not reports:
        raise ConfigError("no reports to emit")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "bench.csv")
    with open(csv_path, "w", newline="") as f:
        f.write(CSV_HEADER + "\n")
        w = csv.writer(f)
        for r in reports:
            w.writerow(
                [
                    r.mode,
                    f"{r.total_seconds:.4f}",
                    f"{r.tokens_per_second:.2f}",
                    f"{r.speedup_vs_vanilla:.2f}",
                    f"{r.predicted_speedup:.2f}",
                ]
            )
    with open(os.path.join(out_dir, "bench_summary.txt"), "w") as f:
        f.write(summary_table(reports) + "\n")
    render_figures(reports, out_dir)
    return csv_path


def render_figures(reports: Sequence[BenchReport], out_dir: str) -> list[str]:
    """Speedup bars and token-generation timelines, rendered to PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    modes = [r.mode for r in reports]

    fig, ax = plt.subplots(figsize=(6, 4))
    x = range(len(reports))
    ax.bar([i - 0.2 for i in x], [r.speedup_vs_vanilla for r in reports], 0.4, label="measured")
    ax.bar([i + 0.2 for i in x], [r.predicted_speedup for r in reports], 0.4, label="predicted")
    ax.set_xticks(list(x))
    ax.set_xticklabels(modes)
    ax.set_ylabel("speedup vs vanilla")
    ax.legend()
    fig.tight_layout()
    p = os.path.join(out_dir, "speedup.png")
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(6, 4))
    for r in reports:
        t, n = 0.0, 0
        xs, ys = [0.0], [0]
        for dt, sz in zip(r.pass_seconds, r.pass_sizes):
            t += dt
            n += sz
            xs.append(t)
            ys.append(n)
        ax.plot(xs, ys, label=r.mode, drawstyle="steps-post")
    ax.set_xlabel("seconds")
    ax.set_ylabel("tokens generated")
    ax.legend()
    fig.tight_layout()
    p = os.path.join(out_dir, "timeline.png")
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return paths
