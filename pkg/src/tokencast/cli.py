"""Command-line entry point: corpus generation, packing, staged training,
interleaved generation, benchmarking, ablation, and checkpoint inspection."""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys

import torch

from . import bench as bench_mod
from . import packing, scheduler, training, vocab as vocab_mod
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .errors import ConfigError, TokencastError
from .model import ModelConfig, SpeechModel


def _parse_mix(text: str) -> dict[str, float]:
    mix = {}
    for part in text.split(","):
        k, _, v = part.partition("=")
        mix[k.strip()] = float(v)
    return mix


def _load_vocab(path: str) -> vocab_mod.JointVocab:
    with open(path) as f:
        return vocab_mod.JointVocab.from_dict(json.load(f))


def _read_config(path: str | None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        cp.read(path)
    return cp


def _model_config(cp: configparser.ConfigParser, vocab: vocab_mod.JointVocab) -> ModelConfig:
    sec = cp["model"] if cp.has_section("model") else {}
    return ModelConfig(
        vocab=vocab,
        d_model=int(sec.get("d_model", 256)),
        n_layers_backbone=int(sec.get("n_layers_backbone", 8)),
        n_heads=int(sec.get("n_heads", 4)),
        d_ffn=int(sec.get("d_ffn", 1024)),
        n_mctp=int(sec.get("n_mctp", 10)),
        blocks_per_mctp=int(sec.get("blocks_per_mctp", 1)),
        max_positions=int(sec.get("max_positions", 4096)),
        rotary=str(sec.get("rotary", "true")).lower() != "false",
    )


def _stage_config(
    cp: configparser.ConfigParser, stage: int, seed: int, out_dir: str
) -> training.StageConfig:
    sec_name = f"stage{stage}"
    sec = cp[sec_name] if cp.has_section(sec_name) else {}
    mix_text = sec.get("data_mix", "")
    default_mix = (
        {"tts": 0.45, "asr": 0.45, "sqa": 0.1}
        if stage < 4
        else {"sqa": 0.9, "tts": 0.05, "asr": 0.05}
    )
    return training.StageConfig(
        stage=stage,
        steps=int(sec.get("steps", 800)),
        batch_windows=int(sec.get("batch_windows", 2)),
        window=int(sec.get("window", 256)),
        lr_backbone=float(sec.get("lr_backbone", 3e-4)),
        lr_mctp=float(sec.get("lr_mctp", 6e-4)),
        weight_decay=float(sec.get("weight_decay", 0.01)),
        data_mix=_parse_mix(mix_text) if mix_text else default_mix,
        seed=seed,
        target_acc=float(sec["target_acc"]) if "target_acc" in sec else None,
        eval_every=int(sec.get("eval_every", 50)),
        metrics_csv=os.path.join(out_dir, f"metrics_stage{stage}.csv"),
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tokencast")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", default="out")
    p.add_argument("--config", default=None, help="INI config file; flags override")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-corpus")
    g.add_argument("--n-samples", type=int, default=2000)
    g.add_argument("--mix", default="tts=0.4,asr=0.4,sqa=0.2")
    g.add_argument("--len-min", type=int, default=4)
    g.add_argument("--len-max", type=int, default=12)
    g.add_argument("--text-size", type=int, default=64)
    g.add_argument("--audio-size", type=int, default=256)
    g.add_argument("--homographs", type=int, default=8)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--sqa-layout", choices=("balance", "boost"), default="balance")

    k = sub.add_parser("pack")
    k.add_argument("--corpus", required=True)
    k.add_argument("--vocab", required=True)
    k.add_argument("--window", type=int, default=512)

    t = sub.add_parser("train")
    t.add_argument("--stage", type=int, choices=(1, 2, 3, 4), required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--vocab", required=True)
    t.add_argument("--checkpoint", default=None, help="previous stage checkpoint")

    gen = sub.add_parser("generate")
    gen.add_argument("--mode", choices=scheduler.MODES, required=True)
    gen.add_argument("--max-tokens", type=int, default=50)
    gen.add_argument("--checkpoint", default=None)
    gen.add_argument("--prompt", default=None, help="space-separated prompt ids")
    gen.add_argument("--allow-stop", action="store_true")

    b = sub.add_parser("bench")
    b.add_argument("--modes", default="all")
    b.add_argument("--tokens", type=int, default=4096)
    b.add_argument("--prefill", type=int, default=32)
    b.add_argument("--checkpoint", default=None)

    a = sub.add_parser("ablate")
    a.add_argument("--condition", choices=("full", "aligned", "notext"), required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--oracle", required=True)
    a.add_argument("--n-prompts", type=int, default=24)

    i = sub.add_parser("inspect")
    i.add_argument("checkpoint")
    return p


def _fresh_model(cp: configparser.ConfigParser, seed: int) -> SpeechModel:
    torch.manual_seed(seed)
    vocab = vocab_mod.build_vocab(64, 256)
    return SpeechModel(_model_config(cp, vocab))


def _cmd_gen_corpus(args, cp) -> int:
    os.makedirs(args.output_dir, exist_ok=True)
    vocab = vocab_mod.build_vocab(args.text_size, args.audio_size)
    oracle = vocab_mod.build_oracle(vocab, args.homographs, args.classes, args.seed)
    samples = vocab_mod.gen_corpus(
        oracle,
        vocab,
        args.n_samples,
        _parse_mix(args.mix),
        (args.len_min, args.len_max),
        args.seed,
        sqa_layout=args.sqa_layout,
    )
    vocab_mod.save_corpus(samples, os.path.join(args.output_dir, "corpus.jsonl"))
    with open(os.path.join(args.output_dir, "oracle.json"), "w") as f:
        f.write(oracle.to_json())
    with open(os.path.join(args.output_dir, "vocab.json"), "w") as f:
        json.dump(vocab.to_dict(), f)
    print(f"wrote {len(samples)} samples to {args.output_dir}/corpus.jsonl")
    return 0


def _cmd_pack(args, cp) -> int:
    os.makedirs(args.output_dir, exist_ok=True)
    vocab = _load_vocab(args.vocab)
    samples = vocab_mod.load_corpus(args.corpus, vocab)
    batches = packing.pack(samples, args.window, vocab.pad)
    out = os.path.join(args.output_dir, "packed.jsonl")
    packing.save_packed(batches, out)
    print(f"packed {len(samples)} samples into {len(batches)} windows at {out}")
    return 0


def _cmd_train(args, cp) -> int:
    os.makedirs(args.output_dir, exist_ok=True)
    vocab = _load_vocab(args.vocab)
    corpus = vocab_mod.load_corpus(args.corpus, vocab)
    if args.stage == 1:
        torch.manual_seed(args.seed)
        model = SpeechModel(_model_config(cp, vocab))
    else:
        if not args.checkpoint:
            raise ConfigError(
                f"train --stage {args.stage} requires the stage-{args.stage - 1} "
                "checkpoint via --checkpoint"
            )
        model = load_checkpoint(args.checkpoint)
    cfg = _stage_config(cp, args.stage, args.seed, args.output_dir)
    runner = {
        1: training.stage1_train,
        2: training.stage2_train,
        3: training.stage3_train,
        4: training.stage4_sft,
    }[args.stage]
    report = runner(model, corpus, cfg)
    out = os.path.join(args.output_dir, f"stage{args.stage}.ckpt")
    save_checkpoint(model, out)
    print(f"stage {args.stage}: {report.steps_run} steps, eval={report.final_eval['acc']}")
    print(f"checkpoint: {out}")
    return 0


def _cmd_generate(args, cp) -> int:
    os.makedirs(args.output_dir, exist_ok=True)
    model = load_checkpoint(args.checkpoint) if args.checkpoint else _fresh_model(cp, args.seed)
    vocab = model.cfg.vocab
    if args.prompt:
        prompt = [int(x) for x in args.prompt.split()]
    else:
        import random

        rng = random.Random(args.seed)
        text = [rng.randrange(vocab.text_size) for _ in range(8)]
        prompt = [vocab.user] + text + [vocab.assistant]
    result = scheduler.run_schedule(
        model, prompt, args.mode, args.max_tokens, seed=args.seed, allow_stop=args.allow_stop
    )
    path = os.path.join(args.output_dir, f"transcript_{args.mode}.jsonl")
    scheduler.export_transcript(result.events, path)
    print(f"{len(result.events)} tokens in {result.n_passes} passes -> {path}")
    print(
        "audio_token_delay="
        f"{result.delay.audio_token_delay} audio_generation_delay={result.delay.audio_generation_delay}"
    )
    return 0


def _cmd_bench(args, cp) -> int:
    model = load_checkpoint(args.checkpoint) if args.checkpoint else _fresh_model(cp, args.seed)
    modes = list(scheduler.MODES) if args.modes == "all" else args.modes.split(",")
    for m in modes:
        if m not in scheduler.MODES:
            raise ConfigError(f"unknown mode {m!r}")
    cost = bench_mod.measure_costs(model)
    reports = bench_mod.bench_modes(model, modes, args.tokens, args.prefill, cost, args.seed)
    csv_path = bench_mod.emit_report(reports, args.output_dir)
    print(f"t_backbone={cost.t_backbone * 1e3:.3f}ms t_mctp={cost.t_mctp * 1e3:.3f}ms r={cost.r:.3f}")
    print(bench_mod.summary_table(reports))
    print(f"csv: {csv_path}")
    return 0


def _cmd_ablate(args, cp) -> int:
    model = load_checkpoint(args.checkpoint)
    with open(args.oracle) as f:
        oracle = vocab_mod.OracleSpec.from_json(f.read())
    report = training.eval_ablation(
        model, oracle, model.cfg.vocab, args.condition, n_prompts=args.n_prompts, seed=args.seed
    )
    print(
        f"condition={report.condition} overall={report.overall:.4f} "
        f"homograph={report.homograph:.4f} non_homograph={report.non_homograph:.4f} "
        f"chance={report.chance:.4f}"
    )
    return 0


def _cmd_inspect(args, cp) -> int:
    header = read_header(args.checkpoint)
    cfg = header["config"]
    n_params = sum(
        int(torch.tensor(t["shape"]).prod()) if t["shape"] else 1 for t in header["tensors"]
    )
    print(json.dumps({k: v for k, v in cfg.items() if k != "vocab"}, indent=2))
    print(f"vocab: total={ModelConfig.from_dict(cfg).vocab.total}")
    print(f"tensors: {len(header['tensors'])}, parameters: {n_params}")
    return 0


COMMANDS = {
    "gen-corpus": _cmd_gen_corpus,
    "pack": _cmd_pack,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "bench": _cmd_bench,
    "ablate": _cmd_ablate,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        cp = _read_config(args.config)
        return COMMANDS[args.cmd](args, cp)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TokencastError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
