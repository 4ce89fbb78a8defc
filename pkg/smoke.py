import torch, time
from tokencast import vocab as V, packing, formats, scheduler, bench
from tokencast.model import ModelConfig, SpeechModel, Session, full_logits, causal_segment_mask

v = V.build_vocab(64, 256)
o = V.build_oracle(v, 8, 2, 0)
samples = V.gen_corpus(o, v, 40, {"tts": 0.4, "asr": 0.4, "sqa": 0.2}, (4, 10), 0)
print("corpus ok:", len(samples), samples[0].task, len(samples[0].ids))
V.save_corpus(samples, "/tmp/c.jsonl")
back = V.load_corpus("/tmp/c.jsonl", v)
assert [s.ids for s in back] == [s.ids for s in samples]
assert [s.loss_mask for s in back] == [s.loss_mask for s in samples], "loss mask roundtrip"
print("corpus roundtrip ok")

b = packing.pack(samples, 256, v.pad)
print("packed windows:", len(b))
rec = [s for s in back if s.task == "sqa"][0]
print("sqa kinds head:", [k.value for k in rec.kinds[:12]])

torch.manual_seed(0)
cfg = ModelConfig(vocab=v, d_model=64, n_layers_backbone=2, n_heads=2, d_ffn=128, n_mctp=10)
m = SpeechModel(cfg)
m.eval()

# full-pass vs incremental equivalence
ids = [v.user, 1, 2, 3, v.assistant, 5]
s = Session(m, ids, seed=0)
h, logits_inc = s.absorb_pending()
fl = full_logits(m, ids)
print("inc vs full max err:", (logits_inc - fl[-1]).abs().max().item())
assert (logits_inc - fl[-1]).abs().max() < 1e-4

# schedule unrolls on untrained model (strict grammar)
for mode, n in [("turbo", 50), ("boost", 50), ("balance", 50), ("vanilla", 20)]:
    r = scheduler.run_schedule(m, ids, mode, n, seed=0)
    ks = [e.kind for e in r.events]
    scheduler.pattern_check(ks, mode)
    print(mode, "passes:", r.n_passes, "sizes:", r.pass_sizes[:6], "atd:", r.delay.audio_token_delay,
          "agd:", r.delay.audio_generation_delay)

cost = bench.measure_costs(m)
print(f"tiny model: t_backbone={cost.t_backbone*1e3:.3f}ms t_mctp={cost.t_mctp*1e3:.3f}ms r={cost.r:.3f}")
