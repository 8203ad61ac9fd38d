"""Calibration run for the desk profile (throwaway; not part of the package)."""
import numpy as np, time, math
from pathlib import Path
from semcom.datasets import make_synthetic_dataset, load_dataset
from semcom.skb import make_backend, segment, verify_recovery
from semcom.asi import build_stack, build_experience_base, integrate
from semcom.training import (init_pipeline, TrainConfig, train_asi_phase, crossed_train,
                             train_asc, save_pipeline)
from semcom.evaluation import snr_sweep, psnr, run_semantic_path, run_baseline_path
from semcom.channel import ChannelConfig

root = Path("/tmp/calib"); root.mkdir(exist_ok=True)
data = root / "desk"
t_all = time.time()
if not (data / "labels.json").exists():
    make_synthetic_dataset(data, 240, (32, 32), seed=7)
train_samples = load_dataset(data, size=(32, 32))[:200]
test_samples = load_dataset(data, size=(32, 32))[200:240]
backend = make_backend("oracle", dataset_root=data)

pipe = init_pipeline(image_size=(32, 32), k_max=4, seed=0)
base = build_experience_base(train_samples, backend, ("disc", "box"), 4)
t0 = time.time()
asi_losses = train_asi_phase(base, pipe, TrainConfig(phase="asi", lr=5e-2, epochs=30, batch=16, seed=0))
print(f"[asi] {time.time()-t0:.0f}s loss {asi_losses[0]:.4f} -> {asi_losses[-1]:.5f}", flush=True)

def aware_sources(samples, pipeline):
    out = []
    for s in samples:
        segs = segment(s.image, backend, k_max=4)
        st = build_stack(s.image, segs, 4)
        out.append(integrate(st, pipeline.asi, source_id=s.image.source_id).pixels)
    return np.stack(out)

sources = aware_sources(train_samples, pipe)

tc = TrainConfig(phase="crossed", lr=2e-3, epochs=10, channel_epochs=30, batch=16,
                 snr_db_train=10.0, crossed_rounds=3, convergence_eps=0.0, seed=0)
t0 = time.time()
log, e2e = crossed_train(sources, pipe, tc)
print(f"[crossed-sem] {time.time()-t0:.0f}s e2e: {[round(v,5) for v in e2e]}", flush=True)

# ASC at two lrs
for lr in (5e-4, 1e-3):
    pp = pipe.copy()
    tc_asc = TrainConfig(phase="asc", lr=lr, epochs=8, batch=16, snr_db_train=10.0, seed=0)
    t0 = time.time()
    try:
        asc_losses, ratios, final_ratio = train_asc(sources, pp, tc_asc, mu=0.05)
        print(f"[asc lr={lr}] {time.time()-t0:.0f}s losses {[round(v,5) for v in asc_losses]} "
              f"ratios {[round(r,3) for r in ratios]} final {final_ratio:.3f}", flush=True)
        if lr == 1e-3:
            pipe_asc = pp
    except Exception as exc:
        print(f"[asc lr={lr}] FAILED: {exc}", flush=True)
try:
    pipe = pipe_asc
except NameError:
    pass

# mu=0 check on a copy
pp0 = pipe.copy()
try:
    l0, r0, fr0 = train_asc(sources, pp0, TrainConfig(phase="asc", lr=1e-3, epochs=8, batch=16, snr_db_train=10.0, seed=0), mu=0.0)
    print(f"[asc-mu0] losses {[round(v,6) for v in l0]} final ratio {fr0:.3f}", flush=True)
except Exception as exc:
    print(f"[asc-mu0] FAILED: {exc}", flush=True)

pipe_b = init_pipeline(image_size=(32, 32), k_max=4, seed=0)
raw_sources = np.stack([s.image.pixels for s in train_samples])
t0 = time.time()
log_b, e2e_b = crossed_train(raw_sources, pipe_b, tc)
print(f"[crossed-base] {time.time()-t0:.0f}s e2e: {[round(v,5) for v in e2e_b]}", flush=True)
save_pipeline(pipe, root / "semantic.npz"); save_pipeline(pipe_b, root / "baseline.npz")

t0 = time.time()
table = snr_sweep({"semantic": pipe, "baseline": pipe_b}, test_samples, [0.0, 10.0, 20.0], [0], backend, 4)
for r in table:
    print(f"[sweep] {r.variant:9s} snr={r.snr_db:4.0f} psnr={r.psnr_db:6.2f} ssim={r.ssim:.4f} "
          f"psnr_o={r.psnr_vs_original_db:6.2f} ratio={r.mask_ratio:.3f} retained={r.elements_retained}", flush=True)
print(f"[sweep] {time.time()-t0:.0f}s", flush=True)

cfg20 = ChannelConfig(kind="awgn", snr_db=20.0, seed=0)
wins = 0
for s in test_samples:
    o1 = run_semantic_path(s, pipe, cfg20, np.random.default_rng(5), backend, 4)
    o2 = run_baseline_path(s, pipe_b, cfg20, np.random.default_rng(6))
    wins += int(psnr(o1["aware"], o1["recovered"]) >= psnr(s.image, o2["recovered"]))
print(f"[crit7] semantic>=baseline at 20dB on {wins}/{len(test_samples)} images", flush=True)

n_interest = n_pass = 0
for s in test_samples[:20]:
    out = run_semantic_path(s, pipe, cfg20, np.random.default_rng(9), backend, 4)
    rep = verify_recovery(out["recovered"], out["segments"], backend, 0.5)
    for lbl, ok in zip(rep.labels, rep.preserved):
        if lbl in ("disc", "box"):
            n_interest += 1
            n_pass += int(ok)
print(f"[crit8] integrity pass {n_pass}/{n_interest} interest segments", flush=True)
print(f"TOTAL {time.time()-t_all:.0f}s", flush=True)
