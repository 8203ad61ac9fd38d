"""Command-line entry points: segment, train, eval, transmit, report.

Every command reads one JSON config (see :mod:`semcom.config`), accepts
dotted ``--set key=value`` scalar overrides, and writes its artifacts
plus a ``manifest.json`` (config digest, seeds, checkpoint hashes, output
hashes) under the output directory.  Exit status is 0 exactly when all
requested artifacts were written.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation
from .asi import build_experience_base, build_stack, human_select, integrate
from .channel import ChannelConfig
from .checkpoint import file_sha256
from .config import ConfigError, RunConfig, load_run_config, parse_override_value
from .datasets import load_dataset, load_sample
from .evaluation import bit_account, emit_curves, snr_sweep
from .images import load_image, save_image
from .skb import make_backend, segment, verify_recovery
from .training import (PipelineParams, TrainConfig, crossed_train, encode_dataset,
                       eval_e2e_loss, init_pipeline, load_pipeline, save_pipeline,
                       trace_rows, train_asc, train_asi_phase, train_channel_phase,
                       train_semantic_phase, write_trace)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage={stage}: {cause}")
        self.stage = stage


def _backend_from_config(cfg: RunConfig):
    if cfg.backend == "oracle":
        return make_backend("oracle", dataset_root=cfg.dataset_dir,
                            content_threshold=cfg.content_threshold)
    if cfg.backend == "foundation-adapter":
        return make_backend("foundation-adapter", command=cfg.adapter_command)
    return make_backend(cfg.backend)


def _fresh_pipeline(cfg: RunConfig) -> PipelineParams:
    return init_pipeline(image_size=cfg.image_size, channels=3, k_max=cfg.k_max,
                         widths=cfg.model.widths, mask_hidden=cfg.model.mask_hidden,
                         channel_hidden=cfg.model.channel_hidden, seed=cfg.seed)


def _semantic_aware_sources(samples, pipeline, cfg: RunConfig, backend) -> np.ndarray:
    out = []
    for s in samples:
        segs = segment(s.image, backend, k_max=cfg.k_max)
        stack = build_stack(s.image, segs, cfg.k_max)
        out.append(integrate(stack, pipeline.asi, source_id=s.image.source_id).pixels)
    return np.stack(out)


def _write_manifest(out_dir: Path, verb: str, cfg: RunConfig, artifacts: list[Path],
                    checkpoint_hashes: dict, durations: dict) -> Path:
    manifest = {
        "verb": verb,
        "config_digest": cfg.digest(),
        "config": cfg.as_dict(),
        "seed": cfg.seed,
        "checkpoint_hashes": checkpoint_hashes,
        "artifacts": {p.name: file_sha256(p) for p in artifacts},
        "durations_s": durations,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# segment
# ---------------------------------------------------------------------------

def cmd_segment(cfg: RunConfig, image_path: str, checkpoint: str | None = None,
                select: str | None = None) -> int:
    t0 = time.time()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image = load_image(image_path, size=cfg.image_size)
    backend = _backend_from_config(cfg)
    segs = segment(image, backend, k_max=cfg.k_max)

    artifacts = []
    index_lines = []
    for i, m in enumerate(segs.masks):
        mask_name = f"mask_{i:02d}.png"
        save_image(m.mask.astype(np.float64)[:, :, None], out_dir / mask_name)
        artifacts.append(out_dir / mask_name)
        index_lines.append(json.dumps({"mask_path": mask_name, "label": m.label,
                                       "score": m.score}, sort_keys=True))
    (out_dir / "index.jsonl").write_text("\n".join(index_lines) + "\n")
    artifacts.append(out_dir / "index.jsonl")

    pipeline = load_pipeline(checkpoint) if checkpoint else _fresh_pipeline(cfg)
    stack = build_stack(image, segs, cfg.k_max)
    if select is not None:
        bits = np.array([int(v) for v in select.split(",")], dtype=np.uint8)
        preview = human_select(stack, bits, source_id=image.source_id)
    else:
        preview = integrate(stack, pipeline.asi, source_id=image.source_id)
    save_image(preview, out_dir / "preview.png")
    artifacts.append(out_dir / "preview.png")

    hashes = {"init": file_sha256(checkpoint)} if checkpoint else {}
    _write_manifest(out_dir, "segment", cfg, artifacts, hashes,
                    {"total": time.time() - t0})
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig, phase: str, init_from: str | None = None,
              limit: int | None = None) -> int:
    t0 = time.time()
    if phase == "asc" and init_from is None:
        raise ConfigError("missing prerequisite checkpoint for phase 'asc': "
                          "pass --init-from <trained SC checkpoint>")
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pipeline = load_pipeline(init_from) if init_from else _fresh_pipeline(cfg)
    tc = cfg.train
    samples = load_dataset(cfg.dataset_dir, size=cfg.image_size)
    if limit:
        samples = samples[:limit]
    if not samples:
        raise ConfigError(f"no annotated samples under {cfg.dataset_dir!r}")
    backend = _backend_from_config(cfg)

    trace_path = out_dir / "loss_trace.csv"
    trace_path.unlink(missing_ok=True)
    artifacts = []

    snap_cb = None
    if cfg.checkpoint_every > 0:
        def snap_cb(epoch, _loss):
            if (epoch + 1) % cfg.checkpoint_every == 0:
                save_pipeline(pipeline, out_dir / f"epoch_{epoch + 1:04d}.npz",
                              extra_meta={"config_digest": cfg.digest(), "phase": phase})

    if phase == "asi":
        base = build_experience_base(samples, backend, cfg.interest_labels, cfg.k_max)
        losses = train_asi_phase(base, pipeline, tc)
        write_trace(trace_path, trace_rows("asi", losses, tc))
    else:
        if cfg.variant == "semantic":
            sources = _semantic_aware_sources(samples, pipeline, cfg, backend)
        else:
            sources = np.stack([s.image.pixels for s in samples])
        if phase == "channel":
            feats = encode_dataset(pipeline.codec, sources)
            losses = train_channel_phase(feats, pipeline, tc, on_epoch=snap_cb)
            write_trace(trace_path, trace_rows("channel", losses, tc))
        elif phase == "semantic":
            losses = train_semantic_phase(sources, pipeline, tc, on_epoch=snap_cb)
            write_trace(trace_path, trace_rows("semantic", losses, tc))
        elif phase == "crossed":
            round_log, e2e = crossed_train(sources, pipeline, tc, on_epoch=snap_cb)
            for entry in round_log:
                write_trace(trace_path, trace_rows(entry["phase"], entry["losses"], tc))
            log_path = out_dir / "round_log.json"
            log_path.write_text(json.dumps({"rounds": round_log, "e2e_trace": e2e},
                                           indent=2, sort_keys=True))
            artifacts.append(log_path)
        elif phase == "asc":
            losses, ratios, final_ratio = train_asc(sources, pipeline, tc, on_epoch=snap_cb)
            write_trace(trace_path, trace_rows("asc", losses, tc, ratios=ratios))
            (out_dir / "asc_summary.json").write_text(json.dumps(
                {"final_mask_ratio": final_ratio,
                 "retained_elements": int(round(final_ratio * pipeline.channel.n_symbols))},
                sort_keys=True))
            artifacts.append(out_dir / "asc_summary.json")
        else:
            raise ConfigError(f"unknown phase {phase!r}")

    ckpt_path = out_dir / "checkpoint.npz"
    save_pipeline(pipeline, ckpt_path,
                  extra_meta={"config_digest": cfg.digest(), "phase": phase,
                              "variant": cfg.variant})
    artifacts += [ckpt_path, trace_path]
    hashes = {"init": file_sha256(init_from)} if init_from else {}
    _write_manifest(out_dir, "train", cfg, artifacts, hashes, {"total": time.time() - t0})
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(cfg: RunConfig, checkpoint_paths: dict[str, str], snr_list: list[float],
             seeds: list[int] | None = None, limit: int | None = None) -> int:
    t0 = time.time()
    if not snr_list:
        raise ConfigError("empty snr list")
    if not checkpoint_paths:
        raise ConfigError("no checkpoints given (expected variant=path pairs)")
    seeds = seeds or [cfg.seed]
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoints = {name: load_pipeline(path) for name, path in checkpoint_paths.items()}
    samples = load_dataset(cfg.dataset_dir, size=cfg.image_size)
    if limit:
        samples = samples[:limit]
    backend = _backend_from_config(cfg)

    table = snr_sweep(checkpoints, samples, snr_list, seeds, backend, cfg.k_max,
                      channel_kind=cfg.channel.kind, bits_per_element=cfg.bits_per_element)

    loss_traces = {}
    for name, path in checkpoint_paths.items():
        trace_csv = Path(path).parent / "loss_trace.csv"
        if trace_csv.exists():
            import csv as _csv
            with open(trace_csv, newline="") as fh:
                loss_traces[name] = [float(r["loss"]) for r in _csv.DictReader(fh)]
    paths = emit_curves(table, out_dir, loss_traces=loss_traces or None)

    sem_rows = [r for r in table if r.variant == "semantic"] or table
    top = max(sem_rows, key=lambda r: r.snr_db)
    report = {
        "variant": top.variant,
        "snr_db": top.snr_db,
        "elements": [top.elements_original, top.elements_features, top.elements_retained],
        "bits_at_precision": top.bits_at_precision,
        "mask_ratio": top.mask_ratio,
        "bits_per_element": cfg.bits_per_element,
    }
    (out_dir / "bit_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))

    artifacts = [Path(p) for p in paths.values()] + [out_dir / "bit_report.json"]
    hashes = {name: file_sha256(path) for name, path in checkpoint_paths.items()}
    _write_manifest(out_dir, "eval", cfg, artifacts, hashes, {"total": time.time() - t0})
    return 0


# ---------------------------------------------------------------------------
# transmit
# ---------------------------------------------------------------------------

def cmd_transmit(cfg: RunConfig, checkpoint: str, image_path: str) -> int:
    t0 = time.time()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pipeline = load_pipeline(checkpoint)
    backend = _backend_from_config(cfg)
    image = load_image(image_path, size=cfg.image_size)

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as exc:
            raise StageError(name, exc) from exc

    segs = stage("skb", segment, image, backend, cfg.k_max)
    stack = stage("asi", build_stack, image, segs, cfg.k_max)
    aware = stage("asi", integrate, stack, pipeline.asi, image.source_id)
    from .codec import mask_features, semantic_decode, semantic_encode
    from .channel import channel_decode, channel_encode, transmit as channel_transmit
    feats = stage("semantic-encoder", semantic_encode, aware, pipeline.codec)
    masked, mask = stage("mask", mask_features, feats, pipeline.codec)
    symbols = stage("channel-encoder", channel_encode, masked, pipeline.channel)
    received = stage("channel", channel_transmit, symbols, cfg.channel)
    fhat = stage("channel-decoder", channel_decode, received, pipeline.channel)
    recovered = stage("semantic-decoder", semantic_decode, fhat, pipeline.codec,
                      image.source_id)
    report = stage("skb-verify", verify_recovery, recovered, segs, backend,
                   cfg.integrity_threshold)

    save_image(recovered, out_dir / "recovered.png")
    integrity = {
        "threshold": report.threshold,
        "segments": [
            {"label": lbl, "iou": iou_v, "preserved": ok}
            for lbl, iou_v, ok in zip(report.labels, report.per_segment_iou, report.preserved)
        ],
        "pass_fraction": report.pass_fraction(),
    }
    (out_dir / "integrity.json").write_text(json.dumps(integrity, indent=2, sort_keys=True))
    bits = bit_account(image, feats, mask, cfg.bits_per_element)
    (out_dir / "bit_report.json").write_text(json.dumps(bits.as_dict(), indent=2, sort_keys=True))

    artifacts = [out_dir / "recovered.png", out_dir / "integrity.json", out_dir / "bit_report.json"]
    _write_manifest(out_dir, "transmit", cfg, artifacts,
                    {"checkpoint": file_sha256(checkpoint)}, {"total": time.time() - t0})
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(cfg: RunConfig, metrics_csv: str, trace_csv: str | None = None) -> int:
    t0 = time.time()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = evaluation.read_metrics_csv(metrics_csv)
    loss_traces = None
    if trace_csv:
        import csv as _csv
        with open(trace_csv, newline="") as fh:
            loss_traces = {"train": [float(r["loss"]) for r in _csv.DictReader(fh)]}
    paths = emit_curves(table, out_dir, loss_traces=loss_traces)
    artifacts = [Path(p) for p in paths.values()]
    _write_manifest(out_dir, "report", cfg, artifacts, {}, {"total": time.time() - t0})
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", required=True, help="path to the JSON run config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a scalar config field, e.g. train.lr=0.01")
    p.add_argument("--output-dir", help="override output_dir")


def _collect_overrides(args) -> dict:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = parse_override_value(value)
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semcom",
                                     description="segmentation-aware semantic communication pipeline")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("segment", help="segment one image and preview the integration")
    _add_common(p)
    p.add_argument("image", help="image file to segment")
    p.add_argument("--checkpoint", help="pipeline checkpoint for attention params")
    p.add_argument("--select", help="comma-separated binary selection for the human prompt path")

    p = sub.add_parser("train", help="run one training phase")
    _add_common(p)
    p.add_argument("phase", choices=["asi", "channel", "semantic", "crossed", "asc"])
    p.add_argument("--init-from", help="checkpoint to start from")
    p.add_argument("--limit", type=int, help="use only the first N dataset samples")

    p = sub.add_parser("eval", help="SNR sweep over trained checkpoints")
    _add_common(p)
    p.add_argument("--checkpoint", action="append", default=[], metavar="VARIANT=PATH",
                   help="variant=path pair; repeatable (semantic=..., baseline=...)")
    p.add_argument("--snr", required=True, help="comma-separated SNR list in dB")
    p.add_argument("--seeds", default=None, help="comma-separated seeds")
    p.add_argument("--limit", type=int, help="use only the first N dataset samples")

    p = sub.add_parser("transmit", help="run the full pipeline on one image")
    _add_common(p)
    p.add_argument("image", help="image file to transmit")
    p.add_argument("--checkpoint", required=True, help="full pipeline checkpoint")

    p = sub.add_parser("report", help="re-render plots from an existing metrics CSV")
    _add_common(p)
    p.add_argument("--metrics", required=True, help="metrics.csv from a previous eval")
    p.add_argument("--trace", help="loss_trace.csv for the loss panel")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, _collect_overrides(args))
        if args.verb == "segment":
            return cmd_segment(cfg, args.image, checkpoint=args.checkpoint, select=args.select)
        if args.verb == "train":
            return cmd_train(cfg, args.phase, init_from=args.init_from, limit=args.limit)
        if args.verb == "eval":
            pairs = {}
            for item in args.checkpoint:
                if "=" not in item:
                    raise ConfigError(f"--checkpoint expects VARIANT=PATH, got {item!r}")
                name, path = item.split("=", 1)
                pairs[name] = path
            snr_list = [float(v) for v in args.snr.split(",") if v != ""]
            seeds = [int(v) for v in args.seeds.split(",")] if args.seeds else None
            return cmd_eval(cfg, pairs, snr_list, seeds=seeds, limit=args.limit)
        if args.verb == "transmit":
            return cmd_transmit(cfg, args.checkpoint, args.image)
        if args.verb == "report":
            return cmd_report(cfg, args.metrics, trace_csv=args.trace)
        raise ConfigError(f"unknown verb {args.verb!r}")
    except Exception as exc:  # CLI boundary: report and signal failure
        print(f"semcom: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
