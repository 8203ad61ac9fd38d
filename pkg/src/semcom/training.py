"""Training regimes: attention supervision, crossed channel/semantic
optimisation, and frozen-pipeline mask training.

The crossed schedule alternates a channel phase (channel codec trained on
frozen-encoder features, maximising a mutual-information bound alongside
the reconstruction loss) with a semantic phase (semantic codec trained
through the frozen channel), halving the learning rate each round, until
the round-over-round end-to-end improvement drops below
``convergence_eps``.  Mask training runs last against the fully frozen
pipeline: both the raw and the masked features ride the same channel
noise realisation, and their decoded difference plus a sparsity pressure
``mu * mask_ratio`` drives the mask network.

Frozen modules are digest-checked bitwise before and after every phase.
Within one phase the batch order and the channel noise stream are
re-derived per epoch from the config seed, so a run is a pure function of
(config, seed, dataset).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .asi import AttentionParams, ExperienceBase, TrainingDivergence, init_attention_params, train_asi
from .channel import (ChannelConfig, ChannelParams, MIEstimatorParams, chandec_backward,
                      chandec_forward, chanenc_backward, chanenc_forward, dv_bound_backward,
                      dv_bound_forward, init_channel_params, init_mi_params, noise_variance)
from .checkpoint import load_checkpoint, params_digest, save_checkpoint
from .codec import (CodecParams, decode_backward, decode_forward, encode_backward,
                    encode_forward, init_codec_params, mask_backward, mask_forward)

MI_WEIGHT = 0.01   # weight of the mutual-information bound in the channel loss
MI_LR = 1e-3
DEFAULT_ASC_MU = 0.05
DIVERGENCE_FACTOR = 10.0


class FreezeViolation(RuntimeError):
    """A frozen module's parameters changed during a training phase."""


class DegenerateMaskError(RuntimeError):
    """The mask collapsed to all zeros for a whole epoch."""


@dataclass
class TrainConfig:
    phase: str = "crossed"
    lr: float = 1e-3
    epochs: int = 10
    batch: int = 16
    snr_db_train: float = 10.0
    crossed_rounds: int = 3
    convergence_eps: float = 1e-4
    seed: int = 0
    channel_kind: str = "awgn"
    asc_mu: float = DEFAULT_ASC_MU
    channel_epochs: int | None = None  # crossed_train: channel-phase epoch override

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.crossed_rounds < 1:
            raise ValueError(f"crossed_rounds must be >= 1, got {self.crossed_rounds}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")


@dataclass
class FreezeSet:
    frozen_module_names: list[str]
    parameter_digests: dict[str, str]

    @classmethod
    def capture(cls, pipeline: "PipelineParams", names) -> "FreezeSet":
        bundles = pipeline.bundles()
        return cls(list(names), {n: params_digest(bundles[n]) for n in names})

    def verify(self, pipeline: "PipelineParams") -> None:
        bundles = pipeline.bundles()
        for name in self.frozen_module_names:
            now = params_digest(bundles[name])
            if now != self.parameter_digests[name]:
                raise FreezeViolation(f"frozen module {name!r} changed during training")


@dataclass
class PipelineParams:
    """All trainable state of one pipeline variant."""

    asi: AttentionParams
    codec: CodecParams
    channel: ChannelParams
    mi: MIEstimatorParams
    image_size: tuple[int, int]

    def bundles(self):
        cp = self.codec.params
        return {
            "asi": self.asi.params,
            "semantic": {k: cp[k] for k in self.codec.semantic_keys()},
            "mask": {k: cp[k] for k in self.codec.mask_keys()},
            "channel": self.channel.params,
            "mi": self.mi.params,
        }

    def digests(self) -> dict[str, str]:
        return {name: params_digest(params) for name, params in self.bundles().items()}

    def copy(self) -> "PipelineParams":
        return PipelineParams(self.asi.copy(), self.codec.copy(), self.channel.copy(),
                              self.mi.copy(), tuple(self.image_size))

    def meta(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "channels": self.codec.channels,
            "widths": list(self.codec.widths),
            "mask_hidden": self.codec.mask_hidden,
            "channel_hidden": self.channel.hidden,
            "k_max": self.asi.k_max,
            "rng_seed": self.asi.rng_seed,
        }


def init_pipeline(image_size=(32, 32), channels: int = 3, k_max: int = 4,
                  widths=(32, 64), mask_hidden: int = 64, channel_hidden: int = 512,
                  seed: int = 0) -> PipelineParams:
    h, w = image_size
    if h % 4 or w % 4:
        raise ValueError(f"image size {image_size} not divisible by 4")
    feature_shape = (h // 4, w // 4, widths[1])
    n = int(np.prod(feature_shape))
    return PipelineParams(
        asi=init_attention_params(k_max, seed=seed),
        codec=init_codec_params(channels, widths, mask_hidden, seed=seed + 1),
        channel=init_channel_params(feature_shape, hidden=channel_hidden, seed=seed + 2),
        mi=init_mi_params(n, n, seed=seed + 3),
        image_size=(h, w),
    )


def save_pipeline(pipeline: PipelineParams, path, extra_meta: dict | None = None) -> None:
    meta = pipeline.meta()
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, pipeline.bundles(), meta)


def load_pipeline(path) -> PipelineParams:
    bundles, meta = load_checkpoint(path)
    pipeline = init_pipeline(image_size=tuple(meta["image_size"]), channels=meta["channels"],
                             k_max=meta["k_max"], widths=tuple(meta["widths"]),
                             mask_hidden=meta["mask_hidden"], channel_hidden=meta["channel_hidden"],
                             seed=meta.get("rng_seed", 0))
    merged = {**bundles.get("semantic", {}), **bundles.get("mask", {})}
    _load_into(pipeline.codec.params, merged, path)
    _load_into(pipeline.asi.params, bundles.get("asi", {}), path)
    _load_into(pipeline.channel.params, bundles.get("channel", {}), path)
    _load_into(pipeline.mi.params, bundles.get("mi", {}), path)
    return pipeline


def _load_into(target: nn.Params, source: dict, path) -> None:
    for key, arr in source.items():
        if key not in target or target[key].shape != arr.shape:
            raise ValueError(f"checkpoint {path}: unexpected parameter {key} {arr.shape}")
        target[key] = arr.astype(np.float64)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


def _batches(n: int, batch: int, order: np.ndarray):
    for start in range(0, n, batch):
        yield order[start:start + batch]


def encode_dataset(codec: CodecParams, images: np.ndarray, batch: int = 32) -> np.ndarray:
    """Encode (B, H, W, C) images into (B, h, w, F) features, batched."""
    outs = []
    for start in range(0, images.shape[0], batch):
        f, _ = encode_forward(codec, images[start:start + batch])
        outs.append(f)
    return np.concatenate(outs, axis=0)


def _apply_channel(y: np.ndarray, kind: str, var: float, rng: np.random.Generator) -> np.ndarray:
    """One channel realisation for (B, N) unit-power rows (shared-noise form)."""
    if kind == "rayleigh":
        g = rng.normal(0.0, np.sqrt(0.5), size=(y.shape[0], 2))
        h = np.sqrt(np.sum(g * g, axis=1, keepdims=True))
    if var == 0.0:
        return y.copy()
    noise = rng.normal(0.0, np.sqrt(var), size=y.shape)
    return y + (noise / h if kind == "rayleigh" else noise)


def _check_divergence(losses: list[float], phase: str) -> None:
    if not np.isfinite(losses[-1]):
        raise TrainingDivergence(f"{phase} loss became non-finite; trace: {losses}")
    if len(losses) > 1 and abs(losses[-1]) > DIVERGENCE_FACTOR * max(abs(losses[0]), 1e-12):
        raise TrainingDivergence(f"{phase} diverged: loss {losses[-1]} > "
                                 f"{DIVERGENCE_FACTOR}x initial {losses[0]}; trace: {losses}")


# ---------------------------------------------------------------------------
# channel phase
# ---------------------------------------------------------------------------

def train_channel_phase(features: np.ndarray, pipeline: PipelineParams, tc: TrainConfig,
                        on_epoch=None) -> list[float]:
    """Train the channel codec on frozen-encoder features.

    Per batch the objective is ``MSE(f, decode(transmit(encode(f)))) -
    MI_WEIGHT * DV bound`` between transmitted and received symbols; the
    statistics network takes one maximisation step per batch before the
    codec update.  The returned trace holds the feature-reconstruction
    MSE under a fixed validation noise stream, entry 0 before training
    and one entry per epoch after it, so a zero learning rate yields a
    constant trace.
    """
    freeze = FreezeSet.capture(pipeline, ["asi", "semantic", "mask"])
    chp, mip = pipeline.channel, pipeline.mi
    flat = features.reshape(features.shape[0], -1)
    if flat.shape[1] != chp.n_symbols:
        raise ValueError(f"feature count {flat.shape[1]} != channel width {chp.n_symbols}")
    var = noise_variance(tc.snr_db_train, 1.0)
    order = _rng(tc.seed, 2).permutation(flat.shape[0])
    opt = nn.Adam(chp.params, lr=tc.lr)
    mi_opt = nn.Adam(mip.params, lr=MI_LR)

    def eval_mse() -> float:
        y, _ = chanenc_forward(chp, flat)
        y_recv = _apply_channel(y, tc.channel_kind, var, _rng(tc.seed, 3))
        fhat, _ = chandec_forward(chp, y_recv)
        return float(np.mean((fhat - flat) ** 2))

    losses: list[float] = [eval_mse()]
    for epoch in range(tc.epochs):
        noise_rng = _rng(tc.seed, 1, epoch)
        for idx in _batches(flat.shape[0], tc.batch, order):
            x = flat[idx]
            y, enc_cache = chanenc_forward(chp, x)
            y_recv = _apply_channel(y, tc.channel_kind, var, noise_rng)
            fhat, dec_cache = chandec_forward(chp, y_recv)
            diff = fhat - x

            perm = noise_rng.permutation(len(idx))
            _, cache0 = dv_bound_forward(mip, y, y_recv, perm)
            mi_grads, _, _ = dv_bound_backward(mip, cache0)
            mi_opt.step({k: -g for k, g in mi_grads.items()})
            _, cache = dv_bound_forward(mip, y, y_recv, perm)
            _, dx_mi, dy_mi = dv_bound_backward(mip, cache)

            dfhat = 2.0 * diff / diff.size
            dy_recv, dec_grads = chandec_backward(chp, dec_cache, dfhat)
            # received symbols depend on the sent ones with identity gradient
            dy = dy_recv - MI_WEIGHT * (dx_mi + dy_mi)
            _, enc_grads = chanenc_backward(chp, enc_cache, dy)
            opt.step({**enc_grads, **dec_grads})
        losses.append(eval_mse())
        _check_divergence(losses, "channel phase")
        if on_epoch:
            on_epoch(epoch, losses[-1])
    freeze.verify(pipeline)
    return losses


# ---------------------------------------------------------------------------
# semantic phase
# ---------------------------------------------------------------------------

def _sc_forward(pipeline: PipelineParams, xb: np.ndarray, kind: str, var: float,
                rng: np.random.Generator, masked: bool = False):
    """Source batch -> recovered pre-clamp batch through the full SC path."""
    codec, chp = pipeline.codec, pipeline.channel
    f, enc_cache = encode_forward(codec, xb)
    fin = f
    mcache = None
    if masked:
        fin, _, _, mcache = mask_forward(codec, f, hard=True)
    shape3 = fin.shape
    y, ce_cache = chanenc_forward(chp, fin.reshape(fin.shape[0], -1))
    y_recv = _apply_channel(y, kind, var, rng)
    fhat, cd_cache = chandec_forward(chp, y_recv)
    out, dec_cache = decode_forward(codec, fhat.reshape(shape3))
    return out, (enc_cache, mcache, shape3, ce_cache, cd_cache, dec_cache)


def train_semantic_phase(sources: np.ndarray, pipeline: PipelineParams, tc: TrainConfig,
                         on_epoch=None) -> list[float]:
    """Train the semantic codec through the frozen channel at the training SNR.

    ``sources`` are the images the encoder actually sees (semantic-aware
    for the full pipeline, raw for the baseline variant).  The optimised
    loss is the pre-clamp MSE between source and recovered batches; the
    returned trace is that MSE under a fixed validation noise stream
    (entry 0 before training, then one entry per epoch).
    """
    freeze = FreezeSet.capture(pipeline, ["asi", "channel", "mask", "mi"])
    codec, chp = pipeline.codec, pipeline.channel
    var = noise_variance(tc.snr_db_train, 1.0)
    order = _rng(tc.seed, 2).permutation(sources.shape[0])
    sem_params = {k: codec.params[k] for k in codec.semantic_keys()}
    opt = nn.Adam(sem_params, lr=tc.lr)
    eval_x = sources[:min(96, sources.shape[0])]

    def eval_mse() -> float:
        rng = _rng(tc.seed, 3)
        total = 0.0
        for start in range(0, eval_x.shape[0], 32):
            xb = eval_x[start:start + 32]
            out, _ = _sc_forward(pipeline, xb, tc.channel_kind, var, rng)
            total += float(np.sum((out - xb) ** 2))
        return total / eval_x.size

    losses: list[float] = [eval_mse()]
    for epoch in range(tc.epochs):
        noise_rng = _rng(tc.seed, 1, epoch)
        for idx in _batches(sources.shape[0], tc.batch, order):
            xb = sources[idx]
            out, caches = _sc_forward(pipeline, xb, tc.channel_kind, var, noise_rng)
            enc_cache, _, shape3, ce_cache, cd_cache, dec_cache = caches
            diff = out - xb
            dout = 2.0 * diff / diff.size
            dfhat3, dec_grads = decode_backward(codec, dec_cache, dout)
            dy_recv = chandec_backward(chp, cd_cache, dfhat3.reshape(dfhat3.shape[0], -1))[0]
            dflat = chanenc_backward(chp, ce_cache, dy_recv)[0]
            _, enc_grads = encode_backward(codec, enc_cache, dflat.reshape(shape3))
            opt.step({**enc_grads, **dec_grads})
        losses.append(eval_mse())
        _check_divergence(losses, "semantic phase")
        if on_epoch:
            on_epoch(epoch, losses[-1])
    freeze.verify(pipeline)
    return losses


def eval_e2e_loss(sources: np.ndarray, pipeline: PipelineParams, tc: TrainConfig,
                  batch: int = 32) -> float:
    """End-to-end pre-clamp MSE with a fixed evaluation noise stream."""
    var = noise_variance(tc.snr_db_train, 1.0)
    rng = _rng(tc.seed, 3)
    total = 0.0
    for start in range(0, sources.shape[0], batch):
        xb = sources[start:start + batch]
        out, _ = _sc_forward(pipeline, xb, tc.channel_kind, var, rng)
        total += float(np.sum((out - xb) ** 2))
    return total / sources.size


# ---------------------------------------------------------------------------
# crossed training
# ---------------------------------------------------------------------------

def crossed_train(sources: np.ndarray, pipeline: PipelineParams, tc: TrainConfig,
                  on_epoch=None):
    """Alternate channel and semantic phases until convergence.

    Each round trains the channel codec first (on features of the
    then-frozen semantic encoder), then the semantic codec, with the
    learning rate halved every round.  Stops early once the end-to-end
    validation improvement falls below ``convergence_eps``.  Returns
    ``(round_log, e2e_trace)``: a log that strictly alternates
    channel/semantic entries carrying the frozen/trained digests, and the
    per-round end-to-end validation losses (index 0 is the pre-training
    loss).
    """
    round_log: list[dict] = []
    e2e_trace = [eval_e2e_loss(sources, pipeline, tc)]
    prev = e2e_trace[0]
    for rnd in range(1, tc.crossed_rounds + 1):
        lr = tc.lr * 0.5 ** (rnd - 1)
        for phase_name in ("channel", "semantic"):
            before = pipeline.digests()
            epochs = tc.epochs
            if phase_name == "channel" and tc.channel_epochs is not None:
                epochs = tc.channel_epochs
            phase_tc = TrainConfig(phase=phase_name, lr=lr, epochs=epochs, batch=tc.batch,
                                   snr_db_train=tc.snr_db_train, crossed_rounds=tc.crossed_rounds,
                                   convergence_eps=tc.convergence_eps,
                                   seed=tc.seed + rnd, channel_kind=tc.channel_kind,
                                   asc_mu=tc.asc_mu)
            if phase_name == "channel":
                feats = encode_dataset(pipeline.codec, sources)
                phase_losses = train_channel_phase(feats, pipeline, phase_tc, on_epoch=on_epoch)
            else:
                phase_losses = train_semantic_phase(sources, pipeline, phase_tc, on_epoch=on_epoch)
            round_log.append({
                "round": rnd,
                "phase": phase_name,
                "lr": lr,
                "losses": phase_losses,
                "digests_before": before,
                "digests_after": pipeline.digests(),
            })
        e2e = eval_e2e_loss(sources, pipeline, tc)
        e2e_trace.append(e2e)
        improvement = prev - e2e
        prev = e2e
        if improvement < tc.convergence_eps:
            break
    return round_log, e2e_trace


# ---------------------------------------------------------------------------
# mask (adaptive compression) phase
# ---------------------------------------------------------------------------

def train_asc(sources: np.ndarray, pipeline: PipelineParams, tc: TrainConfig,
              mu: float | None = None, on_epoch=None):
    """Train the mask network against the frozen pipeline.

    Per batch, the raw and the masked features cross the channel with the
    same noise realisation and are decoded independently; the loss is the
    MSE between the two recovered batches plus ``mu * mask_ratio``.  Only
    the mask network updates.  Returns ``(losses, ratios, final_ratio)``
    with per-epoch traces and the final whole-dataset retained fraction.
    """
    mu = tc.asc_mu if mu is None else mu
    freeze = FreezeSet.capture(pipeline, ["asi", "semantic", "channel", "mi"])
    codec, chp = pipeline.codec, pipeline.channel
    var = noise_variance(tc.snr_db_train, 1.0)
    features = encode_dataset(codec, sources)
    order = _rng(tc.seed, 2).permutation(features.shape[0])
    msk_params = {k: codec.params[k] for k in codec.mask_keys()}
    opt = nn.Adam(msk_params, lr=tc.lr)

    def _dual_path(fb, noise_rng):
        masked, bits, _, mcache = mask_forward(codec, fb, hard=True)
        y_raw, _ = chanenc_forward(chp, fb.reshape(fb.shape[0], -1))
        y_msk, ce_cache = chanenc_forward(chp, masked.reshape(fb.shape[0], -1))
        # one shared channel realisation for both paths
        noise = 0.0
        if var > 0:
            noise = noise_rng.normal(0.0, np.sqrt(var), size=y_raw.shape)
            if tc.channel_kind == "rayleigh":
                g = noise_rng.normal(0.0, np.sqrt(0.5), size=(fb.shape[0], 2))
                noise = noise / np.sqrt(np.sum(g * g, axis=1, keepdims=True))
        rec_raw, _ = decode_forward(codec, chandec_forward(chp, y_raw + noise)[0].reshape(fb.shape))
        fhat_msk, cd_cache = chandec_forward(chp, y_msk + noise)
        rec_msk, dec_cache = decode_forward(codec, fhat_msk.reshape(fb.shape))
        return masked, bits, mcache, ce_cache, cd_cache, dec_cache, rec_raw, rec_msk

    eval_f = features[:min(64, features.shape[0])]

    def eval_loss():
        _, bits, _, _, _, _, rec_raw, rec_msk = _dual_path(eval_f, _rng(tc.seed, 3))
        return (float(np.mean((rec_msk - rec_raw) ** 2)) + mu * float(bits.mean()),
                float(bits.mean()))

    loss0, ratio0 = eval_loss()
    losses: list[float] = [loss0]
    ratios: list[float] = [ratio0]
    for epoch in range(tc.epochs):
        noise_rng = _rng(tc.seed, 1, epoch)
        epoch_retained = 0
        for idx in _batches(features.shape[0], tc.batch, order):
            fb = features[idx]
            (masked, bits, mcache, ce_cache, cd_cache,
             dec_cache, rec_raw, rec_msk) = _dual_path(fb, noise_rng)
            epoch_retained += int(bits.sum())
            diff = rec_msk - rec_raw
            dout = 2.0 * diff / diff.size
            dfhat3, _ = decode_backward(codec, dec_cache, dout)
            dy = chandec_backward(chp, cd_cache, dfhat3.reshape(len(idx), -1))[0]
            dmasked = chanenc_backward(chp, ce_cache, dy)[0].reshape(fb.shape)
            dgate_sparsity = np.full(fb.shape, mu / bits.size)
            _, mask_grads = mask_backward(codec, mcache, dmasked, dgate_extra=dgate_sparsity)
            opt.step(mask_grads)
        if epoch_retained == 0:
            raise DegenerateMaskError("mask collapsed to all zeros for an entire epoch; "
                                      "lower the sparsity pressure mu")
        loss_e, ratio_e = eval_loss()
        losses.append(loss_e)
        ratios.append(ratio_e)
        _check_divergence(losses, "mask phase")
        if on_epoch:
            on_epoch(epoch, losses[-1])
    freeze.verify(pipeline)
    _, final_bits, _, _ = mask_forward(codec, features, hard=True)
    final_ratio = float(final_bits.mean())
    return losses, ratios, final_ratio


def train_asi_phase(base: ExperienceBase, pipeline: PipelineParams, tc: TrainConfig):
    """Dispatch the attention-supervision phase onto the pipeline."""
    freeze = FreezeSet.capture(pipeline, ["semantic", "mask", "channel", "mi"])
    trained, losses = train_asi(base, pipeline.asi, lr=tc.lr, epochs=tc.epochs,
                                batch=tc.batch, seed=tc.seed)
    pipeline.asi.params.update(trained.params)
    freeze.verify(pipeline)
    return losses


# ---------------------------------------------------------------------------
# loss traces
# ---------------------------------------------------------------------------

TRACE_FIELDS = ("step", "phase", "loss", "mask_ratio", "snr_db", "seed")


def trace_rows(phase: str, losses, tc: TrainConfig, ratios=None) -> list[dict]:
    rows = []
    for i, loss in enumerate(losses):
        rows.append({
            "step": i,
            "phase": phase,
            "loss": repr(float(loss)),
            "mask_ratio": repr(float(ratios[i])) if ratios is not None else "",
            "snr_db": repr(float(tc.snr_db_train)),
            "seed": tc.seed,
        })
    return rows


def write_trace(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    exists = path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        if not exists:
            writer.writeheader()
        writer.writerows(rows)
