"""Attention-based semantic integration.

Segments are stacked along a leading axis ("each segment is a channel").
Channel attention scores every slot from its max/mean pooled intensity
through a small shared MLP, producing a per-segment weight in (0, 1);
because the MLP sees one slot at a time, the scoring is exactly
permutation-equivariant.  Spatial attention pools the weighted segments
across the slot and colour axes into a two-plane map, convolves it into a
per-pixel sigmoid gate, and applies the gate to the slot sum.  The result
is a single semantic-aware image.

A human prompt path (:func:`human_select`) bypasses the attention
networks and sums an explicit selection of segments; recorded selections
form the experience base the attention parameters are trained on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .images import ImageSample
from .skb import SegmentSet, extract_segment

EXPERIENCE_FORMAT_VERSION = 1


class TrainingDivergence(RuntimeError):
    """Training produced a non-finite or runaway loss."""


@dataclass
class SegmentStack:
    """``(K, H, W, C)`` stack of extracted segments, zero-padded past ``valid_count``."""

    data: np.ndarray
    valid_count: int

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 4:
            raise ValueError(f"stack must be (K, H, W, C), got {d.shape}")
        if not (1 <= self.valid_count <= d.shape[0]):
            raise ValueError(f"valid_count {self.valid_count} outside 1..{d.shape[0]}")
        if not np.all(np.isfinite(d)):
            raise ValueError("stack contains non-finite values")
        self.data = d

    @property
    def k(self) -> int:
        return self.data.shape[0]


@dataclass
class AttentionParams:
    params: nn.Params
    k_max: int
    rng_seed: int

    def copy(self) -> "AttentionParams":
        return AttentionParams({k: v.copy() for k, v in self.params.items()}, self.k_max, self.rng_seed)


@dataclass
class ExperienceBase:
    records: list[tuple[SegmentStack, np.ndarray]]
    provenance: str  # "human" or "synthetic-oracle"

    def __len__(self) -> int:
        return len(self.records)


def init_attention_params(k_max: int, seed: int = 0) -> AttentionParams:
    """Fresh attention parameters; MLP hidden width is ceil(k_max / 2)."""
    rng = np.random.default_rng(seed)
    hidden = max(1, math.ceil(k_max / 2))
    params = {
        "ch_w1": nn.glorot_normal(rng, (1, hidden), 1, hidden),
        "ch_b1": np.zeros(hidden),
        "ch_w2": nn.glorot_normal(rng, (hidden, 1), hidden, 1),
        "ch_b2": np.zeros(1),
        "sp_w": nn.glorot_normal(rng, (7, 7, 2, 1), 98, 1),
        "sp_b": np.zeros(1),
    }
    return AttentionParams(params, k_max=k_max, rng_seed=seed)


def build_stack(image: ImageSample, segments: SegmentSet, k_max: int) -> SegmentStack:
    """Extract every segment of ``segments`` into a zero-padded stack."""
    if len(segments) > k_max:
        raise ValueError(f"{len(segments)} segments exceed k_max={k_max}")
    data = np.zeros((k_max, image.height, image.width, image.channels))
    for i, m in enumerate(segments.masks):
        data[i] = extract_segment(image, m).pixels
    return SegmentStack(data, valid_count=len(segments))


# ---------------------------------------------------------------------------
# forward / backward (batched over records: stacks are (B, K, H, W, C))
# ---------------------------------------------------------------------------

def _scalar_mlp_forward(p, v):
    # v: (B, K) pooled scalars; one shared 1 -> hidden -> 1 MLP per slot
    col = v.reshape(-1, 1)
    h_pre, _ = nn.affine_forward(col, p["ch_w1"], p["ch_b1"])
    h, _ = nn.relu_forward(h_pre)
    out, _ = nn.affine_forward(h, p["ch_w2"], p["ch_b2"])
    return out.reshape(v.shape), (col, h_pre, h)


def _scalar_mlp_backward(p, cache, dout):
    col, h_pre, h = cache
    dflat = dout.reshape(-1, 1)
    dh, dw2, db2 = nn.affine_backward(dflat, (h, p["ch_w2"]))
    dh_pre = nn.relu_backward(dh, h_pre)
    dcol, dw1, db1 = nn.affine_backward(dh_pre, (col, p["ch_w1"]))
    grads = {"ch_w1": dw1, "ch_b1": db1, "ch_w2": dw2, "ch_b2": db2}
    return dcol.reshape(dout.shape), grads


def channel_attention_forward(ap: AttentionParams, stacks: np.ndarray):
    b, k = stacks.shape[:2]
    if k != ap.k_max:
        raise ValueError(f"stack has {k} slots but params were built for k_max={ap.k_max}")
    flat = stacks.reshape(b, k, -1)
    max_idx = flat.argmax(axis=2)
    maxv = np.take_along_axis(flat, max_idx[:, :, None], axis=2)[:, :, 0]
    meanv = flat.mean(axis=2)
    out_max, cache_max = _scalar_mlp_forward(ap.params, maxv)
    out_mean, cache_mean = _scalar_mlp_forward(ap.params, meanv)
    weights = nn.sigmoid(out_max + out_mean)
    low = weights[:, :, None, None, None] * stacks
    cache = (stacks, flat.shape, max_idx, cache_max, cache_mean, weights)
    return weights, low, cache


def channel_attention_backward(ap: AttentionParams, cache, dlow, dweights_extra=None):
    stacks, flatshape, max_idx, cache_max, cache_mean, weights = cache
    dweights = np.sum(dlow * stacks, axis=(2, 3, 4))
    if dweights_extra is not None:
        dweights = dweights + dweights_extra
    dstacks = dlow * weights[:, :, None, None, None]
    dlogits = nn.sigmoid_backward(dweights, weights)
    dmaxv, g1 = _scalar_mlp_backward(ap.params, cache_max, dlogits)
    dmeanv, g2 = _scalar_mlp_backward(ap.params, cache_mean, dlogits)
    grads = {key: g1[key] + g2[key] for key in g1}
    dflat = np.zeros(flatshape)
    np.put_along_axis(dflat, max_idx[:, :, None], dmaxv[:, :, None], axis=2)
    dflat += (dmeanv / flatshape[2])[:, :, None]
    dstacks += dflat.reshape(stacks.shape)
    return dstacks, grads


def spatial_attention_forward(ap: AttentionParams, low: np.ndarray):
    b, k, h, w, c = low.shape
    # pool across slot and colour axes to one scalar plane per statistic
    planeview = low.transpose(0, 2, 3, 1, 4).reshape(b, h, w, k * c)
    max_idx = planeview.argmax(axis=3)
    maxmap = np.take_along_axis(planeview, max_idx[:, :, :, None], axis=3)[:, :, :, 0]
    meanmap = planeview.mean(axis=3)
    planes = np.stack([maxmap, meanmap], axis=3)
    logits, conv_cache = nn.conv2d_forward(planes, ap.params["sp_w"], ap.params["sp_b"])
    gate = nn.sigmoid(logits)  # (B, H, W, 1)
    ssum = low.sum(axis=1)
    raw = gate * ssum
    cache = (low.shape, max_idx, conv_cache, gate, ssum)
    return raw, gate, cache


def spatial_attention_backward(ap: AttentionParams, cache, draw):
    lowshape, max_idx, conv_cache, gate, ssum = cache
    b, k, h, w, c = lowshape
    dgate = np.sum(draw * ssum, axis=3, keepdims=True)
    dssum = draw * gate
    dlogits = nn.sigmoid_backward(dgate, gate)
    dplanes, dw, db = nn.conv2d_backward(dlogits, conv_cache, ap.params["sp_w"])
    dplaneview = np.zeros((b, h, w, k * c))
    np.put_along_axis(dplaneview, max_idx[:, :, :, None], dplanes[:, :, :, 0:1], axis=3)
    dplaneview += dplanes[:, :, :, 1:2] / (k * c)
    dlow = dplaneview.reshape(b, h, w, k, c).transpose(0, 3, 1, 2, 4)
    dlow = dlow + dssum[:, None, :, :, :]
    return dlow, {"sp_w": dw, "sp_b": db}


def integrate_forward(ap: AttentionParams, stacks: np.ndarray):
    weights, low, ch_cache = channel_attention_forward(ap, stacks)
    raw, gate, sp_cache = spatial_attention_forward(ap, low)
    return raw, (ch_cache, sp_cache)


def integrate_backward(ap: AttentionParams, cache, draw):
    ch_cache, sp_cache = cache
    dlow, sp_grads = spatial_attention_backward(ap, sp_cache, draw)
    dstacks, ch_grads = channel_attention_backward(ap, ch_cache, dlow)
    return dstacks, {**ch_grads, **sp_grads}


# ---------------------------------------------------------------------------
# public single-stack operations
# ---------------------------------------------------------------------------

def channel_attention(stack: SegmentStack, params: AttentionParams):
    """Per-segment weights in (0, 1) and the weighted (low-level) stack."""
    weights, low, _ = channel_attention_forward(params, stack.data[None])
    return weights[0], low[0]


def spatial_attention(low: np.ndarray, params: AttentionParams,
                      source_id: str = "integrated") -> ImageSample:
    """Merge a (K, H, W, C) weighted stack into one gated image."""
    if not np.all(np.isfinite(low)):
        raise ValueError("low-level stack contains non-finite values")
    raw, _, _ = spatial_attention_forward(params, np.asarray(low, dtype=np.float64)[None])
    return ImageSample.clipped(raw[0], source_id)


def integrate(stack: SegmentStack, params: AttentionParams,
              source_id: str = "integrated") -> ImageSample:
    """Channel attention followed by spatial attention; deterministic."""
    raw, _ = integrate_forward(params, stack.data[None])
    return ImageSample.clipped(raw[0], source_id)


def human_select(stack: SegmentStack, selection, source_id: str = "selected") -> ImageSample:
    """Sum an explicit segment selection, bypassing the attention nets."""
    sel = np.asarray(selection)
    if sel.shape != (stack.k,):
        raise ValueError(f"selection length {sel.shape} != stack slots ({stack.k},)")
    if not np.isin(sel, (0, 1)).all():
        raise ValueError("selection must be binary")
    if sel[:stack.valid_count].sum() < 1:
        raise ValueError("selection picks no valid segment")
    out = np.tensordot(sel.astype(np.float64), stack.data, axes=(0, 0))
    return ImageSample.clipped(out, source_id)


# ---------------------------------------------------------------------------
# experience base
# ---------------------------------------------------------------------------

def build_experience_base(samples, backend, interest_labels, k_max: int) -> ExperienceBase:
    """Synthetic selection oracle: pick segments whose label is interesting.

    Stands in for recorded human selections; records whose images carry
    no interesting object are skipped.
    """
    from .skb import segment

    interest = set(interest_labels)
    records = []
    for sample in samples:
        segs = segment(sample.image, backend, k_max=k_max)
        stack = build_stack(sample.image, segs, k_max)
        sel = np.zeros(k_max, dtype=np.uint8)
        for i, m in enumerate(segs.masks):
            if m.label in interest:
                sel[i] = 1
        if sel.sum() == 0:
            continue
        records.append((stack, sel))
    if not records:
        raise ValueError("no experience records: no segment matched the interest labels")
    return ExperienceBase(records, provenance="synthetic-oracle")


def save_experience_base(base: ExperienceBase, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": EXPERIENCE_FORMAT_VERSION,
        "provenance": base.provenance,
        "count": len(base.records),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))
    for i, (stack, sel) in enumerate(base.records):
        np.savez(directory / f"record_{i:05d}.npz", stack=stack.data,
                 selection=sel.astype(np.uint8), valid_count=stack.valid_count)


def load_experience_base(directory) -> ExperienceBase:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest["format_version"] != EXPERIENCE_FORMAT_VERSION:
        raise ValueError(f"unsupported experience base version {manifest['format_version']}")
    records = []
    for i in range(manifest["count"]):
        with np.load(directory / f"record_{i:05d}.npz") as z:
            records.append((SegmentStack(z["stack"], int(z["valid_count"])), z["selection"].copy()))
    return ExperienceBase(records, provenance=manifest["provenance"])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def asi_loss_forward(ap: AttentionParams, stacks, targets):
    raw, cache = integrate_forward(ap, stacks)
    clipped = np.clip(raw, 0.0, 1.0)
    diff = clipped - targets
    loss = float(np.mean(diff * diff))
    return loss, (cache, raw, diff)


def asi_loss_backward(ap: AttentionParams, lcache):
    cache, raw, diff = lcache
    inside = (raw <= 1.0)  # raw is always >= 0 (gate and segments are non-negative)
    draw = 2.0 * diff * inside / diff.size
    _, grads = integrate_backward(ap, cache, draw)
    return grads


def train_asi(base: ExperienceBase, params: AttentionParams, lr: float = 1e-2,
              epochs: int = 30, batch: int = 16, seed: int = 0):
    """Fit the attention nets so integration matches the recorded selections.

    Minimises the mean-squared difference between the integrated image
    and the human-selected sum over the experience base.  Zero-padded
    slots contribute nothing to either side.  Returns the trained params
    (a new object) and the per-epoch loss trace.
    """
    if len(base) == 0:
        raise ValueError("experience base is empty")
    stacks = np.stack([rec[0].data for rec in base.records])
    targets = np.stack([
        human_select(stack, sel).pixels for stack, sel in base.records
    ])
    trained = params.copy()
    opt = nn.Adam(trained.params, lr=lr)
    order = np.random.default_rng(seed).permutation(len(base))
    losses = []
    for _ in range(epochs):
        epoch_losses = []
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            loss, lcache = asi_loss_forward(trained, stacks[idx], targets[idx])
            if not np.isfinite(loss):
                raise TrainingDivergence(f"ASI loss became non-finite ({loss}); trace so far: {losses}")
            grads = asi_loss_backward(trained, lcache)
            opt.step(grads)
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
    return trained, losses
