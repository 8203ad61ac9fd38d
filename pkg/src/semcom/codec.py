"""Semantic codec and adaptive feature masking.

The encoder is two [3x3 conv + 2x2 max-pool] blocks (so features sit at a
quarter of the source resolution), the decoder two [2x nearest upsample +
3x3 conv] blocks, and the mask network two 3x3 ReLU convolutions with a
1x1 sigmoid head whose output is thresholded at 0.5 into a binary mask.
Training uses a straight-through surrogate for the threshold: the hard
bits are used forward, the sigmoid's derivative backward.

The decoder's public output is clamped to [0, 1]; training losses are
taken on the pre-clamp values so saturated pixels keep their gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .images import ImageSample

DEFAULT_WIDTHS = (32, 64)
DEFAULT_MASK_HIDDEN = 64


@dataclass
class FeatureTensor:
    """``(h, w, F)`` semantic features for a source of shape ``source_shape``."""

    data: np.ndarray
    source_shape: tuple[int, int, int]

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError(f"features must be (h, w, F), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("features contain non-finite values")
        self.data = d
        self.source_shape = tuple(int(v) for v in self.source_shape)

    @property
    def size(self) -> int:
        return self.data.size


@dataclass
class MaskMatrix:
    bits: np.ndarray
    retained_count: int

    def __post_init__(self):
        b = np.asarray(self.bits)
        if not np.isin(b, (0, 1)).all():
            raise ValueError("mask bits must be 0 or 1")
        self.bits = b.astype(np.uint8)
        if self.retained_count != int(self.bits.sum()):
            raise ValueError("retained_count does not match the number of ones")

    @property
    def size(self) -> int:
        return self.bits.size


@dataclass
class CodecParams:
    params: nn.Params
    channels: int
    widths: tuple[int, int]
    mask_hidden: int

    def copy(self) -> "CodecParams":
        return CodecParams({k: v.copy() for k, v in self.params.items()},
                           self.channels, self.widths, self.mask_hidden)

    @property
    def feature_channels(self) -> int:
        return self.widths[1]

    def semantic_keys(self) -> list[str]:
        return [k for k in self.params if k.startswith(("enc", "dec"))]

    def mask_keys(self) -> list[str]:
        return [k for k in self.params if k.startswith("msk")]


def init_codec_params(channels: int = 3, widths: tuple[int, int] = DEFAULT_WIDTHS,
                      mask_hidden: int = DEFAULT_MASK_HIDDEN, seed: int = 0) -> CodecParams:
    rng = np.random.default_rng(seed)
    w1, w2 = widths
    mh = mask_hidden
    params = {
        "enc1_w": nn.he_normal(rng, (3, 3, channels, w1), 9 * channels),
        "enc1_b": np.zeros(w1),
        "enc2_w": nn.he_normal(rng, (3, 3, w1, w2), 9 * w1),
        "enc2_b": np.zeros(w2),
        "dec1_w": nn.he_normal(rng, (3, 3, w2, w1), 9 * w2),
        "dec1_b": np.zeros(w1),
        "dec2_w": nn.glorot_normal(rng, (3, 3, w1, channels), 9 * w1, channels),
        "dec2_b": np.zeros(channels),
        "msk1_w": nn.he_normal(rng, (3, 3, w2, mh), 9 * w2),
        "msk1_b": np.zeros(mh),
        "msk2_w": nn.he_normal(rng, (3, 3, mh, mh), 9 * mh),
        "msk2_b": np.zeros(mh),
        "mskh_w": nn.glorot_normal(rng, (1, 1, mh, w2), mh, w2),
        "mskh_b": np.zeros(w2),
    }
    return CodecParams(params, channels=channels, widths=tuple(widths), mask_hidden=mask_hidden)


# ---------------------------------------------------------------------------
# batched forward / backward
# ---------------------------------------------------------------------------

def encode_forward(cp: CodecParams, x: np.ndarray):
    p = cp.params
    c1, cc1 = nn.conv2d_forward(x, p["enc1_w"], p["enc1_b"])
    r1, rc1 = nn.relu_forward(c1)
    p1, pc1 = nn.maxpool2_forward(r1)
    c2, cc2 = nn.conv2d_forward(p1, p["enc2_w"], p["enc2_b"])
    r2, rc2 = nn.relu_forward(c2)
    f, pc2 = nn.maxpool2_forward(r2)
    return f, (cc1, rc1, pc1, cc2, rc2, pc2)


def encode_backward(cp: CodecParams, cache, df):
    p = cp.params
    cc1, rc1, pc1, cc2, rc2, pc2 = cache
    dr2 = nn.maxpool2_backward(df, pc2)
    dc2 = nn.relu_backward(dr2, rc2)
    dp1, dw2, db2 = nn.conv2d_backward(dc2, cc2, p["enc2_w"])
    dr1 = nn.maxpool2_backward(dp1, pc1)
    dc1 = nn.relu_backward(dr1, rc1)
    dx, dw1, db1 = nn.conv2d_backward(dc1, cc1, p["enc1_w"])
    return dx, {"enc1_w": dw1, "enc1_b": db1, "enc2_w": dw2, "enc2_b": db2}


def decode_forward(cp: CodecParams, f: np.ndarray):
    """Pre-clamp decode; returns (B, H, W, C) unbounded pixels."""
    p = cp.params
    u1, uc1 = nn.upsample2_forward(f)
    c1, cc1 = nn.conv2d_forward(u1, p["dec1_w"], p["dec1_b"])
    r1, rc1 = nn.relu_forward(c1)
    u2, uc2 = nn.upsample2_forward(r1)
    out, cc2 = nn.conv2d_forward(u2, p["dec2_w"], p["dec2_b"])
    return out, (uc1, cc1, rc1, uc2, cc2)


def decode_backward(cp: CodecParams, cache, dout):
    p = cp.params
    uc1, cc1, rc1, uc2, cc2 = cache
    du2, dw2, db2 = nn.conv2d_backward(dout, cc2, p["dec2_w"])
    dr1 = nn.upsample2_backward(du2, uc2)
    dc1 = nn.relu_backward(dr1, rc1)
    du1, dw1, db1 = nn.conv2d_backward(dc1, cc1, p["dec1_w"])
    df = nn.upsample2_backward(du1, uc1)
    return df, {"dec1_w": dw1, "dec1_b": db1, "dec2_w": dw2, "dec2_b": db2}


def mask_forward(cp: CodecParams, f: np.ndarray, hard: bool = True):
    """Mask logits/sigmoid/bits for features ``f`` (B, h, w, F).

    ``hard=False`` swaps the thresholded bits for the sigmoid itself:
    that soft path is the function whose exact gradient equals the
    straight-through surrogate gradient of the hard path.
    """
    p = cp.params
    c1, cc1 = nn.conv2d_forward(f, p["msk1_w"], p["msk1_b"])
    r1, rc1 = nn.relu_forward(c1)
    c2, cc2 = nn.conv2d_forward(r1, p["msk2_w"], p["msk2_b"])
    r2, rc2 = nn.relu_forward(c2)
    logits, cch = nn.conv2d_forward(r2, p["mskh_w"], p["mskh_b"])
    sig = nn.sigmoid(logits)
    bits = (sig >= 0.5).astype(np.float64)
    gate = bits if hard else sig
    masked = f * gate
    cache = (f, cc1, rc1, cc2, rc2, cch, sig, gate)
    return masked, bits, sig, cache


def mask_backward(cp: CodecParams, cache, dmasked, dgate_extra=None):
    """Straight-through backward: the threshold is treated as identity on
    the sigmoid, so gradients reaching the gate flow through sigmoid'."""
    p = cp.params
    f, cc1, rc1, cc2, rc2, cch, sig, gate = cache
    df_direct = dmasked * gate
    dgate = dmasked * f
    if dgate_extra is not None:
        dgate = dgate + dgate_extra
    dlogits = nn.sigmoid_backward(dgate, sig)
    dr2, dwh, dbh = nn.conv2d_backward(dlogits, cch, p["mskh_w"])
    dc2 = nn.relu_backward(dr2, rc2)
    dr1, dw2, db2 = nn.conv2d_backward(dc2, cc2, p["msk2_w"])
    dc1 = nn.relu_backward(dr1, rc1)
    df_net, dw1, db1 = nn.conv2d_backward(dc1, cc1, p["msk1_w"])
    grads = {"msk1_w": dw1, "msk1_b": db1, "msk2_w": dw2, "msk2_b": db2,
             "mskh_w": dwh, "mskh_b": dbh}
    return df_direct + df_net, grads


# ---------------------------------------------------------------------------
# public single-image operations
# ---------------------------------------------------------------------------

def semantic_encode(image: ImageSample, params: CodecParams) -> FeatureTensor:
    """Encode an image into ``(H/4, W/4, widths[1])`` semantic features."""
    if image.height % 4 or image.width % 4:
        raise ValueError(f"image dims {image.height}x{image.width} not divisible by 4")
    if image.channels != params.channels:
        raise ValueError(f"image has {image.channels} channels, codec expects {params.channels}")
    f, _ = encode_forward(params, image.pixels[None])
    return FeatureTensor(f[0], source_shape=(image.height, image.width, image.channels))


def semantic_decode(features: FeatureTensor, params: CodecParams,
                    source_id: str = "recovered") -> ImageSample:
    """Decode features back to an image; output clamped to [0, 1]."""
    h, w, c = features.source_shape
    fh, fw, ff = features.data.shape
    if (fh * 4, fw * 4) != (h, w) or ff != params.feature_channels:
        raise ValueError(f"feature shape {features.data.shape} inconsistent with "
                         f"source {features.source_shape} and codec widths {params.widths}")
    out, _ = decode_forward(params, features.data[None])
    return ImageSample.clipped(out[0], source_id)


def mask_features(features: FeatureTensor, params: CodecParams,
                  mode: str = "eval") -> tuple[FeatureTensor, MaskMatrix]:
    """Zero the unimportant feature elements through the learned mask.

    ``mode`` is "eval" or "train"; both use the hard thresholded bits
    forward (training code reaches the surrogate gradient through
    :func:`mask_forward` / :func:`mask_backward` directly).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    masked, bits, _, _ = mask_forward(params, features.data[None], hard=True)
    bit_arr = bits[0].astype(np.uint8)
    return (FeatureTensor(masked[0], features.source_shape),
            MaskMatrix(bit_arr, int(bit_arr.sum())))


def mask_ratio(mask: MaskMatrix) -> float:
    """Fraction of feature elements the mask retains."""
    return mask.retained_count / mask.size
