"""Attention integration: hand oracles, symmetries, experience-base training."""

import math

import numpy as np
import pytest

from semcom import nn
from semcom.asi import (AttentionParams, ExperienceBase, SegmentStack, asi_loss_backward,
                        asi_loss_forward, build_experience_base, build_stack,
                        channel_attention, human_select, init_attention_params, integrate,
                        load_experience_base, save_experience_base, spatial_attention,
                        train_asi)
from semcom.images import ImageSample
from semcom.skb import make_backend, segment


def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def _stack(arrays, valid=None):
    data = np.stack(arrays)
    return SegmentStack(data, valid_count=valid if valid is not None else len(arrays))


# ---------------------------------------------------------------------------
# channel attention
# ---------------------------------------------------------------------------

def test_identical_segments_get_equal_weights():
    seg = np.random.default_rng(0).uniform(0, 1, (8, 8, 3))
    stack = _stack([seg, seg, seg])
    weights, _ = channel_attention(stack, init_attention_params(3, seed=1))
    assert weights[0] == weights[1] == weights[2]


def test_padded_slot_weight_is_half_and_low_level_zero():
    rng = np.random.default_rng(1)
    stack = _stack([rng.uniform(0, 1, (8, 8, 3)), np.zeros((8, 8, 3))], valid=1)
    params = init_attention_params(2, seed=2)  # biases are zero at init
    weights, low = channel_attention(stack, params)
    assert weights[1] == 0.5
    assert not low[1].any()


def test_channel_attention_matches_hand_computed_mlp():
    # K_max = 2 -> hidden width 1; mlp(v) = 2 * relu(0.5 v + 0.1) - 0.05
    params = AttentionParams({
        "ch_w1": np.array([[0.5]]),
        "ch_b1": np.array([0.1]),
        "ch_w2": np.array([[2.0]]),
        "ch_b2": np.array([-0.05]),
        "sp_w": np.zeros((7, 7, 2, 1)),
        "sp_b": np.zeros(1),
    }, k_max=2, rng_seed=0)
    s0 = np.array([[0.2, 0.4], [0.6, 0.1]])[:, :, None]
    s1 = np.array([[0.3, 0.3], [0.05, 0.9]])[:, :, None]
    stack = _stack([s0, s1])

    def mlp(v):
        return 2.0 * max(0.5 * v + 0.1, 0.0) - 0.05

    expected = [
        _sigmoid(mlp(0.6) + mlp((0.2 + 0.4 + 0.6 + 0.1) / 4)),
        _sigmoid(mlp(0.9) + mlp((0.3 + 0.3 + 0.05 + 0.9) / 4)),
    ]
    weights, low = channel_attention(stack, params)
    assert weights == pytest.approx(expected, abs=1e-12)
    assert low[0] == pytest.approx(expected[0] * s0, abs=1e-12)
    assert low[1] == pytest.approx(expected[1] * s1, abs=1e-12)


def test_stack_slot_count_must_match_params():
    stack = _stack([np.zeros((8, 8, 3)) + 0.1] * 3)
    with pytest.raises(ValueError, match="k_max"):
        channel_attention(stack, init_attention_params(2))


# ---------------------------------------------------------------------------
# spatial attention
# ---------------------------------------------------------------------------

def test_single_segment_passthrough_with_saturated_gate():
    rng = np.random.default_rng(3)
    low = rng.uniform(0, 1, (1, 8, 8, 3))
    params = init_attention_params(1, seed=0)
    params.params["sp_w"][:] = 0.0
    params.params["sp_b"][:] = 50.0  # gate == sigmoid(50) ~ 1
    out = spatial_attention(low, params)
    assert np.allclose(out.pixels, np.clip(low[0], 0, 1), atol=1e-9)


def test_all_zero_low_level_gives_zero_output():
    params = init_attention_params(2, seed=9)
    params.params["sp_w"][:] = np.random.default_rng(4).normal(0, 1, (7, 7, 2, 1))
    params.params["sp_b"][:] = 3.0
    out = spatial_attention(np.zeros((2, 8, 8, 3)), params)
    assert not out.pixels.any()


def test_spatial_attention_matches_hand_computed_gate():
    # centre-tap kernel so the convolution is per-pixel arithmetic
    params = init_attention_params(2, seed=0)
    params.params["sp_w"][:] = 0.0
    params.params["sp_w"][3, 3, 0, 0] = 1.2
    params.params["sp_w"][3, 3, 1, 0] = -0.8
    params.params["sp_b"][:] = 0.15
    rng = np.random.default_rng(5)
    low = rng.uniform(0, 0.5, (2, 8, 8, 3))
    out = spatial_attention(low, params)
    expected = np.zeros((8, 8, 3))
    for i in range(8):
        for j in range(8):
            vals = [low[k, i, j, c] for k in range(2) for c in range(3)]
            gate = _sigmoid(1.2 * max(vals) - 0.8 * (sum(vals) / len(vals)) + 0.15)
            for c in range(3):
                expected[i, j, c] = gate * (low[0, i, j, c] + low[1, i, j, c])
    assert np.allclose(out.pixels, np.clip(expected, 0, 1), atol=1e-12)


# ---------------------------------------------------------------------------
# integrate
# ---------------------------------------------------------------------------

def test_whole_image_segment_with_saturated_gates_recovers_image():
    rng = np.random.default_rng(6)
    img = ImageSample(rng.uniform(0, 1, (8, 8, 3)), "x")
    segs = segment(img, make_backend("trivial"), k_max=1)
    stack = build_stack(img, segs, 1)
    params = init_attention_params(1, seed=0)
    params.params["ch_b2"][:] = 50.0   # channel weight ~ 1
    params.params["sp_w"][:] = 0.0
    params.params["sp_b"][:] = 50.0    # gate ~ 1
    out = integrate(stack, params)
    assert np.allclose(out.pixels, img.pixels, atol=1e-9)


def test_integrate_invariant_to_slot_permutation():
    rng = np.random.default_rng(7)
    params = init_attention_params(4, seed=11)
    params.params["ch_w1"] += rng.normal(0, 0.3, params.params["ch_w1"].shape)
    data = rng.uniform(0, 0.4, (4, 8, 8, 3))
    base = SegmentStack(data, 4)
    out = integrate(base, params)
    w_base, _ = channel_attention(base, params)
    for perm in ([1, 0, 3, 2], [3, 2, 1, 0], [2, 0, 3, 1]):
        permuted = SegmentStack(data[perm], 4)
        w_perm, _ = channel_attention(permuted, params)
        assert np.allclose(np.sort(w_perm), np.sort(w_base), atol=1e-14)
        assert np.allclose(integrate(permuted, params).pixels, out.pixels, atol=1e-12)


def test_integrate_composes_the_two_hand_oracles():
    params = AttentionParams({
        "ch_w1": np.array([[0.5]]),
        "ch_b1": np.array([0.1]),
        "ch_w2": np.array([[2.0]]),
        "ch_b2": np.array([-0.05]),
        "sp_w": np.zeros((7, 7, 2, 1)),
        "sp_b": np.array([0.15]),
    }, k_max=2, rng_seed=0)
    params.params["sp_w"][3, 3, 0, 0] = 1.2
    params.params["sp_w"][3, 3, 1, 0] = -0.8
    rng = np.random.default_rng(8)
    stack = SegmentStack(rng.uniform(0, 0.5, (2, 8, 8, 1)), 2)
    _, low = channel_attention(stack, params)
    via_stages = spatial_attention(low, params)
    fused = integrate(stack, params)
    assert np.array_equal(fused.pixels, via_stages.pixels)


def test_outputs_bounded_and_finite():
    rng = np.random.default_rng(9)
    params = init_attention_params(3, seed=5)
    stack = SegmentStack(rng.uniform(0, 1, (3, 8, 8, 3)), 3)
    out = integrate(stack, params)
    weights, _ = channel_attention(stack, params)
    assert np.all((weights > 0) & (weights < 1))
    assert np.all(np.isfinite(out.pixels))
    assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


# ---------------------------------------------------------------------------
# human_select
# ---------------------------------------------------------------------------

def test_select_all_segments_of_partition_reconstructs_union(small_dataset):
    d = small_dataset
    sample = d["samples"][0]
    segs = segment(sample.image, d["backend"], k_max=4)
    stack = build_stack(sample.image, segs, 4)
    sel = np.array([1] * len(segs) + [0] * (4 - len(segs)))
    out = human_select(stack, sel)
    union = stack.data[:len(segs)].sum(axis=0)
    assert np.array_equal(out.pixels, np.clip(union, 0, 1))


def test_select_single_segment_equals_extraction():
    rng = np.random.default_rng(10)
    stack = SegmentStack(rng.uniform(0, 1, (3, 8, 8, 3)), 3)
    out = human_select(stack, np.array([0, 1, 0]))
    assert np.array_equal(out.pixels, stack.data[1])


def test_select_two_of_three_overlapping_matches_pixel_loop():
    rng = np.random.default_rng(11)
    stack = SegmentStack(rng.uniform(0, 0.9, (3, 8, 8, 1)), 3)
    out = human_select(stack, np.array([1, 0, 1]))
    expected = np.zeros((8, 8, 1))
    for i in range(8):
        for j in range(8):
            expected[i, j, 0] = min(stack.data[0, i, j, 0] + stack.data[2, i, j, 0], 1.0)
    assert np.allclose(out.pixels, expected, atol=1e-12)


def test_empty_selection_rejected():
    stack = SegmentStack(np.full((2, 8, 8, 3), 0.2), 1)
    with pytest.raises(ValueError, match="no valid segment"):
        human_select(stack, np.array([0, 1]))  # slot 1 is padding


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_train_asi_empty_base_rejected():
    with pytest.raises(ValueError, match="empty"):
        train_asi(ExperienceBase([], "synthetic-oracle"), init_attention_params(2))


def test_train_asi_select_all_reaches_half_initial_loss(desk_dataset):
    d = desk_dataset
    base = build_experience_base(d["train"], d["backend"], ("disc", "box", "speck"),
                                 d["k_max"])
    assert len(base) == 200
    # every selection keeps every valid segment
    base = ExperienceBase([(st, np.where(np.arange(d["k_max"]) < st.valid_count, 1, 0))
                           for st, _ in base.records], "synthetic-oracle")
    _, losses = train_asi(base, init_attention_params(d["k_max"], seed=0),
                          lr=5e-2, epochs=15, batch=16, seed=0)
    assert losses[-1] < 0.5 * losses[0]


def test_train_asi_single_record_non_increasing():
    rng = np.random.default_rng(12)
    stack = SegmentStack(rng.uniform(0, 0.6, (2, 8, 8, 3)), 2)
    base = ExperienceBase([(stack, np.array([1, 0]))], "human")
    _, losses = train_asi(base, init_attention_params(2, seed=0), lr=1e-3,
                          epochs=40, batch=1, seed=0)
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_asi_gradients_match_finite_differences():
    rng = np.random.default_rng(13)
    params = init_attention_params(2, seed=4)
    stacks = rng.uniform(0.05, 0.45, (2, 2, 4, 4, 3))
    stacks[:, 1] *= 0.3  # keep the merged image away from the clamp
    targets = rng.uniform(0.0, 0.9, (2, 4, 4, 3))

    def loss_fn():
        return asi_loss_forward(params, stacks, targets)[0]

    _, cache = asi_loss_forward(params, stacks, targets)
    grads = asi_loss_backward(params, cache)
    assert nn.grad_check(loss_fn, params.params, grads, step=1e-4) < 1e-3


# ---------------------------------------------------------------------------
# experience base serialisation
# ---------------------------------------------------------------------------

def test_experience_base_roundtrip(tmp_path, small_dataset):
    d = small_dataset
    base = build_experience_base(d["samples"][:5], d["backend"], ("disc", "box"), 4)
    save_experience_base(base, tmp_path / "base")
    loaded = load_experience_base(tmp_path / "base")
    assert loaded.provenance == base.provenance
    assert len(loaded) == len(base)
    for (s1, sel1), (s2, sel2) in zip(base.records, loaded.records):
        assert np.array_equal(s1.data, s2.data)
        assert s1.valid_count == s2.valid_count
        assert np.array_equal(sel1, sel2)


def test_every_selection_has_an_interesting_segment(small_dataset):
    d = small_dataset
    base = build_experience_base(d["samples"], d["backend"], ("disc", "box"), 4)
    for stack, sel in base.records:
        assert sel.sum() >= 1
        assert sel[stack.valid_count:].sum() == 0
