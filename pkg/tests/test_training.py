"""Training phases: freeze contracts, degenerate configs, determinism."""

import numpy as np
import pytest

from semcom.asi import TrainingDivergence
from semcom.codec import mask_forward
from semcom.training import (DegenerateMaskError, FreezeSet, FreezeViolation, TrainConfig,
                             crossed_train, encode_dataset, init_pipeline, load_pipeline,
                             save_pipeline, train_asc, train_channel_phase,
                             train_semantic_phase)


def _tiny_pipeline(seed=0):
    return init_pipeline(image_size=(16, 16), k_max=4, widths=(8, 16), mask_hidden=8,
                         channel_hidden=64, seed=seed)


def _tiny_sources(small_dataset, n=16):
    return np.stack([s.image.pixels for s in small_dataset["samples"][:n]])


def _features(pipe, sources):
    return encode_dataset(pipe.codec, sources)


# ---------------------------------------------------------------------------
# channel phase
# ---------------------------------------------------------------------------

def test_zero_lr_leaves_params_bitwise_unchanged(small_dataset):
    pipe = _tiny_pipeline()
    feats = _features(pipe, _tiny_sources(small_dataset))
    before = {k: v.copy() for k, v in pipe.channel.params.items()}
    tc = TrainConfig(phase="channel", lr=0.0, epochs=4, batch=8, snr_db_train=10.0, seed=0)
    losses = train_channel_phase(feats, pipe, tc)
    for k, v in pipe.channel.params.items():
        assert np.array_equal(v, before[k])
    assert losses == [losses[0]] * len(losses)  # constant trace


def test_channel_phase_freezes_other_modules(small_dataset):
    pipe = _tiny_pipeline()
    feats = _features(pipe, _tiny_sources(small_dataset))
    digests = pipe.digests()
    tc = TrainConfig(phase="channel", lr=1e-3, epochs=2, batch=8, snr_db_train=10.0, seed=0)
    losses = train_channel_phase(feats, pipe, tc)
    after = pipe.digests()
    for name in ("asi", "semantic", "mask"):
        assert after[name] == digests[name]
    assert after["channel"] != digests["channel"]
    assert losses[-1] <= losses[0]


def test_channel_phase_divergence_aborts_with_trace(small_dataset):
    pipe = _tiny_pipeline()
    feats = _features(pipe, _tiny_sources(small_dataset))
    tc = TrainConfig(phase="channel", lr=50.0, epochs=10, batch=8, snr_db_train=10.0, seed=0)
    with pytest.raises(TrainingDivergence):
        with np.errstate(all="ignore"):
            train_channel_phase(feats, pipe, tc)


# ---------------------------------------------------------------------------
# semantic phase
# ---------------------------------------------------------------------------

def test_semantic_phase_freezes_channel(small_dataset):
    pipe = _tiny_pipeline()
    sources = _tiny_sources(small_dataset)
    digests = pipe.digests()
    tc = TrainConfig(phase="semantic", lr=1e-3, epochs=2, batch=8, snr_db_train=10.0, seed=0)
    train_semantic_phase(sources, pipe, tc)
    after = pipe.digests()
    for name in ("asi", "channel", "mask", "mi"):
        assert after[name] == digests[name]
    assert after["semantic"] != digests["semantic"]


def test_semantic_phase_single_image_non_increasing_trend(small_dataset):
    pipe = _tiny_pipeline()
    sources = _tiny_sources(small_dataset, n=1)
    tc = TrainConfig(phase="semantic", lr=1e-3, epochs=50, batch=1, snr_db_train=10.0, seed=0)
    losses = train_semantic_phase(sources, pipe, tc)
    assert losses[-1] < losses[0]
    slope = np.polyfit(np.arange(len(losses)), losses, 1)[0]
    assert slope <= 0.0


# ---------------------------------------------------------------------------
# crossed training
# ---------------------------------------------------------------------------

def test_crossed_single_round_is_channel_then_semantic(small_dataset):
    pipe = _tiny_pipeline()
    sources = _tiny_sources(small_dataset)
    tc = TrainConfig(phase="crossed", lr=1e-3, epochs=1, batch=8, snr_db_train=10.0,
                     crossed_rounds=1, convergence_eps=0.0, seed=0)
    log, e2e = crossed_train(sources, pipe, tc)
    assert [(e["round"], e["phase"]) for e in log] == [(1, "channel"), (1, "semantic")]
    assert len(e2e) == 2


def test_crossed_huge_eps_stops_after_first_round(small_dataset):
    pipe = _tiny_pipeline()
    sources = _tiny_sources(small_dataset)
    tc = TrainConfig(phase="crossed", lr=1e-3, epochs=1, batch=8, snr_db_train=10.0,
                     crossed_rounds=5, convergence_eps=1e18, seed=0)
    log, _ = crossed_train(sources, pipe, tc)
    assert [e["phase"] for e in log] == ["channel", "semantic"]


def test_crossed_log_alternates_and_respects_freezes(small_dataset):
    pipe = _tiny_pipeline()
    sources = _tiny_sources(small_dataset)
    tc = TrainConfig(phase="crossed", lr=1e-3, epochs=1, batch=8, snr_db_train=10.0,
                     crossed_rounds=3, convergence_eps=0.0, seed=0)
    log, e2e = crossed_train(sources, pipe, tc)
    assert [e["phase"] for e in log] == ["channel", "semantic"] * 3
    for entry in log:
        # the MI statistics net co-trains with the channel codec
        frozen = ("asi", "semantic", "mask") if entry["phase"] == "channel" \
            else ("asi", "channel", "mask", "mi")
        for name in frozen:
            assert entry["digests_after"][name] == entry["digests_before"][name]
        assert all(np.isfinite(v) for v in entry["losses"])


def test_crossed_reproducible_bitwise(small_dataset):
    sources = _tiny_sources(small_dataset)
    tc = TrainConfig(phase="crossed", lr=1e-3, epochs=2, batch=8, snr_db_train=10.0,
                     crossed_rounds=2, convergence_eps=0.0, seed=11)
    runs = []
    for _ in range(2):
        pipe = _tiny_pipeline(seed=5)
        log, e2e = crossed_train(sources, pipe, tc)
        runs.append((e2e, [e["losses"] for e in log], pipe.digests()))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]
    assert runs[0][2] == runs[1][2]


# ---------------------------------------------------------------------------
# mask (asc) phase
# ---------------------------------------------------------------------------

def _pretrained_tiny_sc(small_dataset, seed=0):
    pipe = _tiny_pipeline(seed=seed)
    sources = _tiny_sources(small_dataset)
    tc = TrainConfig(phase="crossed", lr=2e-3, epochs=4, batch=8, snr_db_train=10.0,
                     crossed_rounds=1, convergence_eps=0.0, seed=seed)
    crossed_train(sources, pipe, tc)
    return pipe, sources


def test_asc_mu_zero_converges_to_all_ones(small_dataset):
    pipe, sources = _pretrained_tiny_sc(small_dataset)
    tc = TrainConfig(phase="asc", lr=5e-3, epochs=20, batch=8, snr_db_train=10.0, seed=0)
    losses, ratios, final_ratio = train_asc(sources, pipe, tc, mu=0.0)
    assert final_ratio > 0.9  # drifting to the all-ones optimum
    assert losses[-1] < 1e-3  # path difference vanishes there


def test_asc_freezes_sc_and_attention(small_dataset):
    pipe, sources = _pretrained_tiny_sc(small_dataset)
    digests = pipe.digests()
    tc = TrainConfig(phase="asc", lr=1e-3, epochs=2, batch=8, snr_db_train=10.0, seed=0)
    train_asc(sources, pipe, tc, mu=0.01)
    after = pipe.digests()
    for name in ("asi", "semantic", "channel", "mi"):
        assert after[name] == digests[name]
    assert after["mask"] != digests["mask"]


def test_asc_all_zero_mask_aborts(small_dataset):
    pipe, sources = _pretrained_tiny_sc(small_dataset)
    pipe.codec.params["mskh_w"][:] = 0.0
    pipe.codec.params["mskh_b"][:] = -50.0
    tc = TrainConfig(phase="asc", lr=1e-6, epochs=2, batch=8, snr_db_train=10.0, seed=0)
    with pytest.raises(DegenerateMaskError, match="mu"):
        train_asc(sources, pipe, tc, mu=0.05)


def test_asc_desk_mu_run_stays_strictly_inside_unit_interval(trained_desk):
    ratio = trained_desk["asc_final_ratio"]
    losses = trained_desk["asc_losses"]
    assert 0.0 < ratio < 1.0
    assert losses[-1] < 0.5 * losses[0]


# ---------------------------------------------------------------------------
# freeze set and checkpoints
# ---------------------------------------------------------------------------

def test_freeze_set_detects_mutation(small_dataset):
    pipe = _tiny_pipeline()
    fs = FreezeSet.capture(pipe, ["semantic", "channel"])
    pipe.channel.params["cenc_b1"][0] += 1.0
    with pytest.raises(FreezeViolation, match="channel"):
        fs.verify(pipe)


def test_pipeline_checkpoint_roundtrip(tmp_path):
    pipe = _tiny_pipeline(seed=3)
    path = tmp_path / "ckpt.npz"
    save_pipeline(pipe, path, extra_meta={"config_digest": "abc"})
    loaded = load_pipeline(path)
    assert loaded.digests() == pipe.digests()
    assert loaded.image_size == pipe.image_size
    assert loaded.codec.widths == pipe.codec.widths


def test_mask_trace_reports_ratios(small_dataset):
    pipe, sources = _pretrained_tiny_sc(small_dataset)
    tc = TrainConfig(phase="asc", lr=1e-3, epochs=3, batch=8, snr_db_train=10.0, seed=0)
    losses, ratios, final_ratio = train_asc(sources, pipe, tc, mu=0.01)
    assert len(ratios) == len(losses) == tc.epochs + 1
    feats = encode_dataset(pipe.codec, sources)
    _, bits, _, _ = mask_forward(pipe.codec, feats, hard=True)
    assert final_ratio == pytest.approx(float(bits.mean()))
