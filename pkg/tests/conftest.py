import numpy as np
import pytest

from semcom.datasets import load_dataset, make_synthetic_dataset
from semcom.skb import make_backend


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """240 annotated 32x32 synthetic images: 200 train / 40 test."""
    root = tmp_path_factory.mktemp("desk_data")
    make_synthetic_dataset(root, 240, (32, 32), seed=7)
    samples = load_dataset(root, size=(32, 32))
    return {
        "root": root,
        "train": samples[:200],
        "test": samples[200:],
        "backend": make_backend("oracle", dataset_root=root),
        "image_size": (32, 32),
        "k_max": 4,
    }


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """16 annotated 16x16 images for fast behavioural tests."""
    root = tmp_path_factory.mktemp("small_data")
    make_synthetic_dataset(root, 16, (16, 16), seed=3)
    samples = load_dataset(root, size=(16, 16))
    return {
        "root": root,
        "samples": samples,
        "backend": make_backend("oracle", dataset_root=root),
        "image_size": (16, 16),
        "k_max": 4,
    }


def aware_sources(samples, pipeline, backend, k_max):
    from semcom.asi import build_stack, integrate
    from semcom.skb import segment

    out = []
    for s in samples:
        segs = segment(s.image, backend, k_max=k_max)
        stack = build_stack(s.image, segs, k_max)
        out.append(integrate(stack, pipeline.asi, source_id=s.image.source_id).pixels)
    return np.stack(out)


@pytest.fixture(scope="session")
def trained_desk(desk_dataset):
    """Fully trained desk-profile pipelines (semantic + baseline).

    Semantic variant: attention supervision, 3 crossed rounds at 10 dB on
    the 200-image training split, then mask training at mu = 0.05.
    Baseline variant: the same crossed schedule on the raw images.
    Round logs, loss traces and the end-to-end trace are kept for the
    acceptance assertions.
    """
    from semcom.asi import build_experience_base
    from semcom.training import (TrainConfig, crossed_train, init_pipeline, train_asc,
                                 train_asi_phase)

    d = desk_dataset
    pipe = init_pipeline(image_size=d["image_size"], k_max=d["k_max"], seed=0)
    base = build_experience_base(d["train"], d["backend"], ("disc", "box"), d["k_max"])
    asi_losses = train_asi_phase(base, pipe, TrainConfig(phase="asi", lr=5e-2, epochs=30,
                                                         batch=16, seed=0))
    sources = aware_sources(d["train"], pipe, d["backend"], d["k_max"])
    tc = TrainConfig(phase="crossed", lr=2e-3, epochs=6, batch=16, snr_db_train=10.0,
                     crossed_rounds=3, convergence_eps=0.0, seed=0)
    round_log, e2e_trace = crossed_train(sources, pipe, tc)
    tc_asc = TrainConfig(phase="asc", lr=1e-3, epochs=8, batch=16, snr_db_train=10.0, seed=0)
    asc_losses, asc_ratios, final_ratio = train_asc(sources, pipe, tc_asc, mu=0.05)

    pipe_base = init_pipeline(image_size=d["image_size"], k_max=d["k_max"], seed=0)
    raw_sources = np.stack([s.image.pixels for s in d["train"]])
    round_log_b, e2e_trace_b = crossed_train(raw_sources, pipe_base, tc)

    return {
        "semantic": pipe,
        "baseline": pipe_base,
        "sources": sources,
        "asi_losses": asi_losses,
        "round_log": round_log,
        "e2e_trace": e2e_trace,
        "asc_losses": asc_losses,
        "asc_ratios": asc_ratios,
        "asc_final_ratio": final_ratio,
        "train_config": tc,
    }
