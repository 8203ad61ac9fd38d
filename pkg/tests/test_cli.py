"""CLI verbs, config handling, artifact and manifest contracts."""

import json

import numpy as np
import pytest

from semcom.cli import main
from semcom.config import ConfigError, load_run_config
from semcom.datasets import make_synthetic_dataset
from semcom.evaluation import read_metrics_csv


@pytest.fixture(scope="module")
def cli_env(tmp_path_factory):
    """Small dataset + config + quickly trained checkpoints for CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    make_synthetic_dataset(data, 10, (16, 16), seed=5)
    cfg = {
        "dataset_dir": str(data),
        "image_size": [16, 16],
        "backend": "oracle",
        "k_max": 4,
        "seed": 0,
        "output_dir": str(root / "out"),
        "interest_labels": ["disc", "box"],
        "channel": {"kind": "awgn", "snr_db": 10.0},
        "train": {"lr": 0.002, "epochs": 2, "batch": 8, "snr_db_train": 10.0,
                  "crossed_rounds": 1, "convergence_eps": 0.0},
        "model": {"widths": [8, 16], "mask_hidden": 8, "channel_hidden": 64},
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(cfg))

    sem_dir = root / "sem"
    assert main(["train", "--config", str(cfg_path), "crossed",
                 "--output-dir", str(sem_dir)]) == 0
    asc_dir = root / "asc"
    assert main(["train", "--config", str(cfg_path), "asc",
                 "--init-from", str(sem_dir / "checkpoint.npz"),
                 "--output-dir", str(asc_dir)]) == 0
    base_dir = root / "base"
    assert main(["train", "--config", str(cfg_path), "crossed",
                 "--set", "variant=baseline", "--output-dir", str(base_dir)]) == 0
    return {
        "root": root,
        "data": data,
        "config": cfg_path,
        "raw": cfg,
        "semantic_ckpt": asc_dir / "checkpoint.npz",
        "baseline_ckpt": base_dir / "checkpoint.npz",
        "sem_dir": sem_dir,
    }


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_unknown_config_keys_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"dataset_dir": ".", "typo_key": 1}))
    with pytest.raises(ConfigError, match="typo_key"):
        load_run_config(path)
    path.write_text(json.dumps({"train": {"lr": 0.1, "warmup": 2}}))
    with pytest.raises(ConfigError, match="warmup"):
        load_run_config(path)


def test_env_var_overrides_dataset_root(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"dataset_dir": "/nonexistent"}))
    monkeypatch.setenv("SEMCOM_DATASET_ROOT", str(tmp_path))
    cfg = load_run_config(path)
    assert cfg.dataset_dir == str(tmp_path)


def test_dotted_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 1}))
    cfg = load_run_config(path, {"train.lr": 0.5, "channel.snr_db": 3.0, "seed": 9})
    assert cfg.train.lr == 0.5
    assert cfg.channel.snr_db == 3.0
    assert cfg.seed == 9


# ---------------------------------------------------------------------------
# segment
# ---------------------------------------------------------------------------

def test_segment_trivial_backend_single_mask(cli_env, tmp_path):
    img = next((cli_env["data"] / "images").glob("*.png"))
    out = tmp_path / "seg"
    rc = main(["segment", "--config", str(cli_env["config"]), str(img),
               "--set", "backend=\"trivial\"", "--output-dir", str(out)])
    assert rc == 0
    assert (out / "mask_00.png").exists()
    assert not (out / "mask_01.png").exists()
    assert (out / "preview.png").exists()
    assert json.loads((out / "manifest.json").read_text())["verb"] == "segment"


def test_segment_oracle_mask_count_matches_annotations(cli_env, tmp_path):
    from semcom.datasets import load_sample

    stem = "img_0003"
    sample = load_sample(cli_env["data"], stem, size=(16, 16))
    out = tmp_path / "seg2"
    rc = main(["segment", "--config", str(cli_env["config"]),
               str(cli_env["data"] / "images" / f"{stem}.png"), "--output-dir", str(out)])
    assert rc == 0
    masks = sorted(out.glob("mask_*.png"))
    assert len(masks) == len(sample.instance_ids())


def test_segment_missing_file_fails_with_diagnostic(cli_env, tmp_path, capsys):
    rc = main(["segment", "--config", str(cli_env["config"]),
               str(tmp_path / "nope.png"), "--output-dir", str(tmp_path / "o")])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_segment_human_selection_preview(cli_env, tmp_path):
    img = next((cli_env["data"] / "images").glob("*.png"))
    out = tmp_path / "seg3"
    rc = main(["segment", "--config", str(cli_env["config"]), str(img),
               "--set", "backend=\"trivial\"", "--select", "1,0,0,0", "--output-dir", str(out)])
    assert rc == 0
    assert (out / "preview.png").exists()


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_asc_without_sc_checkpoint_names_artifact(cli_env, tmp_path, capsys):
    rc = main(["train", "--config", str(cli_env["config"]), "asc",
               "--output-dir", str(tmp_path / "x")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "asc" in err and "--init-from" in err


def test_train_crossed_single_round_log(cli_env):
    log = json.loads((cli_env["sem_dir"] / "round_log.json").read_text())
    assert [e["phase"] for e in log["rounds"]] == ["channel", "semantic"]
    assert len(log["e2e_trace"]) == 2


def test_train_rerun_reproduces_loss_csv_byte_identically(cli_env, tmp_path):
    out1 = tmp_path / "r1"
    out2 = tmp_path / "r2"
    for out in (out1, out2):
        rc = main(["train", "--config", str(cli_env["config"]), "semantic",
                   "--output-dir", str(out)])
        assert rc == 0
    assert (out1 / "loss_trace.csv").read_bytes() == (out2 / "loss_trace.csv").read_bytes()


def test_train_asi_writes_expected_artifacts(cli_env, tmp_path):
    out = tmp_path / "asi"
    rc = main(["train", "--config", str(cli_env["config"]), "asi",
               "--output-dir", str(out)])
    assert rc == 0
    assert (out / "checkpoint.npz").exists()
    trace = (out / "loss_trace.csv").read_text().splitlines()
    assert trace[0] == "step,phase,loss,mask_ratio,snr_db,seed"
    assert all(line.split(",")[1] == "asi" for line in trace[1:])
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_digest"]
    assert "checkpoint.npz" in manifest["artifacts"]


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_empty_snr_list_fails(cli_env, tmp_path, capsys):
    rc = main(["eval", "--config", str(cli_env["config"]),
               "--checkpoint", f"semantic={cli_env['semantic_ckpt']}",
               "--snr", "", "--output-dir", str(tmp_path / "e")])
    assert rc == 1
    assert "snr" in capsys.readouterr().err


def test_eval_row_cardinality_and_artifacts(cli_env, tmp_path):
    out = tmp_path / "ev"
    rc = main(["eval", "--config", str(cli_env["config"]),
               "--checkpoint", f"semantic={cli_env['semantic_ckpt']}",
               "--checkpoint", f"baseline={cli_env['baseline_ckpt']}",
               "--snr", "0,5,10,15,20", "--seeds", "0", "--limit", "4",
               "--output-dir", str(out)])
    assert rc == 0
    table = read_metrics_csv(out / "metrics.csv")
    assert len(table) == 5 * 1 * 2
    for name in ("psnr_vs_snr.png", "ssim_vs_snr.png", "loss_vs_epoch.png", "bit_report.json"):
        assert (out / name).exists()


def test_eval_rerun_byte_identical_csv(cli_env, tmp_path):
    outs = [tmp_path / "e1", tmp_path / "e2"]
    for out in outs:
        rc = main(["eval", "--config", str(cli_env["config"]),
                   "--checkpoint", f"semantic={cli_env['semantic_ckpt']}",
                   "--snr", "0,10", "--limit", "3", "--output-dir", str(out)])
        assert rc == 0
    assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()


# ---------------------------------------------------------------------------
# transmit
# ---------------------------------------------------------------------------

def test_transmit_writes_three_artifacts(cli_env, tmp_path):
    img = cli_env["data"] / "images" / "img_0001.png"
    out = tmp_path / "tx"
    rc = main(["transmit", "--config", str(cli_env["config"]), str(img),
               "--checkpoint", str(cli_env["semantic_ckpt"]),
               "--output-dir", str(out)])
    assert rc == 0
    for name in ("recovered.png", "integrity.json", "bit_report.json", "manifest.json"):
        assert (out / name).exists()
    integrity = json.loads((out / "integrity.json").read_text())
    assert integrity["threshold"] == 0.5
    assert all(set(s) == {"label", "iou", "preserved"} for s in integrity["segments"])
    bits = json.loads((out / "bit_report.json").read_text())
    assert bits["retained_elements"] <= bits["feature_elements"]


def test_transmit_tiny_image_precondition_error(cli_env, tmp_path, capsys):
    from PIL import Image

    tiny = tmp_path / "tiny.png"
    Image.new("RGB", (4, 4)).save(tiny)
    rc = main(["transmit", "--config", str(cli_env["config"]), str(tiny),
               "--checkpoint", str(cli_env["semantic_ckpt"]),
               "--output-dir", str(tmp_path / "t2")])
    assert rc == 1
    assert "too small" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def test_report_rerenders_from_csv(cli_env, tmp_path):
    src = tmp_path / "ev_src"
    rc = main(["eval", "--config", str(cli_env["config"]),
               "--checkpoint", f"semantic={cli_env['semantic_ckpt']}",
               "--snr", "0,10", "--limit", "3", "--output-dir", str(src)])
    assert rc == 0
    out = tmp_path / "rep"
    rc = main(["report", "--config", str(cli_env["config"]),
               "--metrics", str(src / "metrics.csv"), "--output-dir", str(out)])
    assert rc == 0
    assert (out / "psnr_vs_snr.png").exists()
    assert (out / "metrics.csv").read_bytes() == (src / "metrics.csv").read_bytes()
