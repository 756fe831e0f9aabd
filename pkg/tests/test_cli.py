import json
import logging
from pathlib import Path

import numpy as np
import pytest

from funcmap import artifacts as A
from funcmap import cli
from funcmap import pipeline as P

TINY = """
[simgen]
n_subjects = 2
n_sessions = 2
session_duration = 40

[encoder]
epochs = 1
pairs_per_epoch = 64
batch_size = 32
val_pairs = 32
knn_subset = 32

[recon]
epochs = 1
batch_size = 8
max_train_windows = 16
max_val_windows = 8

[baselines]
kinds = copybest, zero
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    p.write_text(TINY)
    return p


@pytest.fixture(scope="module")
def sim(cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("sim") / "data"
    assert run("simgen", "--config", cfg, "--seed", 42, "--out", out) == 0
    return out


def _tree(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_simgen_twice_byte_identical(cfg, sim, tmp_path):
    again = tmp_path / "data2"
    assert run("simgen", "--config", cfg, "--seed", 42, "--out", again) == 0
    assert _tree(sim) == _tree(again)
    other = tmp_path / "data3"
    assert run("simgen", "--config", cfg, "--seed", 43, "--out", other) == 0
    assert _tree(sim) != _tree(other)


def test_dataset_round_trip(sim):
    ds = A.load_artifact(sim, "dataset")
    again = P.make_dataset(P.RunConfig.from_text(TINY, seed=42))
    np.testing.assert_array_equal(ds.waveforms, again.waveforms)


def _pipeline(cfg, sim, root: Path) -> dict:
    steps = [
        ("enc", ["train-encoder", "--objective", "psc", "--data", sim]),
        ("emb", ["eval-embedding", "--encoder", root / "enc", "--mode", "held-out-time", "--data", sim]),
        ("rec", ["train-recon", "--identity", "coord", "--data", sim]),
        ("rsc", ["eval-recon", "--model", root / "rec", "--data", sim]),
        ("bas", ["baselines", "--data", sim]),
    ]
    for name, argv in steps:
        assert run(*argv, "--config", cfg, "--seed", 42, "--out", root / name) == 0, name
    assert run("report", "--out", root / "rep", "--inputs", *(root / n for n, _ in steps)) == 0
    return {n: json.loads((root / n / "metrics.json").read_text()) for n, _ in steps}


def _flatten(obj, prefix=""):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _flatten(v, f"{prefix}/{k}")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield from _flatten(v, f"{prefix}[{i}]")
    else:
        yield prefix, obj


def test_pipeline_deterministic(cfg, sim, tmp_path):
    a = dict(_flatten(_pipeline(cfg, sim, tmp_path / "a")))
    b = dict(_flatten(_pipeline(cfg, sim, tmp_path / "b")))
    assert a.keys() == b.keys()
    for k, v in a.items():
        if isinstance(v, float):
            assert b[k] == pytest.approx(v, abs=1e-6, nan_ok=True), k
        else:
            assert b[k] == v, k
    for d in ("enc", "emb", "rec", "rsc", "bas", "rep"):
        A.verify_manifest(tmp_path / "a" / d)
    assert list((tmp_path / "a" / "rep").glob("*.svg"))


def test_report_missing_metrics_is_atomic(tmp_path):
    (tmp_path / "stage").mkdir()
    out = tmp_path / "rep"
    assert run("report", "--out", out, "--inputs", tmp_path / "stage") == 1
    assert not out.exists()
    assert not any(p.name.startswith(".") for p in tmp_path.iterdir())


def test_tampered_dataset_refused(cfg, sim, tmp_path):
    bad = tmp_path / "bad"
    assert run("simgen", "--config", cfg, "--seed", 42, "--out", bad) == 0
    victim = next(p for p in sorted(bad.iterdir()) if p.name != "artifact.json")
    raw = bytearray(victim.read_bytes())
    raw[-1] ^= 0xFF
    victim.write_bytes(bytes(raw))
    assert run("preprocess", "--data", bad, "--out", tmp_path / "win") == 1
    assert not (tmp_path / "win").exists()


def test_usage_errors(capsys):
    assert run("frobnicate", "--out", "x") == 2
    assert "usage" in capsys.readouterr().err
    assert run("simgen") == 2


def test_malformed_config_names_key(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("[encoder]\nlearning_rate = 0.1\n")
    assert run("simgen", "--config", p, "--out", tmp_path / "o") == 1
    assert "learning_rate" in capsys.readouterr().err
    p.write_text("[simgen]\nn_subjects = many\n")
    assert run("simgen", "--config", p, "--out", tmp_path / "o") == 1
    assert "n_subjects" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_run_config_seed_substreams():
    rc = P.RunConfig.from_text("[run]\nseed = 3\n")
    assert rc.seed == 3 and P.RunConfig.from_text("[run]\nseed = 3\n", seed=9).seed == 9
    assert rc.encoder_config("psc").seed != rc.encoder_config("msc").seed
    assert rc.encoder_config("psc").seed == P.stage_seed(3, "encoder.psc")
    with pytest.raises(P.ConfigError):
        P.RunConfig.from_text("[recon]\nregion = Cortex\n")
    with pytest.raises(P.ConfigError):
        P.RunConfig.from_text("[nope]\nx = 1\n")


def test_held_out_channel_warns_on_small_regions(tmp_path, caplog):
    cfg = tmp_path / "three.cfg"
    cfg.write_text(TINY.replace("session_duration = 40", "session_duration = 40\nn_channels_per_region = 3"))
    data = tmp_path / "data"
    assert run("simgen", "--config", cfg, "--out", data) == 0
    assert run("train-encoder", "--config", cfg, "--data", data, "--out", tmp_path / "enc") == 0
    with caplog.at_level(logging.WARNING):
        code = run("eval-embedding", "--config", cfg, "--data", data, "--encoder", tmp_path / "enc",
                   "--mode", "held-out-channel", "--out", tmp_path / "emb")
    # every region has 3 channels, so all are excluded and nothing is left to score
    assert code == 1
    assert any("excluded from held-out-channel" in r.getMessage() for r in caplog.records)
    assert not (tmp_path / "emb").exists()
