import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from funcmap import baselines as B, recon as R, simgen


@pytest.fixture(scope="module")
def data():
    ds = simgen.generate_dataset(simgen.SimSpec(n_subjects=2, n_sessions=2, session_duration=20, seed=5))
    return R.recon_data_from_dataset(ds)


# -- CopyBest ---------------------------------------------------------------------------------


def test_copybest_perfect_copy():
    rng = np.random.default_rng(0)
    src = rng.standard_normal((6, 5000))
    m = B.fit_copybest(src, 2 * src[[3]])
    assert m.index.tolist() == [3]
    assert m.gain[0] == pytest.approx(2.0)
    assert m.train_r[0] == pytest.approx(1.0)
    np.testing.assert_allclose(m.predict(src), 2 * src[[3]])


def test_copybest_uncorrelated_target():
    rng = np.random.default_rng(1)
    src = rng.standard_normal((5, 200_000))
    tgt = rng.standard_normal((1, 200_000))
    m = B.fit_copybest(src, tgt)
    # independent noise: |r| and |gain| are O(1/sqrt(T)) ~ 0.002
    assert abs(m.gain[0]) < 0.02 and abs(m.train_r[0]) < 0.02


def test_copybest_tie_and_degenerate_channels():
    rng = np.random.default_rng(2)
    s = rng.standard_normal(1000)
    src = np.stack([np.zeros(1000), s, s, -s])
    m = B.fit_copybest(src, s[None])
    assert m.index.tolist() == [1]  # zero-variance source skipped, first of the tied pair wins
    const = B.fit_copybest(src, np.full((1, 1000), 4.0))
    assert const.index[0] in (1, 2, 3) and const.train_r[0] == 0.0
    with pytest.raises(ValueError):
        B.fit_copybest(np.zeros((3, 100)), s[None, :100])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6), st.integers(1, 3))
def test_copybest_optimal_in_its_family(seed, n_src, n_tgt):
    rng = np.random.default_rng(seed)
    src = rng.standard_normal((n_src, 300))
    tgt = rng.standard_normal((n_tgt, n_src)) @ src + rng.standard_normal((n_tgt, 300))
    m = B.fit_copybest(src, tgt)
    for k in range(n_tgt):
        best = max(np.corrcoef(src[j], tgt[k])[0, 1] for j in range(n_src))
        assert m.train_r[k] == pytest.approx(best, abs=1e-9)
        # least-squares gain: no other scale of the chosen source fits better
        base = np.sum((m.gain[k] * src[m.index[k]] - tgt[k]) ** 2)
        for g in (m.gain[k] * 0.9, m.gain[k] * 1.1):
            assert base <= np.sum((g * src[m.index[k]] - tgt[k]) ** 2)


# -- architectures ------------------------------------------------------------------------------


def test_spec_defaults_and_validation():
    s = B.BaselineSpec("tcn")
    assert (s.fir_order, s.tcn_dilations, s.tcn_kernel, s.tcn_width, s.tcn_dropout) == (64, (1, 2, 4, 8, 16), 5, 128, 0.3)
    assert (s.gru_layers, s.gru_hidden, s.gru_dropout) == (2, 128, 0.3)
    c = B.BaselineTrainConfig()
    assert (c.lr, c.weight_decay, c.batch_size, c.max_epochs, c.patience) == (3e-4, 1e-4, 8, 150, 10)
    with pytest.raises(ValueError):
        B.BaselineSpec("lstm")
    with pytest.raises(ValueError):
        B.BaselineSpec("fir", fir_order=0)
    with pytest.raises(ValueError):
        B.BaselineSpec("gru", gru_dropout=1.0)
    with pytest.raises(ValueError):
        B.BaselineTrainConfig(max_epochs=10, patience=10)
    with pytest.raises(ValueError):
        B.build_baseline(B.BaselineSpec("fir"), 0, 2)


def test_fir_shape_and_kernel():
    m = B.build_baseline(B.BaselineSpec("fir"), 16, 4)
    assert m.conv.kernel_size == (65,) and m.conv.bias is not None
    assert m(torch.randn(2, 16, 300)).shape == (2, 4, 300)


def test_tcn_receptive_field():
    m = B.build_baseline(B.BaselineSpec("tcn"), 3, 2)
    assert m.receptive_field == 1 + 2 * 4 * 31 == 249
    assert m.receptive_field >= 65
    assert len(m.blocks) == 5
    # empirical: an impulse at t0 affects exactly [t0, t0 + rf - 1]
    m.eval()
    x = torch.zeros(1, 3, 600)
    with torch.no_grad():
        base = m(x)
        x[0, 0, 100] = 1.0
        diff = (m(x) - base).abs().sum(1)[0]
    moved = torch.nonzero(diff > 0).flatten()
    assert moved.min() == 100 and moved.max() <= 100 + m.receptive_field - 1


@pytest.mark.parametrize("kind", ["fir", "tcn", "gru"])
def test_causality(kind):
    torch.manual_seed(0)
    m = B.build_baseline(B.BaselineSpec(kind, tcn_width=16, gru_hidden=16), 3, 2).eval()
    x = torch.randn(2, 3, 400)
    y = torch.randn(2, 3, 400)
    t = 250
    mixed = torch.cat([x[..., :t], y[..., t:]], -1)
    with torch.no_grad():
        a, b = m(x), m(mixed)
    torch.testing.assert_close(a[..., :t], b[..., :t], atol=1e-5, rtol=0)
    assert (a[..., t:] - b[..., t:]).abs().max() > 0


def test_gru_and_zero_shapes():
    g = B.build_baseline(B.BaselineSpec("gru"), 5, 3)
    assert g.gru.num_layers == 2 and g.gru.hidden_size == 128
    assert g(torch.randn(2, 5, 50)).shape == (2, 3, 50)
    z = B.build_baseline(B.BaselineSpec("zero"), 5, 3)
    assert torch.equal(z(torch.randn(2, 5, 50)), torch.zeros(2, 3, 50))
    assert B.build_baseline(B.BaselineSpec("copybest"), 5, 3) is None


# -- training ---------------------------------------------------------------------------------


def tiny_problem(seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((16, 2, 80)).astype(np.float32)
    Y = (0.5 * X[:, :1] + 0.1 * rng.standard_normal((16, 1, 80))).astype(np.float32)
    return (X[:12], Y[:12]), (X[12:], Y[12:])


def test_early_stop_rules(monkeypatch):
    tr, va = tiny_problem()
    seq = itertools.count()
    monkeypatch.setattr(B, "_mse", lambda *a: 1.0 / (1 + next(seq)))
    res = B.train_baseline(B.CausalFIR(2, 1, 4), tr, va, B.BaselineTrainConfig(max_epochs=150))
    assert len(res.curves) == 150 and not res.stopped_early and res.best_epoch == 149
    monkeypatch.setattr(B, "_mse", lambda *a: 1.0)
    res = B.train_baseline(B.CausalFIR(2, 1, 4), tr, va, B.BaselineTrainConfig(max_epochs=150))
    assert len(res.curves) == 11 and res.stopped_early and res.best_epoch == 0


def test_training_restores_best_weights_and_learns():
    tr, va = tiny_problem()
    m = B.CausalFIR(2, 1, 4)
    res = B.train_baseline(m, tr, va, B.BaselineTrainConfig(lr=1e-2, max_epochs=40, patience=5))
    assert res.best_val == min(c["val_mse"] for c in res.curves)
    assert B._mse(m, torch.as_tensor(va[0]), torch.as_tensor(va[1]), 64) == pytest.approx(res.best_val, rel=1e-6)
    assert res.best_val < 0.1


def test_zero_skips_training():
    tr, va = tiny_problem()
    res = B.train_baseline(B.ZeroModel(1), tr, va)
    assert res.curves == []


def test_nan_aborts(monkeypatch):
    tr, va = tiny_problem()
    monkeypatch.setattr(B.F, "mse_loss", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(B.TrainingDiverged):
        B.train_baseline(B.CausalFIR(2, 1, 4), tr, va, B.BaselineTrainConfig(max_epochs=3, patience=1))


# -- data plumbing ----------------------------------------------------------------------------


def test_subject_arrays_and_copybest_signals(data):
    X, Y, keys, items = B.subject_arrays(data, 1, "GPi", "train")
    assert X.shape[1:] == (16, 1000) and Y.shape[1:] == (4, 1000) and len(keys) == len(items) == len(X)
    assert all(data.sessions[si].subject == 1 for si, _ in items)
    src, tgt = B.copybest_training_signals(data, 1, "GPi")
    assert src.shape == (16, 2 * 14_000) and tgt.shape == (4, 2 * 14_000)
    with pytest.raises(ValueError):
        B.subject_arrays(data, 7, "GPi", "train")


def test_fit_subject_and_predictor(data):
    cb = B.fit_subject_baseline("copybest", data, 0, "STN")
    zero = B.fit_subject_baseline("zero", data, 0, "STN")
    items = data.windows("test", [0])[:3]
    for model in (cb, zero):
        rows = R.evaluate_windows(B.baseline_predictor({0: model}, data, "STN"), data, items, "STN")
        assert len(rows) == 12
    zrows = R.evaluate_windows(B.baseline_predictor({0: zero}, data, "STN"), data, items, "STN")
    assert all(r["r"] is None for r in zrows)
    crows = R.evaluate_windows(B.baseline_predictor({0: cb}, data, "STN"), data, items, "STN")
    # STN and GPi share the beta burst schedule, so the copied source is positively correlated
    assert np.mean([r["r"] for r in crows]) > 0.2
