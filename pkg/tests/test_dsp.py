import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal

from funcmap import dsp


FS = 1000.0


def tone(freq, dur=10.0, fs=FS, amp=1.0):
    t = np.arange(int(round(dur * fs))) / fs
    return amp * np.sin(2 * np.pi * freq * t)


def fft_amp(x, freq, fs=FS):
    """Amplitude of an integer-cycle tone via the FFT bin (independent oracle)."""
    spec = np.fft.rfft(x)
    k = int(round(freq * len(x) / fs))
    return 2 * np.abs(spec[k]) / len(x)


def trace(x, fs=FS):
    return dsp.RawTrace(x, fs)


# -- filters -----------------------------------------------------------------------------


def test_lowpass_passband_amplitude():
    x = tone(10.0, fs=2000.0)
    y = dsp.zero_phase_filter(trace(x, 2000.0), "butter_lowpass", cutoff=500.0, order=4).samples
    assert abs(fft_amp(y, 10.0, 2000.0) / fft_amp(x, 10.0, 2000.0) - 1) < 0.01


def test_notch_attenuates_60hz_by_20db():
    x = tone(60.0)
    y = dsp.zero_phase_filter(trace(x), "iir_notch", freq=60.0, q=30.0).samples
    mid = slice(2000, 8000)  # away from the edges
    att = 20 * np.log10(np.abs(y[mid]).max() / np.abs(x[mid]).max())
    assert att < -20


def test_zero_phase_impulse_symmetry():
    x = np.zeros(20001)
    x[10000] = 1.0  # far from the edges, so padding transients have decayed
    for kind, kw in (("butter_lowpass", {"cutoff": 50.0, "order": 4}), ("iir_notch", {"freq": 60.0, "q": 30.0})):
        y = dsp.zero_phase_filter(trace(x), kind, **kw).samples
        np.testing.assert_allclose(y[10000 - 300 : 10000], y[10001 : 10301][::-1], atol=1e-12)


def test_zero_phase_lag_zero():
    rng = np.random.default_rng(0)
    x = signal.sosfiltfilt(signal.butter(4, 30, fs=FS, output="sos"), rng.standard_normal(20000))
    y = dsp.zero_phase_filter(trace(x), "butter_lowpass", cutoff=50.0, order=2).samples
    lags = signal.correlation_lags(len(x), len(y))
    assert lags[np.argmax(signal.correlate(x, y))] == 0


def test_filter_preserves_length_and_rejects_nyquist():
    x = tone(5.0, 2.0)
    assert len(dsp.zero_phase_filter(trace(x), "butter_lowpass", cutoff=40.0).samples) == len(x)
    with pytest.raises(ValueError):
        dsp.zero_phase_filter(trace(x), "butter_lowpass", cutoff=500.0)
    with pytest.raises(ValueError):
        dsp.zero_phase_filter(trace(x), "iir_notch", freq=600.0)
    with pytest.raises(ValueError):
        dsp.design_filter("bandpass", FS)


def test_unstable_design_rejected(monkeypatch):
    bad = np.array([[1.0, 0.0, 0.0, 1.0, -2.5, 1.5]])  # poles at 1 and 1.5
    monkeypatch.setattr(dsp.signal, "butter", lambda *a, **k: bad)
    with pytest.raises(ValueError, match="unstable"):
        dsp.design_filter("butter_lowpass", FS, cutoff=100.0)


# -- resampling ---------------------------------------------------------------------------


def test_resample_identity():
    x = tone(7.0, 3.0)
    y = dsp.resample_to(trace(x), FS)
    np.testing.assert_array_equal(y.samples, x)


def test_resample_2k_to_1k_keeps_tone():
    x = tone(20.0, 10.0, fs=2000.0)
    y = dsp.resample_to(trace(x, 2000.0), 1000.0)
    assert y.fs == 1000.0
    f = np.fft.rfftfreq(len(y.samples), 1 / 1000.0)
    assert f[np.argmax(np.abs(np.fft.rfft(y.samples)))] == pytest.approx(20.0)
    assert abs(fft_amp(y.samples, 20.0) - 1.0) < 0.01


@pytest.mark.parametrize("fs_in", [2000.0, 1500.0, 2048.0, 500.0])
def test_resample_duration_within_one_sample(fs_in):
    n = int(10.0 * fs_in)
    y = dsp.resample_to(trace(np.random.default_rng(0).standard_normal(n), fs_in), 1000.0)
    assert abs(len(y.samples) - 10000) <= 1


def test_resample_rejects_nonpositive():
    with pytest.raises(ValueError):
        dsp.resample_to(trace(np.ones(10) + np.arange(10)), 0)


# -- normalisation and rejection ---------------------------------------------------------


def test_zscore_error_and_definition():
    with pytest.raises(ValueError):
        dsp.session_zscore(trace(np.full(100, 3.0)))
    x = np.random.default_rng(1).normal(5, 3, 5000)
    z = dsp.session_zscore(trace(x)).samples
    assert abs(z.mean()) < 1e-9 and abs(z.std() - 1) < 1e-9
    np.testing.assert_allclose(dsp.session_zscore(trace(z)).samples, z, atol=1e-12)


def windows_of(x, win=1000):
    return dsp.segment(trace(x), win, win)


def test_mad_rejects_spike_beyond_tau():
    x = np.random.default_rng(2).standard_normal(10000)
    med, sig = dsp.mad_stats(x)
    x[3500] = med + 12 * sig
    kept = dsp.mad_reject(windows_of(x), 10.0, x)
    assert [w.start_index for w in kept] == [i * 1000 for i in range(10) if i != 3]


def test_mad_keeps_gaussian_windows():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.standard_normal(10000)
        assert len(dsp.mad_reject(windows_of(x), 10.0, x)) == 10


def test_mad_tau_zero_and_degenerate():
    x = np.random.default_rng(4).standard_normal(5000)
    assert dsp.mad_reject(windows_of(x), 0.0, x) == []
    with pytest.raises(ValueError):
        dsp.mad_reject(windows_of(np.zeros(5000)), 10.0, np.zeros(5000))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 20), st.floats(0.5, 20))
def test_mad_monotone_in_tau(seed, t1, t2):
    lo, hi = sorted((t1, t2))
    rng = np.random.default_rng(seed)
    x = rng.standard_t(2, 8000)
    w = windows_of(x, 500)
    kept_lo = {v.start_index for v in dsp.mad_reject(w, lo, x)}
    kept_hi = {v.start_index for v in dsp.mad_reject(w, hi, x)}
    assert kept_lo <= kept_hi


# -- splitting ------------------------------------------------------------------------------


@pytest.mark.parametrize("n,expected", [(100, (70, 15, 15)), (10, (7, 1, 2)), (3, (2, 0, 1)), (6, (4, 0, 2))])
def test_split_floor_rule(n, expected):
    parts = dsp.chronological_split(list(range(n)))
    assert tuple(len(parts[k]) for k in dsp.SPLITS) == expected
    assert parts["train"] + parts["val"] + parts["test"] == list(range(n))


def test_split_too_small():
    with pytest.raises(ValueError):
        dsp.chronological_split([1, 2])


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 5000))
def test_split_partition_property(n):
    a, b, c = dsp.split_counts(n)
    assert a + b + c == n and min(a, b, c) >= 0
    assert a == int(np.floor(0.7 * n + 1e-9))


# -- branches -------------------------------------------------------------------------------


def clean_trace(dur, seed=0, fs=FS):
    rng = np.random.default_rng(seed)
    return dsp.RawTrace(rng.standard_normal(int(dur * fs)) + tone(13.0, dur, fs), fs, dsp.Provenance(1, 0, 2, "VO"))


def test_encoder_branch_counts_and_provenance():
    ws = dsp.preprocess_encoder_branch(clean_trace(60))
    assert len(ws) == 6
    assert [w.split for w in ws] == ["train"] * 4 + ["test"] * 2
    assert all(len(w.samples) == 10000 and w.provenance.region == "VO" for w in ws)
    assert [w.start_index for w in ws] == list(range(0, 60000, 10000))


def test_encoder_branch_rejects_spiky_window():
    x = clean_trace(60)
    x.samples[3 * 10000 + 4321] += 100 * x.samples.std()
    ws = dsp.preprocess_encoder_branch(x)
    assert 30000 not in [w.start_index for w in ws]
    assert len(ws) == 5


def test_encoder_branch_deterministic_and_resamples():
    a = dsp.preprocess_encoder_branch(clean_trace(40))
    b = dsp.preprocess_encoder_branch(clean_trace(40))
    assert all(np.array_equal(u.samples, v.samples) for u, v in zip(a, b))
    hi = dsp.preprocess_encoder_branch(clean_trace(40, fs=2000.0))
    assert all(len(w.samples) == 10000 and w.fs == 1000.0 for w in hi)


def test_encoder_branch_short_trace():
    with pytest.raises(ValueError):
        dsp.preprocess_encoder_branch(clean_trace(10))


def test_transformer_branch_window_counts():
    ws = dsp.preprocess_transformer_branch(clean_trace(100))
    train = [w for w in ws if w.split == "train"]
    assert len(train) == 139
    assert all(len(w.samples) == 1000 for w in ws)
    assert train[1].start_index - train[0].start_index == 500


def test_transformer_branch_no_window_straddles_a_boundary():
    ws = dsp.preprocess_transformer_branch(clean_trace(100))
    bounds = dsp.split_bounds(100000)
    for w in ws:
        lo, hi = bounds[w.split]
        assert lo <= w.start_index and w.stop_index <= hi
    ranges = {s: set() for s in dsp.SPLITS}
    for w in ws:
        ranges[w.split].update(range(w.start_index, w.stop_index))
    assert not ranges["train"] & ranges["val"] and not ranges["val"] & ranges["test"] and not ranges["train"] & ranges["test"]
    # the window that would cover the 70 s boundary is not emitted
    assert 69500 not in [w.start_index for w in ws]


def test_transformer_branch_120hz_attenuation():
    ref, probe = tone(10.0, 20.0), tone(120.0, 20.0)
    out = dsp.transformer_signal(trace(ref + probe)).samples
    ratio = fft_amp(out, 120.0) / fft_amp(out, 10.0)
    assert 20 * np.log10(ratio) < -40


def test_window_starts_match_branch():
    cfg = dsp.PreprocConfig.transformer()
    starts = dsp.split_window_starts(100000, cfg)
    ws = dsp.preprocess_transformer_branch(clean_trace(100))
    for s in dsp.SPLITS:
        assert list(starts[s]) == [w.start_index for w in ws if w.split == s]


def test_config_file_parsing(tmp_path):
    p = tmp_path / "p.cfg"
    p.write_text("[preprocess]\nbranch = transformer\nnotch_freqs = 50, 100\nmad_tau = 8\n")
    cfg = dsp.PreprocConfig.from_file(p)
    assert cfg.branch == "transformer" and cfg.notch_freqs == (50.0, 100.0) and cfg.mad_tau == 8.0
    assert cfg.window_sec == 1.0 and cfg.stride_sec == 0.5
    p.write_text("[preprocess]\nwindow_len = 3\n")
    with pytest.raises(KeyError, match="window_len"):
        dsp.PreprocConfig.from_file(p)
    with pytest.raises(ValueError):
        dsp.PreprocConfig(split_fractions=(0.5, 0.3, 0.3))


def test_encoder_defaults():
    c = dsp.PreprocConfig.encoder()
    assert (c.lp_order, c.lp_cutoff, c.notch_freqs, c.notch_q, c.target_fs, c.mad_tau) == (4, 500.0, (60.0, 120.0, 180.0), 30.0, 1000.0, 10.0)
    assert c.split_fractions == (0.70, 0.15, 0.15)
    t = dsp.PreprocConfig.transformer()
    assert (t.post_lp_order, t.post_lp_cutoff) == (2, 50.0)


def test_rawtrace_validation():
    with pytest.raises(ValueError):
        dsp.RawTrace(np.array([1.0, np.nan]), FS)
    with pytest.raises(ValueError):
        dsp.RawTrace(np.ones(3), 0.0)


def test_window_round_trip(tmp_path):
    ws = dsp.preprocess_transformer_branch(clean_trace(30))
    dsp.save_windows(ws, tmp_path, "w")
    back = dsp.load_windows(tmp_path, "w")
    assert len(back) == len(ws)
    for a, b in zip(ws, back):
        assert (a.start_index, a.split, a.provenance) == (b.start_index, b.split, b.provenance)
        np.testing.assert_array_equal(a.samples.astype(np.float32), b.samples)
