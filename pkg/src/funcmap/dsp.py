"""Per-channel preprocessing: zero-phase IIR filtering, resampling, normalization,
artifact rejection, chronological splits, and the two windowing branches."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Provenance:
    subject: int = 0
    session: int = 0
    channel: int = 0
    region: str = ""


@dataclass
class RawTrace:
    samples: np.ndarray
    fs: float
    provenance: Provenance = field(default_factory=Provenance)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.fs <= 0:
            raise ValueError("fs must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("trace contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.fs


@dataclass
class Window:
    samples: np.ndarray
    start_index: int
    split: str
    provenance: Provenance
    fs: float

    @property
    def stop_index(self) -> int:
        return self.start_index + len(self.samples)


@dataclass(frozen=True)
class PreprocConfig:
    branch: str = "encoder"
    lp_order: int = 4
    lp_cutoff: float = 500.0
    notch_freqs: tuple[float, ...] = (60.0, 120.0, 180.0)
    notch_q: float = 30.0
    target_fs: float = 1000.0
    mad_tau: float = 10.0
    split_fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    window_sec: float = 10.0
    stride_sec: float = 10.0
    # transformer branch only
    post_lp_order: int = 2
    post_lp_cutoff: float = 50.0

    def __post_init__(self):
        if self.branch not in ("encoder", "transformer"):
            raise ValueError(f"unknown branch {self.branch!r}")
        object.__setattr__(self, "notch_freqs", tuple(float(f) for f in self.notch_freqs))
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split_fractions must be three values summing to 1")
        if self.window_sec <= 0 or self.stride_sec <= 0:
            raise ValueError("window_sec and stride_sec must be positive")

    @classmethod
    def encoder(cls, **kw) -> "PreprocConfig":
        return cls(branch="encoder", **kw)

    @classmethod
    def transformer(cls, **kw) -> "PreprocConfig":
        kw.setdefault("window_sec", 1.0)
        kw.setdefault("stride_sec", 0.5)
        return cls(branch="transformer", **kw)

    @classmethod
    def from_section(cls, section: configparser.SectionProxy | dict) -> "PreprocConfig":
        """Build from a ``key = value`` config section; unknown keys are rejected."""
        known = cls.__dataclass_fields__
        kw = {}
        for key, raw in dict(section).items():
            if key not in known:
                raise KeyError(f"unknown preprocess key {key!r}")
            default = known[key].default
            if isinstance(default, tuple):
                kw[key] = tuple(float(v) for v in str(raw).replace(",", " ").split())
            elif isinstance(default, bool):
                kw[key] = str(raw).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kw[key] = int(raw)
            elif isinstance(default, float):
                kw[key] = float(raw)
            else:
                kw[key] = str(raw)
        branch = kw.pop("branch", "encoder")
        return cls.transformer(**kw) if branch == "transformer" else cls.encoder(**kw)

    @classmethod
    def from_file(cls, path: str | Path, section: str = "preprocess") -> "PreprocConfig":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        return cls.from_section(cp[section])


# -- filtering -----------------------------------------------------------------


def design_filter(kind: str, fs: float, **params) -> tuple[np.ndarray, int]:
    """Return (second-order sections, filter order) designed by bilinear transform."""
    nyq = fs / 2
    if kind == "butter_lowpass":
        cutoff, order = float(params["cutoff"]), int(params.get("order", 4))
        if not 0 < cutoff < nyq:
            raise ValueError(f"cutoff {cutoff} Hz must lie in (0, {nyq}) Hz")
        sos = signal.butter(order, cutoff, btype="lowpass", fs=fs, output="sos")
    elif kind == "iir_notch":
        freq, q = float(params["freq"]), float(params.get("q", 30.0))
        if not 0 < freq < nyq:
            raise ValueError(f"notch frequency {freq} Hz must lie in (0, {nyq}) Hz")
        b, a = signal.iirnotch(freq, q, fs=fs)
        sos = signal.tf2sos(b, a)
        order = 2
    else:
        raise ValueError(f"unknown filter kind {kind!r}")
    poles = np.concatenate([np.roots(s[3:]) for s in sos])
    if np.any(np.abs(poles) >= 1.0):
        raise ValueError(f"unstable {kind} design (pole magnitude {np.abs(poles).max():.6f})")
    return sos, order


def zero_phase_filter(x: RawTrace, kind: str, **params) -> RawTrace:
    """Forward-backward IIR filtering with reflect padding of 3x the filter order."""
    sos, order = design_filter(kind, x.fs, **params)
    padlen = min(3 * order, len(x.samples) - 1)
    y = signal.sosfiltfilt(sos, x.samples, padtype="even", padlen=padlen)
    return replace(x, samples=y)


def resample_to(x: RawTrace, target_fs: float) -> RawTrace:
    """Polyphase rational resampling with a Kaiser-windowed kernel."""
    if target_fs <= 0:
        raise ValueError("target_fs must be positive")
    if target_fs == x.fs:
        return replace(x, samples=x.samples.copy())
    ratio = Fraction(target_fs / x.fs).limit_denominator(10_000)
    y = signal.resample_poly(x.samples, ratio.numerator, ratio.denominator, window=("kaiser", 5.0))
    return RawTrace(y, float(target_fs), x.provenance)


def session_zscore(x: RawTrace) -> RawTrace:
    sd = x.samples.std()
    if not sd > 0:
        raise ValueError(f"zero-variance trace {x.provenance}")
    return replace(x, samples=(x.samples - x.samples.mean()) / sd)


def mad_stats(session: np.ndarray) -> tuple[float, float]:
    med = float(np.median(session))
    sigma = 1.4826 * float(np.median(np.abs(session - med)))
    return med, sigma


def mad_reject(windows: Sequence[Window], tau: float, session: np.ndarray) -> list[Window]:
    """Keep windows whose samples all lie within med +/- tau * MAD-sigma of ``session``."""
    med, sigma = mad_stats(np.asarray(session))
    if sigma == 0:
        raise ValueError("MAD-based sigma is zero (degenerate session)")
    lo, hi = med - tau * sigma, med + tau * sigma
    return [w for w in windows if w.samples.min() >= lo and w.samples.max() <= hi]


def split_counts(n: int, fractions: Sequence[float] = (0.70, 0.15, 0.15)) -> tuple[int, int, int]:
    if n < 3:
        raise ValueError(f"need at least 3 items to split, got {n}")
    n_train = math.floor(fractions[0] * n + 1e-9)
    n_val = math.floor(fractions[1] * n + 1e-9)
    return n_train, n_val, n - n_train - n_val


def chronological_split(items: Sequence, fractions: Sequence[float] = (0.70, 0.15, 0.15)) -> dict[str, list]:
    """First floor(f0*n) items to train, next floor(f1*n) to val, remainder to test."""
    n_train, n_val, _ = split_counts(len(items), fractions)
    items = list(items)
    return {
        "train": items[:n_train],
        "val": items[n_train : n_train + n_val],
        "test": items[n_train + n_val :],
    }


def segment(x: RawTrace, win: int, stride: int, lo: int = 0, hi: int | None = None, split: str = "") -> list[Window]:
    """Windows of ``win`` samples starting every ``stride`` samples, fully inside [lo, hi)."""
    hi = len(x.samples) if hi is None else hi
    out = []
    start = lo
    while start + win <= hi:
        out.append(Window(x.samples[start : start + win].copy(), start, split, x.provenance, x.fs))
        start += stride
    return out


def common_steps(x: RawTrace, cfg: PreprocConfig) -> RawTrace:
    """Anti-alias low-pass, resample, line-noise notches (z-scoring follows per branch).

    The anti-alias stage is skipped when its cutoff is not below the input Nyquist
    frequency (input already band-limited at or below the target rate).
    """
    if cfg.lp_cutoff < x.fs / 2:
        x = zero_phase_filter(x, "butter_lowpass", cutoff=cfg.lp_cutoff, order=cfg.lp_order)
    x = resample_to(x, cfg.target_fs)
    for f in cfg.notch_freqs:
        if f < x.fs / 2:
            x = zero_phase_filter(x, "iir_notch", freq=f, q=cfg.notch_q)
    return x


def preprocess_encoder_branch(x: RawTrace, cfg: PreprocConfig | None = None) -> list[Window]:
    cfg = cfg or PreprocConfig.encoder()
    if x.duration <= cfg.window_sec:
        raise ValueError(f"trace of {x.duration:.2f} s is not longer than one {cfg.window_sec} s window")
    x = session_zscore(common_steps(x, cfg))
    win = int(round(cfg.window_sec * x.fs))
    stride = int(round(cfg.stride_sec * x.fs))
    windows = segment(x, win, stride)
    kept = mad_reject(windows, cfg.mad_tau, x.samples)
    parts = chronological_split(kept, cfg.split_fractions)
    out = []
    for name in SPLITS:
        for w in parts[name]:
            w.split = name
            out.append(w)
    return out


def split_bounds(n_samples: int, fractions: Sequence[float] = (0.70, 0.15, 0.15)) -> dict[str, tuple[int, int]]:
    """Sample-index ranges of the chronological train/val/test parts of a session."""
    a = math.floor(fractions[0] * n_samples + 1e-9)
    b = a + math.floor(fractions[1] * n_samples + 1e-9)
    return {"train": (0, a), "val": (a, b), "test": (b, n_samples)}


def transformer_signal(x: RawTrace, cfg: PreprocConfig | None = None) -> RawTrace:
    """Continuous transformer-branch signal: common steps, extra low-pass, z-score."""
    cfg = cfg or PreprocConfig.transformer()
    x = common_steps(x, cfg)
    x = zero_phase_filter(x, "butter_lowpass", cutoff=cfg.post_lp_cutoff, order=cfg.post_lp_order)
    return session_zscore(x)


def split_window_starts(n_samples: int, cfg: PreprocConfig) -> dict[str, np.ndarray]:
    """Window start indices per split; every window lies inside its split's range."""
    win = int(round(cfg.window_sec * cfg.target_fs))
    stride = int(round(cfg.stride_sec * cfg.target_fs))
    return {name: np.arange(lo, hi - win + 1, stride) for name, (lo, hi) in split_bounds(n_samples, cfg.split_fractions).items()}


def preprocess_transformer_branch(x: RawTrace, cfg: PreprocConfig | None = None) -> list[Window]:
    cfg = cfg or PreprocConfig.transformer()
    x = transformer_signal(x, cfg)
    win = int(round(cfg.window_sec * x.fs))
    stride = int(round(cfg.stride_sec * x.fs))
    out = []
    for name, (lo, hi) in split_bounds(len(x.samples), cfg.split_fractions).items():
        out.extend(segment(x, win, stride, lo, hi, split=name))
    return out


# -- window persistence ---------------------------------------------------------


def save_windows(windows: Sequence[Window], directory: str | Path, name: str = "windows") -> Path:
    """Write a JSON window table and one contiguous float32 block."""
    import json

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lens = {len(w.samples) for w in windows}
    if len(lens) > 1:
        raise ValueError("all windows must share one length")
    block = np.stack([w.samples for w in windows]).astype("<f4") if windows else np.zeros((0, 0), "<f4")
    block.tofile(directory / f"{name}.f32")
    table = [
        {
            "subject": w.provenance.subject,
            "session": w.provenance.session,
            "channel": w.provenance.channel,
            "region": w.provenance.region,
            "split": w.split,
            "start_index": int(w.start_index),
            "fs": w.fs,
        }
        for w in windows
    ]
    meta = {"artifact": "windows", "version": 1, "length": lens.pop() if lens else 0, "windows": table}
    (directory / f"{name}.json").write_text(json.dumps(meta, indent=1))
    return directory


def load_windows(directory: str | Path, name: str = "windows") -> list[Window]:
    import json

    directory = Path(directory)
    meta = json.loads((directory / f"{name}.json").read_text())
    n, length = len(meta["windows"]), meta["length"]
    block = np.fromfile(directory / f"{name}.f32", dtype="<f4").reshape(n, length)
    out = []
    for row, data in zip(meta["windows"], block):
        prov = Provenance(row["subject"], row["session"], row["channel"], row["region"])
        out.append(Window(data.astype(np.float64), row["start_index"], row["split"], prov, row["fs"]))
    return out
