"""Embedding-space evaluation, reconstruction statistics, and interpretability probes."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import signal, stats

log = logging.getLogger(__name__)

WELCH_SEG_SEC = 1.0


# -- k-NN --------------------------------------------------------------------------


def _distances(a: np.ndarray, b: np.ndarray, metric: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if metric == "euclidean":
        d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
        return np.sqrt(np.maximum(d2, 0.0))
    if metric == "cosine":
        an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
        bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
        return 1.0 - an @ bn.T
    raise ValueError(f"unknown metric {metric!r}")


def knn_classify(train_embs, train_labels, test_embs, k: int = 10, metric: str = "euclidean") -> np.ndarray:
    """Majority vote of the k nearest training embeddings.

    Ties go to the label with the smallest mean distance among its voters, then to
    the label that sorts first.
    """
    train_labels = np.asarray(train_labels)
    if len(train_labels) == 0:
        raise ValueError("empty training set")
    if not 1 <= k <= len(train_labels):
        raise ValueError(f"k={k} must lie in [1, {len(train_labels)}]")
    d = _distances(test_embs, train_embs, metric)
    nn_idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    classes = np.unique(train_labels)
    preds = []
    for row, idx in zip(d, nn_idx):
        labs = train_labels[idx]
        best = None
        for c in classes:
            sel = labs == c
            n = int(sel.sum())
            if n == 0:
                continue
            key = (-n, float(row[idx][sel].mean()))
            if best is None or key < best[0]:
                best = (key, c)
        preds.append(best[1])
    return np.asarray(preds, dtype=train_labels.dtype)


@dataclass
class ConfusionMatrix:
    labels: list[str]
    counts: np.ndarray

    @property
    def normalized(self) -> np.ndarray:
        sums = self.counts.sum(1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(sums > 0, self.counts / np.maximum(sums, 1), 0.0)
        return out

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "counts": self.counts.tolist()}


def confusion_matrix(true, pred, labels: Sequence[str]) -> ConfusionMatrix:
    lut = {l: i for i, l in enumerate(labels)}
    m = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(true, pred):
        m[lut[t], lut[p]] += 1
    return ConfusionMatrix(list(labels), m)


@dataclass
class SplitReport:
    mode: str
    accuracy: float
    chance: float
    confusion: ConfusionMatrix
    n_train: int
    n_test: int
    regions: list[str]
    excluded_regions: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "confusion"}
        d["confusion"] = self.confusion.to_dict()
        return d


def split_eval(Z: np.ndarray, table, mode: str, k: int = 10, metric: str = "euclidean",
               min_channels: int = 4) -> SplitReport:
    """Held-out-time or held-out-channel k-NN evaluation over one embedding table.

    ``table`` carries region/subject/session/channel/split columns aligned with ``Z``.
    Held-out time: train-split windows are references, test-split windows are queries.
    Held-out channel: only regions with at least ``min_channels`` channels per recording
    take part; the highest-index channel of each is withheld and its test windows are
    the queries, while the remaining channels' train windows are the references.
    """
    region = np.asarray(table.region)
    split = np.asarray(table.split)
    if mode == "held_out_time":
        ref = split == "train"
        qry = split == "test"
        excluded: list[str] = []
    elif mode == "held_out_channel":
        unit = list(zip(table.subject, table.session, region))
        chans: dict[tuple, set] = {}
        for u, c in zip(unit, table.channel):
            chans.setdefault(u, set()).add(int(c))
        ok_units = {u for u, cs in chans.items() if len(cs) >= min_channels}
        excluded = sorted({u[2] for u in chans} - {u[2] for u in ok_units})
        for r in excluded:
            log.warning("region %s has fewer than %d channels; excluded from held-out-channel evaluation", r, min_channels)
        held = {u: max(chans[u]) for u in ok_units}
        in_ok = np.asarray([u in ok_units for u in unit])
        is_held = np.asarray([u in ok_units and int(c) == held[u] for u, c in zip(unit, table.channel)])
        ref = in_ok & ~is_held & (split == "train")
        qry = is_held & (split == "test")
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if not ref.any() or not qry.any():
        raise ValueError(f"no qualifying windows for {mode}")
    pred = knn_classify(Z[ref], region[ref], Z[qry], k=min(k, int(ref.sum())), metric=metric)
    labels = sorted(set(region[ref]) | set(region[qry]))
    acc = float(np.mean(pred == region[qry]))
    return SplitReport(mode, acc, 1.0 / len(set(region[qry])), confusion_matrix(region[qry], pred, labels),
                       int(ref.sum()), int(qry.sum()), labels, excluded)


# -- correlation statistics ----------------------------------------------------------


def pearson_r(a: np.ndarray, b: np.ndarray, eps: float = 1e-12) -> float | None:
    """Pearson correlation over time, or None when either sequence is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt((a * a).sum()), np.sqrt((b * b).sum())
    if na <= eps * max(1.0, np.abs(a).max(initial=0)) or nb <= eps * max(1.0, np.abs(b).max(initial=0)):
        return None
    return float(np.clip((a * b).sum() / (na * nb), -1.0, 1.0))


def fisher_mean(rs: Sequence[float]) -> float:
    """tanh of the mean arctanh of the correlations."""
    rs = np.asarray(list(rs), dtype=np.float64)
    if rs.size == 0:
        raise ValueError("no correlation values")
    if np.any(np.abs(rs) >= 1):
        raise ValueError("correlations must satisfy |r| < 1")
    return float(np.tanh(np.arctanh(rs).mean()))


def fisher_mean_clipped(rs: Sequence[float], limit: float = 1 - 1e-7) -> float:
    return fisher_mean(np.clip(np.asarray(list(rs), float), -limit, limit))


def holm(pvals: Sequence[float]) -> np.ndarray:
    p = np.asarray(pvals, dtype=np.float64)
    m = p.size
    order = np.argsort(p, kind="stable")
    adj = np.empty(m)
    running = 0.0
    for rank, i in enumerate(order):
        running = max(running, (m - rank) * p[i])
        adj[i] = min(1.0, running)
    return adj


def benjamini_hochberg(pvals: Sequence[float]) -> np.ndarray:
    p = np.asarray(pvals, dtype=np.float64)
    m = p.size
    order = np.argsort(p, kind="stable")
    adj = np.empty(m)
    running = 1.0
    for rank in range(m - 1, -1, -1):
        i = order[rank]
        running = min(running, p[i] * m / (rank + 1))
        adj[i] = running
    return adj


@dataclass
class PairedTestResult:
    names: list[str]
    t: list[float]
    p_raw: list[float]
    p_holm: list[float]
    p_bh: list[float]
    mean_diff: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def paired_t(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test; identical lists give t = 0, p = 1."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError("paired score lists must have equal length")
    if a.size < 2:
        raise ValueError("need at least 2 pairs")
    d = a - b
    if np.all(d == d[0]):
        return (0.0, 1.0) if d[0] == 0 else (math.copysign(math.inf, d[0]), 0.0)
    res = stats.ttest_rel(a, b)
    return float(res.statistic), float(res.pvalue)


def paired_tests(scores_a: Sequence[float], others: dict[str, Sequence[float]]) -> PairedTestResult:
    """Paired t-tests of ``scores_a`` against each named comparison, Holm and BH corrected."""
    names, ts, ps, diffs = [], [], [], []
    for name, b in others.items():
        t, p = paired_t(scores_a, b)
        names.append(name), ts.append(t), ps.append(p)
        diffs.append(float(np.mean(np.asarray(scores_a, float) - np.asarray(b, float))))
    return PairedTestResult(names, ts, ps, holm(ps).tolist(), benjamini_hochberg(ps).tolist(), diffs)


# -- PCA --------------------------------------------------------------------------------


def pca_project(Z: np.ndarray, dims: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Projected coordinates and explained-variance ratios of the first ``dims`` components."""
    Z = np.asarray(Z, dtype=np.float64)
    if dims not in (2, 3):
        raise ValueError("dims must be 2 or 3")
    if len(Z) < dims + 1:
        raise ValueError(f"need at least {dims + 1} samples")
    Zc = Z - Z.mean(0)
    _, s, vt = np.linalg.svd(Zc, full_matrices=False)
    total = (s**2).sum()
    if total <= 0:
        raise ValueError("input has zero variance")
    return Zc @ vt[:dims].T, (s[:dims] ** 2) / total


# -- spectra, saliency, sweeps ------------------------------------------------------------


def welch_psd(x: np.ndarray, fs: float, seg_sec: float = WELCH_SEG_SEC) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    nper = min(int(round(seg_sec * fs)), x.shape[-1])
    return signal.welch(x, fs=fs, window="hann", nperseg=nper, noverlap=nper // 2, axis=-1)


def region_centroids(Z: np.ndarray, regions: np.ndarray, geometry: str = "euclidean") -> dict[str, np.ndarray]:
    out = {}
    for r in sorted(set(regions)):
        c = Z[regions == r].mean(0)
        if geometry == "cosine":
            c = c / max(np.linalg.norm(c), 1e-12)
        out[r] = c
    return out


def centroid_psd(Z: np.ndarray, signals: np.ndarray, regions: np.ndarray, region: str, fs: float,
                 n: int = 10, geometry: str = "euclidean") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(freqs, mean Welch PSD, chosen indices) of the ``n`` region segments nearest its centroid."""
    regions = np.asarray(regions)
    idx = np.flatnonzero(regions == region)
    if idx.size == 0:
        raise ValueError(f"region {region!r} has no embeddings")
    c = region_centroids(Z[idx], regions[idx], geometry)[region]
    d = _distances(Z[idx], c[None], geometry)[:, 0]
    chosen = idx[np.argsort(d, kind="stable")[: min(n, idx.size)]]
    f, p = welch_psd(signals[chosen], fs)
    return f, p.mean(0), chosen


@dataclass
class SaliencyMap:
    starts: np.ndarray  # sample offset of each frozen sub-window
    length: int
    scores: np.ndarray  # mean displacement; smaller = more important

    def importance_rank(self) -> np.ndarray:
        """1 = smallest displacement (most important)."""
        return stats.rankdata(self.scores, method="average")


def perturbation_saliency(embed_fn: Callable[[np.ndarray], np.ndarray], segment: np.ndarray, fs: float,
                          freeze_sec: float = 0.5, n_perturb: int = 20,
                          rng: np.random.Generator | None = None) -> SaliencyMap:
    """Freeze a sliding sub-window, replace the rest by variance-matched noise, and
    record the mean embedding displacement over ``n_perturb`` draws."""
    if n_perturb < 1:
        raise ValueError("n_perturb must be >= 1")
    segment = np.asarray(segment, dtype=np.float64)
    T = segment.size
    flen = int(round(freeze_sec * fs))
    if not 0 < flen <= T:
        raise ValueError("freeze length must lie in (0, segment length]")
    rng = np.random.default_rng(0) if rng is None else rng
    stride = max(1, flen // 2)
    starts = np.arange(0, T - flen + 1, stride)
    z0 = embed_fn(segment[None])[0]
    mu, sd = segment.mean(), segment.std()
    scores = np.empty(len(starts))
    for i, s0 in enumerate(starts):
        if flen == T:
            scores[i] = 0.0
            continue
        batch = mu + sd * rng.standard_normal((n_perturb, T))
        batch[:, s0 : s0 + flen] = segment[s0 : s0 + flen]
        z = embed_fn(batch)
        scores[i] = float(np.linalg.norm(z - z0, axis=1).mean())
    return SaliencyMap(starts, flen, scores)


@dataclass
class SweepTrajectory:
    freqs: np.ndarray
    embeddings: np.ndarray
    centroid_names: list[str]
    centroid_dist: np.ndarray  # (n_freqs, n_regions)

    @property
    def nearest(self) -> list[str]:
        return [self.centroid_names[i] for i in self.centroid_dist.argmin(1)]

    def step_distance(self, step: int) -> float:
        """Mean embedding distance between sweep points ``step`` indices apart."""
        e = self.embeddings
        return float(np.linalg.norm(e[step:] - e[:-step], axis=1).mean())


def frequency_sweep(embed_fn: Callable[[np.ndarray], np.ndarray], f_start: float, f_end: float, steps: int,
                    centroids: dict[str, np.ndarray], fs: float = 1000.0, duration: float = 10.0,
                    geometry: str = "euclidean") -> SweepTrajectory:
    if f_end >= fs / 2:
        raise ValueError("sweep must stay below Nyquist")
    freqs = np.linspace(f_start, f_end, steps)
    t = np.arange(int(round(duration * fs))) / fs
    X = np.sin(2 * np.pi * freqs[:, None] * t[None, :])
    E = embed_fn(X)
    names = sorted(centroids)
    C = np.stack([centroids[n] for n in names])
    return SweepTrajectory(freqs, E, names, _distances(E, C, geometry))
