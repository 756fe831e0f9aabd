"""Functional-embedding CNN: architectures, contrastive objectives, pair sampling, training."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import dsp
from .nnkit import AdamW, PlateauScheduler, build_stack, n_trainable
from .nnkit import layers as L

log = logging.getLogger(__name__)

EMBED_DIM = 32
SEGMENT_SAMPLES = 10_000

EXPECTED_PARAMS = {
    "single_session": (117_504, 0.0),
    "multi_subject": (694_464, 0.01),
}


def _block(cin, cout, k, s, p, pool=True):
    out = [L.conv1d(cin, cout, k, s), L.batchnorm1d(cout), L.gelu()]
    if pool:
        out.append(L.maxpool1d(3, 2))
    out.append(L.dropout(p))
    return out


def encoder_specs(variant: str, conv_dropout: float | None = None, head_dropout: float = 0.1) -> list[L.LayerSpec]:
    if variant == "single_session":
        p = 0.5 if conv_dropout is None else conv_dropout
        convs = [(1, 64, 15, 4, True), (64, 64, 11, 2, True), (64, 64, 7, 2, True), (64, 64, 5, 2, True)]
        width = 64
    elif variant == "multi_subject":
        p = 0.3 if conv_dropout is None else conv_dropout
        convs = [(1, 64, 15, 4, True), (64, 128, 11, 2, True), (128, 128, 11, 2, True), (128, 128, 11, 2, True),
                 (128, 128, 7, 2, False), (128, 128, 5, 2, False)]
        width = 128
    else:
        raise ValueError(f"unknown encoder variant {variant!r}")
    specs = []
    for cin, cout, k, s, pool in convs:
        specs += _block(cin, cout, k, s, p, pool)
    specs += [
        L.adaptive_avgpool1d(10),
        L.flatten(),
        L.linear(10 * width, EMBED_DIM),
        L.gelu(),
        L.dropout(head_dropout),
        L.linear(EMBED_DIM, EMBED_DIM),
    ]
    return specs


class FunctionalEncoder(nn.Module):
    """Maps (batch, samples) or (batch, 1, samples) segments to unit-norm 32-D embeddings."""

    def __init__(self, variant: str = "single_session", conv_dropout: float | None = None, head_dropout: float = 0.1):
        super().__init__()
        self.variant = variant
        self.arch = {"variant": variant, "conv_dropout": conv_dropout, "head_dropout": head_dropout}
        self.specs = encoder_specs(variant, conv_dropout, head_dropout)
        self.net = build_stack(self.specs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 2:
            x = x.unsqueeze(1)
        return F.normalize(self.net(x), dim=-1)


def build_encoder(variant: str = "single_session", **kw) -> FunctionalEncoder:
    model = FunctionalEncoder(variant, **kw)
    expected, tol = EXPECTED_PARAMS[variant]
    n = n_trainable(model)
    if abs(n - expected) > tol * expected:
        raise AssertionError(f"{variant} encoder has {n} trainable parameters, expected {expected} (+/-{tol:.0%})")
    return model


@torch.no_grad()
def embed_batch(model: nn.Module, segments: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Eval-mode embeddings of an (n, samples) array."""
    was_training = model.training
    model.eval()
    segments = np.asarray(segments, dtype=np.float32)
    if segments.ndim != 2:
        raise ValueError("segments must be (n, samples)")
    out = []
    for i in range(0, len(segments), batch_size):
        out.append(model(torch.from_numpy(segments[i : i + batch_size])).numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, EMBED_DIM), np.float32)


def embed(model: nn.Module, segment, expected_len: int = SEGMENT_SAMPLES) -> np.ndarray:
    samples = segment.samples if isinstance(segment, dsp.Window) else np.asarray(segment)
    if samples.shape != (expected_len,):
        raise ValueError(f"segment must have {expected_len} samples, got {samples.shape}")
    return embed_batch(model, samples[None])[0]


# -- objectives ----------------------------------------------------------------


def psc_loss(z_i: torch.Tensor, z_j: torch.Tensor, y: torch.Tensor, margin: float = 0.5) -> torch.Tensor:
    """Mean over pairs of (1-y) d^2 + y max(0, m-d)^2, d = ||z_i - z_j||."""
    y = torch.as_tensor(y, dtype=z_i.dtype)
    d = torch.linalg.vector_norm(z_i - z_j, dim=-1)
    return ((1 - y) * d.pow(2) + y * torch.clamp(margin - d, min=0).pow(2)).mean()


def msc_terms(z: torch.Tensor, labels, tau: float = 0.2) -> tuple[torch.Tensor, torch.Tensor]:
    """(multi-positive InfoNCE, batchwise intra-class variance).

    Anchors without any positive are left out of the InfoNCE average.
    """
    labels = torch.as_tensor(labels)
    n = z.shape[0]
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(n, dtype=torch.bool)
    pos = same & ~eye
    n_pos = pos.sum(1)
    valid = n_pos > 0
    if not bool(valid.any()):
        raise ValueError("no anchor in the batch has a positive")
    logits = (z @ z.T / tau).masked_fill(eye, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    log_prob = log_prob.masked_fill(~pos, 0.0)
    per_anchor = -log_prob.sum(1)[valid] / n_pos[valid]
    sup = per_anchor.mean()

    var_terms = []
    for r in torch.unique(labels):
        zr = z[labels == r]
        var_terms.append((zr - zr.mean(0)).pow(2).sum(1).mean())
    var = torch.stack(var_terms).mean()
    return sup, var


def msc_loss(z: torch.Tensor, labels, tau: float = 0.2, lambda_var: float = 0.05) -> torch.Tensor:
    sup, var = msc_terms(z, labels, tau)
    return sup + lambda_var * var


# -- data ------------------------------------------------------------------------


@dataclass
class SegmentTable:
    """Stacked 10 s windows with provenance columns."""

    X: np.ndarray  # (n, samples) float32
    region: np.ndarray  # str
    subject: np.ndarray
    session: np.ndarray
    channel: np.ndarray
    split: np.ndarray  # str
    start: np.ndarray

    def __len__(self):
        return len(self.X)

    def take(self, idx) -> "SegmentTable":
        idx = np.asarray(idx)
        return SegmentTable(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    def where(self, mask) -> "SegmentTable":
        return self.take(np.flatnonzero(mask))

    def labels(self, regions: Sequence[str]) -> np.ndarray:
        lut = {r: i for i, r in enumerate(regions)}
        return np.asarray([lut[r] for r in self.region], dtype=np.int64)

    @property
    def channel_uid(self) -> np.ndarray:
        return np.asarray([f"{a}|{b}|{c}|{d}" for a, b, c, d in zip(self.subject, self.session, self.region, self.channel)])

    @classmethod
    def from_windows(cls, windows: Sequence[dsp.Window]) -> "SegmentTable":
        return cls(
            np.stack([w.samples for w in windows]).astype(np.float32),
            np.asarray([w.provenance.region for w in windows]).astype(str),
            np.asarray([w.provenance.subject for w in windows]),
            np.asarray([w.provenance.session for w in windows]),
            np.asarray([w.provenance.channel for w in windows]),
            np.asarray([w.split for w in windows]).astype(str),
            np.asarray([w.start_index for w in windows]),
        )


def segments_from_dataset(dataset, cfg: dsp.PreprocConfig | None = None) -> SegmentTable:
    """Run the encoder preprocessing branch on every channel of a SimDataset."""
    cfg = cfg or dsp.PreprocConfig.encoder()
    windows = []
    for i in range(len(dataset)):
        prov = dsp.Provenance(int(dataset.subject[i]), int(dataset.session[i]), int(dataset.channel[i]), str(dataset.region[i]))
        windows.extend(dsp.preprocess_encoder_branch(dsp.RawTrace(dataset.waveforms[i], dataset.fs, prov), cfg))
    return SegmentTable.from_windows(windows)


@dataclass
class PairSample:
    segment_a: int
    segment_b: int
    y: int


def sample_pair_indices(table: SegmentTable, n: int, scope: str, rng: np.random.Generator):
    """Balanced (n/2 similar, n/2 dissimilar) index pairs into ``table``."""
    if scope not in ("single_session", "cross_subject"):
        raise ValueError(f"unknown scope {scope!r}")
    if scope == "single_session":
        units = sorted(set(zip(table.subject.tolist(), table.session.tolist())))
        groups = []
        for s, ss in units:
            m = (table.subject == s) & (table.session == ss)
            groups.append(_region_index(table, m))
    else:
        groups = [_region_index(table, np.ones(len(table), bool))]
    groups = [g for g in groups if len(g) >= 2]
    if not groups:
        raise ValueError("pair sampling needs at least two regions in scope")

    n_sim = n // 2
    ia, ib, y = [], [], []
    for k in range(n):
        g = groups[rng.integers(len(groups))]
        regions = list(g)
        if k < n_sim:
            choices = [r for r in regions if len(g[r]) >= 2] or regions
            r = choices[rng.integers(len(choices))]
            a, b = rng.choice(g[r], 2, replace=len(g[r]) < 2)
            ia.append(a), ib.append(b), y.append(0)
        else:
            r1, r2 = rng.choice(len(regions), 2, replace=False)
            ia.append(rng.choice(g[regions[r1]]))
            ib.append(rng.choice(g[regions[r2]]))
            y.append(1)
    order = rng.permutation(n)
    return np.asarray(ia)[order], np.asarray(ib)[order], np.asarray(y)[order]


def _region_index(table: SegmentTable, mask) -> dict[str, np.ndarray]:
    out = {}
    for r in sorted(set(table.region[mask])):
        out[r] = np.flatnonzero(mask & (table.region == r))
    return out


def sample_pair_batch(table: SegmentTable, n: int, scope: str, rng: np.random.Generator) -> list[PairSample]:
    return [PairSample(int(a), int(b), int(c)) for a, b, c in zip(*sample_pair_indices(table, n, scope, rng))]


# -- training ---------------------------------------------------------------------


@dataclass
class EncoderTrainConfig:
    objective: str = "psc"
    margin: float = 0.5
    temperature: float = 0.2
    lambda_var: float = 0.05
    lr: float = 0.01
    batch_size: int = 128
    epochs: int = 100
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.99)
    pairs_per_epoch: int = 2560  # psc only
    scope: str = "cross_subject"
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-5
    val_pairs: int = 512
    knn_k: int = 10
    knn_subset: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.objective not in ("psc", "msc"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.margin <= 0 or self.temperature <= 0 or self.lambda_var < 0:
            raise ValueError("need margin > 0, temperature > 0, lambda_var >= 0")

    @classmethod
    def single_session(cls, **kw):
        kw.setdefault("scope", "single_session")
        return cls(**kw)

    @classmethod
    def multi_subject(cls, objective="psc", **kw):
        kw.setdefault("batch_size", 1024)
        if objective == "psc":
            kw.setdefault("epochs", 30)
            kw.setdefault("pairs_per_epoch", 2_500_000 // 30)
        else:
            kw.setdefault("epochs", 200)
        return cls(objective=objective, **kw)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: nn.Module
    curves: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf


def _loss_on(model, table: SegmentTable, labels, cfg, idx=None, pairs=None):
    if cfg.objective == "psc":
        ia, ib, y = pairs
        x = torch.from_numpy(np.concatenate([table.X[ia], table.X[ib]]))
        z = model(x)
        return psc_loss(z[: len(ia)], z[len(ia):], torch.from_numpy(y), cfg.margin)
    z = model(torch.from_numpy(table.X[idx]))
    return msc_loss(z, torch.from_numpy(labels[idx]), cfg.temperature, cfg.lambda_var)


@torch.no_grad()
def _val_loss(model, table, labels, cfg, val_pairs) -> float:
    if len(table) == 0:
        return math.nan
    model.eval()
    total, count = 0.0, 0
    if cfg.objective == "psc":
        ia, ib, y = val_pairs
        for i in range(0, len(ia), cfg.batch_size):
            sl = slice(i, i + cfg.batch_size)
            total += float(_loss_on(model, table, labels, cfg, pairs=(ia[sl], ib[sl], y[sl]))) * len(ia[sl])
            count += len(ia[sl])
    else:
        for i in range(0, len(table), cfg.batch_size):
            idx = np.arange(i, min(i + cfg.batch_size, len(table)))
            if len(np.unique(labels[idx])) == len(idx):
                continue
            total += float(_loss_on(model, table, labels, cfg, idx=idx)) * len(idx)
            count += len(idx)
    model.train()
    return total / max(count, 1)


def train_encoder(model: nn.Module, train: SegmentTable, val: SegmentTable, cfg: EncoderTrainConfig,
                  regions: Sequence[str] | None = None) -> TrainResult:
    """Train under PSC or MSC; returns the best-validation-loss weights and per-epoch curves."""
    from .evaluation import knn_classify

    if set(zip(train.channel_uid, train.start)) & set(zip(val.channel_uid, val.start)):
        raise ValueError("train and validation segments overlap")
    regions = list(regions) if regions is not None else sorted(set(train.region) | set(val.region))
    ytr, yval = train.labels(regions), val.labels(regions)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)

    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.ndim == 1 else decay).append(p)
    opt = AdamW([{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
                lr=cfg.lr, betas=cfg.betas)
    sched = PlateauScheduler(opt, patience=cfg.patience, factor=cfg.factor, min_lr=cfg.min_lr)

    val_pairs = None
    if cfg.objective == "psc" and len(val) > 1 and len(set(val.region)) > 1:
        val_pairs = sample_pair_indices(val, cfg.val_pairs, "cross_subject", np.random.default_rng(cfg.seed + 7))
    knn_rng = np.random.default_rng(cfg.seed + 11)
    ref_idx = knn_rng.permutation(len(train))[: cfg.knn_subset]
    qry_idx = knn_rng.permutation(len(val))[: cfg.knn_subset]

    result = TrainResult(model=model)
    best_state = copy.deepcopy(model.state_dict())
    model.train()
    for epoch in range(cfg.epochs):
        losses = []
        if cfg.objective == "psc":
            ia, ib, y = sample_pair_indices(train, cfg.pairs_per_epoch, cfg.scope, rng)
            batches = [(ia[i : i + cfg.batch_size], ib[i : i + cfg.batch_size], y[i : i + cfg.batch_size])
                       for i in range(0, len(ia), cfg.batch_size)]
        else:
            perm = rng.permutation(len(train))
            batches = [perm[i : i + cfg.batch_size] for i in range(0, len(perm), cfg.batch_size)]
        for b in batches:
            if cfg.objective == "psc":
                loss = _loss_on(model, train, ytr, cfg, pairs=b)
            else:
                if len(b) < 2 or len(np.unique(ytr[b])) == len(b):
                    continue
                loss = _loss_on(model, train, ytr, cfg, idx=b)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite {cfg.objective} loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())

        if cfg.objective == "psc" and val_pairs is None:
            vloss = float(np.mean(losses)) if losses else math.nan
        else:
            vloss = _val_loss(model, val, yval, cfg, val_pairs)
        acc = math.nan
        if len(ref_idx) and len(qry_idx):
            zr = embed_batch(model, train.X[ref_idx])
            zq = embed_batch(model, val.X[qry_idx])
            pred = knn_classify(zr, ytr[ref_idx], zq, k=min(cfg.knn_k, len(ref_idx)),
                                metric="euclidean" if cfg.objective == "psc" else "cosine")
            acc = float(np.mean(pred == yval[qry_idx]))
        lr = opt.param_groups[0]["lr"]
        result.curves.append({
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else math.nan,
            "first_batch_loss": losses[0] if losses else math.nan,
            "last_batch_loss": losses[-1] if losses else math.nan,
            "val_loss": vloss,
            "val_acc": acc,
            "lr": lr,
        })
        log.info("epoch %d loss %.4f val %.4f acc %.3f lr %.2e", epoch, result.curves[-1]["loss"], vloss, acc, lr)
        if vloss < result.best_val:
            result.best_val = vloss
            result.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        sched.update(vloss)
    model.load_state_dict(best_state)
    model.eval()
    return result


def write_curves(curves: Sequence[dict], path: str | Path) -> None:
    cols = ["epoch", "loss", "val_loss", "val_acc", "lr"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(curves)
