"""Per-subject source-to-target reference models: CopyBest, causal FIR, TCN, GRU and Zero."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .nnkit import AdamW

log = logging.getLogger(__name__)

KINDS = ("copybest", "fir", "tcn", "gru", "zero")


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    fir_order: int = 64
    tcn_dilations: tuple[int, ...] = (1, 2, 4, 8, 16)
    tcn_kernel: int = 5
    tcn_width: int = 128
    tcn_dropout: float = 0.3
    gru_layers: int = 2
    gru_hidden: int = 128
    gru_dropout: float = 0.3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}; expected one of {KINDS}")
        for name in ("fir_order", "tcn_kernel", "tcn_width", "gru_layers", "gru_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.tcn_dilations or min(self.tcn_dilations) < 1:
            raise ValueError("tcn_dilations must be positive")
        for name in ("tcn_dropout", "gru_dropout"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")


@dataclass(frozen=True)
class BaselineTrainConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 150
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")


# -- CopyBest -----------------------------------------------------------------------------


def _standardize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xc = x - x.mean(-1, keepdims=True)
    sd = np.sqrt((xc**2).mean(-1))
    return xc, sd


@dataclass
class CopyBest:
    """Per target: ``gain * sources[index]``."""

    index: np.ndarray
    gain: np.ndarray
    train_r: np.ndarray

    def predict(self, src: np.ndarray) -> np.ndarray:
        """(..., n_src, T) -> (..., n_tgt, T)."""
        return self.gain[:, None] * src[..., self.index, :]


def fit_copybest(src: np.ndarray, tgt: np.ndarray, eps: float = 1e-12) -> CopyBest:
    """Select the source with the highest training correlation for each target.

    ``src`` (n_src, T) and ``tgt`` (n_tgt, T) are the concatenated training signals.
    Zero-variance channels are never selected; ties go to the lowest source index.
    """
    src = np.asarray(src, np.float64)
    tgt = np.asarray(tgt, np.float64)
    sc, ssd = _standardize(src)
    tc, tsd = _standardize(tgt)
    ok_s = ssd > eps
    if not ok_s.any():
        raise ValueError("every source channel has zero variance")
    ok_t = tsd > eps
    cov = (tc @ sc.T) / src.shape[-1]
    r = cov / np.outer(np.where(ok_t, tsd, 1.0), np.where(ok_s, ssd, 1.0))
    r[~ok_t] = 0.0  # constant target: nothing to select on
    r[:, ~ok_s] = -np.inf
    index = np.argmax(r, axis=1)  # first maximum wins
    chosen = src[index]
    gain = (chosen * tgt).sum(-1) / np.maximum((chosen * chosen).sum(-1), eps)
    return CopyBest(index=index, gain=gain, train_r=r[np.arange(len(index)), index])


# -- parametric models ----------------------------------------------------------------------


class ZeroModel(nn.Module):
    def __init__(self, n_tgt: int):
        super().__init__()
        self.n_tgt = n_tgt

    def forward(self, x):
        return x.new_zeros(x.shape[0], self.n_tgt, x.shape[-1])


class CausalFIR(nn.Module):
    """One causal convolution n_src -> n_tgt with ``order + 1`` taps and a bias."""

    def __init__(self, n_src: int, n_tgt: int, order: int = 64):
        super().__init__()
        self.order = order
        self.conv = nn.Conv1d(n_src, n_tgt, order + 1)

    def forward(self, x):
        return self.conv(F.pad(x, (self.order, 0)))


class CausalConv(nn.Conv1d):
    def __init__(self, cin, cout, k, dilation=1):
        super().__init__(cin, cout, k, dilation=dilation)
        self.left = (k - 1) * dilation

    def forward(self, x):
        return super().forward(F.pad(x, (self.left, 0)))


class StepGroupNorm(nn.LayerNorm):
    """Single-group normalization across channels, computed separately at every time step.

    Pooling statistics over time as well (``nn.GroupNorm``) would let future samples
    influence the present and break causality.
    """

    def forward(self, x):
        return super().forward(x.transpose(1, 2)).transpose(1, 2)


class TCNBlock(nn.Module):
    def __init__(self, width: int, k: int, dilation: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            CausalConv(width, width, k, dilation), StepGroupNorm(width), nn.GELU(), nn.Dropout(dropout),
            CausalConv(width, width, k, dilation), StepGroupNorm(width), nn.GELU(), nn.Dropout(dropout),
        )

    def forward(self, x):
        return x + self.net(x)


class TCN(nn.Module):
    def __init__(self, n_src: int, n_tgt: int, spec: BaselineSpec):
        super().__init__()
        self.inp = nn.Conv1d(n_src, spec.tcn_width, 1)
        self.blocks = nn.Sequential(*(TCNBlock(spec.tcn_width, spec.tcn_kernel, d, spec.tcn_dropout) for d in spec.tcn_dilations))
        self.out = nn.Conv1d(spec.tcn_width, n_tgt, 1)
        self.receptive_field = 1 + 2 * (spec.tcn_kernel - 1) * sum(spec.tcn_dilations)

    def forward(self, x):
        return self.out(self.blocks(self.inp(x)))


class GRUModel(nn.Module):
    def __init__(self, n_src: int, n_tgt: int, spec: BaselineSpec):
        super().__init__()
        self.gru = nn.GRU(n_src, spec.gru_hidden, spec.gru_layers, batch_first=True,
                          dropout=spec.gru_dropout if spec.gru_layers > 1 else 0.0)
        self.head = nn.Linear(spec.gru_hidden, n_tgt)

    def forward(self, x):
        h, _ = self.gru(x.transpose(1, 2))  # zero initial state per window
        return self.head(h).transpose(1, 2)


def build_baseline(spec: BaselineSpec, n_src: int, n_tgt: int):
    if n_src < 1 or n_tgt < 1:
        raise ValueError("baselines need at least one source and one target")
    if spec.kind == "zero":
        return ZeroModel(n_tgt)
    if spec.kind == "fir":
        return CausalFIR(n_src, n_tgt, spec.fir_order)
    if spec.kind == "tcn":
        return TCN(n_src, n_tgt, spec)
    if spec.kind == "gru":
        return GRUModel(n_src, n_tgt, spec)
    return None  # copybest is fitted directly with fit_copybest


# -- training -------------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class BaselineTrainResult:
    model: nn.Module
    curves: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    stopped_early: bool = False


@torch.no_grad()
def _mse(model, X, Y, batch_size) -> float:
    model.eval()
    tot = 0.0
    for i in range(0, len(X), batch_size):
        tot += float(F.mse_loss(model(X[i : i + batch_size]), Y[i : i + batch_size], reduction="sum"))
    return tot / Y.numel()


def train_baseline(model: nn.Module, train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray],
                   cfg: BaselineTrainConfig | None = None) -> BaselineTrainResult:
    """Adam with L2 weight decay on windowed (N, n_src, T) -> (N, n_tgt, T) data.

    Stops after ``patience`` epochs without a strict improvement in validation MSE
    and returns the best-validation weights. Zero models are returned untouched.
    """
    cfg = cfg or BaselineTrainConfig()
    if isinstance(model, ZeroModel) or not any(p.requires_grad for p in model.parameters()):
        return BaselineTrainResult(model=model)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    Xtr, Ytr = (torch.as_tensor(a, dtype=torch.float32) for a in train)
    Xva, Yva = (torch.as_tensor(a, dtype=torch.float32) for a in val)
    opt = AdamW(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=cfg.weight_decay, decoupled=False)
    res = BaselineTrainResult(model=model)
    best_state = copy.deepcopy(model.state_dict())
    bad = 0
    for epoch in range(cfg.max_epochs):
        model.train()
        perm = rng.permutation(len(Xtr))
        losses = []
        for i in range(0, len(perm), cfg.batch_size):
            j = torch.from_numpy(perm[i : i + cfg.batch_size])
            loss = F.mse_loss(model(Xtr[j]), Ytr[j])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite baseline loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        v = _mse(model, Xva, Yva, 64)
        res.curves.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_mse": v})
        if v < res.best_val:
            res.best_val, res.best_epoch, bad = v, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            bad += 1
            if bad >= cfg.patience:
                res.stopped_early = True
                break
    model.load_state_dict(best_state)
    model.eval()
    return res


@torch.no_grad()
def predict(model, src: np.ndarray, batch_size: int = 64) -> np.ndarray:
    if isinstance(model, CopyBest):
        return model.predict(np.asarray(src))
    model.eval()
    X = torch.as_tensor(src, dtype=torch.float32)
    return np.concatenate([model(X[i : i + batch_size]).numpy() for i in range(0, len(X), batch_size)])


# -- windowed data -----------------------------------------------------------------------------


def subject_arrays(data, subject: int, region: str, split: str) -> tuple[np.ndarray, np.ndarray, list[list[str]], list[tuple[int, int]]]:
    """Source/target window stacks of one subject from a :class:`recon.ReconData`."""
    items = data.windows(split, [subject])
    W = data.window
    src, tgt, keys = [], [], []
    for si, t in items:
        blk = data.sessions[si]
        m = blk.regions == region
        src.append(blk.X[~m, t : t + W])
        tgt.append(blk.X[m, t : t + W])
        keys.append([k for k, mm in zip(blk.keys, m) if mm])
    if not items:
        raise ValueError(f"subject {subject} has no {split} windows")
    return np.stack(src), np.stack(tgt), keys, items


def copybest_training_signals(data, subject: int, region: str) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate each session's contiguous training span for CopyBest selection."""
    srcs, tgts = [], []
    for blk in data.sessions:
        if blk.subject != subject or len(blk.starts["train"]) == 0:
            continue
        lo, hi = int(blk.starts["train"][0]), int(blk.starts["train"][-1]) + data.window
        m = blk.regions == region
        srcs.append(blk.X[~m, lo:hi])
        tgts.append(blk.X[m, lo:hi])
    return np.concatenate(srcs, axis=1), np.concatenate(tgts, axis=1)


def fit_subject_baseline(kind: str, data, subject: int, region: str, cfg: BaselineTrainConfig | None = None,
                         spec: BaselineSpec | None = None):
    spec = spec or BaselineSpec(kind)
    if kind == "copybest":
        return fit_copybest(*copybest_training_signals(data, subject, region))
    Xtr, Ytr, _, _ = subject_arrays(data, subject, region, "train")
    model = build_baseline(spec, Xtr.shape[1], Ytr.shape[1])
    if kind == "zero":
        return model
    Xva, Yva, _, _ = subject_arrays(data, subject, region, "val")
    return train_baseline(model, (Xtr, Ytr), (Xva, Yva), cfg).model


def baseline_predictor(models: dict, data, region: str):
    """``predict(items)`` adapter for :func:`recon.evaluate_windows`; ``models`` maps subject -> model."""
    W = data.window

    def fn(chunk: Sequence[tuple[int, int]]):
        preds, Ys, keys = [], [], []
        for si, t in chunk:
            blk = data.sessions[si]
            m = blk.regions == region
            p = predict(models[blk.subject], blk.X[None, ~m, t : t + W])[0]
            preds.append(p)
            Ys.append(blk.X[m, t : t + W])
            keys.append([k for k, mm in zip(blk.keys, m) if mm])
        return preds, Ys, keys
    return fn
