"""Functional-token encoder-decoder transformer for masked-region reconstruction."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from . import dsp
from .evaluation import pearson_r
from .nnkit import AdamW, DecoderBlock, EncoderBlock

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReconConfig:
    d: int = 128
    h: int = 4
    ff: int = 384
    n_enc: int = 3
    n_dec: int = 3
    dropout: float = 0.2
    patch_len: int = 25
    stride: int = 25
    lam: float = 0.05
    window_samples: int = 1000
    id_dim: int = 32
    pos_mode: str = "learned"  # "learned" (sinusoid-initialised table) or "sinusoidal" (fixed)
    pos_scale: float = 0.0  # amplitude of the learned table's sinusoid init; 0 selects sqrt(d)
    max_patches: int = 1024
    lr: float = 2e-4
    head_lr: float = 3e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    epochs: int = 150
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.d % self.h:
            raise ValueError(f"d={self.d} is not divisible by h={self.h}")
        if self.window_samples < self.patch_len:
            raise ValueError("window shorter than one patch")
        if self.pos_mode not in ("learned", "sinusoidal"):
            raise ValueError(f"unknown pos_mode {self.pos_mode!r}")
        if self.pos_scale < 0:
            raise ValueError("pos_scale must be non-negative")
        if self.n_patches > self.max_patches:
            raise ValueError("window has more patches than max_patches")

    @property
    def n_patches(self) -> int:
        return (self.window_samples - self.patch_len) // self.stride + 1

    @classmethod
    def small(cls, **kw) -> "ReconConfig":
        """Single-session size: d=32, ff=32, learning rates x10."""
        kw.setdefault("d", 32)
        kw.setdefault("ff", 32)
        kw.setdefault("lr", 2e-3)
        kw.setdefault("head_lr", 3e-3)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReconConfig":
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (0.9, 0.99)))
        return cls(**d)


def sinusoidal_code(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    div = torch.exp(-math.log(10000.0) * i / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d // 2]
    return pe.float()


@dataclass
class ReconBatch:
    """Padded inputs of one batch; ``*_valid`` mark real (non-padding) channels."""

    src: torch.Tensor  # (B, S, T)
    src_ids: torch.Tensor  # (B, S, id_dim)
    src_valid: torch.Tensor  # (B, S) bool
    tgt_ids: torch.Tensor  # (B, K, id_dim)
    tgt_valid: torch.Tensor  # (B, K) bool
    Y: torch.Tensor | None = None  # (B, K, T)


class FunctionalTransformer(nn.Module):
    def __init__(self, cfg: ReconConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.tokenizer = nn.Conv1d(1, d, cfg.patch_len, stride=cfg.stride)
        self.id_proj = nn.Linear(cfg.id_dim, d)
        self.src_reduce = nn.Linear(2 * d, d)
        self.qry_reduce = nn.Linear(2 * d, d)
        self.query_base = nn.Parameter(torch.randn(cfg.n_patches, d) * 0.02)
        self.type_emb = nn.Parameter(torch.randn(2, d) * 0.02)
        if cfg.pos_mode == "learned":
            # a large initial amplitude shortens the plateau before cross-attention locks onto patch time
            scale = cfg.pos_scale or math.sqrt(d)
            self.pos = nn.Parameter(scale * sinusoidal_code(cfg.max_patches, d))
        else:
            self.register_buffer("pos", sinusoidal_code(cfg.max_patches, d))
        self.enc = nn.ModuleList(EncoderBlock(d, cfg.h, cfg.ff, cfg.dropout) for _ in range(cfg.n_enc))
        self.enc_norm = nn.LayerNorm(d)
        self.dec = nn.ModuleList(DecoderBlock(d, cfg.h, cfg.ff, cfg.dropout) for _ in range(cfg.n_dec))
        self.dec_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.patch_len)

    def n_patches(self, T: int) -> int:
        if T < self.cfg.patch_len:
            raise ValueError(f"window of {T} samples is shorter than patch_len={self.cfg.patch_len}")
        return (T - self.cfg.patch_len) // self.cfg.stride + 1

    def tokenize_sources(self, src: torch.Tensor, src_ids: torch.Tensor) -> torch.Tensor:
        """(B, S, T) signals + (B, S, id_dim) identities -> (B, S*P, d) source tokens."""
        B, S, T = src.shape
        P = self.n_patches(T)
        z = self.tokenizer(src.reshape(B * S, 1, T)).transpose(1, 2).reshape(B, S, P, -1)
        f = self.id_proj(src_ids)[:, :, None, :].expand(-1, -1, P, -1)
        tok = self.src_reduce(torch.cat([z, f], dim=-1)) + self.pos[:P] + self.type_emb[0]
        return tok.reshape(B, S * P, -1)

    def make_queries(self, tgt_ids: torch.Tensor, P: int) -> torch.Tensor:
        """(B, K, id_dim) identities -> (B, K*P, d) query tokens."""
        B, K, _ = tgt_ids.shape
        if P != self.query_base.shape[0]:
            raise ValueError(f"query base holds {self.query_base.shape[0]} patches, sources have {P}")
        u = self.query_base[None, None].expand(B, K, -1, -1)
        f = self.id_proj(tgt_ids)[:, :, None, :].expand(-1, -1, P, -1)
        tok = self.qry_reduce(torch.cat([u, f], dim=-1)) + self.pos[:P] + self.type_emb[1]
        return tok.reshape(B, K * P, -1)

    def forward(self, batch: ReconBatch) -> torch.Tensor:
        B, S, T = batch.src.shape
        K = batch.tgt_ids.shape[1]
        P = self.n_patches(T)
        if K == 0:
            return batch.src.new_zeros(B, 0, P * self.cfg.patch_len)
        if not bool(batch.src_valid.any(1).all()):
            raise ValueError("an example in the batch has no valid source channel")
        m_src = batch.src_valid.repeat_interleave(P, dim=1)
        m_tgt = batch.tgt_valid.repeat_interleave(P, dim=1)
        # examples without targets still need one unmasked key for decoder self-attention
        m_tgt_keys = m_tgt | ~m_tgt.any(1, keepdim=True)

        x = self.tokenize_sources(batch.src, batch.src_ids)
        for blk in self.enc:
            x = blk(x, m_src)
        memory = self.enc_norm(x)

        q = self.make_queries(batch.tgt_ids, P)
        for blk in self.dec:
            q = blk(q, m_tgt_keys, memory, m_src)
        out = self.head(self.dec_norm(q))  # (B, K*P, L)
        return out.reshape(B, K, P * self.cfg.patch_len)


def build_recon(cfg: ReconConfig | None = None) -> FunctionalTransformer:
    cfg = cfg or ReconConfig()
    torch.manual_seed(cfg.seed)
    return FunctionalTransformer(cfg)


def recon_loss(pred: torch.Tensor, Y: torch.Tensor, lam: float = 0.05, valid: torch.Tensor | None = None,
               eps: float = 1e-8) -> torch.Tensor:
    """MSE + lam * (1 - mean Pearson r) over valid targets.

    Shapes (..., T). Targets with zero variance are left out of the correlation mean;
    if none remain the correlation term is dropped.
    """
    if pred.shape != Y.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(Y.shape)} differ")
    if valid is None:
        valid = torch.ones(pred.shape[:-1], dtype=torch.bool)
    if not bool(valid.any()):
        return pred.sum() * 0.0
    p, y = pred[valid], Y[valid]
    mse = (p - y).pow(2).mean()
    yc = y - y.mean(-1, keepdim=True)
    pc = p - p.mean(-1, keepdim=True)
    ynorm = yc.pow(2).sum(-1).sqrt()
    pnorm = pc.pow(2).sum(-1).sqrt()
    ok = ynorm > eps * math.sqrt(y.shape[-1])
    if not bool(ok.any()):
        return mse
    # a constant prediction has no direction and scores r = 0
    r = (yc[ok] * pc[ok]).sum(-1) / (ynorm[ok] * pnorm[ok]).clamp_min(eps)
    return mse + lam * (1.0 - r.clamp(-1.0, 1.0).mean())


# -- identities ----------------------------------------------------------------------


@dataclass(frozen=True)
class ChannelIdentity:
    kind: str  # "functional" or "coordinate"
    vector: np.ndarray
    channel: str


def compute_channel_identities(kind: str, dataset, *, encoder: nn.Module | None = None,
                               segments=None) -> dict[str, ChannelIdentity]:
    """One identity per channel of ``dataset``.

    Functional identities embed each channel's earliest train-split 10 s window
    (``segments`` is the encoder-branch SegmentTable); coordinate identities copy
    the synthetic 3-D coordinates.
    """
    keys = dataset.keys()
    if kind == "coordinate":
        if dataset.coordinates is None:
            raise ValueError("dataset has no coordinates")
        return {k: ChannelIdentity("coordinate", np.asarray(c, dtype=np.float32), k) for k, c in zip(keys, dataset.coordinates)}
    if kind != "functional":
        raise ValueError(f"unknown identity kind {kind!r}")
    if encoder is None or segments is None:
        raise ValueError("functional identities need a trained encoder and encoder-branch segments")
    from .encoder import embed_batch
    from .simgen import channel_key

    first: dict[str, int] = {}
    for i in range(len(segments)):
        if segments.split[i] != "train":
            continue
        k = channel_key(segments.subject[i], segments.session[i], segments.region[i], segments.channel[i])
        if k not in first or segments.start[i] < segments.start[first[k]]:
            first[k] = i
    missing = [k for k in keys if k not in first]
    if missing:
        raise ValueError(f"{len(missing)} channels lack a training window, e.g. {missing[0]}")
    idx = [first[k] for k in keys]
    Z = embed_batch(encoder, segments.X[idx])
    return {k: ChannelIdentity("functional", z.astype(np.float32), k) for k, z in zip(keys, Z)}


def identities_json(ids: Mapping[str, ChannelIdentity]) -> str:
    return json.dumps({k: {"kind": v.kind, "vector": [float(x) for x in v.vector]} for k, v in ids.items()}, sort_keys=True)


def save_identities(ids: Mapping[str, ChannelIdentity], path: str | Path) -> None:
    Path(path).write_text(identities_json(ids))


def load_identities(path: str | Path) -> dict[str, ChannelIdentity]:
    raw = json.loads(Path(path).read_text())
    return {k: ChannelIdentity(v["kind"], np.asarray(v["vector"], dtype=np.float32), k) for k, v in raw.items()}


# -- data -------------------------------------------------------------------------------


@dataclass
class SessionBlock:
    X: np.ndarray  # (C, N) preprocessed float32
    keys: list[str]
    regions: np.ndarray
    subject: int
    session: int
    starts: dict[str, np.ndarray]  # split -> window start indices


@dataclass
class ReconData:
    sessions: list[SessionBlock]
    window: int

    def windows(self, split: str, subjects: Sequence[int] | None = None) -> list[tuple[int, int]]:
        out = []
        for si, s in enumerate(self.sessions):
            if subjects is not None and s.subject not in subjects:
                continue
            out.extend((si, int(t)) for t in s.starts[split])
        return out


def recon_data_from_dataset(dataset, cfg: dsp.PreprocConfig | None = None) -> ReconData:
    """Transformer-branch preprocessing of every session into aligned channel blocks."""
    cfg = cfg or dsp.PreprocConfig.transformer()
    keys = dataset.keys()
    sessions = []
    units = sorted(set(zip(dataset.subject.tolist(), dataset.session.tolist())))
    for s, ss in units:
        idx = np.flatnonzero((dataset.subject == s) & (dataset.session == ss))
        rows = [dsp.transformer_signal(dsp.RawTrace(dataset.waveforms[i], dataset.fs), cfg).samples.astype(np.float32) for i in idx]
        starts = dsp.split_window_starts(len(rows[0]), cfg)
        sessions.append(SessionBlock(np.stack(rows), [keys[i] for i in idx], dataset.region[idx].copy(), s, ss, starts))
    return ReconData(sessions, int(round(cfg.window_sec * cfg.target_fs)))


def make_batch(data: ReconData, items: Sequence[tuple[int, int]], identities: Mapping[str, ChannelIdentity],
               region: str, with_target: bool = True) -> tuple[ReconBatch, list[list[str]]]:
    """Pad sources (channels outside ``region``) and targets (inside it) to batch maxima."""
    W = data.window
    srcs, tgts = [], []
    for si, t in items:
        blk = data.sessions[si]
        in_r = blk.regions == region
        if not in_r.any():
            raise ValueError(f"region {region!r} absent from session {blk.subject}/{blk.session}")
        if in_r.all():
            raise ValueError("no source channel outside the masked region")
        srcs.append(np.flatnonzero(~in_r))
        tgts.append(np.flatnonzero(in_r))
    B = len(items)
    S = max(len(s) for s in srcs)
    K = max(len(k) for k in tgts)
    id_dim = len(next(iter(identities.values())).vector)
    src = np.zeros((B, S, W), np.float32)
    src_ids = np.zeros((B, S, id_dim), np.float32)
    src_valid = np.zeros((B, S), bool)
    tgt_ids = np.zeros((B, K, id_dim), np.float32)
    tgt_valid = np.zeros((B, K), bool)
    Y = np.zeros((B, K, W), np.float32)
    tgt_keys = []
    for b, ((si, t), sidx, kidx) in enumerate(zip(items, srcs, tgts)):
        blk = data.sessions[si]
        src[b, : len(sidx)] = blk.X[sidx, t : t + W]
        src_ids[b, : len(sidx)] = [identities[blk.keys[i]].vector for i in sidx]
        src_valid[b, : len(sidx)] = True
        tgt_ids[b, : len(kidx)] = [identities[blk.keys[i]].vector for i in kidx]
        tgt_valid[b, : len(kidx)] = True
        if with_target:
            Y[b, : len(kidx)] = blk.X[kidx, t : t + W]
        tgt_keys.append([blk.keys[i] for i in kidx])
    batch = ReconBatch(torch.from_numpy(src), torch.from_numpy(src_ids), torch.from_numpy(src_valid),
                       torch.from_numpy(tgt_ids), torch.from_numpy(tgt_valid),
                       torch.from_numpy(Y) if with_target else None)
    return batch, tgt_keys


# -- training -----------------------------------------------------------------------------

NO_DECAY_PREFIXES = ("id_proj.", "query_base", "type_emb", "pos")


def param_groups(model: FunctionalTransformer) -> list[dict]:
    """Waveform head at head_lr; decay off for norms, biases, identity projection,
    type embeddings, positional table and query base."""
    cfg = model.cfg
    groups = {(h, dec): [] for h in (True, False) for dec in (True, False)}
    for name, p in model.named_parameters():
        is_head = name.startswith("head.")
        no_decay = p.ndim == 1 or name.startswith(NO_DECAY_PREFIXES)
        groups[(is_head, not no_decay)].append(p)
    out = []
    for (is_head, dec), ps in groups.items():
        if ps:
            out.append({"params": ps, "lr": cfg.head_lr if is_head else cfg.lr,
                        "weight_decay": cfg.weight_decay if dec else 0.0, "name": f"{'head' if is_head else 'body'}_{'decay' if dec else 'nodecay'}"})
    return out


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ReconTrainResult:
    model: FunctionalTransformer
    curves: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    initial_val: float = math.nan


@torch.no_grad()
def eval_loss(model, data, items, identities, region, batch_size=128) -> float:
    model.eval()
    total, n = 0.0, 0
    for i in range(0, len(items), batch_size):
        chunk = items[i : i + batch_size]
        batch, _ = make_batch(data, chunk, identities, region)
        pred = model(batch)
        total += float(recon_loss(pred, batch.Y[..., : pred.shape[-1]], model.cfg.lam, batch.tgt_valid)) * len(chunk)
        n += len(chunk)
    return total / max(n, 1)


def train_recon(model: FunctionalTransformer, data: ReconData, identities: Mapping[str, ChannelIdentity],
                masked_region: str, cfg: ReconConfig | None = None, subjects: Sequence[int] | None = None,
                max_train_windows: int | None = None, max_val_windows: int | None = None) -> ReconTrainResult:
    """AdamW training on train-split windows; keeps the best validation-loss weights.

    ``max_train_windows`` caps the windows visited per epoch (a fresh random subset
    each epoch); ``max_val_windows`` fixes one validation subset for the whole run.
    """
    cfg = cfg or model.cfg
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    train_items = data.windows("train", subjects)
    val_items = data.windows("val", subjects)
    if max_val_windows is not None and len(val_items) > max_val_windows:
        sel = np.sort(np.random.default_rng(cfg.seed + 1).permutation(len(val_items))[:max_val_windows])
        val_items = [val_items[i] for i in sel]
    opt = AdamW(param_groups(model), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    result = ReconTrainResult(model=model)
    result.initial_val = eval_loss(model, data, val_items, identities, masked_region, cfg.batch_size)
    result.best_val = result.initial_val
    best_state = copy.deepcopy(model.state_dict())
    for epoch in range(cfg.epochs):
        model.train()
        perm = rng.permutation(len(train_items))
        if max_train_windows is not None:
            perm = perm[:max_train_windows]
        losses = []
        for i in range(0, len(perm), cfg.batch_size):
            chunk = [train_items[j] for j in perm[i : i + cfg.batch_size]]
            batch, _ = make_batch(data, chunk, identities, masked_region)
            pred = model(batch)
            loss = recon_loss(pred, batch.Y[..., : pred.shape[-1]], cfg.lam, batch.tgt_valid)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite reconstruction loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        vloss = eval_loss(model, data, val_items, identities, masked_region, cfg.batch_size)
        result.curves.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_loss": vloss})
        log.info("recon epoch %d loss %.4f val %.4f", epoch, result.curves[-1]["loss"], vloss)
        if vloss < result.best_val:
            result.best_val, result.best_epoch = vloss, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return result


# -- inference ------------------------------------------------------------------------------


@dataclass
class ReconOutput:
    Y_hat: np.ndarray  # (K, T_m)
    r: list[float | None]
    targets: list[str]


@torch.no_grad()
def masked_region_infer(model: FunctionalTransformer, data: ReconData, item: tuple[int, int], region: str,
                        identities: Mapping[str, ChannelIdentity]) -> ReconOutput:
    model.eval()
    batch, keys = make_batch(data, [item], identities, region)
    pred = model(batch)[0].numpy()
    Y = batch.Y[0, :, : pred.shape[-1]].numpy()
    return ReconOutput(pred, [pearson_r(p, y) for p, y in zip(pred, Y)], keys[0])


@torch.no_grad()
def evaluate_windows(predict, data: ReconData, items: Sequence[tuple[int, int]], region: str,
                     batch_size: int = 128) -> list[dict]:
    """Per-window, per-target Pearson r rows for any ``predict(items) -> (pred, Y, keys)``."""
    rows = []
    for i in range(0, len(items), batch_size):
        chunk = items[i : i + batch_size]
        preds, Ys, keys = predict(chunk)
        for (si, t), P, Yb, kb in zip(chunk, preds, Ys, keys):
            blk = data.sessions[si]
            for p, y, k in zip(P, Yb, kb):
                rows.append({"subject": blk.subject, "session": blk.session, "start": t, "target": k, "r": pearson_r(p, y)})
    return rows


def transformer_predictor(model: FunctionalTransformer, data: ReconData, identities, region: str):
    def predict(chunk):
        model.eval()
        batch, keys = make_batch(data, chunk, identities, region)
        pred = model(batch).numpy()
        Y = batch.Y[..., : pred.shape[-1]].numpy()
        return [p[: len(k)] for p, k in zip(pred, keys)], [y[: len(k)] for y, k in zip(Y, keys)], keys
    return predict


def write_r_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["subject", "session", "start", "target", "r"])
        w.writeheader()
        for row in rows:
            w.writerow({**row, "r": "" if row["r"] is None else row["r"]})
