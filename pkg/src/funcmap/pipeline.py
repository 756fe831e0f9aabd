"""Experiment configuration and the stage functions shared by the CLI and the acceptance suite."""

from __future__ import annotations

import configparser
import dataclasses
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
from scipy import stats

from . import baselines as B
from . import encoder as E
from . import evaluation as ev
from . import recon as R
from . import simgen

log = logging.getLogger(__name__)


# -- configuration ------------------------------------------------------------------------


class ConfigError(ValueError):
    pass


def stage_seed(master: int, name: str) -> int:
    """Named 32-bit substream seed derived from the master seed."""
    return int(np.random.SeedSequence([int(master), zlib.crc32(name.encode())]).generate_state(1)[0])


def _parse_value(raw: str, default: Any, key: str, section: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [v for v in raw.replace(",", " ").split() if v]
            if default and isinstance(default[0], str):
                return tuple(items)
            if default and isinstance(default[0], int) and not isinstance(default[0], bool):
                return tuple(int(v) for v in items)
            return tuple(float(v) for v in items)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def _section(cp: configparser.ConfigParser, name: str, defaults: Mapping[str, Any]) -> dict:
    out = dict(defaults)
    if not cp.has_section(name):
        return out
    for key, raw in cp.items(name):
        if key not in defaults:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        out[key] = _parse_value(raw, defaults[key], key, name)
    return out


def _dc_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            out[f.name] = f.default_factory()  # type: ignore[misc]
    return out


SIM_DEFAULTS = {"n_subjects": 10, "n_sessions": 2, "n_channels_per_region": 4, "fs": 1000.0, "session_duration": 120.0,
                "regions": tuple(simgen.DEFAULT_REGIONS), "spread": 1.0, "overlap": 0.5}
ENCODER_DEFAULTS = {"variant": "single_session", "train_subjects": -1,
                    **{k: v for k, v in _dc_defaults(E.EncoderTrainConfig).items() if k != "seed"}}
RECON_DEFAULTS = {"size": "small", "region": "VO", "max_train_windows": 0, "max_val_windows": 256,
                  **{k: v for k, v in _dc_defaults(R.ReconConfig).items() if k not in ("seed", "id_dim", "d", "ff", "lr", "head_lr")},
                  "d": 0, "ff": 0, "lr": 0.0, "head_lr": 0.0}
BASELINE_DEFAULTS = {"kinds": ("copybest", "zero"), **{k: v for k, v in _dc_defaults(B.BaselineTrainConfig).items() if k != "seed"}}
EVAL_DEFAULTS = {"k": 10, "saliency_segments": 20, "saliency_region": "GPi", "freeze_sec": 0.5, "n_perturb": 20,
                 "sweep_start": 1.0, "sweep_end": 100.0, "sweep_steps": 100, "burst_overlap": 0.5}


@dataclass
class RunConfig:
    seed: int = 0
    sim: dict = field(default_factory=lambda: dict(SIM_DEFAULTS))
    encoder: dict = field(default_factory=lambda: dict(ENCODER_DEFAULTS))
    encoder_psc: dict = field(default_factory=dict)
    encoder_msc: dict = field(default_factory=dict)
    recon: dict = field(default_factory=lambda: dict(RECON_DEFAULTS))
    baselines: dict = field(default_factory=lambda: dict(BASELINE_DEFAULTS))
    eval: dict = field(default_factory=lambda: dict(EVAL_DEFAULTS))
    text: str = ""

    @classmethod
    def from_text(cls, text: str, seed: int | None = None) -> "RunConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        known = {"run", "simgen", "encoder", "encoder.psc", "encoder.msc", "recon", "baselines", "eval"}
        extra = set(cp.sections()) - known
        if extra:
            raise ConfigError(f"unknown config section(s) {sorted(extra)}")
        run = _section(cp, "run", {"seed": 0})
        enc = _section(cp, "encoder", ENCODER_DEFAULTS)
        rc = cls(
            seed=run["seed"] if seed is None else int(seed),
            sim=_section(cp, "simgen", SIM_DEFAULTS),
            encoder=enc,
            encoder_psc={k: v for k, v in _section(cp, "encoder.psc", enc).items() if cp.has_option("encoder.psc", k)},
            encoder_msc={k: v for k, v in _section(cp, "encoder.msc", enc).items() if cp.has_option("encoder.msc", k)},
            recon=_section(cp, "recon", RECON_DEFAULTS),
            baselines=_section(cp, "baselines", BASELINE_DEFAULTS),
            eval=_section(cp, "eval", EVAL_DEFAULTS),
            text=text,
        )
        rc.validate()
        return rc

    @classmethod
    def from_file(cls, path: str | Path | None, seed: int | None = None) -> "RunConfig":
        text = Path(path).read_text() if path else ""
        return cls.from_text(text, seed)

    def validate(self) -> None:
        try:
            self.sim_spec()
            for obj in ("psc", "msc"):
                self.encoder_config(obj)
            self.recon_config(32)
            self.baseline_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        for kind in self.baselines["kinds"]:
            if kind not in B.KINDS:
                raise ConfigError(f"[baselines] kinds: unknown baseline {kind!r}")
        if self.recon["region"] not in self.sim["regions"]:
            raise ConfigError(f"[recon] region: {self.recon['region']!r} is not a simulated region")

    @property
    def effective_text(self) -> str:
        """Config text with the seed override made explicit (hashed into manifests)."""
        return f"# seed={self.seed}\n{self.text}"

    def sim_spec(self) -> simgen.SimSpec:
        s = self.sim
        return simgen.SimSpec(n_subjects=s["n_subjects"], n_sessions=s["n_sessions"], regions=tuple(s["regions"]),
                              n_channels_per_region=s["n_channels_per_region"], fs=s["fs"],
                              session_duration=s["session_duration"], seed=self.seed)

    def encoder_config(self, objective: str) -> E.EncoderTrainConfig:
        kw = {**self.encoder, **(self.encoder_psc if objective == "psc" else self.encoder_msc)}
        kw = {k: v for k, v in kw.items() if k not in ("variant", "train_subjects")}
        kw["objective"] = objective
        return E.EncoderTrainConfig(**kw, seed=stage_seed(self.seed, f"encoder.{objective}"))

    def encoder_variant(self, objective: str) -> str:
        return {**self.encoder, **(self.encoder_psc if objective == "psc" else self.encoder_msc)}["variant"]

    def encoder_subjects(self, objective: str) -> list[int]:
        n = {**self.encoder, **(self.encoder_psc if objective == "psc" else self.encoder_msc)}["train_subjects"]
        n = self.sim["n_subjects"] if n < 0 else n
        return list(range(n))

    def recon_config(self, id_dim: int) -> R.ReconConfig:
        r = self.recon
        kw = {k: v for k, v in r.items() if k not in ("size", "region", "max_train_windows", "max_val_windows")}
        for k in ("d", "ff", "lr", "head_lr"):
            if not kw[k]:
                kw.pop(k)
        kw["id_dim"] = id_dim
        kw["seed"] = stage_seed(self.seed, "recon")
        if r["size"] == "small":
            return R.ReconConfig.small(**kw)
        if r["size"] != "large":
            raise ConfigError(f"[recon] size must be small or large, got {r['size']!r}")
        return R.ReconConfig(**kw)

    def baseline_config(self) -> B.BaselineTrainConfig:
        kw = {k: v for k, v in self.baselines.items() if k != "kinds"}
        return B.BaselineTrainConfig(**kw, seed=stage_seed(self.seed, "baselines"))


# -- stages ---------------------------------------------------------------------------------


def make_dataset(rc: RunConfig) -> simgen.SimDataset:
    ds = simgen.generate_dataset(rc.sim_spec())
    return simgen.assign_synthetic_coordinates(ds, spread=rc.sim["spread"], overlap=rc.sim["overlap"],
                                               rng=np.random.default_rng(stage_seed(rc.seed, "coords")))


def encoder_segments(ds: simgen.SimDataset) -> E.SegmentTable:
    return E.segments_from_dataset(ds)


def train_encoder_stage(tab: E.SegmentTable, rc: RunConfig, objective: str, regions: Sequence[str]):
    subjects = rc.encoder_subjects(objective)
    in_s = np.isin(tab.subject, subjects)
    train = tab.where(in_s & (tab.split == "train"))
    val = tab.where(in_s & (tab.split == "val"))
    cfg = rc.encoder_config(objective)
    torch.manual_seed(cfg.seed)
    model = E.build_encoder(rc.encoder_variant(objective))
    res = E.train_encoder(model, train, val, cfg, regions=regions)
    return model, res


def geometry_for(objective: str) -> str:
    return "euclidean" if objective == "psc" else "cosine"


def embedding_report(model, tab: E.SegmentTable, train_subjects: Sequence[int], objective: str, k: int = 10,
                     modes: Sequence[str] = ("held_out_subject", "held_out_time", "held_out_channel")) -> dict:
    """k-NN region accuracy in each requested evaluation mode."""
    metric = geometry_for(objective)
    Z = E.embed_batch(model, tab.X)
    out: dict[str, Any] = {"objective": objective, "metric": metric, "k": k}
    in_s = np.isin(tab.subject, train_subjects)
    for mode in modes:
        if mode == "held_out_subject":
            ref = in_s & (tab.split == "train")
            qry = ~in_s
            if not qry.any():
                continue
            pred = ev.knn_classify(Z[ref], tab.region[ref], Z[qry], k=k, metric=metric)
            labels = sorted(set(tab.region))
            cm = ev.confusion_matrix(tab.region[qry], pred, labels)
            out[mode] = {"accuracy": float(np.mean(pred == tab.region[qry])), "chance": 1.0 / len(set(tab.region[qry])),
                         "confusion": cm.to_dict(), "n_train": int(ref.sum()), "n_test": int(qry.sum())}
        else:
            sub = tab.where(in_s)
            rep = ev.split_eval(Z[in_s], sub, mode.replace("-", "_"), k=k, metric=metric)
            out[mode] = rep.to_dict()
    proj, var = ev.pca_project(Z, 3)
    out["pca_explained"] = [float(v) for v in var]
    return out


def _overlap_fraction(lo: float, hi: float, intervals: Sequence[tuple[float, float]]) -> float:
    tot = sum(max(0.0, min(hi, b) - max(lo, a)) for a, b in intervals)
    return min(1.0, tot / (hi - lo))


def saliency_stage(model, ds: simgen.SimDataset, tab: E.SegmentTable, rc: RunConfig, subjects: Sequence[int] | None = None) -> dict:
    """Perturbation saliency against the generator's burst schedule.

    Freeze positions overlapping bursts by at least ``burst_overlap`` are compared
    with positions that touch no burst (one-sided rank-sum on importance ranks).
    """
    e = rc.eval
    fs = ds.fs
    region = e["saliency_region"]
    keys = {k: i for i, k in enumerate(ds.keys())}
    rng = np.random.default_rng(stage_seed(rc.seed, "saliency"))
    cand = np.flatnonzero((tab.region == region) & (tab.split == "test") &
                          (np.isin(tab.subject, subjects) if subjects is not None else True))
    cand = cand[rng.permutation(len(cand))]
    embed_fn = lambda X: E.embed_batch(model, X.astype(np.float32))  # noqa: E731
    burst_ranks, free_ranks, used = [], [], []
    for j in cand:
        if len(used) >= e["saliency_segments"]:
            break
        ci = keys[simgen.channel_key(tab.subject[j], tab.session[j], tab.region[j], tab.channel[j])]
        t0 = tab.start[j] / fs
        intervals = ds.burst_intervals(ci)
        flen = e["freeze_sec"]
        starts = np.arange(0, E.SEGMENT_SAMPLES - int(round(flen * fs)) + 1, max(1, int(round(flen * fs)) // 2)) / fs
        frac = np.array([_overlap_fraction(t0 + s, t0 + s + flen, intervals) for s in starts])
        is_burst = frac >= e["burst_overlap"]
        is_free = frac == 0
        if not is_burst.any() or not is_free.any():
            continue
        sal = ev.perturbation_saliency(embed_fn, tab.X[j], fs, flen, e["n_perturb"], rng)
        rank = sal.importance_rank()
        burst_ranks.extend(rank[is_burst].tolist())
        free_ranks.extend(rank[is_free].tolist())
        used.append(int(j))
    if not used:
        raise ValueError(f"no {region} test segment mixes burst and burst-free freeze positions")
    test = stats.mannwhitneyu(burst_ranks, free_ranks, alternative="less")
    return {"region": region, "n_segments": len(used), "segments": used,
            "mean_rank_burst": float(np.mean(burst_ranks)), "mean_rank_free": float(np.mean(free_ranks)),
            "n_burst_positions": len(burst_ranks), "n_free_positions": len(free_ranks),
            "u": float(test.statistic), "p": float(test.pvalue)}


BETA_REGIONS = tuple(r for r, sig in simgen.SIGNATURES.items() if any(c.name == "beta" for c in sig.components))


def sweep_stage(model, tab: E.SegmentTable, rc: RunConfig, objective: str, train_subjects: Sequence[int]) -> dict:
    e = rc.eval
    geometry = geometry_for(objective)
    ref = np.isin(tab.subject, train_subjects) & (tab.split == "train")
    cents = ev.region_centroids(E.embed_batch(model, tab.X[ref]), tab.region[ref], geometry)
    embed_fn = lambda X: E.embed_batch(model, X.astype(np.float32))  # noqa: E731
    traj = ev.frequency_sweep(embed_fn, e["sweep_start"], e["sweep_end"], e["sweep_steps"], cents, geometry=geometry)
    step = float(np.median(np.diff(traj.freqs)))
    one, ten = max(1, int(round(1.0 / step))), max(1, int(round(10.0 / step)))
    i20 = int(np.argmin(np.abs(traj.freqs - 20.0)))
    return {"freqs": traj.freqs.tolist(), "nearest": traj.nearest, "adjacent_distance": traj.step_distance(one),
            "ten_hz_distance": traj.step_distance(ten), "nearest_at_20hz": traj.nearest[i20],
            "beta_regions": list(BETA_REGIONS), "centroid_names": traj.centroid_names, "centroid_dist": traj.centroid_dist.tolist()}


# -- reconstruction ablation ---------------------------------------------------------------------


def subject_scores(rows: Sequence[dict], subjects: Sequence[int]) -> tuple[list[float], dict]:
    """Per-subject Fisher-r over valid rows; subjects with no valid r score 0 (degenerate floor)."""
    per, excluded = [], 0
    for s in subjects:
        rs = [r["r"] for r in rows if r["subject"] == s and r["r"] is not None]
        excluded += sum(1 for r in rows if r["subject"] == s and r["r"] is None)
        per.append(ev.fisher_mean_clipped(rs) if rs else 0.0)
    valid = [r["r"] for r in rows if r["r"] is not None]
    pooled = ev.fisher_mean_clipped(valid) if valid else 0.0
    return per, {"pooled_fisher_r": pooled, "n_valid": len(valid), "n_excluded": excluded}


def train_recon_stage(data: R.ReconData, identities: Mapping[str, R.ChannelIdentity], rc: RunConfig):
    id_dim = len(next(iter(identities.values())).vector)
    cfg = rc.recon_config(id_dim)
    model = R.build_recon(cfg)
    res = R.train_recon(model, data, identities, rc.recon["region"], cfg,
                        max_train_windows=rc.recon["max_train_windows"] or None,
                        max_val_windows=rc.recon["max_val_windows"] or None)
    return model, res


def evaluate_recon_model(model, data: R.ReconData, identities, region: str) -> list[dict]:
    items = data.windows("test")
    return R.evaluate_windows(R.transformer_predictor(model, data, identities, region), data, items, region)


def baseline_rows(kind: str, data: R.ReconData, rc: RunConfig, subjects: Sequence[int]) -> list[dict]:
    region = rc.recon["region"]
    cfg = rc.baseline_config()
    models = {s: B.fit_subject_baseline(kind, data, s, region, cfg) for s in subjects}
    return R.evaluate_windows(B.baseline_predictor(models, data, region), data, data.windows("test"), region)


def comparison_report(scores: Mapping[str, Sequence[float]], reference: str, subjects: Sequence[int]) -> dict:
    others = {k: v for k, v in scores.items() if k != reference}
    res = ev.paired_tests(scores[reference], others) if len(subjects) >= 2 and others else None
    return {"reference": reference, "subjects": list(subjects),
            "per_subject": {k: list(map(float, v)) for k, v in scores.items()},
            "tests": res.to_dict() if res else None}
