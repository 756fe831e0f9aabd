"""Synthetic multi-region LFP generator with subject/session/electrode hierarchy.

Each region carries a fixed set of oscillatory components (bursty or continuous).
Parameters are drawn hierarchically; the burst schedule is drawn once per session
and shared by every electrode recorded in that session, so simultaneously recorded
regions are temporally coupled (the same slot clock drives all bursty components).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

DEFAULT_REGIONS = ("GPi", "STN", "VO", "Motor", "VIM")

SLOT_SEC = 1.0
BURST_SEC = 0.5

# (low, high) sampling intervals of the subject-level parameters.
SUBJECT_INTERVALS: dict[str, tuple[float, float]] = {
    "beta_gain": (0.8, 1.5),
    "beta_freq_offset": (-2.0, 2.0),
    "beta_burst_prob": (0.3, 0.7),
    "spindle_gain": (0.8, 1.3),
    "spindle_freq_offset": (-1.0, 1.0),
    "spindle_burst_prob": (0.2, 0.5),
    "gamma_gain": (0.3, 0.7),
    "gamma_freq_offset": (-5.0, 5.0),
    "hfo_gain": (0.1, 0.3),
    "hfo_freq_offset": (-10.0, 10.0),
    "slow_gain": (0.8, 1.2),
    "slow_freq_offset": (-0.3, 0.3),
    "noise_level": (0.3, 0.4),
}
SESSION_NOISE_INTERVAL = (0.05, 0.15)
ELECTRODE_GAIN_INTERVAL = (0.9, 1.1)
ELECTRODE_NOISE_INTERVAL = (0.03, 0.1)


@dataclass(frozen=True)
class Component:
    kind: str  # "burst" or "continuous"
    name: str  # prefix of the SubjectParams keys: beta, spindle, gamma, hfo, slow
    base_freq: float

    @property
    def gain_key(self) -> str:
        return f"{self.name}_gain"

    @property
    def offset_key(self) -> str:
        return f"{self.name}_freq_offset"

    @property
    def prob_key(self) -> str | None:
        return f"{self.name}_burst_prob" if self.kind == "burst" else None


BETA = Component("burst", "beta", 20.0)
SPINDLE = Component("burst", "spindle", 14.0)
GAMMA = Component("continuous", "gamma", 40.0)
HFO = Component("continuous", "hfo", 150.0)
SLOW = Component("continuous", "slow", 1.0)


@dataclass(frozen=True)
class RegionSignature:
    name: str
    components: tuple[Component, ...]


SIGNATURES: dict[str, RegionSignature] = {
    "GPi": RegionSignature("GPi", (BETA,)),
    "STN": RegionSignature("STN", (BETA, HFO)),
    "VO": RegionSignature("VO", (SPINDLE,)),
    "Motor": RegionSignature("Motor", (GAMMA,)),
    "VIM": RegionSignature("VIM", (SLOW,)),
}


@dataclass(frozen=True)
class SimSpec:
    n_subjects: int = 10
    n_sessions: int = 2
    regions: tuple[str, ...] = DEFAULT_REGIONS
    n_channels_per_region: int = 4
    fs: float = 1000.0
    session_duration: float = 120.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        for name in ("n_subjects", "n_sessions", "n_channels_per_region"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.regions:
            raise ValueError("regions must be non-empty")
        unknown = [r for r in self.regions if r not in SIGNATURES]
        if unknown:
            raise ValueError(f"unknown regions: {unknown}")
        if len(set(self.regions)) != len(self.regions):
            raise ValueError("duplicate region names")
        if self.session_duration < 20:
            raise ValueError("session_duration must be >= 20 s")
        top = max(
            c.base_freq + SUBJECT_INTERVALS[c.offset_key][1]
            for r in self.regions
            for c in SIGNATURES[r].components
        )
        if self.fs <= 2 * top:
            raise ValueError(f"fs={self.fs} Hz is below Nyquist for a {top} Hz component")
        n = self.session_duration * self.fs
        if abs(n - round(n)) > 1e-9:
            raise ValueError("session_duration * fs must be an integer sample count")

    @property
    def n_samples(self) -> int:
        return int(round(self.session_duration * self.fs))

    @property
    def n_channels(self) -> int:
        return self.n_subjects * self.n_sessions * len(self.regions) * self.n_channels_per_region


@dataclass(frozen=True)
class SubjectParams:
    beta_gain: float
    beta_freq_offset: float
    beta_burst_prob: float
    spindle_gain: float
    spindle_freq_offset: float
    spindle_burst_prob: float
    gamma_gain: float
    gamma_freq_offset: float
    hfo_gain: float
    hfo_freq_offset: float
    slow_gain: float
    slow_freq_offset: float
    noise_level: float

    @classmethod
    def midpoints(cls) -> "SubjectParams":
        return cls(**{k: 0.5 * (lo + hi) for k, (lo, hi) in SUBJECT_INTERVALS.items()})


@dataclass(frozen=True)
class SessionParams:
    session_noise: float


@dataclass(frozen=True)
class ElectrodeParams:
    gain: float
    electrode_noise: float


@dataclass
class ParamHierarchy:
    subjects: list[SubjectParams]
    sessions: list[list[SessionParams]]  # [subject][session]
    # [subject][session][region][channel]
    electrodes: list[list[list[list[ElectrodeParams]]]]

    def electrode_list(self) -> list[ElectrodeParams]:
        return [e for subj in self.electrodes for sess in subj for reg in sess for e in reg]


@dataclass
class BurstSchedule:
    """Slot clock shared by the bursty components of one session.

    A component with burst probability p fires in slot k iff ``latent[k] < p``;
    the burst starts ``onset[k]`` seconds into the slot.
    """

    latent: np.ndarray
    onset: np.ndarray
    phases: dict[str, float] = field(default_factory=dict)

    @classmethod
    def draw(cls, duration: float, rng: np.random.Generator) -> "BurstSchedule":
        n_slots = int(math.floor(duration / SLOT_SEC + 1e-9))
        latent = rng.uniform(0.0, 1.0, n_slots)
        onset = rng.uniform(0.0, SLOT_SEC - BURST_SEC, n_slots)
        phases = {c.name: float(rng.uniform(0.0, 2 * np.pi)) for c in (GAMMA, HFO, SLOW)}
        return cls(latent=latent, onset=onset, phases=phases)

    def burst_intervals(self, prob: float) -> list[tuple[float, float]]:
        """(start, stop) seconds of every burst fired at probability ``prob``."""
        out = []
        for k, (u, o) in enumerate(zip(self.latent, self.onset)):
            if u < prob:
                start = k * SLOT_SEC + o
                out.append((start, start + BURST_SEC))
        return out


@dataclass
class SimDataset:
    spec: SimSpec
    params: ParamHierarchy
    schedules: list[list[BurstSchedule]]  # [subject][session]
    waveforms: np.ndarray  # (n_channels, n_samples) float32
    subject: np.ndarray
    session: np.ndarray
    region: np.ndarray  # region names
    channel: np.ndarray  # channel index within region
    coordinates: np.ndarray | None = None  # (n_channels, 3)

    def __len__(self) -> int:
        return len(self.waveforms)

    @property
    def fs(self) -> float:
        return self.spec.fs

    def keys(self) -> list[str]:
        return [
            channel_key(s, ss, r, c)
            for s, ss, r, c in zip(self.subject, self.session, self.region, self.channel)
        ]

    def burst_intervals(self, i: int) -> list[tuple[float, float]]:
        """Ground-truth burst intervals (seconds) of any bursty component on channel ``i``."""
        subj = self.params.subjects[self.subject[i]]
        sched = self.schedules[self.subject[i]][self.session[i]]
        out = []
        for comp in SIGNATURES[self.region[i]].components:
            if comp.kind == "burst":
                out.extend(sched.burst_intervals(getattr(subj, comp.prob_key)))
        return sorted(out)


def channel_key(subject: int, session: int, region: str, channel: int) -> str:
    return f"s{int(subject)}_r{region}_c{int(channel)}_sess{int(session)}"


def _uniform(rng: np.random.Generator, interval: tuple[float, float]) -> float:
    return float(rng.uniform(*interval))


def sample_param_hierarchy(spec: SimSpec, rng: np.random.Generator) -> ParamHierarchy:
    """Draw subject, session and electrode parameters in a fixed order.

    Subject draws for all subjects come first (in SubjectParams field order), then for
    each subject its sessions, and within each session its electrodes.
    """
    subjects = []
    for _ in range(spec.n_subjects):
        subjects.append(
            SubjectParams(**{f.name: _uniform(rng, SUBJECT_INTERVALS[f.name]) for f in fields(SubjectParams)})
        )
    sessions, electrodes = [], []
    for _ in range(spec.n_subjects):
        subj_sessions, subj_elecs = [], []
        for _ in range(spec.n_sessions):
            subj_sessions.append(SessionParams(_uniform(rng, SESSION_NOISE_INTERVAL)))
            regs = []
            for _ in spec.regions:
                regs.append([
                    ElectrodeParams(_uniform(rng, ELECTRODE_GAIN_INTERVAL), _uniform(rng, ELECTRODE_NOISE_INTERVAL))
                    for _ in range(spec.n_channels_per_region)
                ])
            subj_elecs.append(regs)
        sessions.append(subj_sessions)
        electrodes.append(subj_elecs)
    return ParamHierarchy(subjects, sessions, electrodes)


def burst_waveform(
    n_samples: int, fs: float, freq: float, intervals: Sequence[tuple[float, float]]
) -> np.ndarray:
    """Hann-windowed cosine bursts, phase zero at each burst centre."""
    out = np.zeros(n_samples)
    blen = int(round(BURST_SEC * fs))
    env = np.hanning(blen)
    tt = (np.arange(blen) - (blen - 1) / 2) / fs
    burst = env * np.cos(2 * np.pi * freq * tt)
    for start, _ in intervals:
        i0 = int(round(start * fs))
        i1 = min(i0 + blen, n_samples)
        if i1 > i0:
            out[i0:i1] += burst[: i1 - i0]
    return out


def synth_region_signal(
    region: RegionSignature | str,
    dur: float,
    fs: float,
    subj: SubjectParams,
    elec: ElectrodeParams,
    sess: SessionParams,
    rng: np.random.Generator,
    schedule: BurstSchedule | None = None,
) -> np.ndarray:
    """Synthesize one electrode's waveform (float64).

    When ``schedule`` is None a private schedule is drawn from ``rng`` first.
    """
    if isinstance(region, str):
        region = SIGNATURES[region]
    n = dur * fs
    if abs(n - round(n)) > 1e-9:
        raise ValueError("dur * fs must be an integer sample count")
    n = int(round(n))
    for comp in region.components:
        f = comp.base_freq + getattr(subj, comp.offset_key)
        if fs <= 2 * f:
            raise ValueError(f"fs={fs} Hz is below Nyquist for the {f:.1f} Hz {comp.name} carrier")
    if schedule is None:
        schedule = BurstSchedule.draw(dur, rng)

    t = np.arange(n) / fs
    x = np.zeros(n)
    for comp in region.components:
        freq = comp.base_freq + getattr(subj, comp.offset_key)
        amp = getattr(subj, comp.gain_key) * elec.gain
        if amp == 0:
            continue
        if comp.kind == "burst":
            x += amp * burst_waveform(n, fs, freq, schedule.burst_intervals(getattr(subj, comp.prob_key)))
        else:
            x += amp * np.cos(2 * np.pi * freq * t + schedule.phases.get(comp.name, 0.0))
    sigma = math.sqrt(subj.noise_level**2 + sess.session_noise**2 + elec.electrode_noise**2)
    if sigma > 0:
        x += rng.normal(0.0, sigma, n)
    return x


def _seed_children(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def generate_dataset(spec: SimSpec) -> SimDataset:
    # substreams: [0] parameter hierarchy, [1] session schedules, [2] per-channel noise
    ss_params, ss_sched, ss_noise = _seed_children(spec.seed, 3)
    params = sample_param_hierarchy(spec, np.random.default_rng(ss_params))

    sched_rng = np.random.default_rng(ss_sched)
    schedules = [
        [BurstSchedule.draw(spec.session_duration, sched_rng) for _ in range(spec.n_sessions)]
        for _ in range(spec.n_subjects)
    ]

    n_ch = spec.n_channels
    noise_streams = ss_noise.spawn(n_ch)
    waves = np.empty((n_ch, spec.n_samples), dtype=np.float32)
    subject = np.empty(n_ch, dtype=np.int64)
    session = np.empty(n_ch, dtype=np.int64)
    region = np.empty(n_ch, dtype=object)
    channel = np.empty(n_ch, dtype=np.int64)
    i = 0
    for s in range(spec.n_subjects):
        for ss in range(spec.n_sessions):
            for ri, r in enumerate(spec.regions):
                for c in range(spec.n_channels_per_region):
                    waves[i] = synth_region_signal(
                        SIGNATURES[r],
                        spec.session_duration,
                        spec.fs,
                        params.subjects[s],
                        params.electrodes[s][ss][ri][c],
                        params.sessions[s][ss],
                        np.random.default_rng(noise_streams[i]),
                        schedule=schedules[s][ss],
                    )
                    subject[i], session[i], region[i], channel[i] = s, ss, r, c
                    i += 1
    region = region.astype(str)
    return SimDataset(spec, params, schedules, waves, subject, session, region, channel)


def default_region_centers(regions: Sequence[str], spacing: float = 10.0) -> dict[str, np.ndarray]:
    """Centres on a circle with neighbouring centres ``spacing`` apart."""
    n = len(regions)
    if n == 1:
        return {regions[0]: np.zeros(3)}
    radius = spacing / (2 * math.sin(math.pi / n))
    out = {}
    for k, r in enumerate(regions):
        a = 2 * math.pi * k / n
        out[r] = np.array([radius * math.cos(a), radius * math.sin(a), 0.0])
    return out


def assign_synthetic_coordinates(
    dataset: SimDataset,
    region_centers: Mapping[str, Sequence[float]] | None = None,
    spread: float = 1.0,
    overlap: float = 0.0,
    rng: np.random.Generator | None = None,
) -> SimDataset:
    """Return a copy of ``dataset`` with one 3-D coordinate per electrode.

    Each electrode sits at its region centre plus isotropic Gaussian jitter. Within
    every (subject, session, region) group, ``round(overlap * n)`` electrodes are also
    shifted a U(0.25, 0.75) fraction of the way toward the nearest other region centre.
    """
    if spread < 0:
        raise ValueError("spread must be >= 0")
    if not 0.0 <= overlap <= 1.0:
        raise ValueError("overlap must lie in [0, 1]")
    if region_centers is None:
        region_centers = default_region_centers(dataset.spec.regions, spacing=max(10.0, 4 * spread))
    centers = {k: np.asarray(v, dtype=float) for k, v in region_centers.items()}
    missing = sorted(set(dataset.region) - set(centers))
    if missing:
        raise KeyError(f"no centre for regions {missing}")
    rng = np.random.default_rng(dataset.spec.seed + 1) if rng is None else rng

    names = list(centers)
    nearest = {}
    for r in names:
        others = [o for o in names if o != r]
        if others:
            nearest[r] = min(others, key=lambda o: np.linalg.norm(centers[o] - centers[r]))

    coords = np.empty((len(dataset), 3))
    groups: dict[tuple, list[int]] = {}
    for i, key in enumerate(zip(dataset.subject, dataset.session, dataset.region)):
        groups.setdefault(key, []).append(i)
    for (_, _, r), idx in groups.items():
        idx = np.asarray(idx)
        jitter = rng.normal(0.0, 1.0, (len(idx), 3)) * spread
        pos = centers[r] + jitter
        n_move = int(round(overlap * len(idx)))
        if n_move and r in nearest:
            moved = rng.permutation(len(idx))[:n_move]
            frac = rng.uniform(0.25, 0.75, n_move)
            pos[moved] += frac[:, None] * (centers[nearest[r]] - centers[r])
        coords[idx] = pos
    return replace(dataset, coordinates=coords)


def nearest_center_accuracy(dataset: SimDataset, region_centers: Mapping[str, Sequence[float]]) -> float:
    names = list(region_centers)
    c = np.stack([np.asarray(region_centers[n], float) for n in names])
    d = np.linalg.norm(dataset.coordinates[:, None, :] - c[None], axis=-1)
    pred = np.asarray(names)[d.argmin(1)]
    return float(np.mean(pred == dataset.region))


# -- persistence -------------------------------------------------------------


def _spec_dict(spec: SimSpec) -> dict:
    d = asdict(spec)
    d["regions"] = list(spec.regions)
    return d


def save_dataset(dataset: SimDataset, directory: str | Path) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 file per channel."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = []
    for i, key in enumerate(dataset.keys()):
        fname = f"{key}.f32"
        dataset.waveforms[i].astype("<f4").tofile(directory / fname)
        row = {
            "file": fname,
            "subject": int(dataset.subject[i]),
            "session": int(dataset.session[i]),
            "region": str(dataset.region[i]),
            "channel": int(dataset.channel[i]),
        }
        if dataset.coordinates is not None:
            row["coordinate"] = [float(v) for v in dataset.coordinates[i]]
        table.append(row)
    p = dataset.params
    manifest = {
        "artifact": "simdataset",
        "version": 1,
        "spec": _spec_dict(dataset.spec),
        "n_samples": dataset.spec.n_samples,
        "params": {
            "subjects": [asdict(s) for s in p.subjects],
            "sessions": [[asdict(s) for s in subj] for subj in p.sessions],
            "electrodes": [[[[asdict(e) for e in reg] for reg in sess] for sess in subj] for subj in p.electrodes],
        },
        "schedules": [
            [{"latent": s.latent.tolist(), "onset": s.onset.tolist(), "phases": s.phases} for s in subj]
            for subj in dataset.schedules
        ],
        "channels": table,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_dataset(directory: str | Path) -> SimDataset:
    directory = Path(directory)
    m = json.loads((directory / "manifest.json").read_text())
    if m.get("artifact") != "simdataset" or m.get("version") != 1:
        raise ValueError(f"{directory} is not a version-1 simdataset")
    spec_d = dict(m["spec"])
    spec_d["regions"] = tuple(spec_d["regions"])
    spec = SimSpec(**spec_d)
    pp = m["params"]
    params = ParamHierarchy(
        [SubjectParams(**s) for s in pp["subjects"]],
        [[SessionParams(**s) for s in subj] for subj in pp["sessions"]],
        [[[[ElectrodeParams(**e) for e in reg] for reg in sess] for sess in subj] for subj in pp["electrodes"]],
    )
    schedules = [
        [BurstSchedule(np.asarray(s["latent"]), np.asarray(s["onset"]), dict(s["phases"])) for s in subj]
        for subj in m["schedules"]
    ]
    rows = m["channels"]
    n = m["n_samples"]
    waves = np.empty((len(rows), n), dtype=np.float32)
    for i, row in enumerate(rows):
        data = np.fromfile(directory / row["file"], dtype="<f4")
        if data.size != n:
            raise ValueError(f"{row['file']}: expected {n} samples, found {data.size}")
        waves[i] = data
    coords = None
    if rows and "coordinate" in rows[0]:
        coords = np.asarray([r["coordinate"] for r in rows], dtype=float)
    return SimDataset(
        spec,
        params,
        schedules,
        waves,
        np.asarray([r["subject"] for r in rows], dtype=np.int64),
        np.asarray([r["session"] for r in rows], dtype=np.int64),
        np.asarray([r["region"] for r in rows]).astype(str),
        np.asarray([r["channel"] for r in rows], dtype=np.int64),
        coords,
    )
