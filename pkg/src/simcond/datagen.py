"""Synthetic reference motions, environment randomization, tracking-based
filtering and the JSONL corpus format."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import physics
from .errors import CorpusParseError, EmptyCorpusError, ParameterError
from .physics import EARTH_G, FRAME_DIM, FRAME_RATE, N_JOINTS, SimParams, WorldConfig

SCHEMA_VERSION = 1

JUMP, WALK, HOP = 0, 1, 2
CLASS_NAMES = ("jump", "walk", "hop")
N_CLASSES = len(CLASS_NAMES)

N_FRAMES = 60
STAND_HEIGHT = 0.9
FOOT_SPREAD = 0.1
HEAD_HEIGHT = 0.65
REF_GRAVITY = 9.81

REFERENCE, TRACKED = "ref", "tracked"
# sampler outputs share the record format
GENERATED = "generated"


@dataclass(frozen=True)
class ArtifactConfig:
    """Capture artifacts injected into references.

    ``offset_range`` is a uniform whole-figure vertical offset (m).
    ``skate_max`` bounds the per-frame horizontal drift (m) of a foot during each
    of its contact phases; the drift is released once the foot lifts.
    ``offset`` overrides the random draw when not ``None``.
    """

    offset_range: tuple[float, float] = (-0.02, 0.04)
    skate_max: float = 0.01
    offset: float | None = None

    @classmethod
    def clean(cls) -> "ArtifactConfig":
        return cls(offset_range=(0.0, 0.0), skate_max=0.0, offset=0.0)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, (tuple, list)):
        return np.random.default_rng(np.random.SeedSequence([int(s) for s in seed]))
    return np.random.default_rng(seed)


# --- kinematic building blocks -------------------------------------------

def _hermite(s, p0, p1, m0, m1):
    s2, s3 = s * s, s * s * s
    return (2 * s3 - 3 * s2 + 1) * p0 + (s3 - 2 * s2 + s) * m0 + (-2 * s3 + 3 * s2) * p1 + (s3 - s2) * m1


def _ease(s):
    return 0.5 - 0.5 * np.cos(np.pi * np.clip(s, 0.0, 1.0))


class _Track:
    """Piecewise root-height profile with a per-frame flight indicator."""

    def __init__(self, times: np.ndarray):
        self.t = times
        self.z = np.full(times.shape, STAND_HEIGHT)
        self.flight = np.zeros(times.shape, dtype=bool)
        self.flight_s = np.zeros(times.shape)
        self.flight_id = np.full(times.shape, -1)
        self.cursor = 0.0
        self.n_flights = 0

    def _mask(self, dur):
        m = (self.t >= self.cursor) & (self.t < self.cursor + dur)
        return m, (self.t[m] - self.cursor) / dur

    def hold(self, dur, z):
        m, _ = self._mask(dur)
        self.z[m] = z
        self.cursor += dur

    def ease(self, dur, z0, z1):
        m, s = self._mask(dur)
        self.z[m] = z0 + (z1 - z0) * _ease(s)
        self.cursor += dur

    def hermite(self, dur, z0, z1, v0, v1):
        m, s = self._mask(dur)
        self.z[m] = _hermite(s, z0, z1, v0 * dur, v1 * dur)
        self.cursor += dur

    def ballistic(self, v0, g=REF_GRAVITY):
        dur = 2 * v0 / g
        m, s = self._mask(dur)
        tau = s * dur
        self.z[m] = STAND_HEIGHT + v0 * tau - 0.5 * g * tau * tau
        self.flight[m] = True
        self.flight_s[m] = s
        self.flight_id[m] = self.n_flights
        self.n_flights += 1
        self.cursor += dur

    def jump(self, height, crouch, crouch_time, recover_time):
        v0 = math.sqrt(2 * REF_GRAVITY * height)
        low = STAND_HEIGHT - crouch
        push = 1.5 * crouch / v0
        self.ease(crouch_time, STAND_HEIGHT, low)
        self.hermite(push, low, STAND_HEIGHT, 0.0, v0)
        self.ballistic(v0)
        self.hermite(push, STAND_HEIGHT, low, -v0, 0.0)
        self.ease(recover_time, low, STAND_HEIGHT)


def _assemble(root, feet, head_offset=HEAD_HEIGHT) -> np.ndarray:
    F = root.shape[0]
    j = np.zeros((F, N_JOINTS, 3))
    j[:, physics.ROOT] = root
    j[:, physics.LFOOT] = feet[0]
    j[:, physics.RFOOT] = feet[1]
    j[:, physics.HEAD] = root + np.array([0.0, 0.0, head_offset])
    return j


def _jump_like(rng, times, hops: int):
    tr = _Track(times)
    if hops == 1:
        tr.hold(rng.uniform(0.15, 0.35), STAND_HEIGHT)
        tr.jump(rng.uniform(0.25, 0.35), rng.uniform(0.12, 0.18), rng.uniform(0.25, 0.35), rng.uniform(0.25, 0.35))
        tuck = rng.uniform(0.05, 0.15, size=1)
        travel = rng.uniform(-0.02, 0.02, size=(1, 2))
    else:
        tr.hold(rng.uniform(0.1, 0.25), STAND_HEIGHT)
        for _ in range(hops):
            tr.jump(rng.uniform(0.04, 0.08), rng.uniform(0.03, 0.06), rng.uniform(0.08, 0.12), rng.uniform(0.08, 0.12))
        tuck = rng.uniform(0.0, 0.04, size=hops)
        travel = rng.uniform(-0.02, 0.02, size=(hops, 2))
    F = times.shape[0]
    root = np.zeros((F, 3))
    root[:, 2] = tr.z
    # horizontal travel during each flight, held afterwards
    xy = np.zeros((F, 2))
    done = np.zeros(2)
    for k in range(tr.n_flights):
        m = tr.flight_id == k
        xy[m] = done + travel[k] * _ease(tr.flight_s[m])[:, None]
        after = np.zeros(F, dtype=bool)
        idx = np.flatnonzero(m)
        if idx.size:
            after[idx[-1] + 1:] = True
        done = done + travel[k]
        xy[after] = done
    root[:, :2] = xy
    lift = np.zeros(F)
    for k in range(tr.n_flights):
        m = tr.flight_id == k
        lift[m] = tr.z[m] - STAND_HEIGHT + tuck[k] * np.sin(np.pi * tr.flight_s[m])
    feet = []
    for side in (1.0, -1.0):
        f = np.zeros((F, 3))
        f[:, 0] = xy[:, 0]
        f[:, 1] = xy[:, 1] + side * FOOT_SPREAD
        f[:, 2] = np.where(tr.flight, lift, 0.0)
        feet.append(f)
    return _assemble(root, feet)


def _walk(rng, times):
    speed = rng.uniform(0.25, 0.4)
    period = rng.uniform(0.9, 1.1)
    lift_h = rng.uniform(0.06, 0.1)
    phase0 = rng.uniform(0.0, 1.0)
    F = times.shape[0]
    root = np.zeros((F, 3))
    root[:, 0] = speed * times
    u_root = times / period + phase0
    root[:, 2] = STAND_HEIGHT - 0.02 - 0.01 * np.cos(4 * np.pi * u_root)
    stride = speed * period
    feet = []
    for k, side in enumerate((1.0, -1.0)):
        theta = phase0 + 0.5 * k
        u = times / period + theta
        c = np.floor(u)
        psi = u - c
        x_stance = stride * (c + 0.3 - theta)
        s = np.clip((psi - 0.6) / 0.4, 0.0, 1.0)
        swing = psi >= 0.6
        f = np.zeros((F, 3))
        f[:, 0] = np.where(swing, x_stance + stride * (3 * s**2 - 2 * s**3), x_stance)
        f[:, 1] = side * FOOT_SPREAD
        f[:, 2] = np.where(swing, lift_h * np.sin(np.pi * s), 0.0)
        feet.append(f)
    return _assemble(root, feet)


def _inject_artifacts(j: np.ndarray, rng, art: ArtifactConfig) -> np.ndarray:
    j = j.copy()
    clean_contact = j[:, list(physics.FEET), 2] <= 1e-12
    offset = art.offset if art.offset is not None else rng.uniform(*art.offset_range)
    for fi, foot in enumerate(physics.FEET):
        contact = clean_contact[:, fi]
        drift = np.zeros(2)
        disp = np.zeros((j.shape[0], 2))
        for n in range(j.shape[0]):
            if contact[n]:
                if n == 0 or not contact[n - 1]:
                    speed = rng.uniform(0.0, art.skate_max) if art.skate_max > 0 else 0.0
                    ang = rng.uniform(0.0, 2 * np.pi)
                    vel = speed * np.array([np.cos(ang), np.sin(ang)])
                else:
                    drift = drift + vel
            else:
                drift = drift * 0.6
            disp[n] = drift
        j[:, foot, :2] += disp
    j[:, :, 2] += offset
    return j


def gen_reference(
    class_label: int,
    seed,
    artifact_cfg: ArtifactConfig = ArtifactConfig(),
    n_frames: int = N_FRAMES,
) -> np.ndarray:
    """Analytic reference motion of the given class, shape ``(n_frames, 12)``."""
    if class_label not in (JUMP, WALK, HOP):
        raise ParameterError(f"unknown motion class {class_label!r}")
    rng = _rng(seed)
    times = np.arange(n_frames) / FRAME_RATE
    if class_label == JUMP:
        j = _jump_like(rng, times, hops=1)
    elif class_label == HOP:
        j = _jump_like(rng, times, hops=3)
    else:
        j = _walk(rng, times)
    j = _inject_artifacts(j, rng, artifact_cfg)
    return j.reshape(n_frames, FRAME_DIM)


# --- environment randomization -------------------------------------------

SINGLE_PARAM, FIXED_EARTH = "single_param", "fixed_earth"
FIXED_EARTH_PHI = SimParams(-9.8, 0.0, 0.0)


@dataclass(frozen=True)
class RandomizationSpec:
    gravity_range: tuple[float, float] = (-20.0, -1.0)
    wind_range: tuple[float, float] = (-10.0, 10.0)
    mode: str = SINGLE_PARAM

    def __post_init__(self):
        g_lo, g_hi = self.gravity_range
        w_lo, w_hi = self.wind_range
        if not (g_lo <= g_hi < 0) or not (w_lo <= w_hi):
            raise ParameterError("randomization ranges must be ordered with gravity < 0")
        if self.mode not in (SINGLE_PARAM, FIXED_EARTH):
            raise ParameterError(f"unknown randomization mode {self.mode!r}")


def sample_phi(spec: RandomizationSpec, seed) -> SimParams:
    if spec.mode == FIXED_EARTH:
        return FIXED_EARTH_PHI
    rng = _rng(seed)
    axis = int(rng.integers(3))
    lo, hi = spec.gravity_range if axis == 0 else spec.wind_range
    value = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    phi = [EARTH_G, 0.0, 0.0]
    phi[axis] = value
    return SimParams(*phi)


def d_l2(ref: np.ndarray, trk: np.ndarray) -> np.ndarray | float:
    """Mean over frames of the per-frame Euclidean distance across all joint coordinates."""
    ref = np.asarray(ref, dtype=np.float64)
    trk = np.asarray(trk, dtype=np.float64)
    if ref.shape != trk.shape:
        raise ParameterError(f"d_l2: shape mismatch {ref.shape} vs {trk.shape}")
    out = np.linalg.norm(ref - trk, axis=-1).mean(axis=-1)
    return float(out) if out.ndim == 0 else out


# --- corpus ----------------------------------------------------------------

@dataclass
class MotionRecord:
    id: str
    class_label: int
    phi: SimParams
    motion: np.ndarray
    source: str
    d_l2: float | None = None
    frame_rate: int = FRAME_RATE

    def __eq__(self, other):
        if not isinstance(other, MotionRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.class_label == other.class_label
            and self.phi == other.phi
            and self.source == other.source
            and self.d_l2 == other.d_l2
            and self.frame_rate == other.frame_rate
            and self.motion.shape == other.motion.shape
            and bool(np.array_equal(self.motion, other.motion))
        )


@dataclass
class GenerationReport:
    n_clips: int
    n_retained: int
    n_failed: int
    threshold: float
    mode: str
    phi_histograms: dict = field(default_factory=dict)
    d_l2_quantiles: dict = field(default_factory=dict)

    @property
    def retention(self) -> float:
        return self.n_retained / self.n_clips if self.n_clips else 0.0

    def to_dict(self) -> dict:
        return {
            "n_clips": self.n_clips,
            "n_retained": self.n_retained,
            "n_failed": self.n_failed,
            "retention": self.retention,
            "threshold": self.threshold,
            "mode": self.mode,
            "phi_histograms": self.phi_histograms,
            "d_l2_quantiles": self.d_l2_quantiles,
        }


def _clip_inputs(i: int, spec, seed, artifacts, n_frames):
    label = i % N_CLASSES
    motion = gen_reference(label, (seed, i, 0), artifacts, n_frames)
    phi = sample_phi(spec, (seed, i, 1))
    return label, motion, phi


def _generate_chunk(args):
    indices, spec, seed, artifacts, cfg, n_frames = args
    labels, refs, phis = [], [], []
    for i in indices:
        label, motion, phi = _clip_inputs(i, spec, seed, artifacts, n_frames)
        labels.append(label)
        refs.append(motion)
        phis.append(phi.as_array())
    refs = np.stack(refs)
    phis = np.stack(phis)
    tracked, fail = physics.rollout(refs, phis, cfg)
    dists = d_l2(refs, tracked)
    return labels, refs, phis, tracked, fail, np.atleast_1d(dists)


def track_population(n_clips, spec, seed, artifacts=ArtifactConfig(), cfg=WorldConfig(),
                     n_frames=N_FRAMES, jobs=1, chunk=512):
    """Generate and track ``n_clips`` references; deterministic for any ``jobs``."""
    chunks = [
        (list(range(s, min(s + chunk, n_clips))), spec, seed, artifacts, cfg, n_frames)
        for s in range(0, n_clips, chunk)
    ]
    if jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_generate_chunk, chunks))
    else:
        parts = [_generate_chunk(c) for c in chunks]
    labels = [l for p in parts for l in p[0]]
    cat = [np.concatenate([p[k] for p in parts]) for k in range(1, 6)]
    return (labels, *cat)


def _histogram(values, lo, hi, bins=10):
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


def build_corpus(
    n_clips: int,
    spec: RandomizationSpec,
    threshold: float,
    seed: int,
    *,
    artifacts: ArtifactConfig = ArtifactConfig(),
    cfg: WorldConfig = WorldConfig(),
    n_frames: int = N_FRAMES,
    include_references: bool = True,
    jobs: int = 1,
) -> tuple[list[MotionRecord], GenerationReport]:
    """Track every reference under its sampled environment and keep clips whose
    tracking discrepancy stays within ``threshold``.

    The record list holds every reference (when ``include_references``) followed
    by the retained tracked clips, in clip order.
    """
    if not threshold >= 0:
        raise ParameterError(f"threshold must be >= 0, got {threshold}")
    labels, refs, phis, tracked, fail, dists = track_population(
        n_clips, spec, seed, artifacts, cfg, n_frames, jobs
    )
    keep = (fail < 0) & (dists <= threshold)
    records: list[MotionRecord] = []
    if include_references:
        for i in range(n_clips):
            records.append(MotionRecord(
                f"clip{i:06d}-ref", labels[i], SimParams.from_array(phis[i]), refs[i], REFERENCE,
            ))
    for i in np.flatnonzero(keep):
        records.append(MotionRecord(
            f"clip{i:06d}-trk", labels[i], SimParams.from_array(phis[i]), tracked[i], TRACKED,
            float(dists[i]),
        ))
    kept_phi = phis[keep]
    report = GenerationReport(
        n_clips=n_clips,
        n_retained=int(keep.sum()),
        n_failed=int((fail >= 0).sum()),
        threshold=float(threshold),
        mode=spec.mode,
        phi_histograms={
            "g_z": _histogram(kept_phi[:, 0], *_hist_range(spec.gravity_range)),
            "w_x": _histogram(kept_phi[:, 1], *_hist_range(spec.wind_range)),
            "w_y": _histogram(kept_phi[:, 2], *_hist_range(spec.wind_range)),
        },
        d_l2_quantiles={q: float(np.quantile(dists, float(q))) for q in ("0.5", "0.9", "0.99")},
    )
    if report.n_retained == 0:
        raise EmptyCorpusError(
            f"no clip passed the tracking filter (threshold {threshold}, {report.n_failed} failures)"
        )
    return records, report


def _hist_range(r):
    lo, hi = r
    return (lo, hi) if hi > lo else (lo - 0.5, lo + 0.5)


def calibrate_threshold(
    spec: RandomizationSpec,
    n_clips: int = 600,
    seed: int = 12345,
    quantile: float = 0.9,
    artifacts: ArtifactConfig = ArtifactConfig(),
    cfg: WorldConfig = WorldConfig(),
) -> float:
    """Filter threshold = ``quantile`` of the tracking discrepancy over a
    calibration population drawn like the corpus itself."""
    _, _, _, _, fail, dists = track_population(n_clips, spec, seed, artifacts, cfg)
    return float(np.quantile(dists[fail < 0], quantile))


# --- JSONL -----------------------------------------------------------------

def record_to_json(r: MotionRecord) -> str:
    frames = np.asarray(r.motion, dtype=np.float64)
    payload = {
        "id": r.id,
        "class": int(r.class_label),
        "phi": [float(r.phi.g_z), float(r.phi.w_x), float(r.phi.w_y)],
        "frame_rate": int(r.frame_rate),
        "frames": frames.tolist(),
        "source": r.source,
        "d_l2": None if r.d_l2 is None else float(r.d_l2),
        "schema": SCHEMA_VERSION,
    }
    return json.dumps(payload, separators=(",", ":"), allow_nan=False)


def record_from_json(obj: dict) -> MotionRecord:
    if obj.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema {obj.get('schema')!r}")
    frames = np.asarray(obj["frames"], dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != FRAME_DIM:
        raise ValueError(f"frames must be F x {FRAME_DIM}, got {frames.shape}")
    source = obj["source"]
    if source not in (REFERENCE, TRACKED, GENERATED):
        raise ValueError(f"unknown source {source!r}")
    d = obj["d_l2"]
    if (d is None) == (source == TRACKED):
        raise ValueError("d_l2 must be present exactly for tracked records")
    phi = obj["phi"]
    if len(phi) != 3:
        raise ValueError("phi must have three entries")
    return MotionRecord(
        id=str(obj["id"]),
        class_label=int(obj["class"]),
        phi=SimParams(*(float(v) for v in phi)),
        motion=frames,
        source=source,
        d_l2=None if d is None else float(d),
        frame_rate=int(obj["frame_rate"]),
    )


def write_corpus(records: Iterable[MotionRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(record_to_json(r))
            fh.write("\n")


def read_corpus(path) -> list[MotionRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(record_from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusParseError(path, line_no, str(exc)) from exc
    return out


def select(records: Sequence[MotionRecord], source: str) -> list[MotionRecord]:
    return [r for r in records if r.source == source]


def write_report(report: GenerationReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
