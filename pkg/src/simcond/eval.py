"""Metric aggregation, distribution statistics, environment-compliance sweeps,
sampler timing and report emission."""

from __future__ import annotations

import csv
import hashlib
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np
from scipy import stats

from . import physics
from .errors import ParameterError
from .physics import EARTH, FEET, ROOT, FRAME_RATE, SimParams

FEATURE_NAMES = ("mean_height", "apex", "displacement", "mean_speed", "contact_ratio")
REGULARIZER = 1e-6

GRAVITY, WIND_X, WIND_Y, ALPHA = "gravity", "wind_x", "wind_y", "alpha"
AXES = (GRAVITY, WIND_X, WIND_Y)


def motion_features(motions: np.ndarray, frame_rate: int = FRAME_RATE) -> np.ndarray:
    """Handcrafted per-motion descriptors, ``(n, 5)``, ordered as ``FEATURE_NAMES``."""
    m = np.asarray(motions, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    j = m.reshape(m.shape[0], m.shape[1], physics.N_JOINTS, 3)
    root = j[:, :, ROOT]
    speed = np.linalg.norm(np.diff(root, axis=1), axis=-1) * frame_rate
    feet_z = j[:, :, list(FEET), 2]
    contact = (feet_z <= physics.CONTACT_TOLERANCE_MM / 1000.0).mean(axis=(1, 2))
    return np.stack([
        root[:, :, 2].mean(axis=1),
        root[:, :, 2].max(axis=1),
        np.linalg.norm(root[:, -1, :2] - root[:, 0, :2], axis=-1),
        speed.mean(axis=1),
        contact,
    ], axis=1)


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_details(a, b, eps: float = REGULARIZER) -> tuple[float, bool]:
    """Fréchet distance between Gaussian fits of two feature sets, and whether
    the covariances had to be regularised."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    k = a.shape[1]
    if b.shape[1] != k:
        raise ParameterError("feature dimensions differ")
    if a.shape[0] < k + 1 or b.shape[0] < k + 1:
        raise ParameterError(f"need at least {k + 1} samples per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    flagged = False
    for c in (cov_a, cov_b):
        if np.linalg.eigvalsh(0.5 * (c + c.T)).min() < eps:
            flagged = True
    if flagged:
        cov_a = cov_a + eps * np.eye(k)
        cov_b = cov_b + eps * np.eye(k)
    ra = _sqrtm_psd(cov_a)
    cross = np.linalg.eigvalsh(0.5 * (ra @ cov_b @ ra + (ra @ cov_b @ ra).T))
    tr_cross = np.sqrt(np.clip(cross, 0.0, None)).sum()
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)
    return max(value, 0.0), flagged


def feature_frechet(a, b) -> float:
    return frechet_details(a, b)[0]


def diversity(features, n_pairs: int | None = None, seed: int = 0) -> float:
    """Mean distance between random feature pairs (all pairs when ``n_pairs`` is
    ``None``)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ParameterError("diversity needs at least two samples")
    if n_pairs is None:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, size=n_pairs)
        j = (i + rng.integers(1, n, size=n_pairs)) % n
    return float(np.linalg.norm(x[i] - x[j], axis=-1).mean())


def plausibility(motions) -> dict[str, np.ndarray]:
    """Per-sample mm metrics."""
    m = np.asarray(motions, dtype=np.float64)
    return {
        "penetration_mm": np.atleast_1d(physics.penetration(m)),
        "floating_mm": np.atleast_1d(physics.floating(m)),
        "sliding_mm": np.atleast_1d(physics.sliding(m)),
    }


# --- report ----------------------------------------------------------------

CSV_COLUMNS = (
    "method", "sampler", "s_cfg", "adapter_scale", "penetration_mm", "floating_mm",
    "sliding_mm", "ffd", "diversity", "secs_per_sample", "n",
)


@dataclass
class MethodRow:
    method: str
    sampler: str
    s_cfg: float
    adapter_scale: float
    n: int
    penetration_mm: float
    penetration_std: float
    floating_mm: float
    floating_std: float
    sliding_mm: float
    sliding_std: float
    ffd: float
    diversity: float
    secs_per_sample: float = float("nan")
    ffd_regularized: bool = False


def summarize(
    method: str,
    motions: np.ndarray,
    reference: np.ndarray,
    *,
    sampler: str = "-",
    s_cfg: float = float("nan"),
    adapter_scale: float = float("nan"),
    secs_per_sample: float = float("nan"),
    n_pairs: int | None = None,
    seed: int = 0,
) -> MethodRow:
    pm = plausibility(motions)
    feats = motion_features(motions)
    ffd, flag = frechet_details(feats, motion_features(reference))
    return MethodRow(
        method=method, sampler=sampler, s_cfg=float(s_cfg), adapter_scale=float(adapter_scale),
        n=int(feats.shape[0]),
        penetration_mm=float(pm["penetration_mm"].mean()), penetration_std=float(pm["penetration_mm"].std()),
        floating_mm=float(pm["floating_mm"].mean()), floating_std=float(pm["floating_mm"].std()),
        sliding_mm=float(pm["sliding_mm"].mean()), sliding_std=float(pm["sliding_mm"].std()),
        ffd=ffd, diversity=diversity(feats, n_pairs, seed),
        secs_per_sample=float(secs_per_sample), ffd_regularized=flag,
    )


@dataclass
class ComplianceCurve:
    axis: str
    values: list[float]
    responses: list[float]
    per_sample: list[list[float]]
    spearman: float

    def sign_agreement(self) -> list[float]:
        """Fraction of samples whose response has the sign of the parameter value."""
        out = []
        for v, s in zip(self.values, self.per_sample):
            s = np.asarray(s)
            out.append(float(np.mean(np.sign(s) == np.sign(v))) if v != 0 else float("nan"))
        return out


@dataclass
class EvalReport:
    rows: list[MethodRow] = field(default_factory=list)
    curves: list[ComplianceCurve] = field(default_factory=list)
    timing: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def validate(self) -> None:
        for r in self.rows:
            vals = [r.penetration_mm, r.floating_mm, r.sliding_mm, r.ffd, r.diversity]
            if r.n <= 0 or not all(np.isfinite(vals)):
                raise ParameterError(f"row {r.method!r} has no samples or non-finite metrics")

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "curves": [asdict(c) for c in self.curves],
            "timing": list(self.timing),
            "metadata": self.metadata,
        }


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --- compliance and timing --------------------------------------------------

def sweep_phi(axis: str, value: float, base: SimParams = EARTH) -> SimParams:
    if axis == GRAVITY:
        return SimParams(value, base.w_x, base.w_y)
    if axis == WIND_X:
        return SimParams(base.g_z, value, base.w_y)
    if axis == WIND_Y:
        return SimParams(base.g_z, base.w_x, value)
    raise ParameterError(f"unknown sweep axis {axis!r}")


def axis_response(axis: str, motions: np.ndarray) -> np.ndarray:
    """Apex height for the gravity axis, signed root drift for the wind axes."""
    if axis == GRAVITY:
        return np.atleast_1d(physics.apex_height(motions))
    disp = np.atleast_2d(physics.horizontal_displacement(motions))
    return disp[:, 0] if axis == WIND_X else disp[:, 1]


def compliance_sweep(
    generate: Callable[[SimParams, int, int], np.ndarray],
    axis: str,
    values: Sequence[float],
    n_samples: int,
    seed: int = 0,
) -> ComplianceCurve:
    """``generate(phi, n, seed)`` returns ``n`` jump motions under ``phi``.

    The rank correlation is taken against ``|g|`` on the gravity axis and the
    signed value on the wind axes.
    """
    per_sample, means = [], []
    for k, v in enumerate(values):
        motions = generate(sweep_phi(axis, float(v)), n_samples, seed + k)
        r = axis_response(axis, motions)
        per_sample.append([float(x) for x in r])
        means.append(float(r.mean()))
    x = np.abs(values) if axis == GRAVITY else np.asarray(values, dtype=np.float64)
    rho = float(stats.spearmanr(x, means).statistic) if len(values) > 1 else float("nan")
    return ComplianceCurve(axis, [float(v) for v in values], means, per_sample, rho)


def timing_bench(variants: Mapping[str, Callable[[int], object]], n: int) -> list[dict]:
    """Median wall-clock seconds of ``variants[name](seed)`` over ``n`` runs."""
    if n <= 0:
        return []
    table = []
    for name, fn in variants.items():
        times = []
        for k in range(n):
            t0 = time.perf_counter()
            fn(k)
            times.append(time.perf_counter() - t0)
        table.append({"variant": name, "median_s": statistics.median(times), "n": n})
    return table


# --- emission --------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in report.rows:
            d = asdict(r)
            w.writerow([_fmt(d[c]) for c in CSV_COLUMNS])


def _json_safe(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def svg_line_chart(title: str, xs: Sequence[float], series: Mapping[str, Sequence[float]],
                   x_label: str = "", y_label: str = "", width: int = 480, height: int = 320) -> str:
    pad = 48
    all_y = [float(y) for ys in series.values() for y in ys if np.isfinite(y)]
    if not xs or not all_y:
        all_y = [0.0, 1.0]
        xs = list(xs) or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(all_y), max(all_y)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="12">{escape(x_label)}</text>',
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {height / 2:.1f})">{escape(y_label)}</text>',
        f'<text x="{pad}" y="{height - pad + 16}" font-size="10" text-anchor="middle">{x0:.3g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 16}" font-size="10" text-anchor="middle">{x1:.3g}</text>',
        f'<text x="{pad - 4}" y="{height - pad}" font-size="10" text-anchor="end">{y0:.3g}</text>',
        f'<text x="{pad - 4}" y="{pad + 4}" font-size="10" text-anchor="end">{y1:.3g}</text>',
    ]
    for k, (name, ys) in enumerate(series.items()):
        c = colors[k % len(colors)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys) if np.isfinite(y))
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" points="{pts}"/>')
        for x, y in zip(xs, ys):
            if np.isfinite(y):
                parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{c}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * k}" font-size="11" fill="{c}" '
                     f'text-anchor="end">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(report: EvalReport, out_dir) -> list[Path]:
    """Write ``report.csv``, ``report.json`` and one SVG per curve; returns the paths."""
    report.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.csv", out / "report.json"]
    write_csv(report, paths[0])
    paths[1].write_text(json.dumps(_json_safe(report.to_dict()), indent=2, sort_keys=True) + "\n")
    for c in report.curves:
        label = "apex height (m)" if c.axis == GRAVITY else "drift (m)"
        svg = svg_line_chart(f"{c.axis} sweep (spearman {c.spearman:.3f})", c.values,
                             {"mean response": c.responses}, c.axis, label)
        p = out / f"sweep_{c.axis}.svg"
        p.write_text(svg)
        paths.append(p)
    alpha_rows = [r for r in report.rows if r.method.startswith("alpha")]
    if alpha_rows:
        xs = [r.adapter_scale for r in alpha_rows]
        svg = svg_line_chart("adapter scale sweep", xs, {
            "sliding (mm)": [r.sliding_mm for r in alpha_rows],
            "penetration (mm)": [r.penetration_mm for r in alpha_rows],
            "ffd": [r.ffd for r in alpha_rows],
        }, "alpha", "value")
        p = out / "sweep_alpha.svg"
        p.write_text(svg)
        paths.append(p)
    return paths
