"""Point-figure world: PD root tracking under gravity and wind, ground contact,
and the ground-relation plausibility metrics.

A motion is an ``(F, J*3)`` array of joint positions in metres, joints ordered
root, left foot, right foot, head, z up. Most functions also accept a leading
batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericDivergenceError, ParameterError, TrackingFailure

ROOT, LFOOT, RFOOT, HEAD = 0, 1, 2, 3
FEET = (LFOOT, RFOOT)
N_JOINTS = 4
FRAME_DIM = 3 * N_JOINTS
FRAME_RATE = 30
EARTH_G = -9.81

CONTACT_TOLERANCE_MM = 5.0


@dataclass(frozen=True)
class SimParams:
    """Environment triple: vertical gravity (m/s^2) and horizontal wind force (N)."""

    g_z: float = EARTH_G
    w_x: float = 0.0
    w_y: float = 0.0

    def validate(self, wind_max: float = 10.0) -> "SimParams":
        if not self.g_z < 0:
            raise ParameterError(f"g_z must be negative, got {self.g_z}")
        if abs(self.w_x) > wind_max or abs(self.w_y) > wind_max:
            raise ParameterError(f"wind ({self.w_x}, {self.w_y}) exceeds {wind_max} N")
        return self

    def as_array(self) -> np.ndarray:
        return np.array([self.g_z, self.w_x, self.w_y], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "SimParams":
        g, wx, wy = (float(v) for v in a)
        return cls(g, wx, wy)


EARTH = SimParams()


@dataclass(frozen=True)
class WorldConfig:
    mass: float = 1.0
    dt_control: float = 1.0 / FRAME_RATE
    substeps: int = 15
    kp: float = 100.0
    kd: float = 20.0
    f_max: float = 100.0
    ground_z: float = 0.0
    contact_tol: float = 1e-6
    escape_radius: float = 2.0
    # per-frame factor pulling a released foot back onto its kinematic offset
    release_decay: float = 0.7
    # feet this close to the ground are held by friction (no horizontal motion)
    friction_band: float = 0.006

    def __post_init__(self):
        if self.substeps < 1:
            raise ParameterError("substeps must be >= 1")
        if self.mass <= 0 or self.f_max <= 0 or self.kp < 0 or self.kd < 0:
            raise ParameterError("mass and f_max must be > 0, gains >= 0")

    @property
    def dt(self) -> float:
        return self.dt_control / self.substeps


@dataclass
class SimState:
    root_pos: np.ndarray
    root_vel: np.ndarray
    support: np.ndarray

    def copy(self) -> "SimState":
        return SimState(self.root_pos.copy(), self.root_vel.copy(), np.array(self.support))


def _phi_array(phi, batch_shape) -> np.ndarray:
    if isinstance(phi, SimParams):
        phi = phi.as_array()
    return np.broadcast_to(np.asarray(phi, dtype=np.float64), batch_shape + (3,))


def _lowest_foot_offset(frame: np.ndarray) -> np.ndarray:
    j = frame.reshape(frame.shape[:-1] + (N_JOINTS, 3))
    return np.minimum(j[..., LFOOT, 2], j[..., RFOOT, 2]) - j[..., ROOT, 2]


def step(
    state: SimState,
    target_frame: np.ndarray,
    phi,
    cfg: WorldConfig = WorldConfig(),
    *,
    target_vel: np.ndarray | None = None,
    target_acc: np.ndarray | None = None,
    prev_frame: np.ndarray | None = None,
) -> SimState:
    """Advance one control period.

    Root force: ``m*target_acc + kp*(target_root - root) + kd*(target_vel - vel)``
    clamped to ``f_max`` (with no feed-forward given this is the plain PD law
    ``kp*e - kd*vel``), plus gravity and wind, integrated semi-implicitly over
    ``cfg.substeps``. After each substep a foot below ground lifts the whole
    figure and the downward root velocity is removed. With ``prev_frame`` the
    target root and foot offsets are interpolated across the substeps.
    """
    pos = np.array(state.root_pos, dtype=np.float64)
    vel = np.array(state.root_vel, dtype=np.float64)
    batch = pos.shape[:-1]
    tgt = np.asarray(target_frame, dtype=np.float64)
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel)) and np.all(np.isfinite(tgt))):
        raise NumericDivergenceError("non-finite simulator input")
    phi = _phi_array(phi, batch)
    gravity = np.zeros(batch + (3,))
    gravity[..., 2] = phi[..., 0]
    wind = np.zeros(batch + (3,))
    wind[..., :2] = phi[..., 1:]
    ext_acc = gravity + wind / cfg.mass

    root_t = tgt[..., 0:3]
    low_t = _lowest_foot_offset(tgt)
    if prev_frame is not None:
        prev = np.asarray(prev_frame, dtype=np.float64)
        root_p, low_p = prev[..., 0:3], _lowest_foot_offset(prev)
    else:
        root_p, low_p = root_t, low_t
    v_ff = np.zeros(batch + (3,)) if target_vel is None else np.asarray(target_vel, dtype=np.float64)
    f_ff = 0.0 if target_acc is None else cfg.mass * np.asarray(target_acc, dtype=np.float64)

    dt, S = cfg.dt, cfg.substeps
    ground = cfg.ground_z
    low = low_t
    for k in range(S):
        frac = (k + 1) / S
        r = root_p + frac * (root_t - root_p)
        low = low_p + frac * (low_t - low_p)
        force = f_ff + cfg.kp * (r - pos) + cfg.kd * (v_ff - vel)
        norm = np.linalg.norm(force, axis=-1, keepdims=True)
        force = np.where(norm > cfg.f_max, force * (cfg.f_max / np.maximum(norm, 1e-300)), force)
        vel = vel + (force / cfg.mass + ext_acc) * dt
        pos = pos + vel * dt
        depth = ground - (pos[..., 2] + low)
        hit = depth > 0
        if np.any(hit):
            pos[..., 2] = np.where(hit, pos[..., 2] + depth, pos[..., 2])
            vel[..., 2] = np.where(hit, np.maximum(vel[..., 2], 0.0), vel[..., 2])
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
        raise NumericDivergenceError("simulator state became non-finite")
    support = pos[..., 2] + low <= ground + cfg.contact_tol
    return SimState(pos, vel, support)


def snap_to_ground(motion: np.ndarray, ground_z: float = 0.0) -> np.ndarray:
    """Shift whole clips vertically so the lowest foot of frame 0 sits on the ground."""
    m = np.array(motion, dtype=np.float64)
    j = m.reshape(m.shape[:-1] + (N_JOINTS, 3))
    first = np.minimum(j[..., 0, LFOOT, 2], j[..., 0, RFOOT, 2])
    j[..., 2] += (ground_z - first)[..., None, None]
    return m


def _reference_derivatives(root: np.ndarray, dt: float):
    """Per-interval velocity and acceleration of the reference root, (B, F, 3)."""
    v = np.zeros_like(root)
    v[:, 1:] = (root[:, 1:] - root[:, :-1]) / dt
    v[:, 0] = v[:, 1]
    nxt = np.concatenate([v[:, 1:], v[:, -1:]], axis=1)
    prv = np.concatenate([v[:, :1], v[:, :-1]], axis=1)
    a = (nxt - prv) / (2 * dt)
    return v, a


def rollout(motions: np.ndarray, phis, cfg: WorldConfig = WorldConfig()):
    """Track a batch of reference motions.

    Returns ``(tracked, fail_frame)`` where ``fail_frame[b]`` is the first frame at
    which clip ``b`` left the escape radius (``-1`` when tracking succeeded).
    Frames of a failed clip after its failure frame are still produced.
    """
    motions = np.asarray(motions, dtype=np.float64)
    if motions.ndim != 3 or motions.shape[-1] != FRAME_DIM or motions.shape[1] < 2:
        raise ParameterError(f"expected (B, F>=2, {FRAME_DIM}) motions, got {motions.shape}")
    if not np.all(np.isfinite(motions)):
        raise ParameterError("motion contains non-finite values")
    B, F, _ = motions.shape
    phis = _phi_array(phis, (B,))
    ref = snap_to_ground(motions, cfg.ground_z)
    j = ref.reshape(B, F, N_JOINTS, 3)
    root = j[:, :, ROOT]
    offsets = j - root[:, :, None, :]
    v_ref, a_ref = _reference_derivatives(root, cfg.dt_control)

    out = np.empty_like(j)
    out[:, 0] = j[:, 0]
    state = SimState(root[:, 0].copy(), v_ref[:, 0].copy(), np.ones(B, dtype=bool))
    ground, tol = cfg.ground_z, cfg.contact_tol
    feet = list(FEET)
    disp = j[:, 0, feet, :2].copy()  # (B, 2, 2) displayed foot xy
    gap = np.zeros_like(disp)
    band = max(cfg.friction_band, tol)
    pinned = j[:, 0, feet, 2] <= ground + band
    anchor = disp.copy()
    fail = np.full(B, -1, dtype=np.int64)

    for n in range(1, F):
        state = step(
            state, ref[:, n], phis, cfg,
            target_vel=v_ref[:, n], target_acc=a_ref[:, n], prev_frame=ref[:, n - 1],
        )
        p = state.root_pos
        dist = np.linalg.norm(p - root[:, n], axis=-1)
        fail = np.where((fail < 0) & (dist > cfg.escape_radius), n, fail)
        frame = p[:, None, :] + offsets[:, n]
        foot_z = frame[:, feet, 2]
        contact = foot_z <= ground + band
        natural = frame[:, feet, :2]
        free_pos = natural + gap * cfg.release_decay
        stay = contact & pinned
        land = contact & ~pinned
        lift = ~contact & pinned
        disp = np.where(stay[..., None] | lift[..., None], anchor, free_pos)
        anchor = np.where(land[..., None], free_pos, anchor)
        gap = disp - natural
        pinned = contact
        frame[:, feet, :2] = disp
        out[:, n] = frame
    return out.reshape(B, F, FRAME_DIM), fail


def project(motion: np.ndarray, phi, cfg: WorldConfig = WorldConfig()) -> np.ndarray:
    """Map a kinematic motion to a tracked rollout of the same shape.

    Raises :class:`TrackingFailure` naming the first frame at which the root
    leaves ``cfg.escape_radius`` of its target.
    """
    m = np.asarray(motion, dtype=np.float64)
    single = m.ndim == 2
    batch = m[None] if single else m
    out, fail = rollout(batch, phi if single else phi, cfg)
    bad = np.flatnonzero(fail >= 0)
    if bad.size:
        b = int(bad[0])
        n = int(fail[b])
        dist = float(np.linalg.norm(out[b, n, 0:3] - snap_to_ground(batch[b], cfg.ground_z)[n, 0:3]))
        raise TrackingFailure(n, dist)
    return out[0] if single else out


# --- plausibility metrics (millimetres) -----------------------------------

def _joints(motion) -> np.ndarray:
    m = np.asarray(motion, dtype=np.float64)
    return m.reshape(m.shape[:-1] + (N_JOINTS, 3))


def _frame_mean(per_frame: np.ndarray, mask: np.ndarray | None, average: str):
    if average == "all":
        return per_frame.mean(axis=-1)
    if average == "offending":
        cnt = mask.sum(axis=-1)
        tot = np.where(mask, per_frame, 0.0).sum(axis=-1)
        return np.where(cnt > 0, tot / np.maximum(cnt, 1), 0.0)
    raise ParameterError(f"average must be 'all' or 'offending', got {average!r}")


def penetration(motion, ground_z: float = 0.0, average: str = "all"):
    """Mean over frames of the summed depth of joints below the ground, mm."""
    z = _joints(motion)[..., 2]
    depth = np.maximum(0.0, ground_z - z).sum(axis=-1)
    return _frame_mean(depth, depth > 0, average) * 1000.0


def floating(motion, ground_z: float = 0.0, tol_mm: float = CONTACT_TOLERANCE_MM, average: str = "all"):
    """Mean clearance of the lowest joint over frames hovering beyond ``tol_mm``, mm."""
    z = _joints(motion)[..., 2]
    clearance = z.min(axis=-1) - ground_z
    hover = (clearance > tol_mm / 1000.0) & ~(z < ground_z).any(axis=-1)
    per = np.where(hover, clearance, 0.0)
    return _frame_mean(per, hover, average) * 1000.0


def sliding(motion, ground_z: float = 0.0, tol_mm: float = CONTACT_TOLERANCE_MM):
    """Mean over frame pairs of foot horizontal displacement while the foot stays
    within ``tol_mm`` of the ground in both frames, mm."""
    j = _joints(motion)
    if j.shape[-3] < 2:
        raise ParameterError("sliding needs at least two frames")
    feet = j[..., list(FEET), :]
    near = feet[..., 2] - ground_z <= tol_mm / 1000.0
    both = near[..., 1:, :] & near[..., :-1, :]
    step_xy = np.linalg.norm(feet[..., 1:, :, :2] - feet[..., :-1, :, :2], axis=-1)
    return np.where(both, step_xy, 0.0).sum(axis=-1).mean(axis=-1) * 1000.0


def apex_height(motion):
    """Highest root height over the clip, m."""
    return _joints(motion)[..., ROOT, 2].max(axis=-1)


def horizontal_displacement(motion):
    """Root (x, y) at the last frame minus the first, m."""
    j = _joints(motion)
    return j[..., -1, ROOT, :2] - j[..., 0, ROOT, :2]
