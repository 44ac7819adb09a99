"""Motion-space sampling: wraps a checkpoint, the codec and (optionally) the
simulator projector around the array-level samplers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import physics
from .diffusion import (
    DDPM_PROJECTION_STEPS,
    DESK_DDIM_SECTIONS,
    GuidedSampleConfig,
    NoiseSchedule,
    StepSpacing,
    default_schedule,
    end_projection_steps,
    sample,
)
from .errors import ParameterError
from .model import Checkpoint, Predictor
from .physics import SimParams, WorldConfig


def _phi_rows(phi, n: int) -> np.ndarray:
    if isinstance(phi, SimParams):
        phi = phi.as_array()
    return np.broadcast_to(np.asarray(phi, dtype=np.float64), (n, 3)).copy()


@dataclass
class MotionSampler:
    """Draws motions from a checkpoint.

    ``use_adapters=False`` gives the frozen-backbone generator; ``project=True``
    adds simulator projection at ``projection_steps`` (defaults: the fixed DDPM
    steps, or the last four respaced DDIM steps).
    """

    ckpt: Checkpoint
    sched: NoiseSchedule = field(default_factory=default_schedule)
    use_adapters: bool = True
    sampler: str = "ddpm"
    s_cfg: float = 2.5
    adapter_scale: float = 1.0
    project: bool = False
    projection_steps: tuple[int, ...] | None = None
    ddim_sections: tuple[int, ...] = DESK_DDIM_SECTIONS
    clip_x0: float | None = None
    world: WorldConfig = field(default_factory=WorldConfig)

    def __post_init__(self):
        if self.sampler not in ("ddpm", "ddim"):
            raise ParameterError(f"unknown sampler {self.sampler!r}")
        self.predictor = Predictor(self.ckpt.model, use_adapters=self.use_adapters)
        self.spacing = StepSpacing.sections(self.sched.T, self.ddim_sections) if self.sampler == "ddim" else None

    @property
    def n_frames(self) -> int:
        return self.ckpt.codec.mean.shape[0]

    def resolved_projection_steps(self) -> tuple[int, ...] | None:
        if not self.project:
            return None
        if self.projection_steps is not None:
            return tuple(self.projection_steps)
        if self.sampler == "ddim":
            return end_projection_steps(self.spacing, 4, 1)
        return tuple(s for s in DDPM_PROJECTION_STEPS if s < self.sched.T)

    def projector(self, phi_rows: np.ndarray):
        codec, world = self.ckpt.codec, self.world

        def run(z: np.ndarray) -> np.ndarray:
            return codec.encode(physics.project(codec.decode(z), phi_rows, world))

        return run

    def sample(self, cond, phi, n: int, seed: int = 0) -> np.ndarray:
        """Return ``n`` motions of shape ``(F, 12)`` in metres."""
        phi_rows = _phi_rows(phi, n)
        cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,)).copy()
        steps = self.resolved_projection_steps()
        cfg = GuidedSampleConfig(
            s_cfg=self.s_cfg,
            adapter_scale=self.adapter_scale if self.use_adapters else 0.0,
            projection_steps=steps,
            sampler=self.sampler,
            seed=seed,
            spacing=self.spacing,
            clip_x0=self.clip_x0 if self.sampler == "ddim" else None,
        )
        shape = (self.n_frames, self.ckpt.model.cfg.frame_dim)
        projector = self.projector(phi_rows) if steps else None
        z = sample(self.predictor, cond, phi_rows, cfg, self.sched, shape, n, projector)
        return self.ckpt.codec.decode(z)
