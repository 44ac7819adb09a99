"""Backbone pretraining on reference motions and adapter-only fine-tuning on
tracked motions, both with epsilon-prediction and condition dropout."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .datagen import MotionRecord
from .diffusion import NULL_COND, NoiseSchedule, _q_sample_batch, default_schedule
from .errors import NumericDivergenceError, ParameterError, TrainingError, UsageError
from .model import BackboneConfig, CATEGORICAL, Checkpoint, Denoiser, MotionCodec

log = logging.getLogger(__name__)

BACKBONE, ADAPTER = "backbone", "adapter"
LR_SCHEDULES = ("constant", "linear")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    iterations: int = 5000
    cond_mask_prob: float = 0.10
    phase: str = BACKBONE
    seed: int = 0
    checkpoint_every: int = 0
    # "linear" decays the step size to zero over the run
    lr_schedule: str = "constant"

    def __post_init__(self):
        if not 0.0 <= self.cond_mask_prob < 1.0:
            raise ParameterError(f"cond_mask_prob must be in [0, 1), got {self.cond_mask_prob}")
        if self.phase not in (BACKBONE, ADAPTER):
            raise ParameterError(f"unknown phase {self.phase!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ParameterError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.batch_size < 1 or self.iterations < 0 or self.lr < 0:
            raise ParameterError("batch_size >= 1, iterations >= 0 and lr >= 0 required")


@dataclass
class LossCurve:
    phase: str
    losses: list[float]

    def moving_average(self, window: int = 100) -> np.ndarray:
        x = np.asarray(self.losses)
        if x.size < window:
            return np.array([x.mean()]) if x.size else x
        c = np.cumsum(np.insert(x, 0, 0.0))
        return (c[window:] - c[:-window]) / window


def mask_conditions(cond: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    drop = rng.random(cond.shape[0]) < prob
    return np.where(drop, NULL_COND, cond)


def diffusion_loss(
    model: Denoiser,
    x0: torch.Tensor,
    cond: np.ndarray,
    phi: torch.Tensor | None,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    cond_mask_prob: float = 0.10,
    use_adapters: bool = False,
    eps_hook: Callable | None = None,
) -> torch.Tensor:
    """Per-element mean squared noise-prediction error for one batch.

    ``t`` is uniform over the schedule, the class is dropped to the null token
    with ``cond_mask_prob``; ``phi`` is never dropped. ``eps_hook(eps, x_t, t)``
    replaces the model output (for testing the loss reduction).
    """
    n = x0.shape[0]
    if n == 0:
        raise ParameterError("empty batch")
    t = rng.integers(0, sched.T, size=n)
    eps = rng.standard_normal(tuple(x0.shape))
    cond = mask_conditions(np.asarray(cond, dtype=np.int64), cond_mask_prob, rng)
    x0_np = x0.detach().cpu().numpy().astype(np.float64)
    xt = torch.as_tensor(_q_sample_batch(x0_np, t, eps, sched), dtype=x0.dtype)
    eps_t = torch.as_tensor(eps, dtype=x0.dtype)
    if eps_hook is not None:
        pred = eps_hook(eps_t, xt, t)
    else:
        pred = model(
            xt, torch.as_tensor(t), torch.as_tensor(cond), phi,
            alpha=1.0, use_adapters=use_adapters,
        )
    return ((pred - eps_t) ** 2).mean()


def _tensors(records: Sequence[MotionRecord], codec: MotionCodec, cfg: BackboneConfig,
             with_phi: bool = True, env_index=None):
    if not records:
        raise ParameterError("empty training corpus")
    frames = {r.motion.shape[0] for r in records}
    if len(frames) != 1:
        raise ParameterError(f"records must share a frame count, got {sorted(frames)}")
    dt = cfg.torch_dtype
    x = torch.as_tensor(codec.encode(np.stack([r.motion for r in records])), dtype=dt)
    cond = np.array([r.class_label for r in records], dtype=np.int64)
    if not with_phi:
        return x, cond, None
    if cfg.sim_mode == CATEGORICAL:
        if env_index is None:
            raise UsageError("categorical sim encoder needs an environment index per record")
        phi = torch.as_tensor(np.asarray([env_index(r) for r in records]), dtype=torch.long)
    else:
        phi = torch.as_tensor(np.stack([r.phi.as_array() for r in records]), dtype=dt)
    return x, cond, phi


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def _run(model, params, x, cond, phi, cfg: TrainConfig, sched, use_adapters, on_checkpoint=None) -> LossCurve:
    opt = make_optimizer(params, cfg)
    decay = None
    if cfg.lr_schedule == "linear" and cfg.iterations:
        decay = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: 1.0 - k / cfg.iterations)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    n = x.shape[0]
    for it in range(cfg.iterations):
        idx = rng.integers(0, n, size=cfg.batch_size)
        bphi = phi[idx] if use_adapters else None
        if use_adapters:
            assert bphi is not None and bphi.shape[0] == cfg.batch_size
        try:
            loss = diffusion_loss(
                model, x[idx], cond[idx], bphi, sched, rng, cfg.cond_mask_prob, use_adapters
            )
        except NumericDivergenceError as exc:
            raise TrainingError(f"forward pass diverged at iteration {it}", step=it) from exc
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"loss became non-finite at iteration {it}", step=it)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if decay is not None:
            decay.step()
        losses.append(value)
        if cfg.checkpoint_every and on_checkpoint and (it + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(it + 1)
        if (it + 1) % 500 == 0:
            log.info("%s iteration %d loss %.5f", cfg.phase, it + 1, value)
    return LossCurve(cfg.phase, losses)


def train_backbone(
    records: Sequence[MotionRecord],
    cfg: TrainConfig = TrainConfig(),
    model_cfg: BackboneConfig = BackboneConfig(),
    sched: NoiseSchedule | None = None,
    on_checkpoint=None,
) -> tuple[Checkpoint, LossCurve]:
    """Train every backbone parameter on reference motions (adapters bypassed)."""
    if cfg.phase != BACKBONE:
        raise ParameterError("train_backbone needs phase=backbone")
    sched = sched or default_schedule()
    torch.manual_seed(cfg.seed)
    if not records:
        raise ParameterError("empty training corpus")
    motions = np.stack([r.motion for r in records])
    model_cfg = BackboneConfig(**{**model_cfg.__dict__, "max_frames": max(model_cfg.max_frames, motions.shape[1])})
    codec = MotionCodec.fit(motions)
    model = Denoiser(model_cfg, seed=cfg.seed)
    x, cond, _ = _tensors(records, codec, model_cfg, with_phi=False)
    model.freeze_backbone(False)
    for p in model.adapter_parameters():
        p.requires_grad_(False)
    curve = _run(model, model.backbone_parameters(), x, cond, None, cfg, sched, False, on_checkpoint)
    meta = {"phase": BACKBONE, "T": sched.T, "iterations": cfg.iterations, "seed": cfg.seed}
    return Checkpoint(model, codec, meta), curve


def train_adapters(
    backbone: Checkpoint,
    records: Sequence[MotionRecord],
    cfg: TrainConfig = TrainConfig(phase=ADAPTER),
    sched: NoiseSchedule | None = None,
    env_index=None,
    on_checkpoint=None,
) -> tuple[Checkpoint, LossCurve]:
    """Fine-tune only the environment encoder and adapters; the backbone stays
    bit-identical (checked after training)."""
    if cfg.phase != ADAPTER:
        raise ParameterError("train_adapters needs phase=adapter")
    if backbone is None:
        raise UsageError("adapter training requires a backbone checkpoint")
    sched = sched or default_schedule()
    model = copy.deepcopy(backbone.model)
    before = {n: p.detach().clone() for n, p in model.named_parameters() if n in set(model.backbone_names())}
    model.freeze_backbone(True)
    for p in model.adapter_parameters():
        p.requires_grad_(True)
    x, cond, phi = _tensors(records, backbone.codec, model.cfg, env_index=env_index)
    torch.manual_seed(cfg.seed)
    curve = _run(model, model.adapter_parameters(), x, cond, phi, cfg, sched, True, on_checkpoint)
    delta = backbone_delta(before, model)
    if delta != 0.0:
        raise TrainingError(f"backbone weights moved during adapter training (delta {delta})")
    meta = {**backbone.meta, "adapter_phase": True, "adapter_iterations": cfg.iterations,
            "adapter_seed": cfg.seed, "backbone_delta_l2": delta}
    return Checkpoint(model, backbone.codec, meta), curve


def backbone_delta(before: dict, model: Denoiser) -> float:
    total = 0.0
    for n, p in model.named_parameters():
        if n in before:
            total += float(((p.detach() - before[n]) ** 2).sum())
    return float(np.sqrt(total))


def write_loss_csv(curves: Sequence[LossCurve], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss", "phase"])
        for c in curves:
            for i, v in enumerate(c.losses):
                w.writerow([i, repr(float(v)), c.phase])
