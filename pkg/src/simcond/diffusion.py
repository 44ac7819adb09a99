"""Noise schedules, forward noising and reverse samplers.

Conventions: diffusion steps are 0-based indices ``t = 0 .. T-1``; index ``t``
is the ``t+1``-th noising step, so ``alpha_bar[0] = 1 - beta[0]`` and the
"previous" cumulative product at ``t = 0`` is 1. Samplers run on arrays of
shape ``(n, F, D)`` and call the model as ``model(x, t, cond, phi, alpha)``
with ``t`` and ``cond`` integer arrays of length ``n`` (``cond == NULL_COND``
selects the unconditional token).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import NumericDivergenceError, ParameterError, TrackingFailure

NULL_COND = -1


class EpsModel(Protocol):
    def __call__(
        self, x: np.ndarray, t: np.ndarray, cond: np.ndarray, phi: np.ndarray, alpha: float
    ) -> np.ndarray: ...


Projector = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def alpha_bar_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bar[:-1]])

    def check_step(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise ParameterError(f"diffusion step {t} outside [0, {self.T - 1}]")
        return t


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule with the running-product ``alpha_bar``."""
    if int(T) != T or T < 2:
        raise ParameterError(f"T must be an integer >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(int(T), beta, alpha, alpha_bar)


def default_schedule(T: int = 200) -> NoiseSchedule:
    """Standard 1e-4 .. 0.02 endpoints, with the upper end stretched by 1000/T.

    At T=1000 this is the usual DDPM schedule; at smaller T the terminal
    ``alpha_bar`` stays near zero so sampling can start from pure noise.
    """
    return make_schedule(T, 1e-4, min(0.02 * 1000.0 / T, 0.999))


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ParameterError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def q_sample(tau0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    _same_shape(tau0, eps, "q_sample")
    ab = sched.alpha_bar[sched.check_step(t)]
    return np.sqrt(ab) * tau0 + np.sqrt(1.0 - ab) * eps


def _q_sample_batch(tau0, t_idx, eps, sched):
    ab = sched.alpha_bar[t_idx].reshape((-1,) + (1,) * (tau0.ndim - 1))
    return np.sqrt(ab) * tau0 + np.sqrt(1.0 - ab) * eps


def posterior_coefficients(t: int, sched: NoiseSchedule) -> tuple[float, float]:
    """Coefficients on (tau_t, tau_0) of the forward-process posterior mean."""
    t = sched.check_step(t)
    if t == 0:
        # exact values of the formulas below, free of 1 - (1 - beta) rounding
        return 0.0, 1.0
    ab = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar_prev[t]
    c_t = np.sqrt(sched.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab)
    c_0 = np.sqrt(ab_prev) * sched.beta[t] / (1.0 - ab)
    return float(c_t), float(c_0)


def posterior_mean(tau_t: np.ndarray, tau0: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    _same_shape(tau_t, tau0, "posterior_mean")
    c_t, c_0 = posterior_coefficients(t, sched)
    return c_t * tau_t + c_0 * tau0


def eps_mean(tau_t: np.ndarray, eps_pred: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Reverse-step mean written in terms of the predicted noise."""
    t = sched.check_step(t)
    coef = sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t])
    return (tau_t - coef * eps_pred) / np.sqrt(sched.alpha[t])


def tweedie_x0(tau_t: np.ndarray, eps_pred: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """One-shot clean-sample estimate from a noisy sample and predicted noise."""
    _same_shape(tau_t, eps_pred, "tweedie_x0")
    ab = sched.alpha_bar[sched.check_step(t)]
    return (tau_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)


# --- plausibility classifier view of simulator projection -------------------

def classifier_log_likelihood(tau_t: np.ndarray, tau_hat_t: np.ndarray) -> float:
    _same_shape(tau_t, tau_hat_t, "classifier_log_likelihood")
    d = np.asarray(tau_t, dtype=np.float64) - tau_hat_t
    return -float(np.sum(d * d))


def classifier_gradient(mu: np.ndarray, tau_hat_t: np.ndarray) -> np.ndarray:
    _same_shape(mu, tau_hat_t, "classifier_gradient")
    return -2.0 * (np.asarray(mu) - tau_hat_t)


def guided_mean(mu: np.ndarray, g: np.ndarray, gamma: float, sigma) -> np.ndarray:
    """Mean of the guided Gaussian transition, ``mu + gamma * Sigma * g``.

    ``sigma`` is a scalar or a diagonal given as an array. With
    ``gamma * sigma == 1/2`` and ``g`` from :func:`classifier_gradient` the
    result is exactly the reference motion, i.e. the mean is replaced.
    """
    return mu + gamma * np.asarray(sigma) * g


def cfg_epsilon(eps_uncond: np.ndarray, eps_cond: np.ndarray, s_cfg: float) -> np.ndarray:
    _same_shape(eps_uncond, eps_cond, "cfg_epsilon")
    if s_cfg < 0:
        raise ParameterError(f"s_cfg must be >= 0, got {s_cfg}")
    if s_cfg == 1.0:
        return eps_cond.copy()
    if s_cfg == 0.0:
        return eps_uncond.copy()
    return eps_uncond + s_cfg * (eps_cond - eps_uncond)


# --- sampler configuration --------------------------------------------------

@dataclass(frozen=True)
class StepSpacing:
    steps: tuple[int, ...]

    def __post_init__(self):
        steps = tuple(int(s) for s in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise ParameterError("step spacing is empty")
        if any(b >= a for a, b in zip(steps, steps[1:])):
            raise ParameterError("step spacing must be strictly decreasing")
        if steps[-1] != 0:
            raise ParameterError("step spacing must end at step 0")

    def validate(self, T: int) -> None:
        if self.steps[0] > T - 1:
            raise ParameterError(f"step {self.steps[0]} outside schedule of length {T}")

    def __len__(self) -> int:
        return len(self.steps)

    @classmethod
    def full(cls, T: int) -> "StepSpacing":
        return cls(tuple(range(T - 1, -1, -1)))

    @classmethod
    def uniform(cls, T: int, n: int) -> "StepSpacing":
        idx = np.unique(np.round(np.linspace(0, T - 1, n)).astype(int))
        return cls(tuple(int(i) for i in idx[::-1]))

    @classmethod
    def sections(cls, T: int, counts: Sequence[int]) -> "StepSpacing":
        """Split ``[0, T)`` into ``len(counts)`` equal sections and take ``counts[i]``
        evenly strided steps from section ``i`` (e.g. 15-15-8-6-6 for 50 of 1000)."""
        size, extra = divmod(T, len(counts))
        start, picked = 0, []
        for i, n in enumerate(counts):
            part = size + (1 if i < extra else 0)
            if n > part:
                raise ParameterError(f"cannot take {n} steps from a section of {part}")
            if n == 1:
                picked.append(start)
            elif n > 1:
                stride = (part - 1) / (n - 1)
                picked.extend(start + round(j * stride) for j in range(n))
            start += part
        return cls(tuple(sorted(set(picked), reverse=True)))


# Desk-scale analogue of the 15-15-8-6-6 respacing: same section shape, 20 steps.
DESK_DDIM_SECTIONS = (6, 6, 3, 3, 2)
DDPM_PROJECTION_STEPS = (60, 40, 20, 0)


def end_projection_steps(spacing: StepSpacing, count: int = 4, space: int = 1) -> tuple[int, ...]:
    """Projection indices for a respaced chain: the last ``count`` sampling
    steps taken every ``space`` positions from the end."""
    steps = spacing.steps
    picked = [steps[len(steps) - 1 - k * space] for k in range(count) if k * space < len(steps)]
    return tuple(sorted(picked, reverse=True))


@dataclass
class GuidedSampleConfig:
    s_cfg: float = 2.5
    adapter_scale: float = 1.0
    projection_steps: tuple[int, ...] | None = None
    sampler: str = "ddpm"
    seed: int = 0
    spacing: StepSpacing | None = field(default=None)
    # DDIM only: bound on |clean estimate| per element, in model units
    clip_x0: float | None = None

    def validate(self, sched: NoiseSchedule) -> None:
        if self.s_cfg < 0 or self.adapter_scale < 0:
            raise ParameterError("s_cfg and adapter_scale must be >= 0")
        if self.clip_x0 is not None and not self.clip_x0 > 0:
            raise ParameterError(f"clip_x0 must be > 0, got {self.clip_x0}")
        if self.sampler not in ("ddpm", "ddim"):
            raise ParameterError(f"unknown sampler {self.sampler!r}")
        if self.projection_steps is not None:
            ps = tuple(int(s) for s in self.projection_steps)
            if any(not 0 <= s < sched.T for s in ps):
                raise ParameterError(f"projection steps {ps} outside schedule")
            if any(b >= a for a, b in zip(ps, ps[1:])):
                raise ParameterError("projection steps must be sorted descending")
            self.projection_steps = ps


# --- reverse process --------------------------------------------------------

def guided_eps(model: EpsModel, x, t: int, cond, phi, s_cfg: float, alpha: float) -> np.ndarray:
    """Classifier-free guided noise prediction; one batched model call.

    Both halves see the same ``phi`` and adapter scale; only the class token is
    dropped in the unconditional half.
    """
    n = x.shape[0]
    cond = np.asarray(cond, dtype=np.int64)
    t_arr = np.full(n, t, dtype=np.int64)
    is_null = cond == NULL_COND
    if is_null.all() or s_cfg == 0.0:
        return model(x, t_arr, np.full(n, NULL_COND), phi, alpha)
    if s_cfg == 1.0:
        return model(x, t_arr, cond, phi, alpha)
    both = model(
        np.concatenate([x, x]),
        np.concatenate([t_arr, t_arr]),
        np.concatenate([cond, np.full(n, NULL_COND)]),
        np.concatenate([phi, phi]),
        alpha,
    )
    eps_c, eps_u = both[:n], both[n:]
    out = cfg_epsilon(eps_u, eps_c, s_cfg)
    out[is_null] = eps_u[is_null]
    return out


def _check_finite(x: np.ndarray, t: int) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericDivergenceError("non-finite sample values", step=t)


def _broadcast_inputs(cond, phi, n):
    cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,)).copy()
    phi = np.broadcast_to(np.asarray(phi, dtype=np.float64), (n, 3)).copy()
    return cond, phi


def projection_guided_step(
    model: EpsModel,
    tau_t: np.ndarray,
    t: int,
    phi,
    projector: Projector,
    sched: NoiseSchedule,
    *,
    cond=NULL_COND,
    s_cfg: float = 1.0,
    alpha: float = 0.0,
    eps: np.ndarray | None = None,
) -> np.ndarray:
    """Replace the reverse-step mean by the posterior mean around the projected
    clean estimate: ``c_t * tau_t + c_0 * P(tweedie_x0(tau_t, eps))``."""
    t = sched.check_step(t)
    cond, phi = _broadcast_inputs(cond, phi, tau_t.shape[0])
    if eps is None:
        eps = guided_eps(model, tau_t, t, cond, phi, s_cfg, alpha)
    x0 = tweedie_x0(tau_t, eps, t, sched)
    try:
        projected = projector(x0)
    except TrackingFailure as exc:
        raise TrackingFailure(exc.frame, exc.distance, diffusion_step=t) from exc
    return posterior_mean(tau_t, projected, t, sched)


def ddpm_sample(
    model: EpsModel,
    cond,
    phi,
    cfg: GuidedSampleConfig,
    sched: NoiseSchedule,
    shape: tuple[int, int],
    n: int = 1,
    projector: Projector | None = None,
) -> np.ndarray:
    """Ancestral sampling over the full chain with fixed ``beta_t`` variance."""
    cfg.validate(sched)
    cond, phi = _broadcast_inputs(cond, phi, n)
    proj = set(cfg.projection_steps or ())
    if proj and projector is None:
        raise ParameterError("projection steps given without a projector")
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal((n, *shape))
    for t in range(sched.T - 1, -1, -1):
        eps = guided_eps(model, x, t, cond, phi, cfg.s_cfg, cfg.adapter_scale)
        if t in proj:
            mean = projection_guided_step(
                model, x, t, phi, projector, sched, cond=cond, eps=eps
            )
        else:
            mean = eps_mean(x, eps, t, sched)
        if t > 0:
            x = mean + np.sqrt(sched.beta[t]) * rng.standard_normal(x.shape)
        else:
            x = mean
        _check_finite(x, t)
    return x


def ddim_sample(
    model: EpsModel,
    cond,
    phi,
    cfg: GuidedSampleConfig,
    sched: NoiseSchedule,
    spacing: StepSpacing,
    shape: tuple[int, int],
    n: int = 1,
    projector: Projector | None = None,
) -> np.ndarray:
    """Deterministic (eta = 0) DDIM over a respaced subset of steps.

    With ``cfg.clip_x0`` the clean estimate is clipped and the noise estimate
    re-derived from it, which keeps early errors from being amplified by the
    tiny ``alpha_bar`` at the top of the chain.
    """
    cfg.validate(sched)
    spacing.validate(sched.T)
    cond, phi = _broadcast_inputs(cond, phi, n)
    proj = set(cfg.projection_steps or ())
    if proj and projector is None:
        raise ParameterError("projection steps given without a projector")
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal((n, *shape))
    steps = spacing.steps
    for i, t in enumerate(steps):
        eps = guided_eps(model, x, t, cond, phi, cfg.s_cfg, cfg.adapter_scale)
        x0 = tweedie_x0(x, eps, t, sched)
        if cfg.clip_x0 is not None:
            x0 = np.clip(x0, -cfg.clip_x0, cfg.clip_x0)
            ab = sched.alpha_bar[t]
            eps = (x - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
        if t in proj:
            try:
                x0 = projector(x0)
            except TrackingFailure as exc:
                raise TrackingFailure(exc.frame, exc.distance, diffusion_step=t) from exc
        if i + 1 < len(steps):
            ab_next = sched.alpha_bar[steps[i + 1]]
            x = np.sqrt(ab_next) * x0 + np.sqrt(1.0 - ab_next) * eps
        else:
            x = x0
        _check_finite(x, t)
    return x


def sample(model, cond, phi, cfg: GuidedSampleConfig, sched, shape, n=1, projector=None):
    if cfg.sampler == "ddim":
        spacing = cfg.spacing or StepSpacing.sections(sched.T, DESK_DDIM_SECTIONS)
        return ddim_sample(model, cond, phi, cfg, sched, spacing, shape, n, projector)
    return ddpm_sample(model, cond, phi, cfg, sched, shape, n, projector)
