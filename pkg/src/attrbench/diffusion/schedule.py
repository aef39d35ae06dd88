"""Noise schedules and the deterministic DDIM update in both directions.

Index convention: timesteps run t = 1..T with alpha_bar[0] = 1 (no noise).
The forward map is the closed form z_t = sqrt(abar_t)·z0 + sqrt(1−abar_t)·eps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

_BASE_STEPS = 1000
_BASE_BETA = np.linspace(1e-4, 0.02, _BASE_STEPS, dtype=np.float64)
_COSINE_OFFSET = 0.008
_BETA_CLIP = 0.999


class ScheduleError(ValueError):
    pass


class TrajectoryError(RuntimeError):
    """Non-finite latent encountered; carries the offending step index."""

    def __init__(self, step: int, message: str):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step alpha_t and cumulative alpha_bar_t, t = 1..T.

    ``alpha`` has length T (entry i is alpha_{i+1}); ``alpha_bar`` has length
    T+1 with alpha_bar[0] = 1.
    """

    T: int
    alpha: np.ndarray
    alpha_bar: np.ndarray
    kind: str = "linear"

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.T < 1 or a.shape != (self.T,) or ab.shape != (self.T + 1,):
            raise ScheduleError("inconsistent schedule arrays")
        if not ((a > 0) & (a < 1)).all():
            raise ScheduleError("alpha values must lie strictly in (0, 1)")
        if ab[0] != 1.0 or not (np.diff(ab) < 0).all():
            raise ScheduleError("alpha_bar must start at 1 and strictly decrease")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "alpha_bar", ab)

    def abar(self, t: int) -> float:
        if not (0 <= t <= self.T):
            raise ScheduleError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t])

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind}


def make_schedule(T: int = 50, kind: str = "linear") -> NoiseSchedule:
    """Build a T-step schedule.

    ``linear`` subsamples the canonical 1000-step linear-beta table (betas
    1e-4..0.02), so alpha_bar at t = T matches the fully-noised endpoint for
    any T. ``cosine`` uses the offset-cosine curve with the usual 0.999 beta
    clip at the final step.
    """
    if T < 1:
        raise ScheduleError("T must be at least 1")
    if kind == "linear":
        if T > _BASE_STEPS:
            raise ScheduleError(f"linear schedule supports T <= {_BASE_STEPS}")
        base_abar = np.cumprod(1.0 - _BASE_BETA)
        stride = _BASE_STEPS // T
        ts = (np.arange(1, T + 1) * stride) - 1
        abar = np.concatenate([[1.0], base_abar[ts]])
    elif kind == "cosine":
        def f(t: float) -> float:
            x = (t / T + _COSINE_OFFSET) / (1.0 + _COSINE_OFFSET) * math.pi / 2.0
            return math.cos(x) ** 2

        abar = [1.0]
        curve_prev = f(0)
        for t in range(1, T + 1):
            curve = f(t)
            beta = min(1.0 - curve / curve_prev, _BETA_CLIP)
            abar.append(abar[-1] * (1.0 - beta))
            curve_prev = curve
        abar = np.asarray(abar)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    alpha = abar[1:] / abar[:-1]
    return NoiseSchedule(T=T, alpha=alpha, alpha_bar=abar, kind=kind)


def _check_t(t: int, schedule: NoiseSchedule, allow_zero: bool = False):
    lo = 0 if allow_zero else 1
    if not (lo <= t <= schedule.T):
        raise ScheduleError(f"timestep {t} outside [{lo}, {schedule.T}]")


def forward_diffuse(
    z0: torch.Tensor, t: int, noise: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Closed-form noising: sqrt(abar_t)·z0 + sqrt(1−abar_t)·noise."""
    _check_t(t, schedule, allow_zero=True)
    if noise.shape != z0.shape:
        raise ScheduleError(f"noise shape {tuple(noise.shape)} != z0 shape {tuple(z0.shape)}")
    ab = schedule.abar(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * noise


def ddim_step(
    z_t: torch.Tensor, eps: torch.Tensor, t: int, schedule: NoiseSchedule
) -> torch.Tensor:
    """One deterministic denoising step t -> t−1."""
    if t == 0:
        raise ScheduleError("ddim_step requires t >= 1")
    _check_t(t, schedule)
    if eps.shape != z_t.shape:
        raise ScheduleError("eps shape mismatch")
    ab_t = schedule.abar(t)
    ab_prev = schedule.abar(t - 1)
    z0_hat = (z_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * z0_hat + math.sqrt(1.0 - ab_prev) * eps


def predict_z0(z_t: torch.Tensor, eps: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    _check_t(t, schedule)
    ab_t = schedule.abar(t)
    return (z_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)


def ddim_sample(
    z_T: torch.Tensor,
    denoiser,
    tokens,
    schedule: NoiseSchedule,
    structure=None,
) -> list[torch.Tensor]:
    """Denoise from z_T to z_0; returns the trajectory [z_T, ..., z_0]."""
    z = z_T
    traj = [z]
    for t in range(schedule.T, 0, -1):
        eps = denoiser(z, t, tokens, structure=structure).eps
        z = ddim_step(z, eps, t, schedule)
        if not torch.isfinite(z).all():
            raise TrajectoryError(t, f"non-finite latent while sampling at t={t}")
        traj.append(z)
    return traj


def ddim_invert(
    z0: torch.Tensor,
    denoiser,
    tokens,
    schedule: NoiseSchedule,
    structure=None,
    refine_steps: int = 8,
    refine_tol: float = 1e-13,
    refine_damping: float = 0.5,
) -> list[torch.Tensor]:
    """Deterministic inversion from a clean latent to its initial noise.

    Each step applies z_t = sqrt(abar_t/abar_{t−1})·z_{t−1}
                         + sqrt(abar_t)·(sqrt(1/abar_t − 1) − sqrt(1/abar_{t−1} − 1))·eps.

    With ``refine_steps`` > 0 the noise term is re-evaluated at the step's own
    output (damped iteration) and the iterate with the smallest fixed-point
    residual is kept. At the fixed point the ddim sampler inverts the step
    exactly for any denoiser; where the iteration will not contract, the kept
    iterate is never worse than the plain single-evaluation update. Returns
    [z_0, ..., z_T].
    """
    z = z0
    traj = [z]
    for t in range(1, schedule.T + 1):
        ab_t = schedule.abar(t)
        ab_prev = schedule.abar(t - 1)
        scale = math.sqrt(ab_t / ab_prev)
        shift = math.sqrt(ab_t) * (
            math.sqrt(1.0 / ab_t - 1.0) - math.sqrt(1.0 / ab_prev - 1.0)
        )
        eps = denoiser(z, t, tokens, structure=structure).eps
        z_next = scale * z + shift * eps
        best, best_res = z_next, math.inf
        prev_res = math.inf
        for _ in range(refine_steps):
            eps = denoiser(z_next, t, tokens, structure=structure).eps
            candidate = scale * z + shift * eps
            res = float((candidate - z_next).detach().abs().max())
            if res < best_res:
                best, best_res = z_next, res
            if res < refine_tol:
                break
            if res > prev_res:  # not contracting here: damp the update
                z_next = (1.0 - refine_damping) * z_next + refine_damping * candidate
            else:
                z_next = candidate
            prev_res = res
        z = best if refine_steps > 0 else z_next
        if not torch.isfinite(z).all():
            raise TrajectoryError(t, f"non-finite latent while inverting at t={t}")
        traj.append(z)
    return traj
