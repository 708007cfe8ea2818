"""Latent-to-noise inversion with per-step noise maps.

The inversion follows the edit-friendly recipe: intermediate noisy latents
are sampled independently per scheduled step, and each step's noise map is
the residual that forces the stochastic sampler update to land exactly on
the next sampled latent (and finally on the source latent). Replaying the
trajectory through the same denoiser therefore reconstructs the source
bit-for-bit up to float rounding, which is what lets the prompt and query
paths evolve losslessly while their attention tensors are read.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DenoiseSchedule, Latent
from .errors import IncompatibleScheduleError, MalformedTrajectoryError


@dataclass(frozen=True, eq=False)
class NoiseTrajectory:
    """Terminal latent plus the per-step noise maps that replay to the source."""

    terminal: Latent
    step_noises: np.ndarray  # (T, C, h, w)
    schedule: DenoiseSchedule

    def __post_init__(self):
        noises = np.asarray(self.step_noises, dtype=np.float32)
        if noises.ndim != 4:
            raise MalformedTrajectoryError(f"step noises must be (T, C, h, w), got {noises.shape}")
        if noises.shape[0] != self.schedule.num_steps:
            raise MalformedTrajectoryError(
                f"{noises.shape[0]} noise maps for a {self.schedule.num_steps}-step schedule"
            )
        if noises.shape[1:] != self.terminal.values.shape:
            raise MalformedTrajectoryError(
                f"noise map shape {noises.shape[1:]} differs from latent shape {self.terminal.values.shape}"
            )
        object.__setattr__(self, "step_noises", noises)

    @property
    def num_steps(self) -> int:
        return self.schedule.num_steps


def _schedule_with_levels(schedule: DenoiseSchedule, denoiser) -> DenoiseSchedule:
    if schedule.base_timesteps != denoiser.base_timesteps:
        raise IncompatibleScheduleError(
            f"schedule built for {schedule.base_timesteps} base timesteps, "
            f"backend has {denoiser.base_timesteps}"
        )
    levels = np.asarray(denoiser.alphas_cumprod, dtype=np.float64)
    if schedule.has_noise_levels:
        idx = np.asarray(schedule.timestep_indices)
        if not np.allclose(np.asarray(schedule.alpha_bars), levels[idx], rtol=0, atol=1e-9):
            raise IncompatibleScheduleError("schedule noise levels disagree with the backend's")
        return schedule
    return schedule.with_noise_levels(levels)


def step_mean_and_scale(x: np.ndarray, eps: np.ndarray, alpha_bar: float, alpha_bar_prev: float):
    """Posterior mean and noise scale of one stochastic sampler step.

    Uses the full per-step variance of the ancestral sampler, so the noise
    scale is strictly positive at every scheduled step (the landing level of
    the final step is the base schedule's index-0 level, which is < 1).
    """
    ab_t = np.float32(alpha_bar)
    ab_prev = np.float32(alpha_bar_prev)
    beta_t = np.float32(1.0) - ab_t
    beta_prev = np.float32(1.0) - ab_prev
    variance = (beta_prev / beta_t) * (np.float32(1.0) - ab_t / ab_prev)
    sigma = np.sqrt(variance)
    pred_x0 = (x - np.sqrt(beta_t) * eps) / np.sqrt(ab_t)
    direction = np.sqrt(np.maximum(beta_prev - variance, np.float32(0.0))) * eps
    mu = np.sqrt(ab_prev) * pred_x0 + direction
    return mu, sigma


def invert(z0: Latent, schedule: DenoiseSchedule, denoiser, seed: int = 0) -> NoiseTrajectory:
    """Map a clean latent to a noise trajectory whose replay reconstructs it.

    Intermediate latents are drawn independently at each scheduled noise
    level from the seeded generator; the denoiser (conditioned on nothing
    beyond the latent) is then queried once per step and the noise map is
    solved from the sampler update. Pure given (z0, schedule, seed).
    """
    if z0.timestep_tag != 0:
        raise MalformedTrajectoryError(f"expected a clean latent (tag 0), got tag {z0.timestep_tag}")
    sched = _schedule_with_levels(schedule, denoiser)
    x0 = z0.values
    rng = np.random.default_rng(seed)
    T = sched.num_steps
    sampled = np.empty((T,) + x0.shape, dtype=np.float32)
    for k in range(T):
        ab = np.float32(sched.alpha_bars[k])
        fresh = rng.standard_normal(size=x0.shape, dtype=np.float32)
        sampled[k] = np.sqrt(ab) * x0 + np.sqrt(np.float32(1.0) - ab) * fresh
    noises = np.empty_like(sampled)
    state = sampled[0]
    for k in range(T):
        eps = denoiser.predict_noise(state, sched.timestep_indices[k])
        mu, sigma = step_mean_and_scale(state, eps, sched.alpha_bars[k], sched.alpha_bars_prev[k])
        target = sampled[k + 1] if k + 1 < T else x0
        noises[k] = (target - mu) / sigma
        # re-derive the landing state exactly as replay will, so float
        # rounding cannot accumulate across steps
        state = mu + sigma * noises[k]
    return NoiseTrajectory(
        terminal=Latent(sampled[0], timestep_tag=T), step_noises=noises, schedule=sched
    )


def reconstruct(traj: NoiseTrajectory, denoiser) -> Latent:
    """Replay a trajectory through the sampler; returns the clean latent."""
    sched = _schedule_with_levels(traj.schedule, denoiser)
    if traj.step_noises.shape[0] != sched.num_steps:
        raise MalformedTrajectoryError(
            f"{traj.step_noises.shape[0]} noise maps for a {sched.num_steps}-step schedule"
        )
    state = traj.terminal.values
    for k in range(sched.num_steps):
        eps = denoiser.predict_noise(state, sched.timestep_indices[k])
        mu, sigma = step_mean_and_scale(state, eps, sched.alpha_bars[k], sched.alpha_bars_prev[k])
        state = mu + sigma * traj.step_noises[k]
    return Latent(state, timestep_tag=0)


def content_seed(base_seed: int, values: np.ndarray) -> int:
    """Derive an inversion seed from a base seed and the latent's content.

    Content addressing keeps trajectories a function of what is inverted,
    not of prompt order, so permuting or duplicating prompts cannot change
    any path's evolution.
    """
    digest = hashlib.sha256(np.ascontiguousarray(values, dtype=np.float32).tobytes()).digest()
    content = int.from_bytes(digest[:8], "little")
    return (int(base_seed) * 0x9E3779B97F4A7C15 + content) % (2**63)


# ---------------------------------------------------------------------------
# trajectory container files (caches inversions across runs)

_TRAJ_FORMAT = "diffvicl-trajectory-v1"


def save_trajectory(traj: NoiseTrajectory, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path,
        format=np.array(_TRAJ_FORMAT),
        terminal=traj.terminal.values,
        terminal_tag=np.array(traj.terminal.timestep_tag),
        step_noises=traj.step_noises,
        timestep_indices=np.array(traj.schedule.timestep_indices, dtype=np.int64),
        base_timesteps=np.array(traj.schedule.base_timesteps, dtype=np.int64),
        alpha_bars=np.array(traj.schedule.alpha_bars, dtype=np.float64),
        alpha_bars_prev=np.array(traj.schedule.alpha_bars_prev, dtype=np.float64),
    )


def load_trajectory(path) -> NoiseTrajectory:
    with np.load(Path(path), allow_pickle=False) as data:
        if str(data["format"]) != _TRAJ_FORMAT:
            raise MalformedTrajectoryError(f"unrecognized trajectory file format in {path}")
        indices = tuple(int(i) for i in data["timestep_indices"])
        schedule = DenoiseSchedule(
            num_steps=len(indices),
            timestep_indices=indices,
            base_timesteps=int(data["base_timesteps"]),
            alpha_bars=tuple(float(a) for a in data["alpha_bars"]),
            alpha_bars_prev=tuple(float(a) for a in data["alpha_bars_prev"]),
        )
        terminal = Latent(data["terminal"], timestep_tag=int(data["terminal_tag"]))
        return NoiseTrajectory(terminal=terminal, step_noises=data["step_noises"], schedule=schedule)


class InversionCache:
    """Content-addressed on-disk cache of inversions.

    Keyed by the latent content, the schedule, and the seed; safe to share
    across runs sweeping hyperparameters that do not change the schedule.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _key(self, z0: Latent, schedule: DenoiseSchedule, seed: int) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(z0.values, dtype=np.float32).tobytes())
        h.update(repr((schedule.timestep_indices, schedule.base_timesteps, int(seed))).encode())
        return h.hexdigest()[:32]

    def get_or_invert(self, z0: Latent, schedule: DenoiseSchedule, denoiser, seed: int) -> NoiseTrajectory:
        path = self.directory / f"{self._key(z0, schedule, seed)}.npz"
        if path.exists():
            return load_trajectory(path)
        traj = invert(z0, schedule, denoiser, seed=seed)
        tmp = path.with_suffix(".tmp.npz")
        save_trajectory(traj, tmp)
        tmp.replace(path)
        return traj
