"""Forward perturbation and vectorized reverse samplers.

Every frame of a clip carries its own diffusion time, so forward noising,
the ancestral (stochastic) sampler, and the deterministic sampler all work
on per-frame coefficient vectors.  Frames whose time is pinned at exactly 0
are "frozen": their content is clamped to the conditioning data before
every denoiser evaluation and after every step, which is how image-to-video,
interpolation, and clip extension come out of one sampling loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, as_tensor, gaussian
from .schedule import FrameTimes, NoiseSchedule


@dataclass(frozen=True)
class VideoTensor:
    """An N-frame clip; each frame is a flat float64 vector of length d."""

    data: np.ndarray
    geometry: tuple[int, int, int] | None = None  # (height, width, channels)

    def __post_init__(self):
        data = as_tensor(self.data, "video data")
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"video data must be (n_frames, frame_dim), got {data.shape}")
        if self.geometry is not None:
            h, w, c = (int(v) for v in self.geometry)
            if h * w * c != data.shape[1]:
                raise ValueError(f"geometry {self.geometry} does not match frame_dim {data.shape[1]}")
            object.__setattr__(self, "geometry", (h, w, c))
        object.__setattr__(self, "data", data)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def frame_dim(self) -> int:
        return self.data.shape[1]

    def clamped(self, lo: float = -3.0, hi: float = 3.0) -> "VideoTensor":
        """Export-time value clamp; sampling itself never clamps."""
        return VideoTensor(np.clip(self.data, lo, hi), self.geometry)


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "deterministic"  # "ancestral" draws step noise, "deterministic" never does
    steps: int = 50
    stream_id: int = 0

    def __post_init__(self):
        if self.kind not in ("ancestral", "deterministic"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


class SamplerError(RuntimeError):
    """Raised when the denoiser returns non-finite values mid-trajectory."""


def _frame_coeffs(sched: NoiseSchedule, times: np.ndarray):
    mean_coef, std = sched.marginal_coeffs(times)
    return mean_coef[:, None], std[:, None]


def perturb(x0: VideoTensor, tau: FrameTimes, sched: NoiseSchedule,
            rng: RngStream) -> tuple[VideoTensor, VideoTensor]:
    """Diffuse each frame to its own time; returns (x_t, eps) with eps the target."""
    if tau.n_frames != x0.n_frames:
        raise ValueError(f"times length {tau.n_frames} != n_frames {x0.n_frames}")
    mean_coef, std = _frame_coeffs(sched, tau.times)
    eps = gaussian(rng, x0.data.shape)
    xt = mean_coef * x0.data + std * eps
    return VideoTensor(xt, x0.geometry), VideoTensor(eps, x0.geometry)


def simulate_forward_sde_paths(x0: VideoTensor, tau_end: FrameTimes, sched: NoiseSchedule,
                               step_size: float, rng: RngStream, n_paths: int) -> np.ndarray:
    """Euler-Maruyama integration of the per-frame forward SDE (test oracle).

    Each frame runs its own clock from 0 to tau_end[i] under
    dx = -0.5 beta(s) x ds + sqrt(beta(s)) dW.  Returns (n_paths, N, d).
    """
    if step_size > 1e-3:
        raise ValueError("step_size must be <= 1e-3 for the verification integrator")
    if tau_end.n_frames != x0.n_frames:
        raise ValueError("tau_end length mismatch")
    n, d = x0.data.shape
    x = np.broadcast_to(x0.data, (n_paths, n, d)).copy()
    clocks = np.zeros(n)
    targets = tau_end.times
    while np.any(clocks < targets):
        dt = np.minimum(step_size, targets - clocks)
        active = dt > 0
        beta = sched.beta(np.where(active, clocks, 0.0))
        drift = -0.5 * beta[:, None] * x * dt[:, None]
        noise = gaussian(rng, (n_paths, n, d))
        diffusion = np.sqrt(beta * dt)[:, None] * noise
        x = x + drift + np.where(active[:, None], diffusion, 0.0)
        clocks = clocks + dt
    return x


def simulate_forward_sde(x0: VideoTensor, tau_end: FrameTimes, sched: NoiseSchedule,
                         step_size: float, rng: RngStream) -> VideoTensor:
    """Single Euler-Maruyama path of the per-frame forward SDE."""
    paths = simulate_forward_sde_paths(x0, tau_end, sched, step_size, rng, 1)
    return VideoTensor(paths[0], x0.geometry)


def _check_step_times(tau: FrameTimes, tau_next: FrameTimes, n_frames: int):
    if tau.n_frames != n_frames or tau_next.n_frames != n_frames:
        raise ValueError("times length mismatch")
    if np.any(tau_next.times > tau.times):
        raise ValueError("tau_next must not exceed tau on any frame")
    frozen = (tau.times == 0.0) & (tau_next.times == 0.0)
    if np.any((tau.times == 0.0) & ~frozen):
        raise ValueError("non-frozen frames need tau > 0")
    return frozen


def _ddim_core(x: np.ndarray, tau: FrameTimes, tau_next: FrameTimes,
               eps_hat: np.ndarray, sched: NoiseSchedule, frozen: np.ndarray) -> np.ndarray:
    mc, std = _frame_coeffs(sched, tau.times)
    mc_next, std_next = _frame_coeffs(sched, tau_next.times)
    # Guard the frozen columns (mc == 1 there anyway; this keeps 0/0 out).
    mc = np.where(frozen[:, None], 1.0, mc)
    x0_hat = (x - std * eps_hat) / mc
    out = mc_next * x0_hat + std_next * eps_hat
    out[..., frozen, :] = x[..., frozen, :]
    return out


def _ancestral_core(x: np.ndarray, tau: FrameTimes, tau_next: FrameTimes,
                    eps_hat: np.ndarray, sched: NoiseSchedule, frozen: np.ndarray,
                    noise: np.ndarray) -> np.ndarray:
    acc = sched.accumulated_beta(tau.times)
    acc_next = sched.accumulated_beta(tau_next.times)
    alpha_bar = np.exp(-acc)
    alpha_bar_next = np.exp(-acc_next)
    beta_k = 1.0 - alpha_bar / alpha_bar_next
    one_minus = 1.0 - alpha_bar
    safe = np.where(frozen, 1.0, one_minus)
    coef = np.where(frozen, 0.0, beta_k / np.sqrt(safe))
    beta_tilde = np.where(frozen, 0.0, beta_k * (1.0 - alpha_bar_next) / safe)
    out = (x - coef[:, None] * eps_hat) / np.sqrt(1.0 - beta_k)[:, None]
    out = out + np.sqrt(beta_tilde)[:, None] * noise
    out[..., frozen, :] = x[..., frozen, :]
    return out


def ddim_step(x: VideoTensor, tau: FrameTimes, tau_next: FrameTimes,
              eps_hat: VideoTensor, sched: NoiseSchedule) -> VideoTensor:
    """One deterministic update from per-frame times tau to tau_next."""
    frozen = _check_step_times(tau, tau_next, x.n_frames)
    out = _ddim_core(x.data, tau, tau_next, eps_hat.data, sched, frozen)
    return VideoTensor(out, x.geometry)


def ancestral_step(x: VideoTensor, tau: FrameTimes, tau_next: FrameTimes,
                   eps_hat: VideoTensor, sched: NoiseSchedule, rng: RngStream) -> VideoTensor:
    """One stochastic update; frozen frames get neither drift nor noise."""
    frozen = _check_step_times(tau, tau_next, x.n_frames)
    noise = gaussian(rng, x.data.shape)
    out = _ancestral_core(x.data, tau, tau_next, eps_hat.data, sched, frozen, noise)
    return VideoTensor(out, x.geometry)


def _evaluate_score(score, x: np.ndarray, tau: FrameTimes) -> np.ndarray:
    batch_eval = getattr(score, "evaluate_batch", None)
    if batch_eval is not None:
        return np.asarray(batch_eval(x, tau), dtype=np.float64)
    out = np.empty_like(x)
    for b in range(x.shape[0]):
        out[b] = score.evaluate(VideoTensor(x[b]), tau).data
    return out


def sample_batch(score, task, cfg: SamplerConfig, sched: NoiseSchedule,
                 rng: RngStream, n_samples: int, clamp_frozen: bool = True) -> np.ndarray:
    """Run the reverse sampler for a batch of trajectories; returns (B, N, d).

    All trajectories share the task's per-frame time schedule and the one
    stream: the initial draw is a single (B, N, d) gaussian call and each
    ancestral step consumes exactly one more, so results replay bit-exactly.
    """
    task.validate()
    traj = task.trajectories
    if traj.shape[1] != cfg.steps + 1:
        raise ValueError(f"task has {traj.shape[1] - 1} steps but sampler expects {cfg.steps}")
    n, d = task.n_frames, task.frame_dim
    frozen_idx = np.array(task.frozen, dtype=np.int64)

    x = gaussian(rng, (n_samples, n, d))

    def clamp(arr):
        if clamp_frozen and frozen_idx.size:
            arr[:, frozen_idx, :] = task.conditioning[None, :, :]

    clamp(x)
    for k in range(cfg.steps):
        tau = FrameTimes(traj[:, k])
        tau_next = FrameTimes(traj[:, k + 1])
        frozen = _check_step_times(tau, tau_next, n)
        eps_hat = _evaluate_score(score, x, tau)
        if not np.all(np.isfinite(eps_hat)):
            raise SamplerError(f"denoiser returned non-finite values at step {k}")
        if cfg.kind == "deterministic":
            x = _ddim_core(x, tau, tau_next, eps_hat, sched, frozen)
        else:
            noise = gaussian(rng, (n_samples, n, d))
            x = _ancestral_core(x, tau, tau_next, eps_hat, sched, frozen, noise)
        clamp(x)
    return x


def sample(score, task, cfg: SamplerConfig, sched: NoiseSchedule,
           rng: RngStream, geometry=None) -> VideoTensor:
    """Generate one clip for a task; frozen frames come back bit-exact."""
    out = sample_batch(score, task, cfg, sched, rng, 1)
    return VideoTensor(out[0], geometry)
