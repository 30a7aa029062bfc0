"""Noise-prediction models behind one evaluation contract.

Two implementations of :class:`ScoreFunction` live here: the trainable
transformer denoiser (frames as tokens, per-frame timestep conditioning
through zero-initialized adaptive layer-norm gates) and the closed-form
conditional-Gaussian oracle used to verify the samplers end to end.  Both
predict the injected noise ``eps``; the score is ``-eps_hat / std(t)``,
which keeps outputs bounded as frame times approach zero.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape
from .diffusion import VideoTensor
from .numerics import RngStream, as_tensor
from .schedule import FrameTimes, NoiseSchedule

SCALE_PRESETS = {
    "toy-S": dict(embed_dim=32, n_layers=2, n_heads=2),
    "toy-B": dict(embed_dim=64, n_layers=4, n_heads=4),
}


@dataclass(frozen=True)
class DenoiserConfig:
    frame_dim: int
    embed_dim: int = 32
    n_layers: int = 2
    n_heads: int = 2
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.frame_dim < 1:
            raise ValueError("frame_dim must be >= 1")
        if self.embed_dim % 2 != 0:
            raise ValueError("embed_dim must be even")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")

    @classmethod
    def from_preset(cls, name: str, frame_dim: int, mlp_ratio: int = 4) -> "DenoiserConfig":
        if name not in SCALE_PRESETS:
            raise ValueError(f"unknown preset {name!r}; have {sorted(SCALE_PRESETS)}")
        return cls(frame_dim=frame_dim, mlp_ratio=mlp_ratio, **SCALE_PRESETS[name])


class ScoreFunction(abc.ABC):
    """Evaluation contract shared by the denoiser and the analytic oracle."""

    @abc.abstractmethod
    def evaluate(self, x: VideoTensor, tau: FrameTimes) -> VideoTensor:
        """Predicted noise for one clip; output shape equals input shape."""

    def evaluate_batch(self, x: np.ndarray, tau: FrameTimes) -> np.ndarray:
        out = np.empty_like(x)
        for b in range(x.shape[0]):
            out[b] = self.evaluate(VideoTensor(x[b]), tau).data
        return out


def embed_timesteps(times, dim: int) -> np.ndarray:
    """Sinusoidal embedding of per-frame times, (N,) -> (N, dim).

    Times are rescaled by 1000 so the continuous [0, 1] range covers the
    index span the classic encoding was tuned for; frequencies follow
    10000^(-2k/dim).
    """
    if dim % 2 != 0:
        raise ValueError("embedding dimension must be even")
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    angles = 1000.0 * times[:, None] * freqs[None, :]
    out = np.empty((times.size, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def _param_specs(cfg: DenoiserConfig):
    """Yield (name, shape, fan_in); fan_in None means zero-initialized."""
    d, dim = cfg.frame_dim, cfg.embed_dim
    head_dim = dim // cfg.n_heads
    hidden = cfg.mlp_ratio * dim
    yield "embed.w", (d, dim), d
    yield "embed.b", (dim,), None
    yield "tcond.w1", (dim, dim), dim
    yield "tcond.b1", (dim,), None
    yield "tcond.w2", (dim, dim), dim
    yield "tcond.b2", (dim,), None
    for i in range(cfg.n_layers):
        pre = f"block{i}."
        for mod in ("shift1", "scale1", "gate1", "shift2", "scale2", "gate2"):
            yield pre + f"mod.{mod}.w", (dim, dim), None
            yield pre + f"mod.{mod}.b", (dim,), None
        for h in range(cfg.n_heads):
            hp = pre + f"attn.h{h}."
            for proj in ("wq", "wk", "wv"):
                yield hp + proj, (dim, head_dim), dim
            for proj in ("bq", "bk", "bv"):
                yield hp + proj, (head_dim,), None
            yield hp + "wo", (head_dim, dim), head_dim
        yield pre + "attn.bo", (dim,), None
        yield pre + "mlp.w1", (dim, hidden), dim
        yield pre + "mlp.b1", (hidden,), None
        yield pre + "mlp.w2", (hidden, dim), hidden
        yield pre + "mlp.b2", (dim,), None
    for mod in ("shift", "scale"):
        yield f"final.{mod}.w", (dim, dim), None
        yield f"final.{mod}.b", (dim,), None
    yield "final.out.w", (dim, d), None
    yield "final.out.b", (d,), None
    yield "final.skip.w", (dim, 1), None
    yield "final.skip.b", (1,), None


def init_denoiser(cfg: DenoiserConfig, rng: RngStream) -> dict[str, np.ndarray]:
    """Fresh parameters: uniform fan-in weights, all conditioning gates at zero.

    Zero gates make every block an exact identity on its residual stream, and
    the zero output/skip heads make the fresh model predict exactly zero.
    """
    params = {}
    for name, shape, fan_in in _param_specs(cfg):
        if fan_in is None:
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(shape, -bound, bound)
    return params


def _affine(tape: Tape, x: Node, w: Node, b: Node, rows: int) -> Node:
    return tape.add(tape.matmul(x, w), tape.broadcast(b, (rows, b.value.shape[-1])))


def _attention(tape: Tape, cfg: DenoiserConfig, p: dict[str, Node], prefix: str,
               tokens: Node, n: int) -> Node:
    head_dim = cfg.embed_dim // cfg.n_heads
    inv_sqrt = 1.0 / math.sqrt(head_dim)
    total = None
    for h in range(cfg.n_heads):
        hp = f"{prefix}attn.h{h}."
        q = _affine(tape, tokens, p[hp + "wq"], p[hp + "bq"], n)
        k = _affine(tape, tokens, p[hp + "wk"], p[hp + "bk"], n)
        v = _affine(tape, tokens, p[hp + "wv"], p[hp + "bv"], n)
        weights = tape.softmax(tape.scale(tape.matmul(q, k, transpose_b=True), inv_sqrt), axis=-1)
        proj = tape.matmul(tape.matmul(weights, v), p[hp + "wo"])
        total = proj if total is None else tape.add(total, proj)
    return tape.add(total, tape.broadcast(p[f"{prefix}attn.bo"], (n, cfg.embed_dim)))


def forward_on_tape(tape: Tape, cfg: DenoiserConfig, params: dict[str, Node],
                    x: Node, tau: FrameTimes,
                    block_residuals: list[np.ndarray] | None = None) -> Node:
    """Differentiable forward pass; ``x`` is an (N, d) node already on the tape."""
    n, dim = tau.n_frames, cfg.embed_dim
    if x.value.shape != (n, cfg.frame_dim):
        raise ValueError(f"input shape {x.value.shape} does not match "
                         f"({n}, {cfg.frame_dim})")
    p = params
    temb = tape.constant(embed_timesteps(tau.times, dim))
    cond = _affine(tape, tape.silu(_affine(tape, temb, p["tcond.w1"], p["tcond.b1"], n)),
                   p["tcond.w2"], p["tcond.b2"], n)
    sm = tape.silu(cond)
    ones = tape.constant(np.ones((n, dim)))

    h = _affine(tape, x, p["embed.w"], p["embed.b"], n)
    for i in range(cfg.n_layers):
        pre = f"block{i}."

        def mod(which):
            return _affine(tape, sm, p[pre + f"mod.{which}.w"], p[pre + f"mod.{which}.b"], n)

        norm = tape.layer_norm(h)
        gated_in = tape.add(tape.mul(norm, tape.add(ones, mod("scale1"))), mod("shift1"))
        contrib = tape.mul(mod("gate1"), _attention(tape, cfg, p, pre, gated_in, n))
        if block_residuals is not None:
            block_residuals.append(contrib.value.copy())
        h = tape.add(h, contrib)

        norm = tape.layer_norm(h)
        gated_in = tape.add(tape.mul(norm, tape.add(ones, mod("scale2"))), mod("shift2"))
        hidden = tape.silu(_affine(tape, gated_in, p[pre + "mlp.w1"], p[pre + "mlp.b1"], n))
        contrib = tape.mul(mod("gate2"), _affine(tape, hidden, p[pre + "mlp.w2"], p[pre + "mlp.b2"], n))
        if block_residuals is not None:
            block_residuals.append(contrib.value.copy())
        h = tape.add(h, contrib)

    norm = tape.layer_norm(h)
    shift = _affine(tape, sm, p["final.shift.w"], p["final.shift.b"], n)
    scale = _affine(tape, sm, p["final.scale.w"], p["final.scale.b"], n)
    modded = tape.add(tape.mul(norm, tape.add(ones, scale)), shift)
    out = _affine(tape, modded, p["final.out.w"], p["final.out.b"], n)
    # Per-frame scalar skip gain on the raw input, zero at init like the gates;
    # it lets the prediction carry the full-rank component of the input frame.
    gain = _affine(tape, sm, p["final.skip.w"], p["final.skip.b"], n)
    return tape.add(out, tape.mul(tape.broadcast(gain, (n, cfg.frame_dim)), x))


def denoiser_forward(cfg: DenoiserConfig, params: dict[str, np.ndarray],
                     x: VideoTensor, tau: FrameTimes,
                     block_residuals: list[np.ndarray] | None = None) -> VideoTensor:
    """Evaluation-only forward pass over plain arrays."""
    if tau.n_frames != x.n_frames:
        raise ValueError("times length does not match clip")
    tape = Tape()
    nodes = {name: tape.constant(v) for name, v in params.items()}
    out = forward_on_tape(tape, cfg, nodes, tape.constant(x.data), tau, block_residuals)
    return VideoTensor(out.value, x.geometry)


class DenoiserScore(ScoreFunction):
    """A trained (or fresh) denoiser bound to its parameters."""

    def __init__(self, cfg: DenoiserConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    def evaluate(self, x: VideoTensor, tau: FrameTimes) -> VideoTensor:
        return denoiser_forward(self.cfg, self.params, x, tau)


@dataclass(frozen=True)
class GaussianVideoModel:
    """An exactly-known Gaussian law over flattened clips, used as an oracle."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = as_tensor(self.mean, "gaussian mean").reshape(-1)
        cov = as_tensor(self.cov, "gaussian cov")
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean size {mean.size}")
        if np.max(np.abs(cov - cov.T)) > 1e-9:
            raise ValueError("covariance must be symmetric")
        smallest = np.linalg.eigvalsh(cov)[0]
        if smallest <= 1e-8:
            raise ValueError(f"covariance must be positive definite (min eig {smallest:.3e})")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def _coordinate_coeffs(sched: NoiseSchedule, tau: FrameTimes, frame_dim: int):
    mc, std = sched.marginal_coeffs(tau.times)
    return np.repeat(mc, frame_dim), np.repeat(std, frame_dim)


def oracle_eps_batch(model: GaussianVideoModel, sched: NoiseSchedule,
                     x: np.ndarray, tau: FrameTimes) -> np.ndarray:
    """Exact noise prediction for Gaussian data, (B, N, d) -> (B, N, d).

    Frames at time 0 are treated as observed at their clean values; the
    other frames get the conditional score of the diffused joint law, and
    their rows of the output are ``std * Sigma^{-1} (x - mu)``.  Frozen rows
    come back as zeros.
    """
    batch, n, d = x.shape
    if tau.n_frames != n or model.dim != n * d:
        raise ValueError("oracle dimensions do not match input")
    coef, std = _coordinate_coeffs(sched, tau, d)
    frozen = np.repeat(tau.frozen_mask(), d)
    flat = x.reshape(batch, n * d)
    m, cov = model.mean, model.cov
    eps = np.zeros_like(flat)
    if not frozen.any():
        sigma = coef[:, None] * coef[None, :] * cov
        sigma[np.diag_indices_from(sigma)] += std * std
        resid = flat - coef * m
        eps = std * np.linalg.solve(sigma, resid.T).T
    else:
        free = ~frozen
        c_ff = cov[np.ix_(frozen, frozen)]
        c_gf = cov[np.ix_(free, frozen)]
        a_g, s_g = coef[free], std[free]
        sigma_gg = a_g[:, None] * a_g[None, :] * cov[np.ix_(free, free)]
        sigma_gg[np.diag_indices_from(sigma_gg)] += s_g * s_g
        sigma_gf = a_g[:, None] * c_gf
        gain = np.linalg.solve(c_ff, sigma_gf.T).T
        mu_cond = a_g * m[free] + (flat[:, frozen] - m[frozen]) @ gain.T
        sigma_cond = sigma_gg - gain @ sigma_gf.T
        sigma_cond = 0.5 * (sigma_cond + sigma_cond.T)
        resid = flat[:, free] - mu_cond
        eps[:, free] = s_g * np.linalg.solve(sigma_cond, resid.T).T
    return eps.reshape(batch, n, d)


def oracle_eps(model: GaussianVideoModel, sched: NoiseSchedule,
               x: VideoTensor, tau: FrameTimes) -> VideoTensor:
    out = oracle_eps_batch(model, sched, x.data[None], tau)
    return VideoTensor(out[0], x.geometry)


class GaussianOracleScore(ScoreFunction):
    """Closed-form noise prediction for an exactly-known Gaussian data law."""

    def __init__(self, model: GaussianVideoModel, sched: NoiseSchedule):
        self.model = model
        self.sched = sched

    def evaluate(self, x: VideoTensor, tau: FrameTimes) -> VideoTensor:
        return oracle_eps(self.model, self.sched, x, tau)

    def evaluate_batch(self, x: np.ndarray, tau: FrameTimes) -> np.ndarray:
        return oracle_eps_batch(self.model, self.sched, x, tau)


def condition_gaussian(model: GaussianVideoModel, frozen_coords: np.ndarray,
                       values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clean-data law conditioned on some coordinates, embedded in full dims.

    Returns plain ``(mean, cov)``; the conditioned coordinates get the given
    values and zero covariance, so the pair describes the exact law a frozen
    -frame sampling task should reproduce.
    """
    m, cov = model.mean, model.cov
    mask = np.zeros(model.dim, dtype=bool)
    mask[np.asarray(frozen_coords, dtype=np.int64)] = True
    free = ~mask
    c_ff = cov[np.ix_(mask, mask)]
    c_gf = cov[np.ix_(free, mask)]
    gain = np.linalg.solve(c_ff, c_gf.T).T
    mean_full = np.array(m)
    mean_full[mask] = values
    mean_full[free] = m[free] + gain @ (np.asarray(values, dtype=np.float64) - m[mask])
    cov_full = np.zeros_like(cov)
    cov_free = cov[np.ix_(free, free)] - gain @ c_gf.T
    cov_full[np.ix_(free, free)] = 0.5 * (cov_free + cov_free.T)
    return mean_full, cov_full
