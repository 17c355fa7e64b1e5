"""Desk-scale DDPM over 2-D points, conditioned through connector tokens.

The denoiser is an MLP over (x_t, time features) with a single cross-attention
read of the connector's output tokens. Sampling re-evaluates the connector at
every timestep so the timestep-modulation path stays live, and supports
classifier-free guidance against the learned null conditioning.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .connector import TimeEmbedding, time_embed
from .numerics import RngState, Tensor


class DiffusionError(ValueError):
    """Invalid schedule configuration or timestep."""


@dataclass(frozen=True)
class DiffusionConfig:
    t_max: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_dim: int = 2
    guidance_weight: float = 1.0
    denoiser_hidden: int = 64

    def validate(self) -> None:
        """Strict invariants for run configs; schedule math itself is laxer."""
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise DiffusionError("need 0 < beta_start < beta_end < 1")
        if self.t_max < 10:
            raise DiffusionError("t_max must be at least 10")
        if self.sample_dim < 1 or self.denoiser_hidden < 1:
            raise DiffusionError("sample_dim and denoiser_hidden must be positive")


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def t_max(self) -> int:
        return len(self.betas)


def build_schedule(cfg: DiffusionConfig) -> NoiseSchedule:
    """Linear beta schedule with cumulative-product alpha bars."""
    if cfg.t_max < 1:
        raise DiffusionError("t_max must be at least 1")
    if not 0.0 < cfg.beta_start <= cfg.beta_end < 1.0:
        raise DiffusionError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(cfg.beta_start, cfg.beta_end, cfg.t_max)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def q_sample(x0: np.ndarray, t: int, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward-process draw: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    _check_t(t, sched)
    if np.shape(noise) != np.shape(x0):
        raise DiffusionError("noise must match the sample shape")
    abar = sched.alpha_bars[t]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


def posterior_step(x_t: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule,
                   noise: np.ndarray | None = None) -> np.ndarray:
    """One reverse ancestral step given a noise estimate.

    Pass `noise=None` for the deterministic variance-0 variant; t = 0 always
    returns the posterior mean.
    """
    _check_t(t, sched)
    beta = sched.betas[t]
    alpha = sched.alphas[t]
    abar = sched.alpha_bars[t]
    mean = (x_t - (beta / np.sqrt(1.0 - abar)) * eps) / np.sqrt(alpha)
    if t == 0 or noise is None:
        return mean
    abar_prev = sched.alpha_bars[t - 1]
    var = (1.0 - abar_prev) / (1.0 - abar) * beta
    return mean + np.sqrt(var) * noise


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free guidance: eps_uncond + w (eps_cond - eps_uncond)."""
    if np.shape(eps_uncond) != np.shape(eps_cond):
        raise DiffusionError("guidance operands must share a shape")
    return eps_uncond + w * (eps_cond - eps_uncond)


def predict_x0(x_t: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Algebraic inversion of q_sample given a noise estimate."""
    _check_t(t, sched)
    abar = sched.alpha_bars[t]
    return (x_t - np.sqrt(1.0 - abar) * eps) / np.sqrt(abar)


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not 0 <= t < sched.t_max:
        raise DiffusionError(f"timestep {t} outside [0, {sched.t_max})")


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


@dataclass
class DenoiserParams:
    """MLP over (x_t, time features) with one cross-attention read of the tokens."""

    w_in: Tensor  # (sample_dim + d_time, hidden)
    b_in: Tensor
    wq: Tensor  # (hidden, hidden)
    wk: Tensor  # (d_model, hidden)
    wv: Tensor  # (d_model, hidden)
    wo: Tensor  # (hidden, hidden)
    w1: Tensor
    b1: Tensor
    w2: Tensor  # (hidden, sample_dim)
    b2: Tensor


def init_denoiser(cfg: DiffusionConfig, d_model: int, d_time: int, rng: RngState) -> DenoiserParams:
    hidden = cfg.denoiser_hidden

    def lin(fan_in, fan_out):
        return Tensor(rng.normal((fan_in, fan_out)) / np.sqrt(fan_in))

    return DenoiserParams(
        w_in=lin(cfg.sample_dim + d_time, hidden),
        b_in=Tensor(np.zeros(hidden)),
        wq=lin(hidden, hidden),
        wk=lin(d_model, hidden),
        wv=lin(d_model, hidden),
        wo=Tensor(0.1 * rng.normal((hidden, hidden)) / np.sqrt(hidden)),
        w1=lin(hidden, hidden),
        b1=Tensor(np.zeros(hidden)),
        w2=Tensor(np.zeros((hidden, cfg.sample_dim))),
        b2=Tensor(np.zeros(cfg.sample_dim)),
    )


def denoiser_forward(p: DenoiserParams, x_t: np.ndarray, te: TimeEmbedding,
                     tokens: Tensor) -> Tensor:
    """Predict the noise for a batch of rows under one token set.

    x_t and the time features enter as constants; gradients flow only through
    parameters and the conditioning tokens.
    """
    n = x_t.shape[0]
    inp = Tensor(np.concatenate([x_t, np.repeat(te.vector.data, n, axis=0)], axis=1))
    h0 = nm.gelu(inp @ p.w_in + p.b_in)
    q = h0 @ p.wq
    k = tokens @ p.wk
    v = tokens @ p.wv
    scores = (q @ k.transpose(1, 0)) * (1.0 / np.sqrt(q.data.shape[1]))
    read = nm.softmax(scores, axis=-1) @ v
    h1 = h0 + read @ p.wo
    return nm.gelu(h1 @ p.w1 + p.b1) @ p.w2 + p.b2


def denoise_step(x_t: np.ndarray, t: int, cond_tokens: Tensor, den: DenoiserParams,
                 sched: NoiseSchedule, d_time: int,
                 noise: np.ndarray | None = None) -> np.ndarray:
    """Reverse step driven by the denoiser's own noise estimate."""
    eps_hat = denoiser_forward(den, x_t, time_embed(t, d_time), cond_tokens)
    return posterior_step(x_t, t, eps_hat.data, sched, noise=noise)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample(model, conditions: list, n_samples: int, cfg: DiffusionConfig,
           rng: RngState, guidance: float | None = None) -> list[np.ndarray]:
    """Ancestral sampling for a batch of condition assignments.

    `model` must expose `condition_tokens(assignment, t)`, `null_tokens(t)` and
    `denoiser`; both trained single-branch models and composed models qualify.
    The connector runs once per (assignment, timestep) because its
    timestep-modulation makes the tokens time-dependent. Returns one
    (n_samples, sample_dim) array per condition, in input order.
    """
    w = cfg.guidance_weight if guidance is None else guidance
    sched = build_schedule(cfg)
    if n_samples < 0:
        raise DiffusionError("n_samples must be non-negative")
    states = [rng.normal((n_samples, cfg.sample_dim)) for _ in conditions]
    if n_samples == 0 or not conditions:
        return states
    for t in range(sched.t_max - 1, -1, -1):
        te = time_embed(t, model.d_time)
        uncond_tokens = model.null_tokens(t) if w != 1.0 else None
        for idx, cond in enumerate(conditions):
            eps_cond = denoiser_forward(
                model.denoiser, states[idx], te, model.condition_tokens(cond, t)
            ).data
            if w == 1.0:
                eps = eps_cond
            else:
                eps_uncond = denoiser_forward(
                    model.denoiser, states[idx], te, uncond_tokens
                ).data
                eps = cfg_combine(eps_uncond, eps_cond, w)
            noise = rng.normal((n_samples, cfg.sample_dim)) if t > 0 else None
            states[idx] = posterior_step(states[idx], t, eps, sched, noise=noise)
    return states
