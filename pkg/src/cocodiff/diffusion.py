"""Latent diffusion over 1-D action features with an x0-predicting denoiser.

All schedule tables are indexed directly by the step ``t`` in ``0..T``; index 0
holds the conventions alpha_bar_0 = 1 and beta_0 = 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

BASE_STEPS = 1000
BASE_BETA_START = 1e-4
BASE_BETA_END = 0.02
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    @property
    def betas(self) -> np.ndarray:
        """beta_1..beta_T."""
        return self.beta[1:]

    def check_step(self, t):
        tt = np.asarray(t)
        if tt.size and (tt.min() < 1 or tt.max() > self.T):
            raise IndexError(f"diffusion step {t} outside [1, {self.T}]")


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if int(T) < 1:
        raise ConfigError("T", "must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError("beta", f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, int(T))])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    posterior_var = np.zeros(T + 1)
    posterior_var[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    return NoiseSchedule(int(T), beta, alpha, alpha_bar, posterior_var)


def scaled_beta_bounds(T: int, beta_start=BASE_BETA_START, beta_end=BASE_BETA_END):
    """Rescale the 1000-step linear bounds so a T-step chain covers a comparable noise range."""
    scale = BASE_STEPS / int(T)
    return min(beta_start * scale, MAX_BETA), min(beta_end * scale, MAX_BETA)


def _as_column(values, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(np.asarray(values), dtype=like.dtype)
    return v[:, None] if v.dim() == 1 and like.dim() == 2 else v


def q_sample(schedule: NoiseSchedule, x0, t, eps):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps; t is an int or one step per row."""
    schedule.check_step(t)
    x0 = torch.as_tensor(x0)
    eps = torch.as_tensor(eps, dtype=x0.dtype)
    ab = _as_column(schedule.alpha_bar[np.asarray(t)], x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def time_embedding(t, dim: int, dtype=torch.float32) -> torch.Tensor:
    if dim % 2:
        raise ConfigError("time_embed_dim", "must be even")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    tt = torch.as_tensor(t, dtype=torch.float64)
    args = tt[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1).to(dtype)


@dataclass
class DenoiserConfig:
    feature_dim: int = 128
    time_embed_dim: int = 32
    text_embed_dim: int = 64
    hidden: tuple = (256, 128)
    init_seed: int = 0

    def validate(self):
        if not self.hidden or any(int(h) < 1 for h in self.hidden):
            raise ConfigError("hidden", "must be a nonempty list of positive widths")
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim", "must be even")


class Denoiser(nn.Module):
    """Skip-connected bottleneck MLP predicting x0 from (x_t, E_t, E_f).

    Widths go down through ``hidden`` and back up in mirror order; every
    decoder activation is summed with the encoder activation of equal width.
    Time and text embeddings enter every hidden layer through their own
    affine maps, added before the layer norm. A time-gated copy of x_t is
    added to the output so low-noise steps can pass the input through; the
    gate starts at zero.
    """

    def __init__(self, config: DenoiserConfig, dtype=torch.float32):
        super().__init__()
        config.validate()
        self.config = config
        hidden = [int(h) for h in config.hidden]
        down_widths = hidden
        up_widths = hidden[-2::-1]
        self.down = nn.ModuleList()
        cin = config.feature_dim
        for w in down_widths:
            self.down.append(nn.Linear(cin, w))
            cin = w
        self.up = nn.ModuleList()
        for w in up_widths:
            self.up.append(nn.Linear(cin, w))
            cin = w
        self.out = nn.Linear(cin, config.feature_dim)
        widths = down_widths + up_widths
        self.norms = nn.ModuleList(nn.LayerNorm(w) for w in widths)
        self.time_proj = nn.ModuleList(nn.Linear(config.time_embed_dim, w) for w in widths)
        self.text_proj = nn.ModuleList(nn.Linear(config.text_embed_dim, w) for w in widths)
        self.skip_gate = nn.Linear(config.time_embed_dim, config.feature_dim)
        self.to(dtype)
        gen = torch.Generator().manual_seed(int(config.init_seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith("norms."):
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias") or name.startswith("skip_gate."):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) / math.sqrt(p.shape[1]))

    def forward(self, x_t, E_t, E_f):
        D = self.config.feature_dim
        if x_t.shape[-1] != D:
            raise ShapeError("feature", D, x_t.shape[-1])
        if E_t.shape[-1] != self.config.time_embed_dim:
            raise ShapeError("time_embed", self.config.time_embed_dim, E_t.shape[-1])
        if E_f.shape[-1] != self.config.text_embed_dim:
            raise ShapeError("text_embed", self.config.text_embed_dim, E_f.shape[-1])
        h = x_t
        skips = []
        k = 0
        for layer in self.down:
            h = F.silu(self.norms[k](layer(h) + self.time_proj[k](E_t) + self.text_proj[k](E_f)))
            skips.append(h)
            k += 1
        skips.pop()  # the bottleneck has no partner
        for layer in self.up:
            h = F.silu(self.norms[k](layer(h) + self.time_proj[k](E_t) + self.text_proj[k](E_f))) + skips.pop()
            k += 1
        return self.out(h) + self.skip_gate(E_t) * x_t


def denoise_predict(model: Denoiser, x_t, t, E_f):
    """Predicted clean feature for step(s) ``t``."""
    E_t = time_embedding(t, model.config.time_embed_dim, dtype=x_t.dtype)
    if x_t.dim() == 2 and E_t.dim() == 1:
        E_t = E_t.expand(x_t.shape[0], -1)
    return model(x_t, E_t, E_f)


def posterior_coefficients(schedule: NoiseSchedule, t):
    """Coefficients (c_x0, c_xt) of the mean of q(x_{t-1} | x_t, x0)."""
    schedule.check_step(t)
    t = np.asarray(t)
    ab, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[t - 1]
    c_x0 = np.sqrt(ab_prev) * schedule.beta[t] / (1.0 - ab)
    c_xt = np.sqrt(schedule.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab)
    return c_x0, c_xt


def posterior_step(schedule: NoiseSchedule, x_t, x0_hat, t, noise):
    """Draw x_{t-1} from the forward posterior with x0 replaced by its estimate."""
    c_x0, c_xt = posterior_coefficients(schedule, t)
    mean = _as_column(c_x0, x_t) * x0_hat + _as_column(c_xt, x_t) * x_t
    sigma = _as_column(np.sqrt(schedule.posterior_var[np.asarray(t)]), x_t)
    return mean + sigma * noise


@torch.no_grad()
def sample(model: Denoiser, schedule: NoiseSchedule, x_start, t_start: int, E_f, rng_seed: int):
    """Run the reverse chain t_start -> 1 and return the final estimate of x0."""
    schedule.check_step(t_start)
    gen = torch.Generator().manual_seed(int(rng_seed))
    x = torch.as_tensor(x_start)
    squeeze = x.dim() == 1
    if squeeze:
        x = x[None]
        E_f = E_f[None] if E_f.dim() == 1 else E_f
    for t in range(int(t_start), 0, -1):
        x0_hat = denoise_predict(model, x, t, E_f)
        noise = torch.randn(x.shape, generator=gen, dtype=x.dtype)
        x = posterior_step(schedule, x, x0_hat, t, noise)
    return x[0] if squeeze else x
