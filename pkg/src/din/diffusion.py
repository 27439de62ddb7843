"""Conditional diffusion over label space (the answer diffuser).

The forward process drifts a label point toward the condition vector while
adding Gaussian noise; the reverse process starts near the condition and
walks back to a label estimate using a learned clean-label predictor.

Timesteps are 1-based. Schedule arrays have length ``T + 1`` with index 0
holding the t = 0 convention (beta = 0, alpha_bar = 1, sigma2 = 0).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray

    def posterior_coefficients(self, t: int) -> tuple[float, float, float]:
        """Weights of (y0_hat, y_t, cond) in the mean of q(y_{t-1} | y_t, y0, cond)."""
        b, a = self.beta[t], self.alpha[t]
        ab, ab_prev = self.alpha_bar[t], self.alpha_bar[t - 1]
        g0 = b * math.sqrt(ab_prev) / (1 - ab)
        g1 = (1 - ab_prev) * math.sqrt(a) / (1 - ab)
        g2 = 1 + (math.sqrt(ab) - 1) * (math.sqrt(a) + math.sqrt(ab_prev)) / (1 - ab)
        return g0, g1, g2


def scaled_beta_range(T: int) -> tuple[float, float]:
    """The 1e-4 .. 0.02 linear range of a 1000-step chain, rescaled to ``T`` steps."""
    scale = 1000.0 / T
    return min(1e-4 * scale, 0.5), min(0.02 * scale, 0.999)


def make_schedule(T: int = 50, beta_start: float | None = None, beta_end: float | None = None) -> DiffusionSchedule:
    """Linear beta schedule; unspecified endpoints come from :func:`scaled_beta_range`."""
    if T < 1:
        raise ValueError("need T >= 1")
    default_start, default_end = scaled_beta_range(T)
    beta_start = default_start if beta_start is None else beta_start
    beta_end = default_end if beta_end is None else beta_end
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma2 = np.zeros(T + 1)
    sigma2[1:] = (1 - alpha_bar[:-1]) / (1 - alpha_bar[1:]) * beta[1:]
    return DiffusionSchedule(T, beta, alpha, alpha_bar, sigma2)


def _normal(shape, rng, like):
    if isinstance(rng, np.random.Generator):
        return torch.as_tensor(rng.standard_normal(shape), dtype=like.dtype)
    return torch.randn(shape, generator=rng, dtype=like.dtype)


def _as_t(t, like):
    return torch.as_tensor(t, dtype=torch.long).expand(like.shape[:-1])


def forward_sample(y0, cond, t, sched: DiffusionSchedule, rng, noise=None):
    """Draw y_t ~ N(sqrt(ab_t) y0 + (1 - sqrt(ab_t)) cond, (1 - ab_t) I).

    ``t`` may be a scalar or a per-row tensor of timesteps.
    """
    y0 = torch.as_tensor(y0)
    cond = torch.as_tensor(cond, dtype=y0.dtype)
    ab = torch.as_tensor(sched.alpha_bar, dtype=y0.dtype)[_as_t(t, y0)].unsqueeze(-1)
    if noise is None:
        noise = _normal(y0.shape, rng, y0)
    return ab.sqrt() * y0 + (1 - ab.sqrt()) * cond + (1 - ab).sqrt() * noise


def step_forward(y_prev, cond, t, sched: DiffusionSchedule, rng):
    """One forward kernel: N(sqrt(1-b_t) y_prev + (1 - sqrt(1-b_t)) cond, b_t I)."""
    y_prev = torch.as_tensor(y_prev)
    cond = torch.as_tensor(cond, dtype=y_prev.dtype)
    b = float(sched.beta[t])
    mean = math.sqrt(1 - b) * y_prev + (1 - math.sqrt(1 - b)) * cond
    return mean + math.sqrt(b) * _normal(y_prev.shape, rng, y_prev)


def reverse_mean(y_t, y0_hat, cond, t: int, sched: DiffusionSchedule):
    g0, g1, g2 = sched.posterior_coefficients(t)
    return g0 * y0_hat + g1 * y_t + g2 * cond


def reverse_step(y_t, y0_hat, cond, t: int, sched: DiffusionSchedule, rng, noise=None):
    """Draw y_{t-1} from the posterior given the clean-label estimate. Deterministic at t = 1."""
    y_t = torch.as_tensor(y_t)
    mean = reverse_mean(y_t, torch.as_tensor(y0_hat, dtype=y_t.dtype),
                        torch.as_tensor(cond, dtype=y_t.dtype), t, sched)
    if t == 1:
        return mean
    if noise is None:
        noise = _normal(y_t.shape, rng, y_t)
    return mean + math.sqrt(sched.sigma2[t]) * noise


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(1, half))
    ang = t.to(torch.float64).unsqueeze(-1) * freqs
    emb = torch.cat([ang.sin(), ang.cos()], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Denoiser(nn.Module):
    """Predicts the clean label from (y_t, cond, t) with a small MLP."""

    def __init__(self, num_classes: int, hidden: int = 128, time_dim: int = 32):
        super().__init__()
        self.num_classes = num_classes
        self.time_dim = time_dim
        self.net = nn.Sequential(
            nn.Linear(2 * num_classes + time_dim, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
            nn.SiLU(),
            nn.Linear(hidden, num_classes),
        )

    def forward(self, y_t, cond, t):
        t = torch.as_tensor(t, dtype=torch.long).expand(y_t.shape[:-1])
        temb = timestep_embedding(t, self.time_dim).to(y_t.dtype)
        return self.net(torch.cat([y_t, cond, temb], dim=-1))


def denoise_predict(net: Denoiser, y_t, cond, t):
    out = net(y_t, cond, t)
    if not torch.isfinite(out).all():
        raise FloatingPointError("denoiser produced non-finite output")
    return out


def _init_state(cond, sched, init, noise):
    if init == "terminal":
        return cond + math.sqrt(1 - sched.alpha_bar[sched.T]) * noise
    if init == "gaussian":
        return noise
    raise ValueError(f"unknown init mode {init!r}")


@torch.no_grad()
def sample_answer(net: Denoiser, cond, sched: DiffusionSchedule, rng=None, init="terminal",
                  noise=None, trace=None):
    """Run the reverse chain t = T..1; return the final label point and its argmax.

    ``noise`` optionally supplies all draws up front as a tensor of shape
    (T, ..., L): slot 0 initialises y_T and slot k (k >= 1) feeds the step
    at t = T + 1 - k. This lets batched chains use per-sample generators.
    """
    cond = torch.as_tensor(cond)
    if noise is None:
        noise = _normal((sched.T,) + tuple(cond.shape), rng, cond)
    y = _init_state(cond, sched, init, noise[0])
    for t in range(sched.T, 0, -1):
        y0_hat = denoise_predict(net, y, cond, t)
        eps = noise[sched.T + 1 - t] if t > 1 else None
        y = reverse_step(y, y0_hat, cond, t, sched, None, noise=eps)
        if trace is not None:
            trace.append((t, float(y.norm()), int(y0_hat.reshape(-1, y.shape[-1])[0].argmax())))
        if not torch.isfinite(y).all():
            raise FloatingPointError(f"non-finite reverse trajectory at t={t}")
    return y, y.argmax(-1)


def dif_loss(y_pred, y_bar, kind="mse"):
    """Diffusion supervision: MSE to the pseudo-label, or KL(y_bar || softmax(y_pred))."""
    if y_pred.shape != y_bar.shape:
        raise ValueError(f"shape mismatch {tuple(y_pred.shape)} vs {tuple(y_bar.shape)}")
    if kind == "mse":
        return F.mse_loss(y_pred, y_bar)
    if kind == "kl":
        logq = torch.log_softmax(y_pred, dim=-1)
        kl = torch.xlogy(y_bar, y_bar) - y_bar * logq
        return kl.sum(-1).mean()
    raise ValueError(f"unknown diffusion loss {kind!r}")
