"""Non-learned denoiser plugins: identity, Gaussian smoothing, and the
isotropic-TV proximal denoiser (projected dual fixed-point scheme)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def identity_denoiser(z, sigma=0.0):
    """Returns the input unchanged; useful for exercising the solver."""
    return z


def gaussian_denoiser(z, sigma):
    """Truncated-Gaussian smoothing whose kernel std scales linearly with
    sigma (1 px at sigma = 5/255), radius 3*std, reflective boundary."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return z
    z = np.asarray(z, dtype=np.float64)
    std = sigma * 255.0 / 5.0
    radius = max(1, int(round(3.0 * std)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kern = np.exp(-0.5 * (t / std) ** 2)
    kern /= kern.sum()

    out = np.pad(z, radius, mode="reflect")
    # separable passes; the kernel is symmetric so convolution == correlation
    rows = np.zeros((z.shape[0], out.shape[1]))
    for i, kv in enumerate(kern):
        rows += kv * out[i:i + z.shape[0], :]
    cols = np.zeros(z.shape)
    for j, kv in enumerate(kern):
        cols += kv * rows[:, j:j + z.shape[1]]
    return cols


@dataclass
class TvConfig:
    lambda_scale: float = 1.0   # regularization weight as a multiple of sigma
    inner_iters: int = 50
    dual_step: float = 0.248    # must stay <= 0.25 for the dual scheme

    def validate(self):
        if self.lambda_scale <= 0:
            raise ValueError("lambda_scale must be > 0")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1")
        if not 0 < self.dual_step <= 0.25:
            raise ValueError("dual_step must lie in (0, 0.25]")


def _forward_grad(u):
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return gx, gy


def _divergence(px, py):
    d = px.copy()
    d[:, 1:] -= px[:, :-1]
    d += py
    d[1:, :] -= py[:-1, :]
    return d


def tv_iso(u):
    """Isotropic total variation with forward differences."""
    gx, gy = _forward_grad(np.asarray(u, dtype=np.float64))
    return float(np.sum(np.sqrt(gx * gx + gy * gy)))


def tv_objective(u, z, lam):
    """0.5*||u - z||^2 + lam*TV(u); the objective tv_denoise approximates."""
    u = np.asarray(u, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * float(np.sum((u - z) ** 2)) + lam * tv_iso(u)


def tv_denoise(z, sigma, cfg: TvConfig = TvConfig()):
    """Approximate prox of lam*TV_iso at z, with lam = lambda_scale*sigma.

    Runs exactly cfg.inner_iters projected-dual fixed-point iterations;
    lam = 0 returns z unchanged. Deterministic for fixed inputs.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    cfg.validate()
    z = np.asarray(z, dtype=np.float64)
    lam = cfg.lambda_scale * sigma
    if lam == 0:
        return z
    tau = cfg.dual_step
    px = np.zeros_like(z)
    py = np.zeros_like(z)
    for _ in range(cfg.inner_iters):
        gx, gy = _forward_grad(_divergence(px, py) - z / lam)
        denom = 1.0 + tau * np.sqrt(gx * gx + gy * gy)
        px = (px + tau * gx) / denom
        py = (py + tau * gy) / denom
    return z - lam * _divergence(px, py)


def make_tv_denoiser(cfg: TvConfig = TvConfig()):
    """Bind a TvConfig into a (image, sigma) -> image plugin."""
    def plugin(z, sigma):
        return tv_denoise(z, sigma, cfg)
    return plugin
