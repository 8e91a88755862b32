"""Neural-net primitives on the autodiff engine: 2-D convolution, batch
normalization, and the Adam optimizer."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, reshape

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x, kernels, bias):
    """Same-size 2-D convolution.

    x: (C_in, H, W) or (N, C_in, H, W); kernels: (C_out, C_in, k, k) with
    k in {1, 3}; bias: (C_out,). 3x3 kernels use zero padding 1, 1x1 use
    padding 0, so spatial dims are preserved.
    """
    x, k, b = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if k.ndim != 4 or k.shape[2] != k.shape[3] or k.shape[2] not in (1, 3):
        raise ValueError(f"kernels must be (C_out, C_in, k, k) with k in {{1, 3}}, got {k.shape}")
    if b.ndim != 1 or b.shape[0] != k.shape[0]:
        raise ValueError(f"bias shape {b.shape} does not match C_out={k.shape[0]}")
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), k, b)
        return reshape(out, out.shape[1:])
    if x.ndim != 4:
        raise ValueError(f"input must be 3-D or 4-D, got shape {x.shape}")
    if x.shape[1] != k.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernels expect {k.shape[1]}")

    xd, kd, bd = x.data, k.data, b.data
    n, cin, h, w = xd.shape
    cout, _, ksz, _ = kd.shape
    pad = ksz // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd

    acc = np.zeros((n, cout, h * w))
    for di in range(ksz):
        for dj in range(ksz):
            xs = xp[:, :, di:di + h, dj:dj + w].reshape(n, cin, h * w)
            acc += np.matmul(kd[:, :, di, dj], xs)
    out = Tensor(acc.reshape(n, cout, h, w) + bd[:, None, None])

    if x.requires_grad or k.requires_grad or b.requires_grad:
        def grad_fn(g):
            g2 = g.reshape(n, cout, h * w)
            gb = g.sum(axis=(0, 2, 3))
            gk = np.zeros_like(kd) if k.requires_grad else None
            gxp = np.zeros_like(xp) if x.requires_grad else None
            for di in range(ksz):
                for dj in range(ksz):
                    if gk is not None:
                        xs = xp[:, :, di:di + h, dj:dj + w].reshape(n, cin, h * w)
                        gk[:, :, di, dj] = np.matmul(g2, xs.transpose(0, 2, 1)).sum(axis=0)
                    if gxp is not None:
                        gxp[:, :, di:di + h, dj:dj + w] += np.matmul(
                            kd[:, :, di, dj].T, g2).reshape(n, cin, h, w)
            gx = None
            if gxp is not None:
                gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
            return gx, gk, gb

        out._record((x, k, b), grad_fn)
    return out


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics owned by exactly one training loop."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    num_updates: int = 0
    _warned: bool = field(default=False, repr=False)

    @classmethod
    def initialized(cls, channels, momentum=0.9, eps=1e-5):
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)


def batchnorm(x, gamma, beta, state, mode="train"):
    """Per-channel batch normalization over an (N, C, H, W) tensor.

    Train mode standardizes by the batch statistics (population variance)
    and updates `state` running stats with momentum; infer mode uses the
    running stats. eps sits inside the square root either way.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ValueError(f"batchnorm expects (N, C, H, W), got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("gamma/beta must be per-channel vectors")
    if state.running_mean.shape != (c,):
        raise ValueError("state channel count does not match input")

    xd = x.data
    axes = (0, 2, 3)
    if mode == "train":
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        if m < 2:
            raise ValueError("train mode needs at least 2 values per channel")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        mom = state.momentum
        state.running_mean = mom * state.running_mean + (1.0 - mom) * mu
        state.running_var = mom * state.running_var + (1.0 - mom) * var
        state.num_updates += 1
    elif mode == "infer":
        if state.num_updates == 0 and not state._warned:
            logger.warning("batchnorm inference before any training update; "
                           "using initialized stats (mean 0, var 1)")
            state._warned = True
        mu, var = state.running_mean, state.running_var
        m = None
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])

    if x.requires_grad or gamma.requires_grad or beta.requires_grad:
        def grad_fn(g):
            gbeta = g.sum(axis=axes)
            ggamma = (g * xhat).sum(axis=axes)
            gsc = g * gamma.data[None, :, None, None]
            if mode == "infer":
                gx = gsc * inv[None, :, None, None]
            else:
                s1 = gsc.sum(axis=axes, keepdims=True)
                s2 = (gsc * xhat).sum(axis=axes, keepdims=True)
                gx = inv[None, :, None, None] * (gsc - s1 / m - xhat * s2 / m)
            return gx, ggamma, gbeta

        out._record((x, gamma, beta), grad_fn)
    return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter first/second moments plus a shared step counter."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(params, grads, state, lr):
    """One Adam update with bias correction, applied in place.

    params/grads: dicts name -> ndarray of matching shapes. The step
    counter increments exactly once per call. Non-finite gradients abort.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params
