"""Plug-and-play accelerated proximal gradient solver.

One iteration: gradient step on the k-space data-fidelity term, then a
denoiser in place of the proximal operator, then Nesterov extrapolation
driven by the q_k recurrence. `accelerated=False` pins q_k = 1, giving
the plain proximal-gradient variant.
"""
from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import DivergenceError
from .imaging import KSpaceMeasurement, g_value, grad_g, idft2, snr_db

# A denoiser plugin is any map (image, sigma) -> image of identical dims.
Denoiser = Callable[[np.ndarray, float], np.ndarray]


class PluginContractError(RuntimeError):
    """A denoiser plugin violated its output contract."""


@dataclass
class SolverConfig:
    gamma: float = 1.0      # step size; 1 is safe under the unitary DFT
    sigma: float = 0.0      # denoiser strength, passed through unchanged
    max_iters: int = 50
    tol: float = 0.0        # relative-change early stop; 0 disables
    accelerated: bool = True

    def validate(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")


@dataclass
class TraceRecord:
    k: int
    rel_change: float
    g_value: float
    snr_db: Optional[float]
    ms: float
    q: float  # momentum sequence value, kept for diagnostics


@dataclass
class SolverTrace:
    records: list = field(default_factory=list)

    def append(self, rec):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def to_csv(self, path=None):
        """CSV with header k,rel_change,g_value,snr_db,ms; snr_db empty
        when no reference image was supplied."""
        buf = io.StringIO()
        buf.write("k,rel_change,g_value,snr_db,ms\n")
        for r in self.records:
            snr = "" if r.snr_db is None else format(r.snr_db, ".12g")
            buf.write(f"{r.k},{format(r.rel_change, '.12g')},"
                      f"{format(r.g_value, '.12g')},{snr},{format(r.ms, '.3f')}\n")
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def qk_next(q_prev):
    """Momentum recurrence q_k = (1 + sqrt(1 + 4 q_{k-1}^2)) / 2."""
    if q_prev < 1.0:
        raise ValueError("q must be >= 1")
    return 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * q_prev * q_prev))


def _rel_change(x, x_prev):
    denom = np.linalg.norm(x_prev)
    num = np.linalg.norm(x - x_prev)
    if denom == 0:
        return 0.0 if num == 0 else math.inf
    return float(num / denom)


def pnp_apgm(y: KSpaceMeasurement, x0, denoiser: Denoiser, cfg: SolverConfig,
             ref=None):
    """Run the accelerated plug-and-play solver.

    Returns (reconstruction, trace). Stops after cfg.max_iters iterations
    or as soon as the relative iterate change drops below cfg.tol.
    """
    cfg.validate()
    x_prev = np.array(x0, dtype=np.float64)
    if x_prev.shape != y.mask.shape:
        raise ValueError(f"x0 shape {x_prev.shape} != mask shape {y.mask.shape}")

    s = x_prev.copy()
    q_prev = 1.0
    trace = SolverTrace()
    for k in range(1, cfg.max_iters + 1):
        t0 = time.perf_counter()
        z = s - cfg.gamma * grad_g(s, y)
        x = np.asarray(denoiser(z, cfg.sigma), dtype=np.float64)
        if x.shape != z.shape:
            raise PluginContractError(
                f"denoiser returned shape {x.shape}, expected {z.shape}")
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite iterate at k={k}",
                                  last_finite=x_prev)
        q = qk_next(q_prev) if cfg.accelerated else 1.0
        s = x + ((q_prev - 1.0) / q) * (x - x_prev)
        rel = _rel_change(x, x_prev)
        ms = (time.perf_counter() - t0) * 1000.0
        trace.append(TraceRecord(
            k=k, rel_change=rel, g_value=g_value(x, y),
            snr_db=None if ref is None else snr_db(x, ref), ms=ms, q=q))
        x_prev = x
        q_prev = q
        if rel < cfg.tol:
            break
    return x_prev, trace


def zero_filled(y: KSpaceMeasurement):
    """Inverse DFT of the subsampled k-space (the classical IFFT baseline)."""
    return idft2(y.values).real
