"""MRI measurement model: unitary 2-D DFT, radial k-space masks,
measurement synthesis, the data-fidelity gradient, phantom generation and
SNR/PSNR metrics.

Conventions: images are real float64 (H, W) arrays; k-space fields are
complex128 (H, W) arrays in the *unshifted* layout (DC at index (0, 0));
sampling masks are uint8 0/1 arrays in the same layout.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

SNR_CAP_DB = 300.0


class KSpaceMeasurement(NamedTuple):
    """Subsampled k-space values paired with their binary sampling mask.

    Values are exactly zero wherever the mask is zero.
    """

    values: np.ndarray  # complex128 (H, W)
    mask: np.ndarray    # uint8 (H, W), DC at (0, 0)


# ---------------------------------------------------------------------------
# Fourier transforms (unitary normalization, so the fidelity gradient is
# 1-Lipschitz and gamma = 1 is a safe solver step)
# ---------------------------------------------------------------------------

def dft2(x):
    """Unitary 2-D DFT of a real image: fft2(x) / sqrt(H*W)."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape
    return np.fft.fft2(x) / math.sqrt(h * w)


def idft2(field):
    """Unitary inverse 2-D DFT; exact inverse of dft2 (complex output)."""
    field = np.asarray(field, dtype=np.complex128)
    h, w = field.shape
    return np.fft.ifft2(field) * math.sqrt(h * w)


# ---------------------------------------------------------------------------
# radial sampling
# ---------------------------------------------------------------------------

def radial_mask(h, w, lines):
    """Binary mask of `lines` equiangular radial lines through DC.

    For each angle theta_l = l*pi/lines the full diameter is rasterized:
    radius marches 0, 1, 2, ... out to the image corner in both
    directions, each point (r*cos, r*sin) rounded (half up) to the
    nearest grid cell of the centered spectrum, then mapped to the
    unshifted layout. Deterministic; DC is always sampled.
    """
    if lines < 1:
        raise ValueError("lines must be >= 1")
    mask = np.zeros((h, w), dtype=np.uint8)
    rmax = int(math.ceil(math.hypot(h / 2.0, w / 2.0)))
    row_lo, row_hi = -(h // 2), (h - 1) - h // 2
    col_lo, col_hi = -(w // 2), (w - 1) - w // 2
    for l in range(lines):
        theta = l * math.pi / lines
        c, s = math.cos(theta), math.sin(theta)
        for r in range(rmax + 1):
            for sign in (1.0, -1.0):
                col = math.floor(sign * r * c + 0.5)
                row = math.floor(sign * r * s + 0.5)
                if row_lo <= row <= row_hi and col_lo <= col <= col_hi:
                    mask[row % h, col % w] = 1
    return mask


def apply_mask(field, mask):
    """Project a k-space field onto the sampled entries (exact zeros elsewhere)."""
    return np.asarray(field, dtype=np.complex128) * mask


# ---------------------------------------------------------------------------
# measurement model  g(x) = 0.5 * || y - S(F(x)) ||^2
# ---------------------------------------------------------------------------

def measure(x, mask, noise_sigma=0.0, seed=0):
    """Synthesize y = S(F(x)) plus optional complex Gaussian noise.

    Noise has std `noise_sigma` per real/imag component and touches
    sampled entries only. Deterministic for a given seed.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != mask.shape:
        raise ValueError(f"image shape {x.shape} != mask shape {mask.shape}")
    vals = dft2(x)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((2,) + x.shape)
        vals = vals + noise_sigma * (noise[0] + 1j * noise[1])
    return KSpaceMeasurement(apply_mask(vals, mask), np.asarray(mask, dtype=np.uint8))


def g_value(x, y):
    """Data-fidelity value 0.5 * || y - S(F(x)) ||_2^2."""
    resid = apply_mask(dft2(x), y.mask) - y.values
    return 0.5 * float(np.sum(resid.real ** 2 + resid.imag ** 2))


def grad_g(x, y):
    """Gradient of g: Re{ F^H S^T (S F x - y) }.

    With the unitary DFT and a binary mask this is 1-Lipschitz in x.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != y.mask.shape:
        raise ValueError(f"image shape {x.shape} != mask shape {y.mask.shape}")
    resid = apply_mask(dft2(x), y.mask) - y.values
    return idft2(resid).real


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------

# (intensity, a, b, x0, y0, phi_deg) in the [-1, 1]^2 frame, additive
_SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)


def shepp_logan(n):
    """Standard 10-ellipse Shepp-Logan phantom, intensities clipped to [0, 1]."""
    if n < 16:
        raise ValueError("phantom size must be >= 16")
    ax = (np.arange(n) - (n - 1) / 2.0) / ((n - 1) / 2.0)
    xg, yg = np.meshgrid(ax, -ax)  # row 0 is the top of the head (y = +1)
    img = np.zeros((n, n))
    for amp, a, b, x0, y0, phi in _SHEPP_LOGAN:
        ph = math.radians(phi)
        xr = (xg - x0) * math.cos(ph) + (yg - y0) * math.sin(ph)
        yr = -(xg - x0) * math.sin(ph) + (yg - y0) * math.cos(ph)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += amp
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# quality metrics
# ---------------------------------------------------------------------------

def snr_db(x, ref):
    """20*log10(||ref|| / ||x - ref||), capped at +300 dB for exact matches."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    rn = np.linalg.norm(ref)
    if rn == 0:
        raise ValueError("reference image has zero norm")
    en = np.linalg.norm(x - ref)
    if en == 0:
        return SNR_CAP_DB
    return min(SNR_CAP_DB, 20.0 * math.log10(rn / en))


def psnr_db(x, ref, peak=1.0):
    """Peak SNR: 20*log10(peak / rmse), capped like snr_db."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0:
        return SNR_CAP_DB
    return min(SNR_CAP_DB, 20.0 * math.log10(peak) - 10.0 * math.log10(mse))
