"""Training recipe for the attention denoiser: patch extraction, noise
injection, MSE-on-residual loss, Adam with a halving learning-rate
schedule, per-epoch checkpoints, and denoising evaluation.

Noise lives on the [0, 1] image scale; the default std 5/255 corresponds
to sigma = 5 on 8-bit images. Each patch keeps one fixed noise
realization per (seed, patch index); epochs reshuffle order only.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import persistence
from .autodiff import DivergenceError, Tensor, as_tensor, mean_all, square, sub
from .imaging import psnr_db
from .mssn import MssnConfig, MssnWeights, init_weights, mssn_denoise, mssn_forward, patch_corners
from .nn import AdamState, adam_step

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    patch: int = 16
    stride: int = 8
    sigma: float = 5.0 / 255.0      # noise std on the [0, 1] scale
    epochs: int = 2
    batch: int = 16
    lr0: float = 1e-3
    halving_period: int = 50_000    # optimizer iterations per halving
    seed: int = 0
    data_dir: Optional[str] = None

    def validate(self):
        if self.patch < 1 or self.stride < 1 or self.stride > self.patch:
            raise ValueError("need 1 <= stride <= patch")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.epochs < 1 or self.batch < 1 or self.halving_period < 1:
            raise ValueError("epochs, batch and halving_period must be >= 1")


def paper_train_config(data_dir=None, seed=0):
    """Full-scale recipe: 42x42 patches, sigma 5/255, lr 1e-3 halved every
    5e4 iterations, 80 epochs."""
    return TrainConfig(patch=42, stride=21, sigma=5.0 / 255.0, epochs=80,
                       batch=16, lr0=1e-3, halving_period=50_000,
                       seed=seed, data_dir=data_dir)


# ---------------------------------------------------------------------------
# dataset construction
# ---------------------------------------------------------------------------

def extract_patches(image, patch, stride):
    """All patch-size windows with corners {0, s, 2s, ...} plus the
    right/bottom-flush corners, in row-major corner order."""
    image = np.asarray(image, dtype=np.float64)
    rows = patch_corners(image.shape[0], patch, stride)
    cols = patch_corners(image.shape[1], patch, stride)
    return [image[i:i + patch, j:j + patch].copy() for i in rows for j in cols]


def add_noise(patch, sigma, seed):
    """Return (noisy, noise) with i.i.d. Gaussian noise of std sigma.

    `seed` may be an int or a sequence (e.g. (run_seed, patch_index)) for
    per-sample determinism.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    patch = np.asarray(patch, dtype=np.float64)
    if sigma == 0:
        noise = np.zeros_like(patch)
    else:
        noise = sigma * np.random.default_rng(seed).standard_normal(patch.shape)
    return patch + noise, noise


def lr_at(iteration, cfg: TrainConfig):
    """lr0 * 0.5^floor(iteration / halving_period)."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.lr0 * 0.5 ** (iteration // cfg.halving_period)


def synthesize_image(size, seed):
    """Piecewise-smooth random-ellipse image in [0, 1]; deterministic."""
    rng = np.random.default_rng(seed)
    ax = np.linspace(-1.0, 1.0, size)
    xg, yg = np.meshgrid(ax, ax)
    img = 0.1 * rng.uniform() * (xg + 1.0) + 0.1 * rng.uniform() * (yg + 1.0)
    for _ in range(int(rng.integers(3, 8))):
        x0, y0 = rng.uniform(-0.6, 0.6, size=2)
        a, b = rng.uniform(0.08, 0.55, size=2)
        phi = rng.uniform(0.0, math.pi)
        amp = rng.uniform(0.1, 0.8)
        xr = (xg - x0) * math.cos(phi) + (yg - y0) * math.sin(phi)
        yr = -(xg - x0) * math.sin(phi) + (yg - y0) * math.cos(phi)
        inside = (xr / a) ** 2 + (yr / b) ** 2 <= 1.0
        img[inside] = amp
    return np.clip(img, 0.0, 1.0)


def synthesize_dataset(count, size, seed):
    return [synthesize_image(size, (seed, i)) for i in range(count)]


def load_images(data_dir):
    """Read every IMGF/PGM image under `data_dir`, sorted by filename."""
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory not found: {data_dir}")
    images = []
    for path in sorted(root.iterdir()):
        if path.suffix.lower() == ".imgf":
            images.append(persistence.read_imgf(path))
        elif path.suffix.lower() == ".pgm":
            images.append(persistence.read_pgm(path))
    return images


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class LossCurve:
    epoch_mean: list = field(default_factory=list)
    epoch_lr: list = field(default_factory=list)
    batch_losses: list = field(default_factory=list)

    @property
    def initial_loss(self):
        return self.batch_losses[0]

    def to_csv(self, path=None):
        lines = ["epoch,mean_loss,lr"]
        for e, (loss, lr) in enumerate(zip(self.epoch_mean, self.epoch_lr), start=1):
            lines.append(f"{e},{format(loss, '.12g')},{format(lr, '.12g')}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def train_patches(patches, cfg: TrainConfig, mssn_cfg: MssnConfig, out_dir=None):
    """Train on an explicit list of clean P x P patches.

    Returns (weights, LossCurve). The network learns to predict the noise
    realization added to each patch; checkpoints are written per epoch
    when `out_dir` is given (the final checkpoint is canonical).
    """
    cfg.validate()
    if len(patches) == 0:
        raise ValueError("empty training set")
    if mssn_cfg.patch != cfg.patch:
        raise ValueError("network patch size must match the training patch size")

    noisy = np.empty((len(patches), 1, cfg.patch, cfg.patch))
    target = np.empty_like(noisy)
    for idx, clean in enumerate(patches):
        if clean.shape != (cfg.patch, cfg.patch):
            raise ValueError(f"patch {idx} has shape {clean.shape}")
        noisy[idx, 0], target[idx, 0] = add_noise(clean, cfg.sigma, (cfg.seed, 0, idx))

    weights = init_weights(mssn_cfg, seed=cfg.seed)
    opt = AdamState()
    shuffle_rng = np.random.default_rng((cfg.seed, 1))
    curve = LossCurve()
    iteration = 0

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(patches))
        epoch_losses = []
        epoch_lr = lr_at(iteration, cfg)
        for lo in range(0, len(order), cfg.batch):
            sel = order[lo:lo + cfg.batch]
            x = Tensor(noisy[sel])
            est = mssn_forward(x, weights, mode="train")
            loss = mean_all(square(sub(est, as_tensor(target[sel]))))
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise DivergenceError(f"non-finite training loss at iteration {iteration}")
            weights.zero_grads()
            loss.backward()
            adam_step(weights.param_arrays(), weights.grad_arrays(), opt,
                      lr_at(iteration, cfg))
            iteration += 1
            epoch_losses.append(loss_val)
            curve.batch_losses.append(loss_val)
        curve.epoch_mean.append(float(np.mean(epoch_losses)))
        curve.epoch_lr.append(epoch_lr)
        logger.info("epoch %d: mean loss %.6g (lr %.3g)", epoch,
                    curve.epoch_mean[-1], epoch_lr)
        if out_dir is not None:
            persistence.save_weights(weights, out_dir / f"ckpt_epoch{epoch:04d}.mssn")
    return weights, curve


def train(cfg: TrainConfig, mssn_cfg: MssnConfig, out_dir=None):
    """Train from the images in cfg.data_dir (IMGF or PGM, values in [0, 1])."""
    images = load_images(cfg.data_dir)
    if not images:
        raise ValueError(f"no IMGF/PGM images found in {cfg.data_dir}")
    patches = []
    for img in images:
        patches.extend(extract_patches(img, cfg.patch, cfg.stride))
    return train_patches(patches, cfg, mssn_cfg, out_dir=out_dir)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    psnr_in: list
    psnr_out: list

    @property
    def mean_psnr_in(self):
        return float(np.mean(self.psnr_in))

    @property
    def mean_psnr_out(self):
        return float(np.mean(self.psnr_out))


def eval_denoiser(weights: MssnWeights, cfg: TrainConfig, test_images):
    """Add noise at cfg.sigma to each test image, denoise, and report
    input vs. output PSNR (peak 1)."""
    psnr_in, psnr_out = [], []
    for idx, clean in enumerate(test_images):
        noisy, _ = add_noise(clean, cfg.sigma, (cfg.seed, 2, idx))
        restored = mssn_denoise(noisy, weights)
        psnr_in.append(psnr_db(noisy, clean))
        psnr_out.append(psnr_db(restored, clean))
    return EvalReport(psnr_in=psnr_in, psnr_out=psnr_out)
