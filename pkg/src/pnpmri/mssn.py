"""Recurrent multi-head self-attention denoiser.

A first convolution lifts the noisy patch to `features` maps, a stack of
recurrent blocks mixes pixel-wise and channel-wise multi-head attention
with convolutions, two mixing convolutions and a final convolution
produce a noise estimate; the denoised patch is input minus estimate
(residual learning). Block weights are shared across applications when
`tie_blocks` is set. "ssn" mode is the single-head, single-attention-type
ablation (pixel-wise only).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor, assert_finite
from .nn import BatchNormState, batchnorm, conv2d

MODE_MSSN = "mssn"
MODE_SSN = "ssn"


@dataclass
class MssnConfig:
    """Network hyperparameters.

    Defaults are desk-scale; `paper_config()` gives the full-scale
    settings (128 features, 8 blocks, 42x42 patches).
    """

    features: int = 32
    blocks: int = 2
    heads: int = 2
    patch: int = 16
    d_k_pixel: Optional[int] = None    # default: features // heads
    d_v_pixel: Optional[int] = None
    d_k_channel: Optional[int] = None  # default: patch^2 // heads
    d_v_channel: Optional[int] = None
    tie_blocks: bool = True
    mode: str = MODE_MSSN

    def __post_init__(self):
        if self.mode not in (MODE_MSSN, MODE_SSN):
            raise ValueError(f"mode must be '{MODE_MSSN}' or '{MODE_SSN}'")
        if self.mode == MODE_SSN:
            self.heads = 1
        for name in ("features", "blocks", "heads", "patch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        n_pix, n_chan = self.features, self.patch * self.patch
        if self.d_k_pixel is None:
            self.d_k_pixel = max(1, n_pix // self.heads)
        if self.d_v_pixel is None:
            self.d_v_pixel = max(1, n_pix // self.heads)
        if self.d_k_channel is None:
            self.d_k_channel = max(1, n_chan // self.heads)
        if self.d_v_channel is None:
            self.d_v_channel = max(1, n_chan // self.heads)
        for name in ("d_k_pixel", "d_v_pixel", "d_k_channel", "d_v_channel"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.heads * self.d_k_pixel > n_pix:
            raise ValueError("pixel-wise heads*d_k exceeds the feature count")
        if self.heads * self.d_k_channel > n_chan:
            raise ValueError("channel-wise heads*d_k exceeds patch^2")


def paper_config():
    """Full-scale settings from the original experiments."""
    return MssnConfig(features=128, blocks=8, heads=2, patch=42)


def block_prefixes(cfg):
    """Distinct weight groups: one shared group when blocks are tied."""
    if cfg.tie_blocks:
        return ("block",)
    return tuple(f"block{i}" for i in range(cfg.blocks))


def block_sequence(cfg):
    """Weight-group prefix applied at each of the `blocks` applications."""
    if cfg.tie_blocks:
        return ("block",) * cfg.blocks
    return block_prefixes(cfg)


def parameter_shapes(cfg):
    """Ordered name -> shape map of every trainable tensor.

    The census is a pure function of the config; serialization and
    initialization both iterate it in this order.
    """
    f, p = cfg.features, cfg.patch
    n_chan = p * p
    shapes = {"head.weight": (f, 1, 3, 3), "head.bias": (f,)}
    for bp in block_prefixes(cfg):
        for j in range(cfg.heads):
            shapes[f"{bp}.pix.h{j}.wq"] = (f, cfg.d_k_pixel)
            shapes[f"{bp}.pix.h{j}.wk"] = (f, cfg.d_k_pixel)
            shapes[f"{bp}.pix.h{j}.wv"] = (f, cfg.d_v_pixel)
        shapes[f"{bp}.pix.wout"] = (cfg.heads * cfg.d_v_pixel, f)
        if cfg.mode == MODE_MSSN:
            for j in range(cfg.heads):
                shapes[f"{bp}.chan.h{j}.wq"] = (n_chan, cfg.d_k_channel)
                shapes[f"{bp}.chan.h{j}.wk"] = (n_chan, cfg.d_k_channel)
                shapes[f"{bp}.chan.h{j}.wv"] = (n_chan, cfg.d_v_channel)
            shapes[f"{bp}.chan.wout"] = (cfg.heads * cfg.d_v_channel, n_chan)
            mix_in = 2 * f
        else:
            mix_in = f
        shapes[f"{bp}.mix.weight"] = (f, mix_in, 1, 1)
        shapes[f"{bp}.mix.bias"] = (f,)
        for conv in ("1", "2"):
            shapes[f"{bp}.bn{conv}.gamma"] = (f,)
            shapes[f"{bp}.bn{conv}.beta"] = (f,)
            shapes[f"{bp}.conv{conv}.weight"] = (f, f, 3, 3)
            shapes[f"{bp}.conv{conv}.bias"] = (f,)
    for conv in ("1", "2"):
        shapes[f"tail.bn{conv}.gamma"] = (f,)
        shapes[f"tail.bn{conv}.beta"] = (f,)
        shapes[f"tail.conv{conv}.weight"] = (f, f, 3, 3)
        shapes[f"tail.conv{conv}.bias"] = (f,)
    shapes["out.weight"] = (1, f, 3, 3)
    shapes["out.bias"] = (1,)
    return shapes


def bn_keys(cfg):
    keys = []
    for bp in block_prefixes(cfg):
        keys += [f"{bp}.bn1", f"{bp}.bn2"]
    keys += ["tail.bn1", "tail.bn2"]
    return tuple(keys)


def param_count(cfg):
    """Total trainable scalar count (excludes BN running statistics)."""
    return sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())


@dataclass
class MssnWeights:
    """Complete learned state: trainable tensors plus BN running stats."""

    config: MssnConfig
    params: dict  # name -> Tensor with requires_grad=True
    bn: dict      # key -> BatchNormState

    def param_arrays(self):
        return {k: t.data for k, t in self.params.items()}

    def grad_arrays(self):
        return {k: np.zeros_like(t.data) if t.grad is None else t.grad
                for k, t in self.params.items()}

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None


_ATTN_SUFFIXES = (".wq", ".wk", ".wv", ".wout")


def init_weights(cfg, seed=0):
    """He-normal convolutions, Xavier-uniform attention projections, and a
    zero-initialized final convolution so training starts from the
    identity denoiser."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name == "out.weight":
            arr = np.zeros(shape)
        elif name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith((".bias", ".beta")):
            arr = np.zeros(shape)
        elif name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        elif name.endswith(_ATTN_SUFFIXES):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, shape)
        else:  # pragma: no cover - census and init must stay in sync
            raise AssertionError(f"no initializer for {name}")
        params[name] = Tensor(arr, requires_grad=True)
    bn = {k: BatchNormState.initialized(cfg.features) for k in bn_keys(cfg)}
    return MssnWeights(config=cfg, params=params, bn=bn)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def attention(query, key, value):
    """softmax(Query Key^T) Value with no score scaling.

    query/key: (..., M, d_k); value: (..., M, d_v); all share M.
    """
    query, key, value = as_tensor(query), as_tensor(key), as_tensor(value)
    if query.shape[-1] != key.shape[-1]:
        raise ValueError("query/key feature dims disagree")
    if not (query.shape[-2] == key.shape[-2] == value.shape[-2]):
        raise ValueError("query/key/value row counts disagree")
    scores = ad.matmul(query, ad.swap_last(key))
    return ad.matmul(ad.softmax_rows(scores), value)


def multi_head_attention(z, head_weights, w_out):
    """Concatenate per-head attention outputs and project with w_out.

    z: (..., M, n); head_weights: sequence of (wq, wk, wv) with wq/wk of
    shape (n, d_k) and wv of (n, d_v); w_out: (h*d_v, n).
    """
    z = as_tensor(z)
    heads = [attention(ad.matmul(z, wq), ad.matmul(z, wk), ad.matmul(z, wv))
             for wq, wk, wv in head_weights]
    cat = heads[0] if len(heads) == 1 else ad.concat(heads, axis=-1)
    return ad.matmul(cat, w_out)


def _head_triples(params, prefix, heads):
    return [(params[f"{prefix}.h{j}.wq"], params[f"{prefix}.h{j}.wk"],
             params[f"{prefix}.h{j}.wv"]) for j in range(heads)]


def mixed_attention_layer(x, weights, prefix="block"):
    """Pixel-wise and channel-wise self-attention branches, concatenated
    and reduced back to `features` maps by a 1x1 convolution.

    Pixel-wise tokens are the P^2 spatial positions (dim = features);
    channel-wise tokens are the feature maps (dim = P^2).
    """
    cfg = weights.config
    x = as_tensor(x)
    if x.ndim == 3:
        out = mixed_attention_layer(ad.reshape(x, (1,) + x.shape), weights, prefix)
        return ad.reshape(out, out.shape[1:])
    n, f, ph, pw = x.shape
    if f != cfg.features or ph != cfg.patch or pw != cfg.patch:
        raise ValueError(f"feature block {x.shape} does not match config "
                         f"(features={cfg.features}, patch={cfg.patch})")
    p = weights.params
    flat = ad.reshape(x, (n, f, ph * pw))
    pix_tokens = ad.transpose(flat, (0, 2, 1))
    pix = multi_head_attention(pix_tokens, _head_triples(p, f"{prefix}.pix", cfg.heads),
                               p[f"{prefix}.pix.wout"])
    pix = ad.reshape(ad.transpose(pix, (0, 2, 1)), (n, f, ph, pw))
    if cfg.mode == MODE_MSSN:
        chan = multi_head_attention(flat, _head_triples(p, f"{prefix}.chan", cfg.heads),
                                    p[f"{prefix}.chan.wout"])
        chan = ad.reshape(chan, (n, f, ph, pw))
        cat = ad.concat([pix, chan], axis=1)
    else:
        cat = pix
    return conv2d(cat, p[f"{prefix}.mix.weight"], p[f"{prefix}.mix.bias"])


def recurrent_block(x, weights, prefix="block", bn_mode="infer"):
    """attention -> BN -> ReLU -> conv -> BN -> ReLU -> conv -> +input."""
    x = as_tensor(x)
    if x.ndim == 3:
        out = recurrent_block(ad.reshape(x, (1,) + x.shape), weights, prefix, bn_mode)
        return ad.reshape(out, out.shape[1:])
    p, bn = weights.params, weights.bn
    h = mixed_attention_layer(x, weights, prefix)
    h = batchnorm(h, p[f"{prefix}.bn1.gamma"], p[f"{prefix}.bn1.beta"],
                  bn[f"{prefix}.bn1"], bn_mode)
    h = conv2d(ad.relu(h), p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"])
    h = batchnorm(h, p[f"{prefix}.bn2.gamma"], p[f"{prefix}.bn2.beta"],
                  bn[f"{prefix}.bn2"], bn_mode)
    h = conv2d(ad.relu(h), p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"])
    return ad.add(x, h)


def mssn_forward(patch, weights, mode="infer"):
    """Noise estimate for a (1, P, P) patch or an (N, 1, P, P) batch.

    The denoised patch is `patch - mssn_forward(patch, ...)`.
    """
    cfg = weights.config
    x = as_tensor(patch)
    squeeze = x.ndim == 3
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != cfg.patch or x.shape[3] != cfg.patch:
        raise ValueError(f"patch shape {patch.shape if hasattr(patch, 'shape') else '?'} "
                         f"does not match config patch={cfg.patch}")
    p, bn = weights.params, weights.bn
    h = conv2d(x, p["head.weight"], p["head.bias"])
    for bp in block_sequence(cfg):
        h = recurrent_block(h, weights, bp, mode)
    for conv in ("1", "2"):
        h = batchnorm(h, p[f"tail.bn{conv}.gamma"], p[f"tail.bn{conv}.beta"],
                      bn[f"tail.bn{conv}"], mode)
        h = conv2d(ad.relu(h), p[f"tail.conv{conv}.weight"], p[f"tail.conv{conv}.bias"])
    est = conv2d(h, p["out.weight"], p["out.bias"])
    assert_finite(est.data, "mssn activations")
    return ad.reshape(est, est.shape[1:]) if squeeze else est


# ---------------------------------------------------------------------------
# whole-image denoising (the solver plugin adapter)
# ---------------------------------------------------------------------------

def patch_corners(length, patch, stride):
    """Corner offsets {0, s, 2s, ...} clipped to fit, plus the flush corner
    so every pixel is covered."""
    if patch > length:
        raise ValueError(f"patch {patch} exceeds image extent {length}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    corners = list(range(0, length - patch + 1, stride))
    if corners[-1] != length - patch:
        corners.append(length - patch)
    return corners


def mssn_denoise(image, weights, sigma=None, chunk=64):
    """Denoise an (H, W) image by patching with stride P/2 and averaging
    overlapping contributions uniformly.

    `sigma` is accepted for plugin compatibility; a trained network is
    fixed and ignores it.
    """
    cfg = weights.config
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("expected a 2-D image")
    h, w = image.shape
    p = cfg.patch
    if h < p or w < p:
        raise ValueError(f"image {image.shape} smaller than patch {p}")
    stride = max(1, p // 2)
    corners = [(i, j) for i in patch_corners(h, p, stride)
               for j in patch_corners(w, p, stride)]
    patches = np.stack([image[i:i + p, j:j + p] for i, j in corners])
    patches = patches[:, None, :, :]

    est = np.empty_like(patches)
    for lo in range(0, len(corners), chunk):
        batch = patches[lo:lo + chunk]
        est[lo:lo + chunk] = mssn_forward(batch, weights, mode="infer").data
    denoised = patches - est

    acc = np.zeros((h, w))
    count = np.zeros((h, w))
    for idx, (i, j) in enumerate(corners):
        acc[i:i + p, j:j + p] += denoised[idx, 0]
        count[i:i + p, j:j + p] += 1.0
    return acc / count


def make_denoiser(weights):
    """Bind trained weights into a (image, sigma) -> image plugin."""
    def plugin(z, sigma):
        return mssn_denoise(z, weights, sigma)
    return plugin
