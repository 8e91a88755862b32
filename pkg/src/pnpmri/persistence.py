"""Bit-exact serialization: network weights ("MSSN"), images ("IMGF"),
k-space measurements ("KSPC"), and 8-bit binary PGM.

All integers are little-endian; all stored reals are IEEE-754 32-bit.
Malformed input is always rejected, never repaired.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .imaging import KSpaceMeasurement
from .mssn import MODE_MSSN, MODE_SSN, MssnConfig, MssnWeights, bn_keys, parameter_shapes
from .nn import BatchNormState

WEIGHTS_MAGIC = b"MSSN"
WEIGHTS_VERSION = 1
IMGF_MAGIC = b"IMGF"
KSPC_MAGIC = b"KSPC"

_MAX_PIXELS = 2 ** 28  # dimension-overflow guard


class FormatError(Exception):
    """Base class for malformed serialized data."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class CensusError(FormatError):
    """Stored tensors do not match the parameter census of the config."""


class TruncatedError(FormatError):
    pass


class _Reader:
    """Cursor over a byte buffer that raises TruncatedError on short reads."""

    def __init__(self, data, what):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n, context=""):
        if self.pos + n > len(self.data):
            where = f" while reading {context}" if context else ""
            raise TruncatedError(f"{self.what}: truncated{where}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self, context=""):
        return self.take(1, context)[0]

    def u16(self, context=""):
        return struct.unpack("<H", self.take(2, context))[0]

    def u32(self, context=""):
        return struct.unpack("<I", self.take(4, context))[0]

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: trailing bytes after payload")


def _check_dims(h, w, what):
    if h < 1 or w < 1:
        raise FormatError(f"{what}: dimensions must be positive")
    if h * w > _MAX_PIXELS:
        raise FormatError(f"{what}: dimension overflow ({h}x{w})")


# ---------------------------------------------------------------------------
# IMGF
# ---------------------------------------------------------------------------

def write_imgf(path, image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("IMGF stores 2-D images")
    h, w = image.shape
    payload = IMGF_MAGIC + struct.pack("<II", h, w) + image.astype("<f4").tobytes()
    Path(path).write_bytes(payload)


def read_imgf(path):
    data = Path(path).read_bytes()
    r = _Reader(data, "IMGF")
    if r.take(4, "magic") != IMGF_MAGIC:
        raise BadMagicError("IMGF: bad magic")
    h, w = r.u32("height"), r.u32("width")
    _check_dims(h, w, "IMGF")
    raw = r.take(4 * h * w, "pixel data")
    r.done()
    return np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float64)


# ---------------------------------------------------------------------------
# KSPC
# ---------------------------------------------------------------------------

def write_kspace(path, measurement: KSpaceMeasurement):
    vals = np.asarray(measurement.values, dtype=np.complex128)
    mask = np.asarray(measurement.mask, dtype=np.uint8)
    if vals.shape != mask.shape or vals.ndim != 2:
        raise ValueError("values/mask must be matching 2-D arrays")
    if np.any(vals[mask == 0] != 0):
        raise ValueError("measurement has nonzero values outside the mask")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask entries must be 0 or 1")
    h, w = vals.shape
    inter = np.empty((h, w, 2), dtype="<f4")
    inter[..., 0] = vals.real
    inter[..., 1] = vals.imag
    payload = (KSPC_MAGIC + struct.pack("<II", h, w)
               + inter.tobytes() + mask.tobytes())
    Path(path).write_bytes(payload)


def read_kspace(path):
    data = Path(path).read_bytes()
    r = _Reader(data, "KSPC")
    if r.take(4, "magic") != KSPC_MAGIC:
        raise BadMagicError("KSPC: bad magic")
    h, w = r.u32("height"), r.u32("width")
    _check_dims(h, w, "KSPC")
    raw = r.take(8 * h * w, "k-space values")
    inter = np.frombuffer(raw, dtype="<f4").reshape(h, w, 2).astype(np.float64)
    mask = np.frombuffer(r.take(h * w, "mask bytes"), dtype=np.uint8).reshape(h, w)
    r.done()
    if not np.all((mask == 0) | (mask == 1)):
        raise FormatError("KSPC: mask bytes must be 0 or 1")
    vals = inter[..., 0] + 1j * inter[..., 1]
    if np.any(vals[mask == 0] != 0):
        raise FormatError("KSPC: nonzero values outside the mask")
    return KSpaceMeasurement(vals, mask.copy())


# ---------------------------------------------------------------------------
# PGM (8-bit binary, maxval 255)
# ---------------------------------------------------------------------------

def write_pgm(path, image):
    """Write [0, 1] image data as P5 with round-half-up scaling; values
    outside [0, 1] are clipped."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("PGM stores 2-D images")
    h, w = image.shape
    quant = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + quant.tobytes())


def _pgm_tokens(data):
    """Yield (token, end_offset) over the PGM header, honoring # comments."""
    pos = 0
    while pos < len(data):
        ch = data[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            yield data[pos:end], end
            pos = end


def read_pgm(path):
    data = Path(path).read_bytes()
    tokens = _pgm_tokens(data)
    try:
        magic, _ = next(tokens)
    except StopIteration:
        raise TruncatedError("PGM: empty file") from None
    if magic != b"P5":
        raise BadMagicError("PGM: expected binary P5")
    fields = []
    end = 0
    for _ in range(3):
        try:
            tok, end = next(tokens)
        except StopIteration:
            raise TruncatedError("PGM: incomplete header") from None
        if not tok.isdigit():
            raise FormatError(f"PGM: bad header token {tok!r}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"PGM: only maxval 255 is supported, got {maxval}")
    _check_dims(h, w, "PGM")
    raw = data[end + 1:]  # exactly one whitespace byte separates header and raster
    if len(raw) < h * w:
        raise TruncatedError("PGM: truncated raster")
    if len(raw) > h * w:
        raise FormatError("PGM: trailing bytes after raster")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

def file_census(config: MssnConfig):
    """Name -> shape of every tensor stored in a weights file: trainable
    parameters followed by BN running statistics."""
    census = dict(parameter_shapes(config))
    for key in bn_keys(config):
        census[f"{key}.running_mean"] = (config.features,)
        census[f"{key}.running_var"] = (config.features,)
    return census


def _pack_config(cfg: MssnConfig):
    mode_byte = 0 if cfg.mode == MODE_MSSN else 1
    return struct.pack("<8IBB", cfg.features, cfg.blocks, cfg.heads, cfg.patch,
                       cfg.d_k_pixel, cfg.d_k_channel, cfg.d_v_pixel,
                       cfg.d_v_channel, int(cfg.tie_blocks), mode_byte)


def _unpack_config(r: _Reader):
    f, b, h, p, dkp, dkc, dvp, dvc = (r.u32("config") for _ in range(8))
    tie = r.u8("config")
    mode_byte = r.u8("config")
    if tie not in (0, 1):
        raise FormatError(f"weights: bad tie_blocks flag {tie}")
    if mode_byte not in (0, 1):
        raise FormatError(f"weights: bad mode byte {mode_byte}")
    try:
        return MssnConfig(features=f, blocks=b, heads=h, patch=p,
                          d_k_pixel=dkp, d_k_channel=dkc, d_v_pixel=dvp,
                          d_v_channel=dvc, tie_blocks=bool(tie),
                          mode=MODE_MSSN if mode_byte == 0 else MODE_SSN)
    except ValueError as exc:
        raise FormatError(f"weights: invalid config ({exc})") from None


def _weights_tensor_map(weights: MssnWeights):
    tensors = {name: t.data for name, t in weights.params.items()}
    for key in bn_keys(weights.config):
        tensors[f"{key}.running_mean"] = weights.bn[key].running_mean
        tensors[f"{key}.running_var"] = weights.bn[key].running_var
    return tensors


def save_weights(weights: MssnWeights, path):
    """Serialize weights + config; load(save(w)) is bit-identical at the
    32-bit storage precision."""
    cfg = weights.config
    census = file_census(cfg)
    tensors = _weights_tensor_map(weights)
    for name, shape in census.items():
        if name not in tensors or tuple(tensors[name].shape) != shape:
            raise ValueError(f"weights do not match config census at {name!r}")
    parts = [WEIGHTS_MAGIC, struct.pack("<I", WEIGHTS_VERSION), _pack_config(cfg),
             struct.pack("<I", len(census))]
    for name, shape in census.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(np.ascontiguousarray(tensors[name]).astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_weights(path):
    """Deserialize an MSSN weights file, validating the census exactly."""
    data = Path(path).read_bytes()
    r = _Reader(data, "weights")
    if r.take(4, "magic") != WEIGHTS_MAGIC:
        raise BadMagicError("weights: bad magic")
    version = r.u32("version")
    if version != WEIGHTS_VERSION:
        raise VersionError(f"weights: unsupported version {version}")
    cfg = _unpack_config(r)
    count = r.u32("tensor count")
    expected = file_census(cfg)
    if count != len(expected):
        raise CensusError(f"weights: {count} tensors stored, census has {len(expected)}")
    tensors = {}
    for _ in range(count):
        name_len = r.u16("tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8", errors="replace")
        rank = r.u8(f"rank of {name!r}")
        dims = tuple(r.u32(f"dims of {name!r}") for _ in range(rank))
        if name not in expected:
            raise CensusError(f"weights: unexpected tensor {name!r}")
        if name in tensors:
            raise CensusError(f"weights: duplicate tensor {name!r}")
        if dims != expected[name]:
            raise CensusError(f"weights: tensor {name!r} has shape {dims}, "
                              f"census expects {expected[name]}")
        n = int(np.prod(dims)) if dims else 1
        raw = r.take(4 * n, f"values of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float64)
    r.done()
    if set(tensors) != set(expected):  # pragma: no cover - guarded by count check
        raise CensusError("weights: stored tensors do not cover the census")

    params = {name: Tensor(tensors[name], requires_grad=True)
              for name in parameter_shapes(cfg)}
    bn = {}
    for key in bn_keys(cfg):
        bn[key] = BatchNormState(running_mean=tensors[f"{key}.running_mean"].copy(),
                                 running_var=tensors[f"{key}.running_var"].copy(),
                                 num_updates=1)
    return MssnWeights(config=cfg, params=params, bn=bn)
