"""Frozen multi-stage feature extractors and the IQTF feature file format.

Two backbones share one contract: ``S`` stage outputs of identical spatial
shape and width ``c`` concatenated along channels into an (H, W, S*c) map.

* ``toy-cnn`` -- stride-2 3x3 stem convolutions followed by ``S`` parallel 3x3
  stages, all with frozen seeded-random weights.
* ``feature-file`` -- features computed elsewhere (e.g. by Inception-ResNet-V2)
  and stored as IQTF files. Its grid geometry follows that network's stem.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, FormatError, ShapeError
from .io import ImageBuffer

KINDS = ("toy-cnn", "feature-file")

IQTF_MAGIC = b"IQTF"
IQTF_VERSION = 1
_IQTF_HEADER = struct.Struct("<4sHIII")
# Refuse to allocate absurd maps from a corrupt header.
_MAX_FEATURE_VALUES = 1 << 31


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "toy-cnn"
    stages: int = 6
    channels: int = 4
    downsample: int = 8
    stem_channels: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"backbone kind must be one of {KINDS}, got {self.kind!r}")
        if self.stages < 1 or self.channels < 1 or self.stem_channels < 1:
            raise ConfigError(f"backbone extents must be >= 1: {self}")
        if self.kind == "toy-cnn" and (self.downsample < 1 or self.downsample & (self.downsample - 1)):
            raise ConfigError(f"toy downsample must be a power of two, got {self.downsample}")

    @property
    def total_channels(self):
        return self.stages * self.channels

    @property
    def stem_depth(self):
        return int(math.log2(self.downsample))

    def grid(self, size):
        """Feature-grid extent produced from an input extent ``size``."""
        if self.kind == "feature-file":
            return inception_grid(size)
        for _ in range(self.stem_depth):
            size = (size + 1) // 2
        return size

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def inception_backbone(seed=0):
    """Six 320-channel stages, as exported from Inception-ResNet-V2."""
    return BackboneSpec(kind="feature-file", stages=6, channels=320, seed=seed)


def inception_grid(size):
    """Spatial extent after the Inception-ResNet-V2 stem (valid padding) up to mixed_5b.

    conv3x3/2, conv3x3, conv3x3(same), maxpool3/2, conv1x1, conv3x3, maxpool3/2.
    The block35 layers keep this extent.
    """
    size = (size - 3) // 2 + 1
    size -= 2
    size = (size - 3) // 2 + 1
    size -= 2
    size = (size - 3) // 2 + 1
    if size < 1:
        raise ShapeError("input extent too small for the Inception stem")
    return size


@dataclass
class FeatureMap:
    """Rank-3 (H, W, C) array of backbone features; C is ``stages`` blocks of equal width."""

    values: np.ndarray
    stages: int = 1

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or min(v.shape) < 1:
            raise ShapeError(f"feature map must be H x W x C with extents >= 1, got {v.shape}")
        if v.shape[2] % self.stages:
            raise ShapeError(f"{v.shape[2]} channels do not split into {self.stages} stages")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]

    @property
    def shape(self):
        return self.values.shape


def _conv3x3(x, w, b, stride):
    """Zero-padded 3x3 convolution of (H, W, Cin) with (3, 3, Cin, Cout) weights."""
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))[::stride, ::stride]
    # win: (H', W', Cin, 3, 3)
    return np.tensordot(win, w, axes=([3, 4, 2], [0, 1, 2])) + b


class ToyBackbone:
    """Frozen seeded-random conv stem; weights live in ``self.weights`` as numpy arrays."""

    def __init__(self, spec, weights=None):
        if spec.kind != "toy-cnn":
            raise ConfigError(f"ToyBackbone needs a toy-cnn spec, got {spec.kind!r}")
        self.spec = spec
        self.weights = weights if weights is not None else self._init_weights(spec)

    @staticmethod
    def _init_weights(spec):
        rng = np.random.default_rng(spec.seed)
        weights = {}
        cin = 3
        for i in range(spec.stem_depth):
            weights[f"stem.{i}.w"] = rng.normal(0.0, math.sqrt(2.0 / (9 * cin)), (3, 3, cin, spec.stem_channels))
            weights[f"stem.{i}.b"] = np.zeros(spec.stem_channels)
            cin = spec.stem_channels
        for s in range(spec.stages):
            weights[f"stage.{s}.w"] = rng.normal(0.0, math.sqrt(2.0 / (9 * cin)), (3, 3, cin, spec.channels))
            weights[f"stage.{s}.b"] = rng.normal(0.0, 0.1, spec.channels)
        return weights

    def __call__(self, x):
        """Features of an already-normalized (H, W, 3) array."""
        spec = self.spec
        h = np.asarray(x, dtype=np.float64)
        for i in range(spec.stem_depth):
            h = np.maximum(_conv3x3(h, self.weights[f"stem.{i}.w"], self.weights[f"stem.{i}.b"], 2), 0.0)
        outs = [
            np.maximum(_conv3x3(h, self.weights[f"stage.{s}.w"], self.weights[f"stage.{s}.b"], 1), 0.0)
            for s in range(spec.stages)
        ]
        return FeatureMap(np.concatenate(outs, axis=2).astype(np.float32), stages=spec.stages)


@functools.lru_cache(maxsize=16)
def build_backbone(spec):
    return ToyBackbone(spec)


def normalize_image(image):
    """Map [0, 1] samples to [-1, 1]."""
    pixels = image.pixels if isinstance(image, ImageBuffer) else np.asarray(image)
    return pixels * 2.0 - 1.0


def extract_features(image, backbone):
    """Run ``image`` through a toy backbone (a ToyBackbone or its BackboneSpec)."""
    if isinstance(backbone, BackboneSpec):
        if backbone.kind == "feature-file":
            raise ConfigError("feature-file backbones cannot process images; load features with load_feature_file")
        backbone = build_backbone(backbone)
    pixels = image.pixels if isinstance(image, ImageBuffer) else np.asarray(image)
    cell = backbone.spec.downsample
    if pixels.shape[0] < cell or pixels.shape[1] < cell:
        raise ShapeError(f"image {pixels.shape[0]}x{pixels.shape[1]} is smaller than one {cell}x{cell} cell")
    return backbone(normalize_image(pixels))


def diff_features(f_ref, f_dist):
    if f_ref.shape != f_dist.shape:
        raise ShapeError(f"feature maps differ in shape: {f_ref.shape} vs {f_dist.shape}")
    return FeatureMap(f_ref.values - f_dist.values, stages=f_ref.stages)


# --- IQTF files ------------------------------------------------------------


def encode_feature_file(fmap):
    v = np.ascontiguousarray(fmap.values, dtype="<f4")
    h, w, c = v.shape
    return _IQTF_HEADER.pack(IQTF_MAGIC, IQTF_VERSION, h, w, c) + v.tobytes()


def decode_feature_file(data, path=None, stages=1):
    if len(data) < _IQTF_HEADER.size:
        raise FormatError(f"truncated header: {len(data)} of {_IQTF_HEADER.size} bytes", offset=len(data), path=path)
    magic, version, h, w, c = _IQTF_HEADER.unpack_from(data)
    if magic != IQTF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {IQTF_MAGIC!r}", offset=0, path=path)
    if version != IQTF_VERSION:
        raise FormatError(f"unsupported IQTF version {version}", offset=4, path=path)
    if min(h, w, c) < 1:
        raise FormatError(f"zero extent in dims {h}x{w}x{c}", offset=6, path=path)
    count = h * w * c
    if count > _MAX_FEATURE_VALUES:
        raise FormatError(f"dims {h}x{w}x{c} overflow the supported size", offset=6, path=path)
    payload = len(data) - _IQTF_HEADER.size
    if payload < 4 * count:
        raise FormatError(f"truncated payload: need {4 * count} bytes, have {payload}", offset=len(data), path=path)
    if payload > 4 * count:
        raise FormatError(f"{payload - 4 * count} trailing bytes after payload",
                          offset=_IQTF_HEADER.size + 4 * count, path=path)
    values = np.frombuffer(data, dtype="<f4", count=count, offset=_IQTF_HEADER.size).reshape(h, w, c)
    if c % stages:
        stages = 1
    return FeatureMap(values.astype(np.float32), stages=stages)


def save_feature_file(fmap, path):
    Path(path).write_bytes(encode_feature_file(fmap))


def load_feature_file(path, stages=1):
    path = Path(path)
    return decode_feature_file(path.read_bytes(), path=path, stages=stages)
