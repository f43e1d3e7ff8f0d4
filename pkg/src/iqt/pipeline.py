"""Training, patch-based inference and checkpoint files."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import load_feature_file
from .errors import ConfigError, FormatError, ShapeError
from .io import ImageBuffer, decode_image
from .model import IQTModel, ModelConfig
from .tensor import AdamState, Tensor, adam_step, backward, cosine_lr, mean, mul, sub

log = logging.getLogger(__name__)

CKPT_MAGIC = b"IQTC"
CKPT_VERSION = 1


# --- patches ---------------------------------------------------------------


@dataclass(frozen=True)
class PatchPlan:
    patch_size: int
    rows: tuple
    cols: tuple

    @property
    def count(self):
        return len(self.rows) * len(self.cols)

    def positions(self):
        return [(top, left) for top in self.rows for left in self.cols]


def _axis_offsets(dim, patch):
    n = math.ceil(dim / patch)
    if n == 1:
        return (0,)
    # round-half-even would shift ties; floor(x + 0.5) rounds them up
    return tuple(int(math.floor(i * (dim - patch) / (n - 1) + 0.5)) for i in range(n))


def plan_patches(image_h, image_w, patch_size):
    """Fewest patches per axis that cover the image, first at 0 and last flush with the edge."""
    if patch_size < 1:
        raise ConfigError(f"patch size must be positive, got {patch_size}")
    if image_h < patch_size or image_w < patch_size:
        raise ShapeError(f"image {image_h}x{image_w} is smaller than the {patch_size}x{patch_size} patch")
    return PatchPlan(patch_size, _axis_offsets(image_h, patch_size), _axis_offsets(image_w, patch_size))


# --- augmentation ----------------------------------------------------------


def apply_transform(pixels, flip, quarter_turns):
    """Horizontal flip (optional) followed by ``quarter_turns`` counter-clockwise rotations."""
    out = pixels[:, ::-1] if flip else pixels
    return np.ascontiguousarray(np.rot90(out, quarter_turns, axes=(0, 1)))


def sample_transform(rng, flip=True, rotate=True):
    do_flip = bool(rng.random() < 0.5) if flip else False
    turns = int(rng.integers(4)) if rotate else 0
    return do_flip, turns


def augment_pair(ref, dist, rng, flip=True, rotate=True):
    """Apply one randomly drawn flip/right-angle rotation identically to both images."""
    do_flip, turns = sample_transform(rng, flip, rotate)
    wrap = isinstance(ref, ImageBuffer)
    r = apply_transform(ref.pixels if wrap else ref, do_flip, turns)
    d = apply_transform(dist.pixels if wrap else dist, do_flip, turns)
    return (ImageBuffer(r), ImageBuffer(d)) if wrap else (r, d)


# --- inference -------------------------------------------------------------


def forward_score(ref_patch, dist_patch, model, records=None):
    p = model.config.patch_size
    shape = ref_patch.pixels.shape if isinstance(ref_patch, ImageBuffer) else np.shape(ref_patch)
    if tuple(shape[:2]) != (p, p):
        raise ShapeError(f"patch is {shape[0]}x{shape[1]}, model expects {p}x{p}")
    return model.score_streams(model.streams(ref_patch, dist_patch), records)


def patch_scores(ref, dist, model):
    if ref.pixels.shape != dist.pixels.shape:
        raise ShapeError(f"reference {ref.pixels.shape} and distorted {dist.pixels.shape} differ in shape")
    plan = plan_patches(ref.height, ref.width, model.config.patch_size)
    p = plan.patch_size
    return [forward_score(ref.crop(t, l, p), dist.crop(t, l, p), model) for t, l in plan.positions()]


def score_pair(ref, dist, model):
    """Mean patch score over the covering patch plan."""
    return float(np.mean(np.asarray(patch_scores(ref, dist, model), dtype=np.float64)))


# --- training --------------------------------------------------------------


@dataclass
class TrainConfig:
    patch_size: int = 256
    batch_size: int = 16
    lr0: float = 2e-4
    total_steps: int = 1000
    seed: int = 0
    flip: bool = True
    rotate: bool = True
    log_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.total_steps < 0 or self.lr0 <= 0:
            raise ConfigError(f"invalid training settings: {self}")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict  # name -> np.ndarray
    step: int = 0
    meta: dict = field(default_factory=dict)
    version: int = CKPT_VERSION
    history: list = field(default_factory=list, repr=False, compare=False)

    def model(self):
        tensors = {k: Tensor(np.array(v, dtype=np.float32), requires_grad=True) for k, v in self.params.items()}
        return IQTModel(self.config, tensors)

    @classmethod
    def from_model(cls, model, step=0, meta=None):
        return cls(model.config, {k: t.data.copy() for k, t in model.params.items()}, step, dict(meta or {}))


def normalize_mos(values):
    """Min-max map to [0, 1]; returns (normalized, lo, hi)."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros_like(values), lo, hi
    return (values - lo) / (hi - lo), lo, hi


class _Sample:
    """One manifest row held in memory, either as images or as feature maps."""

    def __init__(self, entry, features):
        self.entry = entry
        if features:
            self.ref = load_feature_file(entry.ref_path)
            self.dist = load_feature_file(entry.dist_path)
        else:
            self.ref = decode_image(entry.ref_path)
            self.dist = decode_image(entry.dist_path)
            if self.ref.pixels.shape != self.dist.pixels.shape:
                raise ShapeError(f"{entry.ref_path} and {entry.dist_path} differ in size")


def load_samples(entries, features=False):
    samples = []
    for entry in entries:
        try:
            samples.append(_Sample(entry, features))
        except (OSError, FormatError, ShapeError) as exc:
            warnings.warn(f"skipping {entry.ref_path} / {entry.dist_path}: {exc}", stacklevel=2)
    if not samples:
        raise ConfigError("no usable training samples")
    return samples


def train(entries, cfg, model_config, log_path=None, init_model=None):
    """Fit the transformer on (ref, dist, mos) entries; the backbone stays frozen.

    Each step draws a batch, one shared random crop and one shared augmentation
    per pair, and applies an ADAM update on the mean squared error against
    min-max normalized MOS. Returns a Checkpoint whose ``history`` holds
    ``(step, lr, mse)`` rows.
    """
    if not entries:
        raise ConfigError("empty training manifest")
    if cfg.patch_size != model_config.patch_size:
        raise ConfigError(f"train patch size {cfg.patch_size} differs from model patch size {model_config.patch_size}")
    if model_config.backbone.kind == "toy-cnn" and cfg.patch_size % model_config.backbone.downsample:
        raise ConfigError(f"patch size {cfg.patch_size} not divisible by downsample {model_config.backbone.downsample}")
    features = model_config.backbone.kind == "feature-file"
    samples = load_samples(entries, features)
    targets, lo, hi = normalize_mos([s.entry.mos for s in samples])
    model = init_model or IQTModel(model_config, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    cache = {}
    history = []
    p = cfg.patch_size
    n = len(samples)

    for step in range(cfg.total_steps):
        lr = cosine_lr(step, cfg.total_steps, cfg.lr0)
        idx = rng.choice(n, size=cfg.batch_size, replace=cfg.batch_size > n)
        enc, dec = [], []
        for i in idx:
            streams = _training_streams(model, samples[i], i, p, rng, cfg, cache, features)
            e, d = model.route(streams)
            enc.append(e.values)
            dec.append(d.values)
        pred = model.forward(np.stack(enc), np.stack(dec))
        diff = sub(pred, Tensor(targets[idx], dtype=pred.dtype))
        loss = mean(mul(diff, diff))
        for t in model.params.values():
            t.grad = None
        backward(loss)
        adam_step(model.params, {k: t.grad for k, t in model.params.items()}, state, lr)
        mse = float(loss.data)
        history.append((step, lr, mse))
        if cfg.log_every and step % cfg.log_every == 0:
            log.debug("step %d lr %.3g mse %.6g", step, lr, mse)

    ckpt = Checkpoint.from_model(model, step=cfg.total_steps,
                                 meta={"mos_min": lo, "mos_max": hi, "seed": cfg.seed})
    ckpt.history = history
    if log_path is not None:
        write_loss_log(log_path, history)
    return ckpt


def _training_streams(model, sample, index, patch, rng, cfg, cache, features):
    if features:
        key = (index,)
        if key not in cache:
            cache[key] = model.feature_streams(sample.ref, sample.dist)
        return cache[key]
    h, w = sample.ref.height, sample.ref.width
    if h < patch or w < patch:
        raise ShapeError(f"{sample.entry.ref_path} ({h}x{w}) is smaller than the {patch}px patch")
    top = int(rng.integers(h - patch + 1))
    left = int(rng.integers(w - patch + 1))
    flip, turns = sample_transform(rng, cfg.flip, cfg.rotate)
    key = (index, top, left, flip, turns)
    if key not in cache:
        if len(cache) >= 4096:
            cache.clear()
        ref = apply_transform(sample.ref.pixels[top : top + patch, left : left + patch], flip, turns)
        dist = apply_transform(sample.dist.pixels[top : top + patch, left : left + patch], flip, turns)
        cache[key] = model.streams(ref, dist)
    return cache[key]


def write_loss_log(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "mse"])
        for step, lr, mse in history:
            w.writerow([step, repr(lr), repr(mse)])


# --- checkpoint files ------------------------------------------------------

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


def encode_checkpoint(ckpt):
    block = json.dumps(
        {"model": ckpt.config.to_dict(), "step": ckpt.step, "meta": ckpt.meta}, sort_keys=True
    ).encode("utf-8")
    parts = [CKPT_MAGIC, _U16.pack(ckpt.version), _U32.pack(len(block)), block, _U32.pack(len(ckpt.params))]
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, have {len(self.data) - self.pos}",
                              offset=self.pos, path=self.path)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self, what):
        return _U16.unpack(self.take(2, what))[0]

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]


def decode_checkpoint(data, path=None):
    r = _Reader(data, path)
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}", offset=0, path=path)
    version = r.u16("version")
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint version {version} is not supported (expected {CKPT_VERSION})",
                          offset=4, path=path)
    start = r.pos
    block = r.take(r.u32("config length"), "config block")
    try:
        cfg = json.loads(block.decode("utf-8"))
        model_cfg = ModelConfig.from_dict(cfg["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt config block: {exc}", offset=start, path=path) from None
    params = {}
    for _ in range(r.u32("tensor count")):
        name_at = r.pos
        try:
            name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", offset=name_at, path=path) from None
        rank = r.u32(f"rank of {name}")
        if rank > 8:
            raise FormatError(f"implausible rank {rank} for {name}", offset=r.pos - 4, path=path)
        dims = tuple(r.u32(f"dims of {name}") for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        raw = r.take(4 * count, f"payload of {name}")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes", offset=r.pos, path=path)
    return Checkpoint(model_cfg, params, int(cfg.get("step", 0)), dict(cfg.get("meta", {})), version)


def save_checkpoint(ckpt, path):
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path):
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), path=path)
